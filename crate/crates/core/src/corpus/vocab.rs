use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::canon::canonicalize;
use crate::error::{Error, Result};

/// Dictionary of canonical ingredient names with a reserved end-of-sequence id
/// one past the last ingredient.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct IngredientVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    names: Vec<String>,
}

impl TryFrom<VocabularyFile> for IngredientVocabulary {
    type Error = Error;

    fn try_from(f: VocabularyFile) -> Result<Self> {
        Self::from_names(f.names)
    }
}

impl From<IngredientVocabulary> for VocabularyFile {
    fn from(v: IngredientVocabulary) -> Self {
        VocabularyFile { names: v.names }
    }
}

impl IngredientVocabulary {
    /// Builds a vocabulary from names in id order. Names are canonicalized and
    /// must stay unique afterwards.
    pub fn from_names<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut out = Vec::new();
        let mut index = HashMap::new();
        for n in names {
            let c = canonicalize(n.as_ref());
            if c.is_empty() {
                return Err(Error::argument("empty ingredient name in vocabulary"));
            }
            if index.insert(c.clone(), out.len()).is_some() {
                return Err(Error::argument(format!("duplicate ingredient '{c}' after canonicalization")));
            }
            out.push(c);
        }
        Ok(Self { names: out, index })
    }

    /// Number of ingredients, excluding EOS.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn eos_id(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    /// Looks up an (uncanonicalized) name.
    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(&canonicalize(name)).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, names: &[S]) -> EncodedSet {
        let mut bits = vec![0u8; self.len()];
        let mut out_of_vocabulary = Vec::new();
        for n in names {
            match self.id(n.as_ref()) {
                Some(i) => bits[i] = 1,
                None => out_of_vocabulary.push(n.as_ref().to_string()),
            }
        }
        if !out_of_vocabulary.is_empty() {
            log::warn!("{} ingredient name(s) not in vocabulary", out_of_vocabulary.len());
        }
        EncodedSet {
            vector: IngredientSetVector { bits },
            out_of_vocabulary,
        }
    }

    /// Names of the set bits, in id order.
    pub fn decode(&self, vector: &IngredientSetVector) -> Result<Vec<String>> {
        if vector.len() != self.len() {
            return Err(Error::argument(format!(
                "set vector has length {}, vocabulary has {}",
                vector.len(),
                self.len()
            )));
        }
        Ok(vector.ids().map(|i| self.names[i].clone()).collect())
    }

    pub fn names_for(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().filter_map(|&i| self.name(i)).map(str::to_string).collect()
    }
}

/// Binary indicator vector of an ingredient set over the vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IngredientSetVector {
    bits: Vec<u8>,
}

impl IngredientSetVector {
    pub fn zeros(n: usize) -> Self {
        Self { bits: vec![0; n] }
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::argument("set vector entries must be 0 or 1"));
        }
        Ok(Self { bits })
    }

    /// Panics if an id is out of range.
    pub fn from_ids(n: usize, ids: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![0u8; n];
        for i in ids {
            bits[i] = 1;
        }
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn contains(&self, id: usize) -> bool {
        self.bits.get(id) == Some(&1)
    }

    /// Set ids in increasing order.
    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i)
    }

    /// The set size K.
    pub fn cardinality(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSet {
    pub vector: IngredientSetVector,
    pub out_of_vocabulary: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab5() -> IngredientVocabulary {
        IngredientVocabulary::from_names(["salt", "pepper", "basil", "egg", "dill"]).unwrap()
    }

    #[test]
    fn encodes_and_decodes_examples() {
        let v = vocab5();
        let e = v.encode(&["pepper", "egg"]);
        assert_eq!(e.vector.bits(), &[0, 1, 0, 1, 0]);
        assert_eq!(v.decode(&e.vector).unwrap(), vec!["pepper", "egg"]);
        let empty: [&str; 0] = [];
        assert_eq!(v.encode(&empty).vector, IngredientSetVector::zeros(5));
        assert!(v.decode(&IngredientSetVector::zeros(5)).unwrap().is_empty());
        assert_eq!(v.encode(&["salt", "salt"]).vector, v.encode(&["salt"]).vector);
        assert_eq!(v.eos_id(), 5);
    }

    #[test]
    fn out_of_vocabulary_names_are_counted_not_fatal() {
        let e = vocab5().encode(&["Eggs", "saffron"]);
        assert_eq!(e.vector.bits(), &[0, 0, 0, 1, 0]);
        assert_eq!(e.out_of_vocabulary, vec!["saffron"]);
    }

    #[test]
    fn decode_rejects_length_mismatch() {
        assert!(vocab5().decode(&IngredientSetVector::zeros(4)).is_err());
    }

    #[test]
    fn duplicates_after_canonicalization_are_rejected() {
        assert!(IngredientVocabulary::from_names(["egg", "Eggs"]).is_err());
    }

    #[test]
    fn serde_round_trip_rebuilds_index() {
        let v = vocab5();
        let text = serde_json::to_string(&v).unwrap();
        assert_eq!(text, r#"{"names":["salt","pepper","basil","egg","dill"]}"#);
        let back: IngredientVocabulary = serde_json::from_str(&text).unwrap();
        assert_eq!(back.id("dill"), Some(4));
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity_on_subsets(mask in proptest::collection::vec(any::<bool>(), 5)) {
            let v = vocab5();
            let chosen: Vec<String> = v.names().iter().zip(&mask).filter(|(_, &m)| m).map(|(n, _)| n.clone()).collect();
            let back = v.decode(&v.encode(&chosen).vector).unwrap();
            prop_assert_eq!(back, chosen);
        }
    }
}
