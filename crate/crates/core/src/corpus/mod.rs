//! Recipe corpus: records, ingredient vocabulary, set vectors, the layered
//! JSON loader and a procedural toy corpus.

mod canon;
mod image;
mod loader;
mod synthetic;
mod vocab;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ::image::RgbImage;
use serde::{Deserialize, Serialize};

pub use self::canon::{canonicalize, name_from_quantity_line};
pub use self::image::{preprocess_image, preprocess_rgb, ImageTensor, PixelNormalization};
pub use self::loader::{load_recipe_corpus, FilterReport};
pub use self::synthetic::{detect_ingredients, generate_synthetic_corpus, write_layered_corpus, SyntheticConfig};
pub use self::vocab::{EncodedSet, IngredientSetVector, IngredientVocabulary};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(alias = "val")]
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" | "val" | "valid" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::argument(format!("unknown split '{other}'"))),
        }
    }
}

/// Parses a comma-separated split list such as `"train,dev"`; `"all"` selects every split.
pub fn parse_splits(text: &str) -> Result<Vec<Split>> {
    if text.trim().eq_ignore_ascii_case("all") {
        return Ok(Split::ALL.to_vec());
    }
    let mut out: Vec<Split> = text.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::argument("empty split list"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeRecord {
    pub id: String,
    pub title: String,
    /// Canonical, duplicate-free ingredient names.
    pub ingredients: Vec<String>,
    pub ingredients_with_quantity: Vec<String>,
    pub instructions: Vec<String>,
    pub image_paths: Vec<PathBuf>,
    pub split: Split,
}

impl RecipeRecord {
    pub fn first_image(&self) -> Option<&Path> {
        self.image_paths.first().map(PathBuf::as_path)
    }

    /// Canonicalizes ingredient names and removes duplicates, keeping first occurrence.
    pub fn normalize_ingredients(&mut self) {
        let mut seen = HashSet::new();
        self.ingredients = self
            .ingredients
            .iter()
            .map(|n| canonicalize(n))
            .filter(|n| !n.is_empty() && seen.insert(n.clone()))
            .collect();
    }
}

/// A set of recipes plus the vocabulary their ingredient sets are encoded against.
///
/// Images can live on disk (the record paths) or in memory, keyed by the same
/// path; in-memory images take precedence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    records: Vec<RecipeRecord>,
    vocabulary: Option<IngredientVocabulary>,
    images: HashMap<PathBuf, Arc<RgbImage>>,
}

impl Dataset {
    /// Fails on duplicate record ids.
    pub fn new(records: Vec<RecipeRecord>) -> Result<Self> {
        let mut ids = HashSet::new();
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate recipe id '{}'", r.id)));
            }
        }
        Ok(Self {
            records,
            vocabulary: None,
            images: HashMap::new(),
        })
    }

    pub fn with_vocabulary(mut self, vocabulary: IngredientVocabulary) -> Self {
        self.vocabulary = Some(vocabulary);
        self
    }

    pub fn set_vocabulary(&mut self, vocabulary: IngredientVocabulary) {
        self.vocabulary = Some(vocabulary);
    }

    pub(crate) fn insert_image(&mut self, path: PathBuf, image: RgbImage) {
        self.images.insert(path, Arc::new(image));
    }

    pub fn records(&self) -> &[RecipeRecord] {
        &self.records
    }

    pub fn records_mut(&mut self) -> &mut [RecipeRecord] {
        &mut self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn vocabulary(&self) -> Option<&IngredientVocabulary> {
        self.vocabulary.as_ref()
    }

    /// The vocabulary, or a data error if none has been attached.
    pub fn require_vocabulary(&self) -> Result<&IngredientVocabulary> {
        self.vocabulary
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no ingredient vocabulary".into()))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &RecipeRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for r in &self.records {
            *counts.entry(r.split).or_default() += 1;
        }
        counts
    }

    /// A copy holding only records of the given splits.
    pub fn subset(&self, splits: &[Split]) -> Dataset {
        let records: Vec<_> = self.records.iter().filter(|r| splits.contains(&r.split)).cloned().collect();
        self.with_records(records)
    }

    /// A copy with the given records (ids must be unique) sharing this dataset's images and vocabulary.
    pub fn with_records(&self, records: Vec<RecipeRecord>) -> Dataset {
        let keep: HashSet<&PathBuf> = records.iter().flat_map(|r| &r.image_paths).collect();
        Dataset {
            images: self.images.iter().filter(|(p, _)| keep.contains(p)).map(|(p, i)| (p.clone(), i.clone())).collect(),
            records,
            vocabulary: self.vocabulary.clone(),
        }
    }

    pub fn in_memory_image(&self, path: &Path) -> Option<&RgbImage> {
        self.images.get(path).map(Arc::as_ref)
    }

    /// Preprocessed first image of a record.
    pub fn image_tensor(&self, record: &RecipeRecord, side: usize, norm: &PixelNormalization) -> Result<ImageTensor> {
        let path = record
            .first_image()
            .ok_or_else(|| Error::Data(format!("record '{}' has no image", record.id)))?;
        match self.in_memory_image(path) {
            Some(img) => preprocess_rgb(img, side, norm),
            None => preprocess_image(path, side, norm),
        }
    }

    /// Ingredient set vector of a record against the attached vocabulary.
    pub fn set_vector(&self, record: &RecipeRecord) -> Result<IngredientSetVector> {
        Ok(self.require_vocabulary()?.encode(&record.ingredients).vector)
    }
}

/// Vocabulary of the `max_size` most frequent canonical ingredient names,
/// ordered by frequency then lexicographically. Frequencies are counted over
/// the train split when it is nonempty, otherwise over every record.
pub fn build_ingredient_vocabulary(dataset: &Dataset, max_size: usize) -> Result<IngredientVocabulary> {
    if max_size < 1 {
        return Err(Error::argument("vocabulary max_size must be at least 1"));
    }
    if dataset.is_empty() {
        return Err(Error::argument("cannot build a vocabulary from an empty dataset"));
    }
    let has_train = dataset.split(Split::Train).next().is_some();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in dataset.records().iter().filter(|r| !has_train || r.split == Split::Train) {
        let unique: HashSet<String> = r.ingredients.iter().map(|n| canonicalize(n)).filter(|n| !n.is_empty()).collect();
        for n in unique {
            *counts.entry(n).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size);
    IngredientVocabulary::from_names(ranked.into_iter().map(|(n, _)| n))
}
