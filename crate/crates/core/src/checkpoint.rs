//! Self-describing checkpoint container shared by every trainable stage.
//!
//! A checkpoint is one JSON document: a format tag, a mandatory version, the
//! kind of model, an echo of the configuration that built it, free-form
//! metadata (epoch, loss curves, vocabularies) and the named weight arrays.
//! Weights are stored as base64 little-endian `f64` so they round-trip exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use platter_tape::{Matrix, ParamStore};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "platter-checkpoint";
pub const CURRENT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

impl NamedTensor {
    fn encode(name: String, m: &Matrix) -> Self {
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            name,
            rows: m.rows(),
            cols: m.cols(),
            data: BASE64.encode(bytes),
        }
    }

    fn decode(&self) -> Result<Matrix> {
        let bytes = BASE64
            .decode(&self.data)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("tensor {}: {e}", self.name)))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(Error::IncompatibleCheckpoint(format!(
                "tensor {} holds {} bytes, expected {}x{} f64",
                self.name,
                bytes.len(),
                self.rows,
                self.cols
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Matrix::from_vec(self.rows, self.cols, data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Container {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn new(kind: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            format: FORMAT_TAG.to_string(),
            version: CURRENT_VERSION,
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            metadata: serde_json::Value::Object(Default::default()),
            tensors: Vec::new(),
        })
    }

    pub fn set_metadata(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        let value = serde_json::to_value(value)?;
        match &mut self.metadata {
            serde_json::Value::Object(map) => {
                map.insert(key.to_string(), value);
            }
            other => {
                let mut map = serde_json::Map::new();
                map.insert(key.to_string(), value);
                *other = serde_json::Value::Object(map);
            }
        }
        Ok(())
    }

    pub fn metadata<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("{} checkpoint lacks metadata '{key}'", self.kind)))?;
        serde_json::from_value(v.clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("metadata '{key}': {e}")))
    }

    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("{} config: {e}", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Appends every parameter of `store`, names prefixed with `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, m) in store.iter() {
            self.tensors.push(NamedTensor::encode(format!("{prefix}/{name}"), m));
        }
    }

    /// Fills `store` from the tensors under `prefix/`. Every parameter of the
    /// store must be present with the same shape; mismatches are reported together.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        self.load_store_where(prefix, store, |_| true)
    }

    /// Like [`Container::load_store`], restricted to parameter names accepted by `keep`.
    pub fn load_store_where(&self, prefix: &str, store: &mut ParamStore, keep: impl Fn(&str) -> bool) -> Result<()> {
        let want = format!("{prefix}/");
        let mut decoded = Vec::new();
        for t in self.tensors.iter().filter(|t| t.name.starts_with(&want)) {
            let name = &t.name[want.len()..];
            if keep(name) {
                decoded.push((name.to_string(), t.decode()?));
            }
        }
        let mut problems = Vec::new();
        for (name, _) in store.iter().filter(|(n, _)| keep(n)) {
            if !decoded.iter().any(|(n, _)| n == name) {
                problems.push(format!("{name}: missing from checkpoint"));
            }
        }
        if let Err(mut p) = store.load_named(decoded.iter().map(|(n, m)| (n.as_str(), m))) {
            problems.append(&mut p);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompatibleCheckpoint(format!(
                "{prefix} weights do not match: {}",
                problems.join("; ")
            )))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Container = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: "checkpoint".into(),
            message: e.to_string(),
        })?;
        if c.format != FORMAT_TAG {
            return Err(Error::IncompatibleCheckpoint(format!("unknown format tag '{}'", c.format)));
        }
        if c.version != CURRENT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint version {} is not supported (expected {CURRENT_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Hex SHA-256 of the serialized container.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::argument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Matrix::from_vec(2, 2, vec![0.1, -2.5, 1e-300, f64::MAX]));
        s.add("b", Matrix::row_vector(&[std::f64::consts::PI]));
        s
    }

    #[test]
    fn weights_round_trip_bit_exactly_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut c = Container::new("toy", &serde_json::json!({"width": 2})).unwrap();
        c.push_store("m", &store());
        c.set_metadata("epoch", 3).unwrap();
        c.save(&path).unwrap();
        let back = Container::load(&path).unwrap();
        let mut s = ParamStore::new();
        s.add("a", Matrix::zeros(2, 2));
        s.add("b", Matrix::zeros(1, 1));
        back.load_store("m", &mut s).unwrap();
        assert_eq!(s, store());
        assert_eq!(back.metadata::<u32>("epoch").unwrap(), 3);
    }

    #[test]
    fn shape_mismatch_is_reported_with_names() {
        let mut c = Container::new("toy", &()).unwrap();
        c.push_store("m", &store());
        let mut s = ParamStore::new();
        s.add("a", Matrix::zeros(3, 2));
        s.add("c", Matrix::zeros(1, 1));
        let err = c.load_store("m", &mut s).unwrap_err().to_string();
        assert!(err.contains("a: expected (3, 2), found (2, 2)"), "{err}");
        assert!(err.contains("c: missing from checkpoint"), "{err}");
    }

    #[test]
    fn version_field_is_mandatory() {
        let text = r#"{"format":"platter-checkpoint","kind":"toy","config":null,"tensors":[]}"#;
        assert!(Container::from_json(text).is_err());
        let text = r#"{"format":"platter-checkpoint","version":99,"kind":"toy","config":null,"tensors":[]}"#;
        assert!(matches!(Container::from_json(text), Err(Error::IncompatibleCheckpoint(_))));
    }
}
