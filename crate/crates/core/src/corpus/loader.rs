//! Reader for the layered Recipe1M-style layout:
//!
//! ```text
//! <dir>/layer1.json      [{id, title, partition, ingredients: [{text}], instructions: [{text}]}]
//! <dir>/layer2.json      [{id, images: [{id: "<file name>"}]}]          (optional)
//! <dir>/det_ingrs.json   [{id, ingredients: [{text}], valid: [bool]}]   (optional)
//! <dir>/images/          image files, flat or nested by the first four characters of the name
//! ```
//!
//! Without `det_ingrs.json`, canonical names are derived from the quantity
//! lines. Without `layer2.json`, an image named `<recipe id>.jpg` or `.png`
//! is looked up directly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::canon::{canonicalize, name_from_quantity_line};
use super::{Dataset, RecipeRecord, Split};
use crate::error::{Error, Result};

/// Outcome counts for the records of the selected splits.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub loaded: usize,
    pub dropped_no_image: usize,
    pub dropped_corrupt: usize,
    pub dropped_empty_fields: usize,
}

impl FilterReport {
    pub fn dropped(&self) -> usize {
        self.dropped_no_image + self.dropped_corrupt + self.dropped_empty_fields
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TextItem {
    Object { text: String },
    Plain(String),
}

impl TextItem {
    fn into_text(self) -> String {
        match self {
            TextItem::Object { text } | TextItem::Plain(text) => text,
        }
    }
}

#[derive(Deserialize)]
struct Layer1Entry {
    id: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    partition: Option<String>,
    #[serde(default)]
    ingredients: Vec<TextItem>,
    #[serde(default)]
    instructions: Vec<TextItem>,
}

#[derive(Deserialize)]
struct ImageItem {
    id: String,
}

#[derive(Deserialize)]
struct Layer2Entry {
    id: String,
    #[serde(default)]
    images: Vec<ImageItem>,
}

#[derive(Deserialize)]
struct DetEntry {
    id: String,
    ingredients: Vec<TextItem>,
    #[serde(default)]
    valid: Vec<bool>,
}

enum Outcome {
    Keep(RecipeRecord),
    NoImage,
    Corrupt,
    EmptyFields,
}

pub fn load_recipe_corpus(dir: &Path, splits: &[Split]) -> Result<(Dataset, FilterReport)> {
    let layer1_path = dir.join("layer1.json");
    let image_dir = dir.join("images");
    if !image_dir.is_dir() {
        return Err(Error::Data(format!("image directory {} not found", image_dir.display())));
    }
    let layer1: Vec<Layer1Entry> = read_array(&layer1_path)?;

    let det_path = dir.join("det_ingrs.json");
    let detected: Option<HashMap<String, Vec<String>>> = if det_path.exists() {
        let entries: Vec<DetEntry> = read_array(&det_path)?;
        Some(
            entries
                .into_iter()
                .map(|e| {
                    let names = e
                        .ingredients
                        .into_iter()
                        .enumerate()
                        .filter(|(i, _)| e.valid.get(*i).copied().unwrap_or(true))
                        .map(|(_, t)| t.into_text())
                        .collect();
                    (e.id, names)
                })
                .collect(),
        )
    } else {
        None
    };

    let layer2_path = dir.join("layer2.json");
    let layer2: Option<HashMap<String, Vec<String>>> = if layer2_path.exists() {
        let entries: Vec<Layer2Entry> = read_array(&layer2_path)?;
        Some(
            entries
                .into_iter()
                .map(|e| (e.id, e.images.into_iter().map(|i| i.id).collect()))
                .collect(),
        )
    } else {
        None
    };

    let mut selected = Vec::new();
    for (index, entry) in layer1.into_iter().enumerate() {
        let split = match entry.partition.as_deref() {
            None => Split::Train,
            Some(p) => p.parse::<Split>().map_err(|e| Error::Parse {
                context: format!("{} record {index} (id {})", layer1_path.display(), entry.id),
                message: e.to_string(),
            })?,
        };
        if splits.contains(&split) {
            selected.push((entry, split));
        }
    }

    let outcomes: Vec<Outcome> = selected
        .into_par_iter()
        .map(|(entry, split)| {
            let image_names = match &layer2 {
                Some(map) => map.get(&entry.id).cloned().unwrap_or_default(),
                None => vec![format!("{}.jpg", entry.id), format!("{}.png", entry.id)],
            };
            let ingredient_names = detected.as_ref().and_then(|m| m.get(&entry.id)).cloned();
            classify(entry, split, &image_names, ingredient_names, &image_dir)
        })
        .collect();

    let mut report = FilterReport::default();
    let mut records = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Keep(r) => records.push(r),
            Outcome::NoImage => report.dropped_no_image += 1,
            Outcome::Corrupt => report.dropped_corrupt += 1,
            Outcome::EmptyFields => report.dropped_empty_fields += 1,
        }
    }
    report.loaded = records.len();
    log::info!(
        "loaded {} recipes ({} without images, {} corrupt, {} incomplete)",
        report.loaded,
        report.dropped_no_image,
        report.dropped_corrupt,
        report.dropped_empty_fields
    );
    Ok((Dataset::new(records)?, report))
}

fn classify(
    entry: Layer1Entry,
    split: Split,
    image_names: &[String],
    detected: Option<Vec<String>>,
    image_dir: &Path,
) -> Outcome {
    let quantities: Vec<String> = entry
        .ingredients
        .into_iter()
        .map(TextItem::into_text)
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect();
    let instructions: Vec<String> = entry
        .instructions
        .into_iter()
        .map(TextItem::into_text)
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect();
    let names: Vec<String> = match detected {
        Some(d) => d.iter().map(|n| canonicalize(n)).collect(),
        None => quantities.iter().map(|q| name_from_quantity_line(q)).collect(),
    };
    let mut record = RecipeRecord {
        id: entry.id,
        title: entry.title.trim().to_string(),
        ingredients: names,
        ingredients_with_quantity: quantities,
        instructions,
        image_paths: Vec::new(),
        split,
    };
    record.normalize_ingredients();
    if record.title.is_empty() || record.ingredients.is_empty() || record.instructions.is_empty() {
        return Outcome::EmptyFields;
    }

    let existing: Vec<PathBuf> = image_names.iter().filter_map(|n| locate_image(image_dir, n)).collect();
    if existing.is_empty() {
        return Outcome::NoImage;
    }
    record.image_paths = existing.into_iter().filter(|p| readable(p)).collect();
    if record.image_paths.is_empty() {
        return Outcome::Corrupt;
    }
    Outcome::Keep(record)
}

fn locate_image(image_dir: &Path, name: &str) -> Option<PathBuf> {
    if name.contains("..") || Path::new(name).is_absolute() {
        return None;
    }
    let flat = image_dir.join(name);
    if flat.is_file() {
        return Some(flat);
    }
    let chars: Vec<char> = name.chars().take(4).collect();
    if chars.len() == 4 {
        let mut nested = image_dir.to_path_buf();
        for c in chars {
            nested.push(c.to_string());
        }
        nested.push(name);
        if nested.is_file() {
            return Some(nested);
        }
    }
    None
}

fn readable(path: &Path) -> bool {
    match image::open(path) {
        Ok(_) => true,
        Err(e) => {
            log::warn!("skipping corrupt image {}: {e}", path.display());
            false
        }
    }
}

/// Reads a JSON array file. Whole-file syntax errors carry line and column;
/// per-record shape errors carry the record index and id.
fn read_array<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let values: Vec<Value> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let id = v.get("id").and_then(Value::as_str).unwrap_or("?").to_string();
            serde_json::from_value(v).map_err(|e| Error::Parse {
                context: format!("{} record {i} (id {id})", path.display()),
                message: e.to_string(),
            })
        })
        .collect()
}
