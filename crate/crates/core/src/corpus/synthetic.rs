//! Procedurally rendered toy corpus.
//!
//! Each ingredient id owns a unique colour and one of three glyph shapes.
//! A record's image is a grid of cells on a light background; every present
//! ingredient is drawn as its glyph in its own randomly chosen cell, and each
//! glyph covers its cell centre, so the set can be read back exactly from the
//! cell-centre pixels.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Dataset, IngredientVocabulary, RecipeRecord, Split};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

const BACKGROUND: Rgb<u8> = Rgb([247, 243, 236]);

const NAMES: &[&str] = &[
    "salt", "pepper", "flour", "sugar", "butter", "egg", "milk", "garlic", "onion", "tomato", "basil",
    "olive oil", "cheese", "chicken", "rice", "potato", "carrot", "lemon", "ginger", "soy sauce", "honey",
    "cinnamon", "vanilla", "spinach", "mushroom", "bean", "corn", "beef", "pork", "shrimp", "parsley", "thyme",
    "oregano", "cumin", "paprika", "yogurt", "cream", "bread crumb", "apple", "banana", "strawberry",
    "chocolate", "oat", "walnut", "almond", "lime", "cilantro", "bacon", "zucchini", "celery", "broccoli",
    "cabbage", "peanut", "coconut milk", "vinegar", "mustard", "noodle", "tofu", "salmon", "avocado",
];

const DISHES: &[&str] = &["salad", "soup", "stew", "bake", "stir fry", "casserole", "skillet", "tart"];
const UNITS: &[&str] = &["cup", "tablespoon", "teaspoon", "pinch", "clove"];
const TEMPERATURES: &[u32] = &[325, 350, 375, 400];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Number of train-split records.
    pub n_records: usize,
    pub vocab_size: usize,
    pub image_side: usize,
    pub max_ingredients: usize,
    #[serde(default)]
    pub n_dev: usize,
    #[serde(default)]
    pub n_test: usize,
}

impl SyntheticConfig {
    pub fn new(n_records: usize, vocab_size: usize, image_side: usize, max_ingredients: usize) -> Self {
        Self {
            n_records,
            vocab_size,
            image_side,
            max_ingredients,
            n_dev: 0,
            n_test: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_ingredients < 1 || self.vocab_size < self.max_ingredients {
            return Err(Error::Config(format!(
                "synthetic corpus needs vocab_size >= max_ingredients >= 1 (got {} and {})",
                self.vocab_size, self.max_ingredients
            )));
        }
        if self.image_side < self.grid() {
            return Err(Error::Config(format!(
                "image side {} too small for a {}x{} glyph grid",
                self.image_side,
                self.grid(),
                self.grid()
            )));
        }
        Ok(())
    }

    /// Cells per grid side.
    pub fn grid(&self) -> usize {
        let mut g = 4;
        while g * g < self.max_ingredients {
            g += 1;
        }
        g
    }

    fn cell_bounds(&self, cell: usize) -> (usize, usize, usize, usize) {
        let g = self.grid();
        let (row, col) = (cell / g, cell % g);
        let y0 = row * self.image_side / g;
        let y1 = (row + 1) * self.image_side / g;
        let x0 = col * self.image_side / g;
        let x1 = (col + 1) * self.image_side / g;
        (y0, y1, x0, x1)
    }
}

/// Distinct colours, spread out by greedy farthest-point selection over an
/// RGB lattice (also kept away from the background).
fn palette(n: usize) -> Vec<Rgb<u8>> {
    let mut levels = 5usize;
    while levels.pow(3) < n + 1 {
        levels += 1;
    }
    let step = |i: usize| (i * 255 / (levels - 1)) as u8;
    let mut candidates: Vec<[u8; 3]> = Vec::with_capacity(levels.pow(3));
    for r in 0..levels {
        for g in 0..levels {
            for b in 0..levels {
                let c = [step(r), step(g), step(b)];
                if c != BACKGROUND.0 {
                    candidates.push(c);
                }
            }
        }
    }
    let dist = |a: &[u8; 3], b: &[u8; 3]| -> i32 { (0..3).map(|k| (a[k] as i32 - b[k] as i32).pow(2)).sum() };
    let mut nearest: Vec<i32> = candidates.iter().map(|c| dist(c, &BACKGROUND.0)).collect();
    let mut chosen = Vec::with_capacity(n);
    for _ in 0..n {
        let best = (0..candidates.len()).max_by_key(|&i| (nearest[i], std::cmp::Reverse(i))).expect("lattice has room");
        let c = candidates[best];
        chosen.push(Rgb(c));
        for (i, cand) in candidates.iter().enumerate() {
            nearest[i] = nearest[i].min(dist(cand, &c));
        }
    }
    chosen
}

fn ingredient_name(id: usize) -> String {
    NAMES.get(id).map_or_else(|| format!("ingredient {id}"), |s| s.to_string())
}

fn draw_glyph(img: &mut RgbImage, bounds: (usize, usize, usize, usize), id: usize, colour: Rgb<u8>) {
    let (y0, y1, x0, x1) = bounds;
    let (cy, cx) = ((y0 + y1) / 2, (x0 + x1) / 2);
    let radius = ((y1 - y0).min(x1 - x0) as i64 * 3 / 8).max(0);
    let arm = (radius / 3).max(0);
    for y in y0..y1 {
        for x in x0..x1 {
            let (dy, dx) = ((y as i64 - cy as i64).abs(), (x as i64 - cx as i64).abs());
            let inside = match id % 3 {
                0 => dy <= radius && dx <= radius,
                1 => dy + dx <= radius,
                _ => (dy <= arm && dx <= radius) || (dx <= arm && dy <= radius),
            };
            if inside {
                img.put_pixel(x as u32, y as u32, colour);
            }
        }
    }
}

fn render(config: &SyntheticConfig, colours: &[Rgb<u8>], placement: &[(usize, usize)]) -> RgbImage {
    let side = config.image_side as u32;
    let mut img = RgbImage::from_pixel(side, side, BACKGROUND);
    for &(id, cell) in placement {
        draw_glyph(&mut img, config.cell_bounds(cell), id, colours[id]);
    }
    img
}

/// Ingredient ids whose colour appears at a cell centre, in increasing order.
pub fn detect_ingredients(config: &SyntheticConfig, img: &RgbImage) -> Vec<usize> {
    let colours = palette(config.vocab_size);
    let g = config.grid();
    let mut found = BTreeSet::new();
    for cell in 0..g * g {
        let (y0, y1, x0, x1) = config.cell_bounds(cell);
        let p = img.get_pixel(((x0 + x1) / 2) as u32, ((y0 + y1) / 2) as u32);
        if let Some(id) = colours.iter().position(|c| c == p) {
            found.insert(id);
        }
    }
    found.into_iter().collect()
}

fn join_names(names: &[String]) -> String {
    match names {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    }
}

fn recipe_text(ids: &[usize]) -> (String, Vec<String>, Vec<String>) {
    let names: Vec<String> = ids.iter().map(|&i| ingredient_name(i)).collect();
    let sum: usize = ids.iter().sum();
    let dish = DISHES[sum % DISHES.len()];
    let title = match names.as_slice() {
        [a] => format!("{a} {dish}"),
        [a, b, ..] => format!("{a} and {b} {dish}"),
        [] => dish.to_string(),
    };
    let quantities = ids
        .iter()
        .zip(&names)
        .map(|(&id, n)| {
            let q = 1 + id % 3;
            let unit = UNITS[id % UNITS.len()];
            let plural = if q > 1 { "s" } else { "" };
            format!("{q} {unit}{plural} of {n}")
        })
        .collect();
    let mut steps = vec![format!("Preheat the oven to {} degrees.", TEMPERATURES[sum % TEMPERATURES.len()])];
    match names.as_slice() {
        [a] => steps.push(format!("Wash and chop the {a}.")),
        [a, b, rest @ ..] => {
            steps.push(format!("Combine the {a} and {b} in a large bowl."));
            if !rest.is_empty() {
                steps.push(format!("Stir in the {}.", join_names(rest)));
            }
        }
        [] => {}
    }
    steps.push(format!("Bake the {dish} for {} minutes.", 10 + 5 * ids.len()));
    steps.push(if sum.is_multiple_of(2) { "Serve warm.".to_string() } else { "Let cool and serve.".to_string() });
    (title, quantities, steps)
}

pub fn generate_synthetic_corpus(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let vocabulary = IngredientVocabulary::from_names((0..config.vocab_size).map(ingredient_name))?;
    let colours = palette(config.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = config.grid();
    let plan = std::iter::repeat_n(Split::Train, config.n_records)
        .chain(std::iter::repeat_n(Split::Dev, config.n_dev))
        .chain(std::iter::repeat_n(Split::Test, config.n_test));

    let mut records = Vec::new();
    let mut images = Vec::new();
    for (i, split) in plan.enumerate() {
        let k = rng.random_range(1..=config.max_ingredients);
        let mut ids = index::sample(&mut rng, config.vocab_size, k).into_vec();
        ids.sort_unstable();
        let cells = index::sample(&mut rng, g * g, k).into_vec();
        let placement: Vec<(usize, usize)> = ids.iter().copied().zip(cells).collect();
        let id = format!("syn-{i:05}");
        let path = PathBuf::from(format!("synthetic/{id}.png"));
        let (title, quantities, steps) = recipe_text(&ids);
        images.push((path.clone(), render(config, &colours, &placement)));
        records.push(RecipeRecord {
            id,
            title,
            ingredients: vocabulary.names_for(&ids),
            ingredients_with_quantity: quantities,
            instructions: steps,
            image_paths: vec![path],
            split,
        });
    }
    let mut ds = Dataset::new(records)?.with_vocabulary(vocabulary);
    for (p, img) in images {
        ds.insert_image(p, img);
    }
    Ok(ds)
}

/// Writes a dataset in the layered on-disk layout read by the corpus loader.
/// Images held in memory are encoded as PNG; on-disk images are copied.
pub fn write_layered_corpus(dataset: &Dataset, dir: &Path) -> Result<()> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut layer1 = Vec::new();
    let mut layer2 = Vec::new();
    let mut det = Vec::new();
    for r in dataset.records() {
        let mut image_items = Vec::new();
        for (j, p) in r.image_paths.iter().enumerate() {
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("png");
            let file = format!("{}_{j}.{ext}", r.id);
            let target = image_dir.join(&file);
            match dataset.in_memory_image(p) {
                Some(img) => img.save(&target)?,
                None => {
                    fs::copy(p, &target).map_err(|e| Error::io(p, e))?;
                }
            }
            image_items.push(json!({ "id": file }));
        }
        let partition = match r.split {
            Split::Train => "train",
            Split::Dev => "val",
            Split::Test => "test",
        };
        layer1.push(json!({
            "id": r.id,
            "title": r.title,
            "partition": partition,
            "ingredients": r.ingredients_with_quantity.iter().map(|t| json!({ "text": t })).collect::<Vec<_>>(),
            "instructions": r.instructions.iter().map(|t| json!({ "text": t })).collect::<Vec<_>>(),
        }));
        layer2.push(json!({ "id": r.id, "images": image_items }));
        det.push(json!({
            "id": r.id,
            "ingredients": r.ingredients.iter().map(|t| json!({ "text": t })).collect::<Vec<_>>(),
            "valid": vec![true; r.ingredients.len()],
        }));
    }
    for (name, value) in [("layer1.json", layer1), ("layer2.json", layer2), ("det_ingrs.json", det)] {
        let text = serde_json::to_string_pretty(&value)?;
        write_atomic(&dir.join(name), text.as_bytes())?;
    }
    Ok(())
}
