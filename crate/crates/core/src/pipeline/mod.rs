//! End-to-end orchestration: configuration, stage training with on-disk
//! checkpoints, image-to-recipe inference and evaluation.

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::config::{
    DataConfig, IngredientStage, InstructionStage, MetricsConfig, PathsConfig, PipelineConfig, TitleStage, ENV_PREFIX,
};
use crate::checkpoint::{write_atomic, Container};
use crate::corpus::{build_ingredient_vocabulary, load_recipe_corpus, preprocess_rgb, Dataset, FilterReport, RecipeRecord, Split};
use crate::error::{Error, Result};
use crate::ingredients::{train_ingredient_model, IngredientModel, TrainConfig};
use crate::instructions::{finetune_instruction_model, generate_instructions, GenerationConfig, InstructionModel};
use crate::instructions::join_steps;
use crate::metrics::{finalize_set_metrics, mean_std, rouge_l, BleuStats, SetCountAccumulator};
use crate::title::{finetune_title_model, generate_title, CaptionerHandle};

pub const INGREDIENT_CHECKPOINT: &str = "ingredients.json";
pub const TITLE_CHECKPOINT: &str = "title.json";
pub const INSTRUCTION_CHECKPOINT: &str = "instructions.json";

/// Config and checkpoint hashes behind an output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    /// Stage name to checkpoint digest.
    pub checkpoints: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipePrediction {
    pub title: String,
    pub ingredients: Vec<String>,
    pub steps: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    #[serde(flatten)]
    pub recipe: RecipePrediction,
    pub generation: GenerationConfig,
    pub provenance: Provenance,
}

/// The three trained stages.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub title: CaptionerHandle,
    pub ingredients: IngredientModel,
    pub instructions: InstructionModel,
    pub generation: GenerationConfig,
    pub ingredient_max_steps: usize,
    pub provenance: Provenance,
}

fn load_stage(dir: &Path, file: &str, stage: &str) -> Result<(Container, String)> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(Error::Config(format!("{stage} checkpoint not found at {}", path.display())));
    }
    let c = Container::load(&path)?;
    let digest = c.digest()?;
    Ok((c, digest))
}

impl Pipeline {
    pub fn from_models(
        title: CaptionerHandle,
        ingredients: IngredientModel,
        instructions: InstructionModel,
        config: &PipelineConfig,
    ) -> Result<Self> {
        let checkpoints = BTreeMap::from([
            ("title".to_string(), title.to_checkpoint()?.digest()?),
            ("ingredients".to_string(), ingredients.to_checkpoint()?.digest()?),
            ("instructions".to_string(), instructions.to_checkpoint(&config.generation)?.digest()?),
        ]);
        Ok(Self {
            title,
            ingredients,
            instructions,
            generation: config.generation.clone(),
            ingredient_max_steps: config.metrics.ingredient_max_steps,
            provenance: Provenance {
                config_hash: config.hash(),
                checkpoints,
            },
        })
    }

    /// Loads the checkpoints of `seed`; a missing file names its stage.
    pub fn load(config: &PipelineConfig, seed: u64) -> Result<Self> {
        let dir = config.checkpoint_dir(seed);
        let (t, t_hash) = load_stage(&dir, TITLE_CHECKPOINT, "title")?;
        let (i, i_hash) = load_stage(&dir, INGREDIENT_CHECKPOINT, "ingredient")?;
        let (s, s_hash) = load_stage(&dir, INSTRUCTION_CHECKPOINT, "instruction")?;
        let title = CaptionerHandle::from_checkpoint(&t)?;
        let ingredients = IngredientModel::from_checkpoint(&i, None)?;
        let (instructions, _) = InstructionModel::from_checkpoint(&s)?;
        Ok(Self {
            title,
            ingredients,
            instructions,
            generation: config.generation.clone(),
            ingredient_max_steps: config.metrics.ingredient_max_steps,
            provenance: Provenance {
                config_hash: config.hash(),
                checkpoints: BTreeMap::from([
                    ("title".to_string(), t_hash),
                    ("ingredients".to_string(), i_hash),
                    ("instructions".to_string(), s_hash),
                ]),
            },
        })
    }

    /// Steps from a title and ingredient names only.
    pub fn instructions_for(&self, title: &str, ingredients: &[String]) -> Result<Vec<String>> {
        generate_instructions(title, ingredients, &self.instructions, &self.generation)
    }

    pub fn infer_rgb(&self, image: &RgbImage) -> Result<RecipePrediction> {
        let t_img = preprocess_rgb(image, self.title.config().encoder.image_side, &self.title.config().normalization)?;
        let i_cfg = &self.ingredients.config;
        let i_img = preprocess_rgb(image, i_cfg.encoder.image_side, &i_cfg.normalization)?;
        let title = generate_title(&t_img, &self.title)?;
        let ingredients = self.ingredients.predict(&i_img, self.ingredient_max_steps)?;
        let steps = self.instructions_for(&title, &ingredients)?;
        Ok(RecipePrediction { title, ingredients, steps })
    }

    pub fn infer_record(&self, dataset: &Dataset, record: &RecipeRecord) -> Result<RecipePrediction> {
        let path = record
            .first_image()
            .ok_or_else(|| Error::Data(format!("record {} has no image", record.id)))?;
        match dataset.in_memory_image(path) {
            Some(img) => self.infer_rgb(img),
            None => self.infer_rgb(&read_rgb(path)?),
        }
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Data(format!("unreadable image {}: {e}", path.display())))?
        .to_rgb8())
}

/// Image to title, ingredients and steps with the checkpoints of `config.seed`.
/// The image is read before any checkpoint is loaded.
pub fn run_image_to_recipe(image_path: &Path, config: &PipelineConfig) -> Result<InferenceOutput> {
    let image = read_rgb(image_path)?;
    let pipeline = Pipeline::load(config, config.seed)?;
    Ok(InferenceOutput {
        recipe: pipeline.infer_rgb(&image)?,
        generation: pipeline.generation.clone(),
        provenance: pipeline.provenance.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundTruthMode {
    /// Instructions from the predicted title and ingredients.
    Predicted,
    /// Instructions from the ground-truth title and ingredients.
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScores {
    pub seed: u64,
    pub iou: f64,
    pub f1: f64,
    pub sacrebleu: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: GroundTruthMode,
    pub split: Split,
    pub n_samples: usize,
    pub config_hash: String,
    pub iou: Stat,
    pub f1: Stat,
    pub sacrebleu: Stat,
    #[serde(rename = "rougeL")]
    pub rouge_l: Stat,
    pub per_seed: Vec<SeedScores>,
}

struct RecordScore {
    sets: SetCountAccumulator,
    bleu: BleuStats,
    rouge: f64,
}

/// Scores one pipeline on `records`. Per-record statistics are computed in
/// parallel and merged in record order.
pub fn evaluate_pipeline(pipeline: &Pipeline, dataset: &Dataset, records: &[&RecipeRecord], mode: GroundTruthMode) -> Result<SeedScores> {
    if records.is_empty() {
        return Err(Error::argument("cannot evaluate an empty split"));
    }
    let vocab = pipeline.ingredients.vocabulary.clone();
    let scores: Vec<RecordScore> = records
        .par_iter()
        .map(|r| {
            let pred = pipeline.infer_record(dataset, r)?;
            let predicted: BTreeSet<usize> = pred.ingredients.iter().filter_map(|n| vocab.id(n)).collect();
            let truth: BTreeSet<usize> = vocab.encode(&r.ingredients).vector.ids().collect();
            let mut sets = SetCountAccumulator::default();
            sets.update(&predicted, &truth);
            let steps = match mode {
                GroundTruthMode::Predicted => pred.steps,
                GroundTruthMode::Oracle => pipeline.instructions_for(&r.title, &r.ingredients)?,
            };
            let (cand, reference) = (join_steps(&steps), join_steps(&r.instructions));
            let mut bleu = BleuStats::default();
            bleu.add_pair(&cand, &reference);
            Ok(RecordScore {
                sets,
                bleu,
                rouge: rouge_l(&cand, &reference)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut sets = SetCountAccumulator::default();
    let mut bleu = BleuStats::default();
    let mut rouge = 0.0;
    for s in &scores {
        sets = sets + s.sets;
        bleu.merge(&s.bleu);
        rouge += s.rouge;
    }
    let m = finalize_set_metrics(&sets)?;
    Ok(SeedScores {
        seed: 0,
        iou: m.iou,
        f1: m.f1,
        sacrebleu: bleu.score(),
        rouge_l: rouge / scores.len() as f64,
        provenance: pipeline.provenance.clone(),
    })
}

/// Mean and standard deviation over already-scored seeds.
pub fn summarize(per_seed: Vec<SeedScores>, mode: GroundTruthMode, split: Split, n_samples: usize, config_hash: String) -> EvaluationReport {
    let col = |f: fn(&SeedScores) -> f64| Stat::of(&per_seed.iter().map(f).collect::<Vec<_>>());
    EvaluationReport {
        mode,
        split,
        n_samples,
        config_hash,
        iou: col(|s| s.iou),
        f1: col(|s| s.f1),
        sacrebleu: col(|s| s.sacrebleu),
        rouge_l: col(|s| s.rouge_l),
        per_seed,
    }
}

/// Evaluates the checkpoints of every configured seed on one split.
pub fn run_evaluation(dataset: &Dataset, split: Split, config: &PipelineConfig, mode: GroundTruthMode) -> Result<EvaluationReport> {
    let records: Vec<&RecipeRecord> = dataset.split(split).collect();
    if records.is_empty() {
        return Err(Error::argument(format!("split {split} has no records")));
    }
    let mut per_seed = Vec::new();
    for seed in config.seed_list() {
        let pipeline = Pipeline::load(config, seed)?;
        let mut s = evaluate_pipeline(&pipeline, dataset, &records, mode)?;
        s.seed = seed;
        log::info!("seed {seed}: f1 {:.4} bleu {:.2} rougeL {:.2}", s.f1, s.sacrebleu, s.rouge_l);
        per_seed.push(s);
    }
    Ok(summarize(per_seed, mode, split, records.len(), config.hash()))
}

/// Loads the layered corpus at `paths.data` and attaches the vocabulary.
pub fn load_corpus(config: &PipelineConfig) -> Result<(Dataset, FilterReport)> {
    let (mut ds, report) = load_recipe_corpus(&config.paths.data, &Split::ALL)?;
    let vocabulary = build_ingredient_vocabulary(&ds, config.data.max_vocabulary)?;
    ds.set_vocabulary(vocabulary);
    Ok((ds, report))
}

fn stage_result<T>(result: Result<T>, dir: &Path, stage: &str) -> Result<T> {
    match result {
        Err(Error::Diverged { stage: s, epoch, last_finite }) => {
            let path = dir.join(format!("{stage}.diverged.json"));
            last_finite.save(&path)?;
            log::error!("saved last finite {stage} checkpoint to {}", path.display());
            Err(Error::Diverged { stage: s, epoch, last_finite })
        }
        other => other,
    }
}

fn save_stage(mut c: Container, dir: &Path, file: &str, config: &PipelineConfig) -> Result<PathBuf> {
    c.set_metadata("config_hash", config.hash())?;
    let path = dir.join(file);
    c.save(&path)?;
    Ok(path)
}

pub fn train_ingredient_stage(dataset: &Dataset, config: &PipelineConfig, seed: u64) -> Result<PathBuf> {
    let dir = config.checkpoint_dir(seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let train = TrainConfig {
        seed,
        ..config.ingredients.train.clone()
    };
    let log = dir.join("ingredients.log.jsonl");
    let trained = stage_result(
        train_ingredient_model(dataset, &config.ingredients.model, &train, &config.ingredients.loss, Some(&log)),
        &dir,
        "ingredients",
    )?;
    save_stage(trained.checkpoint()?, &dir, INGREDIENT_CHECKPOINT, config)
}

pub fn train_title_stage(dataset: &Dataset, config: &PipelineConfig, seed: u64) -> Result<PathBuf> {
    let dir = config.checkpoint_dir(seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let handle = CaptionerHandle::new(config.title.model.clone(), seed)?;
    let train = crate::title::TitleTrainConfig {
        seed,
        ..config.title.train.clone()
    };
    let log = dir.join("title.log.jsonl");
    let trained = stage_result(
        finetune_title_model(dataset, config.title.fraction, handle, &train, Some(&log)),
        &dir,
        "title",
    )?;
    save_stage(trained.checkpoint()?, &dir, TITLE_CHECKPOINT, config)
}

pub fn train_instruction_stage(dataset: &Dataset, config: &PipelineConfig, seed: u64) -> Result<PathBuf> {
    let dir = config.checkpoint_dir(seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let train = crate::instructions::InstructionTrainConfig {
        seed,
        ..config.instructions.train.clone()
    };
    let log = dir.join("instructions.log.jsonl");
    let trained = stage_result(
        finetune_instruction_model(dataset, &config.instructions.model, &train, &config.generation, Some(&log)),
        &dir,
        "instructions",
    )?;
    save_stage(trained.checkpoint()?, &dir, INSTRUCTION_CHECKPOINT, config)
}

/// Writes pretty JSON atomically.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}
