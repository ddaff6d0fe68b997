use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::apps::LlmConfig;
use crate::checkpoint::sha256_hex;
use crate::corpus::SyntheticConfig;
use crate::error::{Error, Result};
use crate::ingredients::{IngredientModelConfig, LossWeights, TrainConfig};
use crate::instructions::{GenerationConfig, InstructionTrainConfig, Seq2SeqConfig};
use crate::title::{CaptionerConfig, TitleTrainConfig};

/// Prefix of environment variables that override config keys:
/// `PLATTER__INGREDIENTS__TRAIN__EPOCHS=5` sets `ingredients.train.epochs`.
pub const ENV_PREFIX: &str = "PLATTER__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    /// Layered corpus directory.
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
    /// Demonstrations and operation registry.
    pub prompts: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub max_vocabulary: usize,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngredientStage {
    pub model: IngredientModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TitleStage {
    pub model: CaptionerConfig,
    pub train: TitleTrainConfig,
    /// Share of the train split used for fine-tuning.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionStage {
    pub model: Seq2SeqConfig,
    pub train: InstructionTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Decoding budget for ingredient prediction during evaluation and inference.
    pub ingredient_max_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Seeds evaluated by `eval`; empty means just `seed`.
    pub seeds: Vec<u64>,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub ingredients: IngredientStage,
    pub title: TitleStage,
    pub instructions: InstructionStage,
    pub generation: GenerationConfig,
    pub metrics: MetricsConfig,
    pub llm: LlmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut synthetic = SyntheticConfig::new(32, 24, 64, 5);
        synthetic.n_dev = 8;
        synthetic.n_test = 8;
        Self {
            seed: 0,
            seeds: Vec::new(),
            paths: PathsConfig {
                data: "data".into(),
                checkpoints: "checkpoints".into(),
                outputs: "outputs".into(),
                prompts: "prompts".into(),
            },
            data: DataConfig {
                max_vocabulary: 1488,
                synthetic,
            },
            ingredients: IngredientStage {
                model: IngredientModelConfig::default(),
                train: TrainConfig::default(),
                loss: LossWeights::default(),
            },
            title: TitleStage {
                model: CaptionerConfig::toy(),
                train: TitleTrainConfig::default(),
                fraction: 0.1,
            },
            instructions: InstructionStage {
                model: Seq2SeqConfig::default(),
                train: InstructionTrainConfig::default(),
            },
            generation: GenerationConfig::default(),
            metrics: MetricsConfig { ingredient_max_steps: 20 },
            llm: LlmConfig::default(),
        }
    }
}

fn config_error(m: impl std::fmt::Display) -> Error {
    Error::Config(m.to_string())
}

/// Overlays `patch` onto `base`, table by table.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Table(b), Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an override as a TOML literal; strings stay strings where the
/// key already holds a string, and unparseable text becomes a string.
fn override_value(raw: &str, current: Option<&Value>) -> Value {
    if matches!(current, Some(Value::String(_))) {
        return Value::String(raw.to_string());
    }
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let path: Vec<String> = key.split("__").map(str::to_lowercase).collect();
    if path.iter().any(String::is_empty) {
        return Err(config_error(format!("malformed override variable {ENV_PREFIX}{key}")));
    }
    let mut node = root;
    for part in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| config_error(format!("override {key} descends into a non-table")))?;
        node = table.entry(part.clone()).or_insert_with(|| Value::Table(Default::default()));
    }
    let leaf = &path[path.len() - 1];
    let table = node
        .as_table_mut()
        .ok_or_else(|| config_error(format!("override {key} descends into a non-table")))?;
    let v = override_value(raw, table.get(leaf));
    table.insert(leaf.clone(), v);
    Ok(())
}

impl PipelineConfig {
    /// Defaults, overlaid by the TOML file (if any), then by `PLATTER__*`
    /// environment variables.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut root = Value::try_from(Self::default()).map_err(config_error)?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| config_error(format!("cannot read config {}: {e}", p.display())))?;
            let file: toml::Table = text.parse().map_err(|e| config_error(format!("{}: {e}", p.display())))?;
            merge(&mut root, Value::Table(file));
        }
        let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (k, v) in overrides {
            log::info!("config override {k}");
            apply_override(&mut root, &k[ENV_PREFIX.len()..], &v)?;
        }
        let config: Self = root.try_into().map_err(|e| config_error(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.ingredients.train.validate()?;
        self.ingredients.loss.validate()?;
        self.ingredients.model.encoder.validate()?;
        self.title.model.validate()?;
        self.instructions.model.validate()?;
        self.instructions.train.validate()?;
        self.generation.validate()?;
        self.llm.validate()?;
        if !(self.title.fraction > 0.0 && self.title.fraction <= 1.0) {
            return Err(config_error(format!("title.fraction must lie in (0, 1], got {}", self.title.fraction)));
        }
        if self.data.max_vocabulary == 0 || self.metrics.ingredient_max_steps == 0 {
            return Err(config_error("data.max_vocabulary and metrics.ingredient_max_steps must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Checkpoints of one seed live in their own directory.
    pub fn checkpoint_dir(&self, seed: u64) -> PathBuf {
        self.paths.checkpoints.join(format!("seed-{seed}"))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_error)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_settings() {
        let c = PipelineConfig::default();
        assert_eq!(c.ingredients.train.epochs, 100);
        assert_eq!(c.ingredients.train.batch_size, 150);
        assert_eq!(c.ingredients.train.learning_rate, 1e-4);
        assert_eq!(c.ingredients.model.decoder.vocab_size, 1488);
        assert_eq!(c.ingredients.model.decoder.dim, 512);
        assert_eq!((c.title.train.epochs, c.title.train.batch_size, c.title.train.learning_rate), (20, 24, 1e-5));
        assert_eq!(c.title.fraction, 0.1);
        assert_eq!((c.instructions.train.epochs, c.instructions.train.batch_size), (30, 12));
        assert_eq!(c.instructions.train.learning_rate, 3e-4);
        assert_eq!(c.generation, GenerationConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn file_then_environment_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[ingredients.train]\nepochs = 7\n[paths]\ndata = \"corpus\"\n").unwrap();
        let env = vec![
            ("PLATTER__INGREDIENTS__TRAIN__EPOCHS".to_string(), "9".to_string()),
            ("PLATTER__PATHS__OUTPUTS".to_string(), "42".to_string()),
            ("PLATTER__GENERATION__NUM_BEAMS".to_string(), "1".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let c = PipelineConfig::load_with_env(Some(&p), env).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.ingredients.train.epochs, 9);
        assert_eq!(c.ingredients.train.batch_size, 150);
        assert_eq!(c.paths.data, PathBuf::from("corpus"));
        assert_eq!(c.paths.outputs, PathBuf::from("42"));
        assert_eq!(c.generation.num_beams, 1);
        assert_ne!(c.hash(), PipelineConfig::default().hash());
    }

    #[test]
    fn bad_values_are_config_errors() {
        let env = vec![("PLATTER__GENERATION__NUM_BEAMS".to_string(), "0".to_string())];
        assert!(matches!(PipelineConfig::load_with_env(None, env), Err(Error::Config(_))));
        let env = vec![("PLATTER__SEED".to_string(), "\"abc\"".to_string())];
        assert_eq!(PipelineConfig::load_with_env(None, env).unwrap_err().exit_code(), 2);
        let back: PipelineConfig = toml::from_str(&PipelineConfig::default().to_toml().unwrap()).unwrap();
        assert_eq!(back, PipelineConfig::default());
    }
}
