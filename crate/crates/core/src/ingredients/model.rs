use std::io::Write;
use std::path::Path;

use platter_tape::optim::Adam;
use platter_tape::{Graph, Matrix, StoreGrads, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decoder::{DecoderConfig, IngredientDecoder};
use super::losses::{eos_targets, LossBreakdown, LossWeights};
use crate::checkpoint::Container;
use crate::corpus::{Dataset, ImageTensor, IngredientSetVector, IngredientVocabulary, PixelNormalization, Split};
use crate::encoder::{EncoderConfig, VisionEncoder};
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "ingredient-model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngredientModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub normalization: PixelNormalization,
}

impl Default for IngredientModelConfig {
    /// ViT-B/16 features at 224 pixels, 512-wide decoder, 1488 ingredients.
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::new(1488, 512),
            normalization: PixelNormalization::default(),
        }
    }
}

impl IngredientModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        let encoder = EncoderConfig::toy();
        let mut decoder = DecoderConfig::toy(vocab_size);
        decoder.dim = encoder.output_dim;
        Self {
            encoder,
            decoder,
            normalization: PixelNormalization::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.normalization.validate()?;
        if self.encoder.output_dim != self.decoder.dim {
            return Err(Error::Config(format!(
                "encoder output_dim {} does not match decoder dim {}",
                self.encoder.output_dim, self.decoder.dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction the learning rate shrinks by after every epoch.
    pub lr_decay: f64,
    pub max_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub feeding: Feeding,
}

/// What the decoder is fed during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feeding {
    /// The ground-truth set in vocabulary-id order.
    VocabularyOrder,
    /// The ground-truth set, ordered the way greedy decoding would pick it.
    #[default]
    ModelOrder,
    /// The decoder's own greedy output.
    Greedy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 150,
            learning_rate: 1e-4,
            lr_decay: 1e-4,
            max_steps: 20,
            seed: 0,
            feeding: Feeding::ModelOrder,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch_size and max_steps must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return Err(Error::Config(format!("lr_decay must lie in [0, 1), got {}", self.lr_decay)));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * (1.0 - self.lr_decay).powi(epoch as i32)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_ingr: f64,
    pub loss_eos: f64,
    pub loss_card: f64,
    pub total: f64,
}

/// Encoder, decoder and the vocabulary they were trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct IngredientModel {
    pub config: IngredientModelConfig,
    pub encoder: VisionEncoder,
    pub decoder: IngredientDecoder,
    pub vocabulary: IngredientVocabulary,
}

/// Loss terms as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct GraphLosses {
    pub ingredients: Var,
    pub eos: Var,
    pub cardinality: Var,
    pub total: Var,
}

/// Builds the three losses and their weighted sum over teacher-driven step
/// logits (`T x (N+1)`): pooling covers steps `0..=K`, EOS covers all steps.
pub fn graph_losses(g: &mut Graph, steps: Var, target: &IngredientSetVector, w: &LossWeights) -> GraphLosses {
    let (t, cols) = g.shape(steps);
    let n = cols - 1;
    let k = target.cardinality();
    let head = g.slice_rows(steps, 0, (k + 1).min(t));
    let ingr_cols = g.slice_cols(head, 0, n);
    let pooled = g.max_rows(ingr_cols);
    let ingredients = g.bce_with_logits(pooled, &Matrix::row_vector(&target.as_f64()));
    let eos_col = g.slice_cols(steps, n, 1);
    let eos = g.bce_with_logits(eos_col, &Matrix::from_vec(t, 1, eos_targets(t, k)));
    let probs = g.sigmoid(pooled);
    let count = g.sum_all(probs);
    let diff = g.add_scalar(count, -(k as f64));
    let cardinality = g.abs(diff);
    let a = g.scale(ingredients, w.ingredients);
    let b = g.scale(eos, w.eos);
    let c = g.scale(cardinality, w.cardinality);
    let ab = g.add(a, b);
    let total = g.add(ab, c);
    GraphLosses {
        ingredients,
        eos,
        cardinality,
        total,
    }
}

impl IngredientModel {
    pub fn new(config: IngredientModelConfig, vocabulary: IngredientVocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.decoder.vocab_size != vocabulary.len() {
            return Err(Error::Config(format!(
                "decoder vocab_size {} does not match the vocabulary ({} names)",
                config.decoder.vocab_size,
                vocabulary.len()
            )));
        }
        let encoder = VisionEncoder::new(config.encoder.clone(), seed)?;
        let decoder = IngredientDecoder::new(config.decoder.clone(), seed.wrapping_add(1))?;
        Ok(Self {
            config,
            encoder,
            decoder,
            vocabulary,
        })
    }

    pub fn image_side(&self) -> usize {
        self.config.encoder.image_side
    }

    pub fn image_tensor(&self, dataset: &Dataset, record: &crate::corpus::RecipeRecord) -> Result<ImageTensor> {
        dataset.image_tensor(record, self.image_side(), &self.config.normalization)
    }

    /// Teacher-forced forward pass of one sample recorded into `g`.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        image: &ImageTensor,
        target: &IngredientSetVector,
        max_steps: usize,
        w: &LossWeights,
    ) -> Result<GraphLosses> {
        self.forward_train_fed(g, image, target, max_steps, w, Feeding::VocabularyOrder)
    }

    pub fn forward_train_fed(
        &self,
        g: &mut Graph,
        image: &ImageTensor,
        target: &IngredientSetVector,
        max_steps: usize,
        w: &LossWeights,
        feeding: Feeding,
    ) -> Result<GraphLosses> {
        if target.len() != self.vocabulary.len() {
            return Err(Error::argument("target set vector does not match the vocabulary"));
        }
        let ctx = self.encoder.forward(g, image)?;
        let rows = max_steps.min(self.config.decoder.max_steps).max(1);
        let teacher: Vec<usize> = match feeding {
            Feeding::VocabularyOrder => target.ids().collect(),
            Feeding::Greedy => {
                let emb = crate::encoder::EmbeddingSequence(g.value(ctx).clone());
                self.decoder.greedy(&emb, rows)?.emitted
            }
            Feeding::ModelOrder => {
                let emb = crate::encoder::EmbeddingSequence(g.value(ctx).clone());
                self.decoder.order_by_preference(&emb, target, rows)?
            }
        };
        let tokens = self.decoder.teacher_tokens(&teacher, rows);
        let steps = self.decoder.forward_tokens(g, ctx, &tokens)?;
        Ok(graph_losses(g, steps, target, w))
    }

    pub fn sample_losses(
        &self,
        image: &ImageTensor,
        target: &IngredientSetVector,
        max_steps: usize,
        w: &LossWeights,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let l = self.forward_train(&mut g, image, target, max_steps, w)?;
        Ok(LossBreakdown {
            loss_ingr: g.value(l.ingredients).item(),
            loss_eos: g.value(l.eos).item(),
            loss_card: g.value(l.cardinality).item(),
            total: g.value(l.total).item(),
        })
    }

    /// Ingredient ids emitted before EOS, in emission order.
    pub fn predict_ids(&self, image: &ImageTensor, max_steps: usize) -> Result<Vec<usize>> {
        let emb = self.encoder.extract(image)?;
        Ok(self.decoder.greedy(&emb, max_steps)?.emitted)
    }

    pub fn predict(&self, image: &ImageTensor, max_steps: usize) -> Result<Vec<String>> {
        Ok(self.vocabulary.names_for(&self.predict_ids(image, max_steps)?))
    }

    pub fn to_checkpoint(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_KIND, &self.config)?;
        c.set_metadata("vocabulary", &self.vocabulary)?;
        self.encoder.save_into(&mut c, "encoder");
        c.push_store("decoder", self.decoder.params());
        Ok(c)
    }

    /// Rebuilds a model from a checkpoint. When `expected` is given, the
    /// stored vocabulary must equal it.
    pub fn from_checkpoint(c: &Container, expected: Option<&IngredientVocabulary>) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let config: IngredientModelConfig = c.config()?;
        let vocabulary: IngredientVocabulary = c.metadata("vocabulary")?;
        if let Some(v) = expected {
            if v != &vocabulary {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "checkpoint vocabulary has {} names, expected {}{}",
                    vocabulary.len(),
                    v.len(),
                    first_difference(v, &vocabulary)
                )));
            }
        }
        let mut model = Self::new(config, vocabulary, 0).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
        model.encoder.load_from(c, "encoder")?;
        c.load_store("decoder", model.decoder.params_mut())?;
        Ok(model)
    }
}

fn first_difference(a: &IngredientVocabulary, b: &IngredientVocabulary) -> String {
    a.names()
        .iter()
        .zip(b.names())
        .position(|(x, y)| x != y)
        .map(|i| format!("; first difference at id {i}: '{}' vs '{}'", a.names()[i], b.names()[i]))
        .unwrap_or_default()
}

pub fn predict_ingredients(image: &ImageTensor, model: &IngredientModel, max_steps: usize) -> Result<Vec<String>> {
    model.predict(image, max_steps)
}

#[derive(Clone, Debug)]
pub struct TrainedIngredientModel {
    pub model: IngredientModel,
    pub history: Vec<EpochLog>,
}

impl TrainedIngredientModel {
    pub fn checkpoint(&self) -> Result<Container> {
        let mut c = self.model.to_checkpoint()?;
        c.set_metadata("epochs", self.history.len())?;
        c.set_metadata("history", &self.history)?;
        Ok(c)
    }
}

pub fn train_ingredient_model(
    dataset: &Dataset,
    config: &IngredientModelConfig,
    train: &TrainConfig,
    w: &LossWeights,
    log_path: Option<&Path>,
) -> Result<TrainedIngredientModel> {
    train_ingredient_model_with(dataset, config, train, w, log_path, |_, _| true)
}

struct SampleGrads {
    losses: LossBreakdown,
    encoder: StoreGrads,
    decoder: StoreGrads,
}

/// Training loop with a per-epoch hook; returning `false` from the hook stops
/// training after that epoch.
pub fn train_ingredient_model_with(
    dataset: &Dataset,
    config: &IngredientModelConfig,
    train: &TrainConfig,
    w: &LossWeights,
    log_path: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog, &IngredientModel) -> bool,
) -> Result<TrainedIngredientModel> {
    train.validate()?;
    w.validate()?;
    let vocabulary = dataset.require_vocabulary()?.clone();
    let mut config = config.clone();
    config.decoder.vocab_size = vocabulary.len();
    let mut model = IngredientModel::new(config, vocabulary, train.seed)?;

    let train_records: Vec<_> = dataset.split(Split::Train).collect();
    if train_records.is_empty() {
        return Err(Error::Data("no train-split records to fit the ingredient model".into()));
    }
    let samples: Vec<(ImageTensor, IngredientSetVector)> = train_records
        .par_iter()
        .map(|r| Ok((model.image_tensor(dataset, r)?, dataset.set_vector(r)?)))
        .collect::<Result<_>>()?;

    let mut log_file = match log_path {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut enc_opt = Adam::new(model.encoder.params(), train.learning_rate);
    let mut dec_opt = Adam::new(model.decoder.params(), train.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::new();

    for epoch in 0..train.epochs {
        let lr = train.learning_rate_at(epoch);
        enc_opt.learning_rate = lr;
        dec_opt.learning_rate = lr;
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for batch in order.chunks(train.batch_size) {
            let per_sample: Vec<Result<SampleGrads>> = batch
                .par_iter()
                .map(|&i| {
                    let (image, target) = &samples[i];
                    let mut g = Graph::new();
                    let l = model.forward_train_fed(&mut g, image, target, train.max_steps, w, train.feeding)?;
                    let grads = g.backward(l.total);
                    Ok(SampleGrads {
                        losses: LossBreakdown {
                            loss_ingr: g.value(l.ingredients).item(),
                            loss_eos: g.value(l.eos).item(),
                            loss_card: g.value(l.cardinality).item(),
                            total: g.value(l.total).item(),
                        },
                        encoder: grads.for_store(model.encoder.params()),
                        decoder: grads.for_store(model.decoder.params()),
                    })
                })
                .collect();
            let mut enc_grads = StoreGrads::zeros_like(model.encoder.params());
            let mut dec_grads = StoreGrads::zeros_like(model.decoder.params());
            for s in per_sample {
                let s = match s {
                    Ok(s) => s,
                    Err(Error::NonFinite { .. }) => return Err(diverged(&model, epoch)?),
                    Err(e) => return Err(e),
                };
                if !s.losses.is_finite() {
                    return Err(diverged(&model, epoch)?);
                }
                sums.loss_ingr += s.losses.loss_ingr;
                sums.loss_eos += s.losses.loss_eos;
                sums.loss_card += s.losses.loss_card;
                sums.total += s.losses.total;
                enc_grads.add_assign(&s.encoder);
                dec_grads.add_assign(&s.decoder);
            }
            let scale = 1.0 / batch.len() as f64;
            enc_grads.scale(scale);
            dec_grads.scale(scale);
            if !(enc_grads.all_finite() && dec_grads.all_finite()) {
                return Err(diverged(&model, epoch)?);
            }
            enc_opt.step(model.encoder.params_mut(), &enc_grads);
            dec_opt.step(model.decoder.params_mut(), &dec_grads);
        }
        let n = samples.len() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            loss_ingr: sums.loss_ingr / n,
            loss_eos: sums.loss_eos / n,
            loss_card: sums.loss_card / n,
            total: sums.total / n,
        };
        log::info!("ingredients epoch {} total loss {:.5}", entry.epoch, entry.total);
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(log_path.unwrap_or(Path::new("")), e))?;
        }
        history.push(entry);
        if !on_epoch(history.last().expect("just pushed"), &model) {
            break;
        }
    }
    Ok(TrainedIngredientModel { model, history })
}

fn diverged(model: &IngredientModel, epoch: usize) -> Result<Error> {
    log::error!("ingredient training diverged at epoch {}", epoch + 1);
    Ok(Error::Diverged {
        stage: "ingredient",
        epoch: epoch + 1,
        last_finite: Box::new(model.to_checkpoint()?),
    })
}
