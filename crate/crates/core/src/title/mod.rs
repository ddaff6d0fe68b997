//! Title captioning: a small image encoder with an autoregressive character
//! decoder, fine-tuned on a sampled fraction of the corpus and selected by
//! the dev-split LCS similarity.

mod lcs;

use std::io::Write as _;
use std::path::Path;

use platter_tape::nn::{causal_mask, normal, DecoderBlock, Embedding, Linear};
use platter_tape::optim::Adam;
use platter_tape::{Graph, Matrix, ParamId, ParamStore, StoreGrads, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::lcs::{lcs_length, lcs_similarity, normalize_title};
use crate::checkpoint::Container;
use crate::corpus::{Dataset, ImageTensor, PixelNormalization, RecipeRecord, Split};
use crate::encoder::{EncoderConfig, VisionEncoder};
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "title-model";

/// Characters a title can be spelled with; anything else is dropped.
pub const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz0123456789'-&,.";

fn alphabet_len() -> usize {
    ALPHABET.chars().count()
}

fn char_id(c: char) -> Option<usize> {
    ALPHABET.chars().position(|a| a == c)
}

/// Normalized title restricted to [`ALPHABET`].
pub fn spellable_title(title: &str) -> String {
    let kept: String = normalize_title(title).chars().filter(|&c| char_id(c).is_some()).collect();
    normalize_title(&kept)
}

/// Something that turns an image into a title.
pub trait Captioner {
    fn image_side(&self) -> usize;
    fn normalization(&self) -> &PixelNormalization;
    fn caption(&self, image: &ImageTensor) -> Result<String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub encoder: EncoderConfig,
    pub heads: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Longest generated title, in characters.
    pub max_title_length: usize,
    #[serde(default)]
    pub normalization: PixelNormalization,
}

impl CaptionerConfig {
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            heads: 2,
            hidden: 64,
            layers: 2,
            max_title_length: 48,
            normalization: PixelNormalization::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.output_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.normalization.validate()?;
        if self.heads == 0 || !self.dim().is_multiple_of(self.heads) {
            return Err(Error::Config(format!("title decoder width {} not divisible by {} heads", self.dim(), self.heads)));
        }
        if self.layers == 0 || self.hidden == 0 || self.max_title_length == 0 {
            return Err(Error::Config("title decoder needs layers, a hidden width and a positive max length".into()));
        }
        Ok(())
    }
}

/// Trained (or freshly initialized) toy captioner.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionerHandle {
    config: CaptionerConfig,
    encoder: VisionEncoder,
    params: ParamStore,
    chars: Embedding,
    positions: ParamId,
    blocks: Vec<DecoderBlock>,
    output: Linear,
}

impl CaptionerHandle {
    pub fn new(config: CaptionerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = VisionEncoder::new(config.encoder.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut params = ParamStore::new();
        let d = config.dim();
        let n = alphabet_len();
        // alphabet, then start and end tokens
        let chars = Embedding::new(&mut params, "chars", n + 2, d, &mut rng);
        let positions = params.add("positions", normal(config.max_title_length + 1, d, 0.02, &mut rng));
        let blocks = (0..config.layers)
            .map(|i| DecoderBlock::new(&mut params, &format!("block.{i}"), d, config.heads, config.hidden, &mut rng))
            .collect();
        let output = Linear::new(&mut params, "output", d, n + 1, &mut rng);
        Ok(Self {
            config,
            encoder,
            params,
            chars,
            positions,
            blocks,
            output,
        })
    }

    pub fn config(&self) -> &CaptionerConfig {
        &self.config
    }

    fn eos(&self) -> usize {
        alphabet_len()
    }

    fn bos(&self) -> usize {
        alphabet_len() + 1
    }

    pub fn image_tensor(&self, dataset: &Dataset, record: &RecipeRecord) -> Result<ImageTensor> {
        dataset.image_tensor(record, self.config.encoder.image_side, &self.config.normalization)
    }

    fn decode_graph(&self, g: &mut Graph, memory: Var, inputs: &[usize]) -> Var {
        let x = self.chars.forward(g, &self.params, inputs);
        let p = g.param(&self.params, self.positions);
        let p = g.slice_rows(p, 0, inputs.len());
        let mut x = g.add(x, p);
        let mask = causal_mask(inputs.len());
        for b in &self.blocks {
            x = b.forward(g, &self.params, x, memory, Some(&mask));
        }
        self.output.forward(g, &self.params, x)
    }

    fn target_ids(&self, title: &str) -> Vec<usize> {
        spellable_title(title)
            .chars()
            .filter_map(char_id)
            .take(self.config.max_title_length)
            .collect()
    }

    /// Teacher-forced character cross-entropy of `title` for `image`.
    pub fn loss_graph(&self, g: &mut Graph, image: &ImageTensor, title: &str) -> Result<Var> {
        let memory = self.encoder.forward(g, image)?;
        let target = self.target_ids(title);
        let inputs: Vec<usize> = std::iter::once(self.bos()).chain(target.iter().copied()).collect();
        let labels: Vec<Option<usize>> = target.iter().copied().chain([self.eos()]).map(Some).collect();
        let logits = self.decode_graph(g, memory, &inputs);
        Ok(g.cross_entropy(logits, &labels))
    }

    /// Greedy character decoding. The end token and leading spaces are
    /// suppressed until a visible character exists, so the title is never empty.
    pub fn generate(&self, image: &ImageTensor) -> Result<String> {
        let memory = self.encoder.extract(image)?;
        let mut emitted: Vec<usize> = Vec::new();
        let space = char_id(' ').expect("space is in the alphabet");
        while emitted.len() < self.config.max_title_length {
            let logits = self.step_logits(memory.matrix(), &emitted)?;
            let started = emitted.iter().any(|&c| c != space);
            let mut best = None;
            for (i, &v) in logits.iter().enumerate() {
                if !started && (i == self.eos() || i == space) {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            let (next, _) = best.expect("alphabet is nonempty");
            if next == self.eos() {
                break;
            }
            emitted.push(next);
        }
        let text: String = emitted.iter().map(|&i| ALPHABET.chars().nth(i).expect("id in alphabet")).collect();
        Ok(normalize_title(&text))
    }

    fn step_logits(&self, memory: &Matrix, emitted: &[usize]) -> Result<Vec<f64>> {
        let inputs: Vec<usize> = std::iter::once(self.bos()).chain(emitted.iter().copied()).collect();
        let mut g = Graph::new();
        let m = g.input(memory.clone());
        let logits = self.decode_graph(&mut g, m, &inputs);
        let row = g.value(logits).row(inputs.len() - 1).to_vec();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: "title.decoder".into() });
        }
        Ok(row)
    }

    pub fn to_checkpoint(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_KIND, &self.config)?;
        c.set_metadata("alphabet", ALPHABET)?;
        self.encoder.save_into(&mut c, "encoder");
        c.push_store("decoder", &self.params);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let alphabet: String = c.metadata("alphabet")?;
        if alphabet != ALPHABET {
            return Err(Error::IncompatibleCheckpoint("title checkpoint uses a different character set".into()));
        }
        let config: CaptionerConfig = c.config()?;
        let mut h = Self::new(config, 0).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
        h.encoder.load_from(c, "encoder")?;
        c.load_store("decoder", &mut h.params)?;
        Ok(h)
    }
}

impl Captioner for CaptionerHandle {
    fn image_side(&self) -> usize {
        self.config.encoder.image_side
    }

    fn normalization(&self) -> &PixelNormalization {
        &self.config.normalization
    }

    fn caption(&self, image: &ImageTensor) -> Result<String> {
        self.generate(image)
    }
}

/// Nonempty, lowercase, whitespace-normalized title for `image`.
pub fn generate_title(image: &ImageTensor, handle: &impl Captioner) -> Result<String> {
    if image.side() != handle.image_side() {
        return Err(Error::argument(format!(
            "captioner expects {}-pixel images, got {}",
            handle.image_side(),
            image.side()
        )));
    }
    handle.caption(image)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TitleTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TitleTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 24,
            learning_rate: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TitleEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dev_lcs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedTitleModel {
    pub handle: CaptionerHandle,
    pub history: Vec<TitleEpochLog>,
    /// Epoch whose snapshot was kept (0 when no epoch ran).
    pub best_epoch: usize,
    pub subset_ids: Vec<String>,
}

impl TrainedTitleModel {
    pub fn checkpoint(&self) -> Result<Container> {
        let mut c = self.handle.to_checkpoint()?;
        c.set_metadata("history", &self.history)?;
        c.set_metadata("best_epoch", self.best_epoch)?;
        Ok(c)
    }
}

/// Seeded sample of `round(fraction * n)` indices out of `n`, at least one,
/// returned in ascending order.
pub fn sample_fraction(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::argument(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Mean LCS similarity of generated titles against references.
pub fn mean_lcs(handle: &CaptionerHandle, samples: &[(ImageTensor, String)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to score titles on".into()));
    }
    let scores: Vec<f64> = samples
        .par_iter()
        .map(|(img, title)| lcs_similarity(&handle.generate(img)?, title))
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Fine-tunes on a seeded `fraction` of the train split and returns the
/// snapshot of the epoch with the best mean dev-split LCS (earliest on ties).
/// Without dev records the training subset is scored instead.
pub fn finetune_title_model(
    dataset: &Dataset,
    fraction: f64,
    handle: CaptionerHandle,
    config: &TitleTrainConfig,
    log_path: Option<&Path>,
) -> Result<TrainedTitleModel> {
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config("title batch_size and learning_rate must be positive".into()));
    }
    let train: Vec<&RecipeRecord> = dataset.split(Split::Train).collect();
    let chosen = sample_fraction(train.len(), fraction, config.seed)?;
    if chosen.is_empty() {
        return Err(Error::Data("no train-split (image, title) pairs".into()));
    }
    let subset: Vec<&RecipeRecord> = chosen.iter().map(|&i| train[i]).collect();
    let load = |records: &[&RecipeRecord]| -> Result<Vec<(ImageTensor, String)>> {
        records.par_iter().map(|r| Ok((handle.image_tensor(dataset, r)?, r.title.clone()))).collect()
    };
    let samples = load(&subset)?;
    let dev_records: Vec<&RecipeRecord> = dataset.split(Split::Dev).collect();
    let dev = if dev_records.is_empty() {
        log::warn!("no dev records; selecting the title epoch on the training subset");
        samples.clone()
    } else {
        load(&dev_records)?
    };

    let mut log_file = match log_path {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut model = handle;
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut enc_opt = Adam::new(model.encoder.params(), config.learning_rate);
    let mut dec_opt = Adam::new(&model.params, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(7));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let per_sample: Vec<Result<(f64, StoreGrads, StoreGrads)>> = batch
                .par_iter()
                .map(|&i| {
                    let (img, title) = &samples[i];
                    let mut g = Graph::new();
                    let loss = model.loss_graph(&mut g, img, title)?;
                    let grads = g.backward(loss);
                    Ok((g.value(loss).item(), grads.for_store(model.encoder.params()), grads.for_store(&model.params)))
                })
                .collect();
            let mut enc = StoreGrads::zeros_like(model.encoder.params());
            let mut dec = StoreGrads::zeros_like(&model.params);
            for s in per_sample {
                let (loss, e, d) = match s {
                    Ok(s) => s,
                    Err(Error::NonFinite { .. }) => return Err(diverged(&best.0, epoch)?),
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    return Err(diverged(&best.0, epoch)?);
                }
                total += loss;
                enc.add_assign(&e);
                dec.add_assign(&d);
            }
            let scale = 1.0 / batch.len() as f64;
            enc.scale(scale);
            dec.scale(scale);
            if !(enc.all_finite() && dec.all_finite()) {
                return Err(diverged(&best.0, epoch)?);
            }
            enc_opt.step(model.encoder.params_mut(), &enc);
            dec_opt.step(&mut model.params, &dec);
        }
        let dev_lcs = mean_lcs(&model, &dev)?;
        let entry = TitleEpochLog {
            epoch: epoch + 1,
            loss: total / samples.len() as f64,
            dev_lcs,
        };
        log::info!("title epoch {} loss {:.5} dev lcs {:.4}", entry.epoch, entry.loss, entry.dev_lcs);
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(log_path.unwrap_or(Path::new("")), e))?;
        }
        if dev_lcs > best.2 {
            best = (model.clone(), epoch + 1, dev_lcs);
        }
        history.push(entry);
    }
    let subset_ids = subset.iter().map(|r| r.id.clone()).collect();
    Ok(TrainedTitleModel {
        handle: best.0,
        history,
        best_epoch: best.1,
        subset_ids,
    })
}

fn diverged(last_good: &CaptionerHandle, epoch: usize) -> Result<Error> {
    log::error!("title training diverged at epoch {}", epoch + 1);
    Ok(Error::Diverged {
        stage: "title",
        epoch: epoch + 1,
        last_finite: Box::new(last_good.to_checkpoint()?),
    })
}

/// One line of the title output file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TitleRecord {
    pub id: String,
    pub title: String,
}
