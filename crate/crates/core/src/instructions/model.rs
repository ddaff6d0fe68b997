use std::path::Path;

use platter_tape::nn::{causal_mask, normal, DecoderBlock, Embedding, EncoderBlock, LayerNorm, Linear};
use platter_tape::optim::Adam;
use platter_tape::{Graph, Matrix, ParamId, ParamStore, StoreGrads, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;

use super::format::{join_steps, training_variants, InstructionInput};
use super::generate::{GenerationConfig, Seq2SeqBackbone};
use super::tokenizer::{WordTokenizer, BOS, EOS};
use crate::checkpoint::Container;
use crate::corpus::{Dataset, RecipeRecord, Split};
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "instruction-model";

/// Shape of the small encoder-decoder text model. `max_source_length` and
/// `max_target_length` size the learned position tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_source_length: usize,
    pub max_target_length: usize,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl Seq2SeqConfig {
    pub fn toy() -> Self {
        Self {
            vocab_size: 0,
            dim: 64,
            heads: 4,
            hidden: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            max_source_length: 50,
            max_target_length: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("seq2seq dim {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if self.hidden == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("seq2seq needs a hidden width and at least one decoder layer".into()));
        }
        if self.max_source_length == 0 || self.max_target_length == 0 {
            return Err(Error::Config("seq2seq sequence lengths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for InstructionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 12,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl InstructionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("instruction batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("instruction learning rate must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionEpochLog {
    pub epoch: usize,
    pub loss: f64,
}

/// Word-level transformer encoder-decoder with shared token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionModel {
    config: Seq2SeqConfig,
    tokenizer: WordTokenizer,
    params: ParamStore,
    tokens: Embedding,
    source_positions: ParamId,
    target_positions: ParamId,
    encoder: Vec<EncoderBlock>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderBlock>,
    output: Linear,
}

impl InstructionModel {
    pub fn new(config: Seq2SeqConfig, tokenizer: WordTokenizer, seed: u64) -> Result<Self> {
        let config = Seq2SeqConfig {
            vocab_size: tokenizer.len(),
            ..config
        };
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.dim;
        let tokens = Embedding::new(&mut params, "tokens", config.vocab_size, d, &mut rng);
        let source_positions = params.add("source_positions", normal(config.max_source_length, d, 0.02, &mut rng));
        let target_positions = params.add("target_positions", normal(config.max_target_length, d, 0.02, &mut rng));
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderBlock::new(&mut params, &format!("encoder.{i}"), d, config.heads, config.hidden, &mut rng))
            .collect();
        let encoder_norm = LayerNorm::new(&mut params, "encoder.norm", d);
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderBlock::new(&mut params, &format!("decoder.{i}"), d, config.heads, config.hidden, &mut rng))
            .collect();
        let output = Linear::new(&mut params, "output", d, config.vocab_size, &mut rng);
        Ok(Self {
            config,
            tokenizer,
            params,
            tokens,
            source_positions,
            target_positions,
            encoder,
            encoder_norm,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &Seq2SeqConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &WordTokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Source token ids, cut to `max_len` (and the position table) with a warning.
    pub fn source_ids(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids = self.tokenizer.encode(text);
        let limit = max_len.min(self.config.max_source_length);
        if ids.len() > limit {
            log::warn!("model input has {} tokens; truncated to {limit}", ids.len());
            ids.truncate(limit);
        }
        ids
    }

    fn embed(&self, g: &mut Graph, ids: &[usize], positions: ParamId) -> Var {
        let x = self.tokens.forward(g, &self.params, ids);
        let p = g.param(&self.params, positions);
        let p = g.slice_rows(p, 0, ids.len());
        g.add(x, p)
    }

    fn encode_graph(&self, g: &mut Graph, source: &[usize]) -> Var {
        let mut x = self.embed(g, source, self.source_positions);
        for block in &self.encoder {
            x = block.forward(g, &self.params, x, None);
        }
        self.encoder_norm.forward(g, &self.params, x)
    }

    fn decode_graph(&self, g: &mut Graph, memory: Var, inputs: &[usize]) -> Var {
        let mut x = self.embed(g, inputs, self.target_positions);
        let mask = causal_mask(inputs.len());
        for block in &self.decoder {
            x = block.forward(g, &self.params, x, memory, Some(&mask));
        }
        x
    }

    /// Teacher-forced mean token cross-entropy of `target` given `source`.
    pub fn loss_graph(&self, g: &mut Graph, source: &[usize], target: &[usize]) -> Var {
        let keep = target.len().min(self.config.max_target_length - 1);
        let mut inputs = Vec::with_capacity(keep + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(&target[..keep]);
        let labels: Vec<Option<usize>> = target[..keep].iter().copied().chain([EOS]).map(Some).collect();
        let source = if source.is_empty() { &[EOS][..] } else { source };
        let memory = self.encode_graph(g, source);
        let h = self.decode_graph(g, memory, &inputs);
        let logits = self.output.forward(g, &self.params, h);
        g.cross_entropy(logits, &labels)
    }

    pub fn to_checkpoint(&self, generation: &GenerationConfig) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_KIND, &self.config)?;
        c.set_metadata("tokenizer", &self.tokenizer)?;
        c.set_metadata("generation", generation)?;
        c.push_store("model", &self.params);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Container) -> Result<(Self, GenerationConfig)> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let config: Seq2SeqConfig = c.config()?;
        let tokenizer: WordTokenizer = c.metadata("tokenizer")?;
        if tokenizer.len() != config.vocab_size {
            return Err(Error::IncompatibleCheckpoint(format!(
                "tokenizer has {} entries but the model expects {}",
                tokenizer.len(),
                config.vocab_size
            )));
        }
        let generation: GenerationConfig = c.metadata("generation")?;
        let mut model = Self::new(config, tokenizer, 0)?;
        c.load_store("model", &mut model.params)?;
        Ok((model, generation))
    }
}

impl Seq2SeqBackbone for InstructionModel {
    type Memory = Matrix;

    fn encode(&self, text: &str, max_source_length: usize) -> Result<Matrix> {
        let ids = self.source_ids(text, max_source_length);
        let ids = if ids.is_empty() { vec![EOS] } else { ids };
        let mut g = Graph::new();
        let m = self.encode_graph(&mut g, &ids);
        let out = g.value(m).clone();
        if !out.is_finite() {
            return Err(Error::NonFinite { layer: "instructions.encoder".into() });
        }
        Ok(out)
    }

    fn next_token_logits(&self, memory: &Matrix, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(prefix);
        if inputs.len() > self.config.max_target_length {
            return Err(Error::argument(format!(
                "decoder prefix of {} tokens exceeds the model's {} positions",
                inputs.len(),
                self.config.max_target_length
            )));
        }
        let mut g = Graph::new();
        let mem = g.input(memory.clone());
        let h = self.decode_graph(&mut g, mem, &inputs);
        let last = g.slice_rows(h, inputs.len() - 1, 1);
        let logits = self.output.forward(&mut g, &self.params, last);
        let row = g.value(logits).row(0).to_vec();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: "instructions.decoder".into() });
        }
        Ok(row)
    }

    fn eos_id(&self) -> usize {
        EOS
    }

    fn max_target_positions(&self) -> usize {
        self.config.max_target_length
    }

    fn detokenize(&self, ids: &[usize]) -> String {
        self.tokenizer.decode(ids)
    }
}

/// Builds the model input of a record, with reserved separators in free text
/// replaced by commas.
pub fn record_input(record: &RecipeRecord) -> InstructionInput {
    InstructionInput::from_parts(&record.title, &record.ingredients, Some(&record.ingredients_with_quantity))
}

#[derive(Clone, Debug)]
pub struct TrainedInstructionModel {
    pub model: InstructionModel,
    pub generation: GenerationConfig,
    pub history: Vec<InstructionEpochLog>,
}

impl TrainedInstructionModel {
    pub fn checkpoint(&self) -> Result<Container> {
        let mut c = self.model.to_checkpoint(&self.generation)?;
        c.set_metadata("epochs", self.history.len())?;
        c.set_metadata("history", &self.history)?;
        Ok(c)
    }
}

/// Training pairs (formatted input, concatenated steps) of the train split,
/// one pair per input variant.
pub fn training_pairs(dataset: &Dataset) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for r in dataset.split(Split::Train) {
        if r.instructions.is_empty() {
            return Err(Error::Data(format!("record {} has no instructions", r.id)));
        }
        let target = join_steps(&r.instructions);
        for source in training_variants(&record_input(r))? {
            pairs.push((source, target.clone()));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data("no train-split records to fit the instruction model".into()));
    }
    Ok(pairs)
}

pub fn finetune_instruction_model(
    dataset: &Dataset,
    model_config: &Seq2SeqConfig,
    train: &InstructionTrainConfig,
    generation: &GenerationConfig,
    log_path: Option<&Path>,
) -> Result<TrainedInstructionModel> {
    train.validate()?;
    generation.validate()?;
    let pairs = training_pairs(dataset)?;
    let texts: Vec<&str> = pairs.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()]).collect();
    let tokenizer = WordTokenizer::fit(&texts);
    let mut model = InstructionModel::new(model_config.clone(), tokenizer, train.seed)?;
    let encoded: Vec<(Vec<usize>, Vec<usize>)> = pairs
        .iter()
        .map(|(s, t)| (model.source_ids(s, generation.max_source_length), model.tokenizer.encode(t)))
        .collect();

    let mut log_file = match log_path {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut opt = Adam::adamw(&model.params, train.learning_rate, train.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let per_sample: Vec<(f64, StoreGrads)> = batch
                .par_iter()
                .map(|&i| {
                    let (s, t) = &encoded[i];
                    let mut g = Graph::new();
                    let loss = model.loss_graph(&mut g, s, t);
                    (g.value(loss).item(), g.backward(loss).for_store(&model.params))
                })
                .collect();
            let mut grads = StoreGrads::zeros_like(&model.params);
            for (loss, g) in &per_sample {
                if !loss.is_finite() {
                    return Err(diverged(&model, generation, epoch)?);
                }
                total += loss;
                grads.add_assign(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.all_finite() {
                return Err(diverged(&model, generation, epoch)?);
            }
            opt.step(&mut model.params, &grads);
        }
        let entry = InstructionEpochLog {
            epoch: epoch + 1,
            loss: total / encoded.len() as f64,
        };
        log::info!("instructions epoch {} loss {:.5}", entry.epoch, entry.loss);
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(log_path.unwrap_or(Path::new("")), e))?;
        }
        history.push(entry);
    }
    Ok(TrainedInstructionModel {
        model,
        generation: generation.clone(),
        history,
    })
}

fn diverged(model: &InstructionModel, generation: &GenerationConfig, epoch: usize) -> Result<Error> {
    log::error!("instruction training diverged at epoch {}", epoch + 1);
    Ok(Error::Diverged {
        stage: "instruction",
        epoch: epoch + 1,
        last_finite: Box::new(model.to_checkpoint(generation)?),
    })
}
