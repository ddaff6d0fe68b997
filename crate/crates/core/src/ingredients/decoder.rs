use platter_tape::nn::{causal_mask, normal, DecoderBlock, Embedding, Linear};
use platter_tape::{Graph, Matrix, ParamId, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingSequence;
use crate::error::{Error, Result};

/// Number of decoder blocks.
pub const DECODER_BLOCKS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Ingredient vocabulary size N (EOS excluded).
    pub vocab_size: usize,
    /// Token width; also the width of the image embeddings attended to.
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Upper bound on decoding steps, and the padded training length.
    pub max_steps: usize,
}

impl DecoderConfig {
    pub fn new(vocab_size: usize, dim: usize) -> Self {
        Self {
            vocab_size,
            dim,
            heads: 8,
            hidden: 4 * dim,
            max_steps: 20,
        }
    }

    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            dim: 32,
            heads: 2,
            hidden: 64,
            max_steps: 20,
        }
    }

    pub fn eos_id(&self) -> usize {
        self.vocab_size
    }

    pub fn bos_id(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.hidden == 0 || self.max_steps == 0 {
            return Err(Error::Config("decoder sizes and max_steps must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("decoder dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Train,
    Infer,
}

/// Per-step scores over the N ingredients and EOS (last column), with ids
/// already emitted masked to `-inf`, plus the ingredient ids emitted before EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLogitsMatrix {
    pub logits: Matrix,
    pub emitted: Vec<usize>,
}

impl StepLogitsMatrix {
    pub fn steps(&self) -> usize {
        self.logits.rows()
    }
}

/// Autoregressive set decoder: token and position embeddings, four post-norm
/// blocks with self-attention and attention over the image embeddings, and a
/// projection to N + 1 scores. Token ids `0..N` are ingredients, `N` is EOS
/// and `N + 1` the start token.
#[derive(Clone, Debug, PartialEq)]
pub struct IngredientDecoder {
    config: DecoderConfig,
    store: ParamStore,
    tokens: Embedding,
    positions: ParamId,
    blocks: Vec<DecoderBlock>,
    projection: Linear,
}

impl IngredientDecoder {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tokens = Embedding::new(&mut store, "tokens", config.vocab_size + 2, config.dim, &mut rng);
        let positions = store.add("positions", normal(config.max_steps, config.dim, 0.02, &mut rng));
        let blocks = (0..DECODER_BLOCKS)
            .map(|i| DecoderBlock::new(&mut store, &format!("block{i}"), config.dim, config.heads, config.hidden, &mut rng))
            .collect();
        let projection = Linear::new(&mut store, "projection", config.dim, config.vocab_size + 1, &mut rng);
        Ok(Self {
            config,
            store,
            tokens,
            positions,
            blocks,
            projection,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn projection(&self) -> &Linear {
        &self.projection
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn check_context(&self, width: usize) -> Result<()> {
        if width != self.config.dim {
            return Err(Error::argument(format!(
                "image embeddings have width {width}, decoder expects {}",
                self.config.dim
            )));
        }
        Ok(())
    }

    /// Input tokens for teacher forcing: start token, the set in the given
    /// order, then EOS padding, cut to `rows`.
    pub fn teacher_tokens(&self, teacher: &[usize], rows: usize) -> Vec<usize> {
        let mut t = Vec::with_capacity(rows);
        t.push(self.config.bos_id());
        t.extend(teacher.iter().copied());
        t.resize(rows.max(1), self.config.eos_id());
        t.truncate(rows.max(1));
        t
    }

    /// Additive mask hiding, at row `t`, every ingredient fed at positions `1..=t`.
    fn repeat_mask(&self, tokens: &[usize]) -> Matrix {
        let n = self.config.vocab_size;
        let mut m = Matrix::zeros(tokens.len(), n + 1);
        for t in 0..tokens.len() {
            for &id in &tokens[1..=t] {
                if id < n {
                    m.set(t, id, f64::NEG_INFINITY);
                }
            }
        }
        m
    }

    /// Step logits for a fed token sequence (one row per token), recorded in `g`.
    pub fn forward_tokens(&self, g: &mut Graph, context: Var, tokens: &[usize]) -> Result<Var> {
        self.check_context(g.shape(context).1)?;
        let t = tokens.len();
        if t == 0 || t > self.config.max_steps {
            return Err(Error::argument(format!(
                "decoder fed {t} tokens, supports 1..={}",
                self.config.max_steps
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id > self.config.bos_id()) {
            return Err(Error::argument(format!("token id {bad} outside the decoder vocabulary")));
        }
        let s = &self.store;
        let emb = self.tokens.forward(g, s, tokens);
        let pos_table = g.param(s, self.positions);
        let pos = g.slice_rows(pos_table, 0, t);
        let mut x = g.add(emb, pos);
        let mask = causal_mask(t);
        for b in &self.blocks {
            x = b.forward(g, s, x, context, Some(&mask));
        }
        let logits = self.projection.forward(g, s, x);
        if !g.value(logits).is_finite() {
            return Err(Error::NonFinite {
                layer: "ingredient_decoder.projection".into(),
            });
        }
        Ok(if t > 1 {
            let m = self.repeat_mask(tokens);
            g.add_const(logits, &m)
        } else {
            logits
        })
    }

    /// Greedy decoding: at each step the highest-scoring unmasked token is
    /// emitted; stops at EOS or after `max_steps` steps.
    pub fn greedy(&self, embeddings: &EmbeddingSequence, max_steps: usize) -> Result<StepLogitsMatrix> {
        self.check_context(embeddings.width())?;
        let limit = max_steps.min(self.config.max_steps).max(1);
        let eos = self.config.eos_id();
        let mut tokens = vec![self.config.bos_id()];
        let mut rows = Vec::new();
        let mut emitted = Vec::new();
        loop {
            let mut g = Graph::new();
            let ctx = g.input(embeddings.matrix().clone());
            let logits = self.forward_tokens(&mut g, ctx, &tokens)?;
            let last = g.value(logits).slice_rows(tokens.len() - 1, 1);
            let next = last.argmax_row(0);
            rows.push(last.into_vec());
            if next == eos || rows.len() >= limit {
                if next != eos {
                    emitted.push(next);
                }
                break;
            }
            emitted.push(next);
            tokens.push(next);
        }
        Ok(StepLogitsMatrix {
            logits: Matrix::from_rows(&rows),
            emitted,
        })
    }
}

impl IngredientDecoder {
    /// The ids of `target` in the order greedy decoding restricted to them
    /// would emit them.
    pub fn order_by_preference(
        &self,
        embeddings: &EmbeddingSequence,
        target: &crate::corpus::IngredientSetVector,
        max_steps: usize,
    ) -> Result<Vec<usize>> {
        let mut remaining: Vec<usize> = target.ids().collect();
        let mut tokens = vec![self.config.bos_id()];
        let limit = max_steps.min(self.config.max_steps).max(1);
        while !remaining.is_empty() && tokens.len() < limit {
            let mut g = Graph::new();
            let ctx = g.input(embeddings.matrix().clone());
            let logits = self.forward_tokens(&mut g, ctx, &tokens)?;
            let row = g.value(logits).row(tokens.len() - 1).to_vec();
            let (pos, _) = remaining
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &id)| if row[id] > best.1 { (i, row[id]) } else { best });
            tokens.push(remaining.remove(pos));
        }
        tokens.extend(remaining);
        Ok(tokens[1..].to_vec())
    }
}

/// Runs the decoder over image embeddings. In infer mode, greedy decoding with
/// repeat masking until EOS or `max_steps`. In train mode, `max_steps` rows
/// driven by `teacher` (start token, set, EOS padding) when given, otherwise
/// by the decoder's own greedy choices.
pub fn decode_sequence(
    embeddings: &EmbeddingSequence,
    decoder: &IngredientDecoder,
    max_steps: usize,
    mode: DecodeMode,
    teacher: Option<&[usize]>,
) -> Result<StepLogitsMatrix> {
    let greedy = || decoder.greedy(embeddings, max_steps);
    match (mode, teacher) {
        (DecodeMode::Infer, _) => greedy(),
        (DecodeMode::Train, teacher) => {
            let rows = max_steps.min(decoder.config().max_steps).max(1);
            let sequence = match teacher {
                Some(t) => t.to_vec(),
                None => greedy()?.emitted,
            };
            let tokens = decoder.teacher_tokens(&sequence, rows);
            let mut g = Graph::new();
            let ctx = g.input(embeddings.matrix().clone());
            let logits = decoder.forward_tokens(&mut g, ctx, &tokens)?;
            Ok(StepLogitsMatrix {
                logits: g.value(logits).clone(),
                emitted: tokens[1..].iter().copied().take_while(|&id| id < decoder.config().eos_id()).collect(),
            })
        }
    }
}
