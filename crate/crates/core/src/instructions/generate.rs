use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::format::{format_model_input, split_into_steps, FormatMode, InstructionInput};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub num_beams: usize,
    pub length_penalty: f64,
    pub repetition_penalty: f64,
    pub max_source_length: usize,
    pub max_target_length: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_beams: 4,
            length_penalty: 1.0,
            repetition_penalty: 2.5,
            max_source_length: 50,
            max_target_length: 512,
        }
    }
}

impl GenerationConfig {
    pub fn greedy() -> Self {
        Self {
            num_beams: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_beams == 0 {
            return Err(Error::Config("num_beams must be at least 1".into()));
        }
        if self.max_source_length == 0 || self.max_target_length == 0 {
            return Err(Error::Config("generation lengths must be positive".into()));
        }
        if !(self.repetition_penalty.is_finite() && self.repetition_penalty > 0.0) || !self.length_penalty.is_finite() {
            return Err(Error::Config("repetition penalty must be positive and length penalty finite".into()));
        }
        Ok(())
    }
}

/// What the decoding routines need from a text model.
pub trait Seq2SeqBackbone {
    type Memory;

    fn encode(&self, text: &str, max_source_length: usize) -> Result<Self::Memory>;
    /// Unnormalized scores of the token following `prefix` (generated tokens,
    /// without the start token).
    fn next_token_logits(&self, memory: &Self::Memory, prefix: &[usize]) -> Result<Vec<f64>>;
    fn eos_id(&self) -> usize;
    /// Longest decoder input the model can position.
    fn max_target_positions(&self) -> usize;
    fn detokenize(&self, ids: &[usize]) -> String;
}

/// Divides positive scores of already generated tokens by `penalty` and
/// multiplies negative ones, so repeats always become less likely.
pub fn apply_repetition_penalty(logits: &mut [f64], generated: &[usize], penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    let mut seen = vec![false; logits.len()];
    for &t in generated {
        if t < logits.len() && !seen[t] {
            seen[t] = true;
            let v = &mut logits[t];
            *v = if *v > 0.0 { *v / penalty } else { *v * penalty };
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

fn step_log_probs<B: Seq2SeqBackbone>(model: &B, memory: &B::Memory, prefix: &[usize], gen: &GenerationConfig) -> Result<Vec<f64>> {
    let mut logits = model.next_token_logits(memory, prefix)?;
    apply_repetition_penalty(&mut logits, prefix, gen.repetition_penalty);
    Ok(log_softmax(&logits))
}

fn length_limit<B: Seq2SeqBackbone>(model: &B, gen: &GenerationConfig) -> usize {
    gen.max_target_length.min(model.max_target_positions())
}

/// Picks the most likely next token at every step. Never returns more than
/// `max_target_length` tokens; the end token is not included.
pub fn greedy_decode<B: Seq2SeqBackbone>(model: &B, memory: &B::Memory, gen: &GenerationConfig) -> Result<Vec<usize>> {
    let limit = length_limit(model, gen);
    let mut out = Vec::new();
    while out.len() < limit {
        let lp = step_log_probs(model, memory, &out, gen)?;
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        if best == model.eos_id() {
            break;
        }
        out.push(best);
    }
    Ok(out)
}

struct Candidate {
    score: f64,
    step: f64,
    beam: usize,
    token: usize,
}

/// Beam search over summed log-probabilities. Each step keeps the best
/// `num_beams` extensions overall; extensions ending in the end token are
/// moved to the finished list. Finished hypotheses are ranked by
/// `score / length^length_penalty`. With one beam this is greedy decoding.
pub fn beam_search<B: Seq2SeqBackbone>(model: &B, memory: &B::Memory, gen: &GenerationConfig) -> Result<Vec<usize>> {
    let limit = length_limit(model, gen);
    let normalized = |score: f64, len: usize| score / (len.max(1) as f64).powf(gen.length_penalty);
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..limit {
        let mut candidates = Vec::new();
        for (beam, (tokens, score)) in alive.iter().enumerate() {
            for (token, lp) in step_log_probs(model, memory, tokens, gen)?.into_iter().enumerate() {
                candidates.push(Candidate {
                    score: score + lp,
                    step: lp,
                    beam,
                    token,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(b.step.total_cmp(&a.step))
                .then(a.beam.cmp(&b.beam))
                .then(a.token.cmp(&b.token))
        });
        let mut next = Vec::new();
        for c in candidates.into_iter().take(gen.num_beams) {
            let tokens = &alive[c.beam].0;
            if c.token == model.eos_id() {
                // the end token counts towards the length
                finished.push((tokens.clone(), normalized(c.score, tokens.len() + 1)));
            } else {
                let mut t = tokens.clone();
                t.push(c.token);
                next.push((t, c.score));
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
        if finished.len() >= gen.num_beams {
            let mut ranked: Vec<f64> = finished.iter().map(|f| f.1).collect();
            ranked.sort_by(|a, b| b.total_cmp(a));
            let worst_kept = ranked[gen.num_beams - 1];
            let best_alive = alive.iter().map(|(t, s)| normalized(*s, t.len())).fold(f64::NEG_INFINITY, f64::max);
            if best_alive <= worst_kept {
                break;
            }
        }
    }
    for (tokens, score) in alive {
        let n = tokens.len();
        finished.push((tokens, normalized(score, n)));
    }
    let best = finished
        .into_iter()
        .reduce(|best, f| if f.1.total_cmp(&best.1) == Ordering::Greater { f } else { best })
        .expect("at least one hypothesis");
    Ok(best.0)
}

/// Token ids generated for an already formatted model input.
pub fn generate_ids<B: Seq2SeqBackbone>(model: &B, source: &str, gen: &GenerationConfig) -> Result<Vec<usize>> {
    gen.validate()?;
    let memory = model.encode(source, gen.max_source_length)?;
    if gen.num_beams == 1 {
        greedy_decode(model, &memory, gen)
    } else {
        beam_search(model, &memory, gen)
    }
}

/// Generates steps from a title and ingredient names only.
pub fn generate_instructions<B: Seq2SeqBackbone, S: AsRef<str>>(
    title: &str,
    ingredients: &[S],
    model: &B,
    gen: &GenerationConfig,
) -> Result<Vec<String>> {
    let input = InstructionInput::from_parts(title, ingredients, None);
    let source = format_model_input(&input, FormatMode::Infer)?;
    let ids = generate_ids(model, &source, gen)?;
    Ok(split_into_steps(&model.detokenize(&ids)))
}

/// Parallel [`generate_instructions`] over `(title, ingredients)` pairs, in input order.
pub fn generate_instructions_batch<B: Seq2SeqBackbone + Sync>(
    inputs: &[(String, Vec<String>)],
    model: &B,
    gen: &GenerationConfig,
) -> Result<Vec<Vec<String>>> {
    inputs.par_iter().map(|(t, i)| generate_instructions(t, i, model, gen)).collect()
}

/// One generated recipe as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecipe {
    pub id: String,
    pub title: String,
    pub ingredients: Vec<String>,
    pub steps: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bigram table model: logits depend only on the last token.
    struct Table {
        rows: Vec<Vec<f64>>,
    }

    impl Seq2SeqBackbone for Table {
        type Memory = ();

        fn encode(&self, _: &str, _: usize) -> Result<()> {
            Ok(())
        }

        fn next_token_logits(&self, _: &(), prefix: &[usize]) -> Result<Vec<f64>> {
            Ok(self.rows[prefix.last().map_or(0, |&t| t)].clone())
        }

        fn eos_id(&self) -> usize {
            1
        }

        fn max_target_positions(&self) -> usize {
            100
        }

        fn detokenize(&self, ids: &[usize]) -> String {
            ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
        }
    }

    fn table() -> Table {
        // from start: 2 is likely, but 2 leads to a weak continuation while
        // 3 leads to a confident end
        Table {
            rows: vec![
                vec![-9.0, -9.0, 1.0, 0.8],
                vec![0.0; 4],
                vec![-9.0, 0.1, 0.0, 0.0],
                vec![-9.0, 5.0, -9.0, -9.0],
            ],
        }
    }

    #[test]
    fn repetition_penalty_follows_sign() {
        let mut l = vec![2.0, -2.0, 1.0];
        apply_repetition_penalty(&mut l, &[0, 1, 1], 2.0);
        assert_eq!(l, vec![1.0, -4.0, 1.0]);
    }

    #[test]
    fn beam_search_recovers_higher_total_probability() {
        let gen = GenerationConfig {
            repetition_penalty: 1.0,
            length_penalty: 0.0,
            ..GenerationConfig::default()
        };
        let m = table();
        assert_eq!(greedy_decode(&m, &(), &gen).unwrap()[0], 2);
        assert_eq!(beam_search(&m, &(), &gen).unwrap(), vec![3]);
    }

    #[test]
    fn one_beam_equals_greedy_with_penalty() {
        let m = table();
        let gen = GenerationConfig::greedy();
        assert_eq!(beam_search(&m, &(), &gen).unwrap(), greedy_decode(&m, &(), &gen).unwrap());
    }

    #[test]
    fn outputs_respect_the_length_bound() {
        let m = Table { rows: vec![vec![-9.0, -9.0, 3.0, 3.0]; 4] };
        let gen = GenerationConfig {
            max_target_length: 7,
            ..GenerationConfig::default()
        };
        assert_eq!(greedy_decode(&m, &(), &gen).unwrap().len(), 7);
        assert!(beam_search(&m, &(), &gen).unwrap().len() <= 7);
    }
}
