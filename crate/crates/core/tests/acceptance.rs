//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Run a subset with `cargo test --test acceptance -- 3 7`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use platter::apps::{
    build_code_prompt, instruction_to_function_name, load_code_demos, normalize_code, parse_code_recipe, CustomizationRequest,
    CustomizationTopic, PromptRecipe, CODE_SEGMENT_SEPARATOR,
};
use platter::corpus::{
    generate_synthetic_corpus, write_layered_corpus, Dataset, ImageTensor, IngredientSetVector, IngredientVocabulary, Split,
    SyntheticConfig,
};
use platter::encoder::{Backbone, EmbeddingSequence, EncoderConfig};
use platter::ingredients::{
    cardinality_loss, composite_loss, decode_sequence, graph_losses, ingredient_loss, pool_step_logits, sample_losses,
    train_ingredient_model, DecodeMode, DecoderConfig, Feeding, IngredientDecoder, IngredientModel, IngredientModelConfig,
    LossBreakdown, LossWeights, TrainConfig,
};
use platter::instructions::{
    beam_search, finetune_instruction_model, format_model_input, greedy_decode, join_steps, FormatMode, GenerationConfig,
    InstructionInput, InstructionModel, InstructionTrainConfig, Seq2SeqBackbone, Seq2SeqConfig, WordTokenizer,
};
use platter::metrics::{corpus_bleu, finalize_set_metrics, merge_set_counts, update_set_counts, SetCountAccumulator};
use platter::pipeline::{
    evaluate_pipeline, load_corpus, run_image_to_recipe, train_ingredient_stage, train_instruction_stage, train_title_stage,
    GroundTruthMode, Pipeline, PipelineConfig,
};
use platter::title::lcs_similarity;
use platter_tape::{Graph, Matrix};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn normal(rng: &mut impl Rng, std: f64) -> f64 {
    // Box-Muller keeps the suite independent of the crate's initializers
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    let v: f64 = rng.random();
    std * (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal(rng, std)).collect())
}

fn random_set(rng: &mut impl Rng, n: usize, k: usize) -> IngredientSetVector {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let mut bits = vec![0u8; n];
    for &i in &ids[..k] {
        bits[i] = 1;
    }
    IngredientSetVector::from_bits(bits).expect("valid bits")
}

// 1 -----------------------------------------------------------------------

fn brute_force_counts(pairs: &[(Vec<usize>, Vec<usize>)]) -> (u64, u64, u64) {
    let materialize = |ids: &Vec<usize>| {
        let mut names: Vec<String> = Vec::new();
        for i in ids {
            let name = format!("ingredient-{i}");
            if !names.contains(&name) {
                names.push(name);
            }
        }
        names
    };
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, t) in pairs {
        let (p, t) = (materialize(p), materialize(t));
        tp += p.iter().filter(|x| t.contains(x)).count() as u64;
        fp += p.iter().filter(|x| !t.contains(x)).count() as u64;
        fn_ += t.iter().filter(|x| !p.contains(x)).count() as u64;
    }
    (tp, fp, fn_)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let list = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(0..12);
        (0..len).map(|_| rng.random_range(0..30)).collect::<Vec<usize>>()
    };
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..1000).map(|_| (list(&mut rng), list(&mut rng))).collect();
    let sets: Vec<(BTreeSet<usize>, BTreeSet<usize>)> = pairs
        .iter()
        .map(|(p, t)| (p.iter().copied().collect(), t.iter().copied().collect()))
        .collect();

    let (tp, fp, fn_) = brute_force_counts(&pairs);
    let acc = sets.iter().fold(SetCountAccumulator::default(), |a, (p, t)| update_set_counts(a, p, t));
    ensure!((acc.tp, acc.fp, acc.fn_) == (tp, fp, fn_), "counts {:?} vs brute force {:?}", (acc.tp, acc.fp, acc.fn_), (tp, fp, fn_));
    let m = ok(finalize_set_metrics(&acc))?;
    let (iou, f1) = (tp as f64 / (tp + fp + fn_) as f64, 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
    ensure!(m.iou == iou && m.f1 == f1, "metrics {m:?} vs brute force iou {iou} f1 {f1}");

    for trial in 0..20 {
        let shards = rng.random_range(2..40);
        let mut cuts: Vec<usize> = (0..shards - 1).map(|_| rng.random_range(0..=sets.len())).collect();
        cuts.push(0);
        cuts.push(sets.len());
        cuts.sort_unstable();
        let mut parts: Vec<SetCountAccumulator> = cuts
            .windows(2)
            .map(|w| {
                sets[w[0]..w[1]]
                    .iter()
                    .fold(SetCountAccumulator::default(), |a, (p, t)| update_set_counts(a, p, t))
            })
            .collect();
        parts.shuffle(&mut rng);
        let merged = parts.into_iter().fold(SetCountAccumulator::default(), merge_set_counts);
        ensure!(merged == acc, "shard trial {trial}: merged {merged:?} differs from {acc:?}");
    }
    Ok(format!("tp {tp} fp {fp} fn {fn_}, iou {iou:.6} f1 {f1:.6}, 20 shard orders agree"))
}

// 2 -----------------------------------------------------------------------

fn lcs_example() -> Outcome {
    let v = ok(lcs_similarity("black bean and rice", "black bean and rice salad"))?;
    ensure!((v - 0.76).abs() <= 0.005, "similarity {v}");
    Ok(format!("similarity {v:.4}"))
}

// 3 -----------------------------------------------------------------------

const FD_STEP: f64 = 1e-4;
const GRAD_TOLERANCE: f64 = 1e-3;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn loss_terms(b: &LossBreakdown) -> [f64; 4] {
    [b.loss_ingr, b.loss_eos, b.loss_card, b.total]
}

const LOSS_NAMES: [&str; 4] = ["loss_ingr", "loss_eos", "loss_card", "total"];

/// Step logits away from the non-differentiable points of max pooling and
/// the absolute value, so central differences are meaningful.
fn well_conditioned(steps: &Matrix, target: &IngredientSetVector) -> bool {
    let k = target.cardinality();
    let rows = (k + 1).min(steps.rows());
    let n = steps.cols() - 1;
    for j in 0..n {
        let mut col: Vec<f64> = (0..rows).map(|t| steps.get(t, j)).collect();
        col.sort_by(|a, b| b.total_cmp(a));
        if col.len() > 1 && col[0] - col[1] < 100.0 * FD_STEP {
            return false;
        }
    }
    let pooled = pool_step_logits(&steps.slice_rows(0, rows)).expect("rows");
    let count: f64 = pooled.iter().map(|&z| platter_tape::sigmoid(z)).sum();
    (count - k as f64).abs() > 100.0 * FD_STEP
}

fn logit_gradients(rng: &mut ChaCha8Rng, w: &LossWeights) -> Result<f64, String> {
    let (steps, target) = loop {
        let n = rng.random_range(2..9);
        let t = rng.random_range(1..8);
        let k = rng.random_range(0..=n.min(t));
        let steps = random_matrix(rng, t, n + 1, 2.0);
        let target = random_set(rng, n, k);
        if well_conditioned(&steps, &target) {
            break (steps, target);
        }
    };
    let mut g = Graph::new();
    let v = g.input(steps.clone());
    let l = graph_losses(&mut g, v, &target, w);
    let reference = loss_terms(&ok(sample_losses(&steps, &target, w))?);
    let mut worst: f64 = 0.0;
    for (which, node) in [l.ingredients, l.eos, l.cardinality, l.total].into_iter().enumerate() {
        let graph_value = g.value(node).item();
        ensure!(
            (graph_value - reference[which]).abs() <= 1e-12 * reference[which].abs().max(1.0),
            "{} graph value {graph_value} vs reference {}",
            LOSS_NAMES[which],
            reference[which]
        );
        let grads = g.backward(node);
        let analytic = grads.wrt(v).cloned().unwrap_or_else(|| Matrix::zeros(steps.rows(), steps.cols()));
        for r in 0..steps.rows() {
            for c in 0..steps.cols() {
                let mut plus = steps.clone();
                plus.set(r, c, steps.get(r, c) + FD_STEP);
                let mut minus = steps.clone();
                minus.set(r, c, steps.get(r, c) - FD_STEP);
                let fp = loss_terms(&ok(sample_losses(&plus, &target, w))?)[which];
                let fm = loss_terms(&ok(sample_losses(&minus, &target, w))?)[which];
                let numeric = (fp - fm) / (2.0 * FD_STEP);
                let e = relative_error(analytic.get(r, c), numeric);
                ensure!(
                    e <= GRAD_TOLERANCE,
                    "{} d/dlogit[{r},{c}]: analytic {} numeric {numeric}",
                    LOSS_NAMES[which],
                    analytic.get(r, c)
                );
                worst = worst.max(e);
            }
        }
    }
    Ok(worst)
}

fn tiny_model(rng: &mut ChaCha8Rng, seed: u64) -> Result<(IngredientModel, usize), String> {
    let n = rng.random_range(3..8);
    let max_steps = rng.random_range(3..7);
    let encoder = EncoderConfig {
        backbone: Backbone::Vit,
        patch_size: 8,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_hidden: 16,
        image_side: 16,
        output_dim: 8,
        conv_kernel: 3,
        grid_side: None,
    };
    let decoder = DecoderConfig {
        vocab_size: n,
        dim: 8,
        heads: 2,
        hidden: 16,
        max_steps,
    };
    let config = IngredientModelConfig {
        encoder,
        decoder,
        normalization: Default::default(),
    };
    let vocab = ok(IngredientVocabulary::from_names((0..n).map(|i| format!("item{i}"))))?;
    Ok((ok(IngredientModel::new(config, vocab, seed))?, max_steps))
}

/// Six decoder weights per configuration, checked for every loss term.
fn parameter_gradients(rng: &mut ChaCha8Rng, seed: u64, w: &LossWeights) -> Result<f64, String> {
    let (mut model, max_steps) = tiny_model(rng, seed)?;
    let n = model.vocabulary.len();
    let image = ImageTensor {
        height: 16,
        width: 16,
        channels: 3,
        values: (0..16 * 16 * 3).map(|_| normal(rng, 1.0)).collect(),
    };
    let k = rng.random_range(1..=n.min(max_steps - 1));
    let target = random_set(rng, n, k);
    let store = model.decoder.params();
    let picks: Vec<(platter_tape::ParamId, usize)> = (0..6)
        .map(|_| {
            let ids: Vec<_> = store.ids().collect();
            let id = ids[rng.random_range(0..ids.len())];
            (id, rng.random_range(0..store.get(id).len()))
        })
        .collect();
    let mut worst: f64 = 0.0;
    for which in 0..4 {
        let mut g = Graph::new();
        let l = ok(model.forward_train(&mut g, &image, &target, max_steps, w))?;
        let node = [l.ingredients, l.eos, l.cardinality, l.total][which];
        let grads = g.backward(node).for_store(model.decoder.params());
        for &(id, k) in &picks {
            let analytic = grads.get(id).data()[k];
            let original = model.decoder.params().get(id).data()[k];
            let mut eval = |x: f64| -> Result<f64, String> {
                model.decoder.params_mut().get_mut(id).data_mut()[k] = x;
                let b = ok(model.sample_losses(&image, &target, max_steps, w))?;
                Ok(loss_terms(&b)[which])
            };
            let numeric = (eval(original + FD_STEP)? - eval(original - FD_STEP)?) / (2.0 * FD_STEP);
            model.decoder.params_mut().get_mut(id).data_mut()[k] = original;
            let e = relative_error(analytic, numeric);
            let name = model.decoder.params().name(id).to_string();
            ensure!(
                e <= GRAD_TOLERANCE,
                "config {seed} {} d/d{name}[{k}]: analytic {analytic} numeric {numeric}",
                LOSS_NAMES[which]
            );
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

fn loss_and_gradients() -> Outcome {
    let c = composite_loss(0.5, 0.2, 1.0, &LossWeights::default());
    ensure!(c == 51.2, "composite_loss(0.5, 0.2, 1.0) = {c}");
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_logit, mut worst_param): (f64, f64) = (0.0, 0.0);
    for seed in 0..20 {
        worst_logit = worst_logit.max(logit_gradients(&mut rng, &w)?);
        worst_param = worst_param.max(parameter_gradients(&mut rng, seed, &w)?);
    }
    Ok(format!(
        "composite 51.2; 20 configs, worst relative error {worst_logit:.2e} on step logits, {worst_param:.2e} on decoder weights"
    ))
}

// 4 -----------------------------------------------------------------------

fn same_bits(a: &LossBreakdown, b: &LossBreakdown) -> bool {
    loss_terms(a).iter().zip(loss_terms(b)).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn permute_rows(steps: &Matrix, order: &[usize]) -> Matrix {
    Matrix::from_rows(&order.iter().map(|&r| steps.row(r).to_vec()).collect::<Vec<_>>())
}

fn set_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = LossWeights::default();
    for case in 0..300 {
        let n = rng.random_range(1..16);
        let t = rng.random_range(1..10);
        let k = rng.random_range(0..=n);
        let names: Vec<String> = (0..n).map(|i| format!("item{i}")).collect();
        let vocab = ok(IngredientVocabulary::from_names(&names))?;
        let steps = random_matrix(&mut rng, t, n + 1, 3.0);
        let mut truth: Vec<String> = names.choose_multiple(&mut rng, k).cloned().collect();
        let target = vocab.encode(&truth).vector;
        let base = ok(sample_losses(&steps, &target, &w))?;

        truth.shuffle(&mut rng);
        let shuffled = vocab.encode(&truth).vector;
        ensure!(shuffled == target, "case {case}: set vector depends on listing order");
        ensure!(same_bits(&ok(sample_losses(&steps, &shuffled, &w))?, &base), "case {case}: listing order changed a loss");

        // any row order: the pooled terms cannot move
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut rng);
        let moved = permute_rows(&steps, &order);
        let (p0, p1) = (ok(pool_step_logits(&steps))?, ok(pool_step_logits(&moved))?);
        ensure!(
            p0.iter().zip(&p1).all(|(a, b)| a.to_bits() == b.to_bits()),
            "case {case}: pooling depends on row order"
        );
        let pooled_terms = |p: &[f64]| -> Result<(u64, u64), String> {
            let i = ok(ingredient_loss(p, &target))?;
            let c = ok(cardinality_loss(p, &target))?;
            Ok((i.to_bits(), c.to_bits()))
        };
        ensure!(pooled_terms(&p0)? == pooled_terms(&p1)?, "case {case}: pooled losses depend on row order");

        // rows sharing an EOS target and a pooling role: all three losses are fixed
        let split = k.min(t);
        let mut order: Vec<usize> = (0..t).collect();
        order[..split].shuffle(&mut rng);
        if split + 1 < t {
            order[split + 1..].shuffle(&mut rng);
        }
        let moved = permute_rows(&steps, &order);
        ensure!(same_bits(&ok(sample_losses(&moved, &target, &w))?, &base), "case {case}: step permutation changed a loss");

        let mut eos_moved = steps.clone();
        for r in 0..t {
            eos_moved.set(r, n, steps.get(r, n) + normal(&mut rng, 5.0));
        }
        let perturbed = ok(sample_losses(&eos_moved, &target, &w))?;
        ensure!(
            perturbed.loss_ingr.to_bits() == base.loss_ingr.to_bits() && perturbed.loss_card.to_bits() == base.loss_card.to_bits(),
            "case {case}: EOS logits leaked into pooled losses"
        );
    }
    Ok("300 cases: listing order, row order and EOS perturbation leave the losses bit-identical".into())
}

// 5 -----------------------------------------------------------------------

struct OverfitScore {
    f1: f64,
    cardinality_error: f64,
}

fn score_train_split(model: &IngredientModel, ds: &Dataset, max_steps: usize) -> Result<OverfitScore, String> {
    let mut acc = SetCountAccumulator::default();
    let mut card = 0usize;
    let records: Vec<_> = ds.split(Split::Train).collect();
    for r in &records {
        let image = ok(model.image_tensor(ds, r))?;
        let predicted: BTreeSet<usize> = ok(model.predict_ids(&image, max_steps))?.into_iter().collect();
        let truth: BTreeSet<usize> = ok(ds.set_vector(r))?.ids().collect();
        card += predicted.len().abs_diff(truth.len());
        acc.update(&predicted, &truth);
    }
    Ok(OverfitScore {
        f1: ok(finalize_set_metrics(&acc))?.f1,
        cardinality_error: card as f64 / records.len() as f64,
    })
}

fn ingredient_overfit() -> Outcome {
    let ds = ok(generate_synthetic_corpus(&SyntheticConfig::new(32, 24, 64, 5), 0))?;
    let config = IngredientModelConfig::toy(24);
    let train = TrainConfig {
        epochs: 200,
        batch_size: 8,
        learning_rate: 1e-3,
        lr_decay: 1e-4,
        max_steps: 8,
        seed: 0,
        feeding: Feeding::ModelOrder,
    };
    let mut scores = Vec::new();
    for cardinality in [1.0, 0.0] {
        let w = LossWeights::new(100.0, 1.0, cardinality);
        let trained = ok(train_ingredient_model(&ds, &config, &train, &w, None))?;
        scores.push(score_train_split(&trained.model, &ds, train.max_steps)?);
    }
    let (with, without) = (&scores[0], &scores[1]);
    ensure!(with.f1 >= 0.95, "train F1 {:.4} after 200 epochs", with.f1);
    ensure!(
        without.cardinality_error >= with.cardinality_error,
        "cardinality error without the penalty {:.4} < with it {:.4}",
        without.cardinality_error,
        with.cardinality_error
    );
    Ok(format!(
        "F1 {:.4}; cardinality error {:.4} with the penalty, {:.4} without",
        with.f1, with.cardinality_error, without.cardinality_error
    ))
}

// 6 -----------------------------------------------------------------------

fn infer_source(title: &str, ingredients: &[String]) -> Result<String, String> {
    ok(format_model_input(&InstructionInput::from_parts(title, ingredients, None), FormatMode::Infer))
}

fn beams_one_matches_greedy(model: &InstructionModel, sources: &[String], gen: &GenerationConfig) -> Result<usize, String> {
    let one = GenerationConfig {
        num_beams: 1,
        ..gen.clone()
    };
    for s in sources {
        let memory = ok(model.encode(s, one.max_source_length))?;
        let g = ok(greedy_decode(model, &memory, &one))?;
        let b = ok(beam_search(model, &memory, &one))?;
        ensure!(g == b, "beam search with one beam differs from greedy on {s:?}");
    }
    Ok(sources.len())
}

fn instruction_memorization() -> Outcome {
    let ds = ok(generate_synthetic_corpus(&SyntheticConfig::new(16, 24, 64, 5), 0))?;
    let train = InstructionTrainConfig {
        epochs: 150,
        batch_size: 12,
        learning_rate: 1e-3,
        weight_decay: 0.01,
        seed: 0,
    };
    let gen = GenerationConfig::default();
    let trained = ok(finetune_instruction_model(&ds, &Seq2SeqConfig::toy(), &train, &gen, None))?;
    let records: Vec<_> = ds.split(Split::Train).collect();
    ensure!(records.len() == 16, "{} train recipes", records.len());
    let sources: Vec<String> = records.iter().map(|r| infer_source(&r.title, &r.ingredients)).collect::<Result<_, _>>()?;
    let mut candidates = Vec::new();
    for s in &sources {
        let ids = ok(platter::instructions::generate_ids(&trained.model, s, &gen))?;
        candidates.push(trained.model.detokenize(&ids));
    }
    let references: Vec<String> = records.iter().map(|r| join_steps(&r.instructions)).collect();
    let bleu = ok(corpus_bleu(&candidates, &references))?;
    ensure!(bleu >= 50.0, "train corpus BLEU {bleu:.2}");

    let mut checked = beams_one_matches_greedy(&trained.model, &sources, &gen)?;
    // untrained models produce long, varied outputs
    let short = GenerationConfig {
        max_target_length: 40,
        repetition_penalty: 1.3,
        ..gen.clone()
    };
    let tokenizer = WordTokenizer::fit(&references.iter().chain(&sources).map(String::as_str).collect::<Vec<_>>());
    for seed in 1..4 {
        let fresh = ok(InstructionModel::new(Seq2SeqConfig::toy(), tokenizer.clone(), seed))?;
        checked += beams_one_matches_greedy(&fresh, &sources, &short)?;
    }
    Ok(format!(
        "BLEU {bleu:.2} after {} epochs; one-beam search equals greedy on {checked} inputs",
        train.epochs
    ))
}

// 7 -----------------------------------------------------------------------

fn decoder_contracts() -> Outcome {
    let mut longest = 0;
    let mut eos_stops = 0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..13);
        let max_steps = 8;
        let config = DecoderConfig {
            vocab_size: n,
            dim: 8,
            heads: 2,
            hidden: 16,
            max_steps,
        };
        let decoder = ok(IngredientDecoder::new(config, seed))?;
        let len = rng.random_range(1..6);
        let embeddings = EmbeddingSequence(random_matrix(&mut rng, len, 8, 1.0));
        let out = ok(decode_sequence(&embeddings, &decoder, max_steps, DecodeMode::Infer, None))?;
        let t = out.steps();
        ensure!((1..=max_steps).contains(&t), "seed {seed}: {t} steps");
        longest = longest.max(t);
        let distinct: BTreeSet<usize> = out.emitted.iter().copied().collect();
        ensure!(distinct.len() == out.emitted.len(), "seed {seed}: duplicate emission {:?}", out.emitted);
        ensure!(out.emitted.iter().all(|&id| id < n), "seed {seed}: emitted EOS or start id");
        if out.emitted.len() < t {
            eos_stops += 1;
        }
        ensure!(out.emitted.len() == t || out.emitted.len() + 1 == t, "seed {seed}: {t} steps for {:?}", out.emitted);
        let pooled = ok(pool_step_logits(&out.logits))?;
        for (j, &p) in pooled.iter().enumerate() {
            let column: Vec<f64> = (0..t).map(|r| out.logits.get(r, j)).collect();
            ensure!(column.iter().all(|&v| p >= v), "seed {seed}: pooled[{j}] below a step");
            ensure!(column.contains(&p), "seed {seed}: pooled[{j}] not attained");
        }
    }
    Ok(format!("1000 seeds: at most {longest} steps, {eos_stops} stopped at EOS, no duplicates"))
}

// 8 -----------------------------------------------------------------------

const PREHEAT: &str = "def main():\n    #instruction\n    #Preheat oven to 350 degrees Fahrenheit.\n\n    def Preheat_oven_to_350_degrees_Fahrenheit():\n        h_1 = Preheat(tool = oven, temp = 350 degrees F)\n";

fn code_round_trip() -> Outcome {
    let parsed = ok(parse_code_recipe(PREHEAT))?;
    ensure!(parsed.diagnostics.is_empty(), "diagnostics {:?}", parsed.diagnostics);
    ensure!(parsed.recipe.functions.len() == 1, "{} functions", parsed.recipe.functions.len());
    let f = &parsed.recipe.functions[0];
    ensure!(f.operation == "Preheat", "operation {}", f.operation);
    ensure!(f.parameters.get("tool").map(String::as_str) == Some("oven"), "tool {:?}", f.parameters.get("tool"));
    ensure!(
        f.parameters.get("temp").map(String::as_str) == Some("350 degrees F"),
        "temp {:?}",
        f.parameters.get("temp")
    );
    ensure!(parsed.recipe.emit() == normalize_code(PREHEAT), "re-emission differs:\n{}", parsed.recipe.emit());
    let messy = "def main( ):\n  #instruction\n  #Preheat oven to 350 degrees Fahrenheit.\n  def Preheat_oven_to_350_degrees_Fahrenheit( ):\n      h_1=Preheat( tool=oven ,temp = 350 degrees F )  \n";
    let again = ok(parse_code_recipe(messy))?.recipe.emit();
    ensure!(again == normalize_code(messy), "messy layout re-emits as:\n{again}");
    let name = ok(instruction_to_function_name("Preheat oven to 350 degrees Fahrenheit."))?;
    ensure!(name == "Preheat_oven_to_350_degrees_Fahrenheit", "function name {name}");
    Ok(format!("{{operation: Preheat, tool: oven, temp: 350 degrees F}}, {name}"))
}

// 9 -----------------------------------------------------------------------

fn prompt_assembly() -> Outcome {
    let demos = ok(load_code_demos(&workspace_root().join("prompts/code_demos.json")))?;
    ensure!(demos.len() >= 4, "{} code demonstrations", demos.len());
    let demos = &demos[..4];
    let target = PromptRecipe {
        title: "Garlic toast".into(),
        ingredients: vec!["bread".into(), "garlic".into(), "butter".into()],
        steps: vec!["Spread butter on the bread.".into(), "Toast until golden.".into()],
    };
    let prompt = ok(build_code_prompt(demos, &target))?;
    let segments: Vec<&str> = prompt.split(CODE_SEGMENT_SEPARATOR).collect();
    ensure!(segments.len() == 9, "{} segments", segments.len());
    for (i, d) in demos.iter().enumerate() {
        ensure!(segments[2 * i] == d.recipe_prompt.trim_end(), "segment {} is not recipe {}", 2 * i + 1, i + 1);
        ensure!(segments[2 * i + 1] == d.code.trim_end(), "segment {} is not code {}", 2 * i + 2, i + 1);
    }
    ensure!(segments[8] == target.to_string(), "last segment is not the target recipe");

    let q = |topic: CustomizationTopic, slots: &[(&'static str, &str)]| {
        ok(CustomizationRequest::new(topic, slots.iter().map(|&(k, v)| (k, v.to_string()))).question())
    };
    use CustomizationTopic::*;
    let expected = [
        (q(IngredientAdjustment, &[("ingredient", "mushrooms")])?, "I don't like mushrooms, can you remove that for me?"),
        (
            q(IngredientAdjustment, &[("ingredient", "garlic"), ("preference", "like")])?,
            "I like garlic, can you add that for me?",
        ),
        (q(DetailAddition, &[])?, "I am new to cooking, can you expand more details for the recipe?"),
        (
            q(TasteAdjustment, &[("taste", "spicy")])?,
            "I don't like spicy food, can you change the taste of the recipe?",
        ),
        (
            q(TasteAdjustment, &[("taste", "sweet"), ("preference", "like")])?,
            "I like sweet food, can you change the taste of the recipe?",
        ),
        (q(CaloriesAdjustment, &[])?, "Can you reduce the calorie content of the food?"),
        (
            q(CaloriesAdjustment, &[("direction", "increase")])?,
            "Can you increase the calorie content of the food?",
        ),
        (
            q(TimeAdaptation, &[("time", "20")])?,
            "Can you provide a more convenient version that can be done in 20 minutes?",
        ),
    ];
    for (got, want) in &expected {
        ensure!(got == want, "template gave {got:?}, expected {want:?}");
    }
    Ok(format!("9 segments in order; 5 templates ({} variants) verbatim", expected.len()))
}

// 10, 11 ------------------------------------------------------------------

struct ToyPipeline {
    _dir: tempfile::TempDir,
    config: PipelineConfig,
    dataset: Dataset,
    pipeline: Pipeline,
}

fn build_toy_pipeline() -> Result<ToyPipeline, String> {
    let dir = ok(tempfile::tempdir())?;
    let toy = workspace_root().join("configs/toy.toml");
    let mut config = ok(PipelineConfig::load_with_env(Some(&toy), Vec::new()))?;
    config.paths.data = dir.path().join("data");
    config.paths.checkpoints = dir.path().join("checkpoints");
    config.paths.outputs = dir.path().join("outputs");
    let synthetic = ok(generate_synthetic_corpus(&config.data.synthetic, config.seed))?;
    ok(write_layered_corpus(&synthetic, &config.paths.data))?;
    let (dataset, _) = ok(load_corpus(&config))?;
    ok(train_ingredient_stage(&dataset, &config, config.seed))?;
    ok(train_title_stage(&dataset, &config, config.seed))?;
    ok(train_instruction_stage(&dataset, &config, config.seed))?;
    let pipeline = ok(Pipeline::load(&config, config.seed))?;
    Ok(ToyPipeline {
        _dir: dir,
        config,
        dataset,
        pipeline,
    })
}

fn toy_pipeline() -> Result<&'static ToyPipeline, String> {
    static CELL: OnceLock<Result<ToyPipeline, String>> = OnceLock::new();
    CELL.get_or_init(build_toy_pipeline).as_ref().map_err(|e| format!("toy pipeline: {e}"))
}

fn determinism_and_isolation() -> Outcome {
    let toy = toy_pipeline()?;
    let test: Vec<_> = toy.dataset.split(Split::Test).collect();
    ensure!(!test.is_empty(), "no test records");
    for r in &test {
        let image = r.first_image().ok_or("test record without image")?;
        let a = ok(run_image_to_recipe(image, &toy.config))?;
        let b = ok(run_image_to_recipe(image, &toy.config))?;
        ensure!(a == b, "record {}: two runs differ", r.id);
        ensure!(
            ok(serde_json::to_string(&a))? == ok(serde_json::to_string(&b))?,
            "record {}: serialized outputs differ",
            r.id
        );
    }

    let mut stripped = toy.dataset.clone();
    let mut emptied = 0;
    for r in stripped.records_mut().iter_mut().filter(|r| r.split == Split::Test) {
        emptied += r.ingredients_with_quantity.len();
        r.ingredients_with_quantity.clear();
    }
    ensure!(emptied > 0, "test records carry no quantities to remove");
    let stripped_test: Vec<_> = stripped.split(Split::Test).collect();
    for (r, s) in test.iter().zip(&stripped_test) {
        let a = ok(toy.pipeline.infer_record(&toy.dataset, r))?;
        let b = ok(toy.pipeline.infer_record(&stripped, s))?;
        ensure!(a == b, "record {}: removing quantities changed the prediction", r.id);
    }
    for mode in [GroundTruthMode::Predicted, GroundTruthMode::Oracle] {
        let a = ok(evaluate_pipeline(&toy.pipeline, &toy.dataset, &test, mode))?;
        let b = ok(evaluate_pipeline(&toy.pipeline, &stripped, &stripped_test, mode))?;
        ensure!(a == b, "{mode:?} scores changed when quantities were removed");
    }
    Ok(format!(
        "{} test images bit-identical across runs; {emptied} quantity lines removed with no output change",
        test.len()
    ))
}

fn oracle_ordering() -> Outcome {
    let toy = toy_pipeline()?;
    let test: Vec<_> = toy.dataset.split(Split::Test).collect();
    let predicted = ok(evaluate_pipeline(&toy.pipeline, &toy.dataset, &test, GroundTruthMode::Predicted))?;
    let oracle = ok(evaluate_pipeline(&toy.pipeline, &toy.dataset, &test, GroundTruthMode::Oracle))?;
    ensure!(
        oracle.sacrebleu >= predicted.sacrebleu,
        "oracle BLEU {:.2} < predicted {:.2}",
        oracle.sacrebleu,
        predicted.sacrebleu
    );
    Ok(format!(
        "test split ({} recipes): oracle BLEU {:.2} >= predicted {:.2}",
        test.len(),
        oracle.sacrebleu,
        predicted.sacrebleu
    ))
}

// -------------------------------------------------------------------------

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "metric oracle equivalence", limit: Some(Duration::from_secs(5)), run: metric_oracle },
        Criterion { id: 2, name: "LCS published example", limit: None, run: lcs_example },
        Criterion { id: 3, name: "loss arithmetic and gradients", limit: Some(Duration::from_secs(30)), run: loss_and_gradients },
        Criterion { id: 4, name: "set-semantics invariance", limit: None, run: set_invariance },
        Criterion { id: 5, name: "toy ingredient overfit", limit: Some(Duration::from_secs(600)), run: ingredient_overfit },
        Criterion { id: 6, name: "toy instruction memorization", limit: Some(Duration::from_secs(900)), run: instruction_memorization },
        Criterion { id: 7, name: "decoder contracts", limit: Some(Duration::from_secs(10)), run: decoder_contracts },
        Criterion { id: 8, name: "code grammar round trip", limit: None, run: code_round_trip },
        Criterion { id: 9, name: "prompt assembly", limit: None, run: prompt_assembly },
        Criterion { id: 10, name: "end-to-end determinism and isolation", limit: None, run: determinism_and_isolation },
        Criterion { id: 11, name: "oracle-mode ordering", limit: None, run: oracle_ordering },
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.1?}, limit {limit:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {} ({:.2} s): {detail}", c.id, c.name, elapsed.as_secs_f64()),
            Err(why) => {
                failures += 1;
                println!("FAIL {:>2} {} ({:.2} s): {why}", c.id, c.name, elapsed.as_secs_f64());
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
