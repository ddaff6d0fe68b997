use std::path::{Path, PathBuf};

use platter::corpus::{generate_synthetic_corpus, write_layered_corpus, Split};
use platter::pipeline::{
    load_corpus, run_evaluation, run_image_to_recipe, train_ingredient_stage, train_instruction_stage, train_title_stage,
    GroundTruthMode, Pipeline, PipelineConfig, INGREDIENT_CHECKPOINT, INSTRUCTION_CHECKPOINT, TITLE_CHECKPOINT,
};
use platter::Error;

fn toy_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn toy() -> PipelineConfig {
    PipelineConfig::load_with_env(Some(&toy_path()), Vec::new()).unwrap()
}

/// Toy config pointed at `dir`, with one epoch per stage.
fn quick(dir: &Path) -> PipelineConfig {
    let mut c = toy();
    c.paths.data = dir.join("data");
    c.paths.checkpoints = dir.join("checkpoints");
    c.paths.outputs = dir.join("outputs");
    c.data.synthetic.n_records = 12;
    c.data.synthetic.n_dev = 2;
    c.data.synthetic.n_test = 3;
    c.ingredients.train.epochs = 1;
    c.title.train.epochs = 1;
    c.instructions.train.epochs = 1;
    c.generation.max_target_length = 16;
    c
}

#[test]
fn toy_config_resolves_and_hashes_stably() {
    let a = toy();
    assert_eq!(a.hash(), toy().hash());
    assert_eq!(a.hash().len(), 64);
    assert_eq!(a.data.synthetic.n_records, 32);
    assert_eq!(a.ingredients.model.decoder.max_steps, 8);
    let back: PipelineConfig = toml::from_str(&a.to_toml().unwrap()).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.hash(), a.hash());
    assert_eq!(a.checkpoint_dir(3), PathBuf::from("checkpoints/seed-3"));
}

#[test]
fn environment_overrides_win_over_the_file() {
    let env = vec![
        ("PLATTER__TITLE__TRAIN__EPOCHS".to_string(), "3".to_string()),
        ("PLATTER__SEEDS".to_string(), "[1, 2]".to_string()),
    ];
    let c = PipelineConfig::load_with_env(Some(&toy_path()), env).unwrap();
    assert_eq!(c.title.train.epochs, 3);
    assert_eq!(c.seed_list(), [1, 2]);
    assert_ne!(c.hash(), toy().hash());
}

#[test]
fn missing_config_file_is_a_config_error() {
    let err = PipelineConfig::load_with_env(Some(Path::new("/nonexistent/platter.toml")), Vec::new()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn missing_checkpoints_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick(dir.path());
    let err = Pipeline::load(&config, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(err.to_string().contains("title"), "{err}");
}

#[test]
fn unreadable_images_fail_before_any_checkpoint_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("photo.jpg");
    std::fs::write(&bad, b"definitely not a jpeg").unwrap();
    let err = run_image_to_recipe(&bad, &quick(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn stages_train_load_infer_and_evaluate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick(dir.path());
    let synthetic = generate_synthetic_corpus(&config.data.synthetic, config.seed).unwrap();
    write_layered_corpus(&synthetic, &config.paths.data).unwrap();
    let (ds, report) = load_corpus(&config).unwrap();
    assert_eq!((ds.len(), report.dropped()), (12 + 2 + 3, 0));

    let paths = [
        train_ingredient_stage(&ds, &config, 0).unwrap(),
        train_title_stage(&ds, &config, 0).unwrap(),
        train_instruction_stage(&ds, &config, 0).unwrap(),
    ];
    let dir0 = config.checkpoint_dir(0);
    assert_eq!(paths, [dir0.join(INGREDIENT_CHECKPOINT), dir0.join(TITLE_CHECKPOINT), dir0.join(INSTRUCTION_CHECKPOINT)]);

    let record = ds.split(Split::Test).next().unwrap();
    let image = record.first_image().unwrap();
    let a = run_image_to_recipe(image, &config).unwrap();
    let b = run_image_to_recipe(image, &config).unwrap();
    assert_eq!(a, b);
    assert!(!a.recipe.title.is_empty());
    assert_eq!(a.provenance.config_hash, config.hash());
    assert_eq!(a.provenance.checkpoints.len(), 3);

    let report = run_evaluation(&ds, Split::Test, &config, GroundTruthMode::Predicted).unwrap();
    assert_eq!(report.n_samples, 3);
    assert_eq!(report.per_seed.len(), 1);
    assert!((0.0..=1.0).contains(&report.f1.mean) && (0.0..=100.0).contains(&report.sacrebleu.mean));
    assert_eq!(report.sacrebleu.std, 0.0);
    assert!(run_evaluation(&ds, Split::Dev, &config, GroundTruthMode::Oracle).is_ok());
}
