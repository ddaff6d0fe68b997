use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use platter::apps::{
    build_code_prompt, build_customization_prompt, check_operation_coverage, load_code_demos, load_customization_demos,
    parse_code_recipe, refine_to_triples, CodeDiagnostic, CodeRecipe, CoverageReport, CustomizationRequest, CustomizationTopic,
    LlmClient, OperationRegistry, PromptRecipe, SymbolicTriple,
};
use platter::corpus::{generate_synthetic_corpus, write_layered_corpus, SyntheticConfig};
use platter::pipeline::{
    load_corpus, run_evaluation, run_image_to_recipe, train_ingredient_stage, train_instruction_stage, train_title_stage,
    write_json, GroundTruthMode, PipelineConfig,
};
use platter::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "platter", version, about = "Recipes from food photos: titles, ingredients and cooking instructions")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file; PLATTER__SECTION__KEY variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,
    /// Layered corpus directory.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration as TOML.
    Config,
    /// Load and filter a layered corpus; write its vocabulary and filtering report.
    PrepareData,
    /// Write a synthetic layered corpus.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        dev: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    TrainIngredients,
    TrainTitle,
    TrainInstructions,
    /// Title, ingredients and steps for one image.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the configured seeds on one split.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        /// Generate instructions from the ground-truth title and ingredients.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ask the language model to customize a recipe.
    Customize {
        /// JSON recipe with title, ingredients and steps (the output of `infer` works).
        #[arg(long)]
        recipe: PathBuf,
        /// ingredient_adjustment, detail_addition, taste_adjustment, calories_adjustment or time_adaptation.
        #[arg(long)]
        topic: String,
        /// Template slot as key=value (ingredient, taste, time, preference, direction).
        #[arg(long = "slot", value_parser = parse_slot)]
        slots: Vec<(String, String)>,
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Print the prompt instead of sending it.
        #[arg(long)]
        dry_run: bool,
    },
    /// Rewrite a recipe as code and refine it into symbolic triples.
    ToCode {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Use this completion text instead of calling the language model.
        #[arg(long)]
        completion: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_slot(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("slot '{s}' is not key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut c = PipelineConfig::load(g.config.as_deref())?;
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(d) = &g.checkpoint_dir {
        c.paths.checkpoints = d.clone();
    }
    if let Some(d) = &g.data_dir {
        c.paths.data = d.clone();
    }
    c.validate()?;
    Ok(c)
}

fn emit(out: Option<&Path>, value: &impl Serialize) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn read_recipe(path: &Path) -> Result<PromptRecipe> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Serialize)]
struct CodeOutput {
    config_hash: String,
    code: String,
    recipe: CodeRecipe,
    diagnostics: Vec<CodeDiagnostic>,
    problems: Vec<String>,
    triples: Vec<SymbolicTriple>,
    coverage: CoverageReport,
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.global)?;
    match cli.command {
        Command::Config => print!("{}", config.to_toml()?),
        Command::PrepareData => {
            let (ds, report) = load_corpus(&config)?;
            let vocabulary = ds.require_vocabulary()?;
            std::fs::create_dir_all(&config.paths.outputs).map_err(|e| Error::io(&config.paths.outputs, e))?;
            write_json(&config.paths.outputs.join("vocabulary.json"), vocabulary)?;
            let splits: BTreeMap<String, usize> = ds.split_counts().into_iter().map(|(s, n)| (s.to_string(), n)).collect();
            emit(
                Some(&config.paths.outputs.join("filter_report.json")),
                &serde_json::json!({ "report": report, "splits": splits, "vocabulary_size": vocabulary.len(), "config_hash": config.hash() }),
            )?;
            println!(
                "kept {} records ({} dropped), vocabulary of {} ingredients",
                ds.len(),
                report.dropped(),
                vocabulary.len()
            );
        }
        Command::SynthData { out, records, vocab, side, dev, test } => {
            let base = &config.data.synthetic;
            let cfg = SyntheticConfig {
                n_records: records.unwrap_or(base.n_records),
                vocab_size: vocab.unwrap_or(base.vocab_size),
                image_side: side.unwrap_or(base.image_side),
                max_ingredients: base.max_ingredients,
                n_dev: dev.unwrap_or(base.n_dev),
                n_test: test.unwrap_or(base.n_test),
            };
            let ds = generate_synthetic_corpus(&cfg, config.seed)?;
            write_layered_corpus(&ds, &out)?;
            println!("wrote {} synthetic records to {}", ds.len(), out.display());
        }
        Command::TrainIngredients => {
            let (ds, _) = load_corpus(&config)?;
            let p = train_ingredient_stage(&ds, &config, config.seed)?;
            println!("ingredient checkpoint: {}", p.display());
        }
        Command::TrainTitle => {
            let (ds, _) = load_corpus(&config)?;
            let p = train_title_stage(&ds, &config, config.seed)?;
            println!("title checkpoint: {}", p.display());
        }
        Command::TrainInstructions => {
            let (ds, _) = load_corpus(&config)?;
            let p = train_instruction_stage(&ds, &config, config.seed)?;
            println!("instruction checkpoint: {}", p.display());
        }
        Command::Infer { image, out } => emit(out.as_deref(), &run_image_to_recipe(&image, &config)?)?,
        Command::Eval { split, oracle, out } => {
            let split = split.parse()?;
            let (ds, _) = load_corpus(&config)?;
            let mode = if oracle { GroundTruthMode::Oracle } else { GroundTruthMode::Predicted };
            emit(out.as_deref(), &run_evaluation(&ds, split, &config, mode)?)?;
        }
        Command::Customize {
            recipe,
            topic,
            slots,
            demos,
            dry_run,
        } => {
            let target = read_recipe(&recipe)?;
            let request = CustomizationRequest {
                topic: topic.parse::<CustomizationTopic>()?,
                slots: slots.into_iter().collect(),
            };
            let demos = load_customization_demos(&demos.unwrap_or_else(|| config.paths.prompts.join("customization_demos.json")))?;
            let prompt = build_customization_prompt(&target, &request, &demos)?;
            if dry_run {
                println!("{prompt}");
            } else {
                println!("{}", LlmClient::http(config.llm.clone())?.complete(&prompt)?);
            }
        }
        Command::ToCode {
            recipe,
            demos,
            registry,
            completion,
            dry_run,
            out,
        } => {
            let target = read_recipe(&recipe)?;
            let demos = load_code_demos(&demos.unwrap_or_else(|| config.paths.prompts.join("code_demos.json")))?;
            let prompt = build_code_prompt(&demos, &target)?;
            if dry_run {
                println!("{prompt}");
                return Ok(());
            }
            let registry = match registry {
                Some(p) => OperationRegistry::load(&p)?,
                None => {
                    let default_path = config.paths.prompts.join("operations.json");
                    if default_path.is_file() {
                        OperationRegistry::load(&default_path)?
                    } else {
                        OperationRegistry::default()
                    }
                }
            };
            let code = match completion {
                Some(p) => std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?,
                None => LlmClient::http(config.llm.clone())?.complete(&prompt)?,
            };
            let parsed = parse_code_recipe(&code)?;
            let output = CodeOutput {
                config_hash: config.hash(),
                problems: parsed.recipe.problems(),
                triples: refine_to_triples(&parsed.recipe),
                coverage: check_operation_coverage(&parsed.recipe, &registry)?,
                diagnostics: parsed.diagnostics,
                recipe: parsed.recipe,
                code,
            };
            emit(out.as_deref(), &output)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
