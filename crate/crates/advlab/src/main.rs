//! Command-line front end: train/eval/attack single models, reproduce the
//! resistance table, sweep the embedding dimension. Every subcommand takes a
//! JSON config; a handful of flags override config fields. Results go to
//! stdout and `--out`, timings to stderr. Exit codes: 0 ok, 2 for I/O or
//! file-format trouble, 1 for everything else.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use advlab::attacks::{evaluate_transfer, report_to_json_value, Predictor};
use advlab::dataset::{load_sidecar, DatasetSpec};
use advlab::error::{Error, Result};
use advlab::harness::{
    fit_defense, load_model, reproduce_table, save_model, sweep_lle_dim, AnyModel,
    ExperimentConfig, FittedDefense, TableConfig,
};

#[derive(Parser)]
#[command(name = "advlab", version, about = "Adversarial-robustness laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags that override fields of the JSON config.
#[derive(Args, Clone)]
struct Overrides {
    /// Global seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch multiplier on the training recipes.
    #[arg(long)]
    epoch_scale: Option<f64>,
    /// Number of test rows the attacks run on (0 = all).
    #[arg(long)]
    attack_subset: Option<usize>,
    /// Landmark count for LLE fits (0 = whole training split).
    #[arg(long)]
    lle_train_size: Option<usize>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset override: an MNIST-style IDX directory or a JSON
    /// dataset-spec/sidecar file.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the configured defense and save the model as JSON.
    Train {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Where to write the fitted model.
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Report a saved model's accuracy on the configured test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Model file produced by `train`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Craft the configured attacks against a saved model (self-attack:
    /// the model is both gradient source and victim).
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train every configured defense and emit the full resistance table.
    ReproduceTable {
        /// Table config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Refit the LLE-DNN across embedding dimensions and report accuracy.
    SweepDim {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated ascending dimensions, e.g. 50,100,200,400.
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{what} {}: {e}", path.display())))
}

/// `--data` accepts either a directory of IDX files (treated as full MNIST
/// splits) or a JSON file holding a dataset spec / synthetic sidecar.
fn dataset_from_path(path: &Path, seed: u64) -> Result<DatasetSpec> {
    if path.is_dir() {
        return Ok(DatasetSpec::Mnist {
            dir: path.to_path_buf(),
            train_size: 0,
            test_size: 0,
            seed,
        });
    }
    match load_sidecar(path) {
        Ok(spec) => Ok(spec),
        // Not a sidecar; maybe a bare spec document.
        Err(Error::Format(_)) => read_json::<DatasetSpec>(path, "dataset spec"),
        Err(e) => Err(e),
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, ov: &Overrides) -> Result<()> {
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(s) = ov.epoch_scale {
        cfg.epoch_scale = s;
    }
    if let Some(n) = ov.attack_subset {
        cfg.attack_subset = n;
    }
    if let Some(n) = ov.lle_train_size {
        cfg.lle_train_size = n;
    }
    if let Some(out) = &ov.out {
        cfg.out = Some(out.clone());
    }
    if let Some(data) = &ov.data {
        cfg.dataset = dataset_from_path(data, cfg.seed)?;
    }
    Ok(())
}

fn load_experiment(path: &Path, ov: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = read_json(path, "experiment config")?;
    apply_overrides(&mut cfg, ov)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, model_out, overrides } => {
            let cfg = load_experiment(&config, &overrides)?;
            cfg.validate()?;
            let (train, test) = cfg.dataset.load().map_err(|e| e.in_stage("load-dataset"))?;
            let fitted =
                fit_defense(&cfg.defense, &train, cfg.seed, cfg.epoch_scale, cfg.lle_train_size)
                    .map_err(|e| e.in_stage("fit"))?;
            let clean = fitted.clean_accuracy(&test)?;
            let model = match fitted {
                FittedDefense::LleDnn(m) => AnyModel::LleDnn(m),
                FittedDefense::Standard(m)
                | FittedDefense::AdversarialTraining(m)
                | FittedDefense::Distillation(m) => AnyModel::Mlp(m),
            };
            let path = match (model_out, &cfg.out) {
                (Some(p), _) => p,
                (None, Some(dir)) => dir.join("model.json"),
                (None, None) => PathBuf::from("model.json"),
            };
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            save_model(&path, &model)?;
            println!("defense={} clean_acc={clean:.6} model={}", cfg.defense.tag(), path.display());
            Ok(())
        }
        Command::Eval { config, model, overrides } => {
            let cfg = load_experiment(&config, &overrides)?;
            let (_, test) = cfg.dataset.load().map_err(|e| e.in_stage("load-dataset"))?;
            let model = load_model(&model)?;
            let scores = model.predict_proba(test.samples())?;
            let mut correct = 0usize;
            for i in 0..test.len() {
                if advlab::mlp::argmax_row(scores.row(i)) == test.class_of(i) {
                    correct += 1;
                }
            }
            println!("clean_acc={:.6}", correct as f64 / test.len() as f64);
            Ok(())
        }
        Command::Attack { config, model, overrides } => {
            let cfg = load_experiment(&config, &overrides)?;
            cfg.validate()?;
            let mlp = match load_model(&model)? {
                AnyModel::Mlp(m) => m,
                AnyModel::LleDnn(_) => {
                    return Err(Error::Contract(
                        "self-attack needs input gradients; an lle_dnn model exposes none \
                         (attack it through the table's approximator surrogate instead)"
                            .into(),
                    ))
                }
            };
            let (_, test) = cfg.dataset.load().map_err(|e| e.in_stage("load-dataset"))?;
            let eval = if cfg.attack_subset == 0 || cfg.attack_subset >= test.len() {
                test
            } else {
                advlab::dataset::subsample(
                    &test,
                    cfg.attack_subset,
                    advlab::rng::derive_seed(cfg.seed, 40),
                )?
            };
            let mut reports = Vec::new();
            for spec in &cfg.attacks {
                let crafted = advlab::attacks::craft_for_spec(&mlp, &eval, spec)
                    .map_err(|e| e.in_stage("craft"))?;
                let report = evaluate_transfer(&mlp, &eval, &crafted, spec)
                    .map_err(|e| e.in_stage("evaluate"))?;
                println!(
                    "norm={} adv_acc={:.6} mean_distortion={:.6}",
                    report.norm_tag, report.adv_accuracy, report.mean_distortion
                );
                reports.push(report_to_json_value(&report));
            }
            if let Some(dir) = &cfg.out {
                std::fs::create_dir_all(dir)?;
                let doc = serde_json::json!({
                    "format_version": 1,
                    "kind": "self_attack",
                    "seed": cfg.seed,
                    "reports": reports,
                });
                let text = serde_json::to_string_pretty(&doc)
                    .map_err(|e| Error::Format(format!("report encode: {e}")))?;
                std::fs::write(dir.join("attack.json"), text)?;
            }
            Ok(())
        }
        Command::ReproduceTable { config, overrides } => {
            let mut cfg: TableConfig = read_json(&config, "table config")?;
            if let Some(seed) = overrides.seed {
                cfg.seed = seed;
            }
            if let Some(s) = overrides.epoch_scale {
                cfg.epoch_scale = s;
            }
            if let Some(n) = overrides.attack_subset {
                cfg.attack_subset = n;
            }
            if let Some(n) = overrides.lle_train_size {
                cfg.lle_train_size = n;
            }
            if let Some(data) = &overrides.data {
                cfg.dataset = dataset_from_path(data, cfg.seed)?;
            }
            let table = reproduce_table(&cfg, overrides.out.as_deref())?;
            print!("{}", table.to_csv());
            Ok(())
        }
        Command::SweepDim { config, dims, overrides } => {
            let cfg = load_experiment(&config, &overrides)?;
            let curve = sweep_lle_dim(&cfg, &dims)?;
            println!("d,clean_acc");
            for (d, acc) in curve {
                println!("{d},{acc:.6}");
            }
            Ok(())
        }
    }
}

fn main() {
    // Per-epoch training losses and other diagnostics hide behind RUST_LOG
    // (e.g. RUST_LOG=info); stdout stays parseable either way.
    env_logger::Builder::from_default_env().target(env_logger::Target::Stderr).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
