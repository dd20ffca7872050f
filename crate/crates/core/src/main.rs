use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use taxposed::datagen::{generate_dataset, read_dataset, write_dataset, DatagenConfig};
use taxposed::nets::Model;
use taxposed::pipeline::{
    eval_scenes, evaluate_model, export_prior_heatmap, Ablation, EvalConfig, SuccessCriterion, TrainConfig, Trainer,
};
use taxposed::Error;

const SEED_ENV: &str = "TAXPOSED_SEED";

#[derive(Parser)]
#[command(name = "taxposed", about = "Multimodal cross-pose prediction on synthetic placement scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of demonstrations.
    Datagen {
        #[arg(long)]
        sites: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON generator config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON training config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the checkpoint and metrics.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        samples_per_scene: Option<usize>,
        /// Rotation tolerance in degrees.
        #[arg(long)]
        tol_r: Option<f64>,
        /// Translation tolerance in scene units.
        #[arg(long)]
        tol_t: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON evaluation config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the prior's per-point probabilities for one scene.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Record index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON evaluation config (scene construction).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output text file of `x y z prob` lines.
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(String, Option<String>),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::VersionMismatch { .. } => Failure::Config(e.to_string(), None),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config<T: DeserializeOwned + Serialize + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let schema = || serde_json::to_string_pretty(&T::default()).ok();
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display()), schema()))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("invalid config {}: {e}", path.display()), schema()))
}

fn with_schema<T: Serialize + Default>(f: Failure) -> Failure {
    match f {
        Failure::Config(msg, None) => Failure::Config(msg, serde_json::to_string_pretty(&T::default()).ok()),
        other => other,
    }
}

/// `--seed`, then the environment, then the config file.
fn resolve_seed(flag: Option<u64>, config: u64) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"), None)),
        Err(_) => Ok(config),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.to_string()))?;
        }
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Datagen {
            sites,
            n,
            seed,
            config,
            out,
        } => {
            let cfg: DatagenConfig = load_config(config.as_deref())?;
            let seed = resolve_seed(seed, 0)?;
            if sites == 0 || n == 0 {
                return Err(Failure::Config("--sites and --n must be positive".into(), None));
            }
            let records = generate_dataset(sites, n, seed, &cfg)?;
            write_dataset(&records, &out, &cfg)?;
            eprintln!("wrote {n} records with {sites} sites to {}", out.display());
        }
        Command::Train {
            data,
            seed,
            config,
            out,
            steps,
            ablation,
        } => {
            let mut cfg: TrainConfig = load_config(config.as_deref())?;
            cfg.seed = resolve_seed(seed, cfg.seed)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(a) = ablation {
                cfg.ablation = a.parse::<Ablation>().map_err(Failure::from).map_err(with_schema::<TrainConfig>)?;
            }
            cfg.validate().map_err(Failure::from).map_err(with_schema::<TrainConfig>)?;
            let (records, datagen) = read_dataset(&data)?;
            fs::create_dir_all(&out).map_err(|e| Failure::Runtime(e.to_string()))?;
            write_json(&out.join("train_config.json"), &cfg)?;
            let metrics = fs::File::create(out.join("metrics.csv")).map_err(|e| Failure::Runtime(e.to_string()))?;
            let mut metrics = BufWriter::new(metrics);
            let mut trainer = Trainer::new(cfg.clone())?;
            trainer.dump_dir = Some(out.clone());
            let start = Instant::now();
            let history = trainer.train(&records, &datagen, cfg.steps, Some(&mut metrics))?;
            let extra = serde_json::json!({
                "steps": trainer.steps_done(),
                "seed": cfg.seed,
                "ablation": cfg.ablation,
                "skipped_samples": trainer.skipped,
            });
            trainer.model.save(&out.join("model.ckpt"), extra)?;
            if let Some(last) = history.last() {
                eprintln!(
                    "trained {} steps in {:.1}s, final total loss {:.4}",
                    cfg.steps,
                    start.elapsed().as_secs_f64(),
                    last.total
                );
            }
        }
        Command::Eval {
            checkpoint,
            data,
            samples_per_scene,
            tol_r,
            tol_t,
            seed,
            config,
            out,
        } => {
            let mut cfg: EvalConfig = load_config(config.as_deref())?;
            cfg.seed = resolve_seed(seed, cfg.seed)?;
            if let Some(s) = samples_per_scene {
                cfg.samples_per_scene = s;
            }
            cfg.criterion = SuccessCriterion {
                tol_r_deg: tol_r.unwrap_or(cfg.criterion.tol_r_deg),
                tol_t: tol_t.unwrap_or(cfg.criterion.tol_t),
            };
            cfg.validate().map_err(Failure::from).map_err(with_schema::<EvalConfig>)?;
            if !checkpoint.is_file() {
                return Err(Failure::Config(format!("checkpoint {} not found", checkpoint.display()), None));
            }
            let (model, _) = Model::load(&checkpoint)?;
            let (records, _) = read_dataset(&data)?;
            let scenes = eval_scenes(&records, &cfg.sample, cfg.seed)?;
            let report = evaluate_model(&model, &scenes, cfg.samples_per_scene, &cfg.criterion, cfg.seed)?;
            write_json(&out, &report)?;
            eprintln!(
                "success {:.3} (best-of-{} {:.3}), mode frequencies {:?}",
                report.success_rate, cfg.samples_per_scene, report.best_of_s_success, report.mode_frequencies
            );
        }
        Command::Heatmap {
            checkpoint,
            data,
            index,
            seed,
            config,
            out,
        } => {
            let mut cfg: EvalConfig = load_config(config.as_deref())?;
            cfg.seed = resolve_seed(seed, cfg.seed)?;
            cfg.validate().map_err(Failure::from).map_err(with_schema::<EvalConfig>)?;
            if !checkpoint.is_file() {
                return Err(Failure::Config(format!("checkpoint {} not found", checkpoint.display()), None));
            }
            let (model, _) = Model::load(&checkpoint)?;
            let (records, _) = read_dataset(&data)?;
            let record = records
                .get(index)
                .ok_or_else(|| Failure::Config(format!("index {index} out of range for {} records", records.len()), None))?;
            let scene = &eval_scenes(std::slice::from_ref(record), &cfg.sample, cfg.seed)?[0];
            export_prior_heatmap(&model, &scene.cloud, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg, schema)) => {
            eprintln!("config error: {msg}");
            if let Some(s) = schema {
                eprintln!("expected config schema (defaults shown):\n{s}");
            }
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
