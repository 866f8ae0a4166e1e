use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use ctxqa_cli::commands::{self, LmSource};
use ctxqa_cli::config::resolve;
use ctxqa_core::gradsuite::TOLERANCE;
use ctxqa_core::lm::toy::ToyLmConfig;

/// Gated re-embedding span readers for extractive question answering.
///
/// Configuration is layered: built-in defaults, then `--config FILE` (TOML),
/// then `CTXQA_<FIELD>` environment variables, then flags and `--set`.
#[derive(Parser)]
#[command(name = "ctxqa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML file with any run configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration field, e.g. `--set hidden=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// base | tr | tr-mlp | tr-lm-emb | tr-lm-l1 | tr-lm-l2
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    lm_states: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_file: Option<PathBuf>,
    #[arg(long)]
    dev_file: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    synthetic_embeddings: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    target_em: Option<f64>,
}

impl ConfigArgs {
    fn assignments(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{k}={v}"));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| serde_json::to_string(p).expect("path serializes"));
        push("variant", self.variant.clone());
        push("lm_states", path(&self.lm_states));
        push("seed", self.seed.map(|v| v.to_string()));
        push("train_file", path(&self.train_file));
        push("dev_file", path(&self.dev_file));
        push("embeddings", path(&self.embeddings));
        push("synthetic_embeddings", self.synthetic_embeddings.then(|| "true".into()));
        push("out_dir", path(&self.out_dir));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("max_steps", self.max_steps.map(|v| v.to_string()));
        push("eval_every", self.eval_every.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("hidden", self.hidden.map(|v| v.to_string()));
        push("layers", self.layers.map(|v| v.to_string()));
        push("target_em", self.target_em.map(|v| v.to_string()));
        out.extend(self.set.iter().cloned());
        out
    }

    fn resolve(&self) -> anyhow::Result<ctxqa_cli::RunConfig> {
        resolve(self.config.as_deref(), &self.assignments())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a reader; writes a JSON-lines log and best/final checkpoints.
    Train(ConfigArgs),
    /// Predict on a SQuAD file, then score the predictions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lm_states: Option<PathBuf>,
        #[arg(long, default_value = "predictions.json")]
        predictions: PathBuf,
        #[arg(long, default_value = "eval_report.json")]
        report: PathBuf,
    },
    /// Write `{question id: answer}` predictions.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lm_states: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export mean gate activation per word type as CSV.
    Gates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lm_states: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Name recorded in the CSV metadata line; defaults to the data file stem.
        #[arg(long)]
        split: Option<String>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Compute toy-LM states for every question and passage.
    PrecomputeLm {
        /// Train a toy LM on this corpus (one sentence per line).
        #[arg(long, conflicts_with = "lm_dir", required_unless_present = "lm_dir")]
        corpus: Option<PathBuf>,
        /// Use a toy LM saved earlier with --save-lm.
        #[arg(long)]
        lm_dir: Option<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        save_lm: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lm_seed: Option<u64>,
    },
    /// Write deterministic GloVe-format vectors for every type in the data.
    MakeEmbeddings {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = 300)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a templated SQuAD-format dataset.
    SynthSquad {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare TR and TR(MLP) dev F1 across seeds.
    Trend {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, num_args = 1.., default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let outcome = commands::cmd_train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
        }
        Command::Eval {
            checkpoint,
            data,
            lm_states,
            predictions,
            report,
        } => {
            let r = commands::cmd_eval(&checkpoint, &data, lm_states.as_deref(), &predictions, &report)?;
            println!("{}", serde_json::json!({"em": r.em, "f1": r.f1, "total": r.total, "missing": r.missing}));
        }
        Command::Predict {
            checkpoint,
            data,
            lm_states,
            out,
        } => {
            let preds = commands::cmd_predict(&checkpoint, &data, lm_states.as_deref())?;
            commands::write_predictions(&out, &preds)?;
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Gates {
            checkpoint,
            data,
            lm_states,
            out,
            split,
        } => {
            let split = split.unwrap_or_else(|| {
                data.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned())
            });
            let r = commands::cmd_gates(&checkpoint, &data, lm_states.as_deref(), &out, &split)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Gradcheck { seeds } => {
            let results = commands::cmd_gradcheck(seeds)?;
            let mut ok = true;
            for r in &results {
                let status = if r.passed { "ok" } else { "FAIL" };
                println!("{status:4} {:<20} max rel err {:.3e} ({} coords)", r.name, r.max_relative_error, r.coords_checked);
                ok &= r.passed;
            }
            println!("{} cases, tolerance {TOLERANCE:e}: {}", results.len(), if ok { "all passed" } else { "FAILED" });
            return Ok(ok);
        }
        Command::PrecomputeLm {
            corpus,
            lm_dir,
            data,
            out,
            save_lm,
            epochs,
            lm_seed,
        } => {
            let mut config = ToyLmConfig::default();
            if let Some(e) = epochs {
                config.epochs = e;
            }
            if let Some(s) = lm_seed {
                config.seed = s;
            }
            let source = match (&corpus, &lm_dir) {
                (Some(c), _) => LmSource::Corpus(c, config),
                (None, Some(d)) => LmSource::Saved(d),
                (None, None) => anyhow::bail!("pass --corpus or --lm-dir"),
            };
            let r = commands::cmd_precompute_lm(source, &data, &out, save_lm.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::MakeEmbeddings { data, dim, seed, out } => {
            let n = commands::cmd_make_embeddings(&data, dim, seed, &out)?;
            println!("wrote {n} vectors to {}", out.display());
        }
        Command::SynthSquad { n, seed, out } => {
            commands::cmd_synth_squad(n, seed, &out)?;
            println!("wrote {n} questions to {}", out.display());
        }
        Command::Trend { config, seeds } => {
            let cfg = config.resolve()?;
            let r = commands::cmd_trend(&cfg, &seeds).context("trend run")?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
