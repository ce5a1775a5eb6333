//! `vitclt`: toy ViT cross-layer transcoder pipeline.
//!
//! Exit status: 0 on success, 1 on runtime errors, 2 on configuration or
//! usage errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use vitclt::ablation::{ablation_csv, write_ablation_csv, AblationMode};
use vitclt::attribution::TokenClass;
use vitclt::config::RunConfig;
use vitclt::pipeline;
use vitclt::replacement::{sweep_csv, ReplacementPlan};
use vitclt::retrieval::{hits_csv, Aggregation};
use vitclt::sparsify::SparsifierKind;
use vitclt::trainer::{layer_average, TrainOutputs};

#[derive(Parser)]
#[command(
    name = "vitclt",
    version,
    about = "Cross-layer transcoders on a toy Vision Transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the toy teacher and write a labeled CLTACTS1 activation file.
    ExtractToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: CommonOverrides,
    },
    /// Train a CLT and write a CLTC1 checkpoint plus a CSV training log.
    Train {
        #[arg(long)]
        acts: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log path; defaults to the checkpoint path with `.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        overrides: CommonOverrides,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Sparsity weight λ.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Cascaded replacement sweep; writes a faithfulness CSV.
    EvalReplace {
        #[command(flatten)]
        io: EvalIo,
        /// Comma-separated ranges such as `none,5-5,0-5`.
        #[arg(long, value_delimiter = ',')]
        ranges: Option<Vec<String>>,
        /// Comma-separated routings: cls, patches, all.
        #[arg(long, value_delimiter = ',')]
        routing: Option<Vec<String>>,
    },
    /// Projection attribution heatmap CSV.
    Attribute {
        #[command(flatten)]
        io: EvalIo,
        /// cls, patches or all.
        #[arg(long)]
        tokens: Option<String>,
    },
    /// Final-layer source ablations; writes accuracy and KL per mode.
    Ablate {
        #[command(flatten)]
        io: EvalIo,
        /// Comma-separated modes: full, dropN, keepN.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        /// Token class used for ranking: cls or all.
        #[arg(long)]
        tokens: Option<String>,
    },
    /// Nearest neighbours of one sample among all samples of a file.
    Retrieve {
        #[arg(long)]
        acts: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Optional; supplies defaults for the flags below.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        /// mean or cls.
        #[arg(long)]
        agg: Option<String>,
        #[arg(long)]
        query: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CommonOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct EvalIo {
    #[arg(long)]
    acts: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: CommonOverrides,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: &Path, overrides: &CommonOverrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(n) = overrides.samples {
        cfg.data.samples = n;
    }
    Ok(cfg)
}

/// Revalidates after flag overrides so bad values surface as config errors.
fn validated(cfg: RunConfig) -> Result<RunConfig> {
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .context("writing to stdout"),
    }
}

fn parse_list<T>(items: &[String], parse: impl Fn(&str) -> vitclt::Result<T>) -> Result<Vec<T>> {
    items
        .iter()
        .map(|s| parse(s.trim()).map_err(|e| vitclt::Error::Config(e.to_string()).into()))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ExtractToy {
            config,
            out,
            overrides,
        } => {
            let cfg = validated(load_config(&config, &overrides)?)?;
            let summary = pipeline::extract_toy(&cfg, &out)?;
            println!(
                "wrote {} samples to {} (teacher accuracy {:.2}%)",
                summary.samples,
                out.display(),
                summary.baseline_accuracy
            );
        }
        Command::Train {
            acts,
            config,
            out,
            log,
            overrides,
            epochs,
            lr,
            batch_size,
            lambda,
        } => {
            let mut cfg = load_config(&config, &overrides)?;
            if let Some(v) = epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = lambda {
                cfg.train.sparsity_coeff = v;
            }
            let cfg = validated(cfg)?;
            if cfg.clt.sparsifier == SparsifierKind::Identity {
                return Err(vitclt::Error::Config(
                    "clt.sparsifier = \"identity\" is a test oracle, not a training mode".into(),
                )
                .into());
            }
            let log = log.unwrap_or_else(|| out.with_extension("csv"));
            let outputs = TrainOutputs {
                checkpoint: Some(out.clone()),
                log: Some(log.clone()),
            };
            let result = pipeline::train_from_acts(&cfg, &acts, &outputs)?;
            if let Some(val) = result.history.last().and_then(|r| r.validation.as_ref()) {
                let (r2, cos) = layer_average(val);
                println!("validation: mean r2 {r2:.4}, mean cosine {cos:.4}");
            }
            println!("checkpoint {} log {}", out.display(), log.display());
        }
        Command::EvalReplace {
            io,
            ranges,
            routing,
        } => {
            let mut cfg = load_config(&io.config, &io.overrides)?;
            if let Some(r) = ranges {
                cfg.eval.ranges = Some(r);
            }
            if let Some(r) = routing {
                cfg.eval.routings = parse_list(&r, |s| s.parse::<TokenClass>())?;
            }
            let cfg = validated(cfg)?;
            let plans: Vec<ReplacementPlan> = cfg.plans()?;
            let rows = pipeline::eval_replace(&cfg, &io.acts, &io.ckpt, &plans)?;
            emit(io.out.as_deref(), &sweep_csv(&rows))?;
        }
        Command::Attribute { io, tokens } => {
            let mut cfg = load_config(&io.config, &io.overrides)?;
            if let Some(t) = tokens {
                cfg.eval.attribution_tokens = parse_list(&[t], |s| s.parse::<TokenClass>())?[0];
            }
            let cfg = validated(cfg)?;
            let m = pipeline::attribute(&cfg, &io.acts, &io.ckpt, cfg.eval.attribution_tokens)?;
            emit(io.out.as_deref(), &m.to_csv())?;
        }
        Command::Ablate { io, modes, tokens } => {
            let mut cfg = load_config(&io.config, &io.overrides)?;
            if let Some(m) = modes {
                cfg.eval.ablation_modes = m;
            }
            if let Some(t) = tokens {
                cfg.eval.ablation_tokens = parse_list(&[t], |s| s.parse::<TokenClass>())?[0];
            }
            let cfg = validated(cfg)?;
            let modes: Vec<AblationMode> = cfg.ablation_modes()?;
            let rows =
                pipeline::ablate(&cfg, &io.acts, &io.ckpt, &modes, cfg.eval.ablation_tokens)?;
            match io.out {
                Some(path) => write_ablation_csv(&path, &rows)?,
                None => emit(None, &ablation_csv(&rows))?,
            }
        }
        Command::Retrieve {
            acts,
            ckpt,
            config,
            layer,
            k,
            agg,
            query,
            out,
        } => {
            let eval = match &config {
                Some(path) => RunConfig::load(path)?.eval,
                None => Default::default(),
            };
            let aggregation = match agg {
                Some(a) => parse_list(&[a], |s| s.parse::<Aggregation>())?[0],
                None => eval.retrieval_aggregation,
            };
            let layer = match (layer, eval.retrieval_layer) {
                (Some(l), _) | (None, Some(l)) => l,
                (None, None) => vitclt::store::TraceReader::open(&acts)?.header().layers() - 1,
            };
            let hits = pipeline::retrieve(
                &acts,
                &ckpt,
                layer,
                k.unwrap_or(eval.retrieval_k),
                aggregation,
                query.unwrap_or(eval.query),
            )?;
            emit(out.as_deref(), &hits_csv(&hits))?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<vitclt::Error>() {
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::debug!("{err:?}");
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
