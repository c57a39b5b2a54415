use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kgprompt::config::KvConfig;
use kgprompt::data::synth::{self, SynthConfig};
use kgprompt::data::Dataset;
use kgprompt::eval::{evaluate_checkpoint, mean_recall_at_10, scarcity_sweep};
use kgprompt::model::Crs;
use kgprompt::service::{http, Service};
use kgprompt::training::{run_stage, DataConfig, Experiment, StageKind};

#[derive(Parser)]
#[command(name = "kgprompt", version, about = "Knowledge-enhanced prompt learning for conversational recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Key-value config file (`key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint directory; earlier stages must already be present.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `<stage>.steps` from the config.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides `<stage>.lr` from the config.
    #[arg(long)]
    lr: Option<f64>,
    /// Overrides `<stage>.batch_size` from the config.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus and knowledge graph.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        dialogs: usize,
        #[arg(long, default_value_t = 50)]
        items: usize,
        #[arg(long, default_value_t = 100)]
        entities: usize,
        #[arg(long, default_value_t = 3)]
        relations: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Warm up the backbone on the training dialogues and freeze it.
    PretrainBackbone(StageArgs),
    /// Pre-train the fusion module.
    PretrainFuse(StageArgs),
    /// Tune the generation prompt.
    TrainGen(StageArgs),
    /// Tune the recommendation prompt.
    TrainRec(StageArgs),
    /// Evaluate a full checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Retrain on sampled fractions of the training data and evaluate each run.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
        proportions: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding the warmed-up backbone.
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long, default_value = "sweep")]
        work: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP session API.
    Serve {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Append-only session journals; existing ones are replayed on start.
        #[arg(long)]
        journal: Option<PathBuf>,
    },
    /// Talk to the model in the terminal.
    Chat {
        #[arg(long)]
        ckpt_dir: PathBuf,
    },
}

fn load_kv(path: Option<&Path>) -> Result<KvConfig> {
    match path {
        Some(p) => KvConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(KvConfig::default()),
    }
}

fn load_dataset(kv: &KvConfig) -> Result<(Dataset, DataConfig)> {
    let cfg = DataConfig::from_kv(kv)?;
    let dir = &cfg.data_dir;
    let ds = Dataset::load(
        &dir.join(synth::CORPUS_FILE),
        &dir.join(synth::TRIPLES_FILE),
        &dir.join(synth::ENTITIES_FILE),
    )
    .with_context(|| format!("loading data from {}", dir.display()))?;
    Ok((ds, cfg))
}

fn train(args: &StageArgs, kind: StageKind) -> Result<()> {
    let mut kv = load_kv(args.config.as_deref())?;
    if let Some(v) = args.steps {
        kv.set(&format!("{kind}.steps"), v);
    }
    if let Some(v) = args.lr {
        kv.set(&format!("{kind}.lr"), v);
    }
    if let Some(v) = args.batch_size {
        kv.set(&format!("{kind}.batch_size"), v);
    }
    let (ds, cfg) = load_dataset(&kv)?;
    let exp = Experiment::from_dataset(ds, &cfg);
    let summary = run_stage(&exp, &kv, kind, args.seed, &args.out)?;
    println!(
        "{}: {} steps, final loss {:.4}{}",
        kind,
        summary.steps,
        summary.losses.last().copied().unwrap_or(f64::NAN),
        summary.best_step.map(|s| format!(", best step {s}")).unwrap_or_default()
    );
    Ok(())
}

fn write_or_print(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{body}");
            Ok(())
        }
    }
}

fn chat(dir: &Path) -> Result<()> {
    let crs = Crs::<f32>::load(dir)?;
    let svc = Service::new(Some(Arc::new(crs)));
    let id = svc.create_session()?.id;
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    write!(out, "> ")?;
    out.flush()?;
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            write!(out, "> ")?;
            out.flush()?;
            continue;
        }
        let r = svc.post_message(&id, &line)?;
        writeln!(out, "{}", r.response)?;
        for (i, rec) in r.recommendations.iter().enumerate() {
            writeln!(out, "  {}. {} ({:.3})", i + 1, rec.name, rec.probability)?;
        }
        write!(out, "> ")?;
        out.flush()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Generate {
            out,
            dialogs,
            items,
            entities,
            relations,
            seed,
        } => {
            let corpus = synth::generate(&SynthConfig {
                n_dialogs: dialogs,
                n_items: items,
                n_entities: entities,
                n_relations: relations,
                seed,
            })?;
            corpus.write(&out)?;
            println!("{}", serde_json::to_string_pretty(&corpus.manifest)?);
        }
        Command::PretrainBackbone(a) => train(&a, StageKind::Backbone)?,
        Command::PretrainFuse(a) => train(&a, StageKind::Fuse)?,
        Command::TrainGen(a) => train(&a, StageKind::Gen)?,
        Command::TrainRec(a) => train(&a, StageKind::Rec)?,
        Command::Eval {
            ckpt,
            split,
            out,
            config,
        } => {
            let kv = load_kv(config.as_deref())?;
            let (ds, cfg) = load_dataset(&kv)?;
            let exp = Experiment::from_dataset(ds, &cfg);
            let report = evaluate_checkpoint(&ckpt, &exp, &split)?;
            write_or_print(out.as_deref(), &report.to_json())?;
        }
        Command::Sweep {
            proportions,
            seeds,
            config,
            backbone,
            work,
            out,
        } => {
            if seeds == 0 {
                bail!("--seeds must be positive");
            }
            let kv = load_kv(config.as_deref())?;
            let (ds, _) = load_dataset(&kv)?;
            let rows = scarcity_sweep(&ds, &kv, &backbone, &work, &proportions, seeds)?;
            for (p, mean) in mean_recall_at_10(&rows, &proportions) {
                match mean {
                    Some(m) => eprintln!("proportion {p}: mean recall@10 {m:.4}"),
                    None => eprintln!("proportion {p}: skipped"),
                }
            }
            write_or_print(out.as_deref(), &serde_json::to_string_pretty(&rows)?)?;
        }
        Command::Serve {
            ckpt_dir,
            port,
            host,
            journal,
        } => {
            let crs = Crs::<f32>::load(&ckpt_dir).with_context(|| format!("loading {}", ckpt_dir.display()))?;
            let mut svc = Service::new(Some(Arc::new(crs)));
            if let Some(j) = journal {
                svc = svc.with_journal(&j)?;
            }
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad --host/--port")?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(http::serve(Arc::new(svc), addr))?;
        }
        Command::Chat { ckpt_dir } => chat(&ckpt_dir)?,
    }
    Ok(())
}
