use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use scenereg_core::features::Variant;
use scenereg_core::regmodel::Family;
use scenereg_core::sceneworld::DatasetMode;
use scenereg_harness::{emit_all, ingest_annotations, ExperimentConfig, Experiment, OUT_ENV};

#[derive(Parser)]
#[command(name = "scenereg", version, about = "Referring-expression generation experiments on a synthetic scene world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output root; defaults to the config's `output_dir`, then $SCENEREG_OUT, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict the matrix to one family.
    #[arg(long, value_parser = parse::<Family>)]
    family: Option<Family>,
    #[arg(long, value_parser = parse::<Variant>)]
    variant: Option<Variant>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of inference repeats.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a desk-scale default config.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "loc_enabled", value_parser = parse_mode)]
        mode: DatasetMode,
        #[arg(long, default_value_t = 1)]
        world_seed: u64,
    },
    /// Build and save the dataset.
    GenData(Common),
    /// Train (or load) every selected model.
    Train(Common),
    /// Repeated greedy inference on the evaluation splits.
    Infer(Common),
    /// Metrics and oracle judgments from stored predictions.
    Evaluate(Common),
    /// Correlation and attention analysis.
    Analyze(Common),
    /// All stages for every selected entry, then the reports.
    Run(Common),
    /// Reports from finished entries.
    Report(Common),
    /// Merge human judgments (JSON lines) into the run record.
    IngestAnnotations {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        annotations: PathBuf,
    },
}

fn parse<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<DatasetMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown mode `{s}`"))
}

fn open(c: &Common) -> Result<Experiment> {
    let mut cfg = ExperimentConfig::load(&c.config).with_context(|| format!("loading {}", c.config.display()))?;
    if let Some(f) = c.family {
        if !cfg.families.contains_key(&f) {
            bail!("family {f} is not configured");
        }
        cfg.families.retain(|k, _| *k == f);
    }
    if let Some(v) = c.variant {
        cfg.variants = vec![v];
    }
    if let Some(n) = c.noise {
        cfg.noise_levels = vec![n];
    }
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(r) = c.repeats {
        cfg.repeats = r;
    }
    let root = cfg.output_root(c.out.as_deref());
    Ok(Experiment::open(cfg, &root)?)
}

fn report(exp: &Experiment, record: &scenereg_harness::RunRecord) -> Result<()> {
    let dir = exp.root.join("reports");
    for (kind, table) in emit_all(record, &dir)? {
        println!("## {kind}\n\n{}", table.to_markdown());
    }
    println!("reports written to {}", dir.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::InitConfig { out, mode, world_seed } => {
            let cfg = ExperimentConfig::desk_scale(mode, world_seed);
            std::fs::write(&out, serde_json::to_string_pretty(&cfg)? + "\n")?;
            println!("wrote {} (outputs go under ${OUT_ENV} or ./runs unless --out is given)", out.display());
        }
        Cmd::GenData(c) => {
            let exp = open(&c)?;
            for (split, samples) in &exp.dataset.splits {
                println!("{split}: {} samples", samples.len());
            }
            println!("dataset in {}", exp.root.join("dataset").display());
        }
        Cmd::Train(c) => {
            let exp = open(&c)?;
            for key in exp.config.entries() {
                let (_, log) = exp.train(&key)?;
                println!(
                    "{key}: best epoch {} val CIDEr {:.4} ({:?})",
                    log.best_epoch, log.best_val_cider, log.stop_reason
                );
            }
        }
        Cmd::Infer(c) => {
            let exp = open(&c)?;
            for key in exp.config.entries() {
                let (model, _) = exp.trained(&key)?;
                exp.infer(&key, &model)?;
                println!("{key}: predictions in {}", exp.entry_dir(&key).display());
            }
        }
        Cmd::Evaluate(c) => {
            let exp = open(&c)?;
            for key in exp.config.entries() {
                let evals = exp.evaluate(&key, &exp.predictions(&key)?)?;
                for (split, e) in evals {
                    let m = e.metrics.mean;
                    println!(
                        "{key} {split}: BLEU-1 {:.4} BLEU-2 {:.4} CIDEr {:.4}",
                        m.bleu1, m.bleu2, m.cider
                    );
                }
            }
        }
        Cmd::Analyze(c) => {
            let exp = open(&c)?;
            for key in exp.config.entries() {
                let (model, _) = exp.trained(&key)?;
                let analyses = exp.analyze(&key, &model, &exp.evaluation(&key)?)?;
                for (split, a) in analyses {
                    match a.correlation.result {
                        Some(r) => println!("{key} {split}: r = {:.4} (p = {:.3e}, n = {})", r.r, r.p_value, r.n),
                        None => println!("{key} {split}: correlation undefined"),
                    }
                }
            }
        }
        Cmd::Run(c) => {
            let exp = open(&c)?;
            let record = exp.run()?;
            for e in &record.entries {
                info!("{}: {:?}", e.key, e.status);
            }
            report(&exp, &record)?;
        }
        Cmd::Report(c) => {
            let exp = open(&c)?;
            report(&exp, &exp.collect()?)?;
        }
        Cmd::IngestAnnotations { common, annotations } => {
            let exp = open(&common)?;
            let mut record = exp.collect()?;
            let rep = ingest_annotations(&annotations, &mut record)?;
            let path = exp.root.join("annotations.json");
            std::fs::write(&path, serde_json::to_string_pretty(&rep)? + "\n")?;
            std::fs::write(exp.root.join("run_record.json"), serde_json::to_string_pretty(&record)? + "\n")?;
            for (entry, h) in &rep.systems {
                let kappa = h.agreement.as_ref().map_or("undefined".to_string(), |a| format!("{:.4}", a.kappa));
                println!(
                    "{entry}: {} items, kappa {kappa}, oracle discrepancy {:.3}",
                    h.n_items, h.discrepancy_rate
                );
            }
            for u in &rep.unknown {
                eprintln!("warning: unknown annotation target {u}");
            }
            println!("report in {}", path.display());
        }
    }
    Ok(())
}

