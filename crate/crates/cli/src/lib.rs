//! `kws` command-line front end.

pub mod config;
mod selftest;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use kws_core::adversary::{attack_windows, linf_distance, AttackConfig};
use kws_core::dataset::{ingest_gsc, load_entries, DatasetManifest, Split};
use kws_core::evaluator::{
    auc, binary_scores, det_curve, frr_at_far, read_scores_csv, top1_accuracy, write_det_csv, write_scores_csv,
};
use kws_core::frontend::LogMel;
use kws_core::model::load_checkpoint;
use kws_core::pipeline::{clean_windows, load_corpus, score_utterances, train_on_corpus};
use kws_core::trainer::{accuracy, FitOutput};
use kws_core::{KwsError, Model32, Result};
use serde_json::json;

pub use config::RunConfig;

pub const WORKERS_ENV: &str = "KWS_NUM_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "kws", version, about = "Keyword spotting with disentangled adversarial training")]
pub struct Cli {
    /// Run configuration (TOML); built-in defaults when absent
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=3`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Data-pipeline worker threads (default: $KWS_NUM_WORKERS, else all cores)
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Scan the dataset directory and write manifest.json
    Ingest,
    /// Train a model; writes per-epoch checkpoints and report.jsonl
    Train,
    /// Score a split with a checkpoint; writes scores and metrics
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate PGD adversaries for a split and audit the ball bound
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Attack at most this many utterances
        #[arg(long, default_value_t = 256)]
        limit: usize,
    },
    /// DET curve from a score CSV
    Det {
        /// Score CSV (default: <out_dir>/scores_<split>.csv)
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Output CSV (default: <out_dir>/det_<split>.csv)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the built-in invariant checks
    Selftest,
    /// Print the resolved configuration
    Config,
}

pub fn run(cli: &Cli) -> Result<()> {
    configure_workers(cli.workers)?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Ingest => ingest(&cfg).map(|_| ()),
        Command::Train => train(&cfg),
        Command::Eval { checkpoint } => eval(&cfg, checkpoint),
        Command::Attack { checkpoint, limit } => attack(&cfg, checkpoint, *limit),
        Command::Det { scores, output } => det(&cfg, scores.as_deref(), output.as_deref()),
        Command::Selftest => selftest::run(),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn configure_workers(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| KwsError::config(WORKERS_ENV, format!("`{v}` is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(KwsError::config("workers", "need at least one worker"));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.data.out_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| KwsError::io(dir, e))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    std::fs::write(path, text + "\n").map_err(|e| KwsError::io(path, e))
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

fn ingest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let m = ingest_gsc(&cfg.data.root, &cfg.data.ingest)?;
    let dir = out_dir(cfg)?;
    write_json(&dir.join("manifest.json"), &m)?;
    println!(
        "{}",
        json!({
            "train": m.train.len(),
            "valid": m.valid.len(),
            "test": m.test.len(),
            "noise": m.noise.len(),
            "rejects": m.rejects.len(),
            "labels": m.labels,
        })
    );
    Ok(m)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model32> {
    let (model, _) = load_checkpoint::<f32>(path)?;
    if model.config().num_classes != cfg.model.num_classes {
        return Err(KwsError::config(
            "model.num_classes",
            format!("checkpoint has {} classes", model.config().num_classes),
        ));
    }
    Ok(model)
}

fn train(cfg: &RunConfig) -> Result<()> {
    let manifest = ingest(cfg)?;
    let corpus = load_corpus(&cfg.data.root, &manifest, cfg.data.noise_holdout_every)?;
    let frontend = LogMel::new(&cfg.frontend)?;
    let plan = cfg.train.branch_plan(cfg.augment.num_datasources)?;
    let mut model = Model32::new(&cfg.model, cfg.norm.with_branches(plan.num_branches()), cfg.train.seed)?;
    let dir = out_dir(cfg)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| KwsError::io(dir.join("config.toml"), e))?;
    let report = train_on_corpus(&mut model, &corpus, &cfg.augment, &frontend, &cfg.train, &FitOutput::to_dir(dir))?;
    for e in &report.epochs {
        println!(
            "{}",
            json!({"epoch": e.epoch, "steps": e.steps, "mean_loss": e.mean_loss, "val_accuracy": e.val_accuracy})
        );
    }
    if let Some(cov) = report.adv_gradient_coverage() {
        println!("{}", json!({ "adv_gradient_coverage": cov }));
    }
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let mut model = load_model(cfg, checkpoint)?;
    let manifest = ingest_gsc(&cfg.data.root, &cfg.data.ingest)?;
    let split = cfg.eval.split;
    let utts = load_entries(&cfg.data.root, manifest.split(split))?;
    let frontend = LogMel::new(&cfg.frontend)?;
    let records = score_utterances(&mut model, &utts, &frontend, &cfg.eval.scoring)?;
    let dir = out_dir(cfg)?;
    write_scores_csv(dir.join(format!("scores_{}.csv", split_name(split))), &records)?;

    let keywords: Vec<usize> = (0..cfg.data.ingest.keywords.len()).collect();
    let (pos, neg) = binary_scores(&records, &keywords);
    let mut metrics = json!({
        "split": split_name(split),
        "utterances": records.len(),
        "top1_accuracy": top1_accuracy(&records)?,
    });
    if !pos.is_empty() && !neg.is_empty() {
        let curve = det_curve(&pos, &neg)?;
        metrics["auc"] = json!(auc(&pos, &neg)?);
        let points: Vec<_> = cfg
            .eval
            .far_targets
            .iter()
            .map(|&t| frr_at_far(&curve, t).map(|r| json!({"far_target": t, "frr": r.frr, "far": r.far, "reachable": r.reachable})))
            .collect::<Result<_>>()?;
        metrics["frr_at_far"] = json!(points);
    }
    write_json(&dir.join(format!("metrics_{}.json", split_name(split))), &metrics)?;
    println!("{metrics}");
    Ok(())
}

fn attack(cfg: &RunConfig, checkpoint: &Path, limit: usize) -> Result<()> {
    let mut model = load_model(cfg, checkpoint)?;
    let plan = cfg.train.branch_plan(cfg.augment.num_datasources)?;
    if plan.num_branches() != model.num_branches() {
        return Err(KwsError::config(
            "train.strategy",
            format!(
                "{} needs {} normalization branches, checkpoint has {}",
                cfg.train.strategy,
                plan.num_branches(),
                model.num_branches()
            ),
        ));
    }
    let eps = cfg.train.epsilons[0];
    let attack = AttackConfig {
        step_size: cfg.train.step_size.unwrap_or(eps / 4.0),
        steps: cfg.train.pgd_steps,
        generation_branch: cfg.train.generation_branch,
        ..AttackConfig::new(eps)
    };
    let manifest = ingest_gsc(&cfg.data.root, &cfg.data.ingest)?;
    let split = cfg.eval.split;
    let entries: Vec<_> = manifest.split(split).iter().take(limit).cloned().collect();
    let utts = load_entries(&cfg.data.root, &entries)?;
    let frontend = LogMel::new(&cfg.frontend)?;
    let clean = clean_windows(&utts, &frontend, cfg.augment.clip_samples)?;
    if clean.is_empty() {
        return Err(KwsError::Data(format!("split {} is empty", split_name(split))));
    }
    let mut adv = Vec::with_capacity(clean.len());
    for chunk in clean.chunks(cfg.train.batch_size) {
        adv.extend(attack_windows(&mut model, chunk, &attack, &plan)?);
    }

    let dir = out_dir(cfg)?.join(format!("attack_{}", split_name(split)));
    std::fs::create_dir_all(&dir).map_err(|e| KwsError::io(&dir, e))?;
    let mut max_dist = 0f32;
    for (i, (a, c)) in adv.iter().zip(&clean).enumerate() {
        max_dist = max_dist.max(linf_distance(a.features.data(), c.features.data()));
        a.features.save(dir.join(format!("{i:05}.feat")))?;
    }
    let audit = json!({
        "epsilon": eps,
        "steps": attack.steps,
        "step_size": attack.step_size,
        "windows": adv.len(),
        "max_linf": max_dist,
        "ball_bound_holds": max_dist <= eps as f32,
        "clean_accuracy": accuracy(&mut model, &clean, cfg.train.batch_size)?,
        "adversarial_accuracy": accuracy(&mut model, &adv, cfg.train.batch_size)?,
        "utterances": utts.iter().map(|u| u.id.as_str()).collect::<Vec<_>>(),
    });
    write_json(&dir.join("audit.json"), &audit)?;
    let mut brief = audit.clone();
    if let Some(o) = brief.as_object_mut() {
        o.remove("utterances");
    }
    println!("{brief}");
    if max_dist > eps as f32 {
        return Err(KwsError::Numeric(format!("adversary left the ball: {max_dist} > {eps}")));
    }
    Ok(())
}

fn det(cfg: &RunConfig, scores: Option<&Path>, output: Option<&Path>) -> Result<()> {
    let name = split_name(cfg.eval.split);
    let scores = scores.map_or_else(|| cfg.data.out_dir.join(format!("scores_{name}.csv")), Path::to_path_buf);
    let output = match output {
        Some(p) => p.to_path_buf(),
        None => out_dir(cfg)?.join(format!("det_{name}.csv")),
    };
    let records = read_scores_csv(&scores)?;
    let keywords: Vec<usize> = (0..cfg.data.ingest.keywords.len()).collect();
    let (pos, neg) = binary_scores(&records, &keywords);
    let curve = det_curve(&pos, &neg)?;
    write_det_csv(&output, &curve)?;
    println!(
        "{}",
        json!({"points": curve.points.len(), "auc": auc(&pos, &neg)?, "output": output})
    );
    Ok(())
}
