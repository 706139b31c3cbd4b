use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use qbm_core::checkpoint::Checkpoint;
use qbm_core::dataset::{format_bags, read_bags, read_instances, read_pairs, write_instances, Bag};
use qbm_core::diagnostics::gradient_suite;
use qbm_core::eval::{ablation_report, inspect_weights, oracle_scores, score_instances, MetricsRow};
use qbm_core::model::{QqMode, Variant};
use qbm_core::pipeline::{build_dataset, new_matcher};
use qbm_core::train::{train, EpochLog};
use qbm_core::QbmError;

mod config;

use config::RunConfig;

/// Largest relative gradient error accepted by `grad-check`.
const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "qbm", version, about = "Query-bag matching: datasets, training, ranking evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// base, base+mc, base+br, base+br_nocov, qbm, qq or bagcon.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Output path (directory for build-dataset, checkpoint for train,
    /// report copy for the other commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Group duplicate pairs into bags and write train/valid/test instances.
    BuildDataset {
        #[arg(long)]
        pairs: PathBuf,
        /// Explicit query counts as TRAIN,VALID,TEST.
        #[arg(long, value_name = "TRAIN,VALID,TEST")]
        sizes: Option<String>,
        #[arg(long)]
        min_bag_size: Option<usize>,
    },
    /// Train one variant and write its best checkpoint and epoch log.
    Train {
        /// Directory holding train.tsv and valid.tsv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Epoch log path; defaults to the checkpoint path plus `.log`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score test instances with one or more checkpoints and print the report.
    Evaluate {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        /// Add a row from a stand-in model that always ranks the positive first.
        #[arg(long)]
        perfect_oracle: bool,
    },
    /// Rank the bags of a bag file for one query.
    Rank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        bags: PathBuf,
        /// Aggregation for the pairwise baseline: max or mean.
        #[arg(long, default_value = "max")]
        qq_mode: String,
    },
    /// Print the learned coverage weights of some tokens.
    InspectWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        tokens: Vec<String>,
    },
    /// Finite-difference check of every operation and of each variant on a small shape.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        points: u64,
        /// Check the primitives only.
        #[arg(long)]
        ops_only: bool,
    },
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for s in &cli.common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| QbmError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    push("seed", cli.common.seed.map(|s| s.to_string()));
    push("variant", cli.common.variant.clone());
    match &cli.command {
        Command::BuildDataset { sizes, min_bag_size, .. } => {
            push("min_bag_size", min_bag_size.map(|n| n.to_string()));
            if let Some(s) = sizes {
                let parts: Vec<&str> = s.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(QbmError::Config(format!("--sizes expects TRAIN,VALID,TEST, got {s:?}")).into());
                }
                for (k, v) in ["train_size", "valid_size", "test_size"].iter().zip(parts) {
                    push(k, Some(v.to_string()));
                }
            }
        }
        Command::Train {
            embeddings,
            max_epochs,
            lr,
            batch_size,
            ..
        } => {
            push("embeddings", embeddings.as_ref().map(|p| p.display().to_string()));
            push("max_epochs", max_epochs.map(|n| n.to_string()));
            push("lr", lr.map(|x| x.to_string()));
            push("batch_size", batch_size.map(|n| n.to_string()));
        }
        _ => {}
    }
    Ok(out)
}

fn require_out(out: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    match out {
        Some(p) => Ok(p.clone()),
        None => Err(QbmError::Config(format!("--out is required ({what})")).into()),
    }
}

/// Prints `text` and copies it to `out` when given.
fn emit(text: &str, out: &Option<PathBuf>) -> Result<()> {
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text).map_err(|e| QbmError::io(path, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| QbmError::io(path, e))?;
    Ok(())
}

fn cmd_build_dataset(cfg: &RunConfig, pairs: &Path, out: &Path) -> Result<()> {
    let records = read_pairs(pairs)?;
    let built = build_dataset(&records, cfg.min_bag_size, cfg.split_sizes()?, cfg.seed)?;
    std::fs::create_dir_all(out).map_err(|e| QbmError::io(out, e))?;
    write_instances(&out.join("train.tsv"), &built.splits.train)?;
    write_instances(&out.join("valid.tsv"), &built.splits.valid)?;
    write_instances(&out.join("test.tsv"), &built.splits.test)?;
    let bags: Vec<Bag> = built.query_bags.iter().map(|qb| qb.bag.clone()).collect();
    write_file(&out.join("bags.tsv"), &format_bags(&bags)?)?;
    let line = built.stats.summary_line();
    write_file(&out.join("stats.txt"), &format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, log_path: Option<&Path>) -> Result<()> {
    cfg.train.validate()?;
    cfg.model.validate()?;
    let train_set = read_instances(&data.join("train.tsv"))?;
    let valid_set = read_instances(&data.join("valid.tsv"))?;
    if cfg.embeddings.is_none() {
        warn!("no embedding file given, embeddings start from seeded random vectors");
    }
    let mut matcher = new_matcher(cfg.model.clone(), &train_set, cfg.embeddings.as_deref(), cfg.min_count, cfg.seed)?;
    info!(
        "variant {} with {} parameters, vocabulary of {}",
        cfg.model.variant,
        matcher.params.count(),
        matcher.vocab.len()
    );
    info!("{}", EpochLog::HEADER);
    let outcome = train(&mut matcher, &train_set, &valid_set, &cfg.train, |e| info!("{}", e.line()))?;
    if outcome.skipped > 0 {
        warn!("skipped {} degenerate examples", outcome.skipped);
    }
    outcome.best.save(out)?;
    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    });
    let mut text = format!("{}\n", EpochLog::RECORD_HEADER);
    for e in &outcome.log {
        text.push_str(&e.record());
        text.push('\n');
    }
    write_file(&log_path, &text)?;
    println!(
        "best epoch {} (validation F1 {:.4}) of {}; checkpoint {}",
        outcome.best.epoch,
        outcome.best.val_f1,
        outcome.epochs_run,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(checkpoints: &[PathBuf], test: &Path, oracle: bool, out: &Option<PathBuf>) -> Result<()> {
    if checkpoints.is_empty() && !oracle {
        return Err(QbmError::Config("give at least one --checkpoint or --perfect-oracle".into()).into());
    }
    let instances = read_instances(test)?;
    let mut rows = Vec::new();
    for path in checkpoints {
        let cp = Checkpoint::load(path)?;
        let m = &cp.matcher;
        let modes: &[QqMode] = if m.variant() == Variant::Qq {
            &[QqMode::Max, QqMode::Mean]
        } else {
            &[QqMode::Max]
        };
        for &mode in modes {
            let scored = score_instances(m, &instances, mode)?;
            let degenerate = scored.iter().map(|s| s.degenerate).sum::<usize>();
            if degenerate > 0 {
                warn!("{}: {degenerate} degenerate candidates scored 0", path.display());
            }
            let name = if m.variant() == Variant::Qq {
                mode.name().to_string()
            } else {
                m.variant().to_string()
            };
            rows.push(MetricsRow::compute(name, &scored)?);
        }
    }
    if oracle {
        rows.push(MetricsRow::compute("oracle", &oracle_scores(&instances)?)?);
    }
    emit(&ablation_report(&rows), out)
}

fn cmd_rank(checkpoint: &Path, query: &str, bags: &Path, mode: &str, out: &Option<PathBuf>) -> Result<()> {
    let mode = match mode {
        "max" => QqMode::Max,
        "mean" => QqMode::Mean,
        other => return Err(QbmError::Config(format!("--qq-mode must be max or mean, got {other:?}")).into()),
    };
    let cp = Checkpoint::load(checkpoint)?;
    let bags = read_bags(bags)?;
    if bags.is_empty() {
        return Err(QbmError::EmptyCorpus("bag file has no bags".into()).into());
    }
    let mut scored = Vec::with_capacity(bags.len());
    for b in &bags {
        let p = match cp.matcher.score(query, &b.questions, mode) {
            Ok(p) => p,
            Err(QbmError::Degenerate(msg)) => {
                warn!("bag {}: {msg}; scored 0", b.id);
                0.0
            }
            Err(e) => return Err(e.into()),
        };
        scored.push((b.id, p));
    }
    // Stable, so ties keep file order.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    let text: String = scored.iter().map(|(id, p)| format!("{id}\t{p:.4}\n")).collect();
    emit(&text, out)
}

fn cmd_inspect_weights(checkpoint: &Path, tokens: &[String], out: &Option<PathBuf>) -> Result<()> {
    let cp = Checkpoint::load(checkpoint)?;
    let (rows, mean) = inspect_weights(&cp.matcher, tokens)?;
    let mut text = String::from("token\tresolved\te\n");
    for r in rows {
        text.push_str(&format!("{}\t{}\t{:.4}\n", r.token, r.resolved, r.e));
    }
    text.push_str(&format!("average\t-\t{mean:.4}\n"));
    emit(&text, out)
}

/// Returns whether every row is within tolerance.
fn cmd_grad_check(points: u64, ops_only: bool, out: &Option<PathBuf>) -> Result<bool> {
    let start = std::time::Instant::now();
    let rows = gradient_suite(points, !ops_only)?;
    let mut text = String::from("operation\tmax_rel_error\tchecked\n");
    for r in &rows {
        text.push_str(&format!("{}\t{:.3e}\t{}\n", r.name, r.max_rel_error, r.checked));
    }
    emit(&text, out)?;
    info!("gradient suite took {:.1}s", start.elapsed().as_secs_f64());
    Ok(rows.iter().all(|r| r.max_rel_error < GRAD_TOLERANCE))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = RunConfig::resolve(cli.common.config.as_deref(), &overrides(&cli)?)?;
    info!("resolved configuration (seed {}):\n{}", cfg.seed, cfg.render().trim_end());
    let out = &cli.common.out;
    match &cli.command {
        Command::BuildDataset { pairs, .. } => cmd_build_dataset(&cfg, pairs, &require_out(out, "output directory")?)?,
        Command::Train { data, log, .. } => {
            let path = require_out(out, "checkpoint path")?;
            cmd_train(&cfg, data, &path, log.as_deref())?
        }
        Command::Evaluate {
            checkpoints,
            test,
            perfect_oracle,
        } => cmd_evaluate(checkpoints, test, *perfect_oracle, out)?,
        Command::Rank {
            checkpoint,
            query,
            bags,
            qq_mode,
        } => cmd_rank(checkpoint, query, bags, qq_mode, out)?,
        Command::InspectWeights { checkpoint, tokens } => cmd_inspect_weights(checkpoint, tokens, out)?,
        Command::GradCheck { points, ops_only } => {
            if !cmd_grad_check(*points, *ops_only, out)? {
                eprintln!("error: a relative gradient error reached {GRAD_TOLERANCE}");
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// 3 for numeric failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<QbmError>() {
        Some(e) if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).context("qbm failed") {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
