//! Command-line front end. Every command resolves one [`ExperimentConfig`]
//! (file, then `--desk`, then `--seed`) and writes its artifacts, plus a
//! `config.toml` snapshot of that configuration, into the output directory.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{ExperimentConfig, OUTPUT_DIR_ENV};
use crate::dataset::{cp_value, sct_split, Dataset, OutlierMode};
use crate::embedder::{Embedder, MetricsRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_features, EvalReport};
use crate::experiment::{
    compare, data_for_seed, run_training, summarize, sweep_outliers, OutlierAmount, RunData,
    RunOutcome, SweepRow,
};
use crate::io_util::write_atomic;
use crate::losses::LossKind;

#[derive(Debug, Parser)]
#[command(
    name = "mcnl",
    version,
    about = "Multi-camera negative loss experiments on synthetic data"
)]
pub struct Cli {
    /// Experiment config (TOML). Missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed. Restricts `compare` and `sweep-outliers` to this one seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `output_dir` from the config).
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    pub out: Option<PathBuf>,
    /// Apply the short desk-scale schedule.
    #[arg(long, global = true)]
    pub desk: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train, train_full, query and gallery manifests.
    Gen,
    /// Keep one random camera per identity of a manifest.
    SplitSct {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `<out>/train_sct.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train one network and evaluate it periodically.
    Train {
        #[arg(long)]
        loss: Option<LossKind>,
        /// Directory with train.csv, query.csv and gallery.csv; generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on query and gallery sets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train all four loss kinds on every seed.
    Compare,
    /// Retrain with cross-camera identities added back into the training set.
    SweepOutliers {
        #[arg(long, default_value = "mcnl")]
        loss: LossKind,
        /// Fractions of training identities, e.g. `0,0.05,0.14`.
        #[arg(long, value_delimiter = ',', conflicts_with = "counts")]
        fractions: Option<Vec<f64>>,
        /// Absolute numbers of identities instead of fractions.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<OutlierMode>>,
    },
    /// Write the embeddings of a manifest as a feature CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `<out>/features.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    seed: u64,
}

impl Context {
    fn resolve(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if cli.desk {
            cfg.apply_desk();
        }
        if let Some(s) = cli.seed {
            cfg.seeds = vec![s];
        }
        cfg.validate()?;
        let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        let seed = cfg.seeds[0];
        Ok(Self { cfg, out, seed })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn snapshot(&self) -> Result<()> {
        write_atomic(&self.path("config.toml"), self.cfg.to_toml()?.as_bytes())
    }

    fn run_data(&self, dir: Option<&Path>) -> Result<RunData> {
        match dir {
            Some(d) => Ok(RunData {
                train: Dataset::load_manifest(&d.join("train.csv"))?,
                query: Dataset::load_manifest(&d.join("query.csv"))?,
                gallery: Dataset::load_manifest(&d.join("gallery.csv"))?,
            }),
            None => Ok(data_for_seed(&self.cfg, self.seed)?.into()),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Context::resolve(&cli)?;
    match cli.command {
        Command::Gen => cmd_gen(&ctx),
        Command::SplitSct { input, output } => cmd_split_sct(&ctx, &input, output),
        Command::Train { loss, data } => cmd_train(&ctx, loss, data.as_deref()),
        Command::Eval { checkpoint, data } => cmd_eval(&ctx, &checkpoint, data.as_deref()),
        Command::Compare => cmd_compare(&ctx),
        Command::SweepOutliers {
            loss,
            fractions,
            counts,
            modes,
        } => {
            let amounts: Vec<OutlierAmount> = match (fractions, counts) {
                (_, Some(c)) => c.into_iter().map(OutlierAmount::Count).collect(),
                (Some(f), None) => f.into_iter().map(OutlierAmount::Fraction).collect(),
                (None, None) => ctx
                    .cfg
                    .sweep
                    .fractions
                    .iter()
                    .map(|&f| OutlierAmount::Fraction(f))
                    .collect(),
            };
            let modes = modes.unwrap_or_else(|| ctx.cfg.sweep.modes.clone());
            cmd_sweep(&ctx, loss, &amounts, &modes)
        }
        Command::ExportFeatures {
            checkpoint,
            input,
            output,
        } => {
            let output = output.unwrap_or_else(|| ctx.path("features.csv"));
            let embedder = Embedder::load(&checkpoint)?;
            export_features(&embedder, &Dataset::load_manifest(&input)?, &output)?;
            log::info!("wrote {}", output.display());
            Ok(())
        }
    }
}

fn cmd_gen(ctx: &Context) -> Result<()> {
    let data = data_for_seed(&ctx.cfg, ctx.seed)?;
    for (name, set) in [
        ("train.csv", &data.train),
        ("train_full.csv", &data.train_full),
        ("query.csv", &data.query),
        ("gallery.csv", &data.gallery),
    ] {
        set.save_manifest(&ctx.path(name))?;
        log::info!(
            "{name}: {} rows, {} identities",
            set.len(),
            set.n_identities()
        );
    }
    ctx.snapshot()
}

fn cmd_split_sct(ctx: &Context, input: &Path, output: Option<PathBuf>) -> Result<()> {
    let full = Dataset::load_manifest(input)?;
    let sct = sct_split(&full, ctx.seed)?;
    let output = output.unwrap_or_else(|| ctx.path("train_sct.csv"));
    sct.save_manifest(&output)?;
    println!(
        "{}: {} -> {} rows, CP {:.4} -> {:.4}",
        output.display(),
        full.len(),
        sct.len(),
        cp_value(&full)?,
        cp_value(&sct)?
    );
    Ok(())
}

fn cmd_train(ctx: &Context, loss: Option<LossKind>, data_dir: Option<&Path>) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(k) = loss {
        cfg.loss.kind = k;
    }
    let data = ctx.run_data(data_dir)?;
    let cross_camera = !data.train.is_sct();
    let outcome = run_training(&cfg, &data, ctx.seed, cross_camera)?;
    write_atomic(
        &ctx.path("metrics.csv"),
        &metrics_csv(&outcome.run.records)?,
    )?;
    outcome.run.embedder.save(&ctx.path("checkpoint.json"))?;
    write_atomic(&ctx.path("report.json"), &report_json(&outcome.report)?)?;
    write_atomic(&ctx.path("config.toml"), cfg.to_toml()?.as_bytes())?;
    println!(
        "{} seed {}: rank1 {:.4} mAP {:.4} pseudo-F {:.3} xcam {:.4}",
        cfg.loss.kind,
        ctx.seed,
        outcome.report.rank1,
        outcome.report.map,
        outcome.report.pseudo_f,
        outcome.report.xcam_nn_prob
    );
    Ok(())
}

fn cmd_eval(ctx: &Context, checkpoint: &Path, data_dir: Option<&Path>) -> Result<()> {
    let embedder = Embedder::load(checkpoint)?;
    let data = ctx.run_data(data_dir)?;
    let report = evaluate(&embedder, &data.query, &data.gallery, &ctx.cfg.eval)?;
    let json = report_json(&report)?;
    write_atomic(&ctx.path("eval_report.json"), &json)?;
    println!("{}", String::from_utf8_lossy(&json));
    Ok(())
}

fn cmd_compare(ctx: &Context) -> Result<()> {
    let outcomes = compare(&ctx.cfg, &LossKind::ALL)?;
    write_atomic(&ctx.path("compare_runs.csv"), &runs_csv(&outcomes)?)?;
    let summary = summarize(&outcomes, &LossKind::ALL);
    let mut w = csv_writer();
    w.write_record([
        "loss",
        "n_seeds",
        "rank1_mean",
        "rank1_min",
        "rank1_max",
        "map_mean",
        "map_min",
        "map_max",
        "pseudo_f_mean",
        "xcam_nn_prob_mean",
    ])
    .map_err(csv_err)?;
    println!(
        "{:<14} {:>8} {:>17} {:>8} {:>10} {:>6}",
        "loss", "rank1", "[min, max]", "mAP", "pseudo-F", "xcam"
    );
    for s in &summary {
        w.write_record([
            s.loss.to_string(),
            s.n_seeds.to_string(),
            s.rank1_mean.to_string(),
            s.rank1_min.to_string(),
            s.rank1_max.to_string(),
            s.map_mean.to_string(),
            s.map_min.to_string(),
            s.map_max.to_string(),
            s.pseudo_f_mean.to_string(),
            s.xcam_nn_prob_mean.to_string(),
        ])
        .map_err(csv_err)?;
        println!(
            "{:<14} {:>8.4} [{:.4}, {:.4}] {:>8.4} {:>10.3} {:>6.3}",
            s.loss.as_str(),
            s.rank1_mean,
            s.rank1_min,
            s.rank1_max,
            s.map_mean,
            s.pseudo_f_mean,
            s.xcam_nn_prob_mean
        );
    }
    write_atomic(&ctx.path("compare.csv"), &finish(w)?)?;
    ctx.snapshot()
}

fn cmd_sweep(
    ctx: &Context,
    loss: LossKind,
    amounts: &[OutlierAmount],
    modes: &[OutlierMode],
) -> Result<()> {
    let rows = sweep_outliers(&ctx.cfg, loss, amounts, modes)?;
    write_atomic(&ctx.path("sweep.csv"), &sweep_csv(&rows)?)?;
    for r in &rows {
        println!(
            "{} {:>11} n={:<3} seed {}: rank1 {:.4} mAP {:.4} (train CP {:.3})",
            r.loss,
            r.mode.as_str(),
            r.n_outliers,
            r.seed,
            r.rank1,
            r.map,
            r.train_cp
        );
    }
    ctx.snapshot()
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Serde(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `epoch,mean_loss,lr,rank1,map,pseudo_f,xcam_nn_prob,xcam_nn_prob_train`;
/// evaluation columns are empty for epochs without evaluation.
pub fn metrics_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record([
        "epoch",
        "mean_loss",
        "lr",
        "rank1",
        "map",
        "pseudo_f",
        "xcam_nn_prob",
        "xcam_nn_prob_train",
    ])
    .map_err(csv_err)?;
    for r in records {
        let e = r.eval;
        w.write_record([
            r.epoch.to_string(),
            r.mean_loss.to_string(),
            r.lr.to_string(),
            opt(e.map(|e| e.rank1)),
            opt(e.map(|e| e.map)),
            opt(e.map(|e| e.pseudo_f)),
            opt(e.map(|e| e.xcam_nn_prob)),
            opt(e.and_then(|e| e.xcam_nn_prob_train)),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

fn runs_csv(outcomes: &[RunOutcome]) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record([
        "loss",
        "seed",
        "rank1",
        "rank5",
        "rank10",
        "map",
        "pseudo_f",
        "xcam_nn_prob",
        "initial_rank1",
        "initial_map",
        "initial_pseudo_f",
        "initial_xcam_nn_prob",
        "train_cp",
    ])
    .map_err(csv_err)?;
    for o in outcomes {
        let (r, i) = (&o.report, &o.initial);
        w.write_record([
            o.loss.to_string(),
            o.seed.to_string(),
            r.rank1.to_string(),
            r.rank5.to_string(),
            r.rank10.to_string(),
            r.map.to_string(),
            r.pseudo_f.to_string(),
            r.xcam_nn_prob.to_string(),
            i.rank1.to_string(),
            i.map.to_string(),
            i.pseudo_f.to_string(),
            i.xcam_nn_prob.to_string(),
            o.train_cp.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

/// `fraction,mode,seed,rank1,map,loss,n_outliers,train_cp`.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record([
            "fraction",
            "mode",
            "seed",
            "rank1",
            "map",
            "loss",
            "n_outliers",
            "train_cp",
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

fn report_json(report: &EvalReport) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(report).map_err(|e| Error::Serde(e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}
