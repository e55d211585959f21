//! End-to-end runs: data, training with periodic evaluation, loss
//! comparisons and outlier sweeps. Independent runs fan out over rayon.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{cp_value, inject_outlier_count, outlier_count, Dataset, OutlierMode};
use crate::embedder::{train, Embedder, EpochEval, TrainRun, TrainSpec};
use crate::error::Result;
use crate::eval::{dataset_xcam_nn_prob, evaluate, EvalReport};
use crate::losses::{LossConfig, LossKind};
use crate::synthgen::{generate, SyntheticData};

/// Training and test sets of one run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

impl From<SyntheticData> for RunData {
    fn from(d: SyntheticData) -> Self {
        Self {
            train: d.train,
            query: d.query,
            gallery: d.gallery,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub loss: LossKind,
    pub seed: u64,
    pub train_cp: f64,
    /// Evaluation of the untrained network.
    pub initial: EvalReport,
    pub report: EvalReport,
    pub run: TrainRun,
}

/// Synthetic data of run `seed`: the configured generator seed offset by `seed`.
pub fn data_for_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SyntheticData> {
    let mut synth = cfg.synth.clone();
    synth.seed = synth.seed.wrapping_add(seed);
    generate(&synth)
}

fn sampler_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5A5A_5A5A
}

fn epoch_eval(
    embedder: &Embedder,
    data: &RunData,
    cfg: &ExperimentConfig,
) -> Result<(EvalReport, f64)> {
    let report = evaluate(embedder, &data.query, &data.gallery, &cfg.eval)?;
    let train_xcam = dataset_xcam_nn_prob(embedder, &data.train)?;
    Ok((report, train_xcam))
}

/// Trains one network with `cfg.loss` and evaluates it every
/// `cfg.eval_every` epochs and at the end.
pub fn run_training(
    cfg: &ExperimentConfig,
    data: &RunData,
    seed: u64,
    cross_camera: bool,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let init = Embedder::from_config(data.train.d_in(), &cfg.model, seed)?;
    let initial = evaluate(&init, &data.query, &data.gallery, &cfg.eval)?;
    let spec = TrainSpec {
        batch: cfg.batch,
        loss: cfg.loss,
        optim: cfg.optim,
        seed: sampler_seed(seed),
        cross_camera,
    };
    let epochs = cfg.optim.epochs;
    let mut last: Option<EvalReport> = None;
    let run = train(&data.train, init, &spec, |epoch, e| {
        if epoch % cfg.eval_every != 0 && epoch != epochs {
            return Ok(None);
        }
        let (report, train_xcam) = epoch_eval(e, data, cfg)?;
        last = Some(report);
        Ok(Some(EpochEval {
            rank1: report.rank1,
            map: report.map,
            pseudo_f: report.pseudo_f,
            xcam_nn_prob: report.xcam_nn_prob,
            xcam_nn_prob_train: Some(train_xcam),
        }))
    })?;
    let report = match last {
        Some(r) => r,
        None => initial,
    };
    Ok(RunOutcome {
        loss: cfg.loss.kind,
        seed,
        train_cp: cp_value(&data.train)?,
        initial,
        report,
        run,
    })
}

/// Trains every loss kind on every seed; each seed's data is shared by all losses.
pub fn compare(cfg: &ExperimentConfig, kinds: &[LossKind]) -> Result<Vec<RunOutcome>> {
    let data: Vec<(u64, RunData)> = cfg
        .seeds
        .iter()
        .map(|&s| Ok((s, data_for_seed(cfg, s)?.into())))
        .collect::<Result<_>>()?;
    let jobs: Vec<(LossKind, usize)> = kinds
        .iter()
        .flat_map(|&k| (0..data.len()).map(move |i| (k, i)))
        .collect();
    jobs.par_iter()
        .map(|&(kind, i)| {
            let mut c = cfg.clone();
            c.loss = LossConfig { kind, ..cfg.loss };
            let (seed, d) = &data[i];
            run_training(&c, d, *seed, false)
        })
        .collect()
}

/// Mean and range of one loss kind over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub loss: LossKind,
    pub n_seeds: usize,
    pub rank1_mean: f64,
    pub rank1_min: f64,
    pub rank1_max: f64,
    pub map_mean: f64,
    pub map_min: f64,
    pub map_max: f64,
    pub pseudo_f_mean: f64,
    pub xcam_nn_prob_mean: f64,
}

pub fn summarize(outcomes: &[RunOutcome], kinds: &[LossKind]) -> Vec<CompareSummary> {
    kinds
        .iter()
        .map(|&kind| {
            let rs: Vec<&EvalReport> = outcomes
                .iter()
                .filter(|o| o.loss == kind)
                .map(|o| &o.report)
                .collect();
            let n = rs.len().max(1) as f64;
            let stat = |f: fn(&EvalReport) -> f64| {
                let vals: Vec<f64> = rs.iter().map(|r| f(r)).collect();
                (
                    vals.iter().sum::<f64>() / n,
                    vals.iter().copied().fold(f64::INFINITY, f64::min),
                    vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                )
            };
            let (rank1_mean, rank1_min, rank1_max) = stat(|r| r.rank1);
            let (map_mean, map_min, map_max) = stat(|r| r.map);
            CompareSummary {
                loss: kind,
                n_seeds: rs.len(),
                rank1_mean,
                rank1_min,
                rank1_max,
                map_mean,
                map_min,
                map_max,
                pseudo_f_mean: stat(|r| r.pseudo_f).0,
                xcam_nn_prob_mean: stat(|r| r.xcam_nn_prob).0,
            }
        })
        .collect()
}

/// How many training identities receive their cross-camera images back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutlierAmount {
    Fraction(f64),
    Count(usize),
}

impl OutlierAmount {
    fn count(self, n_identities: usize) -> Result<usize> {
        match self {
            OutlierAmount::Fraction(f) => outlier_count(f, n_identities),
            OutlierAmount::Count(c) => Ok(c),
        }
    }
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub mode: OutlierMode,
    pub seed: u64,
    pub rank1: f64,
    pub map: f64,
    pub loss: LossKind,
    pub n_outliers: usize,
    pub train_cp: f64,
}

/// Rebuilds the training set with injected outliers for every
/// (amount, mode, seed) and trains `loss` on it. Runs without outliers are
/// shared between modes.
pub fn sweep_outliers(
    cfg: &ExperimentConfig,
    loss: LossKind,
    amounts: &[OutlierAmount],
    modes: &[OutlierMode],
) -> Result<Vec<SweepRow>> {
    let data: Vec<(u64, SyntheticData)> = cfg
        .seeds
        .iter()
        .map(|&s| Ok((s, data_for_seed(cfg, s)?)))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for &amount in amounts {
        for &mode in modes {
            for (i, (_, d)) in data.iter().enumerate() {
                jobs.push((amount.count(d.train.n_identities())?, mode, i));
            }
        }
    }
    let mut unique: Vec<(usize, OutlierMode, usize)> = Vec::new();
    for &(n, mode, i) in &jobs {
        let key = if n == 0 {
            (0, OutlierMode::SctRelabel, i)
        } else {
            (n, mode, i)
        };
        if !unique.contains(&key) {
            unique.push(key);
        }
    }
    let mut c = cfg.clone();
    c.loss = LossConfig {
        kind: loss,
        ..cfg.loss
    };
    let results: Vec<((usize, OutlierMode, usize), f64, EvalReport)> = unique
        .par_iter()
        .map(|&(n, mode, i)| {
            let (seed, d) = &data[i];
            let train = inject_outlier_count(&d.train, &d.train_full, n, mode, *seed)?;
            let run_data = RunData {
                train,
                query: d.query.clone(),
                gallery: d.gallery.clone(),
            };
            let cross = mode == OutlierMode::GroundTruth && n > 0;
            let out = run_training(&c, &run_data, *seed, cross)?;
            Ok(((n, mode, i), out.train_cp, out.report))
        })
        .collect::<Result<_>>()?;
    Ok(jobs
        .iter()
        .map(|&(n, mode, i)| {
            let key = if n == 0 {
                (0, OutlierMode::SctRelabel, i)
            } else {
                (n, mode, i)
            };
            let (_, cp, report) = results.iter().find(|r| r.0 == key).expect("every key ran");
            let (seed, d) = &data[i];
            SweepRow {
                fraction: n as f64 / d.train.n_identities() as f64,
                mode,
                seed: *seed,
                rank1: report.rank1,
                map: report.map,
                loss,
                n_outliers: n,
                train_cp: *cp,
            }
        })
        .collect())
}
