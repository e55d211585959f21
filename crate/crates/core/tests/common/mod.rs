//! Reference implementations used by the integration tests. They recompute
//! everything from raw embeddings by exhaustive enumeration and share no code
//! with the library beyond the data types.

#![allow(dead_code)]

use mcnl::losses::{batch_hard_loss, LossConfig, LossKind};
use mcnl::{Embedder, Matrix};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn smoothed_dist(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s + 1e-12).sqrt() - 1e-6
}

fn hinge(z: f64) -> f64 {
    z.max(0.0)
}

/// Batch loss by enumerating every (positive, negative) pair per anchor.
/// A hinge of the hardest pair equals the maximum of the hinge over all pairs.
/// The second MCNL hinge compares the nearest other-camera negative with
/// every same-camera negative.
pub fn loss_oracle(emb: &Matrix, ids: &[usize], cams: &[usize], cfg: &LossConfig) -> f64 {
    let n = emb.rows();
    let d = |i: usize, j: usize| smoothed_dist(emb.row(i), emb.row(j));
    let mut total = 0.0;
    for a in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != a && ids[j] == ids[a]).collect();
        let neg: Vec<usize> = (0..n).filter(|&j| ids[j] != ids[a]).collect();
        let same: Vec<usize> = neg
            .iter()
            .copied()
            .filter(|&j| cams[j] == cams[a])
            .collect();
        let other: Vec<usize> = neg
            .iter()
            .copied()
            .filter(|&j| cams[j] != cams[a])
            .collect();
        let worst = |xs: &[usize], ys: &[usize], margin: f64| {
            let mut m = 0.0f64;
            for &x in xs {
                for &y in ys {
                    m = m.max(hinge(margin + d(a, x) - d(a, y)));
                }
            }
            m
        };
        total += match cfg.kind {
            LossKind::Mcnl => {
                let nearest_other = other.iter().map(|&o| d(a, o)).fold(f64::INFINITY, f64::min);
                let h2 = same
                    .iter()
                    .map(|&s| hinge(cfg.m2 + nearest_other - d(a, s)))
                    .fold(0.0, f64::max);
                worst(&pos, &other, cfg.m1) + h2
            }
            LossKind::Triplet => worst(&pos, &neg, cfg.triplet_margin),
            LossKind::TripletSame => worst(&pos, &same, cfg.triplet_margin),
            LossKind::TripletOther => worst(&pos, &other, cfg.triplet_margin),
        };
    }
    total
}

/// Labels of a `c x p x k` single-camera batch: identity `ci * p + pi` in camera `ci`.
pub fn grid_labels(c: usize, p: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut cams = Vec::new();
    for ci in 0..c {
        for pi in 0..p {
            for _ in 0..k {
                ids.push(ci * p + pi);
                cams.push(ci);
            }
        }
    }
    (ids, cams)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Per-query brute force: each valid gallery entry's rank is one plus the
/// number of valid entries strictly ahead of it (nearer, or equally near
/// with a lower index). Returns (cmc[..max_rank], mAP, evaluated, dropped).
pub fn retrieval_oracle(
    q: &Matrix,
    q_ids: &[usize],
    q_cams: &[usize],
    g: &Matrix,
    g_ids: &[usize],
    g_cams: &[usize],
    max_rank: usize,
) -> (Vec<f64>, f64, usize, usize) {
    let mut hits_at = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut evaluated = 0;
    let mut dropped = 0;
    for qi in 0..q.rows() {
        let valid: Vec<usize> = (0..g.rows())
            .filter(|&j| !(g_ids[j] == q_ids[qi] && g_cams[j] == q_cams[qi]))
            .collect();
        let dist = |j: usize| {
            q.row(qi)
                .iter()
                .zip(g.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let rank_of = |j: usize| {
            1 + valid
                .iter()
                .filter(|&&o| dist(o) < dist(j) || (dist(o) == dist(j) && o < j))
                .count()
        };
        let mut rel_ranks: Vec<usize> = valid
            .iter()
            .copied()
            .filter(|&j| g_ids[j] == q_ids[qi])
            .map(rank_of)
            .collect();
        if rel_ranks.is_empty() {
            dropped += 1;
            continue;
        }
        evaluated += 1;
        rel_ranks.sort_unstable();
        let ap = rel_ranks
            .iter()
            .map(|&r| rel_ranks.iter().filter(|&&o| o <= r).count() as f64 / r as f64)
            .sum::<f64>()
            / rel_ranks.len() as f64;
        ap_sum += ap;
        for (k, h) in hits_at.iter_mut().enumerate() {
            if rel_ranks[0] <= k + 1 {
                *h += 1;
            }
        }
    }
    let denom = evaluated.max(1) as f64;
    let cmc = hits_at.iter().map(|&h| h as f64 / denom).collect();
    let map = if evaluated > 0 {
        ap_sum / evaluated as f64
    } else {
        0.0
    };
    (cmc, map, evaluated, dropped)
}

/// Calinski-Harabasz statistic over camera groups, written out directly.
pub fn pseudo_f_oracle(rows: &[Vec<f64>], cams: &[usize]) -> f64 {
    let d = rows[0].len();
    let n = rows.len();
    let mut groups: std::collections::BTreeMap<usize, Vec<&Vec<f64>>> = Default::default();
    for (r, &c) in rows.iter().zip(cams) {
        groups.entry(c).or_default().push(r);
    }
    let mean = |xs: &[&Vec<f64>]| -> Vec<f64> {
        (0..d)
            .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / xs.len() as f64)
            .collect()
    };
    let all: Vec<&Vec<f64>> = rows.iter().collect();
    let mu = mean(&all);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let (mut ssb, mut ssw) = (0.0, 0.0);
    for xs in groups.values() {
        let mc = mean(xs);
        ssb += xs.len() as f64 * sq(&mc, &mu);
        ssw += xs.iter().map(|x| sq(x, &mc)).sum::<f64>();
    }
    let k = groups.len() as f64;
    (ssb / (k - 1.0)) / (ssw / (n as f64 - k))
}

/// Mining choices, hinge activity and rectifier states at the current parameters.
type Structure = (
    Vec<bool>,
    Vec<(
        Option<usize>,
        Option<usize>,
        Option<usize>,
        Option<usize>,
        u8,
    )>,
);

fn loss_and_structure(
    net: &Embedder,
    x: &Matrix,
    ids: &[usize],
    cams: &[usize],
    cfg: &LossConfig,
) -> (f64, Structure) {
    let (emb, cache) = net.forward(x).unwrap();
    let out = batch_hard_loss(&emb, ids, cams, cfg).unwrap();
    let mined = out
        .anchors
        .iter()
        .map(|a| {
            (
                a.positive.map(|m| m.index),
                a.same_negative.map(|m| m.index),
                a.other_negative.map(|m| m.index),
                a.any_negative.map(|m| m.index),
                a.active_hinges,
            )
        })
        .collect();
    (out.value, (cache.activation_pattern(), mined))
}

pub struct FdOutcome {
    pub max_rel_err: f64,
    pub n_params: usize,
}

/// Central differences of loss(embedder(x)) for every parameter. Returns
/// `None` when some perturbation changes the mining, a hinge or a rectifier
/// (the loss is not differentiable there) or when no hinge is active.
/// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
pub fn fd_check(
    net: &Embedder,
    x: &Matrix,
    ids: &[usize],
    cams: &[usize],
    cfg: &LossConfig,
    h: f64,
    floor: f64,
) -> Option<FdOutcome> {
    let (emb, cache) = net.forward(x).unwrap();
    let out = batch_hard_loss(&emb, ids, cams, cfg).unwrap();
    if out.active_hinges() == 0 {
        return None;
    }
    let analytic = net.backward(&cache, &out.grad).unwrap();
    let (_, base) = loss_and_structure(net, x, ids, cams, cfg);
    let mut max_rel_err = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = net.clone();
        plus.params_mut()[i] += h;
        let mut minus = net.clone();
        minus.params_mut()[i] -= h;
        let (lp, sp) = loss_and_structure(&plus, x, ids, cams, cfg);
        let (lm, sm) = loss_and_structure(&minus, x, ids, cams, cfg);
        if sp != base || sm != base {
            return None;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(floor);
        max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
    }
    Some(FdOutcome {
        max_rel_err,
        n_params: net.n_params(),
    })
}
