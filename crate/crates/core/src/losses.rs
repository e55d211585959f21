//! Batch-hard mined metric losses with exact subgradients.
//!
//! All four losses share one mining pass. For each anchor row `a`:
//!
//! * hardest positive: largest distance to another row with the same identity;
//! * hardest same-camera negative: smallest distance to a different identity
//!   in the anchor's camera;
//! * hardest other-camera negative: smallest distance to a different identity
//!   in any other camera;
//! * hardest negative: smallest distance to any different identity.
//!
//! The multi-camera negative loss (MCNL) sums, over anchors,
//! `[m1 + d_pos - d_other]_+ + [m2 + d_other - d_same]_+`. The triplet family
//! sums `[margin + d_pos - d_neg]_+` with `d_neg` taken from all negatives,
//! same-camera negatives or other-camera negatives.
//!
//! Losses are summed (not averaged) over anchors. Ties in mining go to the
//! lowest row index and the hinge derivative at exactly zero is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Matrix};

/// Smoothing inside the square root of the Euclidean distance.
pub const DIST_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mcnl,
    Triplet,
    TripletSame,
    TripletOther,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Mcnl,
        LossKind::Triplet,
        LossKind::TripletSame,
        LossKind::TripletOther,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mcnl => "mcnl",
            LossKind::Triplet => "triplet",
            LossKind::TripletSame => "triplet_same",
            LossKind::TripletOther => "triplet_other",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Positive vs. other-camera negative margin of MCNL.
    pub m1: f64,
    /// Other-camera vs. same-camera negative margin of MCNL.
    pub m2: f64,
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Mcnl,
            m1: 0.1,
            m2: 0.1,
            triplet_margin: 0.3,
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [
            ("m1", self.m1),
            ("m2", self.m2),
            ("triplet_margin", self.triplet_margin),
        ] {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::Config(format!(
                    "loss.{name} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// A mined partner row and its distance to the anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mined {
    pub index: usize,
    pub dist: f64,
}

/// Per-anchor mining results and hinge activity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AnchorDiagnostics {
    pub positive: Option<Mined>,
    pub same_negative: Option<Mined>,
    pub other_negative: Option<Mined>,
    pub any_negative: Option<Mined>,
    /// Number of active hinge terms for this anchor (0..=2 for MCNL, 0..=1 otherwise).
    pub active_hinges: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient of `value` with respect to each embedding row.
    pub grad: Matrix,
    pub anchors: Vec<AnchorDiagnostics>,
}

impl LossOutput {
    pub fn active_hinges(&self) -> usize {
        self.anchors.iter().map(|a| a.active_hinges as usize).sum()
    }

    pub fn mean_per_anchor(&self) -> f64 {
        if self.anchors.is_empty() {
            0.0
        } else {
            self.value / self.anchors.len() as f64
        }
    }
}

#[inline]
fn smoothed_dist(sq: f64) -> f64 {
    (sq + DIST_EPS).sqrt() - DIST_EPS.sqrt()
}

/// `D[i][j] = sqrt(|e_i - e_j|^2 + eps) - sqrt(eps)`.
pub fn pairwise_distances(emb: &Matrix) -> Matrix {
    let n = emb.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = smoothed_dist(sq_dist(emb.row(i), emb.row(j)));
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

fn keep_max(slot: &mut Option<Mined>, index: usize, dist: f64) {
    if slot.is_none_or(|m| dist > m.dist) {
        *slot = Some(Mined { index, dist });
    }
}

fn keep_min(slot: &mut Option<Mined>, index: usize, dist: f64) {
    if slot.is_none_or(|m| dist < m.dist) {
        *slot = Some(Mined { index, dist });
    }
}

/// Runs the mining pass for every anchor.
pub fn mine(dist: &Matrix, ids: &[usize], cams: &[usize]) -> Vec<AnchorDiagnostics> {
    let n = dist.rows();
    (0..n)
        .map(|a| {
            let mut diag = AnchorDiagnostics::default();
            let row = dist.row(a);
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = row[j];
                if ids[j] == ids[a] {
                    keep_max(&mut diag.positive, j, d);
                } else {
                    keep_min(&mut diag.any_negative, j, d);
                    if cams[j] == cams[a] {
                        keep_min(&mut diag.same_negative, j, d);
                    } else {
                        keep_min(&mut diag.other_negative, j, d);
                    }
                }
            }
            diag
        })
        .collect()
}

/// Adds `coef * d D(i, j) / d emb` into `grad`.
fn add_dist_grad(grad: &mut Matrix, emb: &Matrix, i: usize, j: usize, coef: f64) {
    let denom = smoothed_dist(sq_dist(emb.row(i), emb.row(j))) + DIST_EPS.sqrt();
    let scale = coef / denom;
    for c in 0..emb.cols() {
        let g = scale * (emb[(i, c)] - emb[(j, c)]);
        grad[(i, c)] += g;
        grad[(j, c)] -= g;
    }
}

fn require(slot: Option<Mined>, anchor: usize, what: &str) -> Result<Mined> {
    slot.ok_or_else(|| Error::Structural {
        anchor,
        msg: format!("no {what} in batch"),
    })
}

fn check_shapes(emb: &Matrix, ids: &[usize], cams: &[usize]) -> Result<()> {
    if ids.len() != emb.rows() || cams.len() != emb.rows() {
        return Err(Error::Shape(format!(
            "{} embeddings, {} identities, {} cameras",
            emb.rows(),
            ids.len(),
            cams.len()
        )));
    }
    if !emb.is_finite() {
        return Err(Error::Data("non-finite embedding".into()));
    }
    Ok(())
}

/// Evaluates the loss selected by `cfg.kind`.
pub fn batch_hard_loss(
    emb: &Matrix,
    ids: &[usize],
    cams: &[usize],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_shapes(emb, ids, cams)?;
    let dist = pairwise_distances(emb);
    let mut anchors = mine(&dist, ids, cams);
    let mut grad = Matrix::zeros(emb.rows(), emb.cols());
    let mut value = 0.0;

    for (a, diag) in anchors.iter_mut().enumerate() {
        let pos = require(diag.positive, a, "positive")?;
        match cfg.kind {
            LossKind::Mcnl => {
                let other = require(diag.other_negative, a, "other-camera negative")?;
                let same = require(diag.same_negative, a, "same-camera negative")?;
                let z1 = cfg.m1 + pos.dist - other.dist;
                if z1 > 0.0 {
                    value += z1;
                    diag.active_hinges += 1;
                    add_dist_grad(&mut grad, emb, a, pos.index, 1.0);
                    add_dist_grad(&mut grad, emb, a, other.index, -1.0);
                }
                let z2 = cfg.m2 + other.dist - same.dist;
                if z2 > 0.0 {
                    value += z2;
                    diag.active_hinges += 1;
                    add_dist_grad(&mut grad, emb, a, other.index, 1.0);
                    add_dist_grad(&mut grad, emb, a, same.index, -1.0);
                }
            }
            kind => {
                let neg = match kind {
                    LossKind::Triplet => require(diag.any_negative, a, "negative")?,
                    LossKind::TripletSame => {
                        require(diag.same_negative, a, "same-camera negative")?
                    }
                    _ => require(diag.other_negative, a, "other-camera negative")?,
                };
                let z = cfg.triplet_margin + pos.dist - neg.dist;
                if z > 0.0 {
                    value += z;
                    diag.active_hinges += 1;
                    add_dist_grad(&mut grad, emb, a, pos.index, 1.0);
                    add_dist_grad(&mut grad, emb, a, neg.index, -1.0);
                }
            }
        }
    }
    Ok(LossOutput {
        value,
        grad,
        anchors,
    })
}

pub fn mcnl(emb: &Matrix, ids: &[usize], cams: &[usize], m1: f64, m2: f64) -> Result<LossOutput> {
    let cfg = LossConfig {
        kind: LossKind::Mcnl,
        m1,
        m2,
        ..LossConfig::default()
    };
    batch_hard_loss(emb, ids, cams, &cfg)
}

fn triplet_kind(
    kind: LossKind,
    emb: &Matrix,
    ids: &[usize],
    cams: &[usize],
    margin: f64,
) -> Result<LossOutput> {
    let cfg = LossConfig {
        kind,
        triplet_margin: margin,
        ..LossConfig::default()
    };
    batch_hard_loss(emb, ids, cams, &cfg)
}

/// Batch-hard triplet loss with unrestricted negatives.
pub fn triplet(emb: &Matrix, ids: &[usize], cams: &[usize], margin: f64) -> Result<LossOutput> {
    triplet_kind(LossKind::Triplet, emb, ids, cams, margin)
}

/// Triplet loss with the hardest negative restricted to the anchor's camera.
pub fn triplet_same(
    emb: &Matrix,
    ids: &[usize],
    cams: &[usize],
    margin: f64,
) -> Result<LossOutput> {
    triplet_kind(LossKind::TripletSame, emb, ids, cams, margin)
}

/// Triplet loss with the hardest negative restricted to other cameras.
pub fn triplet_other(
    emb: &Matrix,
    ids: &[usize],
    cams: &[usize],
    margin: f64,
) -> Result<LossOutput> {
    triplet_kind(LossKind::TripletOther, emb, ids, cams, margin)
}
