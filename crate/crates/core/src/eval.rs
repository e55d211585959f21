//! Retrieval and camera-separability statistics.
//!
//! * [`cmc_map`]: CMC curve and mAP under the cross-camera protocol, where
//!   gallery entries sharing both identity and camera with the query are junk.
//! * [`pseudo_f`]: Calinski-Harabasz ratio with cameras as clusters. Lower
//!   values mean features carry less camera information.
//! * [`xcam_nn_prob`]: fraction of anchors whose nearest different-identity
//!   neighbour sits in another camera.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{Dataset, LabeledExample};
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::linalg::{sq_dist, Matrix};

/// Embeddings with their identity and camera labels.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub emb: &'a Matrix,
    pub ids: &'a [usize],
    pub cams: &'a [usize],
}

impl<'a> Labeled<'a> {
    pub fn new(emb: &'a Matrix, ids: &'a [usize], cams: &'a [usize]) -> Result<Self> {
        if ids.len() != emb.rows() || cams.len() != emb.rows() {
            return Err(Error::Shape(format!(
                "{} rows, {} identities, {} cameras",
                emb.rows(),
                ids.len(),
                cams.len()
            )));
        }
        Ok(Self { emb, ids, cams })
    }

    fn len(&self) -> usize {
        self.emb.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmcMap {
    /// `cmc[k - 1]` = fraction of evaluated queries with a relevant entry in the top `k`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub n_queries: usize,
    /// Queries without any valid relevant gallery entry; left out of both statistics.
    pub n_dropped: usize,
}

impl CmcMap {
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.get(k.saturating_sub(1)) {
            Some(&v) => v,
            None => self.cmc.last().copied().unwrap_or(0.0),
        }
    }
}

/// Per-query result: 0-based position of the first hit and the average precision.
fn rank_query(q: usize, query: &Labeled, gallery: &Labeled) -> Option<(usize, f64)> {
    let qrow = query.emb.row(q);
    let (qid, qcam) = (query.ids[q], query.cams[q]);
    let mut ranked: Vec<(f64, usize)> = (0..gallery.len())
        .filter(|&g| !(gallery.ids[g] == qid && gallery.cams[g] == qcam))
        .map(|g| (sq_dist(qrow, gallery.emb.row(g)), g))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = None;
    for (pos, &(_, g)) in ranked.iter().enumerate() {
        if gallery.ids[g] == qid {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first.get_or_insert(pos);
        }
    }
    first.map(|f| (f, precision_sum / hits as f64))
}

/// CMC up to `max_rank` and mAP. Rankings use Euclidean distance with ties
/// broken by gallery index.
pub fn cmc_map(query: &Labeled, gallery: &Labeled, max_rank: usize) -> Result<CmcMap> {
    if query.emb.cols() != gallery.emb.cols() {
        return Err(Error::Shape(format!(
            "query width {} vs gallery width {}",
            query.emb.cols(),
            gallery.emb.cols()
        )));
    }
    let per_query: Vec<Option<(usize, f64)>> = (0..query.len())
        .into_par_iter()
        .map(|q| rank_query(q, query, gallery))
        .collect();
    let valid: Vec<(usize, f64)> = per_query.iter().flatten().copied().collect();
    let n_dropped = per_query.len() - valid.len();
    if n_dropped > 0 {
        log::warn!(
            "{n_dropped} queries have no cross-camera match in the gallery and were skipped"
        );
    }
    let n = valid.len();
    let mut cmc = vec![0.0; max_rank.max(1)];
    if n > 0 {
        for &(first, _) in &valid {
            for c in cmc.iter_mut().skip(first) {
                *c += 1.0;
            }
        }
        cmc.iter_mut().for_each(|c| *c /= n as f64);
    }
    let map = if n > 0 {
        valid.iter().map(|v| v.1).sum::<f64>() / n as f64
    } else {
        0.0
    };
    Ok(CmcMap {
        cmc,
        map,
        n_queries: n,
        n_dropped,
    })
}

/// Calinski-Harabasz statistic with clusters given by `cams`:
/// `(SSB / (k - 1)) / (SSW / (n - k))`. Returns `+inf` when `SSW = 0`.
pub fn pseudo_f(features: &Matrix, cams: &[usize]) -> Result<f64> {
    if cams.len() != features.rows() {
        return Err(Error::Shape(format!(
            "{} features, {} camera labels",
            features.rows(),
            cams.len()
        )));
    }
    let dim = features.cols();
    let mut groups: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    for (row, &c) in features.iter_rows().zip(cams) {
        let (count, sum) = groups.entry(c).or_insert_with(|| (0, vec![0.0; dim]));
        *count += 1;
        sum.iter_mut().zip(row).for_each(|(s, x)| *s += x);
    }
    let k = groups.len();
    let n = features.rows();
    if k < 2 {
        return Err(Error::Data("pseudo-F needs at least two cameras".into()));
    }
    if n <= k {
        return Err(Error::Data(format!(
            "pseudo-F needs more than {k} features"
        )));
    }
    let mut grand = vec![0.0; dim];
    let means: BTreeMap<usize, Vec<f64>> = groups
        .iter()
        .map(|(&c, (count, sum))| {
            grand.iter_mut().zip(sum).for_each(|(g, s)| *g += s);
            (c, sum.iter().map(|s| s / *count as f64).collect())
        })
        .collect();
    grand.iter_mut().for_each(|g| *g /= n as f64);
    let ssb: f64 = groups
        .iter()
        .map(|(c, (count, _))| *count as f64 * sq_dist(&means[c], &grand))
        .sum();
    let ssw: f64 = features
        .iter_rows()
        .zip(cams)
        .map(|(row, c)| sq_dist(row, &means[c]))
        .sum();
    if ssw == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((ssb / (k - 1) as f64) / (ssw / (n - k) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XcamNn {
    pub prob: f64,
    pub n_anchors: usize,
    pub n_excluded: usize,
}

/// For every anchor with at least one different-identity entry, finds the
/// nearest such entry (ties to the lowest index) and reports how often it lies
/// in another camera.
pub fn xcam_nn_prob(data: &Labeled) -> Result<XcamNn> {
    let n = data.len();
    let per_anchor: Vec<Option<bool>> = (0..n)
        .into_par_iter()
        .map(|a| {
            let row = data.emb.row(a);
            let mut best: Option<(f64, usize)> = None;
            for j in (0..n).filter(|&j| data.ids[j] != data.ids[a]) {
                let d = sq_dist(row, data.emb.row(j));
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            best.map(|(_, j)| data.cams[j] != data.cams[a])
        })
        .collect();
    let used: Vec<bool> = per_anchor.iter().flatten().copied().collect();
    let n_excluded = n - used.len();
    if n_excluded > 0 {
        log::warn!("{n_excluded} anchors have no negative and were skipped");
    }
    if used.is_empty() {
        return Err(Error::Data("no anchor has a negative".into()));
    }
    Ok(XcamNn {
        prob: used.iter().filter(|&&x| x).count() as f64 / used.len() as f64,
        n_anchors: used.len(),
        n_excluded,
    })
}

fn serialize_pf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn deserialize_pf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Pf {
        Num(f64),
        Text(String),
    }
    match Pf::deserialize(d)? {
        Pf::Num(v) => Ok(v),
        Pf::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Pf::Text(t) => Err(serde::de::Error::custom(format!("bad pseudo_f `{t}`"))),
    }
}

/// Evaluation summary. `pseudo_f` is written as the string `"inf"` when
/// within-camera scatter vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    #[serde(serialize_with = "serialize_pf", deserialize_with = "deserialize_pf")]
    pub pseudo_f: f64,
    pub xcam_nn_prob: f64,
    pub n_queries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Subsample size for pseudo-F over test embeddings; `None` uses all of them.
    pub pseudo_f_sample: Option<usize>,
    pub sample_seed: u64,
}

fn labeled_parts(d: &Dataset, emb: Matrix) -> (Matrix, Vec<usize>, Vec<usize>) {
    (emb, d.identity_labels(), d.camera_labels())
}

/// Embeds the test sets and computes every statistic of [`EvalReport`].
/// Pseudo-F and the cross-camera probability use query and gallery together.
pub fn evaluate(
    embedder: &Embedder,
    query: &Dataset,
    gallery: &Dataset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let (qe, qi, qc) = labeled_parts(query, embedder.embed(&query.inputs())?);
    let (ge, gi, gc) = labeled_parts(gallery, embedder.embed(&gallery.inputs())?);
    let q = Labeled::new(&qe, &qi, &qc)?;
    let g = Labeled::new(&ge, &gi, &gc)?;
    let cm = cmc_map(&q, &g, 10)?;

    let all_rows: Vec<&[f64]> = qe.iter_rows().chain(ge.iter_rows()).collect();
    let all = Matrix::from_rows(all_rows, qe.cols())?;
    let ids: Vec<usize> = qi.iter().chain(&gi).copied().collect();
    let cams: Vec<usize> = qc.iter().chain(&gc).copied().collect();

    let pf = match cfg.pseudo_f_sample {
        Some(m) if m < all.rows() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
            let mut idx = index::sample(&mut rng, all.rows(), m).into_vec();
            idx.sort_unstable();
            let sub_cams: Vec<usize> = idx.iter().map(|&i| cams[i]).collect();
            pseudo_f(&all.select_rows(&idx), &sub_cams)?
        }
        _ => pseudo_f(&all, &cams)?,
    };
    let xcam = xcam_nn_prob(&Labeled::new(&all, &ids, &cams)?)?;
    Ok(EvalReport {
        rank1: cm.rank(1),
        rank5: cm.rank(5),
        rank10: cm.rank(10),
        map: cm.map,
        pseudo_f: pf,
        xcam_nn_prob: xcam.prob,
        n_queries: cm.n_queries,
    })
}

/// Cross-camera nearest-negative probability of a dataset's embeddings.
pub fn dataset_xcam_nn_prob(embedder: &Embedder, data: &Dataset) -> Result<f64> {
    let emb = embedder.embed(&data.inputs())?;
    let ids = data.identity_labels();
    let cams = data.camera_labels();
    Ok(xcam_nn_prob(&Labeled::new(&emb, &ids, &cams)?)?.prob)
}

/// Writes `id,camera,e0,...` rows of the dataset's embeddings.
pub fn export_features(embedder: &Embedder, data: &Dataset, path: &Path) -> Result<()> {
    let emb = embedder.embed(&data.inputs())?;
    let examples = data
        .examples()
        .iter()
        .zip(emb.iter_rows())
        .map(|(ex, row)| LabeledExample {
            input: row.to_vec(),
            identity: ex.identity,
            camera: ex.camera,
        })
        .collect();
    let features = Dataset::new(embedder.d_emb(), data.n_cameras(), examples)?;
    write_atomic(path, &features.labeled_csv_bytes('e')?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: Vec<f64>) -> Matrix {
        Matrix::from_vec(rows, cols, v).unwrap()
    }

    #[test]
    fn hand_ap_case() {
        // query at 0; gallery: relevant at 1.0, distractor at 2.0, relevant at 3.0
        let qe = m(1, 1, vec![0.0]);
        let ge = m(3, 1, vec![1.0, 2.0, 3.0]);
        let q = Labeled::new(&qe, &[7], &[0]).unwrap();
        let g = Labeled::new(&ge, &[7, 8, 7], &[1, 1, 2]).unwrap();
        let r = cmc_map(&q, &g, 3).unwrap();
        assert_eq!(r.map, (1.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(r.rank(1), 1.0);
    }

    #[test]
    fn relevant_last() {
        let qe = m(1, 1, vec![0.0]);
        let ge = m(4, 1, vec![4.0, 1.0, 2.0, 3.0]);
        let q = Labeled::new(&qe, &[1], &[0]).unwrap();
        let g = Labeled::new(&ge, &[1, 2, 3, 4], &[1, 0, 0, 1]).unwrap();
        let r = cmc_map(&q, &g, 4).unwrap();
        assert_eq!(r.rank(1), 0.0);
        assert_eq!(r.rank(4), 1.0);
        assert_eq!(r.map, 0.25);
    }

    #[test]
    fn junk_is_excluded_and_unmatched_queries_dropped() {
        let qe = m(2, 1, vec![0.0, 10.0]);
        let ge = m(3, 1, vec![0.0, 5.0, 10.0]);
        // gallery 0 shares id+camera with query 0 (junk); query 1 has no relevant entries
        let q = Labeled::new(&qe, &[1, 9], &[0, 0]).unwrap();
        let g = Labeled::new(&ge, &[1, 1, 2], &[0, 1, 0]).unwrap();
        let r = cmc_map(&q, &g, 2).unwrap();
        assert_eq!(r.n_queries, 1);
        assert_eq!(r.n_dropped, 1);
        assert_eq!(r.rank(1), 1.0);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn pseudo_f_hand_case() {
        let f = m(4, 1, vec![0.0, 0.1, 1.0, 1.1]);
        let pf = pseudo_f(&f, &[1, 1, 2, 2]).unwrap();
        assert!((pf - 200.0).abs() < 1e-9, "{pf}");
    }

    #[test]
    fn pseudo_f_equal_means_is_zero() {
        let f = m(4, 1, vec![-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(pseudo_f(&f, &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn pseudo_f_zero_within_is_inf() {
        let f = m(4, 1, vec![1.0, 1.0, 2.0, 2.0]);
        assert_eq!(pseudo_f(&f, &[0, 0, 1, 1]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn pseudo_f_single_camera_errors() {
        let f = m(3, 1, vec![1.0, 2.0, 3.0]);
        assert!(pseudo_f(&f, &[0, 0, 0]).is_err());
    }

    #[test]
    fn pseudo_f_scale_invariant() {
        let f = m(
            6,
            2,
            vec![
                0.1, 0.3, -0.2, 0.5, 1.0, 1.2, 0.8, 0.9, 2.0, -1.0, 1.5, -0.7,
            ],
        );
        let cams = [0, 0, 1, 1, 2, 2];
        let mut g = f.clone();
        g.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = -3.5 * *v + 0.0);
        let a = pseudo_f(&f, &cams).unwrap();
        let b = pseudo_f(&g, &cams).unwrap();
        assert!((a - b).abs() < 1e-9 * a);
    }

    #[test]
    fn xcam_one_id_per_camera_is_one() {
        let e = m(6, 1, vec![0.0, 0.1, 5.0, 5.1, -3.0, 2.0]);
        let d = Labeled::new(&e, &[0, 0, 1, 1, 2, 2], &[0, 0, 1, 1, 2, 2]).unwrap();
        assert_eq!(xcam_nn_prob(&d).unwrap().prob, 1.0);
        let lonely = Labeled::new(&e, &[0; 6], &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!(xcam_nn_prob(&lonely).is_err());
    }

    #[test]
    fn xcam_same_camera_nearer_is_zero() {
        let e = m(4, 1, vec![0.0, 0.1, 10.0, 10.1]);
        let d = Labeled::new(&e, &[0, 1, 2, 3], &[0, 0, 1, 1]).unwrap();
        let r = xcam_nn_prob(&d).unwrap();
        assert_eq!(r.prob, 0.0);
        assert_eq!(r.n_anchors, 4);
    }

    #[test]
    fn report_json_field_names() {
        let r = EvalReport {
            rank1: 0.5,
            rank5: 0.75,
            rank10: 1.0,
            map: 0.4,
            pseudo_f: f64::INFINITY,
            xcam_nn_prob: 0.9,
            n_queries: 3,
        };
        let j = serde_json::to_value(r).unwrap();
        for key in [
            "rank1",
            "rank5",
            "rank10",
            "map",
            "pseudo_f",
            "xcam_nn_prob",
            "n_queries",
        ] {
            assert!(j.get(key).is_some(), "{key}");
        }
        assert_eq!(j["pseudo_f"], "inf");
        let back: EvalReport = serde_json::from_value(j).unwrap();
        assert_eq!(back, r);
    }
}
