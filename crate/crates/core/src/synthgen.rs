//! Synthetic camera-biased data.
//!
//! Every input is a linear mix of an identity latent and a camera latent plus
//! isotropic noise:
//!
//! ```text
//! x = alpha_id * A u_id + alpha_cam * B v_cam + sigma * n
//! ```
//!
//! `A` and `B` have orthonormal columns spanning mutually orthogonal
//! subspaces, so `alpha_id` and `alpha_cam` set the energy of the identity
//! signal and of the camera shortcut independently. This linear model is a
//! stand-in for real camera bias; it is not derived from image statistics.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cameras: usize,
    pub ids_per_camera_train: usize,
    pub images_per_id: usize,
    pub n_test_ids: usize,
    pub test_cams_per_id: usize,
    /// Cameras each training identity appears in within the full (non-SCT)
    /// training pool used for outlier experiments. The SCT training set keeps
    /// only the first ("home") camera.
    pub full_cams_per_id: usize,
    pub d_in: usize,
    pub d_id: usize,
    pub d_cam: usize,
    pub alpha_id: f64,
    pub alpha_cam: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cameras: 8,
            ids_per_camera_train: 32,
            images_per_id: 8,
            n_test_ids: 40,
            test_cams_per_id: 4,
            full_cams_per_id: 2,
            d_in: 64,
            d_id: 16,
            d_cam: 8,
            alpha_id: 1.0,
            alpha_cam: 1.0,
            sigma: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_cameras", self.n_cameras),
            ("ids_per_camera_train", self.ids_per_camera_train),
            ("images_per_id", self.images_per_id),
            ("n_test_ids", self.n_test_ids),
            ("full_cams_per_id", self.full_cams_per_id),
            ("d_in", self.d_in),
            ("d_id", self.d_id),
            ("d_cam", self.d_cam),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("synth.{name} must be >= 1")));
            }
        }
        if self.d_id + self.d_cam > self.d_in {
            return Err(Error::Config(format!(
                "synth.d_id + synth.d_cam = {} exceeds synth.d_in = {}",
                self.d_id + self.d_cam,
                self.d_in
            )));
        }
        if self.test_cams_per_id < 2 {
            return Err(Error::Config("synth.test_cams_per_id must be >= 2".into()));
        }
        if self.test_cams_per_id > self.n_cameras || self.full_cams_per_id > self.n_cameras {
            return Err(Error::Config(
                "synth camera counts per identity cannot exceed synth.n_cameras".into(),
            ));
        }
        for (name, v) in [
            ("alpha_id", self.alpha_id),
            ("alpha_cam", self.alpha_cam),
            ("sigma", self.sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "synth.{name} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Output of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// SCT training set (CP = 1).
    pub train: Dataset,
    /// Training identities in all of their cameras; `train` is an SCT split of it.
    pub train_full: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

// Independent ChaCha streams keep, e.g., the SCT training set unchanged when
// only `full_cams_per_id` varies.
const STREAM_MIXING: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EXTRA: u64 = 2;
const STREAM_TEST: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Modified Gram-Schmidt on the columns of a `rows x cols` matrix.
pub(crate) fn orthonormal_columns(m: &Matrix) -> Result<Matrix> {
    let mut cols: Vec<Vec<f64>> = (0..m.cols())
        .map(|j| (0..m.rows()).map(|i| m[(i, j)]).collect())
        .collect();
    for j in 0..cols.len() {
        let (done, rest) = cols.split_at_mut(j);
        let v = &mut rest[0];
        for q in done.iter() {
            let r = dot(q, v);
            v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= r * qi);
        }
        let norm = dot(v, v).sqrt();
        if norm < 1e-10 {
            return Err(Error::Data("degenerate mixing matrix".into()));
        }
        v.iter_mut().for_each(|vi| *vi /= norm);
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

struct Mixer<'a> {
    cfg: &'a SynthConfig,
    basis: Matrix,
    cam_latents: Vec<Vec<f64>>,
}

impl Mixer<'_> {
    fn sample(&self, rng: &mut ChaCha8Rng, id_latent: &[f64], camera: usize) -> Vec<f64> {
        let cfg = self.cfg;
        let cam = &self.cam_latents[camera];
        let noise = normal_vec(rng, cfg.d_in);
        (0..cfg.d_in)
            .map(|i| {
                let row = self.basis.row(i);
                let id_part = dot(&row[..cfg.d_id], id_latent);
                let cam_part = dot(&row[cfg.d_id..], cam);
                cfg.alpha_id * id_part + cfg.alpha_cam * cam_part + cfg.sigma * noise[i]
            })
            .collect()
    }
}

/// Generates SCT train, full train, query and gallery sets. Deterministic in `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, STREAM_MIXING);
    let raw = Matrix::from_vec(
        cfg.d_in,
        cfg.d_id + cfg.d_cam,
        normal_vec(&mut rng, cfg.d_in * (cfg.d_id + cfg.d_cam)),
    )?;
    let basis = orthonormal_columns(&raw)?;
    let cam_latents = (0..cfg.n_cameras)
        .map(|_| normal_vec(&mut rng, cfg.d_cam))
        .collect();
    let mixer = Mixer {
        cfg,
        basis,
        cam_latents,
    };

    let mut train_rng = stream(cfg.seed, STREAM_TRAIN);
    let mut extra_rng = stream(cfg.seed, STREAM_EXTRA);
    let mut train = Vec::new();
    let mut extra = Vec::new();
    let n_train_ids = cfg.n_cameras * cfg.ids_per_camera_train;
    for id in 0..n_train_ids {
        let home = id / cfg.ids_per_camera_train;
        let latent = normal_vec(&mut train_rng, cfg.d_id);
        for _ in 0..cfg.images_per_id {
            train.push(LabeledExample {
                input: mixer.sample(&mut train_rng, &latent, home),
                identity: id,
                camera: home,
            });
        }
        let others = index::sample(&mut extra_rng, cfg.n_cameras - 1, cfg.full_cams_per_id - 1);
        let mut others: Vec<usize> = others
            .into_iter()
            .map(|c| if c >= home { c + 1 } else { c })
            .collect();
        others.sort_unstable();
        for cam in others {
            for _ in 0..cfg.images_per_id {
                extra.push(LabeledExample {
                    input: mixer.sample(&mut extra_rng, &latent, cam),
                    identity: id,
                    camera: cam,
                });
            }
        }
    }

    let mut test_rng = stream(cfg.seed, STREAM_TEST);
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for t in 0..cfg.n_test_ids {
        let id = n_train_ids + t;
        let latent = normal_vec(&mut test_rng, cfg.d_id);
        let mut cams = index::sample(&mut test_rng, cfg.n_cameras, cfg.test_cams_per_id).into_vec();
        cams.sort_unstable();
        for cam in cams {
            for k in 0..cfg.images_per_id {
                let ex = LabeledExample {
                    input: mixer.sample(&mut test_rng, &latent, cam),
                    identity: id,
                    camera: cam,
                };
                if k == 0 {
                    query.push(ex);
                } else {
                    gallery.push(ex);
                }
            }
        }
    }

    let mut full = train.clone();
    full.extend(extra);
    Ok(SyntheticData {
        train: Dataset::new(cfg.d_in, cfg.n_cameras, train)?,
        train_full: Dataset::new(cfg.d_in, cfg.n_cameras, full)?,
        query: Dataset::new(cfg.d_in, cfg.n_cameras, query)?,
        gallery: Dataset::new(cfg.d_in, cfg.n_cameras, gallery)?,
    })
}
