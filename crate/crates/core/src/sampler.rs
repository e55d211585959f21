//! C x P x K mini-batches: `c` cameras, `p` identities per camera, `k` images
//! per identity.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub c: usize,
    pub p: usize,
    pub k: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { c: 8, p: 4, k: 8 }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        // every anchor needs a positive, a same-camera negative and an
        // other-camera negative
        if self.c < 2 || self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "batch spec ({}, {}, {}) needs c, p, k >= 2",
                self.c, self.p, self.k
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.c * self.p * self.k
    }

    /// Flat row of entry `(camera slot, identity slot, image slot)`.
    pub fn flat_index(&self, ci: usize, pi: usize, ki: usize) -> usize {
        ci * self.p * self.k + pi * self.k + ki
    }

    /// Batches per epoch: `ceil(n / batch_size)`.
    pub fn batches_per_epoch(&self, n_examples: usize) -> usize {
        n_examples.div_ceil(self.batch_size())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub spec: BatchSpec,
    pub inputs: Matrix,
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
    /// Dataset row of each batch entry.
    pub source: Vec<usize>,
}

/// One sampling group: an identity's images inside one camera.
#[derive(Debug, Clone)]
struct Group {
    examples: Vec<usize>,
}

/// Seeded C x P x K sampler over a fixed dataset.
#[derive(Debug, Clone)]
pub struct CameraBatchSampler<'a> {
    data: &'a Dataset,
    spec: BatchSpec,
    cameras: Vec<Vec<Group>>,
    rng: ChaCha8Rng,
}

impl<'a> CameraBatchSampler<'a> {
    /// Requires an SCT dataset with at least `spec.c` non-empty cameras.
    pub fn new(data: &'a Dataset, spec: BatchSpec, seed: u64) -> Result<Self> {
        if !data.is_sct() {
            return Err(Error::Data(
                "camera batch sampling needs an SCT dataset (every identity in one camera); \
                 use identity-major sampling for cross-camera data"
                    .into(),
            ));
        }
        Self::build(data, spec, seed)
    }

    /// Like [`CameraBatchSampler::new`] but groups images per (camera, identity)
    /// so identities seen by several cameras are accepted. Such an identity may
    /// then be drawn under more than one camera in a batch.
    pub fn new_cross_camera(data: &'a Dataset, spec: BatchSpec, seed: u64) -> Result<Self> {
        Self::build(data, spec, seed)
    }

    fn build(data: &'a Dataset, spec: BatchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut by_cam: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
        for (i, ex) in data.examples().iter().enumerate() {
            by_cam
                .entry(ex.camera)
                .or_default()
                .entry(ex.identity)
                .or_default()
                .push(i);
        }
        let cameras: Vec<Vec<Group>> = by_cam
            .into_values()
            .map(|ids| {
                ids.into_values()
                    .map(|examples| Group { examples })
                    .collect()
            })
            .collect();
        if cameras.len() < spec.c {
            return Err(Error::Data(format!(
                "dataset has {} non-empty cameras, batch spec needs {}",
                cameras.len(),
                spec.c
            )));
        }
        Ok(Self {
            data,
            spec,
            cameras,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn spec(&self) -> BatchSpec {
        self.spec
    }

    /// `count` distinct picks from `0..n` if possible, otherwise `count` picks with replacement.
    fn draw(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
        if n >= count {
            index::sample(rng, n, count).into_vec()
        } else {
            (0..count).map(|_| rng.random_range(0..n)).collect()
        }
    }

    pub fn sample_batch(&mut self) -> Batch {
        let BatchSpec { c, p, k } = self.spec;
        let mut source = Vec::with_capacity(self.spec.batch_size());
        let cams = index::sample(&mut self.rng, self.cameras.len(), c).into_vec();
        for &cam in &cams {
            let groups = &self.cameras[cam];
            for g in Self::draw(&mut self.rng, groups.len(), p) {
                let imgs = &groups[g].examples;
                for i in Self::draw(&mut self.rng, imgs.len(), k) {
                    source.push(imgs[i]);
                }
            }
        }
        let examples = self.data.examples();
        let inputs = Matrix::from_rows(
            source.iter().map(|&i| examples[i].input.as_slice()),
            self.data.d_in(),
        )
        .expect("dataset rows share d_in");
        Batch {
            spec: self.spec,
            inputs,
            identities: source.iter().map(|&i| examples[i].identity).collect(),
            cameras: source.iter().map(|&i| examples[i].camera).collect(),
            source,
        }
    }
}
