//! In-memory labeled datasets, manifest I/O, the camera-per-person statistic,
//! single-camera-training (SCT) splits and outlier injection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{sidecar_path, write_atomic};
use crate::linalg::Matrix;

/// One sample: raw input vector, identity label and camera label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub input: Vec<f64>,
    pub identity: usize,
    pub camera: usize,
}

/// Original (pre-remap) names of dense labels, kept for traceability.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    #[serde(default)]
    pub identity: BTreeMap<usize, String>,
    #[serde(default)]
    pub camera: BTreeMap<usize, String>,
}

impl LabelMap {
    pub fn is_empty(&self) -> bool {
        self.identity.is_empty() && self.camera.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    d_in: usize,
    n_cameras: usize,
    camera_sets: BTreeMap<usize, BTreeSet<usize>>,
    labels: LabelMap,
}

impl Dataset {
    /// Validates the examples and builds the per-identity camera index.
    pub fn new(d_in: usize, n_cameras: usize, examples: Vec<LabeledExample>) -> Result<Self> {
        let mut camera_sets: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (i, ex) in examples.iter().enumerate() {
            if ex.input.len() != d_in {
                return Err(Error::Data(format!(
                    "example {i} has {} inputs, expected {d_in}",
                    ex.input.len()
                )));
            }
            if ex.input.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("example {i} has a non-finite input")));
            }
            if ex.camera >= n_cameras {
                return Err(Error::Data(format!(
                    "example {i} has camera {} but n_cameras = {n_cameras}",
                    ex.camera
                )));
            }
            camera_sets
                .entry(ex.identity)
                .or_default()
                .insert(ex.camera);
        }
        Ok(Self {
            examples,
            d_in,
            n_cameras,
            camera_sets,
            labels: LabelMap::default(),
        })
    }

    pub fn with_labels(mut self, labels: LabelMap) -> Self {
        self.labels = labels;
        self
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn n_cameras(&self) -> usize {
        self.n_cameras
    }

    pub fn n_identities(&self) -> usize {
        self.camera_sets.len()
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    /// Identity -> set of cameras the identity appears in.
    pub fn camera_sets(&self) -> &BTreeMap<usize, BTreeSet<usize>> {
        &self.camera_sets
    }

    pub fn identities(&self) -> impl Iterator<Item = usize> + '_ {
        self.camera_sets.keys().copied()
    }

    pub fn max_identity(&self) -> Option<usize> {
        self.camera_sets.keys().next_back().copied()
    }

    /// True when every identity is seen by exactly one camera.
    pub fn is_sct(&self) -> bool {
        self.camera_sets.values().all(|s| s.len() == 1)
    }

    pub fn inputs(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.len() * self.d_in);
        for ex in &self.examples {
            data.extend_from_slice(&ex.input);
        }
        Matrix::from_vec(self.len(), self.d_in, data).expect("validated on construction")
    }

    pub fn identity_labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.identity).collect()
    }

    pub fn camera_labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.camera).collect()
    }

    /// Concatenates two datasets sharing input width; camera count is the max of both.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.d_in != other.d_in {
            return Err(Error::Shape(format!(
                "cannot concatenate d_in {} with d_in {}",
                self.d_in, other.d_in
            )));
        }
        let mut examples = self.examples.clone();
        examples.extend_from_slice(&other.examples);
        Dataset::new(self.d_in, self.n_cameras.max(other.n_cameras), examples)
    }

    /// Writes the CSV manifest and its JSON sidecar.
    pub fn save_manifest(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.manifest_bytes()?)?;
        let sidecar = Sidecar {
            n_cameras: self.n_cameras,
            n_identities: self.n_identities(),
            d_in: self.d_in,
            label_map: self.labels.clone(),
        };
        let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Serde(e.to_string()))?;
        write_atomic(&sidecar_path(path), &json)
    }

    pub fn manifest_bytes(&self) -> Result<Vec<u8>> {
        self.labeled_csv_bytes('f')
    }

    /// `id,camera,{prefix}0,...` CSV of the examples.
    pub(crate) fn labeled_csv_bytes(&self, prefix: char) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec!["id".to_string(), "camera".to_string()];
        header.extend((0..self.d_in).map(|j| format!("{prefix}{j}")));
        w.write_record(&header).map_err(csv_err)?;
        let mut row: Vec<String> = Vec::with_capacity(self.d_in + 2);
        for ex in &self.examples {
            row.clear();
            row.push(ex.identity.to_string());
            row.push(ex.camera.to_string());
            // Display for f64 prints the shortest representation that parses back exactly
            row.extend(ex.input.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Serde(e.to_string()))
    }

    /// Reads a manifest (and its sidecar, when present).
    ///
    /// Integer labels are kept verbatim. If any label in a column is not a
    /// non-negative integer, that column is remapped densely in order of first
    /// appearance and the original names are recorded in the label map.
    pub fn load_manifest(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sidecar_file = sidecar_path(path);
        let sidecar: Option<Sidecar> = if sidecar_file.exists() {
            let raw =
                std::fs::read_to_string(&sidecar_file).map_err(|e| Error::io(&sidecar_file, e))?;
            Some(serde_json::from_str(&raw).map_err(|e| Error::Parse {
                path: sidecar_file.clone(),
                line: e.line(),
                msg: e.to_string(),
            })?)
        } else {
            None
        };
        parse_labeled_csv(path, &text, sidecar, 'f')
    }

    /// Reads an `id,camera,e0,...` feature CSV as a dataset of embeddings.
    pub fn load_features(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_labeled_csv(path, &text, None, 'e')
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    n_cameras: usize,
    n_identities: usize,
    d_in: usize,
    #[serde(default)]
    label_map: LabelMap,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

fn parse_labeled_csv(
    path: &Path,
    text: &str,
    sidecar: Option<Sidecar>,
    prefix: char,
) -> Result<Dataset> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| perr(1, e.to_string()))?
        .clone();
    if header.len() < 2 || &header[0] != "id" || &header[1] != "camera" {
        return Err(perr(1, "header must start with `id,camera`".into()));
    }
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("{prefix}{j}") {
            return Err(perr(
                1,
                format!("expected column `{prefix}{j}`, found `{name}`"),
            ));
        }
    }
    let d_in = header.len() - 2;
    if let Some(sc) = &sidecar {
        if sc.d_in != d_in {
            return Err(perr(
                1,
                format!(
                    "header has {d_in} features but sidecar says d_in = {}",
                    sc.d_in
                ),
            ));
        }
    }

    let mut raw: Vec<(usize, String, String, Vec<f64>)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            perr(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != d_in + 2 {
            return Err(perr(
                line,
                format!("expected {} columns, found {}", d_in + 2, rec.len()),
            ));
        }
        let mut input = Vec::with_capacity(d_in);
        for (j, field) in rec.iter().skip(2).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                perr(
                    line,
                    format!("column {prefix}{j}: `{field}` is not a number"),
                )
            })?;
            if !v.is_finite() {
                return Err(perr(line, format!("column {prefix}{j}: non-finite value")));
            }
            input.push(v);
        }
        raw.push((
            line,
            rec[0].trim().to_string(),
            rec[1].trim().to_string(),
            input,
        ));
    }

    let ids = LabelColumn::build(raw.iter().map(|r| r.1.as_str()));
    let cams = LabelColumn::build(raw.iter().map(|r| r.2.as_str()));
    let n_cameras = match &sidecar {
        Some(sc) => sc.n_cameras,
        None => raw.iter().map(|r| cams.get(&r.2) + 1).max().unwrap_or(0),
    };

    let mut examples = Vec::with_capacity(raw.len());
    for (line, id, cam, input) in raw {
        let camera = cams.get(&cam);
        if camera >= n_cameras {
            return Err(perr(
                line,
                format!("unknown camera index {camera} (n_cameras = {n_cameras})"),
            ));
        }
        examples.push(LabeledExample {
            input,
            identity: ids.get(&id),
            camera,
        });
    }

    let mut labels = sidecar.map(|s| s.label_map).unwrap_or_default();
    if let LabelColumn::Remapped(m) = ids {
        labels.identity = m.into_iter().map(|(k, v)| (v, k)).collect();
    }
    if let LabelColumn::Remapped(m) = cams {
        labels.camera = m.into_iter().map(|(k, v)| (v, k)).collect();
    }
    Ok(Dataset::new(d_in, n_cameras, examples)?.with_labels(labels))
}

enum LabelColumn {
    Numeric,
    Remapped(HashMap<String, usize>),
}

impl LabelColumn {
    fn build<'a>(values: impl Iterator<Item = &'a str> + Clone) -> Self {
        if values.clone().all(|v| v.parse::<usize>().is_ok()) {
            return LabelColumn::Numeric;
        }
        let mut map = HashMap::new();
        for v in values {
            let next = map.len();
            map.entry(v.to_string()).or_insert(next);
        }
        LabelColumn::Remapped(map)
    }

    fn get(&self, v: &str) -> usize {
        match self {
            LabelColumn::Numeric => v.parse().expect("checked numeric"),
            LabelColumn::Remapped(m) => m[v],
        }
    }
}

/// Mean number of distinct cameras per identity.
pub fn cp_value(d: &Dataset) -> Result<f64> {
    if d.n_identities() == 0 {
        return Err(Error::EmptyDataset);
    }
    let total: usize = d.camera_sets.values().map(BTreeSet::len).sum();
    Ok(total as f64 / d.n_identities() as f64)
}

/// Keeps, for every identity, only the images of one camera chosen uniformly
/// at random from the cameras it appears in.
pub fn sct_split(d: &Dataset, seed: u64) -> Result<Dataset> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: HashMap<usize, usize> = d
        .camera_sets
        .iter()
        .map(|(&id, cams)| {
            let pick = rng.random_range(0..cams.len());
            (id, *cams.iter().nth(pick).expect("in range"))
        })
        .collect();
    let examples = d
        .examples
        .iter()
        .filter(|e| chosen[&e.identity] == e.camera)
        .cloned()
        .collect();
    Ok(Dataset::new(d.d_in, d.n_cameras, examples)?.with_labels(d.labels.clone()))
}

/// How restored cross-camera images of an outlier identity are labeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMode {
    /// One identity label across all cameras (accurate annotation).
    GroundTruth,
    /// A fresh label per (identity, camera) pair, as an SCT annotator would assign.
    SctRelabel,
}

impl OutlierMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OutlierMode::GroundTruth => "ground_truth",
            OutlierMode::SctRelabel => "sct_relabel",
        }
    }
}

impl std::str::FromStr for OutlierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" => Ok(OutlierMode::GroundTruth),
            "sct_relabel" => Ok(OutlierMode::SctRelabel),
            other => Err(Error::Config(format!("unknown outlier mode `{other}`"))),
        }
    }
}

/// `round(fraction * n)` with halves rounded up.
pub fn outlier_count(fraction: f64, n_identities: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "outlier fraction {fraction} outside [0, 1]"
        )));
    }
    Ok((fraction * n_identities as f64 + 0.5).floor() as usize)
}

/// Restores the cross-camera images of `round(fraction * n_identities)`
/// randomly chosen identities of `sct` from `full`.
pub fn inject_outliers(
    sct: &Dataset,
    full: &Dataset,
    fraction: f64,
    mode: OutlierMode,
    seed: u64,
) -> Result<Dataset> {
    let count = outlier_count(fraction, sct.n_identities())?;
    inject_outlier_count(sct, full, count, mode, seed)
}

/// As [`inject_outliers`] with an absolute number of identities.
pub fn inject_outlier_count(
    sct: &Dataset,
    full: &Dataset,
    count: usize,
    mode: OutlierMode,
    seed: u64,
) -> Result<Dataset> {
    if !sct.is_sct() {
        return Err(Error::Data("outlier injection needs an SCT dataset".into()));
    }
    if sct.d_in != full.d_in {
        return Err(Error::Shape(format!(
            "sct d_in {} != full d_in {}",
            sct.d_in, full.d_in
        )));
    }
    for (id, cams) in &sct.camera_sets {
        match full.camera_sets.get(id) {
            Some(full_cams) if cams.is_subset(full_cams) => {}
            _ => {
                return Err(Error::Data(format!(
                    "identity {id} of the SCT split is not present in the full dataset"
                )))
            }
        }
    }
    let ids: Vec<usize> = sct.identities().collect();
    if count > ids.len() {
        return Err(Error::Config(format!(
            "cannot select {count} outliers from {} identities",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected: Vec<usize> = index::sample(&mut rng, ids.len(), count)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    selected.sort_unstable();

    let mut next_label = sct
        .max_identity()
        .max(full.max_identity())
        .map_or(0, |m| m + 1);
    let mut fresh: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    if mode == OutlierMode::SctRelabel {
        for &id in &selected {
            let home = &sct.camera_sets[&id];
            for &cam in full.camera_sets[&id].difference(home) {
                fresh.insert((id, cam), next_label);
                next_label += 1;
            }
        }
    }

    let selected_set: BTreeSet<usize> = selected.iter().copied().collect();
    let mut examples = sct.examples.clone();
    for ex in &full.examples {
        if !selected_set.contains(&ex.identity)
            || sct.camera_sets[&ex.identity].contains(&ex.camera)
        {
            continue;
        }
        let mut restored = ex.clone();
        if mode == OutlierMode::SctRelabel {
            restored.identity = fresh[&(ex.identity, ex.camera)];
        }
        examples.push(restored);
    }
    Dataset::new(sct.d_in, sct.n_cameras.max(full.n_cameras), examples)
}
