//! Tabular classification data: synthetic generation, holdout splitting and
//! comma-separated ingestion.
//!
//! Reads of test-tagged rows are counted so callers can assert that search
//! and selection never touch them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use cellnas_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitTag {
    type Err = NasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(NasError::Data(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Debug)]
pub struct Dataset {
    dims: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    tags: Vec<SplitTag>,
    test_reads: AtomicU64,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            dims: self.dims,
            classes: self.classes,
            features: self.features.clone(),
            labels: self.labels.clone(),
            tags: self.tags.clone(),
            test_reads: AtomicU64::new(self.test_reads()),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.classes == other.classes
            && self.features == other.features
            && self.labels == other.labels
            && self.tags == other.tags
    }
}

impl Dataset {
    pub fn new(dims: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>, tags: Vec<SplitTag>) -> Result<Self> {
        if labels.is_empty() {
            return Err(NasError::Data("dataset has no rows".into()));
        }
        if dims == 0 || features.len() != labels.len() * dims {
            return Err(NasError::Data(format!(
                "{} feature values for {} rows of {dims} dims",
                features.len(),
                labels.len()
            )));
        }
        if tags.len() != labels.len() {
            return Err(NasError::Data(format!("{} split tags for {} rows", tags.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(NasError::Data(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self {
            dims,
            classes,
            features,
            labels,
            tags,
            test_reads: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn tag(&self, row: usize) -> SplitTag {
        self.tags[row]
    }

    /// Indices of rows carrying `tag`. Reads no feature data.
    pub fn rows(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == tag).collect()
    }

    pub fn count(&self, tag: SplitTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    /// Number of test-row reads served so far.
    pub fn test_reads(&self) -> u64 {
        self.test_reads.load(Ordering::Relaxed)
    }

    fn note_reads(&self, rows: &[usize]) {
        let n = rows.iter().filter(|&&r| self.tags[r] == SplitTag::Test).count() as u64;
        if n > 0 {
            self.test_reads.fetch_add(n, Ordering::Relaxed);
        }
    }

    /// Features and label of one row.
    pub fn row(&self, i: usize) -> (&[f64], usize) {
        self.note_reads(&[i]);
        (&self.features[i * self.dims..(i + 1) * self.dims], self.labels[i])
    }

    /// `(rows.len(), dims)` feature matrix plus labels.
    pub fn gather(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        self.note_reads(rows);
        let mut data = Vec::with_capacity(rows.len() * self.dims);
        for &r in rows {
            data.extend_from_slice(&self.features[r * self.dims..(r + 1) * self.dims]);
        }
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        (
            Tensor::matrix(rows.len(), self.dims, data).expect("non-empty gather"),
            labels,
        )
    }

    pub fn with_tags(&self, tags: Vec<SplitTag>) -> Result<Dataset> {
        Dataset::new(self.dims, self.classes, self.features.clone(), self.labels.clone(), tags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub dims: usize,
    pub classes: usize,
    /// Gaussian clusters per class; more than one makes the classes
    /// non-convex once noise is added.
    pub clusters_per_class: usize,
    /// Standard deviation of cluster centres.
    pub separation: f64,
    /// Standard deviation of points around their centre.
    pub noise: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            dims: 8,
            classes: 2,
            clusters_per_class: 6,
            separation: 0.8,
            noise: 0.4,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Gaussian-cluster classification data with balanced classes.
///
/// Rows are tagged `test` (a `test_fraction` share) or `train`; use
/// [`holdout_split`] to carve a validation set from the training rows.
pub fn make_synthetic_classification(config: &SyntheticConfig) -> Result<Dataset> {
    let c = config;
    if c.classes < 2 || c.samples < c.classes {
        return Err(NasError::Data(format!(
            "need samples >= classes >= 2, got {} samples and {} classes",
            c.samples, c.classes
        )));
    }
    if c.dims == 0 || c.clusters_per_class == 0 {
        return Err(NasError::Data("dims and clusters_per_class must be positive".into()));
    }
    if !(0.0..1.0).contains(&c.test_fraction) || !(c.noise >= 0.0) || !(c.separation > 0.0) {
        return Err(NasError::Data(
            "test_fraction must be in [0, 1), noise >= 0 and separation > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let centres: Vec<Vec<f64>> = (0..c.classes * c.clusters_per_class)
        .map(|_| {
            (0..c.dims)
                .map(|_| c.separation * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..c.samples).map(|i| i % c.classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(c.samples * c.dims);
    for &label in &labels {
        let cluster = rng.random_range(0..c.clusters_per_class);
        let centre = &centres[label * c.clusters_per_class + cluster];
        for &mu in centre {
            features.push(mu + c.noise * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let n_test = (c.samples as f64 * c.test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..c.samples).collect();
    order.shuffle(&mut rng);
    let mut tags = vec![SplitTag::Train; c.samples];
    for &i in &order[..n_test] {
        tags[i] = SplitTag::Test;
    }
    Dataset::new(c.dims, c.classes, features, labels, tags)
}

/// Moves a `fraction` share of the training rows (seeded shuffle) into the
/// validation split. Test rows are left alone.
pub fn holdout_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(NasError::Data(format!("holdout fraction must be in (0, 1), got {fraction}")));
    }
    let mut train = dataset.rows(SplitTag::Train);
    let n_val = (train.len() as f64 * fraction).round() as usize;
    if n_val == 0 || n_val == train.len() {
        return Err(NasError::Data(format!(
            "holdout of {fraction} over {} training rows leaves an empty side",
            train.len()
        )));
    }
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tags = dataset.tags.clone();
    for &i in &train[..n_val] {
        tags[i] = SplitTag::Val;
    }
    dataset.with_tags(tags)
}

/// Expected layout of a delimited file: comma separated, header row, a
/// `label` column, an optional `split` column (`train`/`val`/`test`), all
/// other columns numeric features.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DelimitedSchema {
    /// Required feature count, if known.
    pub dims: Option<usize>,
    /// Class count; inferred as `max label + 1` when absent.
    pub classes: Option<usize>,
}

pub fn load_delimited(path: &Path, schema: &DelimitedSchema) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| NasError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => NasError::io(path, io),
            other => NasError::Data(format!("{}: {other:?}", path.display())),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(NasError::Data(format!("{}: empty file", path.display())));
    }
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| parse_err(1, "no `label` column in header".into()))?;
    let split_col = headers.iter().position(|h| h == "split");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != label_col && Some(i) != split_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(parse_err(1, "no feature columns".into()));
    }
    if let Some(d) = schema.dims {
        if d != feature_cols.len() {
            return Err(parse_err(1, format!("expected {d} feature columns, header has {}", feature_cols.len())));
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut tags = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(parse_err(
                line,
                format!("expected {} columns, got {}", headers.len(), record.len()),
            ));
        }
        for &c in &feature_cols {
            let v: f64 = record[c]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric feature `{}` in column `{}`", &record[c], &headers[c])))?;
            features.push(v);
        }
        let label: usize = record[label_col]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad label `{}`", &record[label_col])))?;
        labels.push(label);
        tags.push(match split_col {
            Some(s) => record[s].trim().parse().map_err(|e: NasError| parse_err(line, e.to_string()))?,
            None => SplitTag::Train,
        });
    }
    if labels.is_empty() {
        return Err(NasError::Data(format!("{}: no data rows", path.display())));
    }
    let classes = schema
        .classes
        .unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) + 1);
    Dataset::new(feature_cols.len(), classes, features, labels, tags)
}

/// Writes every row, test rows included, in the [`load_delimited`] layout.
pub fn write_delimited(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = String::new();
    for d in 0..dataset.dims {
        out.push_str(&format!("f{d},"));
    }
    out.push_str("label,split\n");
    for i in 0..dataset.len() {
        let feats = &dataset.features[i * dataset.dims..(i + 1) * dataset.dims];
        for v in feats {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{},{}\n", dataset.labels[i], dataset.tags[i]));
    }
    std::fs::write(path, out).map_err(|e| NasError::io(path, e))
}
