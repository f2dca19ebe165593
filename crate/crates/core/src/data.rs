//! Local datasets, synthetic data and client partitioning.

use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::rng::SeededRng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("feature buffer of {len} values is not a multiple of {num_features} features")]
    RaggedFeatures { len: usize, num_features: usize },
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("cannot split {examples} examples across {clients} clients")]
    TooFewExamples { examples: usize, clients: usize },
    #[error("class {class} has {available} examples left, non-iid share needs {needed}")]
    InsufficientClass {
        class: u32,
        needed: usize,
        available: usize,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv row {row}: {reason}")]
    CsvValue { row: usize, reason: String },
    #[error("csv header has no `label` column")]
    MissingLabelColumn,
}

/// Feature matrix (row-major, f64) with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    features: Vec<f64>,
    num_features: usize,
    labels: Vec<u32>,
    num_classes: usize,
}

impl LocalDataset {
    pub fn new(
        features: Vec<f64>,
        num_features: usize,
        labels: Vec<u32>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if num_features == 0 || !features.len().is_multiple_of(num_features) {
            return Err(DataError::RaggedFeatures {
                len: features.len(),
                num_features,
            });
        }
        let rows = features.len() / num_features;
        if rows != labels.len() {
            return Err(DataError::LengthMismatch {
                features: rows,
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(DataError::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            features,
            num_features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> LocalDataset {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LocalDataset {
            features,
            num_features: self.num_features,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Rows of all `parts` in order. Parts must agree on features and classes.
    pub fn concat(parts: &[LocalDataset]) -> Result<LocalDataset, DataError> {
        let first = parts.first().ok_or(DataError::Empty)?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        LocalDataset::new(features, first.num_features, labels, first.num_classes)
    }

    /// First `len - test_len` rows for training, the rest for testing, where
    /// `test_len = round(len * test_fraction)` clamped so both halves keep at
    /// least one row when `len >= 2`.
    pub fn train_test_split(&self, test_fraction: f64) -> (LocalDataset, LocalDataset) {
        let n = self.len();
        let mut test = (n as f64 * test_fraction).round() as usize;
        if n >= 2 {
            test = test.clamp(1, n - 1);
        } else {
            test = 0;
        }
        let train: Vec<usize> = (0..n - test).collect();
        let held: Vec<usize> = (n - test..n).collect();
        (self.select(&train), self.select(&held))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_examples: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub class_separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::InvalidSpec("num_classes must be at least 2".into()));
        }
        if self.num_examples < self.num_classes {
            return Err(DataError::InvalidSpec(format!(
                "num_examples {} is below num_classes {}",
                self.num_examples, self.num_classes
            )));
        }
        if self.num_features == 0 {
            return Err(DataError::InvalidSpec("num_features must be positive".into()));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(DataError::InvalidSpec(
                "class_separation must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Unit-variance Gaussian blobs, one per class.
///
/// With `num_classes <= num_features` the class means sit on distinct axes at
/// distance `separation / sqrt(2)` from the origin, so every pair of means is
/// exactly `separation` apart. Otherwise means point in seeded random
/// directions at the same radius. Example `i` before shuffling has class
/// `i mod k`, which keeps class counts within one of each other.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LocalDataset, DataError> {
    spec.validate()?;
    let d = spec.num_features;
    let k = spec.num_classes;
    let radius = spec.class_separation / std::f64::consts::SQRT_2;
    let mut rng = SeededRng::new(spec.seed);

    let mut means = vec![0.0; k * d];
    if k <= d {
        for c in 0..k {
            means[c * d + c] = radius;
        }
    } else {
        for c in 0..k {
            let dir: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (j, x) in dir.iter().enumerate() {
                means[c * d + j] = radius * x / norm;
            }
        }
    }

    let mut order: Vec<usize> = (0..spec.num_examples).collect();
    rng.shuffle(&mut order);
    let mut features = Vec::with_capacity(spec.num_examples * d);
    let mut labels = Vec::with_capacity(spec.num_examples);
    for &i in &order {
        let c = i % k;
        labels.push(c as u32);
        for j in 0..d {
            features.push(means[c * d + j] + rng.standard_normal());
        }
    }
    LocalDataset::new(features, d, labels, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    /// Share of each client's data drawn uniformly; the rest comes from one class.
    pub iid_fraction: f64,
    pub seed: u64,
}

/// Disjoint, covering split of `data` into `num_clients` datasets.
///
/// Client `i` gets `n / C` rows (plus one for the first `n mod C` clients).
/// Of those, `size - floor(iid_fraction * size)` come from class `i mod k`
/// and the rest from the shuffled pool of everything not claimed that way.
/// Each client's rows keep their original relative order.
pub fn partition(data: &LocalDataset, spec: &PartitionSpec) -> Result<Vec<LocalDataset>, DataError> {
    let parts = partition_indices(data.labels(), data.num_classes(), spec)?;
    Ok(parts.iter().map(|idx| data.select(idx)).collect())
}

pub fn partition_indices(
    labels: &[u32],
    num_classes: usize,
    spec: &PartitionSpec,
) -> Result<Vec<Vec<usize>>, DataError> {
    let n = labels.len();
    let c = spec.num_clients;
    if c == 0 {
        return Err(DataError::InvalidSpec("num_clients must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.iid_fraction) {
        return Err(DataError::InvalidSpec(format!(
            "iid_fraction {} outside [0, 1]",
            spec.iid_fraction
        )));
    }
    if n < c {
        return Err(DataError::TooFewExamples {
            examples: n,
            clients: c,
        });
    }

    let mut rng = SeededRng::new(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);

    let sizes: Vec<usize> = (0..c).map(|i| n / c + usize::from(i < n % c)).collect();
    let mut parts: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    let mut claimed = vec![false; n];

    // Per-class queues in shuffled order.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes.max(1)];
    for &i in &order {
        by_class[labels[i] as usize].push(i);
    }
    let mut cursor = vec![0usize; by_class.len()];
    let mut iid_sizes = Vec::with_capacity(c);
    for (client, &size) in sizes.iter().enumerate() {
        let iid = (spec.iid_fraction * size as f64).floor() as usize;
        let skewed = size - iid;
        iid_sizes.push(iid);
        if skewed == 0 {
            continue;
        }
        let class = client % by_class.len();
        let available = by_class[class].len() - cursor[class];
        if available < skewed {
            return Err(DataError::InsufficientClass {
                class: class as u32,
                needed: skewed,
                available,
            });
        }
        let take = &by_class[class][cursor[class]..cursor[class] + skewed];
        cursor[class] += skewed;
        for &i in take {
            claimed[i] = true;
        }
        parts[client].extend_from_slice(take);
    }

    let mut pool = order.iter().copied().filter(|&i| !claimed[i]);
    for (client, &iid) in iid_sizes.iter().enumerate() {
        parts[client].extend(pool.by_ref().take(iid));
    }
    debug_assert!(pool.next().is_none());

    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Reads a CSV file with a header row; the column named `label` holds integer
/// class ids and every other column is a numeric feature.
pub fn read_csv_path(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LocalDataset, DataError> {
    let file = std::fs::File::open(path).map_err(csv::Error::from)?;
    read_csv(file, num_classes)
}

/// `num_classes` defaults to one more than the largest label seen.
pub fn read_csv(reader: impl Read, num_classes: Option<usize>) -> Result<LocalDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or(DataError::MissingLabelColumn)?;
    let num_features = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for (col, field) in record.iter().enumerate() {
            if col == label_col {
                let label: u32 = field.parse().map_err(|_| DataError::CsvValue {
                    row: row + 1,
                    reason: format!("label `{field}` is not a non-negative integer"),
                })?;
                labels.push(label);
            } else {
                let x: f64 = field.parse().map_err(|_| DataError::CsvValue {
                    row: row + 1,
                    reason: format!("feature `{field}` in column {col} is not a number"),
                })?;
                features.push(x);
            }
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m as usize + 1));
    LocalDataset::new(features, num_features, labels, k)
}
