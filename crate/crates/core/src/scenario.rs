//! Datasets and class-incremental (New Classes) experience streams.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::nn::Batch;
use crate::registry::{BlobStore, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("line {line}: label {label} is outside [0, {num_classes})")]
    Label {
        line: u64,
        label: usize,
        num_classes: usize,
    },
    #[error("split needs {required} classes but only {available} exist")]
    InsufficientClasses { required: usize, available: usize },
    #[error("experience index {index} out of range for {len} experiences")]
    Range { index: usize, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Storage(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub train_path: String,
    pub test_path: String,
    pub format: DatasetFormat,
}

impl DatasetManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| ScenarioError::Manifest(e.to_string()))
    }
}

/// How the evaluation stream is assembled after training step `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TestProtocol {
    /// Test splits of every experience in the stream, whatever the step.
    FullTest,
    /// Test splits of experiences `0..=i`.
    #[default]
    AccumulatingTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub index: usize,
    pub class_set: Vec<usize>,
    pub train: Batch,
    pub test: Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub experiences: Vec<Experience>,
    pub protocol: TestProtocol,
    pub seed: u64,
}

/// Parses headerless `label,f1,...,fF` rows.
pub fn parse_csv(bytes: &[u8], feature_dim: usize, num_classes: usize) -> Result<Batch> {
    if feature_dim == 0 {
        return Err(ScenarioError::InvalidArgument("feature_dim must be >= 1".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut batch = Batch::empty(feature_dim);
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                return Err(ParseError::Malformed {
                    line,
                    message: e.to_string(),
                }
                .into())
            }
        }
        let line = record.position().map_or(line, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != feature_dim + 1 {
            return Err(ParseError::Malformed {
                line,
                message: format!("expected {} fields, found {}", feature_dim + 1, record.len()),
            }
            .into());
        }
        let label: usize = record[0].parse().map_err(|_| ParseError::Malformed {
            line,
            message: format!("label {:?} is not a class index", &record[0]),
        })?;
        if label >= num_classes {
            return Err(ScenarioError::Label {
                line,
                label,
                num_classes,
            });
        }
        for field in record.iter().skip(1) {
            let v: f32 = field
                .parse()
                .ok()
                .filter(|v: &f32| v.is_finite())
                .ok_or_else(|| ParseError::Malformed {
                    line,
                    message: format!("feature {field:?} is not a finite number"),
                })?;
            batch.features.push(v);
        }
        batch.labels.push(label);
    }
    if batch.is_empty() {
        return Err(ParseError::EmptyDataset.into());
    }
    Ok(batch)
}

/// Inverse of [`parse_csv`]; floats use the shortest round-trip form.
pub fn write_csv(batch: &Batch) -> String {
    let mut out = String::new();
    for i in 0..batch.len() {
        out.push_str(&batch.labels[i].to_string());
        for v in batch.row(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Loads the train and test CSVs a manifest points at.
pub fn ingest_csv(manifest: &DatasetManifest, store: &dyn BlobStore) -> Result<(Batch, Batch)> {
    if manifest.num_classes < 2 {
        return Err(ScenarioError::Manifest("num_classes must be >= 2".into()));
    }
    let load = |key: &str| -> Result<Batch> {
        let bytes = store.get(key)?;
        parse_csv(&bytes, manifest.feature_dim, manifest.num_classes)
    };
    Ok((load(&manifest.train_path)?, load(&manifest.test_path)?))
}

/// Class counts per experience for a New-Classes split.
pub fn nc_class_counts(first_size: usize, rest_size: usize, n_experiences: usize) -> Vec<usize> {
    let mut counts = vec![rest_size; n_experiences];
    if let Some(first) = counts.first_mut() {
        *first = first_size;
    }
    counts
}

/// Splits `train`/`test` into `n_experiences` experiences over disjoint class
/// sets: the first gets `first_size` classes, every later one `rest_size`.
/// Classes are assigned through a seeded permutation; classes left over are
/// dropped.
#[allow(clippy::too_many_arguments)]
pub fn build_nc_scenario(
    train: &Batch,
    test: &Batch,
    num_classes: usize,
    first_size: usize,
    rest_size: usize,
    n_experiences: usize,
    seed: u64,
    protocol: TestProtocol,
) -> Result<Scenario> {
    if n_experiences == 0 || first_size == 0 || (n_experiences > 1 && rest_size == 0) {
        return Err(ScenarioError::InvalidArgument(
            "n_experiences, first_size and rest_size must be >= 1".into(),
        ));
    }
    if train.feature_dim != test.feature_dim {
        return Err(ScenarioError::InvalidArgument(
            "train and test feature widths differ".into(),
        ));
    }
    let required = first_size + (n_experiences - 1) * rest_size;
    if required > num_classes {
        return Err(ScenarioError::InsufficientClasses {
            required,
            available: num_classes,
        });
    }
    for (line, &label) in train.labels.iter().chain(&test.labels).enumerate() {
        if label >= num_classes {
            return Err(ScenarioError::Label {
                line: line as u64 + 1,
                label,
                num_classes,
            });
        }
    }

    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6e63])));

    let mut owner = vec![None; num_classes];
    let mut experiences = Vec::with_capacity(n_experiences);
    let mut start = 0;
    for (index, count) in nc_class_counts(first_size, rest_size, n_experiences)
        .into_iter()
        .enumerate()
    {
        let mut class_set = order[start..start + count].to_vec();
        class_set.sort_unstable();
        for &c in &class_set {
            owner[c] = Some(index);
        }
        start += count;
        experiences.push(Experience {
            index,
            class_set,
            train: Batch::empty(train.feature_dim),
            test: Batch::empty(test.feature_dim),
        });
    }
    if required < num_classes {
        log::warn!(
            "NC split uses {required} of {num_classes} classes; dropping {:?}",
            {
                let mut dropped = order[required..].to_vec();
                dropped.sort_unstable();
                dropped
            }
        );
    }

    for i in 0..train.len() {
        if let Some(e) = owner[train.labels[i]] {
            experiences[e].train.push(train.row(i), train.labels[i]);
        }
    }
    for i in 0..test.len() {
        if let Some(e) = owner[test.labels[i]] {
            experiences[e].test.push(test.row(i), test.labels[i]);
        }
    }

    Ok(Scenario {
        feature_dim: train.feature_dim,
        num_classes,
        experiences,
        protocol,
        seed,
    })
}

/// Evaluation stream after training on experience `upto`.
pub fn test_stream(scenario: &Scenario, upto: usize) -> Result<Batch> {
    let n = scenario.experiences.len();
    if upto >= n {
        return Err(ScenarioError::Range { index: upto, len: n });
    }
    let take = match scenario.protocol {
        TestProtocol::FullTest => n,
        TestProtocol::AccumulatingTest => upto + 1,
    };
    Ok(Batch::concat(
        scenario.feature_dim,
        scenario.experiences[..take].iter().map(|e| &e.test),
    ))
}

/// Gaussian blobs: each class is isotropic noise with standard deviation
/// `spread` around a center drawn uniformly from `[-1, 1]^feature_dim`.
/// Rows are grouped by class.
pub fn synth_blobs(
    num_classes: usize,
    feature_dim: usize,
    per_class_train: usize,
    per_class_test: usize,
    spread: f32,
    seed: u64,
) -> Result<(Batch, Batch)> {
    if num_classes == 0 || feature_dim == 0 || per_class_train == 0 || per_class_test == 0 {
        return Err(ScenarioError::InvalidArgument("all counts must be >= 1".into()));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(ScenarioError::InvalidArgument("spread must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x626c6f62]));
    let unit = Uniform::new_inclusive(-1.0f32, 1.0).expect("valid range");
    let centers: Vec<Vec<f32>> = (0..num_classes)
        .map(|_| (0..feature_dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0f32, spread).expect("spread is positive");
    let mut draw = |per_class: usize| {
        let mut b = Batch::empty(feature_dim);
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                let row: Vec<f32> = center.iter().map(|&m| m + noise.sample(&mut rng)).collect();
                b.push(&row, c);
            }
        }
        b
    };
    let train = draw(per_class_train);
    let test = draw(per_class_test);
    Ok((train, test))
}

/// Checks the structural invariants of a scenario: non-empty, sorted and
/// pairwise disjoint class sets, and every pattern's label inside its
/// experience's class set.
pub fn check_invariants(scenario: &Scenario) -> std::result::Result<(), String> {
    let mut seen = BTreeSet::new();
    for exp in &scenario.experiences {
        if exp.class_set.is_empty() {
            return Err(format!("experience {} has no classes", exp.index));
        }
        if exp.class_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("experience {} class set is not sorted", exp.index));
        }
        for &c in &exp.class_set {
            if c >= scenario.num_classes || !seen.insert(c) {
                return Err(format!("class {c} repeated or out of range"));
            }
        }
        for &y in exp.train.labels.iter().chain(&exp.test.labels) {
            if exp.class_set.binary_search(&y).is_err() {
                return Err(format!("label {y} outside experience {}", exp.index));
            }
        }
    }
    Ok(())
}
