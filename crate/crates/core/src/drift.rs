//! Drift detection.
//!
//! Two families:
//!
//! - supervised: windowed accuracy falling below the deployment baseline by
//!   more than `decay_delta`;
//! - unsupervised: per-feature two-sample Kolmogorov-Smirnov test (Bonferroni
//!   corrected across features) or population stability index against a
//!   reference window.
//!
//! The monitor works on tumbling (non-overlapping) windows of `window`
//! observations. Without an explicit reference, the first full window after
//! (re)training becomes the reference and produces no report.

use serde::{Deserialize, Serialize};

pub const MIN_WINDOW: usize = 20;
pub const PSI_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DriftError {
    #[error("window of {got} observations is below the minimum of {min}")]
    Window { got: usize, min: usize },
    #[error("histograms have {reference} and {current} bins, expected {expected}")]
    Bins {
        expected: usize,
        reference: usize,
        current: usize,
    },
    #[error("invalid drift config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, DriftError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    PerfDecay,
    Ks,
    Psi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub detector: DetectorKind,
    pub alpha: f64,
    pub window: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_threshold: Option<f64>,
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(DriftError::Config("alpha must lie in (0, 1)".into()));
        }
        if self.window < MIN_WINDOW {
            return Err(DriftError::Config(format!("window must be >= {MIN_WINDOW}")));
        }
        match self.detector {
            DetectorKind::PerfDecay => match self.decay_delta {
                Some(d) if (0.0..=1.0).contains(&d) => {}
                _ => return Err(DriftError::Config("perf_decay needs decay_delta in [0, 1]".into())),
            },
            DetectorKind::Psi => match self.psi_threshold {
                Some(t) if t > 0.0 && t.is_finite() => {}
                _ => return Err(DriftError::Config("psi needs a positive psi_threshold".into())),
            },
            DetectorKind::Ks => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub fired: bool,
    pub detector: DetectorKind,
    pub statistic: f64,
    pub threshold: f64,
    pub window_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_feature: Option<Vec<(usize, f64)>>,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `D = sup_x |F_ref(x) - F_cur(x)|` over the two empirical CDFs.
pub fn ks_two_sample(reference: &[f64], current: &[f64]) -> Result<f64> {
    for len in [reference.len(), current.len()] {
        if len < MIN_WINDOW {
            return Err(DriftError::Window {
                got: len,
                min: MIN_WINDOW,
            });
        }
    }
    let (a, b) = (sorted(reference), sorted(current));
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        // Step past every sample equal to the smaller head so ties move both
        // ECDFs together.
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// Asymptotic rejection threshold `c(alpha) * sqrt((n + m) / (n m))` with
/// `c(alpha) = sqrt(-ln(alpha / 2) / 2)`.
pub fn ks_critical_value(alpha: f64, n: usize, m: usize) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    let (n, m) = (n as f64, m as f64);
    c * ((n + m) / (n * m)).sqrt()
}

/// Interior edges of `bins` equal-width bins spanning the reference range.
pub fn equal_width_edges(reference: &[f64], bins: usize) -> Vec<f64> {
    let lo = reference.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    (1..bins).map(|i| lo + width * i as f64).collect()
}

/// Counts per bin; values below the first edge land in bin 0 and values at
/// or above the last edge in the final bin.
pub fn histogram(values: &[f64], edges: &[f64]) -> Vec<u64> {
    let mut counts = vec![0u64; edges.len() + 1];
    for &v in values {
        counts[edges.partition_point(|&e| e <= v)] += 1;
    }
    counts
}

/// `sum_i (p_i - q_i) ln(p_i / q_i)` with add-one smoothed proportions.
pub fn psi(reference: &[u64], current: &[u64], bins: usize) -> Result<f64> {
    if reference.len() != bins || current.len() != bins || bins == 0 {
        return Err(DriftError::Bins {
            expected: bins,
            reference: reference.len(),
            current: current.len(),
        });
    }
    let total = |h: &[u64]| h.iter().sum::<u64>() as f64 + bins as f64;
    let (rt, ct) = (total(reference), total(current));
    Ok(reference
        .iter()
        .zip(current)
        .map(|(&r, &c)| {
            let p = (r as f64 + 1.0) / rt;
            let q = (c as f64 + 1.0) / ct;
            (p - q) * (p / q).ln()
        })
        .sum())
}

/// Fires when windowed accuracy drops below `baseline_acc - decay_delta`.
pub fn perf_decay(
    baseline_acc: f64,
    labels: &[usize],
    preds: &[usize],
    decay_delta: f64,
) -> Result<DriftReport> {
    if labels.is_empty() {
        return Err(DriftError::Window { got: 0, min: 1 });
    }
    if labels.len() != preds.len() {
        return Err(DriftError::Data(format!(
            "{} labels but {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    let correct = labels.iter().zip(preds).filter(|(y, p)| y == p).count();
    let acc = correct as f64 / labels.len() as f64;
    let threshold = baseline_acc - decay_delta;
    Ok(DriftReport {
        fired: acc < threshold,
        detector: DetectorKind::PerfDecay,
        statistic: acc,
        threshold,
        window_id: 0,
        per_feature: None,
    })
}

/// Per-feature KS with a Bonferroni-corrected level `alpha / features`.
pub fn ks_report(reference: &[Vec<f64>], current: &[Vec<f64>], alpha: f64) -> Result<DriftReport> {
    let features = reference.len();
    if features == 0 || features != current.len() {
        return Err(DriftError::Data("feature count mismatch".into()));
    }
    let threshold = ks_critical_value(alpha / features as f64, reference[0].len(), current[0].len());
    let per_feature = reference
        .iter()
        .zip(current)
        .enumerate()
        .map(|(f, (r, c))| ks_two_sample(r, c).map(|d| (f, d)))
        .collect::<Result<Vec<_>>>()?;
    let statistic = per_feature.iter().map(|&(_, d)| d).fold(0.0, f64::max);
    Ok(DriftReport {
        fired: statistic > threshold,
        detector: DetectorKind::Ks,
        statistic,
        threshold,
        window_id: 0,
        per_feature: Some(per_feature),
    })
}

/// Per-feature PSI over equal-width bins of the reference; fires when any
/// feature exceeds `psi_threshold`.
pub fn psi_report(reference: &[Vec<f64>], current: &[Vec<f64>], psi_threshold: f64) -> Result<DriftReport> {
    if reference.is_empty() || reference.len() != current.len() {
        return Err(DriftError::Data("feature count mismatch".into()));
    }
    let per_feature = reference
        .iter()
        .zip(current)
        .enumerate()
        .map(|(f, (r, c))| {
            let edges = equal_width_edges(r, PSI_BINS);
            psi(&histogram(r, &edges), &histogram(c, &edges), PSI_BINS).map(|v| (f, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let statistic = per_feature.iter().map(|&(_, v)| v).fold(0.0, f64::max);
    Ok(DriftReport {
        fired: statistic > psi_threshold,
        detector: DetectorKind::Psi,
        statistic,
        threshold: psi_threshold,
        window_id: 0,
        per_feature: Some(per_feature),
    })
}

/// Tumbling-window drift monitor for one deployed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorState {
    pub config: DriftConfig,
    pub feature_dim: usize,
    /// Reference window, one column per feature.
    pub reference: Option<Vec<Vec<f64>>>,
    /// Accuracy measured at deployment (supervised detector).
    pub baseline_acc: Option<f64>,
    /// Completed windows so far, the reference window included.
    pub windows_completed: u64,
    pending_features: Vec<Vec<f64>>,
    pending_outcomes: Vec<(usize, usize)>,
}

impl MonitorState {
    pub fn new(config: DriftConfig, feature_dim: usize) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 {
            return Err(DriftError::Config("feature_dim must be >= 1".into()));
        }
        Ok(Self {
            config,
            feature_dim,
            reference: None,
            baseline_acc: None,
            windows_completed: 0,
            pending_features: Vec::new(),
            pending_outcomes: Vec::new(),
        })
    }

    pub fn with_reference(mut self, rows: &[Vec<f64>]) -> Result<Self> {
        self.check_rows(rows)?;
        self.reference = Some(columns(rows, self.feature_dim));
        Ok(self)
    }

    pub fn with_baseline(mut self, accuracy: f64) -> Self {
        self.baseline_acc = Some(accuracy);
        self
    }

    /// Forgets the reference and pending observations, e.g. after the model
    /// is retrained.
    pub fn reset(&mut self, baseline_acc: Option<f64>) {
        self.reference = None;
        self.baseline_acc = baseline_acc;
        self.windows_completed = 0;
        self.pending_features.clear();
        self.pending_outcomes.clear();
    }

    pub fn pending(&self) -> usize {
        match self.config.detector {
            DetectorKind::PerfDecay => self.pending_outcomes.len(),
            _ => self.pending_features.len(),
        }
    }

    fn check_rows(&self, rows: &[Vec<f64>]) -> Result<()> {
        match rows.iter().position(|r| r.len() != self.feature_dim) {
            Some(i) => Err(DriftError::Data(format!(
                "sample {i} has {} features, expected {}",
                rows[i].len(),
                self.feature_dim
            ))),
            None => Ok(()),
        }
    }
}

fn columns(rows: &[Vec<f64>], dim: usize) -> Vec<Vec<f64>> {
    (0..dim).map(|f| rows.iter().map(|r| r[f]).collect()).collect()
}

/// Buffers observations and emits one report per completed window.
/// `outcomes` are `(label, prediction)` pairs aligned with `samples`; the
/// supervised detector requires them.
pub fn observe(
    mut state: MonitorState,
    samples: &[Vec<f64>],
    outcomes: Option<&[(usize, usize)]>,
) -> Result<(MonitorState, Vec<DriftReport>)> {
    let window = state.config.window;
    let mut reports = Vec::new();
    match state.config.detector {
        DetectorKind::PerfDecay => {
            let outcomes = outcomes.ok_or_else(|| {
                DriftError::Data("perf_decay requires labels and predictions".into())
            })?;
            if !samples.is_empty() && samples.len() != outcomes.len() {
                return Err(DriftError::Data("samples and labels differ in length".into()));
            }
            let baseline = state
                .baseline_acc
                .ok_or_else(|| DriftError::Data("no baseline accuracy".into()))?;
            let delta = state.config.decay_delta.unwrap_or_default();
            state.pending_outcomes.extend_from_slice(outcomes);
            while state.pending_outcomes.len() >= window {
                let chunk: Vec<(usize, usize)> = state.pending_outcomes.drain(..window).collect();
                let (labels, preds): (Vec<usize>, Vec<usize>) = chunk.into_iter().unzip();
                let mut report = perf_decay(baseline, &labels, &preds, delta)?;
                report.window_id = state.windows_completed;
                state.windows_completed += 1;
                reports.push(report);
            }
        }
        DetectorKind::Ks | DetectorKind::Psi => {
            state.check_rows(samples)?;
            state.pending_features.extend(samples.iter().cloned());
            while state.pending_features.len() >= window {
                let chunk: Vec<Vec<f64>> = state.pending_features.drain(..window).collect();
                let current = columns(&chunk, state.feature_dim);
                let window_id = state.windows_completed;
                state.windows_completed += 1;
                let Some(reference) = &state.reference else {
                    state.reference = Some(current);
                    continue;
                };
                let mut report = match state.config.detector {
                    DetectorKind::Ks => ks_report(reference, &current, state.config.alpha)?,
                    _ => psi_report(reference, &current, state.config.psi_threshold.unwrap_or_default())?,
                };
                report.window_id = window_id;
                reports.push(report);
            }
        }
    }
    Ok((state, reports))
}
