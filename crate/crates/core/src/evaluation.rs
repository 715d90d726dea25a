//! Continual-learning metrics.
//!
//! `R[i][j]` is the top-1 accuracy on experience `j`'s test split after
//! training step `i`. Under the accumulating protocol row `i` covers
//! `j <= i`; under the full-test protocol it covers every experience known at
//! evaluation time. Average accuracy, forgetting and BWT only read `j <= i`.

use serde::{Deserialize, Serialize};

use crate::nn::{forward, topk_from_logits, Batch, NnError, Params};
use crate::scenario::TestProtocol;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty batch")]
    EmptyBatch,
    #[error("{what} {index} out of range (limit {limit})")]
    Range {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("records are not congruent: {0}")]
    Aggregate(String),
    #[error("run has not completed")]
    JobState,
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Fraction of samples whose label is among the `k` highest logits. `k` is
/// clamped to the number of classes.
pub fn eval_accuracy(params: &Params, batch: &Batch, k: usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(EvalError::EmptyBatch);
    }
    let k = effective_k(k, params.num_classes())?;
    let ranked = topk_from_logits(&forward(params, batch)?, k)?;
    let hits = ranked
        .iter()
        .zip(&batch.labels)
        .filter(|(top, y)| top.contains(y))
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

fn effective_k(k: usize, num_classes: usize) -> Result<usize> {
    if k == 0 {
        return Err(EvalError::Range {
            what: "k",
            index: 0,
            limit: num_classes,
        });
    }
    Ok(k.min(num_classes))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the row for the next training step. It must cover at least
    /// experiences `0..=step`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let step = self.rows.len();
        if row.len() <= step {
            return Err(EvalError::Range {
                what: "row length",
                index: row.len(),
                limit: step + 1,
            });
        }
        if let Some(bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(EvalError::Aggregate(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, step: usize, experience: usize) -> Option<f64> {
        self.rows.get(step)?.get(experience).copied()
    }

    fn row(&self, step: usize) -> Result<&[f64]> {
        self.rows.get(step).map(Vec::as_slice).ok_or(EvalError::Range {
            what: "step",
            index: step,
            limit: self.rows.len(),
        })
    }
}

/// Mean of `R[step][j]` over `j <= step`.
pub fn avg_accuracy(r: &AccuracyMatrix, step: usize) -> Result<f64> {
    let row = r.row(step)?;
    Ok(row[..=step].iter().sum::<f64>() / (step + 1) as f64)
}

/// `max_{l in [j, t-1]} R[l][j] - R[t][j]`.
pub fn forgetting(r: &AccuracyMatrix, j: usize, t: usize) -> Result<f64> {
    if j >= t {
        return Err(EvalError::Range {
            what: "experience",
            index: j,
            limit: t,
        });
    }
    let last = r.row(t)?[j];
    let best = (j..t)
        .map(|l| r.row(l).map(|row| row[j]))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best - last)
}

/// Mean forgetting over experiences `0..t`; zero at `t = 0`.
pub fn forgetting_mean(r: &AccuracyMatrix, t: usize) -> Result<f64> {
    r.row(t)?;
    if t == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..t).map(|j| forgetting(r, j, t)).sum::<Result<f64>>()?;
    Ok(total / t as f64)
}

/// Backward transfer `mean_{j<t} (R[t][j] - R[j][j])`; zero at `t = 0`.
pub fn bwt(r: &AccuracyMatrix, t: usize) -> Result<f64> {
    let last = r.row(t)?;
    if t == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (j, &now) in last.iter().enumerate().take(t) {
        total += now - r.row(j)?[j];
    }
    Ok(total / t as f64)
}

/// Ranked predictions for one experience's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperiencePredictions {
    pub experience: usize,
    pub labels: Vec<usize>,
    /// Top-`k_max` class indices per sample, best first.
    pub ranked: Vec<Vec<usize>>,
}

/// Raw predictions produced by the evaluation after one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPredictions {
    pub step: usize,
    pub experiences: Vec<ExperiencePredictions>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopkAccuracy {
    pub k: usize,
    pub accuracy: f64,
}

/// Everything measured for one training step of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub experience: usize,
    pub seconds: f64,
    pub patterns: u64,
    pub final_loss: f64,
    /// Top-1 accuracy per evaluated experience (a row of the accuracy matrix).
    pub accuracy_row: Vec<f64>,
    /// Top-k accuracy on the pooled evaluation stream, one entry per k.
    pub stream_accuracy: Vec<TopkAccuracy>,
}

impl StepRecord {
    pub fn stream(&self, k: usize) -> Option<f64> {
        self.stream_accuracy.iter().find(|a| a.k == k).map(|a| a.accuracy)
    }
}

/// Evaluates `params` after training step `step` on the test splits in
/// `tests` (indexed by experience). The accumulating protocol uses
/// experiences `0..=step`, the full-test protocol all of `tests`.
pub fn evaluate_step(
    params: &Params,
    tests: &[&Batch],
    step: usize,
    protocol: TestProtocol,
    top_k: &[usize],
) -> Result<(Vec<f64>, Vec<TopkAccuracy>, StepPredictions)> {
    if step >= tests.len() {
        return Err(EvalError::Range {
            what: "step",
            index: step,
            limit: tests.len(),
        });
    }
    let classes = params.num_classes();
    let ks = top_k
        .iter()
        .map(|&k| effective_k(k, classes))
        .collect::<Result<Vec<_>>>()?;
    let k_max = ks.iter().copied().max().unwrap_or(1);
    let upto = match protocol {
        TestProtocol::AccumulatingTest => step + 1,
        TestProtocol::FullTest => tests.len(),
    };

    let mut row = Vec::with_capacity(upto);
    let mut hits = vec![0usize; ks.len()];
    let mut total = 0usize;
    let mut log = StepPredictions {
        step,
        experiences: Vec::with_capacity(upto),
    };
    for (j, batch) in tests[..upto].iter().enumerate() {
        if batch.is_empty() {
            return Err(EvalError::EmptyBatch);
        }
        let ranked = topk_from_logits(&forward(params, batch)?, k_max)?;
        let top1 = ranked
            .iter()
            .zip(&batch.labels)
            .filter(|(r, y)| r[0] == **y)
            .count();
        row.push(top1 as f64 / batch.len() as f64);
        for (h, &k) in hits.iter_mut().zip(&ks) {
            *h += ranked
                .iter()
                .zip(&batch.labels)
                .filter(|(r, y)| r[..k].contains(y))
                .count();
        }
        total += batch.len();
        log.experiences.push(ExperiencePredictions {
            experience: j,
            labels: batch.labels.clone(),
            ranked,
        });
    }
    let stream = top_k
        .iter()
        .zip(hits)
        .map(|(&k, h)| TopkAccuracy {
            k,
            accuracy: h as f64 / total as f64,
        })
        .collect();
    Ok((row, stream, log))
}

/// Per-experience cost of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EfficiencyTrace {
    pub seconds: Vec<f64>,
    pub patterns: Vec<u64>,
}

/// All steps of one seed's run over a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub complete: bool,
}

impl SeedRecord {
    pub fn matrix(&self) -> Result<AccuracyMatrix> {
        let mut m = AccuracyMatrix::new();
        for s in &self.steps {
            m.push_row(s.accuracy_row.clone())?;
        }
        Ok(m)
    }
}

/// Cost trace of a finished run.
pub fn track(record: &SeedRecord) -> Result<EfficiencyTrace> {
    if !record.complete {
        return Err(EvalError::JobState);
    }
    Ok(EfficiencyTrace {
        seconds: record.steps.iter().map(|s| s.seconds).collect(),
        patterns: record.steps.iter().map(|s| s.patterns).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSeries {
    pub k: usize,
    pub values: Vec<f64>,
}

/// Per-step metric series of one seed, or their mean / standard deviation
/// across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub matrix: Vec<Vec<f64>>,
    pub stream_accuracy: Vec<StreamSeries>,
    pub avg_accuracy: Vec<f64>,
    pub forgetting_mean: Vec<f64>,
    pub bwt: Vec<f64>,
    pub seconds: Vec<f64>,
    pub patterns: Vec<f64>,
}

impl Summary {
    pub fn of(record: &SeedRecord) -> Result<Self> {
        let m = record.matrix()?;
        let steps = m.steps();
        let ks: Vec<usize> = record
            .steps
            .first()
            .map(|s| s.stream_accuracy.iter().map(|a| a.k).collect())
            .unwrap_or_default();
        let stream_accuracy = ks
            .iter()
            .map(|&k| {
                let values = record
                    .steps
                    .iter()
                    .map(|s| s.stream(k).ok_or_else(|| EvalError::Aggregate(format!("step lacks k={k}"))))
                    .collect::<Result<Vec<_>>>()?;
                Ok(StreamSeries { k, values })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Summary {
            stream_accuracy,
            avg_accuracy: (0..steps).map(|t| avg_accuracy(&m, t)).collect::<Result<_>>()?,
            forgetting_mean: (0..steps).map(|t| forgetting_mean(&m, t)).collect::<Result<_>>()?,
            bwt: (0..steps).map(|t| bwt(&m, t)).collect::<Result<_>>()?,
            seconds: record.steps.iter().map(|s| s.seconds).collect(),
            patterns: record.steps.iter().map(|s| s.patterns as f64).collect(),
            matrix: m.rows,
        })
    }

    pub fn steps(&self) -> usize {
        self.avg_accuracy.len()
    }

    pub fn stream(&self, k: usize) -> Option<&[f64]> {
        self.stream_accuracy
            .iter()
            .find(|s| s.k == k)
            .map(|s| s.values.as_slice())
    }

    /// All scalar cells in a fixed order, plus a shape signature.
    fn cells(&self) -> (Vec<usize>, Vec<f64>) {
        let mut shape = vec![self.matrix.len()];
        shape.extend(self.matrix.iter().map(Vec::len));
        shape.extend(self.stream_accuracy.iter().flat_map(|s| [s.k, s.values.len()]));
        let series = [
            &self.avg_accuracy,
            &self.forgetting_mean,
            &self.bwt,
            &self.seconds,
            &self.patterns,
        ];
        shape.extend(series.iter().map(|s| s.len()));
        let mut cells: Vec<f64> = self.matrix.iter().flatten().copied().collect();
        cells.extend(self.stream_accuracy.iter().flat_map(|s| s.values.iter().copied()));
        for s in series {
            cells.extend_from_slice(s);
        }
        (shape, cells)
    }

    fn from_cells(template: &Summary, cells: &[f64]) -> Summary {
        let mut it = cells.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let matrix = template.matrix.iter().map(|r| take(r.len())).collect();
        let stream_accuracy = template
            .stream_accuracy
            .iter()
            .map(|s| StreamSeries {
                k: s.k,
                values: take(s.values.len()),
            })
            .collect();
        Summary {
            matrix,
            stream_accuracy,
            avg_accuracy: take(template.avg_accuracy.len()),
            forgetting_mean: take(template.forgetting_mean.len()),
            bwt: take(template.bwt.len()),
            seconds: take(template.seconds.len()),
            patterns: take(template.patterns.len()),
        }
    }
}

/// Per-seed summaries plus their elementwise mean and sample standard
/// deviation (zero for a single seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Summary>,
    pub mean: Summary,
    pub stddev: Summary,
}

pub fn aggregate(records: &[SeedRecord]) -> Result<RunRecord> {
    if records.is_empty() {
        return Err(EvalError::Aggregate("no records".into()));
    }
    let summaries = records.iter().map(Summary::of).collect::<Result<Vec<_>>>()?;
    let (shape, _) = summaries[0].cells();
    let columns: Vec<Vec<f64>> = summaries
        .iter()
        .map(|s| {
            let (sh, cells) = s.cells();
            if sh == shape {
                Ok(cells)
            } else {
                Err(EvalError::Aggregate(format!(
                    "seed records have different shapes ({} vs {} steps)",
                    s.steps(),
                    summaries[0].steps()
                )))
            }
        })
        .collect::<Result<_>>()?;
    let n = columns.len() as f64;
    let width = columns[0].len();
    let mut mean = vec![0.0; width];
    let mut std = vec![0.0; width];
    for c in 0..width {
        let m = columns.iter().map(|col| col[c]).sum::<f64>() / n;
        mean[c] = m;
        if columns.len() > 1 {
            let var = columns.iter().map(|col| (col[c] - m).powi(2)).sum::<f64>() / (n - 1.0);
            std[c] = var.sqrt();
        }
    }
    Ok(RunRecord {
        seeds: records.iter().map(|r| r.seed).collect(),
        mean: Summary::from_cells(&summaries[0], &mean),
        stddev: Summary::from_cells(&summaries[0], &std),
        per_seed: summaries,
    })
}

pub const CSV_HEADER: &str = "experience,seconds,patterns,acc_top1,acc_top5,avg_acc,forgetting_mean";

/// One row per experience of the seed-mean summary.
pub fn metrics_csv(record: &RunRecord) -> String {
    let m = &record.mean;
    let top1 = m.stream(1);
    let top5 = m.stream(5);
    let cell = |s: Option<&[f64]>, i: usize| s.map(|v| v[i].to_string()).unwrap_or_default();
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for i in 0..m.steps() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i,
            m.seconds[i],
            m.patterns[i],
            cell(top1, i),
            cell(top5, i),
            m.avg_accuracy[i],
            m.forgetting_mean[i],
        ));
    }
    out
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean).powi(2);
        db += (y - mean).powi(2);
    }
    (da > 0.0 && db > 0.0).then(|| num / (da * db).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}
