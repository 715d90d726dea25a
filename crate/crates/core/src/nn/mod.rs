//! Dense feed-forward classifier: initialization, forward pass, softmax
//! cross-entropy gradients, plain SGD and top-k prediction.
//!
//! Layout conventions:
//!
//! - Scalars are `f32`; the loss is accumulated in `f64`.
//! - A layer's weight matrix has shape `(fan_in, fan_out)`, row-major, so a
//!   layer computes `z = x · W + b` for a row vector `x`.
//! - Hidden layers apply the configured activation; the output layer emits raw
//!   logits.

mod weights;

pub use weights::{decode_weights, encode_weights, WEIGHTS_FORMAT_VERSION, WEIGHTS_MAGIC};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label {label} at sample {index} is outside [0, {num_classes})")]
    Label {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("k = {k} is outside [1, {num_classes}]")]
    Range { k: usize, num_classes: usize },
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f32),
    #[error("update produced a non-finite parameter")]
    NonFinite,
    #[error("malformed weights blob: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f32) -> f32 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y = f(z)`.
    #[inline]
    fn derivative_from_output(self, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Architecture and initialization seed of a classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_layers: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(NnError::InvalidSpec("input_dim must be >= 1".into()));
        }
        if let Some(pos) = self.hidden_layers.iter().position(|&h| h == 0) {
            return Err(NnError::InvalidSpec(format!(
                "hidden_layers[{pos}] must be >= 1"
            )));
        }
        if self.num_classes < 2 {
            return Err(NnError::InvalidSpec("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// One affine layer. `weights` is `rows × cols` row-major, `bias` has `cols`
/// entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; cols],
        }
    }
}

/// Network parameters. Gradients share this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub activation: Activation,
    pub layers: Vec<DenseLayer>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            activation: self.activation,
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.rows, l.cols))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.rows)
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.cols)
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.rows, l.cols)).collect()
    }

    pub fn matches_spec(&self, spec: &ModelSpec) -> bool {
        self.activation == spec.activation && self.shapes() == spec.layer_shapes()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// In-place `p -= lr * g`.
    pub fn apply_sgd(&mut self, grads: &Params, lr: f32) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NnError::InvalidLearningRate(lr));
        }
        if self.shapes() != grads.shapes() {
            return Err(NnError::Dimension {
                what: "gradient layers",
                expected: self.layers.len(),
                got: grads.layers.len(),
            });
        }
        for (p, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, dw) in p.weights.iter_mut().zip(&g.weights) {
                *w -= lr * dw;
            }
            for (b, db) in p.bias.iter_mut().zip(&g.bias) {
                *b -= lr * db;
            }
        }
        if !self.is_finite() {
            return Err(NnError::NonFinite);
        }
        Ok(())
    }
}

/// Row-major `rows × cols` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Labeled samples: `len() × feature_dim` features plus one label per row.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Batch {
    pub feature_dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(feature_dim: usize, features: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if feature_dim == 0 {
            return Err(NnError::Dimension {
                what: "feature_dim",
                expected: 1,
                got: 0,
            });
        }
        if features.len() != labels.len() * feature_dim {
            return Err(NnError::Dimension {
                what: "feature buffer",
                expected: labels.len() * feature_dim,
                got: features.len(),
            });
        }
        Ok(Self {
            feature_dim,
            features,
            labels,
        })
    }

    pub fn empty(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn push(&mut self, features: &[f32], label: usize) {
        debug_assert_eq!(features.len(), self.feature_dim);
        self.features.extend_from_slice(features);
        self.labels.push(label);
    }

    pub fn extend_from(&mut self, other: &Batch) {
        debug_assert_eq!(self.feature_dim, other.feature_dim);
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
    }

    /// Rows at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut out = Batch::empty(self.feature_dim);
        out.features.reserve(indices.len() * self.feature_dim);
        out.labels.reserve(indices.len());
        for &i in indices {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }

    pub fn concat<'a>(feature_dim: usize, parts: impl IntoIterator<Item = &'a Batch>) -> Batch {
        let mut out = Batch::empty(feature_dim);
        for p in parts {
            out.extend_from(p);
        }
        out
    }
}

/// Glorot-uniform weights from a ChaCha stream seeded with `spec.seed`;
/// biases are zero.
pub fn init_params(spec: &ModelSpec) -> Result<Params> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(rows, cols)| {
            let limit = (6.0 / (rows + cols) as f64).sqrt() as f32;
            let dist = Uniform::new(-limit, limit).expect("limit is positive and finite");
            DenseLayer {
                rows,
                cols,
                weights: (0..rows * cols).map(|_| dist.sample(&mut rng)).collect(),
                bias: vec![0.0; cols],
            }
        })
        .collect();
    Ok(Params {
        activation: spec.activation,
        layers,
    })
}

fn check_input(params: &Params, batch: &Batch) -> Result<()> {
    if params.layers.is_empty() {
        return Err(NnError::InvalidSpec("network has no layers".into()));
    }
    if batch.feature_dim != params.input_dim() {
        return Err(NnError::Dimension {
            what: "batch features",
            expected: params.input_dim(),
            got: batch.feature_dim,
        });
    }
    if batch.features.len() != batch.len() * batch.feature_dim {
        return Err(NnError::Dimension {
            what: "feature buffer",
            expected: batch.len() * batch.feature_dim,
            got: batch.features.len(),
        });
    }
    Ok(())
}

/// `out = input · W + b` for `n` rows.
fn affine(layer: &DenseLayer, input: &[f32], n: usize) -> Vec<f32> {
    let (rows, cols) = (layer.rows, layer.cols);
    let mut out = Vec::with_capacity(n * cols);
    for _ in 0..n {
        out.extend_from_slice(&layer.bias);
    }
    for i in 0..n {
        let x = &input[i * rows..(i + 1) * rows];
        let o = &mut out[i * cols..(i + 1) * cols];
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let w = &layer.weights[k * cols..(k + 1) * cols];
            for (oj, &wj) in o.iter_mut().zip(w) {
                *oj += xk * wj;
            }
        }
    }
    out
}

/// Activations of every layer; element 0 is the input, the last is the logits.
fn forward_trace(params: &Params, batch: &Batch) -> Vec<Vec<f32>> {
    let n = batch.len();
    let last = params.layers.len() - 1;
    let mut acts = Vec::with_capacity(params.layers.len() + 1);
    acts.push(batch.features.clone());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = affine(layer, &acts[l], n);
        if l < last {
            for v in &mut z {
                *v = params.activation.apply(*v);
            }
        }
        acts.push(z);
    }
    acts
}

pub fn forward(params: &Params, batch: &Batch) -> Result<Matrix> {
    check_input(params, batch)?;
    let mut acts = forward_trace(params, batch);
    Ok(Matrix {
        rows: batch.len(),
        cols: params.num_classes(),
        data: acts.pop().unwrap_or_default(),
    })
}

fn check_labels(batch: &Batch, num_classes: usize) -> Result<()> {
    match batch.labels.iter().position(|&y| y >= num_classes) {
        Some(index) => Err(NnError::Label {
            index,
            label: batch.labels[index],
            num_classes,
        }),
        None => Ok(()),
    }
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn loss_and_grad(params: &Params, batch: &Batch) -> Result<(f64, Params)> {
    check_input(params, batch)?;
    if batch.is_empty() {
        return Err(NnError::Dimension {
            what: "batch size",
            expected: 1,
            got: 0,
        });
    }
    let classes = params.num_classes();
    check_labels(batch, classes)?;

    let n = batch.len();
    let acts = forward_trace(params, batch);
    let logits = &acts[acts.len() - 1];

    // dL/dz for the output layer: (softmax - onehot) / n
    let inv_n = 1.0 / n as f32;
    let mut loss = 0.0f64;
    let mut delta = vec![0.0f32; n * classes];
    for i in 0..n {
        let z = &logits[i * classes..(i + 1) * classes];
        let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = z.iter().map(|&v| ((v - max) as f64).exp()).sum();
        let y = batch.labels[i];
        loss += sum.ln() - (z[y] - max) as f64;
        let d = &mut delta[i * classes..(i + 1) * classes];
        for (j, dj) in d.iter_mut().enumerate() {
            let p = (((z[j] - max) as f64).exp() / sum) as f32;
            *dj = (p - if j == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    loss /= n as f64;

    let mut grads = params.zeros_like();
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let (rows, cols) = (layer.rows, layer.cols);
        let input = &acts[l];
        let g = &mut grads.layers[l];
        for i in 0..n {
            let x = &input[i * rows..(i + 1) * rows];
            let d = &delta[i * cols..(i + 1) * cols];
            for (b, &dj) in g.bias.iter_mut().zip(d) {
                *b += dj;
            }
            for (k, &xk) in x.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let gw = &mut g.weights[k * cols..(k + 1) * cols];
                for (w, &dj) in gw.iter_mut().zip(d) {
                    *w += xk * dj;
                }
            }
        }
        if l == 0 {
            break;
        }
        // Propagate to the previous layer's pre-activation.
        let mut prev = vec![0.0f32; n * rows];
        for i in 0..n {
            let d = &delta[i * cols..(i + 1) * cols];
            let out = &mut prev[i * rows..(i + 1) * rows];
            for (k, o) in out.iter_mut().enumerate() {
                let w = &layer.weights[k * cols..(k + 1) * cols];
                let s: f32 = w.iter().zip(d).map(|(a, b)| a * b).sum();
                *o = s * params.activation.derivative_from_output(input[i * rows + k]);
            }
        }
        delta = prev;
    }
    Ok((loss, grads))
}

/// Returns `params - lr * grads`.
pub fn sgd_step(params: &Params, grads: &Params, lr: f32) -> Result<Params> {
    let mut next = params.clone();
    next.apply_sgd(grads, lr)?;
    Ok(next)
}

/// Indices of the `k` largest logits per sample, descending; equal logits
/// rank the lower class index first.
pub fn topk_from_logits(logits: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > logits.cols {
        return Err(NnError::Range {
            k,
            num_classes: logits.cols,
        });
    }
    Ok((0..logits.rows)
        .map(|i| {
            let row = logits.row(i);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect())
}

pub fn predict_topk(params: &Params, batch: &Batch, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > params.num_classes() {
        return Err(NnError::Range {
            k,
            num_classes: params.num_classes(),
        });
    }
    topk_from_logits(&forward(params, batch)?, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(input: usize, hidden: Vec<usize>, classes: usize, seed: u64) -> ModelSpec {
        ModelSpec {
            input_dim: input,
            hidden_layers: hidden,
            num_classes: classes,
            activation: Activation::Relu,
            seed,
        }
    }

    fn toy_batch(n: usize, f: usize, classes: usize) -> Batch {
        let features = (0..n * f).map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        Batch::new(f, features, labels).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let s = spec(5, vec![7, 3], 4, 42);
        let a = init_params(&s).unwrap();
        let b = init_params(&s).unwrap();
        assert_eq!(a, b);
        let c = init_params(&s.with_seed(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_biases_zero_and_weights_bounded() {
        let p = init_params(&spec(6, vec![10], 3, 1)).unwrap();
        for l in &p.layers {
            assert!(l.bias.iter().all(|&b| b == 0.0));
            let limit = (6.0f32 / (l.rows + l.cols) as f32).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= limit));
        }
    }

    #[test]
    fn init_shapes() {
        let p = init_params(&spec(4, vec![3], 2, 0)).unwrap();
        assert_eq!(p.shapes(), vec![(4, 3), (3, 2)]);
        assert_eq!(p.layers[0].weights.len(), 12);
        assert_eq!(p.layers[0].bias.len(), 3);
        assert_eq!(p.layers[1].weights.len(), 6);
        assert_eq!(p.layers[1].bias.len(), 2);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(spec(0, vec![], 2, 0).validate().is_err());
        assert!(spec(2, vec![0], 2, 0).validate().is_err());
        assert!(spec(2, vec![], 1, 0).validate().is_err());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = init_params(&spec(3, vec![4], 5, 0)).unwrap().zeros_like();
        let logits = forward(&p, &toy_batch(6, 3, 5)).unwrap();
        assert_eq!((logits.rows, logits.cols), (6, 5));
        assert!(logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_matches_hand_computation() {
        let p = Params {
            activation: Activation::Relu,
            layers: vec![DenseLayer {
                rows: 2,
                cols: 3,
                weights: vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0],
                bias: vec![0.5, -0.5, 0.0],
            }],
        };
        let b = Batch::new(2, vec![3.0, 4.0], vec![0]).unwrap();
        let logits = forward(&p, &b).unwrap();
        // [3, 4] · W + b = [3 + 0.5, 4 - 0.5, 6 - 4]
        assert_eq!(logits.data, vec![3.5, 3.5, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = init_params(&spec(3, vec![], 2, 0)).unwrap();
        let err = forward(&p, &toy_batch(2, 4, 2)).unwrap_err();
        assert!(matches!(err, NnError::Dimension { .. }));
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let p = init_params(&spec(3, vec![], 4, 0)).unwrap().zeros_like();
        let (loss, _) = loss_and_grad(&p, &toy_batch(8, 3, 4)).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-5);
        assert!((loss - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn out_of_range_label_is_error() {
        let p = init_params(&spec(3, vec![], 2, 0)).unwrap();
        let mut b = toy_batch(4, 3, 2);
        b.labels[2] = 2;
        assert_eq!(
            loss_and_grad(&p, &b).unwrap_err(),
            NnError::Label {
                index: 2,
                label: 2,
                num_classes: 2
            }
        );
    }

    #[test]
    fn duplicated_batch_gives_same_loss_and_grads() {
        let p = init_params(&spec(4, vec![6], 3, 9)).unwrap();
        let b = toy_batch(5, 4, 3);
        let doubled = Batch::concat(4, [&b, &b]);
        let (l1, g1) = loss_and_grad(&p, &b).unwrap();
        let (l2, g2) = loss_and_grad(&p, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-9);
        for (a, b) in g1.layers.iter().zip(&g2.layers) {
            for (x, y) in a.weights.iter().chain(&a.bias).zip(b.weights.iter().chain(&b.bias)) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let p = Params {
            activation: Activation::Tanh,
            layers: vec![DenseLayer {
                rows: 1,
                cols: 1,
                weights: vec![1.0],
                bias: vec![1.0],
            }],
        };
        let mut g = p.zeros_like();
        g.layers[0].weights[0] = 0.5;
        let next = sgd_step(&p, &g, 0.1).unwrap();
        assert!((next.layers[0].weights[0] - 0.95).abs() < 1e-7);
        assert_eq!(next.layers[0].bias[0], 1.0);
        assert_eq!(
            sgd_step(&p, &g, 0.0).unwrap_err(),
            NnError::InvalidLearningRate(0.0)
        );
        let tiny = sgd_step(&p, &g, f32::MIN_POSITIVE).unwrap();
        assert_eq!(tiny, p);
    }

    #[test]
    fn sgd_rejects_non_finite_result() {
        let p = init_params(&spec(2, vec![], 2, 0)).unwrap();
        let mut g = p.zeros_like();
        g.layers[0].weights[0] = f32::INFINITY;
        assert_eq!(sgd_step(&p, &g, 1.0).unwrap_err(), NnError::NonFinite);
    }

    #[test]
    fn two_steps_reduce_loss_on_linear_model() {
        let p0 = init_params(&spec(4, vec![], 3, 5)).unwrap();
        let b = toy_batch(12, 4, 3);
        let (l0, g0) = loss_and_grad(&p0, &b).unwrap();
        let p1 = sgd_step(&p0, &g0, 0.05).unwrap();
        let (l1, g1) = loss_and_grad(&p1, &b).unwrap();
        let p2 = sgd_step(&p1, &g1, 0.05).unwrap();
        let (l2, _) = loss_and_grad(&p2, &b).unwrap();
        assert!(l1 < l0 && l2 < l1, "{l0} {l1} {l2}");
    }

    #[test]
    fn topk_examples() {
        let m = Matrix {
            rows: 1,
            cols: 4,
            data: vec![0.1, 0.5, 0.2, 0.9],
        };
        assert_eq!(topk_from_logits(&m, 2).unwrap(), vec![vec![3, 1]]);
        let mut all = topk_from_logits(&m, 4).unwrap().remove(0);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        let tie = Matrix {
            rows: 1,
            cols: 2,
            data: vec![1.0, 1.0],
        };
        assert_eq!(topk_from_logits(&tie, 1).unwrap(), vec![vec![0]]);
        assert!(matches!(
            topk_from_logits(&m, 5),
            Err(NnError::Range { k: 5, .. })
        ));
        assert!(matches!(
            topk_from_logits(&m, 0),
            Err(NnError::Range { k: 0, .. })
        ));
    }

    #[test]
    fn predict_topk_checks_k_before_forward() {
        let p = init_params(&spec(3, vec![], 3, 0)).unwrap();
        assert!(matches!(
            predict_topk(&p, &toy_batch(2, 3, 3), 4),
            Err(NnError::Range { .. })
        ));
        let preds = predict_topk(&p, &toy_batch(2, 3, 3), 3).unwrap();
        assert_eq!(preds.len(), 2);
    }
}
