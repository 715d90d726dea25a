//! Independent f64 reimplementation of the dense classifier, used to check
//! the engine's forward pass and gradients.

use claas_core::nn::{init_params, loss_and_grad, Activation, Batch, ModelSpec, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Net64 {
    tanh: bool,
    /// (rows, cols, weights row-major, bias)
    layers: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

impl Net64 {
    pub fn from(params: &Params) -> Self {
        Net64 {
            tanh: params.activation == Activation::Tanh,
            layers: params
                .layers
                .iter()
                .map(|l| {
                    (
                        l.rows,
                        l.cols,
                        l.weights.iter().map(|&w| w as f64).collect(),
                        l.bias.iter().map(|&b| b as f64).collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (li, (rows, cols, w, b)) in self.layers.iter().enumerate() {
            let mut z = b.clone();
            for (j, zj) in z.iter_mut().enumerate() {
                for i in 0..*rows {
                    *zj += h[i] * w[i * cols + j];
                }
            }
            if li < last {
                for v in z.iter_mut() {
                    *v = if self.tanh { v.tanh() } else { v.max(0.0) };
                }
            }
            h = z;
        }
        h
    }

    pub fn loss(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z = self.logits(x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        total / xs.len() as f64
    }

    pub fn param_mut(&mut self, layer: usize, bias: bool, i: usize) -> &mut f64 {
        let l = &mut self.layers[layer];
        if bias {
            &mut l.3[i]
        } else {
            &mut l.2[i]
        }
    }
}

pub fn random_net(rng: &mut ChaCha8Rng, seed: u64) -> (Params, Batch) {
    let input_dim = rng.random_range(2..6);
    let hidden = rng.random_range(2..7);
    let num_classes = rng.random_range(2..5);
    let activation = if rng.random_bool(0.5) {
        Activation::Tanh
    } else {
        Activation::Relu
    };
    let spec = ModelSpec {
        input_dim,
        hidden_layers: vec![hidden],
        num_classes,
        activation,
        seed,
    };
    let mut params = init_params(&spec).unwrap();
    for l in params.layers.iter_mut() {
        for b in l.bias.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let n = 8;
    let features = (0..n * input_dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
    (params, Batch::new(input_dim, features, labels).unwrap())
}

/// Largest relative error between analytic gradients and central
/// differences of the f64 loss over `nets` random small networks.
pub fn max_gradient_error(nets: u64, h: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for net in 0..nets {
        let (params, batch) = random_net(&mut rng, net);
        let (_, grads) = loss_and_grad(&params, &batch).unwrap();
        let xs: Vec<Vec<f64>> = (0..batch.len())
            .map(|i| batch.row(i).iter().map(|&v| v as f64).collect())
            .collect();
        let mut oracle = Net64::from(&params);
        for (li, layer) in grads.layers.iter().enumerate() {
            let entries = layer
                .weights
                .iter()
                .enumerate()
                .map(|(i, &g)| (false, i, g))
                .chain(layer.bias.iter().enumerate().map(|(i, &g)| (true, i, g)));
            for (bias, i, g) in entries {
                let orig = *oracle.param_mut(li, bias, i);
                *oracle.param_mut(li, bias, i) = orig + h;
                let up = oracle.loss(&xs, &batch.labels);
                *oracle.param_mut(li, bias, i) = orig - h;
                let down = oracle.loss(&xs, &batch.labels);
                *oracle.param_mut(li, bias, i) = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = g as f64;
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    worst
}
