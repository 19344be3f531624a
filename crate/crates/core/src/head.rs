//! Feedforward decision head trained in reverse mode.
//!
//! Dense layers with ReLU between them and a single output logit. Dropout is
//! inverted (kept activations are scaled by `1/(1−p)`) and only active in
//! [`Mode::Train`]. The optimizer is Adam with decoupled weight decay.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect(),
            bias: (0..outputs).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
struct Moments {
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    pub dropout: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    moments: Vec<Moments>,
    pub step: u64,
}

/// Values recorded by a forward pass. Consumed by [`MlpParams::backward`],
/// so a tape cannot be replayed:
///
/// ```compile_fail
/// # use dgs::head::{MlpParams, Mode};
/// # use rand::SeedableRng;
/// # let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
/// let mlp = MlpParams::new(2, &[], 0.1, 0.0, 1e-3, &mut rng).unwrap();
/// let (_, tape) = mlp.forward(&[1.0, 2.0], Mode::Eval, &mut rng).unwrap();
/// let _ = mlp.backward(tape, 1.0);
/// let _ = mlp.backward(tape, 1.0);
/// ```
#[derive(Debug)]
pub struct Tape {
    /// Input seen by each layer (after dropout).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    /// Per-unit dropout multipliers applied to each hidden output.
    masks: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros(params: &MlpParams) -> Self {
        MlpGrads {
            weights: params.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .flat_map(|v| v.iter_mut())
            .for_each(|x| *x *= k);
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).flatten().all(|x| x.is_finite())
    }
}

impl MlpParams {
    /// `hidden` lists hidden widths; an empty slice gives a single linear layer.
    pub fn new(
        input: usize,
        hidden: &[usize],
        dropout: f64,
        weight_decay: f64,
        learning_rate: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input == 0 || hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0,1)")));
        }
        if !(learning_rate > 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::Config("head learning rate must be > 0, weight decay >= 0".into()));
        }
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers: Vec<Dense> = widths.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        let moments = layers
            .iter()
            .map(|l| Moments {
                m_w: vec![0.0; l.weights.len()],
                v_w: vec![0.0; l.weights.len()],
                m_b: vec![0.0; l.bias.len()],
                v_b: vec![0.0; l.bias.len()],
            })
            .collect();
        Ok(MlpParams { layers, dropout, weight_decay, learning_rate, moments, step: 0 })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// `Σ (out·in + out)` over layers.
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64], mode: Mode, rng: &mut impl Rng) -> Result<(f64, Tape)> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "head expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let last = self.layers.len() - 1;
        let mut tape = Tape { inputs: Vec::new(), pre: Vec::new(), masks: Vec::new() };
        let mut current = x.to_vec();
        let mut z = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.apply(&current, &mut z);
            tape.inputs.push(std::mem::take(&mut current));
            if l == last {
                break;
            }
            let mut act: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            tape.pre.push(z.clone());
            let mask = (mode == Mode::Train && self.dropout > 0.0).then(|| {
                let keep = 1.0 / (1.0 - self.dropout);
                (0..act.len())
                    .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep })
                    .collect::<Vec<f64>>()
            });
            if let Some(m) = &mask {
                act.iter_mut().zip(m).for_each(|(a, k)| *a *= k);
            }
            tape.masks.push(mask);
            current = act;
        }
        Ok((z[0], tape))
    }

    /// Deterministic eval-mode logit without recording a tape.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "head expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut current = x.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.apply(&current, &mut z);
            if l < last {
                current.clear();
                current.extend(z.iter().map(|&v| v.max(0.0)));
            }
        }
        Ok(z[0])
    }

    /// First-layer pre-activation contribution of the input slice starting at
    /// column `offset`. Bias is not included.
    pub fn first_layer_partial(&self, x: &[f64], offset: usize, out: &mut Vec<f64>) {
        let layer = &self.layers[0];
        out.clear();
        out.extend(layer.weights.chunks_exact(layer.inputs).map(|row| {
            row[offset..offset + x.len()].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }

    /// Finishes an eval-mode pass from first-layer pre-activations computed
    /// without bias (sum of [`Self::first_layer_partial`] pieces).
    pub fn predict_from_partial(&self, partial: &[f64], scratch: &mut Vec<f64>) -> f64 {
        let first = &self.layers[0];
        let last = self.layers.len() - 1;
        scratch.clear();
        scratch.extend(partial.iter().zip(&first.bias).map(|(z, b)| z + b));
        if last == 0 {
            return scratch[0];
        }
        let mut current: Vec<f64> = scratch.iter().map(|&v| v.max(0.0)).collect();
        for (l, layer) in self.layers.iter().enumerate().skip(1) {
            layer.apply(&current, scratch);
            if l < last {
                current.clear();
                current.extend(scratch.iter().map(|&v| v.max(0.0)));
            }
        }
        scratch[0]
    }

    /// Returns parameter gradients and `dL/dx`.
    pub fn backward(&self, tape: Tape, dlogit: f64) -> (MlpGrads, Vec<f64>) {
        let mut grads = MlpGrads::zeros(self);
        let mut delta = vec![dlogit];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &tape.inputs[l];
            let gw = &mut grads.weights[l];
            for (o, &d) in delta.iter().enumerate() {
                grads.bias[l][o] += d;
                if d != 0.0 {
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
                }
            }
            let mut dx = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    dx.iter_mut().zip(row).for_each(|(g, w)| *g += d * w);
                }
            }
            if l > 0 {
                // through dropout, then ReLU of the previous layer
                if let Some(mask) = &tape.masks[l - 1] {
                    dx.iter_mut().zip(mask).for_each(|(g, k)| *g *= k);
                }
                dx.iter_mut()
                    .zip(&tape.pre[l - 1])
                    .for_each(|(g, &z)| if z <= 0.0 { *g = 0.0 });
            }
            delta = dx;
        }
        (grads, delta)
    }

    /// Decoupled weight decay followed by a bias-corrected Adam update.
    pub fn adam_step(&mut self, grads: &MlpGrads) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("head gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = self.learning_rate;
        let decay = 1.0 - lr * self.weight_decay;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                p[i] *= decay;
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        };
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let mo = &mut self.moments[l];
            update(&mut layer.weights, &grads.weights[l], &mut mo.m_w, &mut mo.v_w);
            update(&mut layer.bias, &grads.bias[l], &mut mo.m_b, &mut mo.v_b);
        }
        Ok(())
    }
}

/// Sigmoid cross-entropy with the positive term weighted by `pos_weight`.
/// Returns `(loss, dL/dlogit)`.
pub fn bce_loss(logit: f64, label: u8, pos_weight: f64) -> (f64, f64) {
    // log σ(x) = −softplus(−x), log(1−σ(x)) = −softplus(x)
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let sig = if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    };
    if label == 1 {
        (pos_weight * softplus(-logit), pos_weight * (sig - 1.0))
    } else {
        (softplus(logit), sig)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    bce_loss(x, 0, 1.0).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(weights: Vec<f64>) -> MlpParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = MlpParams::new(weights.len(), &[], 0.0, 0.0, 1e-3, &mut rng).unwrap();
        p.layers[0].weights = weights;
        p.layers[0].bias = vec![0.0];
        p
    }

    #[test]
    fn linear_forward_and_backward() {
        let p = linear(vec![1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (logit, tape) = p.forward(&[2.0, 3.0], Mode::Eval, &mut rng).unwrap();
        assert_eq!(logit, 2.0);
        let (g, dx) = p.backward(tape, 1.0);
        assert_eq!(dx, vec![1.0, 0.0]);
        assert_eq!(g.weights[0], vec![2.0, 3.0]);
        assert!(p.forward(&[1.0], Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn eval_is_deterministic_and_train_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MlpParams::new(5, &[32], 0.3, 0.0, 1e-3, &mut rng).unwrap();
        let x = [0.1, -0.4, 0.9, 0.0, 1.2];
        let a = p.forward(&x, Mode::Eval, &mut rng).unwrap().0;
        let b = p.forward(&x, Mode::Eval, &mut rng).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a, p.predict(&x).unwrap());
        let t1 = p.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
        let t2 = p.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
        assert_eq!(t1, t2);
    }

    #[test]
    fn relu_blocks_negative_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = MlpParams::new(1, &[2], 0.0, 0.0, 1e-3, &mut rng).unwrap();
        p.layers[0].weights = vec![1.0, -1.0];
        p.layers[0].bias = vec![0.0, 0.0];
        p.layers[1].weights = vec![1.0, 1.0];
        let (_, tape) = p.forward(&[2.0], Mode::Eval, &mut rng).unwrap();
        let (g, dx) = p.backward(tape, 1.0);
        assert_eq!(g.bias[0], vec![1.0, 0.0]);
        assert_eq!(dx, vec![1.0]);
    }

    #[test]
    fn bce_closed_forms() {
        let (l, g) = bce_loss(0.0, 1, 1.0);
        assert!((l - 2f64.ln()).abs() < 1e-15 && (g + 0.5).abs() < 1e-15);
        let (l, g) = bce_loss(40.0, 1, 1.0);
        assert!(l < 1e-17 && g.abs() < 1e-17 && l.is_finite());
        let (l, g) = bce_loss(-800.0, 0, 1.0);
        assert!(l.abs() < 1e-300 && g.abs() < 1e-300);
        assert_eq!(bce_loss(0.0, 0, 1.0).1, 0.5);
        assert_eq!(bce_loss(0.0, 1, 3.0).1, -1.5);
    }

    #[test]
    fn adam_closed_forms() {
        let mut p = linear(vec![1.0, -2.0]);
        p.learning_rate = 0.01;
        let before = p.clone();
        p.adam_step(&MlpGrads::zeros(&before)).unwrap();
        assert_eq!(p.layers, before.layers);

        let mut p = before.clone();
        let mut g = MlpGrads::zeros(&p);
        g.weights[0] = vec![0.5, -3.0];
        p.adam_step(&g).unwrap();
        let w = &p.layers[0].weights;
        assert!((w[0] - (1.0 - 0.01 * 0.5 / (0.5 + ADAM_EPS))).abs() < 1e-12);
        assert!((w[1] - (-2.0 + 0.01 * 3.0 / (3.0 + ADAM_EPS))).abs() < 1e-12);

        let mut p = before.clone();
        p.weight_decay = 0.1;
        p.adam_step(&MlpGrads::zeros(&p)).unwrap();
        assert!((p.layers[0].weights[1] - (-2.0 * (1.0 - 0.01 * 0.1))).abs() < 1e-15);

        let mut g = MlpGrads::zeros(&p);
        g.bias[0][0] = f64::INFINITY;
        assert!(p.adam_step(&g).is_err());
    }

    #[test]
    fn split_prediction_matches_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for hidden in [vec![], vec![8], vec![8, 4]] {
            let p = MlpParams::new(6, &hidden, 0.2, 0.0, 1e-3, &mut rng).unwrap();
            let x = [0.3, -0.2, 0.9, 0.1, 0.0, -1.0];
            let (mut a, mut b, mut scratch) = (Vec::new(), Vec::new(), Vec::new());
            p.first_layer_partial(&x[..3], 0, &mut a);
            p.first_layer_partial(&x[3..], 3, &mut b);
            let sum: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u + v).collect();
            let split = p.predict_from_partial(&sum, &mut scratch);
            assert!((split - p.predict(&x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MlpParams::new(100, &[], 0.1, 0.0, 1e-3, &mut rng).unwrap();
        assert_eq!(p.parameter_count(), 101);
        let p = MlpParams::new(10, &[32, 16], 0.1, 0.0, 1e-3, &mut rng).unwrap();
        assert_eq!(p.parameter_count(), 10 * 32 + 32 + 32 * 16 + 16 + 17);
    }
}
