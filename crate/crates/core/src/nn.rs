//! Small dense networks with ReLU hidden layers, trained with Adam.
//!
//! Parameters live in one flat vector, layer by layer, each layer stored as
//! its weight matrix (row-major, `out x in`) followed by its bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// Layer widths, input first, output last.
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations recorded during a forward pass.
pub struct Trace {
    /// `inputs[l]` is the input to layer `l` (post-ReLU for `l > 0`).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation outputs of every layer.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("network has at least one layer")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Network {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        })
    }

    /// Weights drawn from `U(-scale, scale)`; biases zero.
    pub fn uniform(sizes: &[usize], scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let nw = w[0] * w[1];
            for p in &mut net.params[off..off + nw] {
                *p = rng.random_range(-scale..scale);
            }
            off += nw + w[1];
        }
        Ok(net)
    }

    /// Glorot-uniform weights per layer; biases zero.
    pub fn glorot(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let nw = w[0] * w[1];
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            for p in &mut net.params[off..off + nw] {
                *p = rng.random_range(-limit..limit);
            }
            off += nw + w[1];
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Offsets of (weights, bias) for layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self.sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    /// Mutable view of the output layer's bias.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let l = self.num_layers() - 1;
        let (_, b) = self.layer_offsets(l);
        let n = self.sizes[l + 1];
        &mut self.params[b..b + n]
    }

    /// True for parameters that are weights (as opposed to biases).
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.params.len());
        for w in self.sizes.windows(2) {
            mask.extend(std::iter::repeat_n(true, w[0] * w[1]));
            mask.extend(std::iter::repeat_n(false, w[1]));
        }
        mask
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Raw (pre-activation) outputs of the last layer.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut act = x.to_vec();
        let mut off = 0;
        let nl = self.num_layers();
        for l in 0..nl {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut out = b.to_vec();
            for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
                *o += dot(row, &act);
            }
            if l + 1 < nl {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            act = out;
            off += n_in * n_out + n_out;
        }
        Ok(act)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let nl = self.num_layers();
        let mut inputs = Vec::with_capacity(nl);
        let mut pre = Vec::with_capacity(nl);
        let mut act = x.to_vec();
        let mut off = 0;
        for l in 0..nl {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut out = b.to_vec();
            for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
                *o += dot(row, &act);
            }
            let next: Vec<f64> = if l + 1 < nl {
                out.iter().map(|v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut act, next));
            pre.push(out);
            off += n_in * n_out + n_out;
        }
        Ok(Trace { inputs, pre })
    }

    /// Backpropagate `d_out` (gradient w.r.t. the raw outputs), accumulating
    /// parameter gradients into `grad` and returning the input gradient.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.params.len());
        let nl = self.num_layers();
        let mut delta = d_out.to_vec();
        for l in (0..nl).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let input = &trace.inputs[l];
            for o in 0..n_out {
                let d = delta[o];
                grad[b_off + o] += d;
                if d != 0.0 {
                    let g = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                    for (gi, xi) in g.iter_mut().zip(input) {
                        *gi += d * xi;
                    }
                }
            }
            let w = &self.params[w_off..w_off + n_in * n_out];
            let mut d_in = vec![0.0; n_in];
            for (o, row) in w.chunks_exact(n_in).enumerate() {
                let d = delta[o];
                if d != 0.0 {
                    for (di, wi) in d_in.iter_mut().zip(row) {
                        *di += d * wi;
                    }
                }
            }
            if l > 0 {
                // ReLU derivative at the previous layer's pre-activation.
                for (di, p) in d_in.iter_mut().zip(&trace.pre[l - 1]) {
                    if *p <= 0.0 {
                        *di = 0.0;
                    }
                }
            }
            delta = d_in;
        }
        delta
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Cross-entropy of softmax(logits) against `label`, and its logit gradient.
pub fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of sigmoid(logit) against `y`, and its gradient.
pub fn sigmoid_bce(logit: f64, y: f64) -> (f64, f64) {
    // log(1 + e^z) computed stably.
    let softplus = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    (softplus - y * logit, sigmoid(logit) - y)
}

/// Pinball loss `max(a(y - q), (a - 1)(y - q))` and its gradient in `q`.
pub fn pinball(pred: f64, y: f64, alpha: f64) -> (f64, f64) {
    let r = y - pred;
    if r >= 0.0 {
        (alpha * r, -alpha)
    } else {
        ((alpha - 1.0) * r, 1.0 - alpha)
    }
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// One minibatch Adam step. `loss_grad(i, output)` returns the loss of
/// example `i` and its gradient w.r.t. the raw network output. L2 weight
/// decay applies to weights only. Returns the mean batch loss.
pub fn minibatch_step<F>(
    net: &mut Network,
    adam: &mut Adam,
    inputs: &[Vec<f64>],
    batch: &[usize],
    weight_decay: f64,
    weight_mask: &[bool],
    mut loss_grad: F,
) -> Result<f64>
where
    F: FnMut(usize, &[f64]) -> (f64, Vec<f64>),
{
    let mut grad = vec![0.0; net.params.len()];
    let mut total = 0.0;
    for &i in batch {
        let trace = net.forward_trace(&inputs[i])?;
        let (loss, d_out) = loss_grad(i, trace.output());
        total += loss;
        net.backward(&trace, &d_out, &mut grad);
    }
    let n = batch.len().max(1) as f64;
    for (g, (p, is_w)) in grad.iter_mut().zip(net.params.iter().zip(weight_mask)) {
        *g /= n;
        if *is_w {
            *g += weight_decay * p;
        }
    }
    adam.step(&mut net.params, &grad);
    Ok(total / n)
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite-difference oracle shared by the gradient tests.

    /// Max relative error between `analytic` and a central difference of `f`
    /// at `x` with step `h`, using `max(|a|, |n|, floor)` as the scale.
    pub fn max_rel_error(
        x: &[f64],
        analytic: &[f64],
        h: f64,
        floor: f64,
        mut f: impl FnMut(&[f64]) -> f64,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic[i] - numeric).abs() / scale);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn softmax_xent_gradient_matches_fd() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let (_, g) = softmax_xent(&logits, 2);
        let err = gradcheck::max_rel_error(&logits, &g, 1e-5, 1e-8, |z| softmax_xent(z, 2).0);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let (l, g) = sigmoid_bce(800.0, 1.0);
        assert!(l.abs() < 1e-12 && g.abs() < 1e-12);
        let (l, _) = sigmoid_bce(-800.0, 1.0);
        assert!((l - 800.0).abs() < 1e-9);
    }

    #[test]
    fn input_and_param_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::uniform(&[4, 5, 3], 0.8, &mut rng).unwrap();
        let x = [0.2, -0.4, 0.9, 0.5];
        let trace = net.forward_trace(&x).unwrap();
        let (_, d_out) = softmax_xent(trace.output(), 1);
        let mut grad = vec![0.0; net.params.len()];
        let dx = net.backward(&trace, &d_out, &mut grad);

        let err = gradcheck::max_rel_error(&x, &dx, 1e-5, 1e-7, |xx| {
            softmax_xent(&net.forward(xx).unwrap(), 1).0
        });
        assert!(err < 1e-4, "input grad {err}");
        let err = gradcheck::max_rel_error(&net.params, &grad, 1e-5, 1e-7, |p| {
            let n = Network { sizes: net.sizes.clone(), params: p.to_vec() };
            softmax_xent(&n.forward(&x).unwrap(), 1).0
        });
        assert!(err < 1e-4, "param grad {err}");
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut adam = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }
}
