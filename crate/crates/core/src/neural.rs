//! Small dense networks with hand-written gradients.
//!
//! Hidden layers use `tanh`, the output layer is linear. Everything is `f64`
//! and batched row-wise (`batch x features`).

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

/// One affine layer, `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }
}

/// Multi-layer perceptron parameters; also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept by [`Mlp::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    /// `acts[0]` is the input, `acts[l]` the output of hidden layer `l`.
    acts: Vec<Array2<f64>>,
}

impl Cache {
    pub fn input(&self) -> &Array2<f64> {
        &self.acts[0]
    }
}

impl Mlp {
    /// Uniform Glorot initialisation; the output layer is scaled by `out_scale`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_scale: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let scale = if l + 1 == n { out_scale } else { 1.0 };
                let weight = Array2::from_shape_simple_fn((w[0], w[1]), || {
                    rng.random_range(-limit..limit) * scale
                });
                Dense {
                    weight,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self { layers }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.ncols()));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    /// All parameters in a fixed order.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum()
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Cache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&layer.weight);
            z += &layer.bias;
            if l == last {
                return Ok((z, Cache { acts }));
            }
            z.mapv_inplace(f64::tanh);
            acts.push(z);
        }
        unreachable!()
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_batch(x)?.0)
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Cache)> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        let (y, cache) = self.forward_batch(x)?;
        Ok((y.into_raw_vec_and_offset().0, cache))
    }

    /// Gradients of `sum(out_grad ⊙ output)` with respect to the parameters
    /// and the input.
    pub fn backward(&self, cache: &Cache, out_grad: ArrayView2<f64>) -> (Mlp, Array2<f64>) {
        let mut grads = self.zeros_like();
        let mut delta = out_grad.to_owned();
        for l in (0..self.layers.len()).rev() {
            let h = &cache.acts[l];
            grads.layers[l].weight = h.t().dot(&delta);
            grads.layers[l].bias = delta.sum_axis(Axis(0));
            let mut d_in = delta.dot(&self.layers[l].weight.t());
            if l > 0 {
                Zip::from(&mut d_in).and(h).for_each(|d, &a| *d *= 1.0 - a * a);
            }
            delta = d_in;
        }
        (grads, delta)
    }

    /// For a scalar-output network: `d out / d input` per row.
    pub fn input_gradient(&self, cache: &Cache) -> Array2<f64> {
        self.input_gradient_tape(cache).0
    }

    /// Returns the input gradient together with the per-layer tangents
    /// `(a_l, u_l)` of the backward sweep (index `l - 1` for hidden layer `l`).
    fn input_gradient_tape(&self, cache: &Cache) -> (Array2<f64>, Vec<(Array2<f64>, Array2<f64>)>) {
        assert_eq!(self.output_dim(), 1, "input gradient needs a scalar output");
        let b = cache.acts[0].nrows();
        let hidden = self.layers.len() - 1;
        let w_out = self.layers[hidden].weight.column(0).to_owned();
        let mut a = Array2::from_shape_fn((b, w_out.len()), |(_, j)| w_out[j]);
        let mut tape = vec![(Array2::zeros((0, 0)), Array2::zeros((0, 0))); hidden];
        for l in (1..=hidden).rev() {
            let h = &cache.acts[l];
            let mut u = a.clone();
            Zip::from(&mut u).and(h).for_each(|u, &h| *u *= 1.0 - h * h);
            let next = u.dot(&self.layers[l - 1].weight.t());
            tape[l - 1] = (a, u);
            a = next;
        }
        (a, tape)
    }

    /// Parameter gradient of `sum_b coef_b * |d out_b / d x_b|^2` for a
    /// scalar-output network (double backpropagation through the tanh stack).
    /// Also returns the per-row squared input-gradient norms.
    pub fn input_grad_penalty_grads(&self, cache: &Cache, coef: &[f64]) -> (Mlp, Vec<f64>) {
        let (g, tape) = self.input_gradient_tape(cache);
        let hidden = self.layers.len() - 1;
        let norms: Vec<f64> = g.rows().into_iter().map(|r| r.dot(&r)).collect();
        let mut grads = self.zeros_like();

        // adjoint of the backward sweep, walking it in reverse (input side first)
        let mut a_bar = g;
        for (mut row, c) in a_bar.rows_mut().into_iter().zip(coef) {
            row *= 2.0 * c;
        }
        let mut h_bar: Vec<Array2<f64>> = Vec::with_capacity(hidden);
        for l in 1..=hidden {
            let (a_l, u_l) = &tape[l - 1];
            let w = &self.layers[l - 1].weight;
            let u_bar = a_bar.dot(w);
            grads.layers[l - 1].weight += &a_bar.t().dot(u_l);
            let h = &cache.acts[l];
            let mut next_a_bar = u_bar.clone();
            let mut hb = u_bar;
            Zip::from(&mut next_a_bar)
                .and(&mut hb)
                .and(a_l)
                .and(h)
                .for_each(|ab, hb, &a, &h| {
                    let s = 1.0 - h * h;
                    let s_bar = *hb * a;
                    *ab *= s;
                    *hb = -2.0 * h * s_bar;
                });
            h_bar.push(hb);
            a_bar = next_a_bar;
        }
        let w_out_bar = a_bar.sum_axis(Axis(0));
        grads.layers[hidden].weight.column_mut(0).assign(&w_out_bar);

        // adjoint of the forward pass driven by the accumulated h_bar terms
        let mut carry: Option<Array2<f64>> = None;
        for l in (1..=hidden).rev() {
            let mut hb = h_bar[l - 1].clone();
            if let Some(c) = carry.take() {
                hb += &c;
            }
            let h = &cache.acts[l];
            Zip::from(&mut hb).and(h).for_each(|z, &h| *z *= 1.0 - h * h);
            let prev = &cache.acts[l - 1];
            grads.layers[l - 1].weight += &prev.t().dot(&hb);
            grads.layers[l - 1].bias += &hb.sum_axis(Axis(0));
            if l >= 2 {
                carry = Some(hb.dot(&self.layers[l - 1].weight.t()));
            }
        }
        (grads, norms)
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Diagonal Gaussian policy with state-independent log standard deviation.
///
/// With `squash` set, actions are `2 * sigmoid(u)` for Gaussian `u`, landing in
/// `(0, 2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mlp: Mlp,
    pub log_std: Array1<f64>,
    pub squash: bool,
}

/// A sampled action.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    /// Pre-squash Gaussian sample; what PPO stores.
    pub raw: Vec<f64>,
    /// The action handed to the environment.
    pub action: Vec<f64>,
    /// Log density of `action` (includes the squash Jacobian).
    pub log_prob: f64,
    /// Log density of `raw` under the Gaussian.
    pub raw_log_prob: f64,
}

/// Log density of `x` under a diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(x)
        .map(|((m, ls), x)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// `log |d(2 sigmoid(u)) / du|` summed over dimensions.
pub fn squash_log_det(raw: &[f64]) -> f64 {
    raw.iter()
        .map(|&u| std::f64::consts::LN_2 - softplus(u) - softplus(-u))
        .sum()
}

pub fn squash(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&u| 2.0 * sigmoid(u)).collect()
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], init_log_std: f64, squash: bool, rng: &mut R) -> Self {
        let mlp = Mlp::new(sizes, 0.01, rng);
        let d = mlp.output_dim();
        Self {
            mlp,
            log_std: Array1::from_elem(d, init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)),
            squash,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn clamp_log_std(&mut self) {
        self.log_std.mapv_inplace(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }

    pub fn log_std_slice(&self) -> &[f64] {
        self.log_std.as_slice().expect("contiguous log_std")
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mlp.forward(obs)?.0)
    }

    /// Maps a raw Gaussian sample to an environment action.
    pub fn to_action(&self, raw: &[f64]) -> Vec<f64> {
        if self.squash {
            squash(raw)
        } else {
            raw.to_vec()
        }
    }

    /// Deterministic action (the mean, squashed if applicable).
    pub fn act_deterministic(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.to_action(&self.mean(obs)?))
    }

    /// Samples given a precomputed mean.
    pub fn sample_from_mean<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> PolicySample {
        let ls = self.log_std_slice();
        let raw: Vec<f64> = mean
            .iter()
            .zip(ls)
            .map(|(m, l)| {
                let n: f64 = StandardNormal.sample(rng);
                m + l.clamp(LOG_STD_MIN, LOG_STD_MAX).exp() * n
            })
            .collect();
        self.sample_info(mean, raw)
    }

    fn sample_info(&self, mean: &[f64], raw: Vec<f64>) -> PolicySample {
        let raw_log_prob = gaussian_log_prob(mean, self.log_std_slice(), &raw);
        let (action, log_prob) = if self.squash {
            (squash(&raw), raw_log_prob - squash_log_det(&raw))
        } else {
            (raw.clone(), raw_log_prob)
        };
        PolicySample {
            raw,
            action,
            log_prob,
            raw_log_prob,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<PolicySample> {
        let mean = self.mean(obs)?;
        Ok(self.sample_from_mean(&mean, rng))
    }

    /// Gaussian entropy (of the pre-squash distribution).
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|l| l + 0.5 * (LN_2PI + 1.0)).sum()
    }
}

/// Anything Adam can update.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&f64));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64));

    fn len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.visit(&mut |x| v.push(*x));
        v
    }

    fn set_from(&mut self, src: &[f64]) {
        let mut i = 0;
        self.visit_mut(&mut |x| {
            *x = src[i];
            i += 1;
        });
    }
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&f64)) {
        self.iter().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.iter_mut().for_each(f);
    }
}

impl Parameters for GaussianPolicy {
    fn visit(&self, f: &mut dyn FnMut(&f64)) {
        self.mlp.iter().for_each(&mut *f);
        self.log_std.iter().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.mlp.iter_mut().for_each(&mut *f);
        self.log_std.iter_mut().for_each(f);
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected Adam update on flat slices; `t` counts from 1.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64) {
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
    }
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// Descends along `grads` (a loss gradient).
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &[f64]) {
        assert_eq!(grads.len(), self.m.len(), "gradient length does not match optimizer state");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |p| {
            let g = grads[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            i += 1;
        });
    }
}

/// Rescales `grads` so its Euclidean norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let n = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(&[3, 5, 2], 1.0, &mut rng);
        net.iter_mut().for_each(|x| *x = 0.0);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let net = Mlp {
            layers: vec![Dense {
                weight: Array2::eye(3),
                bias: Array1::zeros(3),
            }],
        };
        assert_eq!(net.forward(&[0.5, -1.0, 2.0]).unwrap().0, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[3, 4, 1], 1.0, &mut rng);
        assert!(matches!(net.forward(&[1.0]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn linear_net_closed_form_grads() {
        let net = Mlp {
            layers: vec![Dense {
                weight: array![[1.0], [2.0]],
                bias: array![0.5],
            }],
        };
        let (_, cache) = net.forward(&[3.0, -1.0]).unwrap();
        let (g, gin) = net.backward(&cache, array![[2.0]].view());
        assert_eq!(g.layers[0].weight, array![[6.0], [-2.0]]);
        assert_eq!(g.layers[0].bias, array![2.0]);
        assert_eq!(gin, array![[2.0, 4.0]]);
    }

    #[test]
    fn zero_out_grad_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[4, 6, 3], 1.0, &mut rng);
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let (g, gin) = net.backward(&cache, Array2::zeros((1, 3)).view());
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(gin.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mean_action_log_prob_unit_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = GaussianPolicy::new(&[2, 4, 3], 0.0, false, &mut rng);
        p.log_std.fill(0.0);
        let m = p.mean(&[0.3, 0.1]).unwrap();
        let lp = gaussian_log_prob(&m, p.log_std_slice(), &m);
        assert!((lp + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn min_std_samples_near_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GaussianPolicy::new(&[2, 4, 3], LOG_STD_MIN, false, &mut rng);
        let m = p.mean(&[0.3, 0.1]).unwrap();
        for _ in 0..100 {
            let s = p.sample(&[0.3, 0.1], &mut rng).unwrap();
            let d: f64 = s.action.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(d < 0.1);
        }
    }

    #[test]
    fn squashed_actions_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GaussianPolicy::new(&[2, 4, 5], 1.0, true, &mut rng);
        for _ in 0..200 {
            let s = p.sample(&[1.0, -1.0], &mut rng).unwrap();
            assert!(s.action.iter().all(|&a| a > 0.0 && a < 2.0));
        }
    }

    #[test]
    fn adam_zero_grad_no_change() {
        let mut p = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 1..5 {
            adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 0.1, t);
        }
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_constant_grad_step_is_lr() {
        let mut p = vec![0.0, 0.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let lr = 1e-3;
        let mut prev = p.clone();
        for t in 1..=2000 {
            adam_update(&mut p, &[3.0, -0.5], &mut m, &mut v, lr, t);
            if t > 1000 {
                assert!(((p[0] - prev[0]) + lr).abs() < 1e-9);
                assert!(((p[1] - prev[1]) - lr).abs() < 1e-9);
            }
            prev = p.clone();
        }
    }

    #[test]
    fn adam_descends_quadratic() {
        let target = [1.0, -3.0, 0.5];
        let loss = |p: &[f64]| p.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let mut p = vec![0.0; 3];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        let mut last = loss(&p);
        for t in 1..=10 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            adam_update(&mut p, &g, &mut m, &mut v, 0.1, t);
            let l = loss(&p);
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn adam_struct_matches_free_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(&[2, 3, 1], 1.0, &mut rng);
        let mut flat = net.to_vec();
        let g: Vec<f64> = (0..flat.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut opt = Adam::new(flat.len(), 0.01);
        let (mut m, mut v) = (vec![0.0; flat.len()], vec![0.0; flat.len()]);
        for t in 1..=3 {
            opt.step(&mut net, &g);
            adam_update(&mut flat, &g, &mut m, &mut v, 0.01, t);
        }
        assert_eq!(net.to_vec(), flat);
    }
}
