//! Clipped-surrogate policy optimization for diagonal Gaussian policies.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{clip_grad_norm, Adam, GaussianPolicy, Mlp, Parameters};

/// Hyperparameters of one update phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            epochs: 4,
            minibatch: 512,
            entropy_coef: 0.005,
            max_grad_norm: 1.0,
        }
    }
}

/// Samples for one update. `raw` holds the pre-squash Gaussian samples and
/// `log_prob` their log density under the behaviour policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoBatch {
    pub obs: Array2<f64>,
    pub raw: Array2<f64>,
    pub log_prob: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.log_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_prob.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        for m in [self.obs.nrows(), self.raw.nrows(), self.advantages.len(), self.returns.len()] {
            if m != n {
                return Err(Error::ShapeMismatch { expected: n, actual: m });
            }
        }
        Ok(())
    }
}

/// State-value network; predictions are `scale * mlp(x)` so the network
/// works on targets of order one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub mlp: Mlp,
    pub scale: f64,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], scale: f64, rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self {
            mlp: Mlp::new(&sizes, 1.0, rng),
            scale,
        }
    }

    pub fn predict(&self, obs: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.mlp.predict(obs)?.column(0).iter().map(|v| v * self.scale).collect())
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.mlp.forward(obs)?.0[0] * self.scale)
    }

    /// `0.5 * mean((mlp(x) - target / scale)^2)` and its parameter gradient.
    pub fn loss_and_grad(&self, obs: ArrayView2<f64>, returns: &[f64]) -> Result<(f64, Mlp)> {
        let (out, cache) = self.mlp.forward_batch(obs)?;
        let n = returns.len() as f64;
        let mut g = Array2::zeros((returns.len(), 1));
        let mut loss = 0.0;
        for (i, r) in returns.iter().enumerate() {
            let e = out[[i, 0]] - r / self.scale;
            loss += 0.5 * e * e / n;
            g[[i, 0]] = e / n;
        }
        Ok((loss, self.mlp.backward(&cache, g.view()).0))
    }
}

/// Clipped-surrogate loss on one minibatch and its gradient in
/// [`Parameters`] order (network weights, then `log_std`).
#[derive(Debug, Clone)]
pub struct SurrogateGrad {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub max_ratio_deviation: f64,
}

/// `-mean(min(rho A, clip(rho, 1 - eps, 1 + eps) A)) - c_ent * entropy`.
pub fn surrogate_loss_and_grad(
    policy: &GaussianPolicy,
    obs: ArrayView2<f64>,
    raw: ArrayView2<f64>,
    old_log_prob: &[f64],
    advantages: &[f64],
    clip: f64,
    entropy_coef: f64,
) -> Result<SurrogateGrad> {
    let n = old_log_prob.len();
    if n == 0 {
        return Err(Error::invalid("empty policy batch"));
    }
    let (mean, cache) = policy.mlp.forward_batch(obs)?;
    let ls = policy.log_std_slice();
    let d = ls.len();
    let inv_std: Vec<f64> = ls.iter().map(|l| (-l).exp()).collect();
    let log_norm: f64 = ls.iter().sum::<f64>() + 0.5 * d as f64 * 1.837_877_066_409_345_5;
    let nf = n as f64;

    let mut gm = Array2::zeros((n, d));
    let mut g_ls = vec![-entropy_coef; d];
    let (mut loss, mut kl, mut clipped, mut max_dev) = (0.0, 0.0, 0usize, 0.0f64);
    let mut z = vec![0.0; d];
    for i in 0..n {
        let mut sq = 0.0;
        for j in 0..d {
            z[j] = (raw[[i, j]] - mean[[i, j]]) * inv_std[j];
            sq += z[j] * z[j];
        }
        let logp = -0.5 * sq - log_norm;
        let log_ratio = logp - old_log_prob[i];
        let rho = log_ratio.exp();
        let a = advantages[i];
        let unclipped = rho * a;
        let clipped_obj = rho.clamp(1.0 - clip, 1.0 + clip) * a;
        loss -= unclipped.min(clipped_obj) / nf;
        kl += ((rho - 1.0) - log_ratio) / nf;
        max_dev = max_dev.max((rho - 1.0).abs());
        let active = !((a > 0.0 && rho > 1.0 + clip) || (a < 0.0 && rho < 1.0 - clip));
        if !active {
            clipped += 1;
            continue;
        }
        // d loss / d log pi
        let c = -rho * a / nf;
        for j in 0..d {
            gm[[i, j]] = c * z[j] * inv_std[j];
            g_ls[j] += c * (z[j] * z[j] - 1.0);
        }
    }
    loss -= entropy_coef * policy.entropy();
    let (g_mlp, _) = policy.mlp.backward(&cache, gm.view());
    let mut grads: Vec<f64> = g_mlp.iter().copied().collect();
    grads.extend(g_ls);
    Ok(SurrogateGrad {
        loss,
        grads,
        approx_kl: kl,
        clip_fraction: clipped as f64 / nf,
        max_ratio_deviation: max_dev,
    })
}

/// Diagnostics averaged over all minibatches of an update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// `max |rho - 1|` on the first minibatch of the first epoch.
    pub first_ratio_deviation: f64,
}

/// `epochs` shuffled passes of minibatch updates on the policy and value net.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut GaussianPolicy,
    policy_opt: &mut Adam,
    value: &mut ValueNet,
    value_opt: &mut Adam,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    if batch.is_empty() {
        return Err(Error::invalid("empty PPO batch"));
    }
    batch.check()?;
    let n = batch.len();
    let mb = cfg.minibatch.clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut stats = PpoStats::default();
    let mut count = 0usize;
    for epoch in 0..cfg.epochs {
        idx.shuffle(rng);
        for (k, chunk) in idx.chunks(mb).enumerate() {
            let obs = batch.obs.select(Axis(0), chunk);
            let raw = batch.raw.select(Axis(0), chunk);
            let lp: Vec<f64> = chunk.iter().map(|&i| batch.log_prob[i]).collect();
            let adv: Vec<f64> = chunk.iter().map(|&i| batch.advantages[i]).collect();
            let ret: Vec<f64> = chunk.iter().map(|&i| batch.returns[i]).collect();

            let mut s = surrogate_loss_and_grad(policy, obs.view(), raw.view(), &lp, &adv, cfg.clip, cfg.entropy_coef)?;
            if epoch == 0 && k == 0 {
                stats.first_ratio_deviation = s.max_ratio_deviation;
            }
            clip_grad_norm(&mut s.grads, cfg.max_grad_norm);
            policy_opt.step(policy, &s.grads);
            policy.clamp_log_std();

            let (vl, vg) = value.loss_and_grad(obs.view(), &ret)?;
            let mut vg = vg.to_vec();
            clip_grad_norm(&mut vg, cfg.max_grad_norm);
            value_opt.step(&mut value.mlp, &vg);

            stats.policy_loss += s.loss;
            stats.value_loss += vl;
            stats.approx_kl += s.approx_kl;
            stats.clip_fraction += s.clip_fraction;
            count += 1;
        }
    }
    if count > 0 {
        let c = count as f64;
        stats.policy_loss /= c;
        stats.value_loss /= c;
        stats.approx_kl /= c;
        stats.clip_fraction /= c;
    }
    stats.entropy = policy.entropy();
    Ok(stats)
}
