//! Retrieval-augmented adversarial motion prior.
//!
//! Real samples are windows of consecutive demonstration states. Generated
//! samples pair simulated states with the state that the retrieved clip
//! reaches next, so the discriminator judges the simulated transition
//! conditioned on where the reference motion is going.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{disc_block_dim, extract_disc_observation, DiscObservation};
use crate::motion::{CharacterState, MotionClip};
use crate::neural::{sigmoid, softplus, Adam, Mlp, Parameters};
use crate::retrieval::{RetrievalEnv, RetrievalState};

/// Extra states before `s_t` and after `s~_{t+2}` in each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiscWindow {
    pub before: usize,
    pub after: usize,
}

impl DiscWindow {
    pub fn states(&self) -> usize {
        3 + self.before + self.after
    }

    pub fn obs_dim(&self, endpoints: usize) -> usize {
        self.states() * disc_block_dim(endpoints)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TripletSource {
    Demo,
    /// Two simulated states then retrieved ones.
    SimRa,
    /// Simulated state, then the retrieved transition.
    Retr,
    /// Simulated states only (no retrieval augmentation).
    Sim,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTriplet {
    pub obs: DiscObservation,
    pub source: TripletSource,
}

/// Demonstration window starting at frame `t - before` of a clip.
pub fn assemble_demo_window(clip: &MotionClip, t: usize, window: DiscWindow) -> Result<TransitionTriplet> {
    let n = window.states();
    if t < window.before || t - window.before + n > clip.len() {
        return Err(Error::OutOfRange { index: t, len: clip.len() });
    }
    let start = t - window.before;
    let states: Vec<CharacterState> = (start..start + n)
        .map(|i| CharacterState::new(clip.frames[i].clone(), i as u64))
        .collect();
    let refs: Vec<&CharacterState> = states.iter().collect();
    Ok(TransitionTriplet {
        obs: extract_disc_observation(&refs),
        source: TripletSource::Demo,
    })
}

/// `(s_t, s_{t+1}, s_{t+2})` from a demonstration clip.
pub fn assemble_demo_triplet(clip: &MotionClip, t: usize) -> Result<TransitionTriplet> {
    assemble_demo_window(clip, t, DiscWindow::default())
}

/// Generated sample from simulated history (oldest first, ending with
/// `s_{t+1}`) and the retrieved clip stepped past it.
pub fn assemble_ra_fake_window(
    sim: &[&CharacterState],
    env: &RetrievalEnv,
    retr: &RetrievalState,
    window: DiscWindow,
) -> Result<TransitionTriplet> {
    if sim.len() != window.before + 2 {
        return Err(Error::invalid(format!(
            "need {} simulated states, got {}",
            window.before + 2,
            sim.len()
        )));
    }
    let ahead = env.peek_ahead(retr, window.after + 1)?;
    let mut states: Vec<&CharacterState> = sim.to_vec();
    states.extend(ahead.iter());
    Ok(TransitionTriplet {
        obs: extract_disc_observation(&states),
        source: TripletSource::SimRa,
    })
}

/// `(s_t, s_{t+1}, s~_{t+2})`.
pub fn assemble_ra_fake(
    s_t: &CharacterState,
    s_t1: &CharacterState,
    env: &RetrievalEnv,
    retr: &RetrievalState,
) -> Result<TransitionTriplet> {
    assemble_ra_fake_window(&[s_t, s_t1], env, retr, DiscWindow::default())
}

/// Retrieved-transition sample: simulated history ending at `s_t`, then the
/// current retrieved state and its successors.
pub fn assemble_retrieved_fake_window(
    sim: &[&CharacterState],
    env: &RetrievalEnv,
    retr: &RetrievalState,
    window: DiscWindow,
) -> Result<TransitionTriplet> {
    if sim.len() != window.before + 1 {
        return Err(Error::invalid(format!(
            "need {} simulated states, got {}",
            window.before + 1,
            sim.len()
        )));
    }
    let cur = env.current(retr)?;
    let ahead = env.peek_ahead(retr, window.after + 1)?;
    let mut states: Vec<&CharacterState> = sim.to_vec();
    states.push(&cur);
    states.extend(ahead.iter());
    Ok(TransitionTriplet {
        obs: extract_disc_observation(&states),
        source: TripletSource::Retr,
    })
}

/// `(s_t, s~_{t+1}, s~_{t+2})`.
pub fn assemble_retrieved_fake(
    s_t: &CharacterState,
    env: &RetrievalEnv,
    retr: &RetrievalState,
) -> Result<TransitionTriplet> {
    assemble_retrieved_fake_window(&[s_t], env, retr, DiscWindow::default())
}

/// Fixed-capacity ring of observation rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingBuffer {
    dim: usize,
    capacity: usize,
    data: Vec<f64>,
    len: usize,
    head: usize,
}

impl RingBuffer {
    pub fn new(dim: usize, capacity: usize) -> Self {
        assert!(capacity > 0, "ring buffer capacity must be positive");
        Self {
            dim,
            capacity,
            data: Vec::new(),
            len: 0,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        if self.len < self.capacity {
            self.data.extend_from_slice(row);
            self.len += 1;
        } else {
            self.data[self.head * self.dim..(self.head + 1) * self.dim].copy_from_slice(row);
        }
        self.head = (self.head + 1) % self.capacity;
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        if self.is_empty() {
            return Err(Error::invalid("cannot sample from an empty buffer"));
        }
        let mut out = Array2::zeros((n, self.dim));
        for mut r in out.rows_mut() {
            let i = rng.random_range(0..self.len);
            r.assign(&ndarray::ArrayView1::from(self.row(i)));
        }
        Ok(out)
    }
}

/// Real and generated sample buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscBuffers {
    pub demo: RingBuffer,
    pub fake: RingBuffer,
}

impl DiscBuffers {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self {
            demo: RingBuffer::new(dim, capacity),
            fake: RingBuffer::new(dim, capacity),
        }
    }

    pub fn push(&mut self, t: &TransitionTriplet) -> Result<()> {
        match t.source {
            TripletSource::Demo => self.demo.push(t.obs.as_slice()),
            _ => self.fake.push(t.obs.as_slice()),
        }
    }
}

/// Loss value, diagnostics and parameter gradient of the discriminator objective.
#[derive(Debug, Clone)]
pub struct DiscLoss {
    pub loss: f64,
    pub grads: Mlp,
    pub mean_d_demo: f64,
    pub mean_d_fake: f64,
    /// Mean squared input-gradient norm on demo samples.
    pub grad_penalty: f64,
}

/// `-E_demo[ln D] - E_fake[ln(1 - D)] + (w_gp / 2) E_demo[|grad_x logit|^2]`
/// with `D = sigmoid(logit)`.
pub fn discriminator_loss(
    net: &Mlp,
    demo: ArrayView2<f64>,
    fake: ArrayView2<f64>,
    w_gp: f64,
) -> Result<DiscLoss> {
    if demo.nrows() == 0 || fake.nrows() == 0 {
        return Err(Error::invalid("discriminator batches must be non-empty"));
    }
    if demo.ncols() != fake.ncols() {
        return Err(Error::ShapeMismatch {
            expected: demo.ncols(),
            actual: fake.ncols(),
        });
    }
    let (nd, nf) = (demo.nrows() as f64, fake.nrows() as f64);

    let (ld, cd) = net.forward_batch(demo)?;
    let (lf, cf) = net.forward_batch(fake)?;
    let mut loss = 0.0;
    let mut sum_dd = 0.0;
    let mut gd = Array2::zeros((demo.nrows(), 1));
    for (i, &l) in ld.column(0).iter().enumerate() {
        let s = sigmoid(l);
        sum_dd += s;
        loss += softplus(-l) / nd;
        gd[[i, 0]] = -(1.0 - s) / nd;
    }
    let mut sum_df = 0.0;
    let mut gf = Array2::zeros((fake.nrows(), 1));
    for (i, &l) in lf.column(0).iter().enumerate() {
        let s = sigmoid(l);
        sum_df += s;
        loss += softplus(l) / nf;
        gf[[i, 0]] = s / nf;
    }
    let (mut grads, _) = net.backward(&cd, gd.view());
    let (gfake, _) = net.backward(&cf, gf.view());
    grads.add_assign(&gfake);

    let gp_mean = if w_gp > 0.0 {
        let coef = vec![0.5 * w_gp / nd; demo.nrows()];
        let (gp_grads, norms) = net.input_grad_penalty_grads(&cd, &coef);
        grads.add_assign(&gp_grads);
        norms.iter().sum::<f64>() / nd
    } else {
        net.input_gradient(&cd).iter().map(|x| x * x).sum::<f64>() / nd
    };
    loss += 0.5 * w_gp * gp_mean;
    Ok(DiscLoss {
        loss,
        grads,
        mean_d_demo: sum_dd / nd,
        mean_d_fake: sum_df / nf,
        grad_penalty: gp_mean,
    })
}

/// Discriminator network with its optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub net: Mlp,
    pub opt: Adam,
    pub w_gp: f64,
}

/// Diagnostics of an update round.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DiscStats {
    pub loss: f64,
    pub mean_d_demo: f64,
    pub mean_d_fake: f64,
    pub grad_penalty: f64,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], lr: f64, w_gp: f64, rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let net = Mlp::new(&sizes, 1.0, rng);
        let opt = Adam::new(net.num_params(), lr);
        Self { net, opt, w_gp }
    }

    /// `D(x)` in `(0, 1)`.
    pub fn score(&self, obs: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.net.forward(obs)?.0[0]))
    }

    pub fn score_batch(&self, obs: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.net.predict(obs)?.column(0).iter().map(|&l| sigmoid(l)).collect())
    }

    /// One optimizer step on the given batches.
    pub fn train_step(&mut self, demo: ArrayView2<f64>, fake: ArrayView2<f64>) -> Result<DiscStats> {
        let l = discriminator_loss(&self.net, demo, fake, self.w_gp)?;
        self.opt.step(&mut self.net, &l.grads.to_vec());
        Ok(DiscStats {
            loss: l.loss,
            mean_d_demo: l.mean_d_demo,
            mean_d_fake: l.mean_d_fake,
            grad_penalty: l.grad_penalty,
        })
    }
}

/// `steps` updates on balanced batches drawn from the buffers; diagnostics
/// are averaged over the steps. Zero steps leaves the parameters untouched.
pub fn update_discriminator<R: Rng + ?Sized>(
    buffers: &DiscBuffers,
    disc: &mut Discriminator,
    steps: usize,
    batch: usize,
    rng: &mut R,
) -> Result<DiscStats> {
    if buffers.demo.is_empty() || buffers.fake.is_empty() {
        return Err(Error::invalid("discriminator update needs non-empty demo and fake buffers"));
    }
    let half = (batch / 2).max(1);
    let mut acc = DiscStats::default();
    for _ in 0..steps {
        let d = buffers.demo.sample(half, rng)?;
        let f = buffers.fake.sample(half, rng)?;
        let s = disc.train_step(d.view(), f.view())?;
        acc.loss += s.loss;
        acc.mean_d_demo += s.mean_d_demo;
        acc.mean_d_fake += s.mean_d_fake;
        acc.grad_penalty += s.grad_penalty;
    }
    if steps > 0 {
        let n = steps as f64;
        acc.loss /= n;
        acc.mean_d_demo /= n;
        acc.mean_d_fake /= n;
        acc.grad_penalty /= n;
    }
    Ok(acc)
}
