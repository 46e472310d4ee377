//! Hierarchical training: a retriever acting every `period` ticks and a
//! controller acting every tick, both optimized with PPO, plus the motion
//! discriminator that supplies their prior rewards.

mod gae;
mod ppo;
mod rollout;
mod train;

pub use gae::{compute_gae, compute_gae_discounted, normalize_advantages};
pub use ppo::{ppo_update, surrogate_loss_and_grad, PpoBatch, PpoConfig, PpoStats, SurrogateGrad, ValueNet};
pub use rollout::{hrl_rollout, ActMode, EnvSlot, RetrieverDecision, RolloutBatch, TickRecord};
pub use train::{train, IterationMetrics, Trainer};

use std::path::PathBuf;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{ControlAction, EnvConfig};
use crate::error::{Error, Result};
use crate::features::{disc_block_dim, extract_raw_query, local_goal, push_state_block};
use crate::motion::{rotate2, wrap_angle, CharacterState, Goal, DT};
use crate::neural::{Adam, GaussianPolicy, Parameters};
use crate::ragail::{DiscWindow, Discriminator};
use crate::retrieval::{RetrievalDatabase, DEFAULT_PERIOD};
use crate::rewards::RewardWeights;

/// Maps controller outputs to actuator targets around the retrieved
/// reference state.
///
/// Acceleration is a velocity feedback toward the reference plus a scaled
/// residual; yaw rate is the reference rate plus heading feedback and a
/// residual; height and endpoint targets invert the actuator lag so that a
/// zero residual lands on the reference pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlDecoding {
    pub velocity_gain: f64,
    pub accel_scale: f64,
    pub yaw_gain: f64,
    pub yaw_rate_scale: f64,
    pub height_scale: f64,
    pub endpoint_scale: f64,
}

impl Default for ControlDecoding {
    fn default() -> Self {
        Self {
            velocity_gain: 15.0,
            accel_scale: 2.0,
            yaw_gain: 15.0,
            yaw_rate_scale: 1.0,
            height_scale: 0.05,
            endpoint_scale: 0.05,
        }
    }
}

/// Controller action dimension for `E` endpoints.
pub const fn control_action_dim(endpoints: usize) -> usize {
    4 + 3 * endpoints
}

/// Turns a controller output into actuator targets.
pub fn decode_control(
    a: &[f64],
    s: &CharacterState,
    reference: &CharacterState,
    dec: &ControlDecoding,
    env: &EnvConfig,
) -> Result<ControlAction> {
    let e = s.frame.endpoints.len();
    if a.len() != control_action_dim(e) {
        return Err(Error::ShapeMismatch {
            expected: control_action_dim(e),
            actual: a.len(),
        });
    }
    let (f, r) = (&s.frame, &reference.frame);
    let yaw = f.yaw();
    let alpha = 1.0 - (-env.lag_rate * DT).exp();

    let v_err = r.planar_velocity() - f.planar_velocity();
    let accel = v_err * dec.velocity_gain + rotate2(nalgebra::Vector2::new(a[0], a[1]) * dec.accel_scale, yaw);

    let ref_world_w = UnitQuaternion::new_normalize(r.root_rot) * r.root_angvel;
    let yaw_rate = ref_world_w.z + dec.yaw_gain * wrap_angle(r.yaw() - yaw) + dec.yaw_rate_scale * a[2];

    let h_goal = r.root_pos.z + dec.height_scale * a[3];
    let target_height = f.root_pos.z + (h_goal - f.root_pos.z) / alpha;

    let target_endpoints = (0..e)
        .map(|k| {
            let res = Vector3::new(a[4 + 3 * k], a[5 + 3 * k], a[6 + 3 * k]) * dec.endpoint_scale;
            let goal = r.endpoints[k] + res;
            f.endpoints[k] + (goal - f.endpoints[k]) / alpha
        })
        .collect();
    Ok(ControlAction {
        target_root_accel: accel,
        target_yaw_rate: yaw_rate,
        target_height,
        target_endpoints,
    })
}

/// Controller input: own state, local goal, reference state in the
/// character's heading frame and the reference's relative planar pose.
pub fn controller_observation(s: &CharacterState, goal: &Goal, reference: &CharacterState) -> Vec<f64> {
    let e = s.frame.endpoints.len();
    let yaw = s.frame.yaw();
    let mut out = Vec::with_capacity(controller_obs_dim(e));
    push_state_block(&mut out, &s.frame, yaw);
    let g = local_goal(goal, yaw);
    out.extend_from_slice(&[g.x, g.y]);
    push_state_block(&mut out, &reference.frame, yaw);
    let rel = rotate2(reference.frame.root_pos.xy() - s.frame.root_pos.xy(), -yaw);
    let dyaw = wrap_angle(reference.frame.yaw() - yaw);
    out.extend_from_slice(&[rel.x, rel.y, dyaw.sin(), dyaw.cos()]);
    out
}

pub const fn controller_obs_dim(endpoints: usize) -> usize {
    2 * disc_block_dim(endpoints) + 6
}

/// Retriever input: the normalized raw query, own state and local goal.
pub fn retriever_observation(s: &CharacterState, goal: &Goal, db: &RetrievalDatabase) -> Vec<f64> {
    let yaw = s.frame.yaw();
    let raw = extract_raw_query(s, goal);
    let mut out = db.norm_stats().normalize(raw.as_slice());
    push_state_block(&mut out, &s.frame, yaw);
    let g = local_goal(goal, yaw);
    out.extend_from_slice(&[g.x, g.y]);
    out
}

pub const fn retriever_obs_dim(key_dim: usize, endpoints: usize) -> usize {
    key_dim + disc_block_dim(endpoints) + 2
}

/// Everything that defines a training run. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub env_count: usize,
    /// Ticks per environment per rollout; every rollout starts new episodes.
    pub horizon: usize,
    /// Retrieval period in ticks.
    pub period: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub lr: f64,
    pub retriever_lr: f64,
    pub retriever_epochs: usize,
    pub ppo_clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub retriever_hidden: Vec<usize>,
    pub controller_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub init_log_std_retriever: f64,
    pub init_log_std_controller: f64,
    pub disc_lr: f64,
    pub disc_steps: usize,
    pub disc_batch: usize,
    pub disc_buffer: usize,
    pub w_gp: f64,
    pub disc_window: DiscWindow,
    /// Training goals have speed uniform in `[0, v_max]`.
    pub v_max: f64,
    pub goal_resample_min: usize,
    pub goal_resample_max: usize,
    /// Generated samples take their last state from the retrieved clip.
    pub ra_discriminator: bool,
    /// With `false` the retriever weights stay at 1.
    pub learnable_retriever: bool,
    pub checkpoint_every: usize,
    /// Database files, used by the command-line front end.
    pub databases: Vec<PathBuf>,
    pub rewards: RewardWeights,
    pub env: EnvConfig,
    pub control: ControlDecoding,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 200,
            env_count: 16,
            horizon: 150,
            period: DEFAULT_PERIOD,
            gamma: 0.97,
            gae_lambda: 0.95,
            lr: 5e-5,
            retriever_lr: 5e-5,
            retriever_epochs: 4,
            ppo_clip: 0.2,
            epochs: 4,
            minibatch: 512,
            entropy_coef: 0.005,
            max_grad_norm: 1.0,
            retriever_hidden: vec![256, 128],
            controller_hidden: vec![256, 128],
            value_hidden: vec![256, 128],
            disc_hidden: vec![256, 128],
            init_log_std_retriever: -1.0,
            init_log_std_controller: -1.0,
            disc_lr: 1e-4,
            disc_steps: 8,
            disc_batch: 256,
            disc_buffer: 100_000,
            w_gp: 10.0,
            disc_window: DiscWindow::default(),
            v_max: 2.0,
            goal_resample_min: 90,
            goal_resample_max: 300,
            ra_discriminator: true,
            learnable_retriever: true,
            checkpoint_every: 10,
            databases: Vec::new(),
            rewards: RewardWeights::default(),
            env: EnvConfig::default(),
            control: ControlDecoding::default(),
        }
    }
}

impl TrainConfig {
    /// Small networks and a larger step size for single-core toy runs.
    pub fn toy() -> Self {
        Self {
            iterations: 40,
            retriever_hidden: vec![64, 64],
            controller_hidden: vec![64, 64],
            value_hidden: vec![64, 64],
            disc_hidden: vec![64, 64],
            lr: 3e-4,
            retriever_lr: 1e-3,
            retriever_epochs: 10,
            disc_lr: 3e-4,
            minibatch: 600,
            epochs: 3,
            disc_buffer: 20_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.ppo_clip > 0.0) {
            return bad("ppo_clip must be positive");
        }
        if !(self.lr > 0.0 && self.retriever_lr > 0.0 && self.disc_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.env_count == 0 || self.horizon == 0 || self.period == 0 || self.minibatch == 0 {
            return bad("env_count, horizon, period and minibatch must be positive");
        }
        if self.disc_batch < 2 || self.disc_buffer == 0 {
            return bad("disc_batch must be at least 2 and disc_buffer positive");
        }
        if !(self.v_max >= 0.0 && self.v_max.is_finite()) {
            return bad("v_max must be finite and non-negative");
        }
        if self.goal_resample_min == 0 || self.goal_resample_min > self.goal_resample_max {
            return bad("goal resample bounds must satisfy 0 < min <= max");
        }
        if self.w_gp < 0.0 || self.entropy_coef < 0.0 {
            return bad("w_gp and entropy_coef must be non-negative");
        }
        self.rewards.validate()?;
        self.env.validate()
    }

    pub fn ppo(&self) -> PpoConfig {
        PpoConfig {
            clip: self.ppo_clip,
            epochs: self.epochs,
            minibatch: self.minibatch,
            entropy_coef: self.entropy_coef,
            max_grad_norm: self.max_grad_norm,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| line_col(text, s.start))
                .unwrap_or((0, 0));
            Error::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Sizes that tie networks to databases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub key_dim: usize,
    pub endpoints: usize,
}

impl ObsLayout {
    pub fn retriever_obs(&self) -> usize {
        retriever_obs_dim(self.key_dim, self.endpoints)
    }

    pub fn controller_obs(&self) -> usize {
        controller_obs_dim(self.endpoints)
    }

    pub fn controller_action(&self) -> usize {
        control_action_dim(self.endpoints)
    }
}

/// All trainable state: both policies, their value functions and
/// optimizers, and the discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub layout: ObsLayout,
    pub retriever: GaussianPolicy,
    pub retriever_value: ValueNet,
    pub retriever_opt: Adam,
    pub retriever_value_opt: Adam,
    pub controller: GaussianPolicy,
    pub controller_value: ValueNet,
    pub controller_opt: Adam,
    pub controller_value_opt: Adam,
    pub disc: Discriminator,
}

impl Agent {
    pub fn new(cfg: &TrainConfig, layout: ObsLayout) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0xA6E7, 0, 0));
        let sizes = |i: usize, h: &[usize], o: usize| {
            let mut s = vec![i];
            s.extend_from_slice(h);
            s.push(o);
            s
        };
        let retriever = GaussianPolicy::new(
            &sizes(layout.retriever_obs(), &cfg.retriever_hidden, layout.key_dim),
            cfg.init_log_std_retriever,
            true,
            &mut rng,
        );
        let controller = GaussianPolicy::new(
            &sizes(layout.controller_obs(), &cfg.controller_hidden, layout.controller_action()),
            cfg.init_log_std_controller,
            false,
            &mut rng,
        );
        // value scales: rough per-decision return magnitudes
        let ctrl_scale = 1.0 / (1.0 - cfg.gamma);
        let retr_scale = cfg.period as f64 / (1.0 - cfg.gamma.powi(cfg.period as i32));
        let retriever_value = ValueNet::new(layout.retriever_obs(), &cfg.value_hidden, retr_scale, &mut rng);
        let controller_value = ValueNet::new(layout.controller_obs(), &cfg.value_hidden, ctrl_scale, &mut rng);
        let disc = Discriminator::new(cfg.disc_window.obs_dim(layout.endpoints), &cfg.disc_hidden, cfg.disc_lr, cfg.w_gp, &mut rng);
        Self {
            layout,
            retriever_opt: Adam::new(retriever.len(), cfg.retriever_lr),
            retriever_value_opt: Adam::new(retriever_value.mlp.num_params(), cfg.retriever_lr),
            controller_opt: Adam::new(controller.len(), cfg.lr),
            controller_value_opt: Adam::new(controller_value.mlp.num_params(), cfg.lr),
            retriever,
            retriever_value,
            controller,
            controller_value,
            disc,
        }
    }
}

/// Seed for an independent random stream identified by `(tag, a, b)`.
pub fn stream_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for v in [a, b] {
        x = x.wrapping_add(v.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
        x ^= x >> 30;
        x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 27;
    }
    x
}

/// Uniform direction, speed uniform in `[0, v_max]`, no facing.
pub fn sample_goal<R: Rng + ?Sized>(rng: &mut R, v_max: f64) -> Goal {
    let dir = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = rng.random_range(0.0..=v_max);
    Goal::new(speed * dir.cos(), speed * dir.sin(), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::env_step;
    use crate::motion::generate_synthetic_clips;
    use crate::motion::PlanarTransform;

    #[test]
    fn toml_roundtrip_and_hash() {
        let c = TrainConfig::toy();
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(TrainConfig::default().hash(), c.hash());
        let err = TrainConfig::from_toml("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            gamma: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_residual_tracks_reference_endpoints() {
        let clip = generate_synthetic_clips("walk", 1, 11).unwrap().remove(0);
        let clip = clip.transformed(&PlanarTransform::new(2.0, -1.0, 0.7));
        let env = EnvConfig {
            sigma_v: 0.0,
            sigma_e: 0.0,
            ..Default::default()
        };
        let dec = ControlDecoding {
            velocity_gain: 1.0 / DT,
            yaw_gain: 1.0 / DT,
            ..Default::default()
        };
        let mut s = CharacterState::new(clip.frames[0].clone(), 0);
        s.frame.endpoints.iter_mut().for_each(|e| e.z += 0.05);
        let zero = vec![0.0; control_action_dim(4)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 1..clip.len() {
            let r = CharacterState::new(clip.frames[t].clone(), t as u64);
            let a = decode_control(&zero, &s, &r, &dec, &env).unwrap();
            s = env_step(&s, &a, &env, &mut rng).unwrap();
            if t >= 2 {
                for (p, q) in s.frame.endpoints.iter().zip(&r.frame.endpoints) {
                    assert!((p - q).norm() < 0.01);
                }
            }
        }
    }
}
