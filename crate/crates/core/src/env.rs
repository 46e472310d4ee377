//! Surrogate character dynamics at the 30 Hz clock.
//!
//! The root integrates a commanded horizontal acceleration and yaw rate;
//! height and yaw-local endpoints follow their targets through a first-order
//! lag. Gaussian noise perturbs velocity and endpoints.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{remove_yaw, yaw_quat, CharacterFrame, CharacterState, Goal, DT};
use crate::retrieval::RetrievalDatabase;

/// Dynamics, noise, bounds and termination thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// First-order tracking rate for height and endpoints, 1/s.
    pub lag_rate: f64,
    pub sigma_v: f64,
    pub sigma_e: f64,
    /// Reset perturbation.
    pub init_sigma: f64,
    pub accel_max: f64,
    pub yaw_rate_max: f64,
    pub height_min: f64,
    pub height_max: f64,
    pub endpoint_max: f64,
    /// Horizontal speed cap, m/s.
    pub speed_max: f64,
    pub fall_height: f64,
    pub speed_error_max: f64,
    pub speed_error_ticks: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            lag_rate: 10.0,
            sigma_v: 0.02,
            sigma_e: 0.005,
            init_sigma: 0.01,
            accel_max: 10.0,
            yaw_rate_max: 2.0 * std::f64::consts::PI,
            height_min: 0.2,
            height_max: 1.5,
            endpoint_max: 1.5,
            speed_max: 8.0,
            fall_height: 0.15,
            speed_error_max: 6.0,
            speed_error_ticks: 30,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.lag_rate,
            self.accel_max,
            self.yaw_rate_max,
            self.endpoint_max,
            self.speed_max,
            self.speed_error_max,
        ];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("environment rates and bounds must be positive"));
        }
        if [self.sigma_v, self.sigma_e, self.init_sigma]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::invalid("noise magnitudes must be non-negative"));
        }
        if !(self.height_min < self.height_max && self.height_min > 0.0) {
            return Err(Error::invalid("height bounds must satisfy 0 < min < max"));
        }
        Ok(())
    }
}

/// Actuator targets for one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlAction {
    /// Horizontal root acceleration, world frame, m/s^2.
    pub target_root_accel: Vector2<f64>,
    pub target_yaw_rate: f64,
    pub target_height: f64,
    /// Yaw-local endpoint targets.
    pub target_endpoints: Vec<Vector3<f64>>,
}

impl ControlAction {
    /// Holds the current pose: no acceleration, no turning, current targets.
    pub fn hold(frame: &CharacterFrame) -> Self {
        Self {
            target_root_accel: Vector2::zeros(),
            target_yaw_rate: 0.0,
            target_height: frame.root_pos.z,
            target_endpoints: frame.endpoints.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.target_root_accel.iter().all(|x| x.is_finite())
            && self.target_yaw_rate.is_finite()
            && self.target_height.is_finite()
            && self.target_endpoints.iter().all(|e| e.iter().all(|x| x.is_finite()))
    }

    /// Each component limited to the configured bounds.
    pub fn clamped(&self, cfg: &EnvConfig) -> Self {
        let a = self.target_root_accel;
        let n = a.norm();
        let target_root_accel = if n > cfg.accel_max { a * (cfg.accel_max / n) } else { a };
        Self {
            target_root_accel,
            target_yaw_rate: self.target_yaw_rate.clamp(-cfg.yaw_rate_max, cfg.yaw_rate_max),
            target_height: self.target_height.clamp(cfg.height_min, cfg.height_max),
            target_endpoints: self
                .target_endpoints
                .iter()
                .map(|e| e.map(|x| x.clamp(-cfg.endpoint_max, cfg.endpoint_max)))
                .collect(),
        }
    }
}

/// Reference-state initialization: a uniformly drawn database frame with
/// Gaussian noise of `init_sigma` on height, velocities and endpoints.
pub fn env_reset<R: Rng + ?Sized>(rng: &mut R, db: &RetrievalDatabase, cfg: &EnvConfig) -> CharacterState {
    let clip = db.clip(rng.random_range(0..db.len()));
    let mut f = clip.frames[rng.random_range(0..clip.len())].clone();
    if cfg.init_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.init_sigma).expect("finite sigma");
        let mut jitter = |x: &mut f64| *x += n.sample(rng);
        jitter(&mut f.root_pos.z);
        f.root_linvel.iter_mut().for_each(&mut jitter);
        f.root_angvel.iter_mut().for_each(&mut jitter);
        for e in f.endpoints.iter_mut() {
            e.iter_mut().for_each(&mut jitter);
        }
    }
    CharacterState::new(f, 0)
}

/// Advances the character by one tick.
///
/// Velocity integrates the clamped acceleration (trapezoidal position
/// update), yaw integrates the yaw rate, height and endpoints close
/// `1 - exp(-lag_rate * dt)` of their remaining error. The root tilt is kept.
pub fn env_step<R: Rng + ?Sized>(
    state: &CharacterState,
    action: &ControlAction,
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<CharacterState> {
    if !action.is_finite() {
        return Err(Error::invalid("control action has non-finite components"));
    }
    let e_count = state.frame.endpoints.len();
    if action.target_endpoints.len() != e_count {
        return Err(Error::ShapeMismatch {
            expected: e_count,
            actual: action.target_endpoints.len(),
        });
    }
    let a = action.clamped(cfg);
    let f = &state.frame;
    let alpha = 1.0 - (-cfg.lag_rate * DT).exp();

    let v0 = f.planar_velocity();
    let mut v1 = v0 + a.target_root_accel * DT;
    if cfg.sigma_v > 0.0 {
        let n = Normal::new(0.0, cfg.sigma_v).expect("finite sigma");
        v1 += Vector2::new(n.sample(rng), n.sample(rng));
    }
    let s = v1.norm();
    if s > cfg.speed_max {
        v1 *= cfg.speed_max / s;
    }
    let dp = (v0 + v1) * (0.5 * DT);

    let h0 = f.root_pos.z;
    let h1 = h0 + alpha * (a.target_height - h0);

    let tilt = remove_yaw(&f.root_rot);
    let yaw1 = f.yaw() + a.target_yaw_rate * DT;
    let rot1 = yaw_quat(yaw1) * tilt;
    let w_local = tilt.conjugate() * nalgebra::Quaternion::from_imag(Vector3::new(0.0, 0.0, a.target_yaw_rate)) * tilt;

    let noise_e = (cfg.sigma_e > 0.0).then(|| Normal::new(0.0, cfg.sigma_e).expect("finite sigma"));
    let mut endpoints = Vec::with_capacity(e_count);
    let mut endpoint_vels = Vec::with_capacity(e_count);
    for (e0, t) in f.endpoints.iter().zip(&a.target_endpoints) {
        let mut e1 = e0 + (t - e0) * alpha;
        if let Some(n) = &noise_e {
            e1 += Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        }
        endpoint_vels.push((e1 - e0) / DT);
        endpoints.push(e1);
    }

    let frame = CharacterFrame {
        root_pos: Vector3::new(f.root_pos.x + dp.x, f.root_pos.y + dp.y, h1),
        root_rot: rot1,
        root_linvel: Vector3::new(v1.x, v1.y, (h1 - h0) / DT),
        root_angvel: w_local.imag(),
        endpoints,
        endpoint_vels,
    };
    Ok(CharacterState::new(frame, state.time_index + 1))
}

/// Tracks sustained speed error across ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TerminationMonitor {
    pub over_ticks: u32,
}

impl TerminationMonitor {
    /// True iff the root is below the fall height, any component is
    /// non-finite, or the speed error has exceeded its bound for the
    /// configured number of consecutive ticks.
    pub fn check(&mut self, state: &CharacterState, goal: &Goal, cfg: &EnvConfig) -> bool {
        let f = &state.frame;
        if !f.is_finite() || f.root_pos.z < cfg.fall_height {
            return true;
        }
        let err = (f.planar_velocity() - goal.desired_velocity).norm();
        if err > cfg.speed_error_max {
            self.over_ticks += 1;
        } else {
            self.over_ticks = 0;
        }
        self.over_ticks >= cfg.speed_error_ticks
    }

    pub fn reset(&mut self) {
        self.over_ticks = 0;
    }
}
