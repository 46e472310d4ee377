//! Scalar reward terms for the retriever and the controller.

use nalgebra::{Quaternion, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SPEED_EPS;
use crate::motion::{remove_yaw, CharacterFrame, Goal};

/// Reward weights, kernel scales and prior-reward constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    /// Retriever goal weight.
    pub retr_goal: f64,
    /// Retriever prior weight.
    pub retr_prior: f64,
    pub ctrl_goal: f64,
    pub ctrl_ref: f64,
    pub ctrl_prior: f64,
    pub w_height: f64,
    pub w_root_rot: f64,
    pub w_root_angvel: f64,
    pub w_local: f64,
    pub c_dir: f64,
    pub c_spd: f64,
    pub c_face: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub k_height: f64,
    pub k_root_rot: f64,
    pub k_root_angvel: f64,
    pub k_local: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            retr_goal: 0.7,
            retr_prior: 0.3,
            ctrl_goal: 0.5,
            ctrl_ref: 0.3,
            ctrl_prior: 0.2,
            w_height: 0.25,
            w_root_rot: 0.25,
            w_root_angvel: 0.25,
            w_local: 0.25,
            c_dir: 1.0,
            c_spd: 0.5,
            c_face: 0.25,
            alpha: 0.5,
            epsilon: 1e-4,
            k_height: 10.0,
            k_root_rot: 2.0,
            k_root_angvel: 0.1,
            k_local: 4.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.retr_goal,
            self.retr_prior,
            self.ctrl_goal,
            self.ctrl_ref,
            self.ctrl_prior,
            self.w_height,
            self.w_root_rot,
            self.w_root_angvel,
            self.w_local,
            self.c_dir,
            self.c_spd,
            self.c_face,
            self.k_height,
            self.k_root_rot,
            self.k_root_angvel,
            self.k_local,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("reward weights must be finite and non-negative"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid("epsilon must lie in (0, 1)"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be positive"));
        }
        Ok(())
    }

    pub fn reference_weight_sum(&self) -> f64 {
        self.w_height + self.w_root_rot + self.w_root_angvel + self.w_local
    }

    /// Upper bound of the prior reward, `-alpha ln(epsilon)`.
    pub fn prior_max(&self) -> f64 {
        -self.alpha * self.epsilon.ln()
    }
}

/// Horizontal velocity and heading extracted from a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalObservation {
    pub velocity: Vector2<f64>,
    pub yaw: f64,
}

impl From<&CharacterFrame> for GoalObservation {
    fn from(f: &CharacterFrame) -> Self {
        Self {
            velocity: f.planar_velocity(),
            yaw: f.yaw(),
        }
    }
}

/// Distance between the goal and a state's velocity and heading:
/// direction cosine term, speed difference and optional facing term.
pub fn goal_distance(goal: &Goal, q: &GoalObservation, w: &RewardWeights) -> f64 {
    let vg = goal.desired_velocity;
    let vs = q.velocity;
    let (sg, ss) = (vg.norm(), vs.norm());
    let dir = if sg < SPEED_EPS || ss < SPEED_EPS {
        0.0
    } else {
        // 1 - cos as half the squared chord between unit vectors
        0.5 * (vg / sg - vs / ss).norm_squared()
    };
    let face = goal
        .desired_facing
        .map_or(0.0, |f| 1.0 - (q.yaw - f).cos());
    w.c_dir * dir + w.c_spd * (sg - ss).abs() + w.c_face * face
}

/// `exp(-d)`; applied to the retrieved state it is the retriever's goal
/// reward, applied to the simulated state the controller's.
pub fn goal_reward(goal: &Goal, q: &GoalObservation, w: &RewardWeights) -> f64 {
    (-goal_distance(goal, q, w)).exp()
}

/// Breakdown of the reference-tracking reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceReward {
    pub height: f64,
    pub root_rot: f64,
    pub root_angvel: f64,
    pub local: f64,
    pub total: f64,
}

/// Geodesic angle between two rotations.
pub fn rotation_angle(a: &Quaternion<f64>, b: &Quaternion<f64>) -> f64 {
    let d = (a.coords.dot(&b.coords) / (a.norm() * b.norm())).abs().min(1.0);
    2.0 * d.acos()
}

/// Height, heading-free root rotation, root-local angular velocity and
/// yaw-local endpoint terms, each a Gaussian kernel, weighted and summed.
pub fn reference_reward(sim: &CharacterFrame, reference: &CharacterFrame, w: &RewardWeights) -> ReferenceReward {
    let dh = sim.root_pos.z - reference.root_pos.z;
    let height = (-w.k_height * dh * dh).exp();
    let theta = rotation_angle(&remove_yaw(&sim.root_rot), &remove_yaw(&reference.root_rot));
    let root_rot = (-w.k_root_rot * theta * theta).exp();
    let dw = (sim.root_angvel - reference.root_angvel).norm_squared();
    let root_angvel = (-w.k_root_angvel * dw).exp();
    let n = sim.endpoints.len().max(1) as f64;
    let mse: f64 = sim
        .endpoints
        .iter()
        .zip(&reference.endpoints)
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        / n;
    let local = (-w.k_local * mse).exp();
    let total = w.w_height * height + w.w_root_rot * root_rot + w.w_root_angvel * root_angvel + w.w_local * local;
    ReferenceReward {
        height,
        root_rot,
        root_angvel,
        local,
        total,
    }
}

/// `-alpha * ln(max(1 - D, epsilon))`.
pub fn prior_reward(d_out: f64, alpha: f64, epsilon: f64) -> f64 {
    -alpha * (1.0 - d_out).max(epsilon).ln()
}

/// Retriever reward for one tick.
pub fn retriever_reward(goal_r: f64, prior_r: f64, w: &RewardWeights) -> f64 {
    w.retr_goal * goal_r + w.retr_prior * prior_r
}

/// Controller reward for one tick.
pub fn controller_reward(goal_r: f64, ref_r: f64, prior_r: f64, w: &RewardWeights) -> f64 {
    w.ctrl_goal * goal_r + w.ctrl_ref * ref_r + w.ctrl_prior * prior_r
}

/// Both composite rewards.
pub fn composite_rewards(
    retr_goal_r: f64,
    ctrl_goal_r: f64,
    ref_r: f64,
    retr_prior_r: f64,
    ctrl_prior_r: f64,
    w: &RewardWeights,
) -> (f64, f64) {
    (
        retriever_reward(retr_goal_r, retr_prior_r, w),
        controller_reward(ctrl_goal_r, ref_r, ctrl_prior_r, w),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{generate_synthetic_clips, PlanarTransform};

    #[test]
    fn goal_distance_zero_when_matched() {
        let w = RewardWeights::default();
        let g = Goal::new(1.0, 1.0, Some(0.3));
        let q = GoalObservation {
            velocity: Vector2::new(1.0, 1.0),
            yaw: 0.3,
        };
        assert_eq!(goal_distance(&g, &q, &w), 0.0);
        assert_eq!(goal_reward(&g, &q, &w), 1.0);
    }

    #[test]
    fn antiparallel_is_two_c_dir() {
        let w = RewardWeights::default();
        let g = Goal::new(0.0, 1.5, None);
        let q = GoalObservation {
            velocity: Vector2::new(0.0, -1.5),
            yaw: 2.0,
        };
        assert!((goal_distance(&g, &q, &w) - 2.0 * w.c_dir).abs() < 1e-12);
    }

    #[test]
    fn slow_speeds_drop_direction() {
        let w = RewardWeights::default();
        let g = Goal::new(0.01, 0.0, None);
        let q = GoalObservation {
            velocity: Vector2::new(-0.02, 0.0),
            yaw: 0.0,
        };
        assert!((goal_distance(&g, &q, &w) - w.c_spd * 0.01).abs() < 1e-15);
    }

    #[test]
    fn prior_closed_forms() {
        assert_eq!(prior_reward(0.0, 0.7, 1e-4), 0.0);
        assert!((prior_reward(0.5, 1.0, 1e-4) - std::f64::consts::LN_2).abs() < 1e-12);
        let clamped = prior_reward(1.0 - 0.5e-4, 0.5, 1e-4);
        assert!((clamped - 0.5 * -(1e-4f64).ln()).abs() < 1e-12);
        assert!((clamped - 4.6052).abs() < 1e-4);
    }

    #[test]
    fn reference_reward_identity_and_invariance() {
        let w = RewardWeights::default();
        let clip = generate_synthetic_clips("walk", 1, 6).unwrap().remove(0);
        let f = &clip.frames[4];
        let r = reference_reward(f, f, &w);
        assert_eq!(r.total, w.reference_weight_sum());
        let moved = PlanarTransform::new(3.0, -7.0, 2.2).apply_frame(f);
        let r2 = reference_reward(&moved, f, &w);
        assert!((r2.total - r.total).abs() < 1e-9);
    }

    #[test]
    fn composites() {
        let w = RewardWeights::default();
        let (rr, rc) = composite_rewards(1.0, 1.0, 1.0, 1.0, 1.0, &w);
        assert!((rr - (w.retr_goal + w.retr_prior)).abs() < 1e-15);
        assert!((rc - (w.ctrl_goal + w.ctrl_ref + w.ctrl_prior)).abs() < 1e-15);
        let w0 = RewardWeights {
            ctrl_prior: 0.0,
            ..w
        };
        assert_eq!(controller_reward(0.4, 0.9, 3.0, &w0), w.ctrl_goal * 0.4 + w.ctrl_ref * 0.9);
    }

    #[test]
    fn invalid_weights() {
        let mut w = RewardWeights::default();
        w.epsilon = 1.5;
        assert!(w.validate().is_err());
        let mut w = RewardWeights::default();
        w.c_dir = -1.0;
        assert!(w.validate().is_err());
    }
}
