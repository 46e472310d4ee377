//! Retrieval keys, raw queries and discriminator observations.
//!
//! Key layout for `E` end effectors (`D_k = 6 + 6E`, 30 for `E = 4`):
//!
//! | slots            | content                                          |
//! |------------------|--------------------------------------------------|
//! | `0..2`           | first-frame root horizontal velocity, yaw-local  |
//! | `2..4`           | clip average horizontal velocity, yaw-local      |
//! | `4`              | yaw change from first to final frame            |
//! | `5..5+3E`        | first-frame endpoints, yaw-local                 |
//! | `5+3E..5+6E`     | final-frame endpoints, yaw-local                 |
//! | `5+6E`           | first-frame root height                          |

use std::ops::Range;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::motion::{rotate2, rotate_z, wrap_angle, yaw_quat, CharacterFrame, CharacterState, Goal, MotionClip};

/// Speeds below this are treated as "no direction".
pub const SPEED_EPS: f64 = 0.05;

/// Slot ranges of a key vector for a given endpoint count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyLayout {
    pub endpoints: usize,
}

impl KeyLayout {
    pub const fn new(endpoints: usize) -> Self {
        Self { endpoints }
    }

    pub const fn dim(&self) -> usize {
        6 + 6 * self.endpoints
    }

    pub const fn initial_velocity(&self) -> Range<usize> {
        0..2
    }

    pub const fn average_velocity(&self) -> Range<usize> {
        2..4
    }

    pub const fn yaw_change(&self) -> usize {
        4
    }

    pub const fn first_endpoints(&self) -> Range<usize> {
        5..5 + 3 * self.endpoints
    }

    pub const fn final_endpoints(&self) -> Range<usize> {
        5 + 3 * self.endpoints..5 + 6 * self.endpoints
    }

    pub const fn height(&self) -> usize {
        5 + 6 * self.endpoints
    }
}

/// A retrieval key or query in raw (unnormalized) units.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyFeature(pub Vec<f64>);

impl KeyFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

fn push_endpoints(out: &mut Vec<f64>, pts: &[Vector3<f64>]) {
    for p in pts {
        out.extend_from_slice(&[p.x, p.y, p.z]);
    }
}

/// Key of a clip, computed once when a database is built.
pub fn extract_key(clip: &MotionClip) -> KeyFeature {
    let first = &clip.frames[0];
    let last = clip.frames.last().unwrap();
    let yaw0 = first.yaw();
    let mut k = Vec::with_capacity(6 + 6 * first.endpoints.len());

    let v0 = first.local_planar_velocity();
    k.extend_from_slice(&[v0.x, v0.y]);
    let disp = (last.root_pos - first.root_pos).xy();
    let avg = rotate2(disp / clip.duration(), -yaw0);
    k.extend_from_slice(&[avg.x, avg.y]);
    k.push(wrap_angle(last.yaw() - yaw0));
    push_endpoints(&mut k, &first.endpoints);
    push_endpoints(&mut k, &last.endpoints);
    k.push(first.root_pos.z);
    KeyFeature(k)
}

/// Query in key space built from the current state and the goal.
///
/// The instantaneous velocity comes from the state; the clip-average velocity
/// slot carries the goal velocity; pose slots repeat the current pose.
pub fn extract_raw_query(state: &CharacterState, goal: &Goal) -> KeyFeature {
    let f = &state.frame;
    let yaw = f.yaw();
    let mut k = Vec::with_capacity(6 + 6 * f.endpoints.len());

    let v0 = f.local_planar_velocity();
    k.extend_from_slice(&[v0.x, v0.y]);
    let g = rotate2(goal.desired_velocity, -yaw);
    k.extend_from_slice(&[g.x, g.y]);
    let facing = goal.desired_facing.or_else(|| {
        let v = goal.desired_velocity;
        (v.norm() >= SPEED_EPS).then(|| v.y.atan2(v.x))
    });
    k.push(facing.map_or(0.0, |face| wrap_angle(face - yaw)));
    push_endpoints(&mut k, &f.endpoints);
    push_endpoints(&mut k, &f.endpoints);
    k.push(f.root_pos.z);
    KeyFeature(k)
}

/// Per-dimension z-score statistics of a database's raw keys.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Mean and population standard deviation per dimension, std floored at 1e-6.
pub fn fit_norm_stats(keys: &[KeyFeature]) -> Result<NormStats> {
    if keys.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 keys to fit normalization, got {}",
            keys.len()
        )));
    }
    let d = keys[0].dim();
    if let Some(bad) = keys.iter().find(|k| k.dim() != d) {
        return Err(Error::ShapeMismatch {
            expected: d,
            actual: bad.dim(),
        });
    }
    Ok(fit_rows(keys.iter().map(|k| k.as_slice()), keys.len(), d))
}

/// Welford accumulation over rows.
pub(crate) fn fit_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, n: usize, d: usize) -> NormStats {
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for (count, row) in rows.enumerate() {
        let c = (count + 1) as f64;
        for j in 0..d {
            let delta = row[j] - mean[j];
            mean[j] += delta / c;
            m2[j] += delta * (row[j] - mean[j]);
        }
    }
    let std = m2
        .iter()
        .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
        .collect();
    NormStats { mean, std }
}

/// Floats per state block of a discriminator observation for `E` endpoints.
pub const fn disc_block_dim(endpoints: usize) -> usize {
    13 + 6 * endpoints
}

/// Discriminator input: one block per state, all expressed relative to the
/// first state's heading.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscObservation(pub Vec<f64>);

impl DiscObservation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Appends one state block in the heading frame `ref_yaw`.
///
/// Block: root height, forward and up axes of the root rotation (6), root
/// linear velocity (3), root-local angular velocity (3), endpoints,
/// endpoint velocities.
pub fn push_state_block(out: &mut Vec<f64>, f: &CharacterFrame, ref_yaw: f64) {
    out.push(f.root_pos.z);
    let rel = yaw_quat(-ref_yaw) * f.root_rot;
    let m: Matrix3<f64> = UnitQuaternion::new_normalize(rel).to_rotation_matrix().into_inner();
    let fwd = m.column(0);
    let up = m.column(2);
    out.extend_from_slice(&[fwd.x, fwd.y, fwd.z, up.x, up.y, up.z]);
    let v = rotate_z(&f.root_linvel, -ref_yaw);
    out.extend_from_slice(&[v.x, v.y, v.z]);
    let w = f.root_angvel;
    out.extend_from_slice(&[w.x, w.y, w.z]);
    push_endpoints(out, &f.endpoints);
    push_endpoints(out, &f.endpoint_vels);
}

/// Observation of a window of states for the motion discriminator.
pub fn extract_disc_observation(states: &[&CharacterState]) -> DiscObservation {
    let ref_yaw = states.first().map_or(0.0, |s| s.frame.yaw());
    let e = states.first().map_or(0, |s| s.frame.endpoints.len());
    let mut out = Vec::with_capacity(states.len() * disc_block_dim(e));
    for s in states {
        push_state_block(&mut out, &s.frame, ref_yaw);
    }
    DiscObservation(out)
}

/// Goal velocity in a heading frame.
pub fn local_goal(goal: &Goal, yaw: f64) -> Vector2<f64> {
    rotate2(goal.desired_velocity, -yaw)
}
