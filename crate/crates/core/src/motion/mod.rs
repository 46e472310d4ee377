//! Character frames, motion clips and the planar rigid transforms used to
//! replay a clip relative to the simulated character.

mod clipfile;
mod synth;

pub use clipfile::{load_clips, parse_clips, save_clips, write_clips_string, CLIP_FILE_VERSION};
pub use synth::{generate_synthetic_clips, MotionStyle};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulation and clip clock, frames per second.
pub const FPS: u32 = 30;
/// Seconds per tick.
pub const DT: f64 = 1.0 / FPS as f64;
/// Number of end effectors: left hand, right hand, left foot, right foot.
pub const NUM_ENDPOINTS: usize = 4;
/// Frames per database clip (15 transitions, 0.5 s at 30 fps).
pub const CLIP_FRAMES: usize = 16;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

/// Heading of a rotation: angle of the rotated x axis in the horizontal plane.
pub fn yaw_of(q: &Quaternion<f64>) -> f64 {
    let f = UnitQuaternion::new_unchecked(*q) * Vector3::x();
    f.y.atan2(f.x)
}

/// Rotation about world z.
pub fn yaw_quat(yaw: f64) -> Quaternion<f64> {
    let h = 0.5 * yaw;
    Quaternion::new(h.cos(), 0.0, 0.0, h.sin())
}

/// Rotation with its heading removed (`Rz(-yaw) * q`).
pub fn remove_yaw(q: &Quaternion<f64>) -> Quaternion<f64> {
    yaw_quat(-yaw_of(q)) * q
}

/// Rotates a horizontal vector by `yaw` radians.
pub fn rotate2(v: Vector2<f64>, yaw: f64) -> Vector2<f64> {
    let (s, c) = yaw.sin_cos();
    Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Rotates a 3-vector about world z.
pub fn rotate_z(v: &Vector3<f64>, yaw: f64) -> Vector3<f64> {
    let h = rotate2(v.xy(), yaw);
    Vector3::new(h.x, h.y, v.z)
}

/// One pose sample of the character.
///
/// Root quantities live in the world frame (angular velocity in the root
/// frame); endpoints and their velocities are expressed in the yaw-local root
/// frame, which makes them invariant to heading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterFrame {
    pub root_pos: Vector3<f64>,
    pub root_rot: Quaternion<f64>,
    pub root_linvel: Vector3<f64>,
    pub root_angvel: Vector3<f64>,
    pub endpoints: Vec<Vector3<f64>>,
    pub endpoint_vels: Vec<Vector3<f64>>,
}

impl CharacterFrame {
    /// A character standing still at `pos` with heading `yaw` and the given
    /// yaw-local endpoint positions.
    pub fn at_rest(pos: Vector3<f64>, yaw: f64, endpoints: Vec<Vector3<f64>>) -> Self {
        let n = endpoints.len();
        Self {
            root_pos: pos,
            root_rot: yaw_quat(yaw),
            root_linvel: Vector3::zeros(),
            root_angvel: Vector3::zeros(),
            endpoints,
            endpoint_vels: vec![Vector3::zeros(); n],
        }
    }

    pub fn yaw(&self) -> f64 {
        yaw_of(&self.root_rot)
    }

    pub fn height(&self) -> f64 {
        self.root_pos.z
    }

    /// Horizontal root velocity, world frame.
    pub fn planar_velocity(&self) -> Vector2<f64> {
        self.root_linvel.xy()
    }

    /// Horizontal root velocity in the yaw-local frame.
    pub fn local_planar_velocity(&self) -> Vector2<f64> {
        rotate2(self.root_linvel.xy(), -self.yaw())
    }

    pub fn is_finite(&self) -> bool {
        let v3 = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        v3(&self.root_pos)
            && self.root_rot.coords.iter().all(|x| x.is_finite())
            && v3(&self.root_linvel)
            && v3(&self.root_angvel)
            && self.endpoints.iter().all(v3)
            && self.endpoint_vels.iter().all(v3)
    }

    /// Checks the frame invariants; the error names the offending field.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if !self.is_finite() {
            return Err(("frame", "non-finite component".into()));
        }
        let n = self.root_rot.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(("root_rot", format!("quaternion norm {n} is not 1")));
        }
        let z = self.root_pos.z;
        if !(z > 0.0 && z < 3.0) {
            return Err(("root_pos", format!("root height {z} outside (0, 3)")));
        }
        if self.endpoints.len() != self.endpoint_vels.len() {
            return Err((
                "endpoint_vels",
                format!(
                    "{} endpoint velocities for {} endpoints",
                    self.endpoint_vels.len(),
                    self.endpoints.len()
                ),
            ));
        }
        Ok(())
    }
}

/// A frame at a point in simulated time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterState {
    pub frame: CharacterFrame,
    /// Ticks at 30 Hz.
    pub time_index: u64,
}

impl CharacterState {
    pub fn new(frame: CharacterFrame, time_index: u64) -> Self {
        Self { frame, time_index }
    }
}

/// A fixed-rate sequence of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub clip_id: u64,
    pub style_tag: String,
    pub fps: u32,
    pub frames: Vec<CharacterFrame>,
}

impl MotionClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration(&self) -> f64 {
        (self.frames.len().saturating_sub(1)) as f64 / self.fps as f64
    }

    /// Mean horizontal root speed over all frames.
    pub fn mean_speed(&self) -> f64 {
        let sum: f64 = self.frames.iter().map(|f| f.planar_velocity().norm()).sum();
        sum / self.frames.len().max(1) as f64
    }

    /// Validates frame and clip invariants, including the displacement /
    /// velocity self-consistency check (0.1 m per transition).
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: String| Error::Validation {
            clip_id: self.clip_id,
            field: field.to_string(),
            message,
        };
        if self.frames.len() < 2 {
            return Err(fail("frames", format!("{} frames, need at least 2", self.frames.len())));
        }
        if self.fps == 0 {
            return Err(fail("fps", "fps must be positive".into()));
        }
        let e = self.frames[0].endpoints.len();
        for (i, f) in self.frames.iter().enumerate() {
            f.check()
                .map_err(|(field, msg)| fail(field, format!("frame {i}: {msg}")))?;
            if f.endpoints.len() != e {
                return Err(fail(
                    "endpoints",
                    format!("frame {i}: {} endpoints, expected {e}", f.endpoints.len()),
                ));
            }
        }
        let dt = 1.0 / self.fps as f64;
        for (i, w) in self.frames.windows(2).enumerate() {
            let disp = w[1].root_pos - w[0].root_pos;
            let pred = (w[0].root_linvel + w[1].root_linvel) * (0.5 * dt);
            let err = (disp - pred).norm();
            if err > 0.1 {
                return Err(fail(
                    "root_linvel",
                    format!("transition {i}: displacement disagrees with velocity by {err:.3} m"),
                ));
            }
        }
        Ok(())
    }

    /// Applies a planar rigid transform to every frame.
    pub fn transformed(&self, t: &PlanarTransform) -> MotionClip {
        MotionClip {
            frames: self.frames.iter().map(|f| t.apply_frame(f)).collect(),
            ..self.clone()
        }
    }
}

/// Desired horizontal velocity and optional facing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub desired_velocity: Vector2<f64>,
    /// Radians; `None` means face the direction of travel.
    pub desired_facing: Option<f64>,
}

impl Goal {
    pub fn new(vx: f64, vy: f64, facing: Option<f64>) -> Self {
        Self {
            desired_velocity: Vector2::new(vx, vy),
            desired_facing: facing,
        }
    }

    pub fn still() -> Self {
        Self::new(0.0, 0.0, None)
    }

    pub fn speed(&self) -> f64 {
        self.desired_velocity.norm()
    }

    pub fn validate(&self, v_max: f64) -> Result<()> {
        let s = self.speed();
        if !s.is_finite() || self.desired_facing.is_some_and(|f| !f.is_finite()) {
            return Err(Error::invalid("goal has non-finite components"));
        }
        if s > v_max {
            return Err(Error::invalid(format!(
                "goal speed {s:.3} m/s exceeds v_max {v_max} m/s"
            )));
        }
        Ok(())
    }
}

/// Horizontal translation plus rotation about world z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarTransform {
    pub translation: Vector2<f64>,
    pub yaw: f64,
}

impl Default for PlanarTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl PlanarTransform {
    pub fn identity() -> Self {
        Self {
            translation: Vector2::zeros(),
            yaw: 0.0,
        }
    }

    pub fn new(tx: f64, ty: f64, yaw: f64) -> Self {
        Self {
            translation: Vector2::new(tx, ty),
            yaw,
        }
    }

    /// The transform that maps `from`'s planar pose onto `to`'s.
    pub fn aligning(from: &CharacterFrame, to: &CharacterFrame) -> Self {
        let yaw = to.yaw() - from.yaw();
        let translation = to.root_pos.xy() - rotate2(from.root_pos.xy(), yaw);
        Self { translation, yaw }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = rotate2(p.xy(), self.yaw) + self.translation;
        Vector3::new(h.x, h.y, p.z)
    }

    /// Root pose and world velocity move with the transform; root-local and
    /// yaw-local quantities are untouched.
    pub fn apply_frame(&self, f: &CharacterFrame) -> CharacterFrame {
        CharacterFrame {
            root_pos: self.apply_point(&f.root_pos),
            root_rot: yaw_quat(self.yaw) * f.root_rot,
            root_linvel: rotate_z(&f.root_linvel, self.yaw),
            root_angvel: f.root_angvel,
            endpoints: f.endpoints.clone(),
            endpoint_vels: f.endpoint_vels.clone(),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PlanarTransform) -> PlanarTransform {
        PlanarTransform {
            translation: rotate2(other.translation, self.yaw) + self.translation,
            yaw: self.yaw + other.yaw,
        }
    }

    pub fn inverse(&self) -> PlanarTransform {
        PlanarTransform {
            translation: -rotate2(self.translation, -self.yaw),
            yaw: -self.yaw,
        }
    }
}

/// State of a stitched clip at `frame`, with time measured from the anchor.
pub(crate) fn replay_frame(
    clip: &MotionClip,
    frame: usize,
    transform: &PlanarTransform,
    anchor_time: u64,
) -> CharacterState {
    CharacterState::new(transform.apply_frame(&clip.frames[frame]), anchor_time + frame as u64)
}

/// Advances one frame along a stitched clip.
///
/// `anchor` is the stitched frame-0 state; the stitch transform is recovered
/// from it, so the result is frame `frame_index + 1` of the clip under that
/// transform.
pub fn step_along_clip(
    clip: &MotionClip,
    frame_index: usize,
    anchor: &CharacterState,
) -> Result<CharacterState> {
    if frame_index + 1 >= clip.frames.len() {
        return Err(Error::OutOfRange {
            index: frame_index,
            len: clip.frames.len().saturating_sub(1),
        });
    }
    let t = PlanarTransform::aligning(&clip.frames[0], &anchor.frame);
    Ok(replay_frame(clip, frame_index + 1, &t, anchor.time_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn sample_clip() -> MotionClip {
        generate_synthetic_clips("walk", 1, 3).unwrap().remove(0)
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI / 2.0) + FRAC_PI_2).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn yaw_roundtrip() {
        for &y in &[0.0, 0.3, -2.0, 3.0] {
            assert!((yaw_of(&yaw_quat(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_stitch_returns_next_frame() {
        let clip = sample_clip();
        let anchor = CharacterState::new(clip.frames[0].clone(), 0);
        let s = step_along_clip(&clip, 0, &anchor).unwrap();
        let f1 = &clip.frames[1];
        assert!((s.frame.root_pos - f1.root_pos).norm() < 1e-12);
        assert!((s.frame.root_rot.coords - f1.root_rot.coords).norm() < 1e-12);
        assert_eq!(s.frame.endpoints, f1.endpoints);
        assert_eq!(s.time_index, 1);
    }

    #[test]
    fn translated_stitch_moves_root() {
        let clip = sample_clip();
        let t = PlanarTransform::new(2.0, -1.0, 0.0);
        let anchor = CharacterState::new(t.apply_frame(&clip.frames[0]), 10);
        for i in 0..clip.len() - 1 {
            let s = step_along_clip(&clip, i, &anchor).unwrap();
            let expect = t.apply_point(&clip.frames[i + 1].root_pos);
            assert!((s.frame.root_pos - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn yaw_stitch_keeps_local_endpoints() {
        let clip = sample_clip();
        let t = PlanarTransform::new(0.0, 0.0, 1.3);
        let anchor = CharacterState::new(t.apply_frame(&clip.frames[0]), 0);
        let s = step_along_clip(&clip, 4, &anchor).unwrap();
        assert_eq!(s.frame.endpoints, clip.frames[5].endpoints);
        assert!((s.frame.local_planar_velocity() - clip.frames[5].local_planar_velocity()).norm() < 1e-9);
    }

    #[test]
    fn step_index_out_of_range() {
        let clip = sample_clip();
        let anchor = CharacterState::new(clip.frames[0].clone(), 0);
        assert!(matches!(
            step_along_clip(&clip, clip.len() - 1, &anchor),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn transform_compose_inverse() {
        let a = PlanarTransform::new(1.0, 2.0, 0.7);
        let b = PlanarTransform::new(-3.0, 0.5, -1.9);
        let p = Vector3::new(0.3, -0.8, 1.0);
        let ab = a.compose(&b).apply_point(&p);
        let seq = a.apply_point(&b.apply_point(&p));
        assert!((ab - seq).norm() < 1e-12);
        let back = a.inverse().apply_point(&a.apply_point(&p));
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn goal_speed_bound() {
        assert!(Goal::new(9.0, 0.0, None).validate(8.0).is_err());
        assert!(Goal::new(3.0, 4.0, None).validate(8.0).is_ok());
    }
}
