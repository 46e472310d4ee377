//! Deterministic procedural gaits used in place of captured motion.
//!
//! Every clip is a closed-form trajectory: constant speed along a heading that
//! turns at a constant rate, a periodic gait whose cycle spans exactly one
//! clip, and analytic derivatives for every stored velocity.

use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{yaw_quat, CharacterFrame, MotionClip, CLIP_FRAMES, FPS};
use crate::error::{Error, Result};

/// Clip ids are `style_index * ID_STRIDE + i`, so ids never collide across styles.
pub const ID_STRIDE: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionStyle {
    Walk,
    Run,
    Turn,
    Skip,
    Zombie,
}

impl MotionStyle {
    pub const ALL: [MotionStyle; 5] = [
        MotionStyle::Walk,
        MotionStyle::Run,
        MotionStyle::Turn,
        MotionStyle::Skip,
        MotionStyle::Zombie,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionStyle::Walk => "walk",
            MotionStyle::Run => "run",
            MotionStyle::Turn => "turn",
            MotionStyle::Skip => "skip",
            MotionStyle::Zombie => "zombie",
        }
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|s| *s == self).unwrap() as u64
    }

    /// Id range `[lo, hi)` of generated clips of this style.
    pub fn id_range(self) -> std::ops::Range<u64> {
        let lo = self.index() * ID_STRIDE;
        lo..lo + ID_STRIDE
    }
}

impl FromStr for MotionStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown style `{s}` (expected one of walk, run, turn, skip, zombie)"
                ))
            })
    }
}

struct GaitParams {
    speed: f64,
    /// Travel direction relative to facing.
    travel_offset: f64,
    turn_rate: f64,
    yaw0: f64,
    origin: (f64, f64),
    height: f64,
    bob: f64,
    lean: f64,
    phase0: f64,
    stride: f64,
    arm_swing: f64,
    arms_forward: bool,
}

fn sample_params(style: MotionStyle, rng: &mut ChaCha8Rng) -> GaitParams {
    let deg = PI / 180.0;
    let yaw0 = rng.random_range(-PI..PI);
    let origin = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
    let phase0 = rng.random_range(0.0..TAU);
    match style {
        MotionStyle::Walk => {
            let speed = rng.random_range(0.8..1.8);
            GaitParams {
                speed,
                travel_offset: 0.0,
                turn_rate: rng.random_range(-90.0..90.0) * deg,
                yaw0,
                origin,
                height: rng.random_range(0.88..0.98),
                bob: 0.012,
                lean: 0.03 * speed,
                phase0,
                stride: 0.16 * speed,
                arm_swing: 0.12 * speed,
                arms_forward: false,
            }
        }
        MotionStyle::Run => {
            let speed = rng.random_range(2.5..5.0);
            GaitParams {
                speed,
                travel_offset: 0.0,
                turn_rate: rng.random_range(-90.0..90.0) * deg,
                yaw0,
                origin,
                height: rng.random_range(0.9..1.0),
                bob: 0.015,
                lean: 0.04 * speed,
                phase0,
                stride: 0.09 * speed,
                arm_swing: 0.05 * speed,
                arms_forward: false,
            }
        }
        MotionStyle::Turn => {
            let speed = rng.random_range(0.0..1.2);
            GaitParams {
                speed,
                travel_offset: rng.random_range(-PI..PI),
                turn_rate: rng.random_range(-90.0..90.0) * deg,
                yaw0,
                origin,
                height: rng.random_range(0.88..0.98),
                bob: 0.008,
                lean: 0.02,
                phase0,
                stride: 0.05 + 0.12 * speed,
                arm_swing: 0.08,
                arms_forward: false,
            }
        }
        MotionStyle::Skip => {
            let speed = rng.random_range(1.5..2.5);
            GaitParams {
                speed,
                travel_offset: 0.0,
                turn_rate: rng.random_range(-30.0..30.0) * deg,
                yaw0,
                origin,
                height: rng.random_range(0.92..1.0),
                bob: 0.015,
                lean: 0.05,
                phase0,
                stride: 0.2,
                arm_swing: 0.25,
                arms_forward: false,
            }
        }
        MotionStyle::Zombie => GaitParams {
            speed: rng.random_range(0.0..0.2),
            travel_offset: 0.0,
            turn_rate: rng.random_range(-10.0..10.0) * deg,
            yaw0,
            origin,
            height: rng.random_range(0.8..0.88),
            bob: 0.004,
            lean: 0.25,
            phase0,
            stride: 0.03,
            arm_swing: 0.03,
            arms_forward: true,
        },
    }
}

/// Endpoint positions and velocities (yaw-local) at gait phase `theta` with
/// phase rate `theta_dot` and root height `z`, vertical rate `z_dot`.
fn endpoints(
    g: &GaitParams,
    theta: f64,
    theta_dot: f64,
    z: f64,
    z_dot: f64,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let (so, co) = g.travel_offset.sin_cos();
    let (s, c) = theta.sin_cos();
    let mut pos = Vec::with_capacity(4);
    let mut vel = Vec::with_capacity(4);

    // hands: swing opposite to the same-side foot
    for (side, sign) in [(1.0, -1.0), (-1.0, 1.0)] {
        if g.arms_forward {
            let sway = g.arm_swing * s * sign;
            pos.push(Vector3::new(0.45 + sway, 0.2 * side, 0.35));
            vel.push(Vector3::new(g.arm_swing * c * sign * theta_dot, 0.0, 0.0));
        } else {
            let a = g.arm_swing * s * sign;
            let ad = g.arm_swing * c * sign * theta_dot;
            pos.push(Vector3::new(a * co, 0.25 * side + a * so, -0.05));
            vel.push(Vector3::new(ad * co, ad * so, 0.0));
        }
    }
    // feet: ground contact tracks the root height so the sole stays near z = 0
    for (side, sign) in [(1.0, 1.0), (-1.0, -1.0)] {
        let a = g.stride * s * sign;
        let ad = g.stride * c * sign * theta_dot;
        let lift_phase = sign * s;
        let (lift, lift_dot) = if lift_phase > 0.0 {
            (0.06 * lift_phase, 0.06 * sign * c * theta_dot)
        } else {
            (0.0, 0.0)
        };
        pos.push(Vector3::new(a * co, 0.1 * side + a * so, -z + 0.05 + lift));
        vel.push(Vector3::new(ad * co, ad * so, -z_dot + lift_dot));
    }
    (pos, vel)
}

fn build_clip(style: MotionStyle, id: u64, g: &GaitParams) -> MotionClip {
    let dt = 1.0 / FPS as f64;
    let span = (CLIP_FRAMES - 1) as f64 * dt;
    // one gait cycle per clip keeps first and last frame in phase
    let theta_dot = TAU / span;
    let lean_q = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), g.lean);
    let local_angvel = lean_q.inverse() * Vector3::new(0.0, 0.0, g.turn_rate);

    let frames = (0..CLIP_FRAMES)
        .map(|i| {
            let t = i as f64 * dt;
            let yaw = g.yaw0 + g.turn_rate * t;
            let heading0 = g.yaw0 + g.travel_offset;
            let heading = heading0 + g.turn_rate * t;
            let (x, y) = if g.turn_rate.abs() > 1e-9 {
                let r = g.speed / g.turn_rate;
                (
                    g.origin.0 + r * (heading.sin() - heading0.sin()),
                    g.origin.1 - r * (heading.cos() - heading0.cos()),
                )
            } else {
                (
                    g.origin.0 + g.speed * t * heading0.cos(),
                    g.origin.1 + g.speed * t * heading0.sin(),
                )
            };
            let theta = g.phase0 + theta_dot * t;
            let z = g.height + g.bob * (2.0 * theta).cos();
            let z_dot = -2.0 * theta_dot * g.bob * (2.0 * theta).sin();
            let (ee, eev) = endpoints(g, theta, theta_dot, z, z_dot);
            let q: Quaternion<f64> = yaw_quat(yaw) * lean_q.into_inner();
            CharacterFrame {
                root_pos: Vector3::new(x, y, z),
                root_rot: q,
                root_linvel: Vector3::new(
                    g.speed * heading.cos(),
                    g.speed * heading.sin(),
                    z_dot,
                ),
                root_angvel: local_angvel,
                endpoints: ee,
                endpoint_vels: eev,
            }
        })
        .collect();

    MotionClip {
        clip_id: id,
        style_tag: style.name().to_string(),
        fps: FPS,
        frames,
    }
}

/// Generates `count` clips of `style`, deterministically in `(style, count, seed)`.
pub fn generate_synthetic_clips(style: &str, count: usize, seed: u64) -> Result<Vec<MotionClip>> {
    let style: MotionStyle = style.parse()?;
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    if count as u64 > ID_STRIDE {
        return Err(Error::invalid(format!("count must be at most {ID_STRIDE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(style.index() + 1)));
    let base = style.index() * ID_STRIDE;
    Ok((0..count as u64)
        .map(|i| {
            let p = sample_params(style, &mut rng);
            build_clip(style, base + i, &p)
        })
        .collect())
}
