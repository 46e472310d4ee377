//! Property tests for module invariants.

use nalgebra::{Vector2, Vector3};
use ndarray::Array2;
use proptest::prelude::*;
use racon_core::env::{env_reset, env_step, ControlAction, EnvConfig};
use racon_core::features::{extract_disc_observation, extract_key, extract_raw_query};
use racon_core::motion::{
    generate_synthetic_clips, parse_clips, step_along_clip, write_clips_string, CharacterState, Goal, PlanarTransform,
    DT,
};
use racon_core::neural::{gaussian_log_prob, squash_log_det, GaussianPolicy, Mlp};
use racon_core::ragail::{discriminator_loss, Discriminator};
use racon_core::retrieval::build_database;
use racon_core::rewards::{rotation_angle, goal_reward, prior_reward, reference_reward, GoalObservation, RewardWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STYLES: [&str; 3] = ["walk", "turn", "zombie"];

fn style() -> impl Strategy<Value = &'static str> {
    prop::sample::select(STYLES.to_vec())
}

fn close3(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    (a - b).norm() < 1e-9
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn clip_text_roundtrip_bit_exact(s in style(), seed in 0u64..1000) {
        let clips = generate_synthetic_clips(s, 3, seed).unwrap();
        let back = parse_clips(&write_clips_string(&clips)).unwrap();
        prop_assert_eq!(back, clips);
    }

    #[test]
    fn generator_deterministic(s in style(), seed in 0u64..1000) {
        prop_assert_eq!(generate_synthetic_clips(s, 2, seed).unwrap(), generate_synthetic_clips(s, 2, seed).unwrap());
    }

    #[test]
    fn velocity_self_consistent(s in style(), seed in 0u64..1000) {
        for c in generate_synthetic_clips(s, 2, seed).unwrap() {
            for w in c.frames.windows(2) {
                let fd = (w[1].root_pos - w[0].root_pos) / DT;
                let avg = (w[0].root_linvel + w[1].root_linvel) * 0.5;
                prop_assert!((fd - avg).norm() < 0.05, "fd {fd:?} stored {avg:?}");
            }
        }
    }

    #[test]
    fn stitch_equivariance(s in style(), seed in 0u64..1000, tx in -20.0..20.0f64, ty in -20.0..20.0f64,
                           yaw in -6.0..6.0f64, ax in -5.0..5.0f64, ay in -5.0..5.0f64, ayaw in -3.0..3.0f64) {
        let clip = generate_synthetic_clips(s, 1, seed).unwrap().remove(0);
        let t = PlanarTransform::new(tx, ty, yaw);
        let anchor = CharacterState::new(PlanarTransform::new(ax, ay, ayaw).apply_frame(&clip.frames[0]), 7);
        let moved_clip = clip.transformed(&t);
        let moved_anchor = CharacterState::new(t.apply_frame(&anchor.frame), 7);
        for i in 0..clip.len() - 1 {
            let a = t.apply_frame(&step_along_clip(&clip, i, &anchor).unwrap().frame);
            let b = step_along_clip(&moved_clip, i, &moved_anchor).unwrap().frame;
            prop_assert!(close3(&a.root_pos, &b.root_pos));
            prop_assert!(rotation_angle(&a.root_rot, &b.root_rot) < 1e-6);
            prop_assert!(close3(&a.root_linvel, &b.root_linvel));
            prop_assert!(close3(&a.root_angvel, &b.root_angvel));
            for (x, y) in a.endpoints.iter().zip(&b.endpoints) {
                prop_assert!(close3(x, y));
            }
        }
    }

    #[test]
    fn key_and_disc_obs_heading_invariant(s in style(), seed in 0u64..1000, tx in -20.0..20.0f64,
                                          ty in -20.0..20.0f64, yaw in -6.0..6.0f64) {
        let clip = generate_synthetic_clips(s, 1, seed).unwrap().remove(0);
        let t = PlanarTransform::new(tx, ty, yaw);
        let moved = clip.transformed(&t);
        let k0 = extract_key(&clip);
        let k1 = extract_key(&moved);
        for (a, b) in k0.0.iter().zip(&k1.0) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let st = |c: &racon_core::motion::MotionClip| -> Vec<CharacterState> {
            (0..3).map(|i| CharacterState::new(c.frames[i].clone(), i as u64)).collect()
        };
        let (a, b) = (st(&clip), st(&moved));
        let oa = extract_disc_observation(&[&a[0], &a[1], &a[2]]);
        let ob = extract_disc_observation(&[&b[0], &b[1], &b[2]]);
        for (x, y) in oa.0.iter().zip(&ob.0) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn reference_reward_world_invariant(seed in 0u64..1000, tx in -20.0..20.0f64, ty in -20.0..20.0f64,
                                        yaw in -6.0..6.0f64) {
        let clips = generate_synthetic_clips("turn", 2, seed).unwrap();
        let (a, b) = (&clips[0].frames[3], &clips[1].frames[9]);
        let t = PlanarTransform::new(tx, ty, yaw);
        let w = RewardWeights::default();
        let r0 = reference_reward(a, b, &w).total;
        let r1 = reference_reward(&t.apply_frame(a), &t.apply_frame(b), &w).total;
        prop_assert!((r0 - r1).abs() < 1e-9);
    }

    #[test]
    fn goal_reward_decreases_with_speed_error(dir in -3.2..3.2f64, speed in 0.5..4.0f64, e1 in 0.0..2.0f64, de in 0.01..2.0f64) {
        let w = RewardWeights::default();
        let u = Vector2::new(dir.cos(), dir.sin());
        let g = Goal::new(u.x * speed, u.y * speed, None);
        let obs = |e: f64| GoalObservation { velocity: u * (speed + e), yaw: 0.0 };
        prop_assert!(goal_reward(&g, &obs(e1 + de), &w) < goal_reward(&g, &obs(e1), &w));
    }

    #[test]
    fn prior_reward_monotone(d1 in 0.0..1.0f64, d2 in 0.0..1.0f64) {
        let w = RewardWeights::default();
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(prior_reward(lo, w.alpha, w.epsilon) <= prior_reward(hi, w.alpha, w.epsilon));
    }

    #[test]
    fn env_step_deterministic_and_clocked(seed in 0u64..1000, ax in -20.0..20.0f64, ay in -20.0..20.0f64) {
        let db = build_database(generate_synthetic_clips("walk", 5, 1).unwrap(), "walk").unwrap();
        let cfg = EnvConfig::default();
        let s = env_reset(&mut ChaCha8Rng::seed_from_u64(seed), &db, &cfg);
        let mut act = ControlAction::hold(&s.frame);
        act.target_root_accel = Vector2::new(ax, ay);
        let a = env_step(&s, &act, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = env_step(&s, &act, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.time_index, s.time_index + 1);
    }

    #[test]
    fn forward_bit_reproducible(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&[6, 16, 3], 1.0, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = net.forward(&x).unwrap().0;
        let b = net.clone().forward(&x).unwrap().0;
        prop_assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn normalized_keys_are_standardized() {
    let mut clips = generate_synthetic_clips("walk", 400, 1).unwrap();
    clips.extend(generate_synthetic_clips("turn", 400, 2).unwrap());
    let db = build_database(clips, "mixed").unwrap();
    let n = db.len() as f64;
    for j in 0..db.dim() {
        let col: Vec<f64> = (0..db.len()).map(|i| db.key_row(i)[j]).collect();
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6, "dim {j} mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-6 || var == 0.0, "dim {j} std {}", var.sqrt());
    }
}

#[test]
fn query_from_clip_start_matches_key() {
    let clips = generate_synthetic_clips("walk", 300, 4).unwrap();
    let db = build_database(clips, "walk").unwrap();
    let stats = db.norm_stats();
    let mut worst: f64 = 0.0;
    for (i, clip) in db.clips().iter().enumerate() {
        let first = &clip.frames[0];
        let last = clip.frames.last().unwrap();
        let avg = (last.root_pos - first.root_pos).xy() / clip.duration();
        let facing = first.yaw() + racon_core::motion::wrap_angle(last.yaw() - first.yaw());
        let goal = Goal::new(avg.x, avg.y, Some(facing));
        let q = stats.normalize(extract_raw_query(&CharacterState::new(first.clone(), 0), &goal).as_slice());
        let k = db.key_row(i);
        for j in 2..k.len() {
            worst = worst.max((q[j] - k[j]).abs());
        }
    }
    assert!(worst < 0.1, "largest normalized slot gap {worst}");
}

#[test]
fn squashed_density_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (m, ls) in [(0.0, 0.0), (0.8, -0.5), (-1.5, 0.5)] {
        let mut p = GaussianPolicy::new(&[1, 4, 1], ls, true, &mut rng);
        p.log_std[0] = ls;
        let n = 200_000;
        let h = 2.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| {
                let a = (i as f64 + 0.5) * h;
                let u = (a / (2.0 - a)).ln();
                (gaussian_log_prob(&[m], p.log_std_slice(), &[u]) - squash_log_det(&[u])).exp() * h
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }
}

#[test]
fn discriminator_step_signs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let demo = Array2::from_shape_fn((64, 8), |_| rng.random_range(0.0..1.0));
    let fake = Array2::from_shape_fn((64, 8), |_| rng.random_range(-1.0..0.0));
    let mut d = Discriminator::new(8, &[16], 1e-2, 10.0, &mut rng);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let before = (mean(d.score_batch(demo.view()).unwrap()), mean(d.score_batch(fake.view()).unwrap()));
    // small plain gradient step on the unpenalized objective
    let g = discriminator_loss(&d.net, demo.view(), fake.view(), 0.0).unwrap().grads;
    for (p, g) in d.net.iter_mut().zip(g.iter()) {
        *p -= 1e-2 * g;
    }
    let after = (mean(d.score_batch(demo.view()).unwrap()), mean(d.score_batch(fake.view()).unwrap()));
    assert!(after.0 > before.0);
    assert!(after.1 < before.1);
}

/// Finite-difference residual between the last two blocks: height and
/// endpoint displacements against the stored velocities of the last block.
fn smoothness_residual(obs: &[f64], endpoints: usize) -> f64 {
    let size = obs.len() / 3;
    let (b1, b2) = (&obs[size..2 * size], &obs[2 * size..]);
    let e = 13;
    let v = 13 + 3 * endpoints;
    let mut r = ((b2[0] - b1[0]) / DT - b2[9]).powi(2);
    for k in 0..3 * endpoints {
        r += ((b2[e + k] - b1[e + k]) / DT - b2[v + k]).powi(2);
    }
    r
}

#[test]
fn mismatched_third_state_breaks_smoothness() {
    let walk = generate_synthetic_clips("walk", 100, 1).unwrap();
    let other = generate_synthetic_clips("zombie", 100, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let c = &walk[rng.random_range(0..100)];
        let t = rng.random_range(0..c.len() - 2);
        let s: Vec<CharacterState> = (0..3).map(|k| CharacterState::new(c.frames[t + k].clone(), k as u64)).collect();
        let z = &other[rng.random_range(0..100)];
        let mut wrong = CharacterState::new(z.frames[rng.random_range(0..z.len())].clone(), 2);
        wrong.frame = PlanarTransform::aligning(&wrong.frame, &s[2].frame).apply_frame(&wrong.frame);
        let good = extract_disc_observation(&[&s[0], &s[1], &s[2]]).0;
        let bad = extract_disc_observation(&[&s[0], &s[1], &wrong]).0;
        let (rg, rb) = (smoothness_residual(&good, 4), smoothness_residual(&bad, 4));
        assert!(rb > rg, "matched {rg} mismatched {rb}");
    }
}

#[test]
fn env_bounded_over_long_random_run() {
    let db = build_database(generate_synthetic_clips("walk", 20, 1).unwrap(), "walk").unwrap();
    let cfg = EnvConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = env_reset(&mut rng, &db, &cfg);
    let margin_v = 5.0 * cfg.sigma_v;
    let margin_e = 6.0 * cfg.sigma_e;
    for _ in 0..100_000 {
        let act = ControlAction {
            target_root_accel: Vector2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)),
            target_yaw_rate: rng.random_range(-20.0..20.0),
            target_height: rng.random_range(-3.0..3.0),
            target_endpoints: (0..4)
                .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
                .collect(),
        };
        let prev = s.time_index;
        s = env_step(&s, &act, &cfg, &mut rng).unwrap();
        let f = &s.frame;
        assert!(f.is_finite());
        assert_eq!(s.time_index, prev + 1);
        assert!(f.planar_velocity().norm() <= cfg.speed_max + margin_v);
        assert!(f.root_pos.z >= cfg.height_min.min(0.7) - 1e-9 && f.root_pos.z <= cfg.height_max + 1e-9);
        assert!(f.endpoints.iter().all(|e| e.iter().all(|x| x.abs() <= cfg.endpoint_max + margin_e)));
    }
}
