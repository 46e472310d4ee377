use std::time::Instant;

use nalgebra::Vector3;
use proptest::prelude::*;
use racon_core::motion::{generate_synthetic_clips, CharacterState, Goal, PlanarTransform};
use racon_core::retrieval::{build_database, knn_search, Query, RetrievalDatabase, RetrievalEnv, RetrievalState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn linear_scan(db: &RetrievalDatabase, q: &Query) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for i in 0..db.len() {
        let row = db.key_row(i);
        let mut d = 0.0;
        for j in 0..row.len() {
            let e = q.values[j] - q.weights[j] * row[j];
            d += e * e;
        }
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// 10,000 entries; the last 1,000 duplicate earlier clips so exact ties exist.
fn big_db() -> RetrievalDatabase {
    let mut clips = generate_synthetic_clips("walk", 4500, 11).unwrap();
    clips.extend(generate_synthetic_clips("turn", 4500, 12).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let next_id = clips.iter().map(|c| c.clip_id).max().unwrap() + 1;
    for k in 0..1000 {
        let mut dup = clips[rng.random_range(0..9000)].clone();
        dup.clip_id = next_id + k;
        clips.push(dup);
    }
    build_database(clips, "mixed").unwrap()
}

#[test]
fn top1_matches_linear_scan_with_ties() {
    let db = big_db();
    assert_eq!(db.len(), 10_000);
    let dim = db.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut queries = Vec::new();
    for i in 0..1000 {
        let weights: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..2.0)).collect();
        let values: Vec<f64> = if i % 4 == 0 {
            // exactly a duplicated key: distance zero at two rows
            let row = db.key_row(9000 + rng.random_range(0..1000));
            row.iter().zip(&weights).map(|(k, w)| k * w).collect()
        } else {
            (0..dim).map(|j| weights[j] * rng.random_range(-3.0..3.0)).collect()
        };
        queries.push(Query { values, weights });
    }
    let start = Instant::now();
    let hits: Vec<_> = queries.iter().map(|q| knn_search(&db, q, 1).unwrap()[0]).collect();
    let elapsed = start.elapsed();
    let mut ties = 0;
    for (q, h) in queries.iter().zip(&hits) {
        let (idx, d2) = linear_scan(&db, q);
        assert_eq!(h.index, idx);
        assert_eq!(h.distance, d2.sqrt());
        if d2 == 0.0 {
            ties += 1;
            assert!(idx < 9000, "tie must resolve to the original row");
        }
    }
    assert!(ties >= 250);
    assert!(elapsed.as_secs_f64() < 10.0, "search took {elapsed:?}");
}

#[test]
fn knn_sorted_and_consistent_with_top1() {
    let db = build_database(generate_synthetic_clips("walk", 300, 3).unwrap(), "walk").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let q = Query::unweighted((0..db.dim()).map(|_| rng.random_range(-2.0..2.0)).collect());
        let k = knn_search(&db, &q, 10).unwrap();
        assert_eq!(k[0], knn_search(&db, &q, 1).unwrap()[0]);
        assert!(k.windows(2).all(|w| (w[0].distance, w[0].index) < (w[1].distance, w[1].index)));
    }
}

#[test]
fn stitch_boundaries_are_continuous() {
    let walk = build_database(generate_synthetic_clips("walk", 500, 1).unwrap(), "walk").unwrap();
    let turn = build_database(generate_synthetic_clips("turn", 500, 2).unwrap(), "turn").unwrap();
    let env = RetrievalEnv::new([Arc::new(walk), Arc::new(turn)], 15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = env.key_dim();
    let mut boundaries = 0;
    let mut state = RetrievalState::new("walk");
    let mut character = CharacterState::new(env.get("walk").unwrap().clip(0).frames[0].clone(), 0);
    while boundaries < 1000 {
        assert!(state.retr_flag);
        // perturb the character so it is not on the previous clip
        character.frame.root_pos += Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
        let t = PlanarTransform::new(0.0, 0.0, rng.random_range(-3.0..3.0));
        character.frame = PlanarTransform::new(character.frame.root_pos.x, character.frame.root_pos.y, 0.0)
            .compose(&t)
            .compose(&PlanarTransform::new(-character.frame.root_pos.x, -character.frame.root_pos.y, 0.0))
            .apply_frame(&character.frame);
        let goal = Goal::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), None);
        let weights: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..2.0)).collect();
        let db = if rng.random_bool(0.5) { "walk" } else { "turn" };
        env.step(&mut state, Some(&weights), &character, &goal, Some(db)).unwrap();
        boundaries += 1;
        let anchor = state.anchor.as_ref().unwrap();
        assert!((anchor.frame.root_pos.xy() - character.frame.root_pos.xy()).norm() < 1e-9);
        let dyaw = racon_core::motion::wrap_angle(anchor.frame.yaw() - character.frame.yaw());
        assert!(dyaw.abs() < 1e-9);
        let mut last = None;
        while !state.retr_flag {
            last = Some(env.step(&mut state, None, &character, &goal, None).unwrap().next);
        }
        character = last.unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transform_inverse_roundtrip(tx in -50.0..50.0f64, ty in -50.0..50.0f64, yaw in -6.0..6.0f64,
                                   px in -10.0..10.0f64, py in -10.0..10.0f64, pz in 0.0..2.0f64) {
        let t = PlanarTransform::new(tx, ty, yaw);
        let p = Vector3::new(px, py, pz);
        let back = t.inverse().apply_point(&t.apply_point(&p));
        prop_assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn zero_weights_give_zero_distance(seed in 0u64..1000) {
        let db = build_database(generate_synthetic_clips("walk", 20, seed).unwrap(), "walk").unwrap();
        let q = Query { values: vec![0.0; db.dim()], weights: vec![0.0; db.dim()] };
        let h = knn_search(&db, &q, 1).unwrap()[0];
        prop_assert_eq!(h.index, 0);
        prop_assert_eq!(h.distance, 0.0);
    }
}
