use std::sync::Arc;

use racon_core::checkpoint::Checkpoint;
use racon_core::motion::generate_synthetic_clips;
use racon_core::ragail::DiscBuffers;
use racon_core::retrieval::{build_database, RetrievalEnv};
use racon_core::trainer::{hrl_rollout, Agent, ObsLayout, TrainConfig, Trainer};

fn env() -> RetrievalEnv {
    let walk = build_database(generate_synthetic_clips("walk", 200, 1).unwrap(), "walk").unwrap();
    let turn = build_database(generate_synthetic_clips("turn", 200, 2).unwrap(), "turn").unwrap();
    RetrievalEnv::new([Arc::new(walk), Arc::new(turn)], 15).unwrap()
}

fn small() -> TrainConfig {
    TrainConfig {
        env_count: 4,
        horizon: 60,
        retriever_hidden: vec![32, 32],
        controller_hidden: vec![32, 32],
        value_hidden: vec![32, 32],
        disc_hidden: vec![32, 32],
        minibatch: 64,
        disc_batch: 64,
        disc_steps: 2,
        disc_buffer: 5000,
        ..TrainConfig::toy()
    }
}

fn setup(cfg: &TrainConfig, env: &RetrievalEnv) -> (Agent, DiscBuffers) {
    let layout = ObsLayout {
        key_dim: env.key_dim(),
        endpoints: 4,
    };
    let agent = Agent::new(cfg, layout);
    let buffers = DiscBuffers::new(cfg.disc_window.obs_dim(4), cfg.disc_buffer);
    (agent, buffers)
}

#[test]
fn retriever_acts_every_period_and_sums_its_span() {
    let env = env();
    let cfg = TrainConfig {
        horizon: 150,
        ..small()
    };
    let (agent, mut buffers) = setup(&cfg, &env);
    let batch = hrl_rollout(&agent, &env, &cfg, 0, &mut buffers).unwrap();
    assert_eq!(batch.ticks.len(), cfg.env_count * cfg.horizon);
    for (e, decisions) in batch.retriever.iter().enumerate() {
        let ticks: Vec<_> = batch.ticks.iter().filter(|t| t.env == e).collect();
        assert_eq!(decisions.iter().map(|d| d.span).sum::<usize>(), cfg.horizon);
        let terminated = ticks.iter().any(|t| t.terminated);
        if !terminated {
            assert_eq!(decisions.len(), cfg.horizon / cfg.period);
        }
        for d in decisions {
            assert!(d.span <= cfg.period);
            if !d.done && d.tick + d.span < cfg.horizon {
                assert_eq!(d.span, cfg.period);
            }
            let want: f64 = ticks[d.tick..d.tick + d.span].iter().map(|t| t.r_retr).sum();
            assert!((d.reward - want).abs() < 1e-12);
            assert!(ticks[d.tick].decision);
        }
        for t in &ticks {
            let w = &cfg.rewards;
            assert!((t.r_retr - (w.retr_goal * t.r_goal_retr + w.retr_prior * t.prior_retr)).abs() < 1e-12);
            assert!((t.r_ctrl - (w.ctrl_goal * t.r_goal + w.ctrl_ref * t.r_ref + w.ctrl_prior * t.prior_ctrl)).abs() < 1e-12);
        }
    }
    let n = batch.ticks.len() as f64;
    let recomputed = batch.ticks.iter().map(|t| t.r_goal).sum::<f64>() / n;
    assert_eq!(batch.goal_return(), recomputed);
}

#[test]
fn databases_chosen_uniformly() {
    let env = env();
    let cfg = TrainConfig {
        env_count: 400,
        horizon: 2,
        ..small()
    };
    let (agent, mut buffers) = setup(&cfg, &env);
    let batch = hrl_rollout(&agent, &env, &cfg, 0, &mut buffers).unwrap();
    let walk = batch.db_counts["walk"] as f64;
    let total = batch.episodes as f64;
    // four standard deviations of Binomial(n, 1/2)
    assert!((walk - total / 2.0).abs() <= 4.0 * (total * 0.25).sqrt(), "{walk} of {total}");
}

#[test]
fn goal_gaps_respect_schedule() {
    let env = env();
    let cfg = TrainConfig {
        env_count: 2,
        horizon: 1500,
        ..small()
    };
    let (agent, mut buffers) = setup(&cfg, &env);
    let batch = hrl_rollout(&agent, &env, &cfg, 0, &mut buffers).unwrap();
    assert!(batch.goal_gaps.len() >= 4);
    for &g in &batch.goal_gaps {
        assert!((cfg.goal_resample_min..=cfg.goal_resample_max).contains(&g), "gap {g}");
    }
}

#[test]
fn iteration_is_seed_deterministic() {
    let env = env();
    let mut a = Trainer::new(small(), env.clone()).unwrap();
    let mut b = Trainer::new(small(), env).unwrap();
    let (mut ma, _) = a.step().unwrap();
    let (mut mb, _) = b.step().unwrap();
    ma.seconds = 0.0;
    mb.seconds = 0.0;
    assert_eq!(ma, mb);
    assert_eq!(a.agent, b.agent);
    assert!(ma.controller.first_ratio_deviation < 1e-9);
    assert!(ma.retriever.unwrap().first_ratio_deviation < 1e-9);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let env = env();
    let cfg = TrainConfig {
        iterations: 3,
        ..small()
    };
    let mut straight = Trainer::new(cfg.clone(), env.clone()).unwrap();
    straight.run(None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg, env.clone()).unwrap();
    first.step().unwrap();
    let path = dir.path().join("ckpt.bin");
    first.checkpoint(true).save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap(), env.clone()).unwrap();
    assert_eq!(resumed.iteration, 1);
    resumed.run(None).unwrap();
    assert_eq!(resumed.iteration, 3);
    assert_eq!(resumed.agent, straight.agent);

    let lean = straight.checkpoint(false);
    assert!(Trainer::from_checkpoint(lean, env).is_err());
}

#[test]
fn run_writes_metrics_and_checkpoints() {
    let env = env();
    let cfg = TrainConfig {
        iterations: 2,
        checkpoint_every: 1,
        ..small()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg, env.clone()).unwrap();
    t.run(Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["iteration", "goal_return", "disc_real", "disc_fake", "trate"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    let c = Checkpoint::load(dir.path().join("checkpoint-00002.bin")).unwrap();
    assert_eq!(c.iteration, 2);
    assert!(c.buffers.is_none());
    c.check_compatible(&env).unwrap();
}

#[test]
fn checkpoint_rejects_foreign_config_and_environment() {
    let env = env();
    let t = Trainer::new(small(), env).unwrap();
    let mut bytes = Vec::new();
    t.checkpoint(false).write(&mut bytes).unwrap();
    assert!(Checkpoint::read(bytes.as_slice()).is_ok());
    // flip one character of the stored config hash
    let pos = bytes.windows(64).position(|w| w == t.cfg.hash().as_bytes()).unwrap();
    bytes[pos] = if bytes[pos] == b'0' { b'1' } else { b'0' };
    let err = Checkpoint::read(bytes.as_slice()).unwrap_err().to_string();
    assert!(err.contains("hash"), "{err}");

    let walk = build_database(generate_synthetic_clips("walk", 50, 1).unwrap(), "walk").unwrap();
    let other = RetrievalEnv::new([Arc::new(walk)], 5).unwrap();
    assert!(t.checkpoint(false).check_compatible(&other).is_err());
}
