//! Trains learnable/frozen or RA/non-RA arms over several seeds and prints
//! deterministic evaluation metrics for each run.
//!
//! `cargo run --release -p racon-core --example ablation -- [retriever|ra] [seeds] [iterations]`

use std::sync::Arc;

use racon_core::eval::{evaluate, mve, mve_retrieved, trate_len, EvalConfig};
use racon_core::motion::generate_synthetic_clips;
use racon_core::retrieval::{build_database, RetrievalEnv, DEFAULT_PERIOD};
use racon_core::trainer::{TrainConfig, Trainer};

fn main() -> racon_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).cloned().unwrap_or_else(|| "retriever".into());
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40);
    let walk = build_database(generate_synthetic_clips("walk", 1000, 1)?, "walk")?;
    let turn = build_database(generate_synthetic_clips("turn", 1000, 2)?, "turn")?;
    let env = RetrievalEnv::new([Arc::new(walk), Arc::new(turn)], DEFAULT_PERIOD)?;
    let dbs = vec!["walk".to_string(), "turn".to_string()];
    let eval = EvalConfig {
        episodes: 20,
        ..EvalConfig::default()
    };
    for seed in 0..seeds {
        for arm in [true, false] {
            let mut cfg = TrainConfig {
                iterations: iters,
                seed,
                ..TrainConfig::toy()
            };
            if which == "ra" {
                cfg.ra_discriminator = arm;
            } else {
                cfg.learnable_retriever = arm;
            }
            if let Ok(extra) = std::env::var("CFG") {
                let mut base: toml::Table = toml::from_str(&cfg.to_toml()).unwrap();
                base.extend(toml::from_str::<toml::Table>(&extra).unwrap());
                cfg = TrainConfig::from_toml(&toml::to_string(&base).unwrap())?;
            }
            let mut t = Trainer::new(cfg, env.clone())?;
            let m = t.run(None)?;
            let tail = &m[m.len().saturating_sub(5)..];
            let goal = tail.iter().map(|x| x.goal_return).sum::<f64>() / tail.len() as f64;
            let reward = tail.iter().map(|x| x.reward_ctrl).sum::<f64>() / tail.len() as f64;
            let recs = evaluate(&t.agent, &env, &t.cfg, &eval, &dbs)?;
            let (trate, len) = trate_len(&recs)?;
            println!(
                "seed {seed} {which}={arm:5} goal {goal:.3} reward {reward:.3} mve {:.4} mve_retr {:.4} trate {trate:.1} len {len:.1}",
                mve(&recs)?,
                mve_retrieved(&recs)?
            );
        }
    }
    Ok(())
}
