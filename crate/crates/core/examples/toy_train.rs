//! Trains on synthetic walk and turn databases and prints per-iteration metrics.
//!
//! `cargo run --release -p racon-core --example toy_train -- [iterations] [seed] [clips]`

use std::sync::Arc;

use racon_core::motion::generate_synthetic_clips;
use racon_core::retrieval::{build_database, RetrievalEnv, DEFAULT_PERIOD};
use racon_core::trainer::{TrainConfig, Trainer};

fn main() -> racon_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iters = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let clips = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let walk = build_database(generate_synthetic_clips("walk", clips, 1)?, "walk")?;
    let turn = build_database(generate_synthetic_clips("turn", clips, 2)?, "turn")?;
    let env = RetrievalEnv::new([Arc::new(walk), Arc::new(turn)], DEFAULT_PERIOD)?;
    let cfg = TrainConfig {
        iterations: iters,
        seed,
        learnable_retriever: std::env::var("FROZEN").is_err(),
        ra_discriminator: std::env::var("NO_RA").is_err(),
        ..TrainConfig::toy()
    };
    let cfg = match std::env::var("CFG") {
        Ok(extra) => {
            let mut base: toml::Table = toml::from_str(&cfg.to_toml()).unwrap();
            let over: toml::Table = toml::from_str(&extra).unwrap();
            base.extend(over);
            TrainConfig::from_toml(&toml::to_string(&base).unwrap())?
        }
        Err(_) => cfg,
    };
    let mut t = Trainer::new(cfg, env)?;
    for _ in 0..iters {
        let (m, _) = t.step()?;
        println!(
            "it {:3} goal {:.3} retr_goal {:.3} ref {:.3} prior {:.3} D {:.2}/{:.2} trate {:5.1} kl {:.4} ent {:.2} {:.2}s",
            m.iteration,
            m.goal_return,
            m.retriever_goal_return,
            m.reference_return,
            m.prior_ctrl,
            m.disc_real,
            m.disc_fake,
            m.trate,
            m.controller.approx_kl,
            m.controller.entropy,
            m.seconds
        );
    }
    Ok(())
}
