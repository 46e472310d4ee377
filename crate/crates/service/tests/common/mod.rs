#![allow(dead_code)]

use std::sync::Arc;

use racon_core::checkpoint::Checkpoint;
use racon_core::motion::generate_synthetic_clips;
use racon_core::retrieval::{build_database, RetrievalEnv};
use racon_core::trainer::{Agent, ObsLayout, TrainConfig};
use racon_service::Shared;

pub fn env(period: usize) -> RetrievalEnv {
    let db = |style: &str, n, seed| Arc::new(build_database(generate_synthetic_clips(style, n, seed).unwrap(), style).unwrap());
    RetrievalEnv::new([db("walk", 200, 1), db("turn", 200, 2), db("zombie", 100, 3)], period).unwrap()
}

pub fn checkpoint() -> Checkpoint {
    let cfg = TrainConfig::toy();
    let env = env(cfg.period);
    let layout = ObsLayout {
        key_dim: env.key_dim(),
        endpoints: env.databases().next().unwrap().endpoint_count(),
    };
    let agent = Agent::new(&cfg, layout);
    Checkpoint::new(cfg, 0, agent, None)
}

pub fn shared() -> Arc<Shared> {
    let ckpt = checkpoint();
    let env = env(ckpt.config.period);
    Arc::new(Shared::new(ckpt, env).unwrap())
}
