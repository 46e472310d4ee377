//! The outer training loop.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ppo::{ppo_update, PpoStats};
use super::rollout::{hrl_rollout, RolloutBatch};
use super::{stream_seed, Agent, ObsLayout, TrainConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::ragail::{assemble_demo_window, update_discriminator, DiscBuffers, DiscStats};
use crate::retrieval::RetrievalEnv;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    /// Mean per-tick controller goal reward.
    pub goal_return: f64,
    pub retriever_goal_return: f64,
    pub reference_return: f64,
    pub reward_ctrl: f64,
    pub reward_retr: f64,
    pub prior_ctrl: f64,
    pub disc_real: f64,
    pub disc_fake: f64,
    pub disc_loss: f64,
    pub grad_penalty: f64,
    pub trate: f64,
    pub episodes: usize,
    pub controller: PpoStats,
    pub retriever: Option<PpoStats>,
    pub db_counts: BTreeMap<String, usize>,
    pub seconds: f64,
}

/// Training state that survives across iterations.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub agent: Agent,
    pub buffers: DiscBuffers,
    pub iteration: u64,
    pub env: RetrievalEnv,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, env: RetrievalEnv) -> Result<Self> {
        cfg.validate()?;
        if env.period() != cfg.period {
            return Err(Error::invalid(format!(
                "retrieval environment period {} differs from config period {}",
                env.period(),
                cfg.period
            )));
        }
        let first = env.databases().next().expect("environment has a database");
        let layout = ObsLayout {
            key_dim: env.key_dim(),
            endpoints: first.endpoint_count(),
        };
        let agent = Agent::new(&cfg, layout);
        let buffers = DiscBuffers::new(cfg.disc_window.obs_dim(layout.endpoints), cfg.disc_buffer);
        Ok(Self {
            cfg,
            agent,
            buffers,
            iteration: 0,
            env,
        })
    }

    /// Resumes from a checkpoint that carries its discriminator buffers.
    pub fn from_checkpoint(ckpt: Checkpoint, env: RetrievalEnv) -> Result<Self> {
        ckpt.check_compatible(&env)?;
        let buffers = ckpt
            .buffers
            .ok_or_else(|| Error::invalid("checkpoint has no discriminator buffers; cannot resume"))?;
        Ok(Self {
            cfg: ckpt.config,
            agent: ckpt.agent,
            buffers,
            iteration: ckpt.iteration,
            env,
        })
    }

    pub fn checkpoint(&self, with_buffers: bool) -> Checkpoint {
        Checkpoint::new(
            self.cfg.clone(),
            self.iteration,
            self.agent.clone(),
            with_buffers.then(|| self.buffers.clone()),
        )
    }

    fn push_demos(&mut self, count: usize) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, 0xDE30, self.iteration, 0));
        let dbs: Vec<_> = self.env.databases().cloned().collect();
        let w = self.cfg.disc_window;
        for _ in 0..count {
            let db = &dbs[rng.random_range(0..dbs.len())];
            let clip = db.clip(rng.random_range(0..db.len()));
            let t = rng.random_range(w.before..=clip.len() - w.states() + w.before);
            self.buffers.push(&assemble_demo_window(clip, t, w)?)?;
        }
        Ok(())
    }

    /// Rollout, discriminator update, then PPO on both policies.
    pub fn step(&mut self) -> Result<(IterationMetrics, RolloutBatch)> {
        let start = Instant::now();
        let it = self.iteration;
        let batch = hrl_rollout(&self.agent, &self.env, &self.cfg, it, &mut self.buffers)?;
        self.push_demos(batch.ticks.len())?;

        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, 0xD15C, it, 0));
        let disc: DiscStats = update_discriminator(
            &self.buffers,
            &mut self.agent.disc,
            self.cfg.disc_steps,
            self.cfg.disc_batch,
            &mut rng,
        )?;

        let ppo = self.cfg.ppo();
        let cb = batch.controller_batch(self.cfg.gamma, self.cfg.gae_lambda)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, 0x990C, it, 0));
        let a = &mut self.agent;
        let controller = ppo_update(
            &mut a.controller,
            &mut a.controller_opt,
            &mut a.controller_value,
            &mut a.controller_value_opt,
            &cb,
            &ppo,
            &mut rng,
        )?;
        let retriever = if self.cfg.learnable_retriever {
            let rb = batch.retriever_batch(self.cfg.gamma, self.cfg.gae_lambda)?;
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, 0x990C, it, 1));
            let mut rppo = ppo;
            rppo.epochs = self.cfg.retriever_epochs;
            rppo.minibatch = rppo.minibatch.min(rb.len().div_ceil(2).max(1));
            Some(ppo_update(
                &mut a.retriever,
                &mut a.retriever_opt,
                &mut a.retriever_value,
                &mut a.retriever_value_opt,
                &rb,
                &rppo,
                &mut rng,
            )?)
        } else {
            None
        };
        self.iteration += 1;

        let n = batch.ticks.len().max(1) as f64;
        let sum = |f: fn(&super::TickRecord) -> f64| batch.ticks.iter().map(f).sum::<f64>() / n;
        let m = IterationMetrics {
            iteration: self.iteration,
            goal_return: batch.goal_return(),
            retriever_goal_return: batch.retriever_goal_return(),
            reference_return: sum(|t| t.r_ref),
            reward_ctrl: sum(|t| t.r_ctrl),
            reward_retr: sum(|t| t.r_retr),
            prior_ctrl: sum(|t| t.prior_ctrl),
            disc_real: disc.mean_d_demo,
            disc_fake: disc.mean_d_fake,
            disc_loss: disc.loss,
            grad_penalty: disc.grad_penalty,
            trate: batch.termination_rate(),
            episodes: batch.episodes,
            controller,
            retriever,
            db_counts: batch.db_counts.clone(),
            seconds: start.elapsed().as_secs_f64(),
        };
        tracing::debug!(iteration = m.iteration, goal_return = m.goal_return, trate = m.trate, "iteration done");
        Ok((m, batch))
    }

    /// Iterates until `cfg.iterations`. With an output directory, appends
    /// metrics to `metrics.jsonl`, writes `checkpoint-NNNNN.bin` every
    /// `checkpoint_every` iterations and keeps a resumable `checkpoint.bin`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Vec<IterationMetrics>> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let f = if self.iteration == 0 {
                    File::create(&path)
                } else {
                    OpenOptions::new().create(true).append(true).open(&path)
                };
                Some(f.map_err(|e| Error::io(&path, e))?)
            }
            None => None,
        };
        let mut out = Vec::new();
        while (self.iteration as usize) < self.cfg.iterations {
            let (m, _) = self.step()?;
            if let (Some(f), Some(dir)) = (log.as_mut(), out_dir) {
                let line = serde_json::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(f, "{line}").map_err(|e| Error::io(dir.join("metrics.jsonl"), e))?;
                let last = self.iteration as usize == self.cfg.iterations;
                let every = self.cfg.checkpoint_every;
                if last || (every > 0 && self.iteration as usize % every == 0) {
                    self.checkpoint(false)
                        .save(dir.join(format!("checkpoint-{:05}.bin", self.iteration)))?;
                    self.checkpoint(true).save(dir.join("checkpoint.bin"))?;
                }
            }
            out.push(m);
        }
        Ok(out)
    }
}

/// Builds a trainer and runs it to completion.
pub fn train(cfg: TrainConfig, env: RetrievalEnv, out_dir: Option<&Path>) -> Result<(Trainer, Vec<IterationMetrics>)> {
    let mut t = Trainer::new(cfg, env)?;
    let m = t.run(out_dir)?;
    Ok((t, m))
}
