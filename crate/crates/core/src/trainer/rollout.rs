//! Synchronized retriever/controller rollouts.

use std::collections::{BTreeMap, VecDeque};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    controller_observation, decode_control, retriever_observation, sample_goal, stream_seed, Agent, PpoBatch,
    TrainConfig,
};
use super::gae::{compute_gae, compute_gae_discounted, normalize_advantages};
use crate::env::{env_reset, env_step, TerminationMonitor};
use crate::error::{Error, Result};
use crate::features::extract_disc_observation;
use crate::motion::{CharacterState, Goal};
use crate::ragail::{
    assemble_ra_fake_window, assemble_retrieved_fake_window, DiscBuffers, TransitionTriplet, TripletSource,
};
use crate::retrieval::{Neighbor, RetrievalEnv, RetrievalState};
use crate::rewards::{composite_rewards, goal_reward, prior_reward, reference_reward, GoalObservation};

/// How policies pick actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    /// Policy means; used for evaluation and serving.
    Deterministic,
}

/// One environment with its retrieval state, goal schedule and history.
#[derive(Debug, Clone)]
pub struct EnvSlot {
    pub rng: ChaCha8Rng,
    pub state: CharacterState,
    /// Recent simulated states, oldest first, ending with `state`.
    pub history: VecDeque<CharacterState>,
    pub retr: RetrievalState,
    /// Reference for the upcoming transition, set by each tick.
    pub reference: Option<CharacterState>,
    pub goal: Goal,
    pub monitor: TerminationMonitor,
    pub episode_tick: usize,
    pub next_goal_tick: usize,
    /// Database to activate at the next retrieval.
    pub pending_db: Option<String>,
    history_len: usize,
}

/// Retriever inputs and outputs for a decision tick.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionInfo {
    pub obs: Vec<f64>,
    pub raw: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

/// Everything one tick produced.
#[derive(Debug, Clone)]
pub struct TickOutcome {
    pub decision: Option<DecisionInfo>,
    pub retrieved: Option<Neighbor>,
    /// Retrieved state for the transition, `s~_{t+1}`.
    pub reference: CharacterState,
    pub ctrl_obs: Vec<f64>,
    pub ctrl_raw: Vec<f64>,
    pub ctrl_log_prob: f64,
    pub ctrl_value: f64,
    pub next: CharacterState,
    pub terminated: bool,
}

impl EnvSlot {
    /// A slot on database `db`, reset with the given random stream.
    pub fn new(rng: ChaCha8Rng, env: &RetrievalEnv, db: &str, cfg: &TrainConfig) -> Result<Self> {
        let first = env.get(db)?;
        let history_len = cfg.disc_window.states() - 1;
        let mut slot = Self {
            rng,
            state: CharacterState::new(first.clip(0).frames[0].clone(), 0),
            history: VecDeque::new(),
            retr: RetrievalState::new(db),
            reference: None,
            goal: Goal::still(),
            monitor: TerminationMonitor::default(),
            episode_tick: 0,
            next_goal_tick: 0,
            pending_db: None,
            history_len,
        };
        slot.reset(env, db, cfg)?;
        Ok(slot)
    }

    /// Starts a new episode on `db` with a fresh goal.
    pub fn reset(&mut self, env: &RetrievalEnv, db: &str, cfg: &TrainConfig) -> Result<()> {
        let d = env.get(db)?;
        self.state = env_reset(&mut self.rng, d, &cfg.env);
        self.history = std::iter::repeat_n(self.state.clone(), self.history_len).collect();
        self.retr = RetrievalState::new(db);
        self.reference = None;
        self.goal = sample_goal(&mut self.rng, cfg.v_max);
        self.monitor.reset();
        self.episode_tick = 0;
        self.next_goal_tick = self.rng.random_range(cfg.goal_resample_min..=cfg.goal_resample_max);
        self.pending_db = None;
        Ok(())
    }

    pub fn needs_retrieval(&self) -> bool {
        self.retr.retr_flag
    }

    /// Retrieval, control and termination for one tick. The slot is not
    /// advanced; call [`EnvSlot::commit`] with the outcome.
    pub fn tick(&mut self, agent: &Agent, env: &RetrievalEnv, cfg: &TrainConfig, mode: ActMode) -> Result<TickOutcome> {
        let mut decision = None;
        let step = if self.retr.retr_flag {
            let db_name = self.pending_db.take().unwrap_or_else(|| self.retr.active_db.clone());
            let db = env.get(&db_name)?;
            let obs = retriever_observation(&self.state, &self.goal, db);
            let info = if cfg.learnable_retriever {
                let mean = agent.retriever.mean(&obs)?;
                let value = agent.retriever_value.value(&obs)?;
                match mode {
                    ActMode::Sample => {
                        let s = agent.retriever.sample_from_mean(&mean, &mut self.rng);
                        DecisionInfo {
                            obs,
                            raw: s.raw,
                            weights: s.action,
                            log_prob: s.raw_log_prob,
                            value,
                        }
                    }
                    ActMode::Deterministic => DecisionInfo {
                        obs,
                        weights: agent.retriever.to_action(&mean),
                        raw: mean,
                        log_prob: 0.0,
                        value,
                    },
                }
            } else {
                DecisionInfo {
                    obs,
                    raw: Vec::new(),
                    weights: vec![1.0; env.key_dim()],
                    log_prob: 0.0,
                    value: 0.0,
                }
            };
            let st = env.step(&mut self.retr, Some(&info.weights), &self.state, &self.goal, Some(&db_name))?;
            decision = Some(info);
            st
        } else {
            env.step(&mut self.retr, None, &self.state, &self.goal, None)?
        };
        let reference = step.next;

        let ctrl_obs = controller_observation(&self.state, &self.goal, &reference);
        let mean = agent.controller.mean(&ctrl_obs)?;
        let ctrl_value = agent.controller_value.value(&ctrl_obs)?;
        let (ctrl_raw, ctrl_log_prob) = match mode {
            ActMode::Sample => {
                let s = agent.controller.sample_from_mean(&mean, &mut self.rng);
                (s.raw, s.raw_log_prob)
            }
            ActMode::Deterministic => (mean, 0.0),
        };
        let action = decode_control(&ctrl_raw, &self.state, &reference, &cfg.control, &cfg.env)?;
        let next = env_step(&self.state, &action, &cfg.env, &mut self.rng)?;
        let terminated = self.monitor.check(&next, &self.goal, &cfg.env);
        self.reference = Some(reference.clone());
        Ok(TickOutcome {
            decision,
            retrieved: step.retrieved,
            reference,
            ctrl_obs,
            ctrl_raw,
            ctrl_log_prob,
            ctrl_value,
            next,
            terminated,
        })
    }

    /// Moves to the outcome's next state. Returns the new goal when the
    /// schedule resampled it.
    pub fn commit(&mut self, next: CharacterState, cfg: &TrainConfig) -> Option<Goal> {
        self.history.push_back(next.clone());
        while self.history.len() > self.history_len {
            self.history.pop_front();
        }
        self.state = next;
        self.episode_tick += 1;
        if self.episode_tick == self.next_goal_tick {
            self.goal = sample_goal(&mut self.rng, cfg.v_max);
            self.next_goal_tick += self.rng.random_range(cfg.goal_resample_min..=cfg.goal_resample_max);
            return Some(self.goal);
        }
        None
    }

    /// Generated discriminator samples for the transition to `next`:
    /// the controller's and, in the retrieval-augmented case, the
    /// retrieved-transition sample for the retriever.
    pub fn fake_samples(
        &self,
        next: &CharacterState,
        env: &RetrievalEnv,
        cfg: &TrainConfig,
    ) -> Result<(TransitionTriplet, Option<TransitionTriplet>)> {
        let w = cfg.disc_window;
        let h = self.history.len();
        if cfg.ra_discriminator {
            let mut sim: Vec<&CharacterState> = self.history.range(h - (w.before + 1)..).collect();
            let retr_fake = assemble_retrieved_fake_window(&sim, env, &self.retr, w)?;
            sim.push(next);
            let ctrl_fake = assemble_ra_fake_window(&sim, env, &self.retr, w)?;
            Ok((ctrl_fake, Some(retr_fake)))
        } else {
            let n = w.states();
            let mut sim: Vec<&CharacterState> = self.history.range(h - (n - 1)..).collect();
            sim.push(next);
            Ok((
                TransitionTriplet {
                    obs: extract_disc_observation(&sim),
                    source: TripletSource::Sim,
                },
                None,
            ))
        }
    }
}

/// Per-tick reward components of one environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickRecord {
    pub env: usize,
    pub tick: usize,
    /// Controller goal reward on the simulated state.
    pub r_goal: f64,
    /// Retriever goal reward on the retrieved state.
    pub r_goal_retr: f64,
    pub r_ref: f64,
    pub d_ctrl: f64,
    pub d_retr: f64,
    pub prior_ctrl: f64,
    pub prior_retr: f64,
    pub r_ctrl: f64,
    pub r_retr: f64,
    pub terminated: bool,
    pub decision: bool,
}

/// One retriever transition covering `span` ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverDecision {
    pub env: usize,
    pub tick: usize,
    pub db: String,
    pub clip_id: u64,
    pub obs: Vec<f64>,
    pub raw: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub span: usize,
    pub done: bool,
}

/// Controller samples of one environment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControllerTrace {
    pub obs: Vec<Vec<f64>>,
    pub raw: Vec<Vec<f64>>,
    pub log_prob: Vec<f64>,
    pub value: Vec<f64>,
    pub reward: Vec<f64>,
    pub done: Vec<bool>,
    pub last_value: f64,
}

/// Output of [`hrl_rollout`].
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub controller: Vec<ControllerTrace>,
    pub retriever: Vec<Vec<RetrieverDecision>>,
    pub retriever_last_value: Vec<f64>,
    pub ticks: Vec<TickRecord>,
    pub episodes: usize,
    pub terminations: usize,
    /// Episodes started per database.
    pub db_counts: BTreeMap<String, usize>,
    /// Ticks between successive goal resamples.
    pub goal_gaps: Vec<usize>,
    pub fake_count: usize,
}

impl RolloutBatch {
    /// Mean per-tick controller goal reward.
    pub fn goal_return(&self) -> f64 {
        mean(self.ticks.iter().map(|t| t.r_goal))
    }

    pub fn retriever_goal_return(&self) -> f64 {
        mean(self.ticks.iter().map(|t| t.r_goal_retr))
    }

    pub fn termination_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            100.0 * self.terminations as f64 / self.episodes as f64
        }
    }

    /// Controller PPO batch with per-environment GAE.
    pub fn controller_batch(&self, gamma: f64, lambda: f64) -> Result<PpoBatch> {
        let mut obs = Vec::new();
        let mut raw = Vec::new();
        let mut log_prob = Vec::new();
        let mut advantages = Vec::new();
        let mut returns = Vec::new();
        for tr in &self.controller {
            let (a, r) = compute_gae(&tr.reward, &tr.value, &tr.done, tr.last_value, gamma, lambda)?;
            obs.extend(tr.obs.iter().cloned());
            raw.extend(tr.raw.iter().cloned());
            log_prob.extend_from_slice(&tr.log_prob);
            advantages.extend(a);
            returns.extend(r);
        }
        normalize_advantages(&mut advantages);
        Ok(PpoBatch {
            obs: rows(&obs)?,
            raw: rows(&raw)?,
            log_prob,
            advantages,
            returns,
        })
    }

    /// Retriever PPO batch; transitions discount by `gamma^span`.
    pub fn retriever_batch(&self, gamma: f64, lambda: f64) -> Result<PpoBatch> {
        let mut obs = Vec::new();
        let mut raw = Vec::new();
        let mut log_prob = Vec::new();
        let mut advantages = Vec::new();
        let mut returns = Vec::new();
        for (decisions, &last) in self.retriever.iter().zip(&self.retriever_last_value) {
            let r: Vec<f64> = decisions.iter().map(|d| d.reward).collect();
            let v: Vec<f64> = decisions.iter().map(|d| d.value).collect();
            let dn: Vec<bool> = decisions.iter().map(|d| d.done).collect();
            let disc: Vec<f64> = decisions.iter().map(|d| gamma.powi(d.span as i32)).collect();
            let (a, ret) = compute_gae_discounted(&r, &v, &dn, &disc, last, lambda)?;
            for d in decisions {
                obs.push(d.obs.clone());
                raw.push(d.raw.clone());
                log_prob.push(d.log_prob);
            }
            advantages.extend(a);
            returns.extend(ret);
        }
        normalize_advantages(&mut advantages);
        Ok(PpoBatch {
            obs: rows(&obs)?,
            raw: rows(&raw)?,
            log_prob,
            advantages,
            returns,
        })
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn rows(v: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = v.first().map_or(0, Vec::len);
    let flat: Vec<f64> = v.iter().flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((v.len(), d), flat).map_err(|e| Error::invalid(e.to_string()))
}

fn pick_db<R: Rng + ?Sized>(env: &RetrievalEnv, rng: &mut R) -> String {
    let names: Vec<&str> = env.names().collect();
    names[rng.random_range(0..names.len())].to_string()
}

/// Runs `cfg.env_count` environments for `cfg.horizon` ticks each.
///
/// Every environment starts a new episode on a randomly chosen database and
/// restarts after termination. Generated discriminator samples go into
/// `buffers`; prior rewards use the current discriminator.
pub fn hrl_rollout(
    agent: &Agent,
    env: &RetrievalEnv,
    cfg: &TrainConfig,
    iteration: u64,
    buffers: &mut DiscBuffers,
) -> Result<RolloutBatch> {
    let mut batch = RolloutBatch::default();
    let w = &cfg.rewards;
    for e in 0..cfg.env_count {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0x5107, iteration, e as u64));
        let db = pick_db(env, &mut rng);
        let mut slot = EnvSlot::new(rng, env, &db, cfg)?;
        *batch.db_counts.entry(db).or_default() += 1;
        batch.episodes += 1;

        let mut trace = ControllerTrace::default();
        let mut decisions: Vec<RetrieverDecision> = Vec::new();
        let mut open = false;
        let mut last_goal_tick = 0usize;

        for t in 0..cfg.horizon {
            if slot.needs_retrieval() && open {
                return Err(Error::invalid("retriever asked to act inside an open period"));
            }
            let out = slot.tick(agent, env, cfg, ActMode::Sample)?;
            let (ctrl_fake, retr_fake) = slot.fake_samples(&out.next, env, cfg)?;
            let d_ctrl = agent.disc.score(ctrl_fake.obs.as_slice())?;
            let d_retr = match &retr_fake {
                Some(f) => agent.disc.score(f.obs.as_slice())?,
                None => d_ctrl,
            };
            let prior_ctrl = prior_reward(d_ctrl, w.alpha, w.epsilon);
            let prior_retr = prior_reward(d_retr, w.alpha, w.epsilon);
            let r_goal = goal_reward(&slot.goal, &GoalObservation::from(&out.next.frame), w);
            let r_goal_retr = goal_reward(&slot.goal, &GoalObservation::from(&out.reference.frame), w);
            let r_ref = reference_reward(&out.next.frame, &out.reference.frame, w).total;
            let (r_retr, r_ctrl) = composite_rewards(r_goal_retr, r_goal, r_ref, prior_retr, prior_ctrl, w);

            buffers.push(&ctrl_fake)?;
            batch.fake_count += 1;
            if let Some(f) = &retr_fake {
                buffers.push(f)?;
                batch.fake_count += 1;
            }

            if let Some(info) = out.decision {
                decisions.push(RetrieverDecision {
                    env: e,
                    tick: t,
                    db: slot.retr.active_db.clone(),
                    clip_id: out.retrieved.map_or(0, |n| n.clip_id),
                    obs: info.obs,
                    raw: info.raw,
                    log_prob: info.log_prob,
                    value: info.value,
                    reward: 0.0,
                    span: 0,
                    done: false,
                });
                open = true;
            }
            let cur = decisions.last_mut().expect("a decision precedes every tick");
            cur.reward += r_retr;
            cur.span += 1;

            batch.ticks.push(TickRecord {
                env: e,
                tick: t,
                r_goal,
                r_goal_retr,
                r_ref,
                d_ctrl,
                d_retr,
                prior_ctrl,
                prior_retr,
                r_ctrl,
                r_retr,
                terminated: out.terminated,
                decision: cur.span == 1,
            });
            trace.obs.push(out.ctrl_obs);
            trace.raw.push(out.ctrl_raw);
            trace.log_prob.push(out.ctrl_log_prob);
            trace.value.push(out.ctrl_value);
            trace.reward.push(r_ctrl);
            trace.done.push(out.terminated);

            if out.terminated {
                cur.done = true;
                open = false;
                batch.terminations += 1;
                if t + 1 < cfg.horizon {
                    let db = pick_db(env, &mut slot.rng);
                    slot.reset(env, &db, cfg)?;
                    *batch.db_counts.entry(db).or_default() += 1;
                    batch.episodes += 1;
                    last_goal_tick = 0;
                }
                continue;
            }
            if slot.needs_retrieval() {
                open = false;
            }
            if slot.commit(out.next, cfg).is_some() {
                batch.goal_gaps.push(slot.episode_tick - last_goal_tick);
                last_goal_tick = slot.episode_tick;
            }
        }

        // bootstrap values at the horizon
        let reference = match &slot.reference {
            Some(_) if !slot.needs_retrieval() => env.peek_next(&slot.retr)?,
            Some(_) => env.current(&slot.retr)?,
            None => slot.state.clone(),
        };
        trace.last_value = agent
            .controller_value
            .value(&controller_observation(&slot.state, &slot.goal, &reference))?;
        let retr_last = if cfg.learnable_retriever {
            let db = env.get(&slot.retr.active_db)?;
            agent
                .retriever_value
                .value(&retriever_observation(&slot.state, &slot.goal, db))?
        } else {
            0.0
        };
        batch.controller.push(trace);
        batch.retriever.push(decisions);
        batch.retriever_last_value.push(retr_last);
    }
    Ok(batch)
}
