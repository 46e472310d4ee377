//! A steering session: one environment driven tick by tick.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use racon_core::checkpoint::Checkpoint;
use racon_core::motion::{CharacterState, Goal};
use racon_core::retrieval::{load_database, RetrievalEnv};
use racon_core::trainer::{stream_seed, ActMode, Agent, EnvSlot, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

/// Speed limit for steering goals, m/s.
pub const DEFAULT_V_MAX: f64 = 8.0;

/// Read-only state shared by every session of a server.
#[derive(Debug)]
pub struct Shared {
    pub agent: Agent,
    pub cfg: TrainConfig,
    pub env: RetrievalEnv,
    pub v_max: f64,
}

impl Shared {
    pub fn new(ckpt: Checkpoint, env: RetrievalEnv) -> ServiceResult<Self> {
        ckpt.check_compatible(&env)?;
        if env.period() != ckpt.config.period {
            return Err(ServiceError::Invalid(format!(
                "databases use period {}, checkpoint was trained with {}",
                env.period(),
                ckpt.config.period
            )));
        }
        Ok(Self {
            agent: ckpt.agent,
            cfg: ckpt.config,
            env,
            v_max: DEFAULT_V_MAX,
        })
    }

    /// Loads a checkpoint and database files.
    pub fn load(checkpoint: &std::path::Path, dbs: &[std::path::PathBuf]) -> ServiceResult<Self> {
        let ckpt = Checkpoint::load(checkpoint)?;
        let mut loaded = Vec::with_capacity(dbs.len());
        for p in dbs {
            loaded.push(Arc::new(load_database(p)?));
        }
        let env = RetrievalEnv::new(loaded, ckpt.config.period)?;
        Self::new(ckpt, env)
    }

    pub fn database_names(&self) -> Vec<String> {
        self.env.names().map(str::to_string).collect()
    }

    fn check_db(&self, name: &str) -> ServiceResult<()> {
        if self.env.get(name).is_err() {
            return Err(ServiceError::UnknownDatabase {
                name: name.to_string(),
                available: self.database_names(),
            });
        }
        Ok(())
    }

    /// Validates a client message against this server's databases and speed limit.
    pub fn check(&self, msg: &ClientMessage) -> ServiceResult<()> {
        match msg {
            ClientMessage::SetGoal { vx, vy, facing } => {
                Goal::new(*vx, *vy, *facing).validate(self.v_max)?;
                Ok(())
            }
            ClientMessage::SwitchDb { name } => self.check_db(name),
            ClientMessage::Reset => Ok(()),
        }
    }
}

/// Client to server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    SetGoal {
        vx: f64,
        vy: f64,
        #[serde(default)]
        facing: Option<f64>,
    },
    SwitchDb {
        name: String,
    },
    Reset,
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame(Frame),
    /// Frames `from..=to` were dropped for this subscriber.
    Gap { from: u64, to: u64 },
    Error { message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalMsg {
    pub vx: f64,
    pub vy: f64,
    pub facing: Option<f64>,
}

impl From<&Goal> for GoalMsg {
    fn from(g: &Goal) -> Self {
        Self {
            vx: g.desired_velocity.x,
            vy: g.desired_velocity.y,
            facing: g.desired_facing,
        }
    }
}

/// Wire form of a character state. Rotation is `[w, x, y, z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMsg {
    pub time_index: u64,
    pub root_pos: [f64; 3],
    pub root_rot: [f64; 4],
    pub root_linvel: [f64; 3],
    pub root_angvel: [f64; 3],
    pub endpoints: Vec<[f64; 3]>,
    pub endpoint_vels: Vec<[f64; 3]>,
}

impl From<&CharacterState> for StateMsg {
    fn from(s: &CharacterState) -> Self {
        let f = &s.frame;
        let v = |x: &racon_core::nalgebra::Vector3<f64>| [x.x, x.y, x.z];
        Self {
            time_index: s.time_index,
            root_pos: v(&f.root_pos),
            root_rot: [f.root_rot.w, f.root_rot.i, f.root_rot.j, f.root_rot.k],
            root_linvel: v(&f.root_linvel),
            root_angvel: v(&f.root_angvel),
            endpoints: f.endpoints.iter().map(v).collect(),
            endpoint_vels: f.endpoint_vels.iter().map(v).collect(),
        }
    }
}

/// One simulated tick as streamed to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub tick: u64,
    pub episode_tick: u64,
    /// Character after the tick.
    pub state: StateMsg,
    /// Retrieved reference the controller tracked this tick.
    pub ref_state: StateMsg,
    /// Database of the clip being played.
    pub db: String,
    /// Requested database, waiting for the next retrieval.
    pub pending_db: Option<String>,
    pub clip_id: Option<u64>,
    /// Clip id when this tick queried the database.
    pub retrieved: Option<u64>,
    /// Goal in force during the tick.
    pub goal: GoalMsg,
    /// The episode ended on this tick; the next tick starts a new one.
    pub terminated: bool,
    /// Milliseconds from the start of the session's tick loop to the start of
    /// this tick; set by the server.
    pub server_ms: Option<f64>,
}

/// Session state. Ticking is synchronous and deterministic given the seed
/// and the order of applied messages.
#[derive(Debug)]
pub struct Session {
    pub id: u64,
    pub seed: u64,
    shared: Arc<Shared>,
    slot: EnvSlot,
    goal: Goal,
    tick: u64,
}

impl Session {
    pub fn new(id: u64, shared: Arc<Shared>, db: &str, seed: u64) -> ServiceResult<Self> {
        shared.check_db(db)?;
        let rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0x5E55, 0, 0));
        let slot = EnvSlot::new(rng, &shared.env, db, &shared.cfg)?;
        let mut s = Self {
            id,
            seed,
            shared,
            slot,
            goal: Goal::still(),
            tick: 0,
        };
        s.pin_goal();
        Ok(s)
    }

    /// The user owns the goal; the training schedule never fires.
    fn pin_goal(&mut self) {
        self.slot.goal = self.goal;
        self.slot.next_goal_tick = usize::MAX;
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn goal(&self) -> Goal {
        self.goal
    }

    pub fn active_db(&self) -> &str {
        &self.slot.retr.active_db
    }

    pub fn pending_db(&self) -> Option<&str> {
        self.slot.pending_db.as_deref()
    }

    pub fn state(&self) -> &CharacterState {
        &self.slot.state
    }

    /// Applies a client message; takes effect on the next tick.
    pub fn apply(&mut self, msg: &ClientMessage) -> ServiceResult<()> {
        self.shared.check(msg)?;
        match msg {
            ClientMessage::SetGoal { vx, vy, facing } => {
                self.goal = Goal::new(*vx, *vy, *facing);
                self.slot.goal = self.goal;
            }
            ClientMessage::SwitchDb { name } => {
                if *name == self.slot.retr.active_db {
                    self.slot.pending_db = None;
                } else {
                    self.slot.pending_db = Some(name.clone());
                }
            }
            ClientMessage::Reset => self.restart()?,
        }
        Ok(())
    }

    fn restart(&mut self) -> ServiceResult<()> {
        let db = self
            .slot
            .pending_db
            .clone()
            .unwrap_or_else(|| self.slot.retr.active_db.clone());
        self.slot.reset(&self.shared.env, &db, &self.shared.cfg)?;
        self.pin_goal();
        Ok(())
    }

    /// Advances one tick. A terminated episode restarts on the active
    /// database with the same goal.
    pub fn tick(&mut self) -> ServiceResult<Frame> {
        let sh = Arc::clone(&self.shared);
        let out = self.slot.tick(&sh.agent, &sh.env, &sh.cfg, ActMode::Deterministic)?;
        let frame = Frame {
            tick: self.tick,
            episode_tick: self.slot.episode_tick as u64,
            state: StateMsg::from(&out.next),
            ref_state: StateMsg::from(&out.reference),
            db: self.slot.retr.active_db.clone(),
            pending_db: self.slot.pending_db.clone(),
            clip_id: self.slot.retr.clip_id,
            retrieved: out.retrieved.map(|n| n.clip_id),
            goal: GoalMsg::from(&self.slot.goal),
            terminated: out.terminated,
            server_ms: None,
        };
        self.tick += 1;
        if out.terminated {
            self.restart()?;
        } else {
            self.slot.commit(out.next, &sh.cfg);
        }
        Ok(frame)
    }
}

/// Checks a server message against the published frame schema.
pub fn validate_message(v: &serde_json::Value) -> Result<(), String> {
    let obj = v.as_object().ok_or("message is not an object")?;
    let ty = obj.get("type").and_then(|t| t.as_str()).ok_or("missing `type`")?;
    let uint = |k: &str| obj.get(k).and_then(|x| x.as_u64()).ok_or(format!("`{k}` must be an unsigned integer"));
    match ty {
        "frame" => {
            uint("tick")?;
            uint("episode_tick")?;
            obj.get("db").and_then(|x| x.as_str()).ok_or("`db` must be a string")?;
            obj.get("terminated").and_then(|x| x.as_bool()).ok_or("`terminated` must be a boolean")?;
            for k in ["pending_db", "clip_id", "retrieved"] {
                if !obj.contains_key(k) {
                    return Err(format!("missing `{k}`"));
                }
            }
            let goal = obj.get("goal").and_then(|g| g.as_object()).ok_or("`goal` must be an object")?;
            for k in ["vx", "vy"] {
                goal.get(k).and_then(|x| x.as_f64()).ok_or(format!("`goal.{k}` must be a number"))?;
            }
            for k in ["state", "ref_state"] {
                check_state(obj.get(k).ok_or(format!("missing `{k}`"))?).map_err(|e| format!("{k}: {e}"))?;
            }
            Ok(())
        }
        "gap" => {
            let (from, to) = (uint("from")?, uint("to")?);
            if from > to {
                return Err("gap `from` exceeds `to`".into());
            }
            Ok(())
        }
        "error" => obj
            .get("message")
            .and_then(|m| m.as_str())
            .map(|_| ())
            .ok_or_else(|| "`message` must be a string".into()),
        other => Err(format!("unknown message type `{other}`")),
    }
}

fn check_state(v: &serde_json::Value) -> Result<(), String> {
    let obj = v.as_object().ok_or("not an object")?;
    obj.get("time_index").and_then(|x| x.as_u64()).ok_or("bad `time_index`")?;
    let nums = |x: &serde_json::Value, n: usize| {
        x.as_array()
            .is_some_and(|a| a.len() == n && a.iter().all(|e| e.as_f64().is_some_and(f64::is_finite)))
    };
    for (k, n) in [("root_pos", 3), ("root_rot", 4), ("root_linvel", 3), ("root_angvel", 3)] {
        if !obj.get(k).is_some_and(|x| nums(x, n)) {
            return Err(format!("`{k}` must hold {n} finite numbers"));
        }
    }
    let mut lens = Vec::new();
    for k in ["endpoints", "endpoint_vels"] {
        let a = obj.get(k).and_then(|x| x.as_array()).ok_or(format!("`{k}` must be an array"))?;
        if !a.iter().all(|p| nums(p, 3)) {
            return Err(format!("`{k}` entries must hold 3 finite numbers"));
        }
        lens.push(a.len());
    }
    if lens[0] != lens[1] {
        return Err("endpoint and velocity counts differ".into());
    }
    Ok(())
}
