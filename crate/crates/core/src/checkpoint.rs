//! Versioned binary checkpoints.
//!
//! Layout: `"RACK" | u32 version | u32 hash_len | config hash (hex) |
//! bincode(Checkpoint)`. The hash is recomputed from the embedded config on
//! load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ragail::DiscBuffers;
use crate::retrieval::RetrievalEnv;
use crate::trainer::{Agent, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RACK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters, optimizer moments and configuration of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub iteration: u64,
    pub agent: Agent,
    /// Present in resumable checkpoints.
    pub buffers: Option<DiscBuffers>,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, iteration: u64, agent: Agent, buffers: Option<DiscBuffers>) -> Self {
        Self {
            config_hash: config.hash(),
            config,
            iteration,
            agent,
            buffers,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LE>(CHECKPOINT_VERSION)?;
        w.write_u32::<LE>(self.config_hash.len() as u32)?;
        w.write_all(self.config_hash.as_bytes())?;
        bincode::serialize_into(&mut w, self).map_err(|e| Error::Format(format!("checkpoint encode: {e}")))?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LE>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.read_u32::<LE>()? as usize;
        if n > 256 {
            return Err(Error::Format("corrupt checkpoint header".into()));
        }
        let mut hash = vec![0u8; n];
        r.read_exact(&mut hash)?;
        let hash = String::from_utf8(hash).map_err(|_| Error::Format("corrupt checkpoint header".into()))?;
        let ck: Checkpoint =
            bincode::deserialize_from(r).map_err(|e| Error::Format(format!("checkpoint decode: {e}")))?;
        let actual = ck.config.hash();
        if hash != ck.config_hash || actual != hash {
            return Err(Error::Format(format!(
                "incompatible checkpoint config hash: header {hash}, config {actual}"
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }

    /// Checks that the networks fit the databases and period of `env`.
    pub fn check_compatible(&self, env: &RetrievalEnv) -> Result<()> {
        let l = self.agent.layout;
        if env.key_dim() != l.key_dim {
            return Err(Error::invalid(format!(
                "databases have key dimension {}, checkpoint expects {}",
                env.key_dim(),
                l.key_dim
            )));
        }
        for db in env.databases() {
            if db.endpoint_count() != l.endpoints {
                return Err(Error::invalid(format!(
                    "database `{}` has {} endpoints, checkpoint expects {}",
                    db.name(),
                    db.endpoint_count(),
                    l.endpoints
                )));
            }
        }
        if env.period() != self.config.period {
            return Err(Error::invalid(format!(
                "retrieval period {} differs from checkpoint period {}",
                env.period(),
                self.config.period
            )));
        }
        Ok(())
    }
}
