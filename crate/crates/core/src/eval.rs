//! Evaluation metrics: velocity error, termination rate and length,
//! feature-space Fréchet distance and multimodality.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::extract_disc_observation;
use crate::motion::{CharacterState, Goal};
use crate::ragail::{assemble_demo_window, DiscWindow};
use crate::retrieval::RetrievalEnv;
use crate::trainer::{sample_goal, stream_seed, ActMode, Agent, EnvSlot, TrainConfig};

/// One evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub db: String,
    /// Simulated state after each tick.
    pub states: Vec<CharacterState>,
    /// Retrieved reference state for each tick.
    pub retrieved: Vec<CharacterState>,
    /// Goal in force during each tick.
    pub goals: Vec<Goal>,
    pub terminated: bool,
    pub max_len: usize,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n > self.max_len {
            return Err(Error::invalid(format!("episode of {n} ticks exceeds max {}", self.max_len)));
        }
        if self.retrieved.len() != n || self.goals.len() != n {
            return Err(Error::invalid("episode traces have different lengths"));
        }
        if !self.terminated && n != self.max_len {
            return Err(Error::invalid("episode ended early without termination"));
        }
        Ok(())
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Ticks per episode.
    pub max_len: usize,
    pub seed: u64,
    /// Goals and runs per goal for multimodality.
    pub mmodality_goals: usize,
    pub mmodality_runs: usize,
    /// Demo windows drawn for the Fréchet distance reference set.
    pub fid_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            max_len: 300,
            seed: 0,
            mmodality_goals: 10,
            mmodality_runs: 5,
            fid_samples: 10_000,
        }
    }
}

/// Runs one episode. With `fixed_goal` the goal never changes; otherwise
/// the training goal schedule applies.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    agent: &Agent,
    env: &RetrievalEnv,
    cfg: &TrainConfig,
    db: &str,
    rng: ChaCha8Rng,
    max_len: usize,
    mode: ActMode,
    fixed_goal: Option<Goal>,
) -> Result<EpisodeRecord> {
    let mut slot = EnvSlot::new(rng, env, db, cfg)?;
    if let Some(g) = fixed_goal {
        slot.goal = g;
        slot.next_goal_tick = usize::MAX;
    }
    run_slot(&mut slot, agent, env, cfg, db, max_len, mode)
}

fn run_slot(
    slot: &mut EnvSlot,
    agent: &Agent,
    env: &RetrievalEnv,
    cfg: &TrainConfig,
    db: &str,
    max_len: usize,
    mode: ActMode,
) -> Result<EpisodeRecord> {
    let mut rec = EpisodeRecord {
        db: db.to_string(),
        states: Vec::with_capacity(max_len),
        retrieved: Vec::with_capacity(max_len),
        goals: Vec::with_capacity(max_len),
        terminated: false,
        max_len,
    };
    for _ in 0..max_len {
        let goal = slot.goal;
        let out = slot.tick(agent, env, cfg, mode)?;
        rec.states.push(out.next.clone());
        rec.retrieved.push(out.reference);
        rec.goals.push(goal);
        if out.terminated {
            rec.terminated = true;
            break;
        }
        slot.commit(out.next, cfg);
    }
    Ok(rec)
}

/// Deterministic-policy episodes cycling through `dbs`.
pub fn evaluate(
    agent: &Agent,
    env: &RetrievalEnv,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    dbs: &[String],
) -> Result<Vec<EpisodeRecord>> {
    if dbs.is_empty() {
        return Err(Error::invalid("no databases to evaluate on"));
    }
    (0..eval.episodes)
        .map(|i| {
            let rng = ChaCha8Rng::seed_from_u64(stream_seed(eval.seed, 0xE7A1, i as u64, 0));
            run_episode(agent, env, cfg, &dbs[i % dbs.len()], rng, eval.max_len, ActMode::Deterministic, None)
        })
        .collect()
}

fn nonempty(records: &[EpisodeRecord]) -> Result<()> {
    if records.is_empty() || records.iter().all(EpisodeRecord::is_empty) {
        return Err(Error::invalid("no episode records"));
    }
    Ok(())
}

fn velocity_error(states: &[CharacterState], goals: &[Goal]) -> f64 {
    states
        .iter()
        .zip(goals)
        .map(|(s, g)| (s.frame.planar_velocity() - g.desired_velocity).norm())
        .sum()
}

/// Mean horizontal velocity error over all ticks of all episodes, m/s.
pub fn mve(records: &[EpisodeRecord]) -> Result<f64> {
    nonempty(records)?;
    let ticks: usize = records.iter().map(EpisodeRecord::len).sum();
    let total: f64 = records.iter().map(|r| velocity_error(&r.states, &r.goals)).sum();
    Ok(total / ticks as f64)
}

/// Same as [`mve`] for the retrieved reference stream.
pub fn mve_retrieved(records: &[EpisodeRecord]) -> Result<f64> {
    nonempty(records)?;
    let ticks: usize = records.iter().map(EpisodeRecord::len).sum();
    let total: f64 = records.iter().map(|r| velocity_error(&r.retrieved, &r.goals)).sum();
    Ok(total / ticks as f64)
}

/// Percent of episodes terminated early and mean length as a percent of
/// the maximum.
pub fn trate_len(records: &[EpisodeRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::invalid("no episode records"));
    }
    let n = records.len() as f64;
    let terminated = records.iter().filter(|r| r.terminated).count() as f64;
    let len: f64 = records.iter().map(|r| r.len() as f64 / r.max_len as f64).sum();
    Ok((100.0 * terminated / n, 100.0 * len / n))
}

/// Discriminator-window features of every window in an episode.
pub fn episode_features(record: &EpisodeRecord, window: DiscWindow) -> Vec<Vec<f64>> {
    let n = window.states();
    if record.states.len() < n {
        return Vec::new();
    }
    record
        .states
        .windows(n)
        .map(|w| {
            let refs: Vec<&CharacterState> = w.iter().collect();
            extract_disc_observation(&refs).0
        })
        .collect()
}

/// Demo windows drawn uniformly from the clips of `dbs`.
pub fn demo_features(env: &RetrievalEnv, dbs: &[String], count: usize, window: DiscWindow, seed: u64) -> Result<Vec<Vec<f64>>> {
    if dbs.is_empty() {
        return Err(Error::invalid("no databases for demo features"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0xF1D0, 0, 0));
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let db = env.get(&dbs[rng.random_range(0..dbs.len())])?;
        let clip = db.clip(rng.random_range(0..db.len()));
        let t = rng.random_range(window.before..=clip.len() - window.states() + window.before);
        out.push(assemble_demo_window(clip, t, window)?.obs.0);
    }
    Ok(out)
}

fn mean_cov(set: &[Vec<f64>], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = set.len();
    let mut mu = DVector::zeros(dim);
    for x in set {
        if x.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: dim,
                actual: x.len(),
            });
        }
        mu += DVector::from_column_slice(x);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for x in set {
        let d = DVector::from_column_slice(x) - &mu;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= (n - 1) as f64;
    if !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite covariance"));
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn feature_fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = a.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(Error::invalid("empty feature set"));
    }
    for (name, set) in [("first", a), ("second", b)] {
        if set.len() < dim + 1 {
            return Err(Error::invalid(format!(
                "{name} feature set has {} samples, need at least {}",
                set.len(),
                dim + 1
            )));
        }
    }
    let (mu_a, cov_a) = mean_cov(a, dim)?;
    let (mu_b, cov_b) = mean_cov(b, dim)?;
    let sa = sym_sqrt(&cov_a);
    let inner = &sa * &cov_b * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let fid = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(fid.max(0.0))
}

/// Mean over goals of the mean pairwise distance between the `m` feature
/// vectors `run(goal, k)` returns for runs `k = 0..m`.
pub fn mmodality<F>(mut run: F, goals: &[Goal], m: usize) -> Result<f64>
where
    F: FnMut(&Goal, usize) -> Result<Vec<f64>>,
{
    if m < 2 {
        return Err(Error::invalid(format!("mmodality needs m >= 2, got {m}")));
    }
    if goals.is_empty() {
        return Err(Error::invalid("mmodality needs at least one goal"));
    }
    let mut total = 0.0;
    for g in goals {
        let feats = (0..m).map(|k| run(g, k)).collect::<Result<Vec<_>>>()?;
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..m {
            for j in i + 1..m {
                sum += feats[i].iter().zip(&feats[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / goals.len() as f64)
}

/// Mean discriminator-window feature of an episode.
pub fn episode_mean_feature(record: &EpisodeRecord, window: DiscWindow) -> Result<Vec<f64>> {
    let feats = episode_features(record, window);
    let Some(first) = feats.first() else {
        return Err(Error::invalid("episode shorter than the feature window"));
    };
    let mut mean = vec![0.0; first.len()];
    for f in &feats {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    let n = feats.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Multimodality of the trained system: for each goal the start state is
/// fixed and the runs differ only in their noise stream after reset.
pub fn system_mmodality(
    agent: &Agent,
    env: &RetrievalEnv,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    db: &str,
    mode: ActMode,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(eval.seed, 0x3303, 0, 0));
    let goals: Vec<Goal> = (0..eval.mmodality_goals).map(|_| sample_goal(&mut rng, cfg.v_max)).collect();
    let window = cfg.disc_window;
    let mut gi = 0u64;
    let mut last_goal: Option<Goal> = None;
    mmodality(
        |goal, k| {
            if last_goal != Some(*goal) {
                gi += 1;
                last_goal = Some(*goal);
            }
            let reset = ChaCha8Rng::seed_from_u64(stream_seed(eval.seed, 0x3304, gi, 0));
            let mut slot = EnvSlot::new(reset, env, db, cfg)?;
            slot.goal = *goal;
            slot.next_goal_tick = usize::MAX;
            slot.rng = ChaCha8Rng::seed_from_u64(stream_seed(eval.seed, 0x3305, gi, k as u64));
            let rec = run_slot(&mut slot, agent, env, cfg, db, eval.max_len, mode)?;
            episode_mean_feature(&rec, window)
        },
        &goals,
        eval.mmodality_runs,
    )
}

/// Table-style evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mve: f64,
    pub trate: f64,
    pub len: f64,
    pub fid: f64,
    pub mmodality: f64,
    /// Velocity error of the retrieved stream alone.
    pub mve_retrieved: f64,
    pub episodes: usize,
    pub ticks: usize,
}

impl EvalReport {
    /// Recomputes the record-based metrics; `fid` and `mmodality` come from
    /// the caller.
    pub fn from_records(records: &[EpisodeRecord], fid: f64, mmodality: f64) -> Result<Self> {
        let (trate, len) = trate_len(records)?;
        Ok(Self {
            mve: mve(records)?,
            trate,
            len,
            fid,
            mmodality,
            mve_retrieved: mve_retrieved(records)?,
            episodes: records.len(),
            ticks: records.iter().map(EpisodeRecord::len).sum(),
        })
    }
}

/// Runs the full evaluation: episodes, FID against demo windows and
/// multimodality on the first database.
pub fn evaluate_system(
    agent: &Agent,
    env: &RetrievalEnv,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    dbs: &[String],
) -> Result<(EvalReport, Vec<EpisodeRecord>)> {
    let records = evaluate(agent, env, cfg, eval, dbs)?;
    let window = cfg.disc_window;
    let sim: Vec<Vec<f64>> = records.iter().flat_map(|r| episode_features(r, window)).collect();
    let demo = demo_features(env, dbs, eval.fid_samples, window, eval.seed)?;
    let fid = feature_fid(&sim, &demo)?;
    let mm = system_mmodality(agent, env, cfg, eval, &dbs[0], ActMode::Sample)?;
    let report = EvalReport::from_records(&records, fid, mm)?;
    Ok((report, records))
}

/// Writes the report as JSON.
pub fn emit_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if report.episodes == 0 {
        return Err(Error::invalid("report has no episodes"));
    }
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
}

/// One JSON record per line.
pub fn save_records(records: &[EpisodeRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<EpisodeRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EpisodeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::CharacterFrame;
    use nalgebra::Vector3;

    fn record(vels: &[(f64, f64)], goal: Goal, max_len: usize, terminated: bool) -> EpisodeRecord {
        let states: Vec<CharacterState> = vels
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                let mut f = CharacterFrame::at_rest(Vector3::new(0.0, 0.0, 0.9), 0.0, vec![Vector3::zeros(); 4]);
                f.root_linvel = Vector3::new(x, y, 0.0);
                CharacterState::new(f, i as u64)
            })
            .collect();
        EpisodeRecord {
            db: "walk".into(),
            retrieved: states.clone(),
            goals: vec![goal; states.len()],
            states,
            terminated,
            max_len,
        }
    }

    #[test]
    fn mve_trivial_cases() {
        let g = Goal::new(1.0, 0.0, None);
        assert_eq!(mve(&[record(&[(1.0, 0.0); 5], g, 5, false)]).unwrap(), 0.0);
        assert_eq!(mve(&[record(&[(1.0, 1.0); 5], g, 5, false)]).unwrap(), 1.0);
        assert!(mve(&[]).is_err());
    }

    #[test]
    fn trate_len_arithmetic() {
        let g = Goal::still();
        let full = record(&[(0.0, 0.0); 10], g, 10, false);
        let half = record(&[(0.0, 0.0); 5], g, 10, true);
        assert_eq!(trate_len(&[full.clone(), full.clone()]).unwrap(), (0.0, 100.0));
        assert_eq!(trate_len(&[full.clone(), full.clone(), full, half]).unwrap(), (25.0, 87.5));
    }

    #[test]
    fn scalar_fid() {
        let a: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.1]).collect();
        let b: Vec<Vec<f64>> = (0..80).map(|i| vec![3.0 + (i as f64 * 0.37).sin() * 2.0]).collect();
        let stat = |s: &[Vec<f64>]| {
            let n = s.len() as f64;
            let m = s.iter().map(|x| x[0]).sum::<f64>() / n;
            let v = s.iter().map(|x| (x[0] - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, v.sqrt())
        };
        let (ma, sa) = stat(&a);
        let (mb, sb) = stat(&b);
        let expect = (ma - mb).powi(2) + (sa - sb).powi(2);
        assert!((feature_fid(&a, &b).unwrap() - expect).abs() < 1e-8);
    }

    #[test]
    fn fid_needs_samples() {
        let a = vec![vec![0.0, 1.0]; 2];
        assert!(feature_fid(&a, &a).is_err());
    }

    #[test]
    fn mmodality_rejects_single_run() {
        assert!(mmodality(|_, _| Ok(vec![0.0]), &[Goal::still()], 1).is_err());
        let d = mmodality(|_, k| Ok(vec![k as f64 * 3.0, 0.0]), &[Goal::still()], 2).unwrap();
        assert_eq!(d, 3.0);
    }

    #[test]
    fn empty_report_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let r = EvalReport {
            mve: 0.0,
            trate: 0.0,
            len: 0.0,
            fid: 0.0,
            mmodality: 0.0,
            mve_retrieved: 0.0,
            episodes: 0,
            ticks: 0,
        };
        assert!(emit_report(&r, dir.path().join("r.json")).is_err());
    }
}
