//! Motion databases, exact weighted nearest-neighbour search and the
//! stitch/step retrieval environment.

mod dbfile;

pub use dbfile::{load_database, read_database, save_database, write_database, DB_MAGIC, DB_VERSION};

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::SystemTime;

use crate::error::{Error, Result};
use crate::features::{extract_key, extract_raw_query, fit_norm_stats, KeyFeature, NormStats};
use crate::motion::{replay_frame, CharacterState, Goal, MotionClip, PlanarTransform};

/// Default retrieval period in transitions (one clip per query).
pub const DEFAULT_PERIOD: usize = 15;

/// Immutable key/clip store for one motion type.
#[derive(Debug, Clone)]
pub struct RetrievalDatabase {
    name: String,
    dim: usize,
    /// Normalized keys, row-major `N x dim`.
    keys: Vec<f64>,
    norm_stats: NormStats,
    clips: Vec<MotionClip>,
    built_at: SystemTime,
}

impl RetrievalDatabase {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn key_row(&self, i: usize) -> &[f64] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norm_stats(&self) -> &NormStats {
        &self.norm_stats
    }

    pub fn clips(&self) -> &[MotionClip] {
        &self.clips
    }

    pub fn clip(&self, i: usize) -> &MotionClip {
        &self.clips[i]
    }

    pub fn built_at(&self) -> SystemTime {
        self.built_at
    }

    pub fn frames_per_clip(&self) -> usize {
        self.clips[0].len()
    }

    pub fn endpoint_count(&self) -> usize {
        self.clips[0].frames[0].endpoints.len()
    }

    /// Root height range over every frame in the database.
    pub fn height_range(&self) -> (f64, f64) {
        self.clips
            .iter()
            .flat_map(|c| c.frames.iter().map(|f| f.root_pos.z))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| (lo.min(z), hi.max(z)))
    }

    /// Turns weights and a raw query into a search query.
    pub fn weighted_query(&self, raw: &KeyFeature, weights: &[f64]) -> Result<Query> {
        weighted_query(raw, weights, &self.norm_stats)
    }

    /// Builds a database from raw parts, as read from a file.
    pub(crate) fn from_parts(
        name: String,
        dim: usize,
        keys: Vec<f64>,
        norm_stats: NormStats,
        clips: Vec<MotionClip>,
    ) -> Self {
        Self {
            name,
            dim,
            keys,
            norm_stats,
            clips,
            built_at: SystemTime::now(),
        }
    }
}

/// Computes normalized keys for `clips` and fits normalization on them.
pub fn build_database(clips: Vec<MotionClip>, name: &str) -> Result<RetrievalDatabase> {
    let first = clips
        .first()
        .ok_or_else(|| Error::invalid("cannot build a database from zero clips"))?;
    let frames = first.len();
    if let Some(c) = clips.iter().find(|c| c.len() != frames) {
        return Err(Error::invalid(format!(
            "mixed frame counts: clip {} has {} frames, expected {frames}",
            c.clip_id,
            c.len()
        )));
    }
    let raw: Vec<KeyFeature> = clips.iter().map(extract_key).collect();
    let dim = raw[0].dim();
    let norm_stats = if raw.len() == 1 {
        NormStats {
            mean: raw[0].0.clone(),
            std: vec![1.0; dim],
        }
    } else {
        fit_norm_stats(&raw)?
    };
    let mut keys = Vec::with_capacity(raw.len() * dim);
    for k in &raw {
        keys.extend(norm_stats.normalize(k.as_slice()));
    }
    Ok(RetrievalDatabase {
        name: name.to_string(),
        dim,
        keys,
        norm_stats,
        clips,
        built_at: SystemTime::now(),
    })
}

/// A search query in normalized key space.
///
/// Distances are `sum_i (values_i - weights_i * key_i)^2` with
/// `values = weights ⊙ normalize(raw)`, so a zero weight removes the feature
/// from the comparison entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Query {
    /// Plain Euclidean query on already-normalized values.
    pub fn unweighted(values: Vec<f64>) -> Self {
        let weights = vec![1.0; values.len()];
        Self { values, weights }
    }
}

/// Hadamard product of the weights with the normalized raw query.
pub fn weighted_query(raw: &KeyFeature, weights: &[f64], stats: &NormStats) -> Result<Query> {
    if raw.dim() != stats.dim() {
        return Err(Error::ShapeMismatch {
            expected: stats.dim(),
            actual: raw.dim(),
        });
    }
    if weights.len() != raw.dim() {
        return Err(Error::ShapeMismatch {
            expected: raw.dim(),
            actual: weights.len(),
        });
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::invalid(format!("query weight {w} must be finite and non-negative")));
    }
    let values = stats
        .normalize(raw.as_slice())
        .into_iter()
        .zip(weights)
        .map(|(q, w)| q * w)
        .collect();
    Ok(Query {
        values,
        weights: weights.to_vec(),
    })
}

/// One search hit: row index, clip id and Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub clip_id: u64,
    pub distance: f64,
}

#[inline]
fn row_dist2_bounded(values: &[f64], weights: &[f64], row: &[f64], bound: f64) -> f64 {
    let mut acc = 0.0;
    // check the bound every 8 dims; sums of non-negative terms only grow
    for ((v, w), k) in values.chunks(8).zip(weights.chunks(8)).zip(row.chunks(8)) {
        for i in 0..v.len() {
            let d = v[i] - w[i] * k[i];
            acc += d * d;
        }
        if acc > bound {
            return acc;
        }
    }
    acc
}

/// Exact k nearest neighbours in ascending distance, ties to the lower row.
pub fn knn_search(db: &RetrievalDatabase, query: &Query, k: usize) -> Result<Vec<Neighbor>> {
    if query.values.len() != db.dim || query.weights.len() != db.dim {
        return Err(Error::ShapeMismatch {
            expected: db.dim,
            actual: query.values.len(),
        });
    }
    if k == 0 || k > db.len() {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..={} for database `{}`",
            db.len(),
            db.name
        )));
    }
    let hit = |index: usize, d2: f64| Neighbor {
        index,
        clip_id: db.clips[index].clip_id,
        distance: d2.sqrt(),
    };
    if k == 1 {
        let mut best = (0usize, f64::INFINITY);
        for (i, row) in db.keys.chunks_exact(db.dim).enumerate() {
            let d2 = row_dist2_bounded(&query.values, &query.weights, row, best.1);
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        return Ok(vec![hit(best.0, best.1)]);
    }
    let mut all: Vec<(f64, usize)> = db
        .keys
        .chunks_exact(db.dim)
        .enumerate()
        .map(|(i, row)| (row_dist2_bounded(&query.values, &query.weights, row, f64::INFINITY), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_unstable_by(cmp);
    Ok(all.into_iter().map(|(d2, i)| hit(i, d2)).collect())
}

/// Planar alignment of a clip onto the character.
#[derive(Debug, Clone, PartialEq)]
pub struct Stitch {
    pub transform: PlanarTransform,
    /// The stitched first frame.
    pub anchor: CharacterState,
}

/// Aligns the clip's first-frame horizontal root position and heading with the
/// character's; height and tilt stay those of the clip.
pub fn stitch(clip: &MotionClip, character: &CharacterState) -> Stitch {
    let transform = PlanarTransform::aligning(&clip.frames[0], &character.frame);
    let anchor = replay_frame(clip, 0, &transform, character.time_index);
    Stitch { transform, anchor }
}

/// Position of the retrieval environment along its current clip.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalState {
    pub active_db: String,
    /// Row index of the current clip in the active database.
    pub clip_index: Option<usize>,
    pub clip_id: Option<u64>,
    pub frame_cursor: usize,
    pub stitch_transform: PlanarTransform,
    pub anchor: Option<CharacterState>,
    pub retr_flag: bool,
}

impl RetrievalState {
    /// Fresh state on `db`; the first step must retrieve.
    pub fn new(db: &str) -> Self {
        Self {
            active_db: db.to_string(),
            clip_index: None,
            clip_id: None,
            frame_cursor: 0,
            stitch_transform: PlanarTransform::identity(),
            anchor: None,
            retr_flag: true,
        }
    }
}

/// Result of one retrieval-environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalStep {
    /// The reference state for the next tick.
    pub next: CharacterState,
    /// Set when this step queried the database.
    pub retrieved: Option<Neighbor>,
}

/// The retrieval environment: a named set of databases and a query period.
#[derive(Debug, Clone)]
pub struct RetrievalEnv {
    dbs: BTreeMap<String, Arc<RetrievalDatabase>>,
    period: usize,
}

impl RetrievalEnv {
    pub fn new(dbs: impl IntoIterator<Item = Arc<RetrievalDatabase>>, period: usize) -> Result<Self> {
        let dbs: BTreeMap<_, _> = dbs.into_iter().map(|d| (d.name.clone(), d)).collect();
        if dbs.is_empty() {
            return Err(Error::invalid("retrieval environment needs at least one database"));
        }
        let dims: Vec<_> = dbs.values().map(|d| (d.dim, d.frames_per_clip())).collect();
        if dims.windows(2).any(|w| w[0].0 != w[1].0) {
            return Err(Error::invalid("databases disagree on key dimension"));
        }
        let min_frames = dims.iter().map(|d| d.1).min().unwrap();
        if period == 0 || period >= min_frames {
            return Err(Error::invalid(format!(
                "retrieval period {period} must be in 1..{min_frames}"
            )));
        }
        Ok(Self { dbs, period })
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.dbs.keys().map(String::as_str)
    }

    pub fn databases(&self) -> impl Iterator<Item = &Arc<RetrievalDatabase>> {
        self.dbs.values()
    }

    pub fn key_dim(&self) -> usize {
        self.dbs.values().next().unwrap().dim
    }

    pub fn get(&self, name: &str) -> Result<&Arc<RetrievalDatabase>> {
        self.dbs.get(name).ok_or_else(|| Error::UnknownDatabase {
            name: name.to_string(),
            available: self.dbs.keys().cloned().collect::<Vec<_>>().join(", "),
        })
    }

    /// Advances the retrieval environment by one tick.
    ///
    /// With the flag raised the weights select a clip from the active
    /// database (switched to `db_select` first, if given), the clip is stitched
    /// to `character` and its second frame returned. Otherwise the cursor
    /// steps along the current clip and `db_select` is deferred.
    pub fn step(
        &self,
        state: &mut RetrievalState,
        action: Option<&[f64]>,
        character: &CharacterState,
        goal: &Goal,
        db_select: Option<&str>,
    ) -> Result<RetrievalStep> {
        if !state.retr_flag {
            if action.is_some() {
                return Err(Error::invalid("retrieval action supplied while the flag is down"));
            }
            let db = self.get(&state.active_db)?;
            let (idx, anchor) = match (state.clip_index, &state.anchor) {
                (Some(i), Some(a)) => (i, a),
                _ => return Err(Error::invalid("no active retrieved clip")),
            };
            state.frame_cursor += 1;
            let next = replay_frame(db.clip(idx), state.frame_cursor, &state.stitch_transform, anchor.time_index);
            state.retr_flag = state.frame_cursor % self.period == 0;
            return Ok(RetrievalStep { next, retrieved: None });
        }

        let weights = action.ok_or_else(|| Error::invalid("retrieval flag is set but no action was given"))?;
        if let Some(name) = db_select {
            self.get(name)?;
            state.active_db = name.to_string();
        }
        let db = self.get(&state.active_db)?;
        let raw = extract_raw_query(character, goal);
        let query = db.weighted_query(&raw, weights)?;
        let hit = knn_search(db, &query, 1)?[0];
        let clip = db.clip(hit.index);
        let st = stitch(clip, character);

        state.clip_index = Some(hit.index);
        state.clip_id = Some(hit.clip_id);
        state.stitch_transform = st.transform;
        state.frame_cursor = 1;
        let next = replay_frame(clip, 1, &st.transform, st.anchor.time_index);
        state.anchor = Some(st.anchor);
        state.retr_flag = self.period == 1;
        Ok(RetrievalStep {
            next,
            retrieved: Some(hit),
        })
    }

    /// The reference state one frame past the cursor, held at the clip's
    /// final frame.
    pub fn peek_next(&self, state: &RetrievalState) -> Result<CharacterState> {
        Ok(self.peek_ahead(state, 1)?.remove(0))
    }

    /// The `n` reference states after the cursor, each held at the clip's
    /// final frame.
    pub fn peek_ahead(&self, state: &RetrievalState, n: usize) -> Result<Vec<CharacterState>> {
        let db = self.get(&state.active_db)?;
        let (idx, anchor) = match (state.clip_index, &state.anchor) {
            (Some(i), Some(a)) => (i, a),
            _ => return Err(Error::invalid("no active retrieved clip")),
        };
        let clip = db.clip(idx);
        Ok((1..=n)
            .map(|k| {
                let frame = (state.frame_cursor + k).min(clip.len() - 1);
                replay_frame(clip, frame, &state.stitch_transform, anchor.time_index)
            })
            .collect())
    }

    /// The reference state at the cursor.
    pub fn current(&self, state: &RetrievalState) -> Result<CharacterState> {
        let db = self.get(&state.active_db)?;
        let (idx, anchor) = match (state.clip_index, &state.anchor) {
            (Some(i), Some(a)) => (i, a),
            _ => return Err(Error::invalid("no active retrieved clip")),
        };
        Ok(replay_frame(db.clip(idx), state.frame_cursor, &state.stitch_transform, anchor.time_index))
    }
}
