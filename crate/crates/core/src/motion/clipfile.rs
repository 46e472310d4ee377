//! Text clip file: `{version: 1, fps: 30, clips: [{id, style, frames: [...]}]}`.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle reproduces every field bit for bit.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{CharacterFrame, MotionClip, FPS};
use crate::error::{Error, Result};

pub const CLIP_FILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipFile {
    version: u32,
    fps: u32,
    clips: Vec<ClipRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipRecord {
    id: u64,
    style: String,
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    p: [f64; 3],
    q: [f64; 4],
    v: [f64; 3],
    w: [f64; 3],
    ee: Vec<[f64; 3]>,
    eev: Vec<[f64; 3]>,
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn vec3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl From<&CharacterFrame> for FrameRecord {
    fn from(f: &CharacterFrame) -> Self {
        let q = &f.root_rot;
        FrameRecord {
            p: arr3(&f.root_pos),
            q: [q.w, q.i, q.j, q.k],
            v: arr3(&f.root_linvel),
            w: arr3(&f.root_angvel),
            ee: f.endpoints.iter().map(arr3).collect(),
            eev: f.endpoint_vels.iter().map(arr3).collect(),
        }
    }
}

impl From<&FrameRecord> for CharacterFrame {
    fn from(r: &FrameRecord) -> Self {
        CharacterFrame {
            root_pos: vec3(&r.p),
            root_rot: Quaternion::new(r.q[0], r.q[1], r.q[2], r.q[3]),
            root_linvel: vec3(&r.v),
            root_angvel: vec3(&r.w),
            endpoints: r.ee.iter().map(vec3).collect(),
            endpoint_vels: r.eev.iter().map(vec3).collect(),
        }
    }
}

/// Serializes clips to the clip file text.
pub fn write_clips_string(clips: &[MotionClip]) -> String {
    let file = ClipFile {
        version: CLIP_FILE_VERSION,
        fps: clips.first().map_or(FPS, |c| c.fps),
        clips: clips
            .iter()
            .map(|c| ClipRecord {
                id: c.clip_id,
                style: c.style_tag.clone(),
                frames: c.frames.iter().map(FrameRecord::from).collect(),
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("clip records always serialize")
}

/// Parses and validates clip file text.
pub fn parse_clips(text: &str) -> Result<Vec<MotionClip>> {
    let file: ClipFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if file.version != CLIP_FILE_VERSION {
        return Err(Error::Format(format!(
            "unsupported clip file version {}",
            file.version
        )));
    }
    let mut seen = HashSet::new();
    let mut clips = Vec::with_capacity(file.clips.len());
    for rec in &file.clips {
        if !seen.insert(rec.id) {
            return Err(Error::Validation {
                clip_id: rec.id,
                field: "id".into(),
                message: "duplicate clip id".into(),
            });
        }
        let clip = MotionClip {
            clip_id: rec.id,
            style_tag: rec.style.clone(),
            fps: file.fps,
            frames: rec.frames.iter().map(CharacterFrame::from).collect(),
        };
        clip.validate()?;
        clips.push(clip);
    }
    Ok(clips)
}

pub fn save_clips(clips: &[MotionClip], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_clips_string(clips)).map_err(|e| Error::io(path, e))
}

pub fn load_clips(path: impl AsRef<Path>) -> Result<Vec<MotionClip>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_clips(&text)
}
