//! Binary database container.
//!
//! Little-endian layout:
//! `"RACD" | u32 version | u32 name_len | name | u64 N | u64 D_k |
//!  f64[D_k] mean | f64[D_k] std | f64[N * D_k] keys (row-major) |
//!  u64 blob_len | clip file text`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::RetrievalDatabase;
use crate::error::{Error, Result};
use crate::features::{extract_key, NormStats};
use crate::motion::{parse_clips, write_clips_string};

pub const DB_MAGIC: &[u8; 4] = b"RACD";
pub const DB_VERSION: u32 = 1;

pub fn write_database<W: Write>(db: &RetrievalDatabase, mut w: W) -> Result<()> {
    w.write_all(DB_MAGIC)?;
    w.write_u32::<LE>(DB_VERSION)?;
    w.write_u32::<LE>(db.name.len() as u32)?;
    w.write_all(db.name.as_bytes())?;
    w.write_u64::<LE>(db.len() as u64)?;
    w.write_u64::<LE>(db.dim as u64)?;
    for v in db.norm_stats.mean.iter().chain(&db.norm_stats.std).chain(&db.keys) {
        w.write_f64::<LE>(*v)?;
    }
    let blob = write_clips_string(&db.clips);
    w.write_u64::<LE>(blob.len() as u64)?;
    w.write_all(blob.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

/// Reads a database and checks the stored keys against the stored clips.
pub fn read_database<R: Read>(mut r: R) -> Result<RetrievalDatabase> {
    let truncated = |e: std::io::Error| Error::Format(format!("truncated database: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != DB_MAGIC {
        return Err(Error::Format("not a motion database (bad magic)".into()));
    }
    let version = r.read_u32::<LE>().map_err(truncated)?;
    if version != DB_VERSION {
        return Err(Error::Format(format!("unsupported database version {version}")));
    }
    let name_len = r.read_u32::<LE>().map_err(truncated)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(truncated)?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("database name is not UTF-8".into()))?;
    let n = r.read_u64::<LE>().map_err(truncated)? as usize;
    let dim = r.read_u64::<LE>().map_err(truncated)? as usize;
    let mean = read_f64s(&mut r, dim).map_err(|_| Error::Format("truncated norm stats".into()))?;
    let std = read_f64s(&mut r, dim).map_err(|_| Error::Format("truncated norm stats".into()))?;
    let keys = read_f64s(&mut r, n * dim).map_err(|_| Error::Format("truncated key matrix".into()))?;
    let blob_len = r.read_u64::<LE>().map_err(truncated)? as usize;
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob).map_err(truncated)?;
    let text = String::from_utf8(blob).map_err(|_| Error::Format("clip blob is not UTF-8".into()))?;
    let clips = parse_clips(&text)?;

    if clips.len() != n {
        return Err(Error::Format(format!("header says {n} clips, blob has {}", clips.len())));
    }
    if std.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Format("normalization std must be positive".into()));
    }
    let stats = NormStats { mean, std };
    for (i, clip) in clips.iter().enumerate() {
        let k = stats.normalize(extract_key(clip).as_slice());
        if k.len() != dim || k.as_slice() != &keys[i * dim..(i + 1) * dim] {
            return Err(Error::Format(format!(
                "key row {i} does not match clip {}",
                clip.clip_id
            )));
        }
    }
    Ok(RetrievalDatabase::from_parts(name, dim, keys, stats, clips))
}

pub fn save_database(db: &RetrievalDatabase, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_database(db, BufWriter::new(f))
}

pub fn load_database(path: impl AsRef<Path>) -> Result<RetrievalDatabase> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_database(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::generate_synthetic_clips;
    use crate::retrieval::build_database;

    #[test]
    fn roundtrip() {
        let db = build_database(generate_synthetic_clips("run", 25, 3).unwrap(), "run").unwrap();
        let mut buf = Vec::new();
        write_database(&db, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"RACD");
        let back = read_database(buf.as_slice()).unwrap();
        assert_eq!(back.name(), "run");
        assert_eq!(back.keys(), db.keys());
        assert_eq!(back.norm_stats(), db.norm_stats());
        assert_eq!(back.clips(), db.clips());
    }

    #[test]
    fn corrupt_files_rejected() {
        let db = build_database(generate_synthetic_clips("walk", 5, 3).unwrap(), "w").unwrap();
        let mut buf = Vec::new();
        write_database(&db, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_database(bad.as_slice()).is_err());

        // flip a key value
        let key_offset = 4 + 4 + 4 + 1 + 8 + 8 + 2 * 8 * db.dim();
        let mut bad = buf.clone();
        bad[key_offset + 3] ^= 0x40;
        assert!(read_database(bad.as_slice()).is_err());

        assert!(read_database(&buf[..buf.len() - 10]).is_err());
    }
}
