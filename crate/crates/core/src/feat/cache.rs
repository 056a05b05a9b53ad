//! On-disk feature cache.
//!
//! One flat binary file per utterance: `{magic "SRAV", kind u8, rows u32,
//! cols u32}` followed by row-major little-endian f32 values, plus a
//! plain-text manifest mapping utterance ids to cache paths (tab-separated).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{FeatError, FeatureKind, Tfr, UnifiedFeature};

const MAGIC: &[u8; 4] = b"SRAV";

pub fn write_feature_cache(path: impl AsRef<Path>, feat: &UnifiedFeature) -> Result<(), FeatError> {
    let m = &feat.matrix;
    let mut out = Vec::with_capacity(13 + m.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(feat.kind.as_u8());
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for &v in &m.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    atomic_write(path.as_ref(), &out)?;
    Ok(())
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<UnifiedFeature, FeatError> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 13 || &bytes[0..4] != MAGIC {
        return Err(FeatError::BadCache("missing SRAV magic".into()));
    }
    let kind = FeatureKind::from_u8(bytes[4])
        .ok_or_else(|| FeatError::BadCache(format!("unknown feature kind {}", bytes[4])))?;
    let rows = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let cols = u32::from_le_bytes([bytes[9], bytes[10], bytes[11], bytes[12]]) as usize;
    let expect = 13 + rows * cols * 4;
    if bytes.len() != expect {
        return Err(FeatError::BadCache(format!(
            "size mismatch: {} bytes, expected {expect}",
            bytes.len()
        )));
    }
    let mut m = Tfr::new(rows, cols);
    for (i, v) in m.data.iter_mut().enumerate() {
        let off = 13 + i * 4;
        *v = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
            as f64;
    }
    Ok(UnifiedFeature { matrix: m, kind })
}

/// Write `utterance_id <TAB> path` lines.
pub fn write_manifest(
    path: impl AsRef<Path>,
    entries: &[(String, PathBuf)],
) -> Result<(), FeatError> {
    let mut out = String::new();
    for (id, p) in entries {
        out.push_str(id);
        out.push('\t');
        out.push_str(&p.to_string_lossy());
        out.push('\n');
    }
    atomic_write(path.as_ref(), out.as_bytes())?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>, FeatError> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, p) = line.split_once('\t').ok_or_else(|| {
            FeatError::BadCache(format!("manifest line {}: missing tab", lineno + 1))
        })?;
        entries.push((id.to_string(), PathBuf::from(p)));
    }
    Ok(entries)
}

/// Write via a temp file in the same directory, then rename.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    fs::rename(&tmp, path)
}
