//! Named-blob binary container.
//!
//! Network checkpoints, PLDA models, and embedding files all share one blob
//! layout after their type-specific headers: `{name_len u16, name bytes,
//! rank u8, dims u32..., f32 data little-endian, checksum u32}`. The
//! checksum (FNV-1a over the data bytes) catches single-byte corruption on
//! load.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dims: Vec<usize>,
    /// Values as stored (f32 precision), widened to f64.
    pub data: Vec<f64>,
}

impl Blob {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        let b = Blob {
            name: name.into(),
            dims,
            data,
        };
        debug_assert_eq!(b.dims.iter().product::<usize>(), b.data.len());
        b
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// Append one blob; values are narrowed to f32 on write.
pub fn append_blob(out: &mut Vec<u8>, blob: &Blob) {
    out.extend_from_slice(&(blob.name.len() as u16).to_le_bytes());
    out.extend_from_slice(blob.name.as_bytes());
    out.push(blob.dims.len() as u8);
    for &d in &blob.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let mut payload = Vec::with_capacity(blob.data.len() * 4);
    for &v in &blob.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
}

pub fn append_blobs(out: &mut Vec<u8>, blobs: &[Blob]) {
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for b in blobs {
        append_blob(out, b);
    }
}

/// Read the blob list written by [`append_blobs`] starting at `pos`.
pub fn read_blobs(bytes: &[u8], mut pos: usize) -> Result<Vec<Blob>, BlobError> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], BlobError> {
        if *pos + n > bytes.len() {
            return Err(BlobError::Corrupt(format!(
                "unexpected end of file at offset {pos}"
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| BlobError::Corrupt("blob name is not UTF-8".into()))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let checksum = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let payload = take(&mut pos, n * 4)?;
        if fnv1a(payload) != checksum {
            return Err(BlobError::Corrupt(format!("checksum mismatch in blob {name}")));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(f32::from_le_bytes(payload[4 * i..4 * i + 4].try_into().unwrap()) as f64);
        }
        blobs.push(Blob { name, dims, data });
    }
    if pos != bytes.len() {
        return Err(BlobError::Corrupt(format!(
            "{} trailing bytes after blob list",
            bytes.len() - pos
        )));
    }
    Ok(blobs)
}

/// Round every value onto the f32 grid. Parameters live on this grid so that
/// checkpoints (which store f32) round-trip bit-exactly.
pub fn quantize_f32(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = *v as f32 as f64;
    }
}
