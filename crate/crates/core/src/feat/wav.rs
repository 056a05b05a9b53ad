//! Minimal RIFF/WAVE reader and writer for 16-bit PCM mono at 16 kHz.
//!
//! Only the subset the corpus uses is supported; anything else is rejected
//! with a typed error rather than silently resampled.

use std::fs;
use std::path::Path;

use super::{FeatError, Waveform, SAMPLE_RATE};

fn le_u16(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn le_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Read a 16-bit PCM mono 16 kHz WAV file, scaling samples to [-1, 1]
/// by division by 32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, FeatError> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_wav(&bytes, source_id)
}

fn parse_wav(bytes: &[u8], source_id: String) -> Result<Waveform, FeatError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(FeatError::NotWav("missing RIFF/WAVE magic".into()));
    }

    let mut off = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<(usize, usize)> = None; // offset, declared length

    while off + 8 <= bytes.len() {
        let chunk_id = &bytes[off..off + 4];
        let chunk_len = le_u32(bytes, off + 4) as usize;
        let body = off + 8;
        match chunk_id {
            b"fmt " => {
                if body + 16 > bytes.len() {
                    return Err(FeatError::Truncated {
                        declared: body + 16,
                        found: bytes.len(),
                    });
                }
                fmt = Some((
                    le_u16(bytes, body),
                    le_u16(bytes, body + 2),
                    le_u32(bytes, body + 4),
                    le_u16(bytes, body + 14),
                ));
            }
            b"data" => {
                data = Some((body, chunk_len));
            }
            _ => {}
        }
        // chunks are word-aligned
        off = body + chunk_len + (chunk_len & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| FeatError::NotWav("missing fmt chunk".into()))?;
    if format != 1 {
        return Err(FeatError::UnsupportedFormat(format!(
            "audio format {format}, expected PCM (1)"
        )));
    }
    if channels != 1 {
        return Err(FeatError::UnsupportedFormat(format!(
            "{channels} channels, expected mono"
        )));
    }
    if bits != 16 {
        return Err(FeatError::UnsupportedFormat(format!(
            "{bits}-bit samples, expected 16"
        )));
    }
    if rate != SAMPLE_RATE {
        return Err(FeatError::UnsupportedFormat(format!(
            "sample rate {rate} Hz, expected {SAMPLE_RATE}"
        )));
    }

    let (body, declared) = data.ok_or_else(|| FeatError::NotWav("missing data chunk".into()))?;
    if body + declared > bytes.len() {
        return Err(FeatError::Truncated {
            declared: body + declared,
            found: bytes.len(),
        });
    }

    let n = declared / 2;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let v = i16::from_le_bytes([bytes[body + 2 * i], bytes[body + 2 * i + 1]]);
        samples.push(v as f64 / 32768.0);
    }

    Ok(Waveform {
        samples,
        sample_rate: rate,
        source_id,
    })
}

/// Write samples in [-1, 1] as a 16-bit PCM mono WAV. Values are clamped,
/// then scaled by 32767 and rounded.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<(), FeatError> {
    let n_bytes = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + n_bytes);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + n_bytes) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(n_bytes as u32).to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
