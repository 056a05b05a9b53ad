//! Time-frequency front-ends.
//!
//! Audio comes in as 16 kHz mono PCM and leaves as a fixed-shape
//! [`UnifiedFeature`]: 864x400 for the constant-Q transform, 80x400 for the
//! log linear-filterbank. Utterances longer than 400 frames are truncated,
//! shorter ones are tiled cyclically along time.

mod cache;
mod cqt;
mod llfb;
mod wav;

pub use cache::{read_feature_cache, read_manifest, write_feature_cache, write_manifest};
pub(crate) use cache::atomic_write as atomic_write_bytes;
pub use cqt::{cqt, CqtParams, CqtTransform};
pub use llfb::{llfb, LlfbParams};
pub use wav::{read_wav, write_wav};

use thiserror::Error;

/// Fixed number of time frames every feature is unified to.
pub const TARGET_FRAMES: usize = 400;

/// Additive floor inside every log compression so silence maps to
/// `ln(LOG_FLOOR)` instead of negative infinity.
pub const LOG_FLOOR: f64 = 1e-10;

/// Expected input sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("not a RIFF/WAVE file: {0}")]
    NotWav(String),
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated WAV: declared {declared} bytes, found {found}")]
    Truncated { declared: usize, found: usize },
    #[error("waveform too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("empty time-frequency input")]
    EmptyInput,
    #[error("bad feature cache: {0}")]
    BadCache(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which front-end produced a feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Cqt,
    Llfb,
}

impl FeatureKind {
    pub fn as_u8(self) -> u8 {
        match self {
            FeatureKind::Cqt => 0,
            FeatureKind::Llfb => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(FeatureKind::Cqt),
            1 => Some(FeatureKind::Llfb),
            _ => None,
        }
    }
}

/// Mono waveform with amplitudes normalized to [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_id: impl Into<String>) -> Self {
        Waveform {
            samples,
            sample_rate,
            source_id: source_id.into(),
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Raw time-frequency matrix, row-major, `rows` frequency bins by `cols`
/// time frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Tfr {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tfr {
    pub fn new(rows: usize, cols: usize) -> Self {
        Tfr {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.cols + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

/// Fixed-shape feature matrix fed to the network.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedFeature {
    pub matrix: Tfr,
    pub kind: FeatureKind,
}

impl UnifiedFeature {
    pub fn rows(&self) -> usize {
        self.matrix.rows
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols
    }
}

/// Per-utterance mean/variance normalization over the whole matrix. The
/// single global affine conditions training without touching the relative
/// spectral envelope (per-bin statistics would erase it). Off by default in
/// the pipeline; desk-scale runs switch it on.
pub fn mean_var_normalize(tfr: &mut Tfr) {
    let n = tfr.data.len() as f64;
    let mean = tfr.data.iter().sum::<f64>() / n;
    let var = tfr.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    for v in tfr.data.iter_mut() {
        *v = (*v - mean) / denom;
    }
}

/// Unify a raw TFR to exactly `target_frames` columns: truncate long inputs,
/// tile short ones cyclically from the start.
pub fn unify(tfr: &Tfr, kind: FeatureKind, target_frames: usize) -> Result<UnifiedFeature, FeatError> {
    if tfr.cols == 0 || tfr.rows == 0 {
        return Err(FeatError::EmptyInput);
    }
    let mut out = Tfr::new(tfr.rows, target_frames);
    for r in 0..tfr.rows {
        let src = tfr.row(r);
        let dst = &mut out.data[r * target_frames..(r + 1) * target_frames];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = src[j % tfr.cols];
        }
    }
    Ok(UnifiedFeature { matrix: out, kind })
}
