//! Log linear-filterbank features.
//!
//! Classical pipeline: framing, Hamming window, power spectrum, linearly
//! spaced triangular filters, log compression.

use super::{FeatError, Tfr, Waveform, LOG_FLOOR};

#[derive(Debug, Clone)]
pub struct LlfbParams {
    pub n_filters: usize,
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_bins: usize,
    pub log_floor: f64,
}

impl Default for LlfbParams {
    fn default() -> Self {
        LlfbParams {
            n_filters: 80,
            frame_len_ms: 20.0,
            frame_shift_ms: 10.0,
            fft_bins: 512,
            log_floor: LOG_FLOOR,
        }
    }
}

impl LlfbParams {
    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (self.frame_len_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift(&self, sample_rate: u32) -> usize {
        (self.frame_shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Center frequency of filter `i`: filters are triangles over
    /// `n_filters + 1` equal intervals spanning [0, sample_rate/2].
    pub fn filter_center(&self, i: usize, sample_rate: u32) -> f64 {
        let nyquist = sample_rate as f64 / 2.0;
        (i + 1) as f64 * nyquist / (self.n_filters + 1) as f64
    }
}

/// Log linear-filterbank energies, `n_filters` rows by
/// `(len - frame) / shift + 1` columns.
pub fn llfb(w: &Waveform, params: &LlfbParams) -> Result<Tfr, FeatError> {
    let sr = w.sample_rate;
    let frame = params.frame_len(sr);
    let shift = params.frame_shift(sr);
    let len = w.samples.len();
    if len < frame {
        return Err(FeatError::TooShort { len, min: frame });
    }
    let n_frames = (len - frame) / shift + 1;
    let n_fft = params.fft_bins;
    let half = n_fft / 2;

    let hamming: Vec<f64> = (0..frame)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (frame - 1) as f64).cos())
        .collect();

    // triangular filter weights per FFT bin, sparse per filter
    let nyquist = sr as f64 / 2.0;
    let spacing = nyquist / (params.n_filters + 1) as f64;
    let bin_hz = sr as f64 / n_fft as f64;
    let mut filters: Vec<Vec<(usize, f64)>> = Vec::with_capacity(params.n_filters);
    for i in 0..params.n_filters {
        let lo = i as f64 * spacing;
        let mid = (i + 1) as f64 * spacing;
        let hi = (i + 2) as f64 * spacing;
        let mut taps = Vec::new();
        for j in 0..=half {
            let f = j as f64 * bin_hz;
            let weight = if f > lo && f < mid {
                (f - lo) / (mid - lo)
            } else if (f - mid).abs() < 1e-12 {
                1.0
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if weight > 0.0 {
                taps.push((j, weight));
            }
        }
        filters.push(taps);
    }

    let fft = rustfft::FftPlanner::new().plan_fft_forward(n_fft);
    let mut out = Tfr::new(params.n_filters, n_frames);
    let mut buf = vec![rustfft::num_complex::Complex64::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0f64; half + 1];
    for t in 0..n_frames {
        let start = t * shift;
        for v in buf.iter_mut() {
            *v = rustfft::num_complex::Complex64::new(0.0, 0.0);
        }
        for i in 0..frame {
            buf[i].re = w.samples[start + i] * hamming[i];
        }
        fft.process(&mut buf);
        for (j, p) in power.iter_mut().enumerate() {
            *p = buf[j].norm_sqr();
        }
        for (i, taps) in filters.iter().enumerate() {
            let energy: f64 = taps.iter().map(|&(j, wgt)| wgt * power[j]).sum();
            out.set(i, t, (energy + params.log_floor).ln());
        }
    }
    Ok(out)
}
