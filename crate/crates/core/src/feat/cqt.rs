//! Constant-Q transform.
//!
//! Direct per-bin evaluation: every bin gets a Hann-windowed complex
//! projection at its center frequency, hopped every 8 ms. Bin bandwidths are
//! gamma-widened so the lowest octaves stay computable, which matches the
//! published frequency grid without the toolkit's resampling machinery.

use super::{FeatError, Tfr, Waveform, LOG_FLOOR};

/// Constant-Q analysis parameters.
///
/// `f_min = f_max / 2^octaves`, bins at `f_min * 2^(k/B)`, hop fixed at 8 ms.
#[derive(Debug, Clone)]
pub struct CqtParams {
    pub sample_rate: u32,
    pub f_max: f64,
    pub octaves: u32,
    pub bins_per_octave: u32,
    /// Bandwidth offset in Hz: `228.7 * (2^(1/B) - 2^(-1/B))`.
    pub gamma: f64,
    /// Re-sampling period of the reference toolkit; recorded for config
    /// fidelity, the direct transform does not resample.
    pub resample_period_d: u32,
    /// Hop between analysis frames in seconds.
    pub hop_s: f64,
}

impl CqtParams {
    /// Full-resolution analysis: 9 octaves x 96 bins = 864 rows.
    pub fn paper(sample_rate: u32) -> Self {
        Self::with_geometry(sample_rate, 9, 96)
    }

    /// Desk-scale analysis: 8 octaves x 10 bins = 80 rows, same hop.
    pub fn reduced(sample_rate: u32) -> Self {
        Self::with_geometry(sample_rate, 8, 10)
    }

    pub fn with_geometry(sample_rate: u32, octaves: u32, bins_per_octave: u32) -> Self {
        let b = bins_per_octave as f64;
        let gamma = 228.7 * (2f64.powf(1.0 / b) - 2f64.powf(-1.0 / b));
        CqtParams {
            sample_rate,
            f_max: sample_rate as f64 / 2.0,
            octaves,
            bins_per_octave,
            gamma,
            resample_period_d: 16,
            hop_s: 0.008,
        }
    }

    pub fn f_min(&self) -> f64 {
        self.f_max / 2f64.powi(self.octaves as i32)
    }

    pub fn n_bins(&self) -> usize {
        (self.octaves * self.bins_per_octave) as usize
    }

    pub fn bin_frequency(&self, k: usize) -> f64 {
        self.f_min() * 2f64.powf(k as f64 / self.bins_per_octave as f64)
    }

    /// Gamma-widened bandwidth of a bin centered at `freq`.
    pub fn bandwidth(&self, freq: f64) -> f64 {
        let b = self.bins_per_octave as f64;
        freq * (2f64.powf(1.0 / b) - 2f64.powf(-1.0 / b)) + self.gamma
    }

    /// Analysis window length for bin `k`, in samples (odd, at least 3).
    pub fn window_len(&self, k: usize) -> usize {
        let n = (self.sample_rate as f64 / self.bandwidth(self.bin_frequency(k))).round() as usize;
        let n = n.max(3);
        if n % 2 == 0 {
            n + 1
        } else {
            n
        }
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_s * self.sample_rate as f64).round() as usize
    }
}

struct BinKernel {
    /// window[n] * cos(2*pi*f*(n - c)/fs) / sum(window)
    re: Vec<f64>,
    /// window[n] * -sin(2*pi*f*(n - c)/fs) / sum(window)
    im: Vec<f64>,
}

/// Precomputed per-bin kernels, reusable across utterances.
pub struct CqtTransform {
    params: CqtParams,
    kernels: Vec<BinKernel>,
    max_window: usize,
}

impl CqtTransform {
    pub fn new(params: CqtParams) -> Self {
        let mut kernels = Vec::with_capacity(params.n_bins());
        let mut max_window = 0;
        for k in 0..params.n_bins() {
            let n = params.window_len(k);
            max_window = max_window.max(n);
            let freq = params.bin_frequency(k);
            let center = (n - 1) as f64 / 2.0;
            let mut window_sum = 0.0;
            let mut window = Vec::with_capacity(n);
            for i in 0..n {
                // Hann
                let w = 0.5
                    - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
                window.push(w);
                window_sum += w;
            }
            let mut re = Vec::with_capacity(n);
            let mut im = Vec::with_capacity(n);
            for (i, &w) in window.iter().enumerate() {
                let phase =
                    2.0 * std::f64::consts::PI * freq * (i as f64 - center) / params.sample_rate as f64;
                re.push(w * phase.cos() / window_sum);
                im.push(-w * phase.sin() / window_sum);
            }
            kernels.push(BinKernel { re, im });
        }
        CqtTransform {
            params,
            kernels,
            max_window,
        }
    }

    pub fn params(&self) -> &CqtParams {
        &self.params
    }

    /// Log-magnitude constant-Q spectrogram, `n_bins` rows by
    /// `ceil(len / hop)` columns.
    pub fn transform(&self, w: &Waveform) -> Result<Tfr, FeatError> {
        let len = w.samples.len();
        if len < self.max_window {
            return Err(FeatError::TooShort {
                len,
                min: self.max_window,
            });
        }
        let hop = self.params.hop_samples();
        let n_frames = len.div_ceil(hop);
        let n_bins = self.params.n_bins();
        let mut out = Tfr::new(n_bins, n_frames);
        for (k, kernel) in self.kernels.iter().enumerate() {
            let n = kernel.re.len();
            let half = n / 2;
            let row = &mut out.data[k * n_frames..(k + 1) * n_frames];
            for (t, cell) in row.iter_mut().enumerate() {
                let center = t * hop;
                // clamp the window to the signal; kernels are normalized by
                // the full window sum, so edge frames are attenuated
                let start = center.saturating_sub(half);
                let end = (center + half + 1).min(len);
                let koff = start + half - center; // kernel index of `start`
                let sig = &w.samples[start..end];
                let kre = &kernel.re[koff..koff + sig.len()];
                let kim = &kernel.im[koff..koff + sig.len()];
                let mut acc_re = 0.0;
                let mut acc_im = 0.0;
                for ((&x, &r), &i) in sig.iter().zip(kre).zip(kim) {
                    acc_re += x * r;
                    acc_im += x * i;
                }
                *cell = (acc_re.hypot(acc_im) + LOG_FLOOR).ln();
            }
        }
        Ok(out)
    }
}

/// One-shot convenience wrapper around [`CqtTransform`].
pub fn cqt(w: &Waveform, params: &CqtParams) -> Result<Tfr, FeatError> {
    CqtTransform::new(params.clone()).transform(w)
}
