//! Layer primitives with hand-written gradient passes.
//!
//! Each forward returns whatever cache its backward needs. Convolutions use
//! "same" padding with the extra row/column on the bottom/right, so stride-2
//! layers map `d -> ceil(d/2)` exactly.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvSpec {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    fn pad_before(&self, in_dim: usize, kernel: usize) -> usize {
        let out = in_dim.div_ceil(self.stride);
        let total = ((out - 1) * self.stride + kernel).saturating_sub(in_dim);
        total / 2
    }

    pub fn weight_len(&self) -> usize {
        self.kh * self.kw * self.in_ch * self.out_ch
    }
}

/// Gather 3x3 (or 1x1) patches of one sample into rows of `cols`:
/// row (oh, ow) holds the receptive field in (kh, kw, c) order.
fn im2col(x: &[f64], h: usize, w: usize, spec: &ConvSpec, cols: &mut [f64]) {
    let c = spec.in_ch;
    let (oh, ow) = spec.out_dims(h, w);
    let patch = spec.kh * spec.kw * c;
    let pad_top = spec.pad_before(h, spec.kh);
    let pad_left = spec.pad_before(w, spec.kw);
    debug_assert_eq!(cols.len(), oh * ow * patch);
    cols.fill(0.0);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            for ky in 0..spec.kh {
                let iy = (oy * spec.stride + ky) as isize - pad_top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..spec.kw {
                    let ix = (ox * spec.stride + kx) as isize - pad_left as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * w + ix as usize) * c;
                    let dst = (ky * spec.kw + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
}

/// Scatter-add patch-space gradients back to input space.
fn col2im(cols: &[f64], h: usize, w: usize, spec: &ConvSpec, dx: &mut [f64]) {
    let c = spec.in_ch;
    let (oh, ow) = spec.out_dims(h, w);
    let patch = spec.kh * spec.kw * c;
    let pad_top = spec.pad_before(h, spec.kh);
    let pad_left = spec.pad_before(w, spec.kw);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            for ky in 0..spec.kh {
                let iy = (oy * spec.stride + ky) as isize - pad_top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..spec.kw {
                    let ix = (ox * spec.stride + kx) as isize - pad_left as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * w + ix as usize) * c;
                    let src = (ky * spec.kw + kx) * c;
                    for j in 0..c {
                        dx[dst + j] += row[src + j];
                    }
                }
            }
        }
    }
}

/// Convolution forward. `x` is [n, h, w, in_ch], `weight` is flattened
/// [kh*kw*in_ch, out_ch], output is [n, oh, ow, out_ch].
pub fn conv2d_forward(x: &Tensor, weight: &[f64], bias: &[f64], spec: &ConvSpec) -> Tensor {
    let (n, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    debug_assert_eq!(x.shape[3], spec.in_ch);
    let (oh, ow) = spec.out_dims(h, w);
    let mut out = Tensor::zeros(&[n, oh, ow, spec.out_ch]);
    let patch = spec.kh * spec.kw * spec.in_ch;
    let in_len = x.sample_len();
    let out_len = out.sample_len();
    out.data
        .par_chunks_mut(out_len)
        .zip(x.data.par_chunks(in_len))
        .for_each(|(out_s, in_s)| {
            let mut cols = vec![0.0; oh * ow * patch];
            im2col(in_s, h, w, spec, &mut cols);
            for orow in out_s.chunks_mut(spec.out_ch) {
                orow.copy_from_slice(bias);
            }
            gemm_nn(out_s, &cols, weight, oh * ow, patch, spec.out_ch);
        });
    out
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

/// Convolution backward from upstream gradient `dout` [n, oh, ow, out_ch].
pub fn conv2d_backward(x: &Tensor, dout: &Tensor, weight: &[f64], spec: &ConvSpec) -> ConvGrads {
    let (h, w) = (x.shape[1], x.shape[2]);
    let (oh, ow) = spec.out_dims(h, w);
    let patch = spec.kh * spec.kw * spec.in_ch;
    let in_len = x.sample_len();
    let out_len = dout.sample_len();

    let mut dx = Tensor::zeros(&x.shape);

    // per-sample partials, reduced afterwards in sample order
    let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
        .data
        .par_chunks_mut(in_len)
        .zip(x.data.par_chunks(in_len))
        .zip(dout.data.par_chunks(out_len))
        .map(|((dx_s, x_s), dout_s)| {
            let mut cols = vec![0.0; oh * ow * patch];
            im2col(x_s, h, w, spec, &mut cols);
            let mut dw = vec![0.0; patch * spec.out_ch];
            gemm_tn(&mut dw, &cols, dout_s, oh * ow, patch, spec.out_ch);

            let mut db = vec![0.0; spec.out_ch];
            for orow in dout_s.chunks(spec.out_ch) {
                for (d, &v) in db.iter_mut().zip(orow) {
                    *d += v;
                }
            }

            // reuse the patch buffer for gradient columns
            cols.fill(0.0);
            gemm_nt(&mut cols, dout_s, weight, oh * ow, spec.out_ch, patch);
            col2im(&cols, h, w, spec, dx_s);
            (dw, db)
        })
        .collect();

    let mut dw = vec![0.0; patch * spec.out_ch];
    let mut db = vec![0.0; spec.out_ch];
    for (pdw, pdb) in partials {
        for (a, b) in dw.iter_mut().zip(&pdw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(&pdb) {
            *a += b;
        }
    }
    ConvGrads { dx, dw, db }
}

/// Max-Feature-Map across channel halves: [.., 2k] -> [.., k], recording
/// which half won. Ties go to the first half.
pub fn mfm_forward(x: &Tensor) -> (Tensor, Vec<u8>) {
    let ch = *x.shape.last().unwrap();
    assert!(ch % 2 == 0, "MFM needs an even channel count, got {ch}");
    let k = ch / 2;
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = k;
    let mut out = Tensor::zeros(&shape);
    let mut switches = vec![0u8; out.numel()];
    for (pos, xrow) in x.data.chunks(ch).enumerate() {
        let (a, b) = xrow.split_at(k);
        let orow = &mut out.data[pos * k..(pos + 1) * k];
        let srow = &mut switches[pos * k..(pos + 1) * k];
        for j in 0..k {
            if a[j] >= b[j] {
                orow[j] = a[j];
                srow[j] = 0;
            } else {
                orow[j] = b[j];
                srow[j] = 1;
            }
        }
    }
    (out, switches)
}

pub fn mfm_backward(dout: &Tensor, switches: &[u8], in_channels: usize) -> Tensor {
    let k = in_channels / 2;
    debug_assert_eq!(*dout.shape.last().unwrap(), k);
    let mut shape = dout.shape.clone();
    *shape.last_mut().unwrap() = in_channels;
    let mut dx = Tensor::zeros(&shape);
    for (pos, drow) in dout.data.chunks(k).enumerate() {
        let srow = &switches[pos * k..(pos + 1) * k];
        let xrow = &mut dx.data[pos * in_channels..(pos + 1) * in_channels];
        for j in 0..k {
            if srow[j] == 0 {
                xrow[j] = drow[j];
            } else {
                xrow[k + j] = drow[j];
            }
        }
    }
    dx
}

pub struct BnCache {
    /// normalized activations (x - mean) * invstd
    pub xhat: Tensor,
    pub invstd: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Train-mode batch norm over (n, h, w) per channel. Returns the output,
/// the cache, and the running statistics updated by the momentum rule
/// (`r <- momentum * r + (1 - momentum) * batch`), which the caller applies.
pub fn batchnorm_forward_train(
    x: &Tensor,
    scale: &[f64],
    shift: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    momentum: f64,
    epsilon: f64,
) -> (Tensor, BnCache, Vec<f64>, Vec<f64>) {
    let c = *x.shape.last().unwrap();
    let count = x.numel() / c;
    let mut mean = vec![0.0; c];
    for row in x.data.chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; c];
    for row in x.data.chunks(c) {
        for (j, (vv, &v)) in var.iter_mut().zip(row).enumerate() {
            let d = v - mean[j];
            *vv += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= count as f64;
    }
    let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();

    let mut xhat = Tensor::zeros(&x.shape);
    let mut out = Tensor::zeros(&x.shape);
    for ((xrow, hrow), orow) in x
        .data
        .chunks(c)
        .zip(xhat.data.chunks_mut(c))
        .zip(out.data.chunks_mut(c))
    {
        for j in 0..c {
            let h = (xrow[j] - mean[j]) * invstd[j];
            hrow[j] = h;
            orow[j] = h * scale[j] + shift[j];
        }
    }

    let new_mean: Vec<f64> = running_mean
        .iter()
        .zip(&mean)
        .map(|(&r, &b)| momentum * r + (1.0 - momentum) * b)
        .collect();
    let new_var: Vec<f64> = running_var
        .iter()
        .zip(&var)
        .map(|(&r, &b)| momentum * r + (1.0 - momentum) * b)
        .collect();

    (
        out,
        BnCache {
            xhat,
            invstd,
            batch_mean: mean,
            batch_var: var,
        },
        new_mean,
        new_var,
    )
}

pub fn batchnorm_forward_eval(
    x: &Tensor,
    scale: &[f64],
    shift: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    epsilon: f64,
) -> Tensor {
    let c = *x.shape.last().unwrap();
    let invstd: Vec<f64> = running_var
        .iter()
        .map(|&v| 1.0 / (v + epsilon).sqrt())
        .collect();
    let mut out = Tensor::zeros(&x.shape);
    for (xrow, orow) in x.data.chunks(c).zip(out.data.chunks_mut(c)) {
        for j in 0..c {
            orow[j] = (xrow[j] - running_mean[j]) * invstd[j] * scale[j] + shift[j];
        }
    }
    out
}

pub struct BnGrads {
    pub dx: Tensor,
    pub dscale: Vec<f64>,
    pub dshift: Vec<f64>,
}

/// Train-mode batch norm backward, accounting for the batch statistics'
/// dependence on the input.
pub fn batchnorm_backward(dout: &Tensor, cache: &BnCache, scale: &[f64]) -> BnGrads {
    let c = *dout.shape.last().unwrap();
    let count = dout.numel() / c;
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for (drow, hrow) in dout.data.chunks(c).zip(cache.xhat.data.chunks(c)) {
        for j in 0..c {
            dscale[j] += drow[j] * hrow[j];
            dshift[j] += drow[j];
        }
    }

    // dx = invstd/N * scale * (N*dout - sum(dout) - xhat * sum(dout*xhat))
    let mut dx = Tensor::zeros(&dout.shape);
    let nf = count as f64;
    for ((drow, hrow), xrow) in dout
        .data
        .chunks(c)
        .zip(cache.xhat.data.chunks(c))
        .zip(dx.data.chunks_mut(c))
    {
        for j in 0..c {
            xrow[j] = scale[j] * cache.invstd[j] / nf
                * (nf * drow[j] - dshift[j] - hrow[j] * dscale[j]);
        }
    }
    BnGrads { dx, dscale, dshift }
}

pub fn leaky_relu_forward(x: &Tensor, slope: f64) -> (Tensor, Vec<u8>) {
    let mut out = Tensor::zeros(&x.shape);
    let mut mask = vec![0u8; x.numel()];
    for ((o, &v), m) in out.data.iter_mut().zip(&x.data).zip(mask.iter_mut()) {
        if v > 0.0 {
            *o = v;
            *m = 1;
        } else {
            *o = slope * v;
        }
    }
    (out, mask)
}

pub fn leaky_relu_backward(dout: &Tensor, mask: &[u8], slope: f64) -> Tensor {
    let mut dx = Tensor::zeros(&dout.shape);
    for ((d, &g), &m) in dx.data.iter_mut().zip(&dout.data).zip(mask) {
        *d = if m == 1 { g } else { slope * g };
    }
    dx
}

pub struct DropoutCache {
    pub mask: Vec<u8>,
    pub keep: f64,
}

/// Inverted dropout: kept activations are scaled by 1/keep so eval forward
/// needs no rescaling.
pub fn dropout_forward(x: &Tensor, rate: f64, rng: &mut ChaCha20Rng) -> (Tensor, DropoutCache) {
    let keep = 1.0 - rate;
    let mut out = Tensor::zeros(&x.shape);
    let mut mask = vec![0u8; x.numel()];
    for ((o, &v), m) in out.data.iter_mut().zip(&x.data).zip(mask.iter_mut()) {
        if rng.gen::<f64>() < keep {
            *m = 1;
            *o = v / keep;
        }
    }
    (out, DropoutCache { mask, keep })
}

pub fn dropout_backward(dout: &Tensor, cache: &DropoutCache) -> Tensor {
    let mut dx = Tensor::zeros(&dout.shape);
    for ((d, &g), &m) in dx.data.iter_mut().zip(&dout.data).zip(&cache.mask) {
        if m == 1 {
            *d = g / cache.keep;
        }
    }
    dx
}

/// Dense layer: y = x W + b with x [n, in], W [in, out].
pub fn fc_forward(x: &Tensor, weight: &[f64], bias: &[f64], out_dim: usize) -> Tensor {
    let n = x.shape[0];
    let in_dim = x.sample_len();
    debug_assert_eq!(weight.len(), in_dim * out_dim);
    let mut out = Tensor::zeros(&[n, out_dim]);
    for orow in out.data.chunks_mut(out_dim) {
        orow.copy_from_slice(bias);
    }
    gemm_nn(&mut out.data, &x.data, weight, n, in_dim, out_dim);
    out
}

pub struct FcGrads {
    pub dx: Tensor,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub fn fc_backward(x: &Tensor, dout: &Tensor, weight: &[f64]) -> FcGrads {
    let n = x.shape[0];
    let in_dim = x.sample_len();
    let out_dim = dout.sample_len();
    let mut dw = vec![0.0; in_dim * out_dim];
    gemm_tn(&mut dw, &x.data, &dout.data, n, in_dim, out_dim);
    let mut db = vec![0.0; out_dim];
    for drow in dout.data.chunks(out_dim) {
        for (d, &v) in db.iter_mut().zip(drow) {
            *d += v;
        }
    }
    let mut dx = Tensor::zeros(&[n, in_dim]);
    gemm_nt(&mut dx.data, &dout.data, weight, n, out_dim, in_dim);
    FcGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct nested-loop convolution, independent of the im2col path.
    fn naive_conv(x: &Tensor, weight: &[f64], bias: &[f64], spec: &ConvSpec) -> Tensor {
        let (n, h, w, cin) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (oh, ow) = spec.out_dims(h, w);
        let pad_top = spec.pad_before(h, spec.kh);
        let pad_left = spec.pad_before(w, spec.kw);
        let mut out = Tensor::zeros(&[n, oh, ow, spec.out_ch]);
        for s in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..spec.out_ch {
                        let mut acc = bias[oc];
                        for ky in 0..spec.kh {
                            for kx in 0..spec.kw {
                                let iy = (oy * spec.stride + ky) as isize - pad_top as isize;
                                let ix = (ox * spec.stride + kx) as isize - pad_left as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                for ic in 0..cin {
                                    let xv = x.data[((s * h + iy as usize) * w + ix as usize)
                                        * cin
                                        + ic];
                                    let wv = weight
                                        [((ky * spec.kw + kx) * cin + ic) * spec.out_ch + oc];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data[((s * oh + oy) * ow + ox) * spec.out_ch + oc] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(len: usize, seed: u64) -> Vec<f64> {
        (0..len)
            .map(|i| {
                let v = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed);
                ((v >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_oracle() {
        for &(stride, kh) in &[(1usize, 3usize), (2, 3), (1, 1)] {
            let spec = ConvSpec {
                kh,
                kw: kh,
                stride,
                in_ch: 3,
                out_ch: 4,
            };
            let x = Tensor::from_vec(&[2, 8, 8, 3], pseudo(2 * 8 * 8 * 3, 1));
            let weight = pseudo(spec.weight_len(), 2);
            let bias = pseudo(4, 3);
            let fast = conv2d_forward(&x, &weight, &bias, &spec);
            let slow = naive_conv(&x, &weight, &bias, &spec);
            assert_eq!(fast.shape, slow.shape);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "stride {stride} k {kh}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_stride2_halves_dims() {
        let spec = ConvSpec {
            kh: 3,
            kw: 3,
            stride: 2,
            in_ch: 1,
            out_ch: 2,
        };
        assert_eq!(spec.out_dims(864, 400), (432, 200));
        assert_eq!(spec.out_dims(432, 200), (216, 100));
        assert_eq!(spec.out_dims(216, 100), (108, 50));
        assert_eq!(spec.out_dims(80, 400), (40, 200));
        assert_eq!(spec.out_dims(15, 15), (8, 8));
    }

    #[test]
    fn mfm_matches_elementwise_oracle() {
        let x = Tensor::from_vec(&[1, 2, 2, 4], pseudo(16, 9));
        let (y, switches) = mfm_forward(&x);
        assert_eq!(y.shape, vec![1, 2, 2, 2]);
        for pos in 0..4 {
            for j in 0..2 {
                let a = x.data[pos * 4 + j];
                let b = x.data[pos * 4 + 2 + j];
                assert_eq!(y.data[pos * 2 + j], a.max(b));
            }
        }
        // gradient routes to the winner only
        let dout = Tensor::from_vec(&[1, 2, 2, 2], pseudo(8, 10));
        let dx = mfm_backward(&dout, &switches, 4);
        for pos in 0..4 {
            for j in 0..2 {
                let a = x.data[pos * 4 + j];
                let b = x.data[pos * 4 + 2 + j];
                let g = dout.data[pos * 2 + j];
                if a >= b {
                    assert_eq!(dx.data[pos * 4 + j], g);
                    assert_eq!(dx.data[pos * 4 + 2 + j], 0.0);
                } else {
                    assert_eq!(dx.data[pos * 4 + j], 0.0);
                    assert_eq!(dx.data[pos * 4 + 2 + j], g);
                }
            }
        }
    }

    #[test]
    fn mfm_identical_halves_pick_first() {
        let x = Tensor::from_vec(&[1, 1, 1, 4], vec![1.0, 2.0, 1.0, 2.0]);
        let (y, switches) = mfm_forward(&x);
        assert_eq!(y.data, vec![1.0, 2.0]);
        assert_eq!(switches, vec![0, 0]);
    }

    #[test]
    fn bn_train_normalizes_batch() {
        let x = Tensor::from_vec(&[4, 1, 1, 2], pseudo(8, 20));
        let scale = vec![1.0, 1.0];
        let shift = vec![0.0, 0.0];
        let (y, cache, new_mean, new_var) =
            batchnorm_forward_train(&x, &scale, &shift, &[0.0, 0.0], &[1.0, 1.0], 0.99, 1e-5);
        for j in 0..2 {
            let mean: f64 = (0..4).map(|i| y.data[i * 2 + j]).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
        assert_eq!(cache.batch_mean.len(), 2);
        // momentum rule
        assert!((new_mean[0] - 0.01 * cache.batch_mean[0]).abs() < 1e-15);
        assert!((new_var[0] - (0.99 + 0.01 * cache.batch_var[0])).abs() < 1e-15);
    }

    #[test]
    fn dropout_scales_and_masks() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x = Tensor::from_vec(&[1, 1000], vec![1.0; 1000]);
        let (y, cache) = dropout_forward(&x, 0.7, &mut rng);
        let kept = cache.mask.iter().filter(|&&m| m == 1).count();
        assert!(kept > 200 && kept < 400, "kept {kept} of 1000 at rate 0.7");
        for (i, &v) in y.data.iter().enumerate() {
            if cache.mask[i] == 1 {
                assert!((v - 1.0 / 0.3).abs() < 1e-12);
            } else {
                assert_eq!(v, 0.0);
            }
        }
        // same seed replays the same mask
        let mut rng2 = ChaCha20Rng::seed_from_u64(7);
        let (y2, _) = dropout_forward(&x, 0.7, &mut rng2);
        assert_eq!(y.data, y2.data);
    }

    #[test]
    fn fc_matches_manual() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 0.5, -1.0, 2.0]);
        let w = vec![1.0, 0.0, 0.0, 1.0, 1.0, -1.0]; // [3, 2]
        let b = vec![0.25, -0.5];
        let y = fc_forward(&x, &w, &b, 2);
        // row 0: [1*1+2*0+3*1, 1*0+2*1+3*(-1)] + b = [4.25, -1.5]
        assert_eq!(y.data[0], 4.25);
        assert_eq!(y.data[1], -1.5);
    }
}
