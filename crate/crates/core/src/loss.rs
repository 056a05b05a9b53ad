//! Angular-margin softmax losses for both task heads and the joint
//! regularized objective.
//!
//! The output-layer weights are column-normalized and bias-free inside the
//! loss. The target class logit is `|x| * psi(theta)` with
//! `psi(theta) = (-1)^k cos(m*theta) - 2k` on `theta in [k*pi/m, (k+1)*pi/m]`;
//! non-target logits are plain `|x| * cos(theta_j)`. An annealing blend
//! mixes `cos(theta)` into the target logit early in training.

use thiserror::Error;

use crate::net::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("zero feature vector at row {0}: angle undefined")]
    ZeroFeature(usize),
    #[error("bad margin m = {0}: must be a positive integer")]
    BadMargin(u32),
    #[error("weight column {0} has zero norm")]
    ZeroWeightColumn(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {0} has no examples")]
    EmptyClass(usize),
}

/// Loss configuration shared by both heads.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub margin_m: u32,
    pub lambda_reg: f64,
    pub sd_class_weights: Option<Vec<f64>>,
    pub asv_class_weights: Option<Vec<f64>>,
    /// Epochs over which the margin blend ramps from 0 to 1.
    pub anneal_epochs: u32,
    /// Relative weight of each task in the joint objective.
    pub sd_task_weight: f64,
    pub asv_task_weight: f64,
    /// Multiplier on all logits. 1.0 is the published objective; short
    /// desk-scale runs need a larger scale because the feature norms that
    /// would otherwise grow over long training stay small.
    pub logit_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin_m: 4,
            lambda_reg: 0.001,
            sd_class_weights: None,
            asv_class_weights: None,
            anneal_epochs: 5,
            sd_task_weight: 1.0,
            asv_task_weight: 1.0,
            logit_scale: 1.0,
        }
    }
}

impl LossConfig {
    /// Margin blend for a given epoch: 0 at epoch 0 (pure cosine) ramping
    /// linearly to 1 (full margin) after `anneal_epochs`.
    pub fn blend_at_epoch(&self, epoch: u32) -> f64 {
        if self.anneal_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.anneal_epochs as f64).min(1.0)
        }
    }
}

/// Chebyshev polynomials: T_m(c) = cos(m*theta), U_{m-1}(c) with
/// T_m'(c) = m * U_{m-1}(c).
fn chebyshev_t_u(c: f64, m: u32) -> (f64, f64) {
    let mut t_prev = 1.0; // T_0
    let mut t = c; // T_1
    let mut u_prev = 1.0; // U_0
    let mut u = 2.0 * c; // U_1
    if m == 0 {
        return (1.0, 0.0);
    }
    for _ in 1..m {
        let t_next = 2.0 * c * t - t_prev;
        t_prev = t;
        t = t_next;
        let u_next = 2.0 * c * u - u_prev;
        u_prev = u;
        u = u_next;
    }
    // here t = T_m and u_prev = U_{m-1}
    (t, u_prev)
}

/// The margin function and its derivative with respect to `cos(theta)`.
///
/// psi is continuous and C1: at the interval breakpoints both the value and
/// the derivative (which vanishes there) agree from both sides.
pub fn psi(cos_theta: f64, m: u32) -> (f64, f64) {
    let c = cos_theta.clamp(-1.0, 1.0);
    if m == 1 {
        return (c, 1.0);
    }
    let theta = c.acos();
    let k = ((theta * m as f64 / std::f64::consts::PI) as usize).min(m as usize - 1);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    let (t_m, u_m1) = chebyshev_t_u(c, m);
    (sign * t_m - 2.0 * k as f64, sign * m as f64 * u_m1)
}

pub struct ASoftmaxResult {
    pub loss: f64,
    /// d loss / d features, same shape as the feature batch.
    pub d_features: Tensor,
    /// d loss / d output weights, same layout as the [in x out] weight.
    pub d_weight: Vec<f64>,
}

/// A-softmax loss over a feature batch.
///
/// `features` is [n, d], `weight` is the output layer's [d x classes]
/// matrix (un-normalized; normalization happens here), `blend` in [0, 1]
/// ramps the margin in (1 = full margin). Class weights, when given, scale
/// each sample's loss by the weight of its label.
pub fn a_softmax(
    features: &Tensor,
    weight: &[f64],
    labels: &[usize],
    m: u32,
    blend: f64,
    class_weights: Option<&[f64]>,
) -> Result<ASoftmaxResult, LossError> {
    a_softmax_scaled(features, weight, labels, m, blend, class_weights, 1.0)
}

/// [`a_softmax`] with a logit multiplier (1.0 recovers the plain form).
#[allow(clippy::too_many_arguments)]
pub fn a_softmax_scaled(
    features: &Tensor,
    weight: &[f64],
    labels: &[usize],
    m: u32,
    blend: f64,
    class_weights: Option<&[f64]>,
    logit_scale: f64,
) -> Result<ASoftmaxResult, LossError> {
    if m < 1 {
        return Err(LossError::BadMargin(m));
    }
    let n = features.n();
    let d = features.sample_len();
    let classes = weight.len() / d;
    assert_eq!(labels.len(), n);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(LossError::LabelOutOfRange {
                label: labels[i],
                classes,
            });
        }
    }

    // column norms and normalized columns
    let mut norms = vec![0.0f64; classes];
    for row in weight.chunks(classes) {
        for (s, &v) in norms.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    for (j, s) in norms.iter_mut().enumerate() {
        *s = s.sqrt();
        if *s == 0.0 {
            return Err(LossError::ZeroWeightColumn(j));
        }
    }
    let mut w_hat = vec![0.0f64; weight.len()];
    for (orow, wrow) in w_hat.chunks_mut(classes).zip(weight.chunks(classes)) {
        for j in 0..classes {
            orow[j] = wrow[j] / norms[j];
        }
    }

    let mut total = 0.0;
    let mut d_features = Tensor::zeros(&[n, d]);
    // gradient with respect to the normalized columns; mapped back through
    // the normalization at the end
    let mut d_what = vec![0.0f64; weight.len()];

    for i in 0..n {
        let x = features.sample(i);
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r == 0.0 {
            return Err(LossError::ZeroFeature(i));
        }
        let y = labels[i];

        // cosines against every normalized column
        let mut cos = vec![0.0f64; classes];
        for (l, &xv) in x.iter().enumerate() {
            let wrow = &w_hat[l * classes..(l + 1) * classes];
            for (cv, &wv) in cos.iter_mut().zip(wrow) {
                *cv += xv * wv;
            }
        }
        for cv in cos.iter_mut() {
            *cv /= r;
        }

        let (psi_y, dpsi_y) = psi(cos[y], m);
        let phi = (1.0 - blend) * cos[y] + blend * psi_y;
        let dphi = (1.0 - blend) + blend * dpsi_y;

        let mut logits: Vec<f64> = cos.iter().map(|&c| logit_scale * r * c).collect();
        logits[y] = logit_scale * r * phi;

        // stable softmax
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let p_y = exps[y] / sum;

        let cw = class_weights.map_or(1.0, |w| w[y]);
        total += -cw * p_y.ln();

        // d loss / d logit_j = cw * (p_j - delta_jy) / n; the logit
        // multiplier chains straight through
        let gscale = logit_scale * cw / n as f64;
        let dx = d_features.sample_mut(i);
        for j in 0..classes {
            let g = gscale * (exps[j] / sum - if j == y { 1.0 } else { 0.0 });
            if g == 0.0 {
                continue;
            }
            if j == y {
                // z_y = r * phi(c_y): dz/dx = phi * x/r + dphi * (w_y - c_y x/r)
                for (l, dv) in dx.iter_mut().enumerate() {
                    let xhat = x[l] / r;
                    let wv = w_hat[l * classes + j];
                    *dv += g * (phi * xhat + dphi * (wv - cos[y] * xhat));
                }
                // dz/d w_hat_y = r * dphi * (x/r - w_y c_y) = dphi * (x - r c_y w_y)
                for l in 0..d {
                    d_what[l * classes + j] += g * dphi * (x[l] - r * cos[y] * w_hat[l * classes + j]);
                }
            } else {
                // z_j = x . w_hat_j
                for (l, dv) in dx.iter_mut().enumerate() {
                    *dv += g * w_hat[l * classes + j];
                }
                for l in 0..d {
                    d_what[l * classes + j] += g * x[l];
                }
            }
        }
    }

    // chain through column normalization:
    // d/dw = (d/dw_hat - w_hat * (w_hat . d/dw_hat)) / |w|
    let mut dots = vec![0.0f64; classes];
    for l in 0..d {
        for j in 0..classes {
            dots[j] += w_hat[l * classes + j] * d_what[l * classes + j];
        }
    }
    let mut d_weight = vec![0.0f64; weight.len()];
    for l in 0..d {
        for j in 0..classes {
            d_weight[l * classes + j] =
                (d_what[l * classes + j] - w_hat[l * classes + j] * dots[j]) / norms[j];
        }
    }

    Ok(ASoftmaxResult {
        loss: total / n as f64,
        d_features,
        d_weight,
    })
}

pub struct PlainSoftmaxResult {
    pub loss: f64,
    pub d_features: Tensor,
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
}

/// Plain softmax cross-entropy on affine logits; the ablation fallback.
pub fn plain_softmax(
    features: &Tensor,
    weight: &[f64],
    bias: &[f64],
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<PlainSoftmaxResult, LossError> {
    let n = features.n();
    let d = features.sample_len();
    let classes = bias.len();
    for &y in labels {
        if y >= classes {
            return Err(LossError::LabelOutOfRange { label: y, classes });
        }
    }
    let mut total = 0.0;
    let mut d_features = Tensor::zeros(&[n, d]);
    let mut d_weight = vec![0.0; weight.len()];
    let mut d_bias = vec![0.0; classes];
    for i in 0..n {
        let x = features.sample(i);
        let y = labels[i];
        let mut logits = bias.to_vec();
        for (l, &xv) in x.iter().enumerate() {
            let wrow = &weight[l * classes..(l + 1) * classes];
            for (z, &wv) in logits.iter_mut().zip(wrow) {
                *z += xv * wv;
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let cw = class_weights.map_or(1.0, |w| w[y]);
        total += -cw * (exps[y] / sum).ln();
        let gscale = cw / n as f64;
        let dx = d_features.sample_mut(i);
        for j in 0..classes {
            let g = gscale * (exps[j] / sum - if j == y { 1.0 } else { 0.0 });
            d_bias[j] += g;
            for l in 0..d {
                d_weight[l * classes + j] += g * x[l];
                dx[l] += g * weight[l * classes + j];
            }
        }
    }
    Ok(PlainSoftmaxResult {
        loss: total / n as f64,
        d_features,
        d_weight,
        d_bias,
    })
}

/// Eq.-style total objective: task losses plus L2 on the weight matrices.
pub fn joint_loss(sd_loss: f64, asv_loss: f64, weight_squared_norm: f64, lambda_reg: f64) -> f64 {
    sd_loss + asv_loss + 0.5 * lambda_reg * weight_squared_norm
}

/// Inverse-frequency class weights: `w_c = N / (C * n_c)`, which satisfies
/// `sum_c w_c * n_c = N`.
pub fn class_weights(label_counts: &[usize]) -> Result<Vec<f64>, LossError> {
    let total: usize = label_counts.iter().sum();
    let c = label_counts.len();
    let mut w = Vec::with_capacity(c);
    for (j, &n) in label_counts.iter().enumerate() {
        if n == 0 {
            return Err(LossError::EmptyClass(j));
        }
        w.push(total as f64 / (c as f64 * n as f64));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_reduces_to_cosine_at_m1() {
        for &c in &[-1.0, -0.5, 0.0, 0.3, 1.0] {
            let (v, dv) = psi(c, 1);
            assert_eq!(v, c);
            assert_eq!(dv, 1.0);
        }
    }

    #[test]
    fn psi_continuous_and_decreasing() {
        for m in 1..=4u32 {
            let mut prev = f64::INFINITY;
            let mut prev_theta_val: Option<(f64, f64)> = None;
            for i in 0..=10_000 {
                let theta = std::f64::consts::PI * i as f64 / 10_000.0;
                let (v, _) = psi(theta.cos(), m);
                assert!(
                    v <= prev + 1e-9,
                    "m={m}: psi not decreasing at theta={theta}: {v} > {prev}"
                );
                if let Some((pt, pv)) = prev_theta_val {
                    let gap = (v - pv).abs();
                    assert!(
                        gap < 0.01,
                        "m={m}: jump {gap} between theta {pt} and {theta}"
                    );
                }
                prev = v;
                prev_theta_val = Some((theta, v));
            }
            // endpoints: psi(0) = 1, psi(pi) = -(m-1)*2 - ... = 1 - 2m... check
            let (at_zero, _) = psi(1.0, m);
            assert!((at_zero - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_derivative_matches_finite_differences() {
        for m in 1..=4u32 {
            for i in 1..40 {
                let c = -0.98 + i as f64 * 0.049;
                let h = 1e-6;
                let (_, dv) = psi(c, m);
                let (vp, _) = psi(c + h, m);
                let (vm, _) = psi(c - h, m);
                let fd = (vp - vm) / (2.0 * h);
                assert!(
                    (dv - fd).abs() < 1e-5 * dv.abs().max(1.0),
                    "m={m} c={c}: analytic {dv} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn scalar_geometry_fixture() {
        // x = (1, 0), unit columns at angles 0 and pi/2, label 0, m = 1:
        // loss = -ln(e / (e + 1))
        let features = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]);
        let weight = vec![1.0, 0.0, 0.0, 1.0]; // [2 x 2], columns (1,0) and (0,1)
        let res = a_softmax(&features, &weight, &[0], 1, 1.0, None).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((res.loss - expect).abs() < 1e-12, "{} vs {expect}", res.loss);
        assert!((res.loss - 0.3133).abs() < 1e-4);

        // m = 2 at theta = 0 is margin-invariant
        let res2 = a_softmax(&features, &weight, &[0], 2, 1.0, None).unwrap();
        assert!((res2.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn weight_column_scaling_is_invariant() {
        let features = Tensor::from_vec(&[2, 3], vec![0.4, -1.0, 0.7, 1.2, 0.3, -0.5]);
        let weight = vec![0.3, -0.2, 0.8, 0.5, -0.1, 0.9]; // [3 x 2]
        let mut scaled = weight.clone();
        for row in scaled.chunks_mut(2) {
            row[0] *= 7.5;
            row[1] *= 0.02;
        }
        let a = a_softmax(&features, &weight, &[0, 1], 4, 1.0, None).unwrap();
        let b = a_softmax(&features, &scaled, &[0, 1], 4, 1.0, None).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn larger_margin_never_decreases_loss_inside_first_sector() {
        // theta_y in (0, pi/m): per-sample target probability decreases in m
        let features = Tensor::from_vec(&[1, 2], vec![0.97, 0.24]); // ~14 degrees
        let weight = vec![1.0, 0.0, 0.0, 1.0];
        let mut prev = 0.0;
        for m in 1..=4u32 {
            let res = a_softmax(&features, &weight, &[0], m, 1.0, None).unwrap();
            assert!(
                res.loss >= prev - 1e-12,
                "m={m}: loss {} < previous {prev}",
                res.loss
            );
            prev = res.loss;
        }
    }

    #[test]
    fn zero_feature_is_rejected() {
        let features = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        let weight = vec![1.0, 0.0, 0.0, 1.0];
        assert!(matches!(
            a_softmax(&features, &weight, &[0], 1, 1.0, None),
            Err(LossError::ZeroFeature(0))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let features = Tensor::from_vec(
            &[3, 4],
            vec![
                0.8, -0.3, 0.5, 1.1, -0.7, 0.2, 0.9, -0.4, 0.3, 0.6, -1.2, 0.1,
            ],
        );
        let weight: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4 + 0.1).collect();
        let labels = [0usize, 2, 1];
        let cw = [1.3, 0.8, 0.9];
        for &m in &[1u32, 2, 4] {
            for &blend in &[1.0, 0.6] {
                let res = a_softmax(&features, &weight, &labels, m, blend, Some(&cw)).unwrap();
                let h = 1e-6;
                // features
                for idx in 0..features.numel() {
                    let mut fp = features.clone();
                    fp.data[idx] += h;
                    let lp = a_softmax(&fp, &weight, &labels, m, blend, Some(&cw)).unwrap().loss;
                    let mut fm = features.clone();
                    fm.data[idx] -= h;
                    let lm = a_softmax(&fm, &weight, &labels, m, blend, Some(&cw)).unwrap().loss;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = res.d_features.data[idx];
                    assert!(
                        (fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-3),
                        "m={m} blend={blend} dfeat[{idx}]: analytic {an} vs fd {fd}"
                    );
                }
                // weights
                for idx in 0..weight.len() {
                    let mut wp = weight.clone();
                    wp[idx] += h;
                    let lp = a_softmax(&features, &wp, &labels, m, blend, Some(&cw)).unwrap().loss;
                    let mut wm = weight.clone();
                    wm[idx] -= h;
                    let lm = a_softmax(&features, &wm, &labels, m, blend, Some(&cw)).unwrap().loss;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = res.d_weight[idx];
                    assert!(
                        (fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-3),
                        "m={m} blend={blend} dW[{idx}]: analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn scaled_gradients_match_finite_differences() {
        let features = Tensor::from_vec(&[2, 3], vec![0.5, -0.2, 0.9, -0.4, 1.1, 0.3]);
        let weight: Vec<f64> = (0..6).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.3).collect();
        let labels = [1usize, 0];
        let s = 12.0;
        let res = a_softmax_scaled(&features, &weight, &labels, 4, 1.0, None, s).unwrap();
        let h = 1e-6;
        for idx in 0..features.numel() {
            let mut fp = features.clone();
            fp.data[idx] += h;
            let lp = a_softmax_scaled(&fp, &weight, &labels, 4, 1.0, None, s).unwrap().loss;
            let mut fm = features.clone();
            fm.data[idx] -= h;
            let lm = a_softmax_scaled(&fm, &weight, &labels, 4, 1.0, None, s).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let an = res.d_features.data[idx];
            assert!(
                (fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-3),
                "dfeat[{idx}]: {an} vs {fd}"
            );
        }
        for idx in 0..weight.len() {
            let mut wp = weight.clone();
            wp[idx] += h;
            let lp = a_softmax_scaled(&features, &wp, &labels, 4, 1.0, None, s).unwrap().loss;
            let mut wm = weight.clone();
            wm[idx] -= h;
            let lm = a_softmax_scaled(&features, &wm, &labels, 4, 1.0, None, s).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let an = res.d_weight[idx];
            assert!(
                (fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-3),
                "dW[{idx}]: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn joint_loss_arithmetic() {
        assert_eq!(joint_loss(1.0, 2.0, 100.0, 0.0), 3.0);
        assert_eq!(joint_loss(1.0, 2.0, 0.0, 0.001), 3.0);
        let j = joint_loss(1.0, 2.0, 4.0, 0.001);
        assert!((j - 3.002).abs() < 1e-15, "{j}");
    }

    #[test]
    fn class_weight_formula() {
        let w = class_weights(&[50, 50]).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);

        let w = class_weights(&[10, 90]).unwrap();
        assert!((w[0] - 5.0).abs() < 1e-12);
        assert!((w[1] - 0.5555555555555556).abs() < 1e-12);
        // normalization: sum w_c * n_c = N
        assert!((w[0] * 10.0 + w[1] * 90.0 - 100.0).abs() < 1e-9);

        let w = class_weights(&[1, 1, 1, 97]).unwrap();
        let argmin = w
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmin, 3);

        assert!(matches!(class_weights(&[3, 0]), Err(LossError::EmptyClass(1))));
    }

    #[test]
    fn uniform_class_weights_equal_unweighted() {
        let features = Tensor::from_vec(&[2, 2], vec![0.5, 1.0, -0.8, 0.4]);
        let weight = vec![0.7, -0.3, 0.2, 0.9];
        let unweighted = a_softmax(&features, &weight, &[0, 1], 4, 1.0, None).unwrap();
        let uniform = [1.0, 1.0];
        let weighted = a_softmax(&features, &weight, &[0, 1], 4, 1.0, Some(&uniform)).unwrap();
        assert_eq!(unweighted.loss, weighted.loss);
    }
}
