//! Linear logistic-regression fusion of per-system scores.
//!
//! Fits `sigma(w . s + b)` to binary labels on development scores by
//! full-batch gradient ascent with backtracking line search, L2 ridge on the
//! weights, deterministic from zero initialization.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("trial mismatch: {0}")]
    TrialMismatch(String),
    #[error("need both classes in the fusion training labels")]
    OneClassOnly,
    #[error("bad fusion model file: {0}")]
    BadModel(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub weights: Vec<f64>,
    pub offset: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// log(sigmoid(z)) computed stably for large |z|.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(1.0 + (-z).exp()).ln()
    } else {
        z - (1.0 + z.exp()).ln()
    }
}

const RIDGE: f64 = 1e-4;
const MAX_ITERS: usize = 500;
const TOL: f64 = 1e-9;

fn objective(systems: &[Vec<f64>], labels: &[bool], w: &[f64], b: f64) -> f64 {
    let n = labels.len();
    let mut ll = 0.0;
    for i in 0..n {
        let z: f64 = w.iter().zip(systems).map(|(wk, s)| wk * s[i]).sum::<f64>() + b;
        ll += if labels[i] {
            log_sigmoid(z)
        } else {
            log_sigmoid(-z)
        };
    }
    ll - 0.5 * RIDGE * w.iter().map(|v| v * v).sum::<f64>()
}

/// Fit fusion weights on development scores. `systems[k][i]` is system k's
/// score for trial i; `labels[i]` is true for the positive class.
pub fn fit_fusion(systems: &[Vec<f64>], labels: &[bool]) -> Result<FusionModel, FusionError> {
    if systems.is_empty() {
        return Err(FusionError::TrialMismatch("no systems".into()));
    }
    let n = labels.len();
    for (k, s) in systems.iter().enumerate() {
        if s.len() != n {
            return Err(FusionError::TrialMismatch(format!(
                "system {k} has {} scores, labels have {n}",
                s.len()
            )));
        }
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(FusionError::OneClassOnly);
    }

    let k = systems.len();
    let mut w = vec![0.0; k];
    let mut b = 0.0;
    let mut obj = objective(systems, labels, &w, b);

    for _ in 0..MAX_ITERS {
        // gradient of the regularized log-likelihood
        let mut gw = vec![0.0; k];
        let mut gb = 0.0;
        for i in 0..n {
            let z: f64 = w.iter().zip(systems).map(|(wk, s)| wk * s[i]).sum::<f64>() + b;
            let resid = (if labels[i] { 1.0 } else { 0.0 }) - sigmoid(z);
            for (g, s) in gw.iter_mut().zip(systems) {
                *g += resid * s[i];
            }
            gb += resid;
        }
        for (g, wk) in gw.iter_mut().zip(&w) {
            *g -= RIDGE * wk;
        }

        let gnorm2: f64 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        if gnorm2.sqrt() < TOL {
            break;
        }

        // backtracking line search: the objective never decreases
        let mut step = 1.0 / n as f64;
        let mut improved = false;
        for _ in 0..60 {
            let wt: Vec<f64> = w.iter().zip(&gw).map(|(wk, g)| wk + step * g).collect();
            let bt = b + step * gb;
            let cand = objective(systems, labels, &wt, bt);
            if cand >= obj {
                if (cand - obj).abs() < TOL {
                    w = wt;
                    b = bt;
                    obj = cand;
                    improved = false; // converged
                    break;
                }
                w = wt;
                b = bt;
                obj = cand;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }

    Ok(FusionModel { weights: w, offset: b })
}

/// Fused score per trial: `w . s + b`.
pub fn apply_fusion(model: &FusionModel, systems: &[Vec<f64>]) -> Result<Vec<f64>, FusionError> {
    if systems.len() != model.weights.len() {
        return Err(FusionError::TrialMismatch(format!(
            "{} systems vs {} weights",
            systems.len(),
            model.weights.len()
        )));
    }
    let n = systems.first().map_or(0, |s| s.len());
    for s in systems {
        if s.len() != n {
            return Err(FusionError::TrialMismatch(
                "systems disagree on trial count".into(),
            ));
        }
    }
    let mut out = vec![model.offset; n];
    for (wk, s) in model.weights.iter().zip(systems) {
        for (o, &v) in out.iter_mut().zip(s) {
            *o += wk * v;
        }
    }
    Ok(out)
}

/// Plain-text model: one weight per line, offset last.
pub fn write_fusion_model(path: impl AsRef<Path>, model: &FusionModel) -> Result<(), FusionError> {
    let mut out = String::new();
    for w in &model.weights {
        out.push_str(&format!("{:.17e}\n", w));
    }
    out.push_str(&format!("{:.17e}\n", model.offset));
    crate::feat::atomic_write_bytes(path.as_ref(), out.as_bytes())?;
    Ok(())
}

pub fn read_fusion_model(path: impl AsRef<Path>) -> Result<FusionModel, FusionError> {
    let text = fs::read_to_string(path.as_ref())?;
    let values: Result<Vec<f64>, _> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>())
        .collect();
    let values = values.map_err(|e| FusionError::BadModel(e.to_string()))?;
    if values.is_empty() {
        return Err(FusionError::BadModel("empty model file".into()));
    }
    let (offset, weights) = values.split_last().unwrap();
    Ok(FusionModel {
        weights: weights.to_vec(),
        offset: *offset,
    })
}
