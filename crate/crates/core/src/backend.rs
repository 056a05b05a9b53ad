//! Speaker-verification back-end: embedding extraction, centering and length
//! normalization, two-covariance PLDA trained by EM, and adaptive s-norm.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::blob::{append_blobs, quantize_f32, read_blobs, Blob};
use crate::feat::UnifiedFeature;
use crate::net::model::{ForwardMode, MtlNetwork};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("zero vector: embedding equals the centering mean")]
    ZeroVector,
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cohort too small: {size} embeddings for top_k {top_k}")]
    CohortTooSmall { size: usize, top_k: usize },
    #[error("zero variance in cohort scores")]
    ZeroVariance,
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Fixed-size speaker embedding with provenance.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub utterance_id: String,
    pub speaker_id: Option<String>,
}

/// Eval-mode forward returning the speaker head's last hidden activation.
pub fn extract_embedding(feat: &UnifiedFeature, net: &MtlNetwork, utterance_id: &str) -> Embedding {
    let out = net.forward(feat, ForwardMode::Eval);
    Embedding {
        vector: out.embeddings.sample(0).to_vec(),
        utterance_id: utterance_id.to_string(),
        speaker_id: None,
    }
}

/// Center against the training mean and scale to unit Euclidean norm.
pub fn center_lnorm(vector: &[f64], mean: &[f64]) -> Result<Vec<f64>, BackendError> {
    if vector.len() != mean.len() {
        return Err(BackendError::DimensionMismatch(vector.len(), mean.len()));
    }
    let centered: Vec<f64> = vector.iter().zip(mean).map(|(&v, &m)| v - m).collect();
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(BackendError::ZeroVector);
    }
    Ok(centered.iter().map(|v| v / norm).collect())
}

/// Mean of a set of vectors.
pub fn mean_vector(vectors: &[Vec<f64>]) -> Vec<f64> {
    assert!(!vectors.is_empty());
    let d = vectors[0].len();
    let mut mu = vec![0.0; d];
    for v in vectors {
        for (m, &x) in mu.iter_mut().zip(v) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= vectors.len() as f64);
    mu
}

/// Multi-session enrollment: average the length-normalized embeddings and
/// re-normalize.
pub fn pool_enrollment(vectors: &[Vec<f64>]) -> Result<Vec<f64>, BackendError> {
    let mu = mean_vector(vectors);
    let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(BackendError::ZeroVector);
    }
    Ok(mu.iter().map(|v| v / norm).collect())
}

/// Two-covariance PLDA: class means drawn from `N(mu, Sb)`, observations
/// from `N(class mean, Sw)`.
#[derive(Debug, Clone)]
pub struct PldaModel {
    pub mu: DVector<f64>,
    pub sb: DMatrix<f64>,
    pub sw: DMatrix<f64>,
}

pub struct PldaTrainReport {
    /// Marginal log-likelihood after each EM iteration.
    pub log_likelihoods: Vec<f64>,
    /// Within-class scatter collapsed to the ridge floor.
    pub degenerate: bool,
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn chol_or_ridge(m: &DMatrix<f64>) -> (Cholesky<f64, Dyn>, bool) {
    if let Some(c) = Cholesky::new(m.clone()) {
        return (c, false);
    }
    let d = m.nrows();
    let mut ridge = (m.trace().abs() / d as f64).max(1e-12) * 1e-8;
    loop {
        let repaired = m + DMatrix::identity(d, d) * ridge;
        if let Some(c) = Cholesky::new(repaired) {
            return (c, true);
        }
        ridge *= 10.0;
    }
}

/// Marginal log-likelihood of the labeled data under the model, integrating
/// the latent class means in closed form.
fn plda_log_likelihood(
    classes: &[Vec<DVector<f64>>],
    mu: &DVector<f64>,
    sb: &DMatrix<f64>,
    sw: &DMatrix<f64>,
) -> f64 {
    let d = mu.len();
    let (chol_b, _) = chol_or_ridge(sb);
    let (chol_w, _) = chol_or_ridge(sw);
    let sb_inv = chol_b.inverse();
    let sw_inv = chol_w.inverse();
    let logdet_b = 2.0 * chol_b.l().diagonal().map(f64::ln).sum();
    let logdet_w = 2.0 * chol_w.l().diagonal().map(f64::ln).sum();
    let two_pi = 2.0 * std::f64::consts::PI;

    let mut ll = 0.0;
    let mu_quad = mu.dot(&(&sb_inv * mu));
    for samples in classes {
        let n = samples.len() as f64;
        // A = Sb^-1 + n Sw^-1, b = Sb^-1 mu + Sw^-1 sum(x)
        let a = &sb_inv + &sw_inv * n;
        let (chol_a, _) = chol_or_ridge(&sym(&a));
        let logdet_a = 2.0 * chol_a.l().diagonal().map(f64::ln).sum();
        let mut sum_x = DVector::zeros(d);
        let mut x_quad = 0.0;
        for x in samples {
            sum_x += x;
            let z = chol_w.l().solve_lower_triangular(x).unwrap();
            x_quad += z.dot(&z);
        }
        let b = &sb_inv * mu + &sw_inv * &sum_x;
        let a_inv_b = chol_a.solve(&b);
        ll += -0.5
            * (n * d as f64 * two_pi.ln() + logdet_b + n * logdet_w + logdet_a - b.dot(&a_inv_b)
                + mu_quad
                + x_quad);
    }
    ll
}

/// EM for the two-covariance model. The global mean is fixed at the data
/// mean; Sb and Sw are re-estimated from class posteriors each iteration,
/// with a relative ridge on Sw. Returns the model (values on the f32 grid)
/// and the per-iteration log-likelihoods.
pub fn plda_train(
    embeddings: &[(usize, Vec<f64>)],
    n_iters: usize,
) -> Result<(PldaModel, PldaTrainReport), BackendError> {
    if embeddings.is_empty() {
        return Err(BackendError::DegenerateData("no embeddings".into()));
    }
    let d = embeddings[0].1.len();
    let mut by_class: HashMap<usize, Vec<DVector<f64>>> = HashMap::new();
    for (c, v) in embeddings {
        if v.len() != d {
            return Err(BackendError::DimensionMismatch(v.len(), d));
        }
        by_class
            .entry(*c)
            .or_default()
            .push(DVector::from_column_slice(v));
    }
    if by_class.len() < 2 {
        return Err(BackendError::DegenerateData(
            "need at least two classes".into(),
        ));
    }
    let mut class_ids: Vec<usize> = by_class.keys().cloned().collect();
    class_ids.sort();
    let classes: Vec<Vec<DVector<f64>>> = class_ids
        .iter()
        .map(|c| by_class.remove(c).unwrap())
        .collect();
    let n_total: usize = classes.iter().map(|c| c.len()).sum();

    // global mean
    let mut mu = DVector::zeros(d);
    for samples in &classes {
        for x in samples {
            mu += x;
        }
    }
    mu /= n_total as f64;

    // moment initialization
    let mut sb = DMatrix::zeros(d, d);
    let mut sw = DMatrix::zeros(d, d);
    for samples in &classes {
        let mut m = DVector::zeros(d);
        for x in samples {
            m += x;
        }
        m /= samples.len() as f64;
        let dm = &m - &mu;
        sb += &dm * dm.transpose();
        for x in samples {
            let dx = x - &m;
            sw += &dx * dx.transpose();
        }
    }
    sb /= classes.len() as f64;
    sw /= n_total as f64;

    let mut degenerate = false;
    let ridge_of = |s: &DMatrix<f64>| (s.trace() / d as f64).max(0.0) * 1e-6 + 1e-12;
    let sw_floor = ridge_of(&sb).max(1e-10);
    if sw.trace() / d as f64 <= 1e-12 {
        // no within-class scatter anywhere (single sample per class)
        sw = DMatrix::identity(d, d) * sw_floor;
        degenerate = true;
    } else {
        let r = ridge_of(&sw);
        sw += DMatrix::identity(d, d) * r;
    }
    if sb.trace() / d as f64 <= 1e-12 {
        sb = DMatrix::identity(d, d) * sw_floor;
        degenerate = true;
    }

    let mut log_likelihoods = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let (chol_b, ridged_b) = chol_or_ridge(&sym(&sb));
        let (chol_w, ridged_w) = chol_or_ridge(&sym(&sw));
        if ridged_b || ridged_w {
            degenerate = true;
        }
        let sb_inv = chol_b.inverse();
        let sw_inv = chol_w.inverse();
        let sb_inv_mu = &sb_inv * &mu;

        let mut sb_new = DMatrix::zeros(d, d);
        let mut sw_new = DMatrix::zeros(d, d);
        for samples in &classes {
            let n = samples.len() as f64;
            let a = &sb_inv + &sw_inv * n;
            let (chol_a, _) = chol_or_ridge(&sym(&a));
            let p = chol_a.inverse(); // posterior covariance
            let mut sum_x = DVector::zeros(d);
            for x in samples {
                sum_x += x;
            }
            let m_post = &p * (&sb_inv_mu + &sw_inv * &sum_x);
            let dm = &m_post - &mu;
            sb_new += &p + &dm * dm.transpose();
            sw_new += &p * n;
            for x in samples {
                let dx = x - &m_post;
                sw_new += &dx * dx.transpose();
            }
        }
        sb = sym(&(sb_new / classes.len() as f64));
        sw = sym(&(sw_new / n_total as f64));
        sw += DMatrix::identity(d, d) * ridge_of(&sw);

        log_likelihoods.push(plda_log_likelihood(&classes, &mu, &sb, &sw));
    }

    // keep the stored model on the f32 grid so the file round-trips exactly
    let mut model = PldaModel { mu, sb, sw };
    quantize_f32(model.mu.as_mut_slice());
    quantize_f32(model.sb.as_mut_slice());
    quantize_f32(model.sw.as_mut_slice());

    Ok((
        model,
        PldaTrainReport {
            log_likelihoods,
            degenerate,
        },
    ))
}

impl PldaModel {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Domain adaptation by re-centering the global mean; covariances kept.
    pub fn recenter(&mut self, new_mu: &[f64]) {
        assert_eq!(new_mu.len(), self.dim());
        self.mu = DVector::from_column_slice(new_mu);
        quantize_f32(self.mu.as_mut_slice());
    }

    pub fn scorer(&self) -> Result<PldaScorer, BackendError> {
        PldaScorer::new(self)
    }
}

/// Precomputed factorizations for fast log-likelihood-ratio scoring.
pub struct PldaScorer {
    mu: DVector<f64>,
    chol_tot: Cholesky<f64, Dyn>,
    chol_joint: Cholesky<f64, Dyn>,
    logdet_tot: f64,
    logdet_joint: f64,
    dim: usize,
}

impl PldaScorer {
    fn new(model: &PldaModel) -> Result<Self, BackendError> {
        let d = model.dim();
        let tot = sym(&(&model.sb + &model.sw));
        let mut joint = DMatrix::zeros(2 * d, 2 * d);
        joint.view_mut((0, 0), (d, d)).copy_from(&tot);
        joint.view_mut((d, d), (d, d)).copy_from(&tot);
        joint.view_mut((0, d), (d, d)).copy_from(&model.sb);
        joint.view_mut((d, 0), (d, d)).copy_from(&model.sb);
        // f32-grid quantization can nudge near-singular covariances across
        // zero, so both factorizations tolerate a relative ridge
        let (chol_tot, _) = chol_or_ridge(&tot);
        let (chol_joint, _) = chol_or_ridge(&joint);
        let logdet_tot = 2.0 * chol_tot.l().diagonal().map(f64::ln).sum();
        let logdet_joint = 2.0 * chol_joint.l().diagonal().map(f64::ln).sum();
        Ok(PldaScorer {
            mu: model.mu.clone(),
            chol_tot,
            chol_joint,
            logdet_tot,
            logdet_joint,
            dim: d,
        })
    }

    /// log p(enroll, test | same class) - log p(enroll, test | different).
    pub fn score(&self, enroll: &[f64], test: &[f64]) -> Result<f64, BackendError> {
        if enroll.len() != self.dim || test.len() != self.dim {
            return Err(BackendError::DimensionMismatch(enroll.len(), self.dim));
        }
        let e = DVector::from_column_slice(enroll) - &self.mu;
        let t = DVector::from_column_slice(test) - &self.mu;
        let ze = self.chol_tot.l().solve_lower_triangular(&e).unwrap();
        let zt = self.chol_tot.l().solve_lower_triangular(&t).unwrap();
        let mut joint = DVector::zeros(2 * self.dim);
        joint.rows_mut(0, self.dim).copy_from(&e);
        joint.rows_mut(self.dim, self.dim).copy_from(&t);
        let zj = self.chol_joint.l().solve_lower_triangular(&joint).unwrap();
        // the 2*pi terms cancel between numerator and denominator
        Ok(0.5 * (ze.dot(&ze) + zt.dot(&zt) - zj.dot(&zj)) + 0.5 * (2.0 * self.logdet_tot - self.logdet_joint))
    }
}

/// One-shot LLR; build a [`PldaScorer`] for trial lists.
pub fn plda_score(enroll: &[f64], test: &[f64], model: &PldaModel) -> Result<f64, BackendError> {
    model.scorer()?.score(enroll, test)
}

/// Score-normalization cohort.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub embeddings: Vec<Vec<f64>>,
    pub top_k: usize,
}

impl Cohort {
    pub fn new(embeddings: Vec<Vec<f64>>, top_k: usize) -> Result<Self, BackendError> {
        if embeddings.len() < top_k || top_k < 2 {
            return Err(BackendError::CohortTooSmall {
                size: embeddings.len(),
                top_k,
            });
        }
        Ok(Cohort { embeddings, top_k })
    }
}

/// Mean and population standard deviation of the `top_k` highest scores.
pub fn top_k_stats(scores: &[f64], top_k: usize) -> Result<(f64, f64), BackendError> {
    if scores.len() < top_k || top_k < 2 {
        return Err(BackendError::CohortTooSmall {
            size: scores.len(),
            top_k,
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let top = &sorted[..top_k];
    let mean = top.iter().sum::<f64>() / top_k as f64;
    let var = top.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / top_k as f64;
    if var == 0.0 {
        return Err(BackendError::ZeroVariance);
    }
    Ok((mean, var.sqrt()))
}

/// Adaptive s-norm: `s' = ((s - mu_e)/sigma_e + (s - mu_t)/sigma_t) / 2`
/// with statistics from each side's top-k cohort scores.
pub fn adaptive_snorm(
    raw: f64,
    enroll_cohort_scores: &[f64],
    test_cohort_scores: &[f64],
    top_k: usize,
) -> Result<f64, BackendError> {
    let (mu_e, sd_e) = top_k_stats(enroll_cohort_scores, top_k)?;
    let (mu_t, sd_t) = top_k_stats(test_cohort_scores, top_k)?;
    Ok(0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t))
}

// ---- model files ----

const PLDA_MAGIC: &[u8; 4] = b"SRPL";
const CTX_MAGIC: &[u8; 4] = b"SRBK";
const EMB_MAGIC: &[u8; 4] = b"SREM";
const VERSION: u32 = 1;

fn write_container(
    path: &Path,
    magic: &[u8; 4],
    blobs: &[Blob],
) -> Result<(), BackendError> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    append_blobs(&mut out, blobs);
    crate::feat::atomic_write_bytes(path, &out)?;
    Ok(())
}

fn read_container(path: &Path, magic: &[u8; 4]) -> Result<Vec<Blob>, BackendError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[0..4] != magic {
        return Err(BackendError::Corrupt(format!(
            "missing {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    read_blobs(&bytes, 8).map_err(|e| BackendError::Corrupt(e.to_string()))
}

/// PLDA model file: blobs {mu, Sb, Sw}.
pub fn write_plda(path: impl AsRef<Path>, model: &PldaModel) -> Result<(), BackendError> {
    let d = model.dim();
    let blobs = vec![
        Blob::new("mu", vec![d], model.mu.as_slice().to_vec()),
        Blob::new("Sb", vec![d, d], model.sb.as_slice().to_vec()),
        Blob::new("Sw", vec![d, d], model.sw.as_slice().to_vec()),
    ];
    write_container(path.as_ref(), PLDA_MAGIC, &blobs)
}

pub fn read_plda(path: impl AsRef<Path>) -> Result<PldaModel, BackendError> {
    let blobs = read_container(path.as_ref(), PLDA_MAGIC)?;
    let get = |name: &str| {
        blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| BackendError::Corrupt(format!("missing blob {name}")))
    };
    let mu = get("mu")?;
    let sb = get("Sb")?;
    let sw = get("Sw")?;
    let d = mu.data.len();
    if sb.data.len() != d * d || sw.data.len() != d * d {
        return Err(BackendError::Corrupt("covariance shape mismatch".into()));
    }
    Ok(PldaModel {
        mu: DVector::from_column_slice(&mu.data),
        sb: DMatrix::from_column_slice(d, d, &sb.data),
        sw: DMatrix::from_column_slice(d, d, &sw.data),
    })
}

/// Backend context: centering mean and cohort matrix (one row per cohort
/// entry), stored beside the PLDA model.
pub fn write_backend_ctx(
    path: impl AsRef<Path>,
    center_mu: &[f64],
    cohort: &[Vec<f64>],
) -> Result<(), BackendError> {
    let d = center_mu.len();
    let mut flat = Vec::with_capacity(cohort.len() * d);
    for row in cohort {
        flat.extend_from_slice(row);
    }
    let blobs = vec![
        Blob::new("center_mu", vec![d], center_mu.to_vec()),
        Blob::new("cohort", vec![cohort.len(), d], flat),
    ];
    write_container(path.as_ref(), CTX_MAGIC, &blobs)
}

pub fn read_backend_ctx(path: impl AsRef<Path>) -> Result<(Vec<f64>, Vec<Vec<f64>>), BackendError> {
    let blobs = read_container(path.as_ref(), CTX_MAGIC)?;
    let mu = blobs
        .iter()
        .find(|b| b.name == "center_mu")
        .ok_or_else(|| BackendError::Corrupt("missing center_mu".into()))?;
    let cohort = blobs
        .iter()
        .find(|b| b.name == "cohort")
        .ok_or_else(|| BackendError::Corrupt("missing cohort".into()))?;
    let d = mu.data.len();
    if cohort.dims.len() != 2 || cohort.dims[1] != d {
        return Err(BackendError::Corrupt("cohort shape mismatch".into()));
    }
    let rows = cohort.dims[0];
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        out.push(cohort.data[r * d..(r + 1) * d].to_vec());
    }
    Ok((mu.data.clone(), out))
}

/// Embedding file: one blob per utterance, named by utterance id.
pub fn write_embeddings(path: impl AsRef<Path>, embeddings: &[Embedding]) -> Result<(), BackendError> {
    let blobs: Vec<Blob> = embeddings
        .iter()
        .map(|e| Blob::new(e.utterance_id.clone(), vec![e.vector.len()], e.vector.clone()))
        .collect();
    write_container(path.as_ref(), EMB_MAGIC, &blobs)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<Embedding>, BackendError> {
    let blobs = read_container(path.as_ref(), EMB_MAGIC)?;
    Ok(blobs
        .into_iter()
        .map(|b| Embedding {
            vector: b.data,
            utterance_id: b.name,
            speaker_id: None,
        })
        .collect())
}
