//! Joint mini-batch training: Adam with bias correction, seeded shuffling,
//! gradient-norm clipping, class weighting, and best-dev checkpoint
//! selection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::blob::quantize_f32;
use crate::feat::{read_feature_cache, FeatError, UnifiedFeature};
use crate::loss::{a_softmax_scaled, class_weights, joint_loss, LossConfig, LossError};
use crate::net::model::{ForwardMode, HeadUpstream, MtlNetwork, NetParams};
use crate::net::tensor::Tensor;
use crate::net::SD_CLASSES;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("utterance {utt}: label {label} out of range ({limit} classes)")]
    LabelOutOfRange {
        utt: String,
        label: usize,
        limit: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            alpha: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u32,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Early stop when dev loss has not improved for this many epochs.
    pub patience: Option<u32>,
    /// Ablation hook: freeze the speaker head and train on the SD task only.
    pub disable_asv_head: bool,
    /// Derive SD class weights from the training label counts.
    pub auto_class_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossConfig::default(),
            grad_clip: Some(5.0),
            patience: None,
            disable_asv_head: false,
            auto_class_weights: true,
        }
    }
}

/// Adam accumulators, shaped like the parameters.
pub struct AdamState {
    pub m: NetParams,
    pub v: NetParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One Adam update on a flat parameter slice. `t` is the already-incremented
/// step counter. Updated parameters land back on the f32 grid.
pub fn adam_update_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != m.len() || params.len() != v.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "adam: {} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        params[i] -= cfg.alpha * mhat / (vhat.sqrt() + cfg.epsilon);
    }
    quantize_f32(params);
    Ok(())
}

/// Adam over every trainable parameter of the network.
pub fn adam_step(
    params: &mut NetParams,
    grads: &NetParams,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    state.t += 1;
    let t = state.t;
    let g_entries = grads.entries();
    let mut m_entries = state.m.entries_mut();
    let mut v_entries = state.v.entries_mut();
    for (idx, (name, class, p)) in params.entries_mut().into_iter().enumerate() {
        if !class.trainable() {
            continue;
        }
        debug_assert_eq!(name, g_entries[idx].0);
        adam_update_slice(p, g_entries[idx].2, m_entries[idx].2, v_entries[idx].2, t, cfg)?;
    }
    Ok(())
}

/// One labeled training utterance.
#[derive(Debug, Clone)]
pub struct TrainUtterance {
    pub utt_id: String,
    pub feature_path: PathBuf,
    /// 0 = bona fide, 1 = spoof.
    pub sd_label: usize,
    pub speaker_label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub utts: Vec<TrainUtterance>,
    pub n_speakers: usize,
}

impl Dataset {
    fn validate(&self) -> Result<(), TrainError> {
        if self.utts.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        for u in &self.utts {
            if u.sd_label >= SD_CLASSES {
                return Err(TrainError::LabelOutOfRange {
                    utt: u.utt_id.clone(),
                    label: u.sd_label,
                    limit: SD_CLASSES,
                });
            }
            if u.speaker_label >= self.n_speakers {
                return Err(TrainError::LabelOutOfRange {
                    utt: u.utt_id.clone(),
                    label: u.speaker_label,
                    limit: self.n_speakers,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: u32,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    /// Network after the last epoch.
    pub net: MtlNetwork,
    /// Parameters from the epoch with the lowest dev loss.
    pub best: MtlNetwork,
    pub best_epoch: u32,
    pub log: Vec<EpochLog>,
}

struct LoadedSet {
    features: Vec<UnifiedFeature>,
    sd_labels: Vec<usize>,
    asv_labels: Vec<usize>,
}

fn load_set(ds: &Dataset) -> Result<LoadedSet, TrainError> {
    let mut features = Vec::with_capacity(ds.utts.len());
    let mut sd_labels = Vec::with_capacity(ds.utts.len());
    let mut asv_labels = Vec::with_capacity(ds.utts.len());
    for u in &ds.utts {
        features.push(read_feature_cache(&u.feature_path)?);
        sd_labels.push(u.sd_label);
        asv_labels.push(u.speaker_label);
    }
    Ok(LoadedSet {
        features,
        sd_labels,
        asv_labels,
    })
}

fn batch_tensor(set: &LoadedSet, idx: &[usize]) -> Tensor {
    let feats: Vec<&UnifiedFeature> = idx.iter().map(|&i| &set.features[i]).collect();
    MtlNetwork::features_to_batch(&feats)
}

/// Joint loss and parameter gradients for one batch with a freshly seeded
/// dropout stream. The fixed seed makes the loss a deterministic function
/// of the parameters, which is what finite-difference checks need.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_and_grads(
    net: &MtlNetwork,
    input: &Tensor,
    sd_labels: &[usize],
    asv_labels: &[usize],
    loss_cfg: &LossConfig,
    blend: f64,
    disable_asv: bool,
    dropout_seed: u64,
) -> Result<(f64, NetParams, Vec<crate::net::model::BnUpdate>), TrainError> {
    let mut rng = ChaCha20Rng::seed_from_u64(dropout_seed);
    batch_step(
        net,
        input,
        sd_labels,
        asv_labels,
        loss_cfg,
        blend,
        disable_asv,
        &mut rng,
    )
}

/// Joint loss and parameter gradients for one batch (train-mode forward).
/// Returns (joint loss, gradients, batch-norm updates).
#[allow(clippy::too_many_arguments)]
fn batch_step(
    net: &MtlNetwork,
    input: &Tensor,
    sd_labels: &[usize],
    asv_labels: &[usize],
    loss_cfg: &LossConfig,
    blend: f64,
    disable_asv: bool,
    rng: &mut ChaCha20Rng,
) -> Result<(f64, NetParams, Vec<crate::net::model::BnUpdate>), TrainError> {
    let n = input.n();
    let out = net.forward_batch(input, ForwardMode::Train { rng });
    let trace = out.trace.expect("train forward carries a trace");

    let sd_res = a_softmax_scaled(
        &out.sd_features,
        &net.params.sd.output.weight,
        sd_labels,
        loss_cfg.margin_m,
        blend,
        loss_cfg.sd_class_weights.as_deref(),
        loss_cfg.logit_scale,
    )?;
    let mut sd_up = HeadUpstream {
        d_features: sd_res.d_features,
        d_output_weight: sd_res.d_weight,
        d_output_bias: vec![0.0; SD_CLASSES],
    };
    scale_upstream(&mut sd_up, loss_cfg.sd_task_weight);
    let sd_loss = loss_cfg.sd_task_weight * sd_res.loss;

    let asv_dim = out.asv_features.sample_len();
    let (asv_loss, asv_up) = if disable_asv || loss_cfg.asv_task_weight == 0.0 {
        (
            0.0,
            HeadUpstream::zeros(n, asv_dim, net.config.n_speakers),
        )
    } else {
        let asv_res = a_softmax_scaled(
            &out.asv_features,
            &net.params.asv.output.weight,
            asv_labels,
            loss_cfg.margin_m,
            blend,
            loss_cfg.asv_class_weights.as_deref(),
            loss_cfg.logit_scale,
        )?;
        let mut up = HeadUpstream {
            d_features: asv_res.d_features,
            d_output_weight: asv_res.d_weight,
            d_output_bias: vec![0.0; net.config.n_speakers],
        };
        scale_upstream(&mut up, loss_cfg.asv_task_weight);
        (loss_cfg.asv_task_weight * asv_res.loss, up)
    };

    let mut grads = net.backward(&trace, &sd_up, &asv_up);

    // L2 term of the joint objective: gradient lambda * W on every weight
    // matrix (the frozen speaker head is skipped when ablated)
    if loss_cfg.lambda_reg > 0.0 {
        let params = net.params.entries();
        for (idx, (name, class, g)) in grads.entries_mut().into_iter().enumerate() {
            if !class.regularized() {
                continue;
            }
            if disable_asv && name.starts_with("asv.") {
                continue;
            }
            for (gv, &pv) in g.iter_mut().zip(params[idx].2.iter()) {
                *gv += loss_cfg.lambda_reg * pv;
            }
        }
    }
    if disable_asv {
        for (name, _, g) in grads.entries_mut() {
            if name.starts_with("asv.") {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    let j = joint_loss(
        sd_loss,
        asv_loss,
        reg_norm(&net.params, disable_asv),
        loss_cfg.lambda_reg,
    );
    Ok((j, grads, trace.bn_updates))
}

/// Joint loss only (no gradients), with the same seeded-dropout contract as
/// [`joint_loss_and_grads`].
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_value(
    net: &MtlNetwork,
    input: &Tensor,
    sd_labels: &[usize],
    asv_labels: &[usize],
    loss_cfg: &LossConfig,
    blend: f64,
    disable_asv: bool,
    dropout_seed: u64,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha20Rng::seed_from_u64(dropout_seed);
    let out = net.forward_batch(input, ForwardMode::Train { rng: &mut rng });
    let sd_res = a_softmax_scaled(
        &out.sd_features,
        &net.params.sd.output.weight,
        sd_labels,
        loss_cfg.margin_m,
        blend,
        loss_cfg.sd_class_weights.as_deref(),
        loss_cfg.logit_scale,
    )?;
    let sd_loss = loss_cfg.sd_task_weight * sd_res.loss;
    let asv_loss = if disable_asv || loss_cfg.asv_task_weight == 0.0 {
        0.0
    } else {
        let asv_res = a_softmax_scaled(
            &out.asv_features,
            &net.params.asv.output.weight,
            asv_labels,
            loss_cfg.margin_m,
            blend,
            loss_cfg.asv_class_weights.as_deref(),
            loss_cfg.logit_scale,
        )?;
        loss_cfg.asv_task_weight * asv_res.loss
    };
    Ok(joint_loss(
        sd_loss,
        asv_loss,
        reg_norm(&net.params, disable_asv),
        loss_cfg.lambda_reg,
    ))
}


/// Sum of squared weights in the regularized set; the frozen speaker head
/// drops out of the objective entirely when ablated.
fn reg_norm(params: &NetParams, skip_asv: bool) -> f64 {
    params
        .entries()
        .iter()
        .filter(|(name, class, _)| {
            class.regularized() && !(skip_asv && name.starts_with("asv."))
        })
        .map(|(_, _, arr)| arr.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

fn scale_upstream(up: &mut HeadUpstream, w: f64) {
    if w == 1.0 {
        return;
    }
    up.d_features.data.iter_mut().for_each(|v| *v *= w);
    up.d_output_weight.iter_mut().for_each(|v| *v *= w);
    up.d_output_bias.iter_mut().for_each(|v| *v *= w);
}

fn clip_gradients(grads: &mut NetParams, clip: f64) {
    let mut sq = 0.0;
    for (_, class, g) in grads.entries() {
        if class.trainable() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for (_, class, g) in grads.entries_mut() {
            if class.trainable() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
}

/// Eval-mode joint loss over a whole set (used as the dev metric).
fn eval_loss(net: &MtlNetwork, set: &LoadedSet, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let n = set.features.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in (0..n).collect::<Vec<_>>().chunks(cfg.batch_size) {
        let input = batch_tensor(set, chunk);
        let out = net.forward_batch(&input, ForwardMode::Eval);
        let sd_labels: Vec<usize> = chunk.iter().map(|&i| set.sd_labels[i]).collect();
        let sd = a_softmax_scaled(
            &out.sd_features,
            &net.params.sd.output.weight,
            &sd_labels,
            cfg.loss.margin_m,
            1.0,
            cfg.loss.sd_class_weights.as_deref(),
            cfg.loss.logit_scale,
        )?;
        let mut batch_loss = cfg.loss.sd_task_weight * sd.loss;
        if !cfg.disable_asv_head && cfg.loss.asv_task_weight > 0.0 {
            let asv_labels: Vec<usize> = chunk.iter().map(|&i| set.asv_labels[i]).collect();
            let asv = a_softmax_scaled(
                &out.asv_features,
                &net.params.asv.output.weight,
                &asv_labels,
                cfg.loss.margin_m,
                1.0,
                cfg.loss.asv_class_weights.as_deref(),
                cfg.loss.logit_scale,
            )?;
            batch_loss += cfg.loss.asv_task_weight * asv.loss;
        }
        total += batch_loss * chunk.len() as f64;
        count += chunk.len();
    }
    let mean_task = total / count as f64;
    Ok(mean_task + 0.5 * cfg.loss.lambda_reg * reg_norm(&net.params, cfg.disable_asv_head))
}

/// Train the joint model. Deterministic: (seed, data, config) fully
/// determine the outcome.
pub fn train_loop(
    train: &Dataset,
    dev: &Dataset,
    net: MtlNetwork,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train.validate()?;
    dev.validate()?;
    let mut net = net;
    let mut cfg = cfg.clone();

    let train_set = load_set(train)?;
    let dev_set = load_set(dev)?;

    if cfg.auto_class_weights && cfg.loss.sd_class_weights.is_none() {
        let mut counts = [0usize; SD_CLASSES];
        for &l in &train_set.sd_labels {
            counts[l] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            cfg.loss.sd_class_weights = Some(class_weights(&counts)?);
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&net.params);
    let mut log = Vec::new();
    let mut best = net.clone();
    let mut best_epoch = 0u32;
    let mut best_dev = f64::INFINITY;
    let mut since_best = 0u32;

    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            best: net.clone(),
            net,
            best_epoch: 0,
            log,
        });
    }

    let mut order: Vec<usize> = (0..train.utts.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let blend = cfg.loss.blend_at_epoch(epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let input = batch_tensor(&train_set, chunk);
            let sd_labels: Vec<usize> = chunk.iter().map(|&i| train_set.sd_labels[i]).collect();
            let asv_labels: Vec<usize> = chunk.iter().map(|&i| train_set.asv_labels[i]).collect();
            let (loss, mut grads, bn_updates) = batch_step(
                &net,
                &input,
                &sd_labels,
                &asv_labels,
                &cfg.loss,
                blend,
                cfg.disable_asv_head,
                &mut rng,
            )?;
            if let Some(clip) = cfg.grad_clip {
                clip_gradients(&mut grads, clip);
            }
            adam_step(&mut net.params, &grads, &mut state, &cfg.adam)?;
            net.apply_bn_updates(&bn_updates);
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let dev_loss = eval_loss(&net, &dev_set, &cfg)?;
        log.push(EpochLog {
            epoch,
            train_loss,
            dev_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        if dev_loss < best_dev {
            best_dev = dev_loss;
            best = net.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if let Some(p) = cfg.patience {
                if since_best > p {
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome {
        net,
        best,
        best_epoch,
        log,
    })
}

/// Write the per-epoch log as CSV: epoch, train_loss, dev_loss, seconds.
pub fn write_train_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<(), TrainError> {
    let mut out = String::from("epoch,train_loss,dev_loss,seconds\n");
    for e in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.3}\n",
            e.epoch, e.train_loss, e.dev_loss, e.seconds
        ));
    }
    crate::feat::atomic_write_bytes(path.as_ref(), out.as_bytes())?;
    Ok(())
}

/// Parse a plain-text `key=value` configuration file. Blank lines and
/// `#`-comments are ignored.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, TrainError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            TrainError::BadConfig(format!("line {}: expected key=value", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

impl TrainConfig {
    /// Apply `key=value` overrides onto the defaults. Unknown keys are left
    /// for the caller to validate (the pipeline also feeds network keys from
    /// the same file).
    pub fn apply_key_values(&mut self, map: &BTreeMap<String, String>) -> Result<(), TrainError> {
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, TrainError> {
            v.parse()
                .map_err(|_| TrainError::BadConfig(format!("bad value for {k}: {v}")))
        }
        for (k, v) in map {
            match k.as_str() {
                "batch_size" => self.batch_size = parse(k, v)?,
                "epochs" => self.epochs = parse(k, v)?,
                "alpha" => self.adam.alpha = parse(k, v)?,
                "beta1" => self.adam.beta1 = parse(k, v)?,
                "beta2" => self.adam.beta2 = parse(k, v)?,
                "adam_epsilon" => self.adam.epsilon = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                "lambda_reg" => self.loss.lambda_reg = parse(k, v)?,
                "margin_m" => self.loss.margin_m = parse(k, v)?,
                "anneal_epochs" => self.loss.anneal_epochs = parse(k, v)?,
                "sd_task_weight" => self.loss.sd_task_weight = parse(k, v)?,
                "asv_task_weight" => self.loss.asv_task_weight = parse(k, v)?,
                "logit_scale" => self.loss.logit_scale = parse(k, v)?,
                "grad_clip" => {
                    let val: f64 = parse(k, v)?;
                    self.grad_clip = if val > 0.0 { Some(val) } else { None };
                }
                "patience" => self.patience = Some(parse(k, v)?),
                "disable_asv_head" => self.disable_asv_head = parse(k, v)?,
                "auto_class_weights" => self.auto_class_weights = parse(k, v)?,
                _ => {}
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if !(0.0 < self.adam.beta1 && self.adam.beta1 < 1.0)
            || !(0.0 < self.adam.beta2 && self.adam.beta2 < 1.0)
        {
            return Err(TrainError::BadConfig("betas must lie in (0, 1)".into()));
        }
        if self.adam.alpha <= 0.0 {
            return Err(TrainError::BadConfig("alpha must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_minus_alpha() {
        let cfg = AdamConfig {
            alpha: 1e-3,
            ..AdamConfig::default()
        };
        let mut p = vec![0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update_slice(&mut p, &[1.0], &mut m, &mut v, 1, &cfg).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9, "step {}", p[0]);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.5, -0.25];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_update_slice(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &cfg).unwrap();
        assert_eq!(p, vec![0.5, -0.25]);
    }

    #[test]
    fn adam_descends_quadratic() {
        // f(w) = w^2 / 2, gradient w
        let cfg = AdamConfig {
            alpha: 0.1,
            ..AdamConfig::default()
        };
        let mut p = vec![1.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let mut f_prev = 0.5 * p[0] * p[0];
        for t in 1..=2 {
            let g = vec![p[0]];
            adam_update_slice(&mut p, &g, &mut m, &mut v, t, &cfg).unwrap();
            let f = 0.5 * p[0] * p[0];
            assert!(f < f_prev, "step {t}: {f} !< {f_prev}");
            f_prev = f;
        }
    }

    #[test]
    fn adam_shape_mismatch_rejected() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0; 2];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        assert!(matches!(
            adam_update_slice(&mut p, &[1.0], &mut m, &mut v, 1, &cfg),
            Err(TrainError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn key_value_parsing() {
        let map = parse_key_values("batch_size = 8\n# comment\nepochs=3\n\nseed=42\n").unwrap();
        let mut cfg = TrainConfig::default();
        cfg.apply_key_values(&map).unwrap();
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seed, 42);
        assert!(parse_key_values("no equals sign").is_err());
    }

    #[test]
    fn bad_config_values_rejected() {
        let mut cfg = TrainConfig::default();
        let map = parse_key_values("beta1=1.5").unwrap();
        assert!(cfg.apply_key_values(&map).is_err());
    }
}
