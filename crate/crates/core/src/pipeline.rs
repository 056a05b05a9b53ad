//! End-to-end orchestration: feature extraction over protocols, dataset
//! assembly, training, embedding, backend scoring, evaluation, and fusion.
//! The CLI subcommands are thin wrappers over these functions, and the
//! acceptance suite drives them directly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::backend::{
    adaptive_snorm, center_lnorm, mean_vector, pool_enrollment, BackendError, Embedding,
    PldaModel,
};
use crate::feat::{
    cqt, llfb, mean_var_normalize, read_feature_cache, read_manifest, read_wav, unify,
    write_feature_cache, write_manifest, CqtParams, CqtTransform, FeatError, FeatureKind,
    LlfbParams, UnifiedFeature, TARGET_FRAMES,
};
use crate::fusion::{apply_fusion, fit_fusion, FusionError, FusionModel};
use crate::loss::LossError;
use crate::metrics::{
    asv_operating_point, det_curve, eer, min_tdcf_norm, per_attack_report, tdcf_constants,
    AsvKey, AsvOperatingPoint, AttackRow, MetricsError, ScoreSet, SdKey, TdcfConstants,
    TdcfParams, Trial,
};
use crate::net::model::{ForwardMode, MtlNetwork};
use crate::net::NetError;
use crate::proto::{
    read_score_file, AsvTrialEntry, CmProtocolEntry, ProtoError, ScoreFileEntry,
};
use crate::train::{Dataset, TrainError, TrainUtterance};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Front-end selection for extraction.
#[derive(Debug, Clone)]
pub enum FrontEnd {
    Cqt(CqtParams),
    Llfb(LlfbParams),
}

impl FrontEnd {
    pub fn kind(&self) -> FeatureKind {
        match self {
            FrontEnd::Cqt(_) => FeatureKind::Cqt,
            FrontEnd::Llfb(_) => FeatureKind::Llfb,
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            FrontEnd::Cqt(p) => p.n_bins(),
            FrontEnd::Llfb(p) => p.n_filters,
        }
    }
}

/// Extraction settings: the front-end plus the (default-off) per-utterance
/// mean/variance normalization flag.
#[derive(Debug, Clone)]
pub struct ExtractionConfig {
    pub front: FrontEnd,
    pub mean_var_norm: bool,
}

impl ExtractionConfig {
    pub fn new(front: FrontEnd) -> Self {
        ExtractionConfig {
            front,
            mean_var_norm: false,
        }
    }

    pub fn normalized(front: FrontEnd) -> Self {
        ExtractionConfig {
            front,
            mean_var_norm: true,
        }
    }
}

/// Extract unified features for every protocol utterance in parallel and
/// write the cache plus its manifest. Returns the manifest path.
pub fn extract_features(
    entries: &[CmProtocolEntry],
    wav_dir: &Path,
    out_dir: &Path,
    config: &ExtractionConfig,
) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(out_dir)?;
    let front = &config.front;
    let cqt_transform = match front {
        FrontEnd::Cqt(p) => Some(CqtTransform::new(p.clone())),
        FrontEnd::Llfb(_) => None,
    };
    entries
        .par_iter()
        .try_for_each(|e| -> Result<(), PipelineError> {
            let wav = read_wav(wav_dir.join(format!("{}.wav", e.utterance_id)))?;
            let mut tfr = match front {
                FrontEnd::Cqt(_) => cqt_transform.as_ref().unwrap().transform(&wav)?,
                FrontEnd::Llfb(p) => llfb(&wav, p)?,
            };
            if config.mean_var_norm {
                mean_var_normalize(&mut tfr);
            }
            let feat = unify(&tfr, front.kind(), TARGET_FRAMES)?;
            write_feature_cache(out_dir.join(format!("{}.feat", e.utterance_id)), &feat)?;
            Ok(())
        })?;
    let manifest: Vec<(String, PathBuf)> = entries
        .iter()
        .map(|e| {
            (
                e.utterance_id.clone(),
                out_dir.join(format!("{}.feat", e.utterance_id)),
            )
        })
        .collect();
    let manifest_path = out_dir.join("manifest.txt");
    write_manifest(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

/// One-shot single-utterance extraction (used by tests and tools).
pub fn extract_one(wav_path: &Path, config: &ExtractionConfig) -> Result<UnifiedFeature, PipelineError> {
    let wav = read_wav(wav_path)?;
    let front = &config.front;
    let mut tfr = match front {
        FrontEnd::Cqt(p) => cqt(&wav, p)?,
        FrontEnd::Llfb(p) => llfb(&wav, p)?,
    };
    if config.mean_var_norm {
        mean_var_normalize(&mut tfr);
    }
    Ok(unify(&tfr, front.kind(), TARGET_FRAMES)?)
}

/// Join a manifest with a protocol into a labeled dataset. `speakers` is
/// the training label space (sorted speaker ids).
pub fn build_dataset(
    manifest_path: &Path,
    entries: &[CmProtocolEntry],
    speakers: &[String],
) -> Result<Dataset, PipelineError> {
    let manifest: HashMap<String, PathBuf> =
        read_manifest(manifest_path)?.into_iter().collect();
    let spk_index: HashMap<&str, usize> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut utts = Vec::with_capacity(entries.len());
    for e in entries {
        let feature_path = manifest
            .get(&e.utterance_id)
            .ok_or_else(|| {
                PipelineError::Data(format!("utterance {} missing from manifest", e.utterance_id))
            })?
            .clone();
        let speaker_label = *spk_index.get(e.speaker_id.as_str()).ok_or_else(|| {
            PipelineError::Data(format!(
                "speaker {} not in the training speaker map",
                e.speaker_id
            ))
        })?;
        utts.push(TrainUtterance {
            utt_id: e.utterance_id.clone(),
            feature_path,
            sd_label: match e.key {
                SdKey::Bonafide => 0,
                SdKey::Spoof => 1,
            },
            speaker_label,
        });
    }
    Ok(Dataset {
        utts,
        n_speakers: speakers.len(),
    })
}

/// Eval-mode embeddings for every manifest utterance, in manifest order.
pub fn embed_manifest(
    net: &MtlNetwork,
    manifest_path: &Path,
) -> Result<Vec<Embedding>, PipelineError> {
    let manifest = read_manifest(manifest_path)?;
    let embeddings: Result<Vec<Embedding>, PipelineError> = manifest
        .par_iter()
        .map(|(utt, path)| -> Result<Embedding, PipelineError> {
            let feat = read_feature_cache(path)?;
            let out = net.forward(&feat, ForwardMode::Eval);
            Ok(Embedding {
                vector: out.embeddings.sample(0).to_vec(),
                utterance_id: utt.clone(),
                speaker_id: None,
            })
        })
        .collect();
    embeddings
}

/// Spoofing-detection scores for every manifest utterance: bona fide logit
/// minus spoof logit from an eval-mode forward. Keys come from the protocol.
pub fn score_sd(
    net: &MtlNetwork,
    manifest_path: &Path,
    entries: &[CmProtocolEntry],
) -> Result<Vec<ScoreFileEntry>, PipelineError> {
    let manifest: HashMap<String, PathBuf> =
        read_manifest(manifest_path)?.into_iter().collect();
    let scores: Result<Vec<ScoreFileEntry>, PipelineError> = entries
        .par_iter()
        .map(|e| -> Result<ScoreFileEntry, PipelineError> {
            let path = manifest.get(&e.utterance_id).ok_or_else(|| {
                PipelineError::Data(format!("utterance {} missing from manifest", e.utterance_id))
            })?;
            let feat = read_feature_cache(path)?;
            let out = net.forward(&feat, ForwardMode::Eval);
            let score = out.sd_logits.data[0] - out.sd_logits.data[1];
            Ok(ScoreFileEntry {
                trial_id: e.utterance_id.clone(),
                score,
                key: Some(
                    match e.key {
                        SdKey::Bonafide => "bonafide",
                        SdKey::Spoof => "spoof",
                    }
                    .to_string(),
                ),
            })
        })
        .collect();
    scores
}

/// Outputs of backend training: the PLDA model plus the centering mean and
/// the s-norm cohort (training-speaker class means).
pub struct BackendModel {
    pub plda: PldaModel,
    pub center_mu: Vec<f64>,
    pub cohort: Vec<Vec<f64>>,
    pub degenerate: bool,
    pub log_likelihoods: Vec<f64>,
}

/// Train the PLDA backend on labeled training embeddings.
pub fn backend_train(
    embeddings: &[Embedding],
    entries: &[CmProtocolEntry],
    speakers: &[String],
    n_iters: usize,
) -> Result<BackendModel, PipelineError> {
    let spk_index: HashMap<&str, usize> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let spk_of: HashMap<&str, &str> = entries
        .iter()
        .map(|e| (e.utterance_id.as_str(), e.speaker_id.as_str()))
        .collect();

    // bona fide training embeddings only
    let bona: Vec<(&Embedding, usize)> = embeddings
        .iter()
        .filter_map(|e| {
            let spk = spk_of.get(e.utterance_id.as_str())?;
            let is_bona = entries
                .iter()
                .find(|p| p.utterance_id == e.utterance_id)
                .map(|p| p.key == SdKey::Bonafide)
                .unwrap_or(false);
            if is_bona {
                spk_index.get(spk).map(|&i| (e, i))
            } else {
                None
            }
        })
        .collect();
    if bona.is_empty() {
        return Err(PipelineError::Data(
            "no bona fide training embeddings for the backend".into(),
        ));
    }

    let raw: Vec<Vec<f64>> = bona.iter().map(|(e, _)| e.vector.clone()).collect();
    let center_mu = mean_vector(&raw);
    let mut labeled = Vec::with_capacity(bona.len());
    for ((e, label), _) in bona.iter().zip(raw.iter()) {
        labeled.push((*label, center_lnorm(&e.vector, &center_mu)?));
    }

    let (plda, report) = crate::backend::plda_train(&labeled, n_iters)?;

    // cohort: per-training-speaker mean of normalized embeddings,
    // re-normalized like enrollment models
    let mut by_class: HashMap<usize, Vec<Vec<f64>>> = HashMap::new();
    for (label, v) in &labeled {
        by_class.entry(*label).or_default().push(v.clone());
    }
    let mut class_ids: Vec<usize> = by_class.keys().cloned().collect();
    class_ids.sort();
    let mut cohort = Vec::with_capacity(class_ids.len());
    for c in class_ids {
        cohort.push(pool_enrollment(&by_class[&c])?);
    }

    Ok(BackendModel {
        plda,
        center_mu,
        cohort,
        degenerate: report.degenerate,
        log_likelihoods: report.log_likelihoods,
    })
}

/// Cohort size cap for adaptive s-norm.
pub const SNORM_TOP_K_CAP: usize = 200;

/// Score ASV trials: length-normalize, adapt the PLDA mean to the
/// enrollment set, score with the two-covariance LLR, and apply adaptive
/// s-norm against the training-speaker cohort.
pub fn score_asv(
    backend: &BackendModel,
    embeddings: &[Embedding],
    enroll_list: &[(String, String)],
    trials: &[AsvTrialEntry],
) -> Result<Vec<ScoreFileEntry>, PipelineError> {
    let by_utt: HashMap<&str, &Embedding> = embeddings
        .iter()
        .map(|e| (e.utterance_id.as_str(), e))
        .collect();

    // normalized embeddings for every utterance we may touch
    let mut normed: HashMap<String, Vec<f64>> = HashMap::new();
    let need = |utt: &str,
                    normed: &mut HashMap<String, Vec<f64>>|
     -> Result<(), PipelineError> {
        if normed.contains_key(utt) {
            return Ok(());
        }
        let e = by_utt.get(utt).ok_or_else(|| {
            PipelineError::Data(format!("utterance {utt} has no embedding"))
        })?;
        normed.insert(utt.to_string(), center_lnorm(&e.vector, &backend.center_mu)?);
        Ok(())
    };
    for (_, utt) in enroll_list {
        need(utt, &mut normed)?;
    }
    for t in trials {
        need(&t.test_utterance_id, &mut normed)?;
    }

    // enrollment models: pooled normalized embeddings per speaker
    let mut enroll_utts: HashMap<&str, Vec<&str>> = HashMap::new();
    for (spk, utt) in enroll_list {
        enroll_utts.entry(spk.as_str()).or_default().push(utt.as_str());
    }
    let mut enroll_models: HashMap<String, Vec<f64>> = HashMap::new();
    for (spk, utts) in &enroll_utts {
        let vecs: Vec<Vec<f64>> = utts.iter().map(|u| normed[*u].clone()).collect();
        enroll_models.insert(spk.to_string(), pool_enrollment(&vecs)?);
    }

    // PLDA adaptation: re-center the global mean on the enrollment data
    let enroll_vecs: Vec<Vec<f64>> = enroll_list
        .iter()
        .map(|(_, u)| normed[u].clone())
        .collect();
    let mut model = backend.plda.clone();
    if !enroll_vecs.is_empty() {
        model.recenter(&mean_vector(&enroll_vecs));
    }
    let scorer = model.scorer()?;

    let top_k = backend.cohort.len().min(SNORM_TOP_K_CAP);
    let mut enroll_cohort: HashMap<&str, Vec<f64>> = HashMap::new();
    for (spk, emodel) in &enroll_models {
        let scores: Result<Vec<f64>, BackendError> = backend
            .cohort
            .iter()
            .map(|c| scorer.score(emodel, c))
            .collect();
        enroll_cohort.insert(spk.as_str(), scores?);
    }
    let mut test_cohort: HashMap<&str, Vec<f64>> = HashMap::new();
    for t in trials {
        let utt = t.test_utterance_id.as_str();
        if !test_cohort.contains_key(utt) {
            let v = &normed[utt];
            let scores: Result<Vec<f64>, BackendError> = backend
                .cohort
                .iter()
                .map(|c| scorer.score(c, v))
                .collect();
            test_cohort.insert(
                by_utt[utt].utterance_id.as_str(),
                scores?,
            );
        }
    }

    let mut out = Vec::with_capacity(trials.len());
    for t in trials {
        let emodel = enroll_models.get(&t.enroll_speaker_id).ok_or_else(|| {
            PipelineError::Data(format!(
                "speaker {} has no enrollment",
                t.enroll_speaker_id
            ))
        })?;
        let test = &normed[&t.test_utterance_id];
        let raw = scorer.score(emodel, test)?;
        let score = adaptive_snorm(
            raw,
            &enroll_cohort[t.enroll_speaker_id.as_str()],
            &test_cohort[t.test_utterance_id.as_str()],
            top_k,
        )?;
        out.push(ScoreFileEntry {
            trial_id: format!("{}:{}", t.enroll_speaker_id, t.test_utterance_id),
            score,
            key: Some(
                match t.key {
                    AsvKey::Target => "target",
                    AsvKey::Nontarget => "nontarget",
                    AsvKey::Spoof => "spoof",
                }
                .to_string(),
            ),
        });
    }
    Ok(out)
}

/// Parse score-file entries into an SD score set, joining attack labels
/// from an optional protocol.
pub fn sd_score_set(
    entries: &[ScoreFileEntry],
    protocol: Option<&[CmProtocolEntry]>,
) -> Result<ScoreSet<SdKey>, PipelineError> {
    let attacks: HashMap<&str, Option<&str>> = protocol
        .map(|p| {
            p.iter()
                .map(|e| (e.utterance_id.as_str(), e.attack_id.as_deref()))
                .collect()
        })
        .unwrap_or_default();
    let mut trials = Vec::with_capacity(entries.len());
    for e in entries {
        let key = match e.key.as_deref() {
            Some("bonafide") => SdKey::Bonafide,
            Some("spoof") => SdKey::Spoof,
            other => {
                return Err(PipelineError::Data(format!(
                    "trial {}: missing or unknown SD key {:?}",
                    e.trial_id, other
                )))
            }
        };
        trials.push(Trial {
            trial_id: e.trial_id.clone(),
            score: e.score,
            key,
            attack_id: attacks
                .get(e.trial_id.as_str())
                .and_then(|a| a.map(String::from)),
        });
    }
    Ok(ScoreSet::new(trials))
}

pub fn asv_score_set(entries: &[ScoreFileEntry]) -> Result<ScoreSet<AsvKey>, PipelineError> {
    let mut trials = Vec::with_capacity(entries.len());
    for e in entries {
        let key = match e.key.as_deref() {
            Some("target") => AsvKey::Target,
            Some("nontarget") => AsvKey::Nontarget,
            Some("spoof") => AsvKey::Spoof,
            other => {
                return Err(PipelineError::Data(format!(
                    "trial {}: missing or unknown ASV key {:?}",
                    e.trial_id, other
                )))
            }
        };
        trials.push(Trial {
            trial_id: e.trial_id.clone(),
            score: e.score,
            key,
            attack_id: None,
        });
    }
    Ok(ScoreSet::new(trials))
}

/// Tandem evaluation summary.
pub struct EvalReport {
    pub sd_eer: f64,
    pub sd_threshold: f64,
    pub asv: Option<AsvEval>,
    pub per_attack: Vec<AttackRow>,
}

pub struct AsvEval {
    pub eer: f64,
    pub operating_point: AsvOperatingPoint,
    pub constants: TdcfConstants,
    pub min_tdcf: f64,
    pub min_tdcf_threshold: f64,
}

/// Compute the tandem evaluation: SD EER always; t-DCF and the per-attack
/// table when ASV scores are given.
pub fn evaluate(
    sd: &ScoreSet<SdKey>,
    asv: Option<&ScoreSet<AsvKey>>,
    params: &TdcfParams,
) -> Result<EvalReport, PipelineError> {
    let bona = sd.bonafide_scores();
    let spoof = sd.spoof_scores();
    let (sd_eer, sd_threshold) = eer(&bona, &spoof)?;

    let mut report = EvalReport {
        sd_eer,
        sd_threshold,
        asv: None,
        per_attack: Vec::new(),
    };

    if let Some(asv_scores) = asv {
        let targets = asv_scores.scores_with_key(AsvKey::Target);
        let nontargets = asv_scores.scores_with_key(AsvKey::Nontarget);
        let (asv_eer, _) = eer(&targets, &nontargets)?;
        let op = asv_operating_point(asv_scores)?;
        let constants = tdcf_constants(params, &op)?;
        let m = min_tdcf_norm(&bona, &spoof, constants.c1, constants.c2)?;
        if sd.trials.iter().any(|t| t.attack_id.is_some()) {
            report.per_attack = per_attack_report(sd, constants.c1, constants.c2)?;
        }
        report.asv = Some(AsvEval {
            eer: asv_eer,
            operating_point: op,
            constants,
            min_tdcf: m.value,
            min_tdcf_threshold: m.threshold,
        });
    }
    Ok(report)
}

impl EvalReport {
    /// Aligned plain-text rendering for the console.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("SD EER          : {:6.2}%\n", self.sd_eer * 100.0));
        if let Some(asv) = &self.asv {
            out.push_str(&format!("ASV EER         : {:6.2}%\n", asv.eer * 100.0));
            let op = &asv.operating_point;
            out.push_str(&format!(
                "ASV operating pt: P_miss {:.4}  P_fa {:.4}  P_miss,spoof {:.4}\n",
                op.p_miss, op.p_fa, op.p_miss_spoof
            ));
            out.push_str(&format!(
                "t-DCF constants : C0 {:.4}  C1 {:.4}  C2 {:.4}\n",
                asv.constants.c0, asv.constants.c1, asv.constants.c2
            ));
            if asv.constants.c1_negative() {
                out.push_str("warning: C1 < 0 (weak ASV); t-DCF evaluated as defined\n");
            }
            out.push_str(&format!("min t-DCF       : {:.4}\n", asv.min_tdcf));
            if !self.per_attack.is_empty() {
                out.push_str("attack   #spoof   EER%   min t-DCF\n");
                for row in &self.per_attack {
                    out.push_str(&format!(
                        "{:<8} {:>6} {:>6.2} {:>10.4}\n",
                        row.attack_id,
                        row.n_spoof,
                        row.eer * 100.0,
                        row.min_tdcf
                    ));
                }
            }
        }
        out
    }

    /// `metric,value` CSV.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("sd_eer,{:.6}\n", self.sd_eer));
        if let Some(asv) = &self.asv {
            out.push_str(&format!("asv_eer,{:.6}\n", asv.eer));
            out.push_str(&format!("asv_p_miss,{:.6}\n", asv.operating_point.p_miss));
            out.push_str(&format!("asv_p_fa,{:.6}\n", asv.operating_point.p_fa));
            out.push_str(&format!(
                "asv_p_miss_spoof,{:.6}\n",
                asv.operating_point.p_miss_spoof
            ));
            out.push_str(&format!("c0,{:.6}\n", asv.constants.c0));
            out.push_str(&format!("c1,{:.6}\n", asv.constants.c1));
            out.push_str(&format!("c2,{:.6}\n", asv.constants.c2));
            out.push_str(&format!("min_tdcf,{:.6}\n", asv.min_tdcf));
        }
        out
    }

    pub fn per_attack_csv(&self) -> String {
        let mut out = String::from("attack,n_spoof,eer,min_tdcf\n");
        for row in &self.per_attack {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                row.attack_id, row.n_spoof, row.eer, row.min_tdcf
            ));
        }
        out
    }
}

/// DET points of an SD score set as CSV (threshold, FAR, FRR).
pub fn sd_det_csv(sd: &ScoreSet<SdKey>) -> Result<String, PipelineError> {
    let points = det_curve(&sd.bonafide_scores(), &sd.spoof_scores())?;
    let mut out = String::from("threshold,far,frr\n");
    for p in points {
        out.push_str(&format!("{},{:.9},{:.9}\n", p.threshold, p.far, p.frr));
    }
    Ok(out)
}

/// Align several score files on their shared trial list. All systems must
/// cover identical trials in identical order-insensitive sets.
pub fn align_score_files(
    paths: &[PathBuf],
) -> Result<(Vec<String>, Vec<Vec<f64>>, Vec<Option<String>>), PipelineError> {
    if paths.is_empty() {
        return Err(PipelineError::Data("no score files given".into()));
    }
    let first = read_score_file(&paths[0])?;
    let trial_ids: Vec<String> = first.iter().map(|e| e.trial_id.clone()).collect();
    let keys: Vec<Option<String>> = first.iter().map(|e| e.key.clone()).collect();
    let mut systems = vec![first.iter().map(|e| e.score).collect::<Vec<f64>>()];
    for path in &paths[1..] {
        let entries = read_score_file(path)?;
        let by_id: HashMap<&str, &ScoreFileEntry> =
            entries.iter().map(|e| (e.trial_id.as_str(), e)).collect();
        if entries.len() != trial_ids.len() {
            return Err(FusionError::TrialMismatch(format!(
                "{} has {} trials, expected {}",
                path.display(),
                entries.len(),
                trial_ids.len()
            ))
            .into());
        }
        let mut scores = Vec::with_capacity(trial_ids.len());
        for id in &trial_ids {
            let e = by_id.get(id.as_str()).ok_or_else(|| {
                FusionError::TrialMismatch(format!(
                    "{} is missing trial {id}",
                    path.display()
                ))
            })?;
            scores.push(e.score);
        }
        systems.push(scores);
    }
    Ok((trial_ids, systems, keys))
}

/// Fit fusion on aligned score files; positives are `bonafide` or `target`
/// keys. Returns the model and the fused score entries.
pub fn fuse_score_files(
    paths: &[PathBuf],
) -> Result<(FusionModel, Vec<ScoreFileEntry>), PipelineError> {
    let (trial_ids, systems, keys) = align_score_files(paths)?;
    let labels: Result<Vec<bool>, PipelineError> = keys
        .iter()
        .zip(&trial_ids)
        .map(|(k, id)| match k.as_deref() {
            Some("bonafide") | Some("target") => Ok(true),
            Some("spoof") | Some("nontarget") => Ok(false),
            other => Err(PipelineError::Data(format!(
                "trial {id}: cannot derive a fusion label from key {other:?}"
            ))),
        })
        .collect();
    let labels = labels?;
    let model = fit_fusion(&systems, &labels)?;
    let fused = apply_fusion(&model, &systems)?;
    let entries = trial_ids
        .into_iter()
        .zip(fused)
        .zip(keys)
        .map(|((trial_id, score), key)| ScoreFileEntry {
            trial_id,
            score,
            key,
        })
        .collect();
    Ok((model, entries))
}

/// Apply an existing fusion model to aligned score files.
pub fn apply_fusion_to_files(
    model: &FusionModel,
    paths: &[PathBuf],
) -> Result<Vec<ScoreFileEntry>, PipelineError> {
    let (trial_ids, systems, keys) = align_score_files(paths)?;
    let fused = apply_fusion(model, &systems)?;
    Ok(trial_ids
        .into_iter()
        .zip(fused)
        .zip(keys)
        .map(|((trial_id, score), key)| ScoreFileEntry {
            trial_id,
            score,
            key,
        })
        .collect())
}
