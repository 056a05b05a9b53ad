//! Protocol and score-file I/O plus the seeded synthetic corpus that stands
//! in for the challenge data at desk scale.
//!
//! Protocol lines follow the public challenge shape: four whitespace
//! separated columns `speaker utterance attack key`, with `-` as the attack
//! of bona fide utterances.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::feat::{write_wav, FeatError, SAMPLE_RATE};
use crate::metrics::{AsvKey, SdKey};

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("{path}:{line}: malformed line: {msg}")]
    MalformedLine {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("duplicate utterance id {0}")]
    DuplicateUtterance(String),
    #[error("non-finite score for trial {0}")]
    NonFiniteScore(String),
    #[error("bad corpus spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One spoofing-detection protocol line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmProtocolEntry {
    pub speaker_id: String,
    pub utterance_id: String,
    /// `None` for bona fide utterances (column holds `-`).
    pub attack_id: Option<String>,
    pub key: SdKey,
}

/// One speaker-verification trial line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsvTrialEntry {
    pub enroll_speaker_id: String,
    pub test_utterance_id: String,
    pub key: AsvKey,
}

pub fn parse_cm_protocol(path: impl AsRef<Path>) -> Result<Vec<CmProtocolEntry>, ProtoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let pname = path.display().to_string();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 4 {
            return Err(ProtoError::MalformedLine {
                path: pname,
                line: i + 1,
                msg: format!("expected 4 columns, got {}", cols.len()),
            });
        }
        let key = match cols[3] {
            "bonafide" => SdKey::Bonafide,
            "spoof" => SdKey::Spoof,
            other => {
                return Err(ProtoError::MalformedLine {
                    path: pname,
                    line: i + 1,
                    msg: format!("unknown key {other}"),
                })
            }
        };
        let attack = if cols[2] == "-" {
            None
        } else {
            Some(cols[2].to_string())
        };
        // key and attack column must agree
        if (key == SdKey::Spoof) != attack.is_some() {
            return Err(ProtoError::MalformedLine {
                path: pname,
                line: i + 1,
                msg: "attack column disagrees with key".into(),
            });
        }
        if !seen.insert(cols[1].to_string()) {
            return Err(ProtoError::DuplicateUtterance(cols[1].to_string()));
        }
        out.push(CmProtocolEntry {
            speaker_id: cols[0].to_string(),
            utterance_id: cols[1].to_string(),
            attack_id: attack,
            key,
        });
    }
    Ok(out)
}

pub fn write_cm_protocol(
    path: impl AsRef<Path>,
    entries: &[CmProtocolEntry],
) -> Result<(), ProtoError> {
    let mut out = String::new();
    for e in entries {
        let attack = e.attack_id.as_deref().unwrap_or("-");
        let key = match e.key {
            SdKey::Bonafide => "bonafide",
            SdKey::Spoof => "spoof",
        };
        out.push_str(&format!(
            "{} {} {} {}\n",
            e.speaker_id, e.utterance_id, attack, key
        ));
    }
    crate::feat::atomic_write_bytes(path.as_ref(), out.as_bytes())?;
    Ok(())
}

pub fn parse_asv_trials(path: impl AsRef<Path>) -> Result<Vec<AsvTrialEntry>, ProtoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let pname = path.display().to_string();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 3 {
            return Err(ProtoError::MalformedLine {
                path: pname,
                line: i + 1,
                msg: format!("expected 3 columns, got {}", cols.len()),
            });
        }
        let key = match cols[2] {
            "target" => AsvKey::Target,
            "nontarget" => AsvKey::Nontarget,
            "spoof" => AsvKey::Spoof,
            other => {
                return Err(ProtoError::MalformedLine {
                    path: pname,
                    line: i + 1,
                    msg: format!("unknown key {other}"),
                })
            }
        };
        out.push(AsvTrialEntry {
            enroll_speaker_id: cols[0].to_string(),
            test_utterance_id: cols[1].to_string(),
            key,
        });
    }
    Ok(out)
}

pub fn write_asv_trials(
    path: impl AsRef<Path>,
    entries: &[AsvTrialEntry],
) -> Result<(), ProtoError> {
    let mut out = String::new();
    for e in entries {
        let key = match e.key {
            AsvKey::Target => "target",
            AsvKey::Nontarget => "nontarget",
            AsvKey::Spoof => "spoof",
        };
        out.push_str(&format!(
            "{} {} {}\n",
            e.enroll_speaker_id, e.test_utterance_id, key
        ));
    }
    crate::feat::atomic_write_bytes(path.as_ref(), out.as_bytes())?;
    Ok(())
}

/// Enrollment list: `speaker utterance` per line.
pub fn parse_enroll_list(path: impl AsRef<Path>) -> Result<Vec<(String, String)>, ProtoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let pname = path.display().to_string();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(ProtoError::MalformedLine {
                path: pname,
                line: i + 1,
                msg: format!("expected 2 columns, got {}", cols.len()),
            });
        }
        out.push((cols[0].to_string(), cols[1].to_string()));
    }
    Ok(out)
}

pub fn write_enroll_list(
    path: impl AsRef<Path>,
    entries: &[(String, String)],
) -> Result<(), ProtoError> {
    let mut out = String::new();
    for (spk, utt) in entries {
        out.push_str(&format!("{spk} {utt}\n"));
    }
    crate::feat::atomic_write_bytes(path.as_ref(), out.as_bytes())?;
    Ok(())
}

/// One score-file line: `trial_id score [key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFileEntry {
    pub trial_id: String,
    pub score: f64,
    pub key: Option<String>,
}

/// Scores serialize with 17 significant digits, enough to round-trip f64
/// exactly.
pub fn write_score_file(
    path: impl AsRef<Path>,
    entries: &[ScoreFileEntry],
) -> Result<(), ProtoError> {
    let mut out = String::new();
    for e in entries {
        if !e.score.is_finite() {
            return Err(ProtoError::NonFiniteScore(e.trial_id.clone()));
        }
        match &e.key {
            Some(k) => out.push_str(&format!("{} {:.16e} {}\n", e.trial_id, e.score, k)),
            None => out.push_str(&format!("{} {:.16e}\n", e.trial_id, e.score)),
        }
    }
    crate::feat::atomic_write_bytes(path.as_ref(), out.as_bytes())?;
    Ok(())
}

pub fn read_score_file(path: impl AsRef<Path>) -> Result<Vec<ScoreFileEntry>, ProtoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let pname = path.display().to_string();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(ProtoError::MalformedLine {
                path: pname,
                line: i + 1,
                msg: "expected trial_id and score".into(),
            });
        }
        let score: f64 = cols[1].parse().map_err(|_| ProtoError::MalformedLine {
            path: pname.clone(),
            line: i + 1,
            msg: format!("bad score {}", cols[1]),
        })?;
        if !score.is_finite() {
            return Err(ProtoError::NonFiniteScore(cols[0].to_string()));
        }
        out.push(ScoreFileEntry {
            trial_id: cols[0].to_string(),
            score,
            key: cols.get(2).map(|s| s.to_string()),
        });
    }
    Ok(out)
}

// ---- synthetic corpus ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpoofTransform {
    /// Windowed-sinc lowpass at 3.4 kHz.
    Lowpass,
    /// Soft clipping (tanh drive).
    Clip,
    /// Single echo at 25 ms.
    Echo,
}

impl SpoofTransform {
    pub fn attack_id(self) -> &'static str {
        match self {
            SpoofTransform::Lowpass => "lp",
            SpoofTransform::Clip => "clip",
            SpoofTransform::Echo => "echo",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpusSpec {
    pub seed: u64,
    /// Training speakers (also reused as the dev population).
    pub n_speakers: usize,
    /// Evaluation speakers, disjoint from training.
    pub n_eval_speakers: usize,
    pub utts_per_speaker: usize,
    pub dev_utts_per_speaker: usize,
    pub eval_enroll_utts: usize,
    pub eval_test_utts: usize,
    pub duration_s: f64,
    pub spoof_transforms: Vec<SpoofTransform>,
}

impl Default for SynthCorpusSpec {
    fn default() -> Self {
        SynthCorpusSpec {
            seed: 0,
            n_speakers: 10,
            n_eval_speakers: 4,
            utts_per_speaker: 6,
            dev_utts_per_speaker: 2,
            eval_enroll_utts: 3,
            eval_test_utts: 3,
            duration_s: 1.2,
            spoof_transforms: vec![
                SpoofTransform::Lowpass,
                SpoofTransform::Clip,
                SpoofTransform::Echo,
            ],
        }
    }
}

/// File layout of a generated corpus.
#[derive(Debug, Clone)]
pub struct CorpusLayout {
    pub root: PathBuf,
    pub wav_dir: PathBuf,
    pub cm_train: PathBuf,
    pub cm_dev: PathBuf,
    pub cm_eval: PathBuf,
    pub asv_trials_dev: PathBuf,
    pub asv_trials_eval: PathBuf,
    pub asv_enroll_dev: PathBuf,
    pub asv_enroll_eval: PathBuf,
}

impl CorpusLayout {
    pub fn at(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        CorpusLayout {
            wav_dir: root.join("wav"),
            cm_train: root.join("cm_train.txt"),
            cm_dev: root.join("cm_dev.txt"),
            cm_eval: root.join("cm_eval.txt"),
            asv_trials_dev: root.join("asv_trials_dev.txt"),
            asv_trials_eval: root.join("asv_trials_eval.txt"),
            asv_enroll_dev: root.join("asv_enroll_dev.txt"),
            asv_enroll_eval: root.join("asv_enroll_eval.txt"),
            root,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-speaker voice model: a harmonic stack shaped by formant-like
/// resonances. Fundamentals are spread over 90-220 Hz so identities stay
/// separable.
struct VoiceModel {
    f0: f64,
    formants: [(f64, f64); 3], // (center, width)
    rolloff: f64,
}

impl VoiceModel {
    fn new(spec_seed: u64, global_idx: usize, total: usize) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(splitmix(
            spec_seed ^ (global_idx as u64).wrapping_mul(0x517cc1b727220a95),
        ));
        let slot = (global_idx as f64 + 0.5) / total as f64;
        let f0 = 90.0 + 130.0 * slot + rng.gen_range(-3.0..3.0);
        let formants = [
            (rng.gen_range(300.0..900.0), rng.gen_range(80.0..200.0)),
            (rng.gen_range(900.0..2500.0), rng.gen_range(100.0..250.0)),
            (rng.gen_range(2500.0..4500.0), rng.gen_range(150.0..300.0)),
        ];
        let rolloff = rng.gen_range(0.3..0.8);
        VoiceModel {
            f0,
            formants,
            rolloff,
        }
    }

    fn gain_at(&self, freq: f64) -> f64 {
        let mut g = 0.08;
        for &(c, w) in &self.formants {
            let z = (freq - c) / w;
            g += (-0.5 * z * z).exp();
        }
        g
    }

    /// Synthesize one bona fide utterance: a phasor-rotation harmonic stack
    /// under a syllable-like burst envelope (sharp attacks, decaying tails)
    /// plus a little noise. The bursts matter: they give the echo transform
    /// a visible temporal signature at the 8 ms analysis hop.
    fn utterance(&self, rng: &mut ChaCha20Rng, n_samples: usize) -> Vec<f64> {
        let fs = SAMPLE_RATE as f64;
        let f0 = self.f0 * (1.0 + rng.gen_range(-0.02..0.02));
        let n_harm = ((7000.0 / f0).floor() as usize).max(3);
        // per-harmonic rotators and initial phases
        let mut re = Vec::with_capacity(n_harm);
        let mut im = Vec::with_capacity(n_harm);
        let mut rot_re = Vec::with_capacity(n_harm);
        let mut rot_im = Vec::with_capacity(n_harm);
        let mut amp = Vec::with_capacity(n_harm);
        for h in 1..=n_harm {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            re.push(phase.cos());
            im.push(phase.sin());
            let step = std::f64::consts::TAU * h as f64 * f0 / fs;
            rot_re.push(step.cos());
            rot_im.push(step.sin());
            amp.push(self.gain_at(h as f64 * f0) / (h as f64).powf(self.rolloff));
        }

        // syllable bursts: 5 ms attack, ~90-150 ms hold, 40 ms release
        let mut envelope = vec![0.04f64; n_samples];
        let attack = (0.005 * fs) as usize;
        let release = (0.040 * fs) as usize;
        let mut pos = (rng.gen_range(0.0..0.05) * fs) as usize;
        while pos < n_samples {
            let hold = (rng.gen_range(0.09..0.15) * fs) as usize;
            let gap = (rng.gen_range(0.05..0.11) * fs) as usize;
            let level = rng.gen_range(0.75..1.0);
            let end = (pos + attack + hold + release).min(n_samples);
            for i in pos..end {
                let x = i - pos;
                let e = if x < attack {
                    x as f64 / attack as f64
                } else if x < attack + hold {
                    1.0
                } else {
                    let r = (x - attack - hold) as f64 / release as f64;
                    1.0 - r
                };
                envelope[i] = envelope[i].max(0.04 + level * e);
            }
            pos = end + gap;
        }

        let mut out = Vec::with_capacity(n_samples);
        for n in 0..n_samples {
            let mut s = 0.0;
            for h in 0..n_harm {
                s += amp[h] * im[h];
                let nre = re[h] * rot_re[h] - im[h] * rot_im[h];
                let nim = re[h] * rot_im[h] + im[h] * rot_re[h];
                re[h] = nre;
                im[h] = nim;
            }
            let noise = rng.gen_range(-1.0..1.0) * 0.004;
            out.push(s * envelope[n] + noise);
        }
        let peak = out.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if peak > 0.0 {
            let scale = 0.65 / peak;
            out.iter_mut().for_each(|v| *v *= scale);
        }
        out
    }
}

/// Windowed-sinc lowpass FIR (101 taps, Hamming window).
fn lowpass(x: &[f64], cutoff_hz: f64) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let taps = 101usize;
    let half = (taps / 2) as isize;
    let fc = cutoff_hz / fs;
    let mut h = Vec::with_capacity(taps);
    let mut sum = 0.0;
    for i in 0..taps {
        let n = i as isize - half;
        let sinc = if n == 0 {
            2.0 * fc
        } else {
            (std::f64::consts::TAU * fc * n as f64).sin() / (std::f64::consts::PI * n as f64)
        };
        let w = 0.54 - 0.46 * (std::f64::consts::TAU * i as f64 / (taps - 1) as f64).cos();
        let v = sinc * w;
        sum += v;
        h.push(v);
    }
    h.iter_mut().for_each(|v| *v /= sum);
    let mut y = vec![0.0; x.len()];
    for (i, yo) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &hv) in h.iter().enumerate() {
            let k = i as isize + (j as isize - half);
            if k >= 0 && (k as usize) < x.len() {
                acc += hv * x[k as usize];
            }
        }
        *yo = acc;
    }
    y
}

fn soft_clip(x: &[f64]) -> Vec<f64> {
    let drive = 4.0;
    let norm = (drive as f64).tanh();
    x.iter().map(|&v| (drive * v).tanh() / norm).collect()
}

fn echo(x: &[f64]) -> Vec<f64> {
    let delay = (0.025 * SAMPLE_RATE as f64).round() as usize;
    let gain = 0.6;
    let mut y = x.to_vec();
    for i in delay..x.len() {
        y[i] += gain * x[i - delay];
    }
    let peak = y.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if peak > 1.0 {
        y.iter_mut().for_each(|v| *v /= peak);
    }
    y
}

pub fn apply_transform(x: &[f64], t: SpoofTransform) -> Vec<f64> {
    match t {
        SpoofTransform::Lowpass => lowpass(x, 3400.0),
        SpoofTransform::Clip => soft_clip(x),
        SpoofTransform::Echo => echo(x),
    }
}

struct PlannedUtterance {
    speaker: usize, // global speaker index
    split: usize,   // 0 train, 1 dev, 2 eval-enroll, 3 eval-test
    utt_idx: usize,
    utt_id: String,
    speaker_id: String,
}

/// Generate the WAV tree, CM protocols, ASV trials, and enrollment lists.
/// Byte-identical for identical specs.
pub fn gen_synth_corpus(
    spec: &SynthCorpusSpec,
    out_dir: impl AsRef<Path>,
) -> Result<CorpusLayout, ProtoError> {
    if spec.n_speakers < 2 {
        return Err(ProtoError::BadSpec("need at least 2 speakers".into()));
    }
    if spec.duration_s < 1.0 {
        return Err(ProtoError::BadSpec("duration must be >= 1 s".into()));
    }
    if spec.utts_per_speaker == 0 {
        return Err(ProtoError::BadSpec("need utterances per speaker".into()));
    }
    let layout = CorpusLayout::at(out_dir.as_ref());
    fs::create_dir_all(&layout.wav_dir)?;

    let total_speakers = spec.n_speakers + spec.n_eval_speakers;
    let speaker_id = |global: usize| format!("SPK{global:03}");
    let n_samples = (spec.duration_s * SAMPLE_RATE as f64).round() as usize;

    // plan all bona fide utterances
    let mut plan: Vec<PlannedUtterance> = Vec::new();
    let split_names = ["trn", "dev", "enr", "tst"];
    let push_plan = |plan: &mut Vec<PlannedUtterance>, spk: usize, split: usize, idx: usize| {
        let utt_id = format!("{}_{}_{idx:03}", speaker_id(spk), split_names[split]);
        plan.push(PlannedUtterance {
            speaker: spk,
            split,
            utt_idx: idx,
            utt_id,
            speaker_id: speaker_id(spk),
        });
    };
    for spk in 0..spec.n_speakers {
        for u in 0..spec.utts_per_speaker {
            push_plan(&mut plan, spk, 0, u);
        }
        for u in 0..spec.dev_utts_per_speaker {
            push_plan(&mut plan, spk, 1, u);
        }
    }
    for e in 0..spec.n_eval_speakers {
        let spk = spec.n_speakers + e;
        for u in 0..spec.eval_enroll_utts {
            push_plan(&mut plan, spk, 2, u);
        }
        for u in 0..spec.eval_test_utts {
            push_plan(&mut plan, spk, 3, u);
        }
    }

    // synthesize and write all files (bona fide + every transform)
    plan.par_iter().try_for_each(|p| -> Result<(), ProtoError> {
        let model = VoiceModel::new(spec.seed, p.speaker, total_speakers);
        let mut rng = ChaCha20Rng::seed_from_u64(splitmix(
            spec.seed
                ^ splitmix((p.speaker as u64) << 32 | (p.split as u64) << 16 | p.utt_idx as u64),
        ));
        let bona = model.utterance(&mut rng, n_samples);
        write_wav(layout.wav_dir.join(format!("{}.wav", p.utt_id)), &bona, SAMPLE_RATE)?;
        for &t in &spec.spoof_transforms {
            let spoofed = apply_transform(&bona, t);
            let sid = format!("{}_{}", p.utt_id, t.attack_id());
            write_wav(layout.wav_dir.join(format!("{sid}.wav")), &spoofed, SAMPLE_RATE)?;
        }
        Ok(())
    })?;

    // protocols per split: bona fide first, then spoof copies
    let mut cm: [Vec<CmProtocolEntry>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for p in &plan {
        let cm_split = match p.split {
            0 => 0,
            1 => 1,
            _ => 2,
        };
        cm[cm_split].push(CmProtocolEntry {
            speaker_id: p.speaker_id.clone(),
            utterance_id: p.utt_id.clone(),
            attack_id: None,
            key: SdKey::Bonafide,
        });
    }
    for p in &plan {
        let cm_split = match p.split {
            0 => 0,
            1 => 1,
            _ => 2,
        };
        for &t in &spec.spoof_transforms {
            cm[cm_split].push(CmProtocolEntry {
                speaker_id: p.speaker_id.clone(),
                utterance_id: format!("{}_{}", p.utt_id, t.attack_id()),
                attack_id: Some(t.attack_id().to_string()),
                key: SdKey::Spoof,
            });
        }
    }
    write_cm_protocol(&layout.cm_train, &cm[0])?;
    write_cm_protocol(&layout.cm_dev, &cm[1])?;
    write_cm_protocol(&layout.cm_eval, &cm[2])?;

    // dev ASV: enroll on training utterances, test on dev utterances
    let mut dev_enroll = Vec::new();
    let mut dev_trials = Vec::new();
    let enroll_n = spec.utts_per_speaker.min(3);
    for spk in 0..spec.n_speakers {
        for u in 0..enroll_n {
            dev_enroll.push((
                speaker_id(spk),
                format!("{}_trn_{u:03}", speaker_id(spk)),
            ));
        }
    }
    for p in plan.iter().filter(|p| p.split == 1) {
        for spk in 0..spec.n_speakers {
            let key = if spk == p.speaker {
                AsvKey::Target
            } else {
                AsvKey::Nontarget
            };
            dev_trials.push(AsvTrialEntry {
                enroll_speaker_id: speaker_id(spk),
                test_utterance_id: p.utt_id.clone(),
                key,
            });
        }
        // spoofed copies claimed against the true speaker
        for &t in &spec.spoof_transforms {
            dev_trials.push(AsvTrialEntry {
                enroll_speaker_id: p.speaker_id.clone(),
                test_utterance_id: format!("{}_{}", p.utt_id, t.attack_id()),
                key: AsvKey::Spoof,
            });
        }
    }
    write_enroll_list(&layout.asv_enroll_dev, &dev_enroll)?;
    write_asv_trials(&layout.asv_trials_dev, &dev_trials)?;

    // eval ASV: disjoint speakers, enrollment from the enroll split
    let mut eval_enroll = Vec::new();
    let mut eval_trials = Vec::new();
    for p in plan.iter().filter(|p| p.split == 2) {
        eval_enroll.push((p.speaker_id.clone(), p.utt_id.clone()));
    }
    for p in plan.iter().filter(|p| p.split == 3) {
        for e in 0..spec.n_eval_speakers {
            let spk = spec.n_speakers + e;
            let key = if spk == p.speaker {
                AsvKey::Target
            } else {
                AsvKey::Nontarget
            };
            eval_trials.push(AsvTrialEntry {
                enroll_speaker_id: speaker_id(spk),
                test_utterance_id: p.utt_id.clone(),
                key,
            });
        }
        for &t in &spec.spoof_transforms {
            eval_trials.push(AsvTrialEntry {
                enroll_speaker_id: p.speaker_id.clone(),
                test_utterance_id: format!("{}_{}", p.utt_id, t.attack_id()),
                key: AsvKey::Spoof,
            });
        }
    }
    write_enroll_list(&layout.asv_enroll_eval, &eval_enroll)?;
    write_asv_trials(&layout.asv_trials_eval, &eval_trials)?;

    Ok(layout)
}

/// Sorted unique speakers of a protocol (the training label space).
pub fn speaker_map(entries: &[CmProtocolEntry]) -> Vec<String> {
    let mut speakers: Vec<String> = entries
        .iter()
        .map(|e| e.speaker_id.clone())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    speakers.sort();
    speakers
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cm_protocol_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cm.txt");
        fs::write(&path, "LA_0001 LA_T_100 A07 spoof\nLA_0002 LA_T_101 - bonafide\n").unwrap();
        let entries = parse_cm_protocol(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].attack_id.as_deref(), Some("A07"));
        assert_eq!(entries[0].key, SdKey::Spoof);
        assert_eq!(entries[1].attack_id, None);

        // serialize -> parse is identity
        let path2 = dir.path().join("cm2.txt");
        write_cm_protocol(&path2, &entries).unwrap();
        assert_eq!(parse_cm_protocol(&path2).unwrap(), entries);

        // empty file parses to empty list
        let empty = dir.path().join("empty.txt");
        fs::write(&empty, "").unwrap();
        assert!(parse_cm_protocol(&empty).unwrap().is_empty());

        // spoof with "-" attack violates the invariant
        let bad = dir.path().join("bad.txt");
        fs::write(&bad, "LA_0001 LA_T_100 - spoof\n").unwrap();
        assert!(matches!(
            parse_cm_protocol(&bad),
            Err(ProtoError::MalformedLine { .. })
        ));

        // duplicate utterances are rejected
        let dup = dir.path().join("dup.txt");
        fs::write(&dup, "A u1 - bonafide\nB u1 - bonafide\n").unwrap();
        assert!(matches!(
            parse_cm_protocol(&dup),
            Err(ProtoError::DuplicateUtterance(_))
        ));
    }

    #[test]
    fn score_file_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.txt");
        let mut entries = Vec::new();
        let mut state = 0x12345u64;
        for i in 0..100 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let score = f64::from_bits((state >> 12) | 0x3ff0000000000000) - 1.5;
            entries.push(ScoreFileEntry {
                trial_id: format!("t{i}"),
                score,
                key: if i % 2 == 0 {
                    Some("bonafide".into())
                } else {
                    None
                },
            });
        }
        write_score_file(&path, &entries).unwrap();
        let back = read_score_file(&path).unwrap();
        assert_eq!(back.len(), entries.len());
        for (a, b) in back.iter().zip(&entries) {
            assert_eq!(a.trial_id, b.trial_id);
            assert_eq!(a.score.to_bits(), b.score.to_bits(), "trial {}", a.trial_id);
            assert_eq!(a.key, b.key);
        }
    }

    #[test]
    fn score_file_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.txt");
        fs::write(&path, "t0 NaN\n").unwrap();
        assert!(matches!(
            read_score_file(&path),
            Err(ProtoError::NonFiniteScore(_))
        ));
        assert!(matches!(
            write_score_file(
                dir.path().join("w.txt"),
                &[ScoreFileEntry {
                    trial_id: "x".into(),
                    score: f64::INFINITY,
                    key: None
                }]
            ),
            Err(ProtoError::NonFiniteScore(_))
        ));
    }

    #[test]
    fn synth_corpus_counts_and_structure() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthCorpusSpec {
            seed: 5,
            n_speakers: 10,
            n_eval_speakers: 0,
            utts_per_speaker: 6,
            dev_utts_per_speaker: 0,
            eval_enroll_utts: 0,
            eval_test_utts: 0,
            duration_s: 1.0,
            ..SynthCorpusSpec::default()
        };
        let layout = gen_synth_corpus(&spec, dir.path()).unwrap();
        let entries = parse_cm_protocol(&layout.cm_train).unwrap();
        let bona = entries.iter().filter(|e| e.key == SdKey::Bonafide).count();
        let spoof = entries.iter().filter(|e| e.key == SdKey::Spoof).count();
        assert_eq!(bona, 60);
        assert_eq!(spoof, 60 * 3);
        // every spoof line names its transform
        for e in &entries {
            if e.key == SdKey::Spoof {
                let a = e.attack_id.as_deref().unwrap();
                assert!(["lp", "clip", "echo"].contains(&a), "attack {a}");
            }
        }
        // every protocol utterance has a wav on disk
        for e in &entries {
            assert!(layout.wav_dir.join(format!("{}.wav", e.utterance_id)).exists());
        }
    }

    #[test]
    fn synth_corpus_eval_speakers_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthCorpusSpec {
            seed: 9,
            n_speakers: 3,
            n_eval_speakers: 2,
            utts_per_speaker: 2,
            dev_utts_per_speaker: 1,
            eval_enroll_utts: 1,
            eval_test_utts: 1,
            duration_s: 1.0,
            ..SynthCorpusSpec::default()
        };
        let layout = gen_synth_corpus(&spec, dir.path()).unwrap();
        let train = speaker_map(&parse_cm_protocol(&layout.cm_train).unwrap());
        let eval = speaker_map(&parse_cm_protocol(&layout.cm_eval).unwrap());
        for s in &eval {
            assert!(!train.contains(s), "eval speaker {s} leaked into train");
        }
        let trials = parse_asv_trials(&layout.asv_trials_eval).unwrap();
        assert!(trials.iter().any(|t| t.key == AsvKey::Target));
        assert!(trials.iter().any(|t| t.key == AsvKey::Nontarget));
        assert!(trials.iter().any(|t| t.key == AsvKey::Spoof));
    }

    #[test]
    fn synth_corpus_deterministic() {
        let spec = SynthCorpusSpec {
            seed: 7,
            n_speakers: 2,
            n_eval_speakers: 1,
            utts_per_speaker: 1,
            dev_utts_per_speaker: 1,
            eval_enroll_utts: 1,
            eval_test_utts: 1,
            duration_s: 1.0,
            ..SynthCorpusSpec::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let l1 = gen_synth_corpus(&spec, d1.path()).unwrap();
        let l2 = gen_synth_corpus(&spec, d2.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(&l1.wav_dir)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for n in &names {
            let a = fs::read(l1.wav_dir.join(n)).unwrap();
            let b = fs::read(l2.wav_dir.join(n)).unwrap();
            assert_eq!(a, b, "wav {n:?} differs between identical seeds");
        }
        for (p1, p2) in [
            (&l1.cm_train, &l2.cm_train),
            (&l1.cm_eval, &l2.cm_eval),
            (&l1.asv_trials_eval, &l2.asv_trials_eval),
        ] {
            assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
        }
    }

    #[test]
    fn transforms_change_signal() {
        let x: Vec<f64> = (0..16000)
            .map(|i| 0.5 * (std::f64::consts::TAU * 440.0 * i as f64 / 16000.0).sin()
                + 0.3 * (std::f64::consts::TAU * 5000.0 * i as f64 / 16000.0).sin())
            .collect();
        for t in [SpoofTransform::Lowpass, SpoofTransform::Clip, SpoofTransform::Echo] {
            let y = apply_transform(&x, t);
            assert_eq!(y.len(), x.len());
            let diff: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 1.0, "{t:?} left the signal unchanged");
        }
        // lowpass actually removes the 5 kHz component
        let y = apply_transform(&x, SpoofTransform::Lowpass);
        let probe = |sig: &[f64], f: f64| -> f64 {
            let mut re = 0.0;
            let mut im = 0.0;
            for (i, &v) in sig.iter().enumerate() {
                let ph = std::f64::consts::TAU * f * i as f64 / 16000.0;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            (re * re + im * im).sqrt()
        };
        assert!(probe(&y, 5000.0) < 0.01 * probe(&x, 5000.0));
        assert!(probe(&y, 440.0) > 0.9 * probe(&x, 440.0));
    }
}
