//! EER and the tandem detection cost function.
//!
//! Threshold conventions, fixed so the brute-force oracles in the tests can
//! match exactly: a trial is accepted iff `score >= threshold`; the DET
//! staircase is swept over every distinct score plus an accept-none
//! sentinel; the EER interpolates linearly between the best (lowest-FRR)
//! operating points at adjacent distinct FAR values.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need both classes: {0}")]
    OneClassOnly(String),
    #[error("C2 is not positive ({0}): every spoof trial is rejected by the ASV, t-DCF undefined")]
    NonpositiveC2(f64),
    #[error("unknown attack label {0}")]
    UnknownAttackLabel(String),
    #[error("non-finite score for trial {0}")]
    NonFiniteScore(String),
}

/// Spoofing-detection trial key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdKey {
    Bonafide,
    Spoof,
}

/// Speaker-verification trial key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsvKey {
    Target,
    Nontarget,
    Spoof,
}

/// One scored trial with its ground-truth key.
#[derive(Debug, Clone)]
pub struct Trial<K> {
    pub trial_id: String,
    pub score: f64,
    pub key: K,
    pub attack_id: Option<String>,
}

/// Scored trial list for one task.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet<K> {
    pub trials: Vec<Trial<K>>,
}

impl<K> ScoreSet<K> {
    pub fn new(trials: Vec<Trial<K>>) -> Self {
        ScoreSet { trials }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

impl ScoreSet<SdKey> {
    pub fn bonafide_scores(&self) -> Vec<f64> {
        self.trials
            .iter()
            .filter(|t| t.key == SdKey::Bonafide)
            .map(|t| t.score)
            .collect()
    }

    pub fn spoof_scores(&self) -> Vec<f64> {
        self.trials
            .iter()
            .filter(|t| t.key == SdKey::Spoof)
            .map(|t| t.score)
            .collect()
    }
}

impl ScoreSet<AsvKey> {
    pub fn scores_with_key(&self, key: AsvKey) -> Vec<f64> {
        self.trials
            .iter()
            .filter(|t| t.key == key)
            .map(|t| t.score)
            .collect()
    }
}

/// t-DCF priors and costs (challenge operating parameters).
#[derive(Debug, Clone)]
pub struct TdcfParams {
    pub pi_tar: f64,
    pub pi_non: f64,
    pub pi_spoof: f64,
    pub c_miss_sd: f64,
    pub c_fa_sd: f64,
    pub c_miss_asv: f64,
    pub c_fa_asv: f64,
}

impl Default for TdcfParams {
    fn default() -> Self {
        TdcfParams {
            pi_tar: 0.9405,
            pi_non: 0.0095,
            pi_spoof: 0.05,
            c_miss_sd: 1.0,
            c_fa_sd: 10.0,
            c_miss_asv: 1.0,
            c_fa_asv: 10.0,
        }
    }
}

/// Fixed ASV operating point feeding the t-DCF constants.
#[derive(Debug, Clone)]
pub struct AsvOperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
    pub p_miss_spoof: f64,
}

/// One point of the DET staircase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// DET staircase over all thresholds: starts at (FAR 1, FRR 0), ends at
/// (FAR 0, FRR 1), duplicate points collapsed.
pub fn det_curve(positives: &[f64], negatives: &[f64]) -> Result<Vec<DetPoint>, MetricsError> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(MetricsError::OneClassOnly(
            "DET curve needs positive and negative trials".into(),
        ));
    }
    let mut pos = positives.to_vec();
    let mut neg = negatives.to_vec();
    pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
    neg.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut thresholds: Vec<f64> = pos.iter().chain(neg.iter()).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    let mut points: Vec<DetPoint> = Vec::with_capacity(thresholds.len() + 1);
    let push = |p: DetPoint, points: &mut Vec<DetPoint>| {
        if let Some(last) = points.last() {
            if last.far == p.far && last.frr == p.frr {
                return;
            }
        }
        points.push(p);
    };

    // accept iff score >= t; count via partition points on the sorted lists
    for &t in &thresholds {
        let frr = pos.partition_point(|&s| s < t) as f64 / np;
        let far = (neg.len() - neg.partition_point(|&s| s < t)) as f64 / nn;
        push(
            DetPoint {
                threshold: t,
                far,
                frr,
            },
            &mut points,
        );
    }
    // accept-none sentinel
    push(
        DetPoint {
            threshold: f64::INFINITY,
            far: 0.0,
            frr: 1.0,
        },
        &mut points,
    );
    Ok(points)
}

/// Equal error rate with its threshold.
///
/// The staircase is reduced to one (minimum-FRR) point per distinct FAR and
/// the crossing with FRR = FAR is interpolated linearly between adjacent
/// points of that polyline.
pub fn eer(positives: &[f64], negatives: &[f64]) -> Result<(f64, f64), MetricsError> {
    let points = det_curve(positives, negatives)?;
    eer_of_det(&points)
}

/// Crossing of a DET staircase with the diagonal.
pub fn eer_of_det(points: &[DetPoint]) -> Result<(f64, f64), MetricsError> {
    // min-FRR per distinct FAR: the sweep yields non-increasing FAR and
    // non-decreasing FRR, so the first point of each FAR run has minimal FRR
    let mut envelope: Vec<DetPoint> = Vec::with_capacity(points.len());
    for p in points {
        if let Some(last) = envelope.last() {
            if last.far == p.far {
                continue;
            }
        }
        envelope.push(*p);
    }

    let mut prev = envelope[0];
    let mut prev_d = prev.frr - prev.far;
    if prev_d >= 0.0 {
        // degenerate: already at or past the diagonal
        return Ok((prev.far.max(prev.frr), prev.threshold));
    }
    for &p in envelope.iter().skip(1) {
        let d = p.frr - p.far;
        if d >= 0.0 {
            // interpolate on the segment prev -> p
            let u = prev_d / (prev_d - d);
            let far = prev.far + u * (p.far - prev.far);
            let thr = if p.threshold.is_finite() {
                prev.threshold + u * (p.threshold - prev.threshold)
            } else {
                prev.threshold
            };
            return Ok((far, thr));
        }
        prev = p;
        prev_d = d;
    }
    // never crossed: everything accepted at any threshold
    let last = envelope.last().unwrap();
    Ok((last.far.max(last.frr), last.threshold))
}

/// ASV operating point at the target/nontarget EER threshold, plus the
/// spoof miss rate at that threshold (0 when no spoof trials exist).
pub fn asv_operating_point(scores: &ScoreSet<AsvKey>) -> Result<AsvOperatingPoint, MetricsError> {
    let targets = scores.scores_with_key(AsvKey::Target);
    let nontargets = scores.scores_with_key(AsvKey::Nontarget);
    if targets.is_empty() || nontargets.is_empty() {
        return Err(MetricsError::OneClassOnly(
            "ASV operating point needs target and nontarget trials".into(),
        ));
    }
    let (_, threshold) = eer(&targets, &nontargets)?;
    let p_miss = targets.iter().filter(|&&s| s < threshold).count() as f64 / targets.len() as f64;
    let p_fa =
        nontargets.iter().filter(|&&s| s >= threshold).count() as f64 / nontargets.len() as f64;
    let spoof = scores.scores_with_key(AsvKey::Spoof);
    let p_miss_spoof = if spoof.is_empty() {
        0.0
    } else {
        spoof.iter().filter(|&&s| s < threshold).count() as f64 / spoof.len() as f64
    };
    Ok(AsvOperatingPoint {
        threshold,
        p_miss,
        p_fa,
        p_miss_spoof,
    })
}

/// The three t-DCF constants.
#[derive(Debug, Clone, Copy)]
pub struct TdcfConstants {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl TdcfConstants {
    /// A negative C1 (very poor ASV) leaves the formula evaluable but is
    /// worth flagging to the operator.
    pub fn c1_negative(&self) -> bool {
        self.c1 < 0.0
    }
}

///   C0 = pi_tar C_miss^ASV P_miss^ASV + pi_non C_fa^ASV P_fa^ASV
///   C1 = pi_tar C_miss^SD - C0
///   C2 = C_fa^SD pi_spoof (1 - P_miss,spoof^ASV)
pub fn tdcf_constants(
    p: &TdcfParams,
    op: &AsvOperatingPoint,
) -> Result<TdcfConstants, MetricsError> {
    let c0 = p.pi_tar * p.c_miss_asv * op.p_miss + p.pi_non * p.c_fa_asv * op.p_fa;
    let c1 = p.pi_tar * p.c_miss_sd - c0;
    let c2 = p.c_fa_sd * p.pi_spoof * (1.0 - op.p_miss_spoof);
    if c2 <= 0.0 {
        return Err(MetricsError::NonpositiveC2(c2));
    }
    Ok(TdcfConstants { c0, c1, c2 })
}

/// One point of the normalized t-DCF curve.
#[derive(Debug, Clone, Copy)]
pub struct TdcfPoint {
    pub threshold: f64,
    pub value: f64,
}

pub struct MinTdcf {
    pub value: f64,
    pub threshold: f64,
    pub curve: Vec<TdcfPoint>,
}

/// Minimum of the normalized t-DCF over SD thresholds:
/// `tDCF_norm(s) = (C1/C2) P_miss^SD(s) + P_fa^SD(s)`.
///
/// Candidate thresholds are every distinct score plus sentinels on both
/// sides (accept-all and reject-all).
pub fn min_tdcf_norm(
    bonafide: &[f64],
    spoof: &[f64],
    c1: f64,
    c2: f64,
) -> Result<MinTdcf, MetricsError> {
    if bonafide.is_empty() || spoof.is_empty() {
        return Err(MetricsError::OneClassOnly(
            "t-DCF needs bona fide and spoof trials".into(),
        ));
    }
    if c2 <= 0.0 {
        return Err(MetricsError::NonpositiveC2(c2));
    }
    let ratio = c1 / c2;
    let mut bona = bonafide.to_vec();
    let mut sp = spoof.to_vec();
    bona.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sp.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut thresholds: Vec<f64> = bona.iter().chain(sp.iter()).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    // accept-all sentinel below the minimum; reject-all above the maximum
    let lo = thresholds[0] - 1.0;
    let hi = thresholds[thresholds.len() - 1] + 1.0;
    thresholds.insert(0, lo);
    thresholds.push(hi);

    let nb = bona.len() as f64;
    let ns = sp.len() as f64;
    let mut curve = Vec::with_capacity(thresholds.len());
    let mut best = TdcfPoint {
        threshold: lo,
        value: f64::INFINITY,
    };
    for &t in &thresholds {
        let p_miss = bona.partition_point(|&s| s < t) as f64 / nb;
        let p_fa = (sp.len() - sp.partition_point(|&s| s < t)) as f64 / ns;
        let value = ratio * p_miss + p_fa;
        curve.push(TdcfPoint {
            threshold: t,
            value,
        });
        if value < best.value {
            best = TdcfPoint {
                threshold: t,
                value,
            };
        }
    }
    Ok(MinTdcf {
        value: best.value,
        threshold: best.threshold,
        curve,
    })
}

/// Per-attack row of the breakdown table.
#[derive(Debug, Clone)]
pub struct AttackRow {
    pub attack_id: String,
    pub eer: f64,
    pub min_tdcf: f64,
    pub n_spoof: usize,
}

/// Pool all bona fide trials with each attack's spoof trials and evaluate
/// both metrics per attack.
pub fn per_attack_report(
    sd_scores: &ScoreSet<SdKey>,
    c1: f64,
    c2: f64,
) -> Result<Vec<AttackRow>, MetricsError> {
    let bonafide = sd_scores.bonafide_scores();
    let mut attacks: Vec<String> = Vec::new();
    for t in &sd_scores.trials {
        if t.key == SdKey::Spoof {
            let a = t
                .attack_id
                .clone()
                .ok_or_else(|| MetricsError::UnknownAttackLabel(t.trial_id.clone()))?;
            if !attacks.contains(&a) {
                attacks.push(a);
            }
        }
    }
    attacks.sort();
    let mut rows = Vec::new();
    for attack in attacks {
        let spoof: Vec<f64> = sd_scores
            .trials
            .iter()
            .filter(|t| t.key == SdKey::Spoof && t.attack_id.as_deref() == Some(attack.as_str()))
            .map(|t| t.score)
            .collect();
        let (e, _) = eer(&bonafide, &spoof)?;
        let m = min_tdcf_norm(&bonafide, &spoof, c1, c2)?;
        rows.push(AttackRow {
            attack_id: attack,
            eer: e,
            min_tdcf: m.value,
            n_spoof: spoof.len(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    // ---- brute-force oracles, deliberately O(n^2) and structured
    // differently from the implementation ----

    pub(super) fn oracle_operating_points(pos: &[f64], neg: &[f64]) -> Vec<(f64, f64, f64)> {
        let mut ts: Vec<f64> = pos.iter().chain(neg.iter()).cloned().collect();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
        ts.push(f64::INFINITY);
        let mut out = Vec::new();
        for &t in &ts {
            let frr = pos.iter().filter(|&&s| s < t).count() as f64 / pos.len() as f64;
            let far = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
            out.push((t, far, frr));
        }
        out
    }

    pub(super) fn oracle_eer(pos: &[f64], neg: &[f64]) -> f64 {
        let pts = oracle_operating_points(pos, neg);
        // min FRR per distinct FAR, scanning all points
        let mut fars: Vec<f64> = pts.iter().map(|p| p.1).collect();
        fars.sort_by(|a, b| b.partial_cmp(a).unwrap());
        fars.dedup();
        let env: Vec<(f64, f64)> = fars
            .iter()
            .map(|&f| {
                let min_frr = pts
                    .iter()
                    .filter(|p| p.1 == f)
                    .map(|p| p.2)
                    .fold(f64::INFINITY, f64::min);
                (f, min_frr)
            })
            .collect();
        for w in env.windows(2) {
            let (f1, r1) = w[0];
            let (f2, r2) = w[1];
            let d1 = r1 - f1;
            let d2 = r2 - f2;
            if d1 >= 0.0 {
                return f1.max(r1);
            }
            if d2 >= 0.0 {
                let u = d1 / (d1 - d2);
                return f1 + u * (f2 - f1);
            }
        }
        let (f, r) = *env.last().unwrap();
        f.max(r)
    }

    pub(super) fn oracle_min_tdcf(bona: &[f64], spoof: &[f64], c1: f64, c2: f64) -> f64 {
        let mut ts: Vec<f64> = bona.iter().chain(spoof.iter()).cloned().collect();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
        let lo = ts[0] - 1.0;
        let hi = ts[ts.len() - 1] + 1.0;
        ts.insert(0, lo);
        ts.push(hi);
        let mut best = f64::INFINITY;
        for &t in &ts {
            let p_miss = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
            let p_fa = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
            best = best.min(c1 / c2 * p_miss + p_fa);
        }
        best
    }

    #[test]
    fn eer_perfect_separation_is_zero() {
        let (e, thr) = eer(&[2.0, 3.0], &[0.0, 1.0]).unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(thr, 2.0);
    }

    #[test]
    fn eer_identical_distributions_is_half() {
        let (e, _) = eer(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert!((e - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eer_interleaved_quarter() {
        let (e, _) = eer(&[1.0, 3.0], &[0.0, 2.0]).unwrap();
        assert!((e - 0.25).abs() < 1e-12, "eer {e}");
        assert!((e - oracle_eer(&[1.0, 3.0], &[0.0, 2.0])).abs() < 1e-12);
    }

    #[test]
    fn eer_rejects_one_class() {
        assert!(matches!(
            eer(&[1.0], &[]),
            Err(MetricsError::OneClassOnly(_))
        ));
    }

    #[test]
    fn det_curve_shape() {
        let pos = [2.0, 3.0, 4.0];
        let neg = [0.0, 1.0];
        let pts = det_curve(&pos, &neg).unwrap();
        assert_eq!(pts.first().map(|p| (p.far, p.frr)), Some((1.0, 0.0)));
        assert_eq!(pts.last().map(|p| (p.far, p.frr)), Some((0.0, 1.0)));
        assert!(pts.len() <= pos.len() + neg.len() + 1);
        assert!(pts.iter().any(|p| p.far == 0.0 && p.frr == 0.0));
        // monotone staircase
        for w in pts.windows(2) {
            assert!(w[1].far <= w[0].far);
            assert!(w[1].frr >= w[0].frr);
        }
    }

    #[test]
    fn asv_operating_point_perfect() {
        let mut trials = Vec::new();
        for (i, &(s, k)) in [
            (3.0, AsvKey::Target),
            (4.0, AsvKey::Target),
            (0.0, AsvKey::Nontarget),
            (1.0, AsvKey::Nontarget),
            (5.0, AsvKey::Spoof),
            (6.0, AsvKey::Spoof),
        ]
        .iter()
        .enumerate()
        {
            trials.push(Trial {
                trial_id: format!("t{i}"),
                score: s,
                key: k,
                attack_id: None,
            });
        }
        let op = asv_operating_point(&ScoreSet::new(trials)).unwrap();
        assert_eq!(op.p_miss, 0.0);
        assert_eq!(op.p_fa, 0.0);
        assert_eq!(op.p_miss_spoof, 0.0);

        // spoof all below threshold
        let mut trials = Vec::new();
        for (i, &(s, k)) in [
            (3.0, AsvKey::Target),
            (4.0, AsvKey::Target),
            (0.0, AsvKey::Nontarget),
            (1.0, AsvKey::Nontarget),
            (-1.0, AsvKey::Spoof),
        ]
        .iter()
        .enumerate()
        {
            trials.push(Trial {
                trial_id: format!("t{i}"),
                score: s,
                key: k,
                attack_id: None,
            });
        }
        let op = asv_operating_point(&ScoreSet::new(trials)).unwrap();
        assert_eq!(op.p_miss_spoof, 1.0);
    }

    #[test]
    fn asv_operating_point_counting_fixture() {
        // 6 trials, threshold lands at the EER crossing of {2,5} vs {1,3}
        let trials: Vec<Trial<AsvKey>> = [
            (2.0, AsvKey::Target),
            (5.0, AsvKey::Target),
            (1.0, AsvKey::Nontarget),
            (3.0, AsvKey::Nontarget),
            (1.5, AsvKey::Spoof),
            (4.0, AsvKey::Spoof),
        ]
        .iter()
        .enumerate()
        .map(|(i, &(s, k))| Trial {
            trial_id: format!("t{i}"),
            score: s,
            key: k,
            attack_id: None,
        })
        .collect();
        let op = asv_operating_point(&ScoreSet::new(trials)).unwrap();
        // independent counting at the returned threshold
        let targets = [2.0, 5.0];
        let nontargets = [1.0, 3.0];
        let spoof = [1.5, 4.0];
        let t = op.threshold;
        assert_eq!(
            op.p_miss,
            targets.iter().filter(|&&s| s < t).count() as f64 / 2.0
        );
        assert_eq!(
            op.p_fa,
            nontargets.iter().filter(|&&s| s >= t).count() as f64 / 2.0
        );
        assert_eq!(
            op.p_miss_spoof,
            spoof.iter().filter(|&&s| s < t).count() as f64 / 2.0
        );
    }

    #[test]
    fn tdcf_constants_hand_fixtures() {
        let p = TdcfParams::default();
        // perfect ASV
        let op = AsvOperatingPoint {
            threshold: 0.0,
            p_miss: 0.0,
            p_fa: 0.0,
            p_miss_spoof: 0.0,
        };
        let c = tdcf_constants(&p, &op).unwrap();
        assert!((c.c0 - 0.0).abs() < 1e-15);
        assert!((c.c1 - 0.9405).abs() < 1e-15);
        assert!((c.c2 - 0.5).abs() < 1e-15);

        // hand substitution
        let op = AsvOperatingPoint {
            threshold: 0.0,
            p_miss: 0.1,
            p_fa: 0.1,
            p_miss_spoof: 0.2,
        };
        let c = tdcf_constants(&p, &op).unwrap();
        assert!((c.c0 - 0.10355).abs() < 1e-12, "c0 {}", c.c0);
        assert!((c.c1 - 0.83695).abs() < 1e-12, "c1 {}", c.c1);
        assert!((c.c2 - 0.4).abs() < 1e-12, "c2 {}", c.c2);

        // degenerate: all spoof rejected by the ASV
        let op = AsvOperatingPoint {
            threshold: 0.0,
            p_miss: 0.0,
            p_fa: 0.0,
            p_miss_spoof: 1.0,
        };
        assert!(matches!(
            tdcf_constants(&p, &op),
            Err(MetricsError::NonpositiveC2(_))
        ));
    }

    #[test]
    fn min_tdcf_endpoints_and_perfect_case() {
        let bona = [2.0, 3.0, 4.0];
        let spoof = [0.0, 1.0];
        let m = min_tdcf_norm(&bona, &spoof, 0.8370, 0.4).unwrap();
        assert_eq!(m.value, 0.0);
        // accept-all end of the curve = 1, reject-all end = C1/C2
        let first = m.curve.first().unwrap();
        assert!((first.value - 1.0).abs() < 1e-15);
        let last = m.curve.last().unwrap();
        assert!((last.value - 0.8370 / 0.4).abs() < 1e-12);
    }

    #[test]
    fn min_tdcf_matches_oracle_on_fixture() {
        let bona = [0.9, 2.1, 2.9, 3.3];
        let spoof = [0.5, 1.1, 2.5, 3.1];
        let m = min_tdcf_norm(&bona, &spoof, 0.8370, 0.4).unwrap();
        let o = oracle_min_tdcf(&bona, &spoof, 0.8370, 0.4);
        assert!((m.value - o).abs() < 1e-12, "{} vs {o}", m.value);
    }

    #[test]
    fn per_attack_groups() {
        let mk = |id: &str, s: f64, key: SdKey, attack: Option<&str>| Trial {
            trial_id: id.into(),
            score: s,
            key,
            attack_id: attack.map(String::from),
        };
        // one attack equals pooled metrics
        let set = ScoreSet::new(vec![
            mk("b1", 3.0, SdKey::Bonafide, None),
            mk("b2", 4.0, SdKey::Bonafide, None),
            mk("s1", 0.0, SdKey::Spoof, Some("A01")),
            mk("s2", 1.0, SdKey::Spoof, Some("A01")),
        ]);
        let rows = per_attack_report(&set, 0.8370, 0.4).unwrap();
        assert_eq!(rows.len(), 1);
        let pooled = eer(&[3.0, 4.0], &[0.0, 1.0]).unwrap().0;
        assert_eq!(rows[0].eer, pooled);

        // two attacks with identical score patterns get identical EERs
        let set = ScoreSet::new(vec![
            mk("b1", 3.0, SdKey::Bonafide, None),
            mk("b2", 4.0, SdKey::Bonafide, None),
            mk("s1", 0.0, SdKey::Spoof, Some("A01")),
            mk("s2", 1.0, SdKey::Spoof, Some("A01")),
            mk("s3", 0.0, SdKey::Spoof, Some("A02")),
            mk("s4", 1.0, SdKey::Spoof, Some("A02")),
        ]);
        let rows = per_attack_report(&set, 0.8370, 0.4).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].eer, rows[1].eer);
        assert_eq!(rows[0].min_tdcf, rows[1].min_tdcf);

        // spoof without attack label is rejected
        let set = ScoreSet::new(vec![
            mk("b1", 3.0, SdKey::Bonafide, None),
            mk("s1", 0.0, SdKey::Spoof, None),
        ]);
        assert!(matches!(
            per_attack_report(&set, 0.8370, 0.4),
            Err(MetricsError::UnknownAttackLabel(_))
        ));
    }

    #[test]
    fn three_attack_fixture_matches_groupwise_oracle() {
        let mk = |id: String, s: f64, key: SdKey, attack: Option<&str>| Trial {
            trial_id: id,
            score: s,
            key,
            attack_id: attack.map(String::from),
        };
        let mut trials = Vec::new();
        let bona: Vec<f64> = (0..8).map(|i| 1.0 + 0.37 * i as f64).collect();
        for (i, &b) in bona.iter().enumerate() {
            trials.push(mk(format!("b{i}"), b, SdKey::Bonafide, None));
        }
        let attacks = ["lp", "clip", "echo"];
        let mut spoofs: Vec<Vec<f64>> = vec![Vec::new(); 3];
        for (i, &a) in attacks.iter().enumerate() {
            for j in 0..5 {
                let s = -0.5 + 0.45 * j as f64 + 0.21 * i as f64;
                spoofs[i].push(s);
                trials.push(mk(format!("s{i}{j}"), s, SdKey::Spoof, Some(a)));
            }
        }
        let rows = per_attack_report(&ScoreSet::new(trials), 0.9, 0.45).unwrap();
        assert_eq!(rows.len(), 3);
        let sorted = {
            let mut a = attacks.to_vec();
            a.sort();
            a
        };
        for row in &rows {
            let idx = attacks.iter().position(|&a| a == row.attack_id).unwrap();
            let e = oracle_eer(&bona, &spoofs[idx]);
            let m = oracle_min_tdcf(&bona, &spoofs[idx], 0.9, 0.45);
            assert!((row.eer - e).abs() < 1e-12);
            assert!((row.min_tdcf - m).abs() < 1e-12);
        }
        assert_eq!(
            rows.iter().map(|r| r.attack_id.as_str()).collect::<Vec<_>>(),
            sorted
        );
    }

    #[test]
    fn random_sets_match_oracles_exactly() {
        // medium-size randomized agreement check; the acceptance suite runs
        // the full 50-seed version
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..5 {
            let pos: Vec<f64> = (0..120).map(|_| next() * 4.0 - 1.0).collect();
            let neg: Vec<f64> = (0..150).map(|_| next() * 4.0 - 2.0).collect();
            let (e, _) = eer(&pos, &neg).unwrap();
            assert!((e - oracle_eer(&pos, &neg)).abs() <= 1e-12);
            let m = min_tdcf_norm(&pos, &neg, 0.8370, 0.4).unwrap();
            assert!((m.value - oracle_min_tdcf(&pos, &neg, 0.8370, 0.4)).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_invariant_under_increasing_transforms() {
        let pos = [0.2, 1.4, 0.9, 2.2, 1.1];
        let neg = [0.1, 0.8, -0.3, 1.0];
        let (e0, _) = eer(&pos, &neg).unwrap();
        let m0 = min_tdcf_norm(&pos, &neg, 0.9405, 0.5).unwrap().value;
        let transforms: [Box<dyn Fn(f64) -> f64>; 2] =
            [Box::new(|s| 2.0 * s + 3.0), Box::new(|s| (s / 10.0).tanh())];
        for f in &transforms {
            let tp: Vec<f64> = pos.iter().map(|&s| f(s)).collect();
            let tn: Vec<f64> = neg.iter().map(|&s| f(s)).collect();
            let (e, _) = eer(&tp, &tn).unwrap();
            let m = min_tdcf_norm(&tp, &tn, 0.9405, 0.5).unwrap().value;
            assert!((e - e0).abs() <= 1e-9);
            assert!((m - m0).abs() <= 1e-9);
        }
    }
}
