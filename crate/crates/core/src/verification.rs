//! Open-set verification engine: enrollment, trial construction, cosine
//! scoring, equal error rates and pairwise significance testing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Pooled similarity scores for one system.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

impl ScoreSet {
    pub fn n_target(&self) -> usize {
        self.target.len()
    }

    pub fn n_nontarget(&self) -> usize {
        self.nontarget.len()
    }

    fn validate(&self) -> Result<()> {
        if self.target.is_empty() || self.nontarget.is_empty() {
            return Err(Error::protocol(
                "EER needs at least one target and one non-target score",
            ));
        }
        if self
            .target
            .iter()
            .chain(self.nontarget.iter())
            .any(|s| !s.is_finite())
        {
            return Err(Error::numeric("non-finite score in score set"));
        }
        Ok(())
    }
}

/// Equal error rate computed two ways. `rocch` is the headline number
/// (convex-hull convention); `interpolated` crosses the stepwise DET
/// curve linearly and is kept for oracle comparisons.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EerReport {
    pub rocch: f64,
    pub interpolated: f64,
    /// Score threshold at the interpolated crossing.
    pub threshold: f64,
}

/// Mean of the enrollment embeddings. `degenerate` is set when the mean
/// collapses to (near) zero norm, in which case cosine scoring against it
/// is undefined and callers should drop the instrument.
#[derive(Debug, Clone)]
pub struct EnrolledModel {
    pub embedding: Vec<f64>,
    pub degenerate: bool,
}

pub fn enroll(embeddings: &[Vec<f64>]) -> Result<EnrolledModel> {
    if embeddings.is_empty() {
        return Err(Error::input("enrollment needs at least one embedding"));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::input("enrollment embeddings differ in dimension"));
    }
    let mut mean = vec![0.0; dim];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    let n = embeddings.len() as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(EnrolledModel {
        embedding: mean,
        degenerate: norm < 1e-12,
    })
}

/// Cosine similarity (higher = more likely the same instrument).
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input("cosine inputs differ in dimension"));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("cosine of zero-norm vector is undefined"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Equal error rate
// ---------------------------------------------------------------------------

/// Operating points of the stepwise DET curve, swept over candidate
/// thresholds (accept iff score >= t). `miss` is nondecreasing and `fa`
/// nonincreasing in t, so `miss - fa` crosses zero exactly once.
fn sweep_points(scores: &ScoreSet) -> Vec<(f64, f64, f64)> {
    let mut all: Vec<f64> = scores
        .target
        .iter()
        .chain(scores.nontarget.iter())
        .copied()
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();

    let mut tar = scores.target.clone();
    let mut non = scores.nontarget.clone();
    tar.sort_by(|a, b| a.partial_cmp(b).unwrap());
    non.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let nt = tar.len() as f64;
    let nn = non.len() as f64;

    // Point at t = -inf: everything accepted.
    let mut points = vec![(f64::NEG_INFINITY, 0.0, 1.0)];
    let mut ti = 0usize; // targets strictly below t
    let mut ni = 0usize; // nontargets strictly below t
    for &t in &all {
        while ti < tar.len() && tar[ti] < t {
            ti += 1;
        }
        while ni < non.len() && non[ni] < t {
            ni += 1;
        }
        points.push((t, ti as f64 / nt, (non.len() - ni) as f64 / nn));
    }
    // Sentinel above the maximum score: everything rejected.
    points.push((all[all.len() - 1] + 1.0, 1.0, 0.0));
    points
}

/// Linear interpolation of the (fa, miss) segment that crosses fa == miss.
fn interp_crossing(points: &[(f64, f64, f64)]) -> (f64, f64) {
    let mut hi = points.len() - 1;
    for (i, &(_, miss, fa)) in points.iter().enumerate() {
        if miss - fa >= 0.0 {
            hi = i;
            break;
        }
    }
    let (t_hi, miss_hi, fa_hi) = points[hi];
    if (miss_hi - fa_hi).abs() == 0.0 {
        return (miss_hi, t_hi);
    }
    let (t_lo, miss_lo, fa_lo) = points[hi - 1];
    let d_lo = fa_lo - miss_lo; // > 0
    let d_hi = miss_hi - fa_hi; // > 0
    let alpha = d_lo / (d_lo + d_hi);
    let eer = (1.0 - alpha) * miss_lo + alpha * miss_hi;
    let thr = if t_lo.is_finite() {
        (1.0 - alpha) * t_lo + alpha * t_hi
    } else {
        t_hi
    };
    (eer, thr)
}

/// Pool-adjacent-violators fit of a nondecreasing sequence to `y`.
/// Returns (block mean, block width) pairs.
fn pav(y: &[f64]) -> Vec<(f64, usize)> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (m2, w2) = blocks[blocks.len() - 1];
            let (m1, w1) = blocks[blocks.len() - 2];
            if m1 >= m2 {
                blocks.pop();
                blocks.pop();
                let w = w1 + w2;
                blocks.push(((m1 * w1 as f64 + m2 * w2 as f64) / w as f64, w));
            } else {
                break;
            }
        }
    }
    blocks
}

/// Vertices of the ROC convex hull in (pmiss, pfa) coordinates,
/// from (0, 1) to (1, 0).
fn rocch_vertices(scores: &ScoreSet) -> Vec<(f64, f64)> {
    let nt = scores.target.len();
    let nn = scores.nontarget.len();
    // Targets listed first so equal scores pool deterministically.
    let mut joint: Vec<(f64, bool)> = scores
        .target
        .iter()
        .map(|&s| (s, true))
        .chain(scores.nontarget.iter().map(|&s| (s, false)))
        .collect();
    joint.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let ideal: Vec<f64> = joint
        .iter()
        .map(|&(_, is_tar)| if is_tar { 1.0 } else { 0.0 })
        .collect();
    let blocks = pav(&ideal);

    // Prefix count of targets among the `left` lowest scores.
    let mut cum_tar = vec![0usize; joint.len() + 1];
    for (i, &(_, is_tar)) in joint.iter().enumerate() {
        cum_tar[i + 1] = cum_tar[i] + usize::from(is_tar);
    }

    let mut vertices = Vec::with_capacity(blocks.len() + 1);
    let mut left = 0usize;
    for i in 0..=blocks.len() {
        let miss = cum_tar[left] as f64 / nt as f64;
        let fa = ((joint.len() - left) - (nt - cum_tar[left])) as f64 / nn as f64;
        vertices.push((miss, fa));
        if i < blocks.len() {
            left += blocks[i].1;
        }
    }
    vertices
}

/// EER at the diagonal crossing of the convex hull.
fn rocch_eer(scores: &ScoreSet) -> f64 {
    let verts = rocch_vertices(scores);
    let mut hi = verts.len() - 1;
    for (i, &(miss, fa)) in verts.iter().enumerate() {
        if miss - fa >= 0.0 {
            hi = i;
            break;
        }
    }
    let (miss_hi, fa_hi) = verts[hi];
    if (miss_hi - fa_hi).abs() == 0.0 {
        return miss_hi;
    }
    let (miss_lo, fa_lo) = verts[hi - 1];
    let d_lo = fa_lo - miss_lo;
    let d_hi = miss_hi - fa_hi;
    let s = d_lo / (d_lo + d_hi);
    (1.0 - s) * miss_lo + s * miss_hi
}

/// Equal error rate of a score set, by both conventions.
pub fn compute_eer(scores: &ScoreSet) -> Result<EerReport> {
    scores.validate()?;
    let points = sweep_points(scores);
    let (interpolated, threshold) = interp_crossing(&points);
    let rocch = rocch_eer(scores);
    Ok(EerReport {
        rocch,
        interpolated,
        threshold,
    })
}

// ---------------------------------------------------------------------------
// Significance testing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ZTest {
    pub z: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Pairwise z statistic for two EERs measured on the same trial counts.
pub fn z_test(eer_a: f64, eer_b: f64, n_target: usize, n_nontarget: usize) -> Result<ZTest> {
    if !(0.0..=1.0).contains(&eer_a) || !(0.0..=1.0).contains(&eer_b) {
        return Err(Error::parameter("EER outside [0, 1]"));
    }
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::parameter("trial counts must be positive"));
    }
    let var = eer_a * (1.0 - eer_a) + eer_b * (1.0 - eer_b);
    if var == 0.0 {
        return Err(Error::numeric(
            "z undefined: both EERs are exactly 0 or 1 (zero variance)",
        ));
    }
    let nt = n_target as f64;
    let nn = n_nontarget as f64;
    let z = 2.0 * (eer_a - eer_b).abs() / (var * (nt + nn) / (nt * nn)).sqrt();
    // p = 2 (1 - Phi(z)) via the complementary error function.
    let p = erfc(z / std::f64::consts::SQRT_2);
    Ok(ZTest { z, p })
}

/// Two-sided critical value Z_{alpha/2}, derived from alpha rather than a
/// lookup table.
pub fn z_critical(alpha: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(Error::parameter("alpha must be in (0, 1)"));
    }
    let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    Ok(normal.inverse_cdf(1.0 - alpha / 2.0))
}

/// Holm-Bonferroni step-down correction. Returns per-input rejection
/// decisions at family-wise level `alpha`.
pub fn holm_bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::parameter("p-values must lie in [0, 1]"));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].partial_cmp(&p_values[b]).unwrap());
    let mut reject = vec![false; m];
    for (i, &idx) in order.iter().enumerate() {
        let level = alpha / (m - i) as f64;
        if p_values[idx] <= level {
            reject[idx] = true;
        } else {
            break; // first failure stops all further rejections
        }
    }
    Ok(reject)
}

// ---------------------------------------------------------------------------
// Trial construction
// ---------------------------------------------------------------------------

/// One evaluation sample: id plus its instrument label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub sample_id: String,
    pub instrument: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstrumentTrials {
    pub instrument: String,
    pub enroll_ids: Vec<String>,
    pub target_ids: Vec<String>,
    pub nontarget_ids: Vec<String>,
}

/// Enrollment/trial lists for every usable test instrument.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialSet {
    pub seed: u64,
    pub per_instrument: Vec<InstrumentTrials>,
    /// Instruments dropped for having fewer than `MIN_SAMPLES` samples.
    pub excluded: Vec<String>,
}

pub const ENROLL_PER_INSTRUMENT: usize = 5;
pub const TRIALS_PER_INSTRUMENT: usize = 20;
const MIN_SAMPLES: usize = 6;

/// Build the per-instrument 5/20/20 enrollment and trial lists from the
/// test-split records. Deterministic under `seed`. Instruments with too few
/// samples are excluded; small instruments get proportional counts.
pub fn build_trials(records: &[TrialRecord], seed: u64) -> Result<TrialSet> {
    use std::collections::BTreeMap;

    let mut by_instrument: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        by_instrument
            .entry(r.instrument.as_str())
            .or_default()
            .push(r.sample_id.as_str());
    }
    if by_instrument.len() < 2 {
        return Err(Error::protocol(
            "trial construction needs at least two test instruments",
        ));
    }
    for ids in by_instrument.values_mut() {
        ids.sort_unstable();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut excluded = Vec::new();
    let mut plans: Vec<(String, Vec<String>, Vec<String>)> = Vec::new();

    for (instrument, ids) in &by_instrument {
        if ids.len() < MIN_SAMPLES {
            log::warn!(
                "excluding instrument '{instrument}' from trials: only {} samples",
                ids.len()
            );
            excluded.push(instrument.to_string());
            continue;
        }
        let mut ids: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
        ids.shuffle(&mut rng);
        let (n_enroll, n_target) =
            if ids.len() >= ENROLL_PER_INSTRUMENT + TRIALS_PER_INSTRUMENT {
                (ENROLL_PER_INSTRUMENT, TRIALS_PER_INSTRUMENT)
            } else {
                let n_e = ((ids.len() as f64 * 0.2).round() as usize).max(1);
                let n_t = (ids.len() - n_e).min(TRIALS_PER_INSTRUMENT);
                log::warn!(
                    "instrument '{instrument}' has {} samples; using proportional {}/{} enrollment/trials",
                    ids.len(), n_e, n_t
                );
                (n_e, n_t)
            };
        let enroll: Vec<String> = ids[..n_enroll].to_vec();
        let target: Vec<String> = ids[n_enroll..n_enroll + n_target].to_vec();
        plans.push((instrument.to_string(), enroll, target));
    }
    if plans.len() < 2 {
        return Err(Error::protocol(
            "fewer than two instruments have enough samples for trials",
        ));
    }

    // Enrollment ids never appear as trials, for any instrument.
    let enrolled: std::collections::BTreeSet<&str> = plans
        .iter()
        .flat_map(|(_, e, _)| e.iter().map(|s| s.as_str()))
        .collect();

    let mut per_instrument = Vec::with_capacity(plans.len());
    for (instrument, enroll, target) in &plans {
        let mut pool: Vec<String> = plans
            .iter()
            .filter(|(other, _, _)| other != instrument)
            .flat_map(|(_, _, t)| t.iter().cloned())
            .filter(|id| !enrolled.contains(id.as_str()))
            .collect();
        pool.sort_unstable();
        pool.shuffle(&mut rng);
        let want = TRIALS_PER_INSTRUMENT.min(target.len());
        if pool.len() < want {
            log::warn!(
                "instrument '{instrument}': only {} non-target candidates available",
                pool.len()
            );
        }
        pool.truncate(want.min(pool.len()));
        per_instrument.push(InstrumentTrials {
            instrument: instrument.clone(),
            enroll_ids: enroll.clone(),
            target_ids: target.clone(),
            nontarget_ids: pool,
        });
    }

    Ok(TrialSet {
        seed,
        per_instrument,
        excluded,
    })
}

/// One scored trial row, as written to score CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub trial_id: String,
    pub is_target: bool,
    pub score: f64,
}

/// Score every trial against the per-instrument enrollment means using a
/// caller-supplied embedding lookup. Trials whose embedding is missing or
/// degenerate are dropped with a warning.
pub fn score_trials<F>(trials: &TrialSet, mut embed: F) -> Result<(ScoreSet, Vec<ScoredTrial>)>
where
    F: FnMut(&str) -> Option<Vec<f64>>,
{
    let mut set = ScoreSet::default();
    let mut rows = Vec::new();
    for inst in &trials.per_instrument {
        let enrollment: Vec<Vec<f64>> = inst
            .enroll_ids
            .iter()
            .filter_map(|id| embed(id))
            .collect();
        if enrollment.len() < inst.enroll_ids.len() {
            return Err(Error::data(format!(
                "missing enrollment embeddings for instrument '{}'",
                inst.instrument
            )));
        }
        let model = enroll(&enrollment)?;
        if model.degenerate {
            log::warn!(
                "instrument '{}' has a degenerate (zero-mean) enrollment; skipping",
                inst.instrument
            );
            continue;
        }
        for (ids, is_target) in [(&inst.target_ids, true), (&inst.nontarget_ids, false)] {
            for id in ids {
                let emb = embed(id).ok_or_else(|| {
                    Error::data(format!("missing embedding for trial sample '{id}'"))
                })?;
                match cosine_score(&model.embedding, &emb) {
                    Ok(score) => {
                        if is_target {
                            set.target.push(score);
                        } else {
                            set.nontarget.push(score);
                        }
                        rows.push(ScoredTrial {
                            trial_id: format!("{}:{}", inst.instrument, id),
                            is_target,
                            score,
                        });
                    }
                    Err(e) => log::warn!("dropping trial '{}:{}': {e}", inst.instrument, id),
                }
            }
        }
    }
    Ok((set, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enroll_mean_and_degenerate() {
        let m = enroll(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(m.embedding, vec![0.5, 0.5]);
        assert!(!m.degenerate);

        let five = vec![vec![1.0, 2.0]; 5];
        let m = enroll(&five).unwrap();
        assert_eq!(m.embedding, vec![1.0, 2.0]);

        let m = enroll(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert!(m.degenerate);

        assert!(enroll(&[]).is_err());
    }

    #[test]
    fn cosine_basics() {
        let a = vec![1.0, 2.0, 3.0];
        assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_score(&[1.0, 0.0], &[0.0, 2.0]).unwrap()).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|v| 3.0 * v).collect();
        let b = vec![0.3, -0.2, 0.9];
        let s1 = cosine_score(&a, &b).unwrap();
        let s2 = cosine_score(&scaled, &b).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn eer_perfect_separation_is_zero() {
        let scores = ScoreSet {
            target: vec![0.9, 0.8, 0.7],
            nontarget: vec![0.1, 0.2, 0.3],
        };
        let r = compute_eer(&scores).unwrap();
        assert_eq!(r.interpolated, 0.0);
        assert_eq!(r.rocch, 0.0);
    }

    #[test]
    fn eer_identical_distributions_is_half() {
        let scores = ScoreSet {
            target: vec![0.1, 0.4, 0.7, 0.9],
            nontarget: vec![0.1, 0.4, 0.7, 0.9],
        };
        let r = compute_eer(&scores).unwrap();
        assert!((r.interpolated - 0.5).abs() < 1e-12);
        assert!((r.rocch - 0.5).abs() < 1e-12);
    }

    #[test]
    fn z_test_matches_hand_value() {
        let zt = z_test(0.05, 0.03, 1000, 1000).unwrap();
        assert!((zt.z - 3.2316).abs() < 1e-3, "z = {}", zt.z);
        let same = z_test(0.1, 0.1, 500, 700).unwrap();
        assert_eq!(same.z, 0.0);
        assert!((same.p - 1.0).abs() < 1e-12);
        // symmetric in (a, b)
        let ab = z_test(0.07, 0.02, 300, 400).unwrap();
        let ba = z_test(0.02, 0.07, 300, 400).unwrap();
        assert_eq!(ab.z, ba.z);
        // undefined denominator
        assert!(z_test(0.0, 1.0, 10, 10).is_err());
    }

    #[test]
    fn holm_rejects_only_first_in_spec_example() {
        let reject = holm_bonferroni(&[0.01, 0.03, 0.04], 0.05).unwrap();
        assert_eq!(reject, vec![true, false, false]);

        let none = holm_bonferroni(&[1.0, 1.0, 1.0], 0.05).unwrap();
        assert!(none.iter().all(|r| !r));

        let single = holm_bonferroni(&[0.04], 0.05).unwrap();
        assert_eq!(single, vec![true]);
    }

    #[test]
    fn z_critical_matches_known_value() {
        let z = z_critical(0.05).unwrap();
        assert!((z - 1.959964).abs() < 1e-5, "z = {z}");
    }

    #[test]
    fn trials_are_deterministic_and_disjoint() {
        let mut records = Vec::new();
        for inst in 0..4 {
            for s in 0..30 {
                records.push(TrialRecord {
                    sample_id: format!("i{inst}_s{s}"),
                    instrument: format!("inst{inst}"),
                });
            }
        }
        let a = build_trials(&records, 7).unwrap();
        let b = build_trials(&records, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

        let enrolled: std::collections::HashSet<_> = a
            .per_instrument
            .iter()
            .flat_map(|t| t.enroll_ids.iter())
            .collect();
        for t in &a.per_instrument {
            assert_eq!(t.enroll_ids.len(), 5);
            assert_eq!(t.target_ids.len(), 20);
            assert_eq!(t.nontarget_ids.len(), 20);
            for id in t.target_ids.iter().chain(t.nontarget_ids.iter()) {
                assert!(!enrolled.contains(id), "enrollment id used as trial: {id}");
            }
        }
    }

    #[test]
    fn small_instruments_are_excluded() {
        let mut records = Vec::new();
        for s in 0..30 {
            records.push(TrialRecord {
                sample_id: format!("a{s}"),
                instrument: "a".into(),
            });
            records.push(TrialRecord {
                sample_id: format!("b{s}"),
                instrument: "b".into(),
            });
        }
        for s in 0..3 {
            records.push(TrialRecord {
                sample_id: format!("tiny{s}"),
                instrument: "tiny".into(),
            });
        }
        let t = build_trials(&records, 1).unwrap();
        assert_eq!(t.excluded, vec!["tiny".to_string()]);
        assert_eq!(t.per_instrument.len(), 2);
    }
}
