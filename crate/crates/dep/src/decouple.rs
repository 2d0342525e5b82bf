//! Visual evidence decoupling: attention statistics over the probe variants,
//! confidence-bound region scores, binary masks, region ablation, and
//! hidden-state calibration.
//!
//! The step-level story: patches whose attention is high and stable across
//! perturbations are evidence; patches with low mean attention but high
//! variance are suspicious. Evidence regions are re-enforced in the hidden
//! state, suspicious regions damped, each via the sensitivity of the hidden
//! state to blur-ablating that region.

use serde::{Deserialize, Serialize};

use crate::core::{AttentionMap, HiddenVector, ImageGrid};
use crate::error::{DepError, Result};

/// Elementwise statistics of the per-variant attention maps.
///
/// `variance` is the population variance (divide by M). `norm_mean` and
/// `norm_variance` are min-max normalized into [0, 1]; a constant input
/// normalizes to all zeros. `std` is the square root of `norm_variance`.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct AttentionMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub norm_mean: Vec<f64>,
    pub norm_variance: Vec<f64>,
    pub std: Vec<f64>,
}

impl AttentionMoments {
    pub fn patch_count(&self) -> usize {
        self.mean.len()
    }
}

/// Single-pass (Welford) moment accumulation over M maps. The independent
/// two-pass route lives with the test oracles; the two agree within 1e-12.
pub fn attention_moments(maps: &[AttentionMap]) -> Result<AttentionMoments> {
    let Some(first) = maps.first() else {
        return Err(DepError::invalid("moments", "no attention maps"));
    };
    let n = first.len();
    if let Some(bad) = maps.iter().find(|m| m.len() != n) {
        return Err(DepError::invalid(
            "moments",
            format!("map length {} differs from {n}", bad.len()),
        ));
    }
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for (k, map) in maps.iter().enumerate() {
        let count = (k + 1) as f64;
        for (i, x) in map.values().iter().enumerate() {
            let d_pre = x - mean[i];
            mean[i] += d_pre / count;
            m2[i] += d_pre * (x - mean[i]);
        }
    }
    let m = maps.len() as f64;
    // Welford keeps m2 non-negative up to rounding; the clamp pins the
    // invariant exactly.
    let variance: Vec<f64> = m2.iter().map(|v| (v / m).max(0.0)).collect();
    let norm_mean = min_max_normalize(&mean);
    let norm_variance = min_max_normalize(&variance);
    let std = norm_variance.iter().map(|v| v.sqrt()).collect();
    Ok(AttentionMoments {
        mean,
        variance,
        norm_mean,
        norm_variance,
        std,
    })
}

/// Min-max map onto [0, 1]; a constant vector maps to all zeros so flat
/// statistics never produce a mask.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Hoeffding-style radius for a mean of M values bounded in [0, 1] at
/// confidence level 1 − delta.
pub fn confidence_coeff(m: usize, delta: f64) -> Result<f64> {
    if m < 1 {
        return Err(DepError::invalid("confidence", "m must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DepError::invalid(
            "confidence",
            format!("delta {delta} outside (0, 1)"),
        ));
    }
    Ok(((1.0 / delta).ln() / (2.0 * m as f64)).sqrt())
}

/// The three radii used by the region scores, together with the inputs that
/// produced them.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct ConfidenceCoefficients {
    pub lambda_e: f64,
    pub lambda_a: f64,
    pub lambda_s: f64,
    pub m: usize,
    pub delta_e: f64,
    pub delta_a: f64,
    pub delta_s: f64,
}

impl ConfidenceCoefficients {
    pub fn from_levels(m: usize, delta_e: f64, delta_a: f64, delta_s: f64) -> Result<Self> {
        Ok(ConfidenceCoefficients {
            lambda_e: confidence_coeff(m, delta_e)?,
            lambda_a: confidence_coeff(m, delta_a)?,
            lambda_s: confidence_coeff(m, delta_s)?,
            m,
            delta_e,
            delta_a,
            delta_s,
        })
    }
}

/// Lower-confidence-bound evidence score: high when attention is high even
/// after discounting its instability.
pub fn evidence_score(moments: &AttentionMoments, lambda_e: f64) -> Vec<f64> {
    moments
        .norm_mean
        .iter()
        .zip(&moments.std)
        .map(|(a, s)| a - lambda_e * s)
        .collect()
}

/// Upper-confidence-bound instability score: high where attention is low in
/// the mean but volatile across variants.
pub fn suspicious_score(moments: &AttentionMoments, lambda_a: f64, lambda_s: f64) -> Vec<f64> {
    moments
        .norm_mean
        .iter()
        .zip(&moments.std)
        .map(|(a, s)| ((1.0 - a) - lambda_a) * (s + lambda_s))
        .collect()
}

/// Both region scores over patch indices.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct RegionScores {
    pub evidence: Vec<f64>,
    pub suspicious: Vec<f64>,
}

pub fn region_scores(moments: &AttentionMoments, coeff: &ConfidenceCoefficients) -> RegionScores {
    RegionScores {
        evidence: evidence_score(moments, coeff.lambda_e),
        suspicious: suspicious_score(moments, coeff.lambda_a, coeff.lambda_s),
    }
}

/// Top-quantile fractions for the two masks.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct MaskConfig {
    pub evidence_quantile: f64,
    pub suspicious_quantile: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            evidence_quantile: 0.20,
            suspicious_quantile: 0.10,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        for q in [self.evidence_quantile, self.suspicious_quantile] {
            if !q.is_finite() || !(0.0..=1.0).contains(&q) {
                return Err(DepError::invalid(
                    "mask config",
                    format!("quantile {q} outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

/// Disjoint binary masks over patch indices; evidence wins overlaps.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct MaskPair {
    evidence: Vec<bool>,
    suspicious: Vec<bool>,
}

impl MaskPair {
    pub fn new(evidence: Vec<bool>, suspicious: Vec<bool>) -> Result<Self> {
        if evidence.len() != suspicious.len() {
            return Err(DepError::invalid(
                "mask pair",
                format!("lengths {} and {} differ", evidence.len(), suspicious.len()),
            ));
        }
        if evidence.iter().zip(&suspicious).any(|(e, s)| *e && *s) {
            return Err(DepError::invalid("mask pair", "masks overlap"));
        }
        Ok(MaskPair {
            evidence,
            suspicious,
        })
    }

    pub fn evidence(&self) -> &[bool] {
        &self.evidence
    }

    pub fn suspicious(&self) -> &[bool] {
        &self.suspicious
    }

    pub fn evidence_empty(&self) -> bool {
        !self.evidence.iter().any(|b| *b)
    }

    pub fn suspicious_empty(&self) -> bool {
        !self.suspicious.iter().any(|b| *b)
    }

    pub fn evidence_patches(&self) -> Vec<usize> {
        indices_of(&self.evidence)
    }

    pub fn suspicious_patches(&self) -> Vec<usize> {
        indices_of(&self.suspicious)
    }
}

fn indices_of(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, b)| **b)
        .map(|(i, _)| i)
        .collect()
}

/// Marks the top `floor(q · n)` scores (score descending, ties to the lowest
/// index). A constant score vector yields an empty mask: flat scores carry
/// no region signal.
fn top_quantile_mask(scores: &[f64], quantile: f64) -> Vec<bool> {
    let n = scores.len();
    let mut mask = vec![false; n];
    if n == 0 {
        return mask;
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return mask;
    }
    let k = (quantile * n as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    for i in order.into_iter().take(k.min(n)) {
        mask[i] = true;
    }
    mask
}

/// Builds the two masks from the region scores; overlapping patches stay in
/// the evidence mask only.
pub fn binarize_masks(scores: &RegionScores, cfg: &MaskConfig) -> Result<MaskPair> {
    cfg.validate()?;
    if scores.evidence.len() != scores.suspicious.len() {
        return Err(DepError::invalid(
            "masks",
            format!(
                "score lengths {} and {} differ",
                scores.evidence.len(),
                scores.suspicious.len()
            ),
        ));
    }
    let evidence = top_quantile_mask(&scores.evidence, cfg.evidence_quantile);
    let mut suspicious = top_quantile_mask(&scores.suspicious, cfg.suspicious_quantile);
    for (s, e) in suspicious.iter_mut().zip(&evidence) {
        if *e {
            *s = false;
        }
    }
    MaskPair::new(evidence, suspicious)
}

/// Truncated discrete Gaussian, radius ⌈3σ⌉, weights normalized to sum 1.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= sum;
    }
    kernel
}

/// Symmetric half-sample reflection: ..., 1, 0 | 0, 1, ..., n-1 | n-1, n-2, ...
fn reflect(mut idx: i64, n: i64) -> usize {
    loop {
        if idx < 0 {
            idx = -idx - 1;
        } else if idx >= n {
            idx = 2 * n - 1 - idx;
        } else {
            return idx as usize;
        }
    }
}

/// Separable Gaussian blur of one H×W plane, reflected boundary.
fn blur_plane(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, weight) in kernel.iter().enumerate() {
                let jj = reflect(j as i64 + t as i64 - radius, w as i64);
                acc += weight * plane[i * w + jj];
            }
            rows[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, weight) in kernel.iter().enumerate() {
                let ii = reflect(i as i64 + t as i64 - radius, h as i64);
                acc += weight * rows[ii * w + j];
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// Replaces masked patches with their Gaussian-blurred counterparts. The
/// blur is taken of the whole original grid per feature channel; unmasked
/// patches are returned bit-identical to the input.
pub fn ablate_region(img: &ImageGrid, mask: &[bool], sigma_blur: f64) -> Result<ImageGrid> {
    if mask.len() != img.patch_count() {
        return Err(DepError::invalid(
            "ablation",
            format!(
                "mask length {} does not match {} patches",
                mask.len(),
                img.patch_count()
            ),
        ));
    }
    if !sigma_blur.is_finite() || sigma_blur <= 0.0 {
        return Err(DepError::invalid(
            "ablation",
            format!("sigma {sigma_blur} must be positive"),
        ));
    }
    let (h, w, dim) = (img.height(), img.width(), img.dim());
    let kernel = gaussian_kernel(sigma_blur);
    let mut features = img.features().to_vec();
    for c in 0..dim {
        let plane: Vec<f64> = (0..h * w).map(|p| img.features()[p * dim + c]).collect();
        let blurred = blur_plane(&plane, h, w, &kernel);
        for (p, masked) in mask.iter().enumerate() {
            if *masked {
                features[p * dim + c] = blurred[p];
            }
        }
    }
    img.with_features(features)
}

/// Hidden-state shifts caused by ablating each region.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SensitivityPair {
    pub evidence: HiddenVector,
    pub suspicious: HiddenVector,
}

impl SensitivityPair {
    /// The all-zero pair for dimension `d`; what an empty mask contributes.
    pub fn zeros(d: usize) -> Self {
        let z = HiddenVector::new(vec![0.0; d]).expect("zero vector is finite and non-empty");
        SensitivityPair {
            evidence: z.clone(),
            suspicious: z,
        }
    }
}

/// Differences original-minus-ablated for the two regions.
pub fn sensitivity_vectors(
    h_orig: &HiddenVector,
    h_no_evidence: &HiddenVector,
    h_no_suspicious: &HiddenVector,
) -> Result<SensitivityPair> {
    if h_no_evidence.len() != h_orig.len() || h_no_suspicious.len() != h_orig.len() {
        return Err(DepError::invalid(
            "sensitivity",
            format!(
                "dimensions {}, {}, {} differ",
                h_orig.len(),
                h_no_evidence.len(),
                h_no_suspicious.len()
            ),
        ));
    }
    let diff = |a: &HiddenVector, b: &HiddenVector| {
        HiddenVector::new(
            a.values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| x - y)
                .collect(),
        )
        .expect("difference of finite vectors is finite")
    };
    Ok(SensitivityPair {
        evidence: diff(h_orig, h_no_evidence),
        suspicious: diff(h_orig, h_no_suspicious),
    })
}

/// Contrastive fusion: h★ = h + α·δ_e − γ·δ_s. Panics on mismatched
/// dimensions, which cannot arise from [`sensitivity_vectors`] output.
pub fn calibrate_hidden(
    h: &HiddenVector,
    sens: &SensitivityPair,
    alpha: f64,
    gamma: f64,
) -> HiddenVector {
    assert_eq!(h.len(), sens.evidence.len(), "sensitivity dimension mismatch");
    assert_eq!(h.len(), sens.suspicious.len(), "sensitivity dimension mismatch");
    HiddenVector::new(
        h.values()
            .iter()
            .zip(sens.evidence.values())
            .zip(sens.suspicious.values())
            .map(|((h, e), s)| h + alpha * e - gamma * s)
            .collect(),
    )
    .expect("finite combination of finite vectors")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(values: Vec<f64>) -> AttentionMap {
        AttentionMap::new(values).unwrap()
    }

    fn hidden(values: Vec<f64>) -> HiddenVector {
        HiddenVector::new(values).unwrap()
    }

    #[test]
    fn moments_match_frozen_fixture() {
        let maps = vec![
            map(vec![0.05, 0.20, 0.40, 0.15, 0.20]),
            map(vec![0.10, 0.25, 0.30, 0.15, 0.20]),
            map(vec![0.00, 0.30, 0.35, 0.10, 0.25]),
        ];
        let mom = attention_moments(&maps).unwrap();
        let want_mean = [
            0.05000000000000001,
            0.25,
            0.3499999999999999,
            0.13333333333333333,
            0.21666666666666667,
        ];
        let want_var = [
            0.001666666666666667,
            0.001666666666666666,
            0.0016666666666666679,
            0.0005555555555555553,
            0.0005555555555555553,
        ];
        let want_norm_mean = [0.0, 0.6666666666666667, 1.0, 0.2777777777777778, 0.5555555555555557];
        let want_norm_var = [0.9999999999999992, 0.999999999999998, 1.0, 0.0, 0.0];
        let want_std = [0.9999999999999996, 0.999999999999999, 1.0, 0.0, 0.0];
        for i in 0..5 {
            assert!((mom.mean[i] - want_mean[i]).abs() < 1e-12);
            assert!((mom.variance[i] - want_var[i]).abs() < 1e-12);
            assert!((mom.norm_mean[i] - want_norm_mean[i]).abs() < 1e-12);
            assert!((mom.norm_variance[i] - want_norm_var[i]).abs() < 1e-12);
            assert!((mom.std[i] - want_std[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn moments_of_two_maps_match_hand_values() {
        let mom = attention_moments(&[map(vec![0.2, 0.8]), map(vec![0.4, 0.6])]).unwrap();
        assert!((mom.mean[0] - 0.3).abs() < 1e-12);
        assert!((mom.mean[1] - 0.7).abs() < 1e-12);
        assert!((mom.variance[0] - 0.01).abs() < 1e-12);
        assert!((mom.variance[1] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn identical_maps_have_zero_variance() {
        let maps = vec![map(vec![0.1, 0.5, 0.4]); 4];
        let mom = attention_moments(&maps).unwrap();
        assert_eq!(mom.variance, vec![0.0, 0.0, 0.0]);
        assert_eq!(mom.std, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn moments_reject_mismatched_lengths() {
        assert!(attention_moments(&[map(vec![0.1, 0.9]), map(vec![0.5])]).is_err());
        assert!(attention_moments(&[]).is_err());
    }

    #[test]
    fn confidence_coeff_matches_frozen_values() {
        assert!((confidence_coeff(3, 0.1).unwrap() - 0.6194870314749731).abs() < 1e-12);
        let tiny = confidence_coeff(1_000_000, 0.1).unwrap();
        assert!((tiny - 0.0010729830131446737).abs() < 1e-12);
        assert!(tiny < 2e-3);
    }

    #[test]
    fn confidence_coeff_is_strictly_decreasing_in_m() {
        let mut prev = f64::INFINITY;
        for m in 1..=100 {
            let c = confidence_coeff(m, 0.1).unwrap();
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn confidence_coeff_rejects_bad_inputs() {
        assert!(confidence_coeff(0, 0.1).is_err());
        assert!(confidence_coeff(3, 0.0).is_err());
        assert!(confidence_coeff(3, 1.0).is_err());
        assert!(confidence_coeff(3, -0.5).is_err());
    }

    fn moments_from(norm_mean: Vec<f64>, std: Vec<f64>) -> AttentionMoments {
        let norm_variance = std.iter().map(|s| s * s).collect();
        AttentionMoments {
            mean: norm_mean.clone(),
            variance: std.iter().map(|s| s * s).collect(),
            norm_mean,
            norm_variance,
            std,
        }
    }

    #[test]
    fn evidence_score_worked_examples() {
        let mom = moments_from(vec![1.0, 0.5], vec![0.2, 0.0]);
        assert_eq!(evidence_score(&mom, 0.0), vec![1.0, 0.5]);
        let s = evidence_score(&mom, 0.5);
        assert!((s[0] - 0.9).abs() < 1e-12);
        assert!((s[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn suspicious_score_worked_examples() {
        let fully_attended = moments_from(vec![1.0, 1.0], vec![0.3, 0.7]);
        for v in suspicious_score(&fully_attended, 0.0, 0.0) {
            assert_eq!(v, 0.0);
        }
        let extremes = moments_from(vec![0.0, 1.0], vec![1.0, 1.0]);
        assert_eq!(suspicious_score(&extremes, 0.0, 0.0), vec![1.0, 0.0]);
        let mom = moments_from(vec![0.2], vec![0.5]);
        let s = suspicious_score(&mom, 0.1, 0.1);
        assert!((s[0] - 0.42000000000000004).abs() < 1e-15);
    }

    #[test]
    fn mask_selects_top_quantile_with_index_ties() {
        let mut evidence = vec![0.1; 10];
        evidence[0] = 0.9;
        let scores = RegionScores {
            evidence,
            suspicious: vec![0.0; 10],
        };
        let cfg = MaskConfig::default();
        let masks = binarize_masks(&scores, &cfg).unwrap();
        assert_eq!(masks.evidence_patches(), vec![0, 1]);
        assert!(masks.suspicious_empty());
    }

    #[test]
    fn constant_scores_give_empty_masks() {
        let scores = RegionScores {
            evidence: vec![0.4; 8],
            suspicious: vec![0.2; 8],
        };
        let masks = binarize_masks(&scores, &MaskConfig::default()).unwrap();
        assert!(masks.evidence_empty());
        assert!(masks.suspicious_empty());
    }

    #[test]
    fn overlaps_resolve_toward_evidence() {
        let scores = RegionScores {
            evidence: vec![1.0, 0.0, 0.0, 0.0, 0.0],
            suspicious: vec![1.0, 0.5, 0.0, 0.0, 0.0],
        };
        let cfg = MaskConfig {
            evidence_quantile: 0.2,
            suspicious_quantile: 0.4,
        };
        let masks = binarize_masks(&scores, &cfg).unwrap();
        assert_eq!(masks.evidence_patches(), vec![0]);
        assert_eq!(masks.suspicious_patches(), vec![1]);
    }

    fn fixture_grid() -> ImageGrid {
        let (h, w, d) = (3, 4, 2);
        let mut features = vec![0.0; h * w * d];
        for c in 0..d {
            for p in 0..h * w {
                features[p * d + c] = 0.1 * (c + 1) as f64 * (p + 1) as f64 - 0.3 * c as f64;
            }
        }
        ImageGrid::new(h, w, d, features, vec![None; h * w]).unwrap()
    }

    #[test]
    fn blur_matches_frozen_fixture() {
        // Channel-major expected values for the fully masked 3x4x2 grid at
        // sigma 1.0.
        let want = [
            0.3113358897896907,
            0.37500123587502326,
            0.46242690008044285,
            0.5260922461657755,
            0.5426218218119576,
            0.6062871678972901,
            0.6937128321027097,
            0.7573781781880423,
            0.7739077538342245,
            0.837573099919557,
            0.9249987641249766,
            0.9886641102103093,
            0.3226717795793815,
            0.4500024717500466,
            0.6248538001608859,
            0.7521844923315508,
            0.7852436436239152,
            0.9125743357945804,
            1.0874256642054196,
            1.2147563563760848,
            1.2478155076684492,
            1.3751461998391141,
            1.5499975282499534,
            1.6773282204206186,
        ];
        let img = fixture_grid();
        let out = ablate_region(&img, &vec![true; 12], 1.0).unwrap();
        for c in 0..2 {
            for p in 0..12 {
                assert!(
                    (out.patch(p)[c] - want[c * 12 + p]).abs() < 1e-12,
                    "patch {p} channel {c}"
                );
            }
        }
    }

    #[test]
    fn empty_mask_is_the_identity() {
        let img = fixture_grid();
        let out = ablate_region(&img, &vec![false; 12], 1.0).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_image_is_a_blur_fixed_point() {
        let img = ImageGrid::new(3, 3, 2, vec![0.7; 18], vec![None; 9]).unwrap();
        let out = ablate_region(&img, &vec![true; 9], 1.0).unwrap();
        for (a, b) in out.features().iter().zip(img.features()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unmasked_patches_are_bit_identical() {
        let img = fixture_grid();
        let mut mask = vec![false; 12];
        mask[5] = true;
        mask[11] = true;
        let out = ablate_region(&img, &mask, 0.7).unwrap();
        for p in 0..12 {
            if !mask[p] {
                assert_eq!(out.patch(p), img.patch(p), "patch {p}");
            } else {
                assert_ne!(out.patch(p), img.patch(p), "patch {p}");
            }
        }
    }

    #[test]
    fn ablation_rejects_bad_inputs() {
        let img = fixture_grid();
        assert!(ablate_region(&img, &vec![true; 5], 1.0).is_err());
        assert!(ablate_region(&img, &vec![true; 12], 0.0).is_err());
        assert!(ablate_region(&img, &vec![true; 12], -1.0).is_err());
    }

    #[test]
    fn sensitivity_worked_example() {
        let pair = sensitivity_vectors(
            &hidden(vec![1.0, 2.0]),
            &hidden(vec![0.0, 2.0]),
            &hidden(vec![1.0, 3.0]),
        )
        .unwrap();
        assert_eq!(pair.evidence.values(), &[1.0, 0.0]);
        assert_eq!(pair.suspicious.values(), &[0.0, -1.0]);
        assert!(sensitivity_vectors(
            &hidden(vec![1.0]),
            &hidden(vec![1.0, 2.0]),
            &hidden(vec![1.0])
        )
        .is_err());
    }

    #[test]
    fn sensitivity_is_antisymmetric() {
        let a = hidden(vec![0.5, -1.5, 2.0]);
        let b = hidden(vec![1.0, 0.0, -2.0]);
        let fwd = sensitivity_vectors(&a, &b, &b).unwrap();
        let rev = sensitivity_vectors(&b, &a, &a).unwrap();
        for (x, y) in fwd.evidence.values().iter().zip(rev.evidence.values()) {
            assert_eq!(*x, -y);
        }
    }

    #[test]
    fn calibrate_worked_examples() {
        let h = hidden(vec![1.0, 1.0]);
        let sens = SensitivityPair {
            evidence: hidden(vec![2.0, 0.0]),
            suspicious: hidden(vec![0.0, 2.0]),
        };
        let out = calibrate_hidden(&h, &sens, 0.2, 0.3);
        assert!((out.values()[0] - 1.4).abs() < 1e-12);
        assert!((out.values()[1] - 0.4).abs() < 1e-12);

        assert_eq!(calibrate_hidden(&h, &sens, 0.0, 0.0).values(), h.values());

        let same = SensitivityPair {
            evidence: hidden(vec![3.0, -1.0]),
            suspicious: hidden(vec![3.0, -1.0]),
        };
        assert_eq!(calibrate_hidden(&h, &same, 0.4, 0.4).values(), h.values());
    }

    #[test]
    fn zero_sensitivity_pair_is_inert() {
        let h = hidden(vec![0.3, -0.7, 1.1]);
        let out = calibrate_hidden(&h, &SensitivityPair::zeros(3), 0.2, 0.3);
        assert_eq!(out.values(), h.values());
    }

    proptest! {
        #[test]
        fn welford_agrees_with_two_pass(
            rows in proptest::collection::vec(
                proptest::collection::vec(0.0f64..1.0, 6),
                1..8
            )
        ) {
            let maps: Vec<AttentionMap> = rows.iter().cloned().map(map).collect();
            let mom = attention_moments(&maps).unwrap();
            let m = rows.len() as f64;
            for i in 0..6 {
                let mean: f64 = rows.iter().map(|r| r[i]).sum::<f64>() / m;
                let var: f64 = rows.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / m;
                prop_assert!((mom.mean[i] - mean).abs() < 1e-12);
                prop_assert!((mom.variance[i] - var).abs() < 1e-12);
                prop_assert!(mom.variance[i] >= 0.0);
                prop_assert!((0.0..=1.0).contains(&mom.norm_mean[i]));
                prop_assert!((0.0..=1.0).contains(&mom.norm_variance[i]));
                prop_assert!((mom.std[i] * mom.std[i] - mom.norm_variance[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn masks_are_always_disjoint(
            evidence in proptest::collection::vec(-1.0f64..1.0, 4..30),
            suspicious_seed in proptest::collection::vec(-1.0f64..1.0, 4..30),
            qe in 0.0f64..1.0,
            qs in 0.0f64..1.0
        ) {
            let n = evidence.len().min(suspicious_seed.len());
            let scores = RegionScores {
                evidence: evidence[..n].to_vec(),
                suspicious: suspicious_seed[..n].to_vec(),
            };
            let cfg = MaskConfig { evidence_quantile: qe, suspicious_quantile: qs };
            let masks = binarize_masks(&scores, &cfg).unwrap();
            for (e, s) in masks.evidence().iter().zip(masks.suspicious()) {
                prop_assert!(!(*e && *s));
            }
        }

        #[test]
        fn evidence_score_decreases_with_instability(
            a in 0.0f64..1.0,
            s1 in 0.0f64..1.0,
            bump in 0.001f64..0.5,
            lambda in 0.01f64..1.0
        ) {
            let lo = moments_from(vec![a], vec![s1]);
            let hi = moments_from(vec![a], vec![(s1 + bump).min(1.0)]);
            prop_assert!(evidence_score(&hi, lambda)[0] <= evidence_score(&lo, lambda)[0]);
        }

        #[test]
        fn suspicious_score_increases_with_instability_when_unattended(
            a in 0.0f64..0.8,
            s1 in 0.0f64..0.9,
            bump in 0.001f64..0.1,
            lambda_s in 0.0f64..0.5
        ) {
            // (1 - a) - lambda_a stays positive with lambda_a = 0.1 and a < 0.8.
            let lo = moments_from(vec![a], vec![s1]);
            let hi = moments_from(vec![a], vec![s1 + bump]);
            let low = suspicious_score(&lo, 0.1, lambda_s)[0];
            let high = suspicious_score(&hi, 0.1, lambda_s)[0];
            prop_assert!(high >= low);
        }

        #[test]
        fn unmasked_region_is_untouched_on_random_grids(
            seed_vals in proptest::collection::vec(-2.0f64..2.0, 24),
            mask_bits in proptest::collection::vec(proptest::bool::ANY, 12),
            sigma in 0.3f64..2.0
        ) {
            let img = ImageGrid::new(3, 4, 2, seed_vals, vec![None; 12]).unwrap();
            let out = ablate_region(&img, &mask_bits, sigma).unwrap();
            for p in 0..12 {
                if !mask_bits[p] {
                    prop_assert_eq!(out.patch(p), img.patch(p));
                }
            }
        }
    }
}
