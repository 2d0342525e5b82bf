//! Slow, obviously-correct reimplementations of the numeric kernels, used
//! as test oracles. Each one recomputes its result by a different route
//! than the production code: two-pass statistics instead of streaming
//! updates, direct 2-D convolution instead of separable passes, mean-first
//! drift instead of accumulate-and-scale.

use crate::core::{AttentionMap, ImageGrid, LogitVector, Prompt, TokenId};
use crate::decouple::AttentionMoments;
use crate::engine::Model;
use crate::error::{DepError, Result};

/// Two-pass per-patch moments with a from-scratch min-max rescale.
pub fn reference_moments(maps: &[AttentionMap]) -> Result<AttentionMoments> {
    if maps.is_empty() {
        return Err(DepError::invalid("reference moments", "no attention maps"));
    }
    let patches = maps[0].len();
    if maps.iter().any(|m| m.len() != patches) {
        return Err(DepError::invalid(
            "reference moments",
            "attention maps differ in length",
        ));
    }
    let m = maps.len() as f64;
    let mut mean = vec![0.0; patches];
    for j in 0..patches {
        mean[j] = maps.iter().map(|a| a.values()[j]).sum::<f64>() / m;
    }
    let mut variance = vec![0.0; patches];
    for j in 0..patches {
        variance[j] = maps
            .iter()
            .map(|a| {
                let d = a.values()[j] - mean[j];
                d * d
            })
            .sum::<f64>()
            / m;
    }
    let norm_variance = rescale(&variance);
    // The dispersion entering the scores is on the rescaled [0, 1] axis, so
    // its square root is too.
    let std = norm_variance.iter().map(|v| v.sqrt()).collect();
    Ok(AttentionMoments {
        norm_mean: rescale(&mean),
        norm_variance,
        mean,
        variance,
        std,
    })
}

fn rescale(values: &[f64]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if hi == lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Direct 2-D Gaussian convolution with half-sample reflection, applied to
/// every channel, then mixed into the original on masked patches only.
pub fn reference_blur(img: &ImageGrid, mask: &[bool], sigma: f64) -> Result<ImageGrid> {
    if mask.len() != img.patch_count() {
        return Err(DepError::invalid(
            "reference blur",
            "mask length does not match patch count",
        ));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(DepError::invalid("reference blur", "sigma must be positive"));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for t in -radius..=radius {
        kernel.push((-((t * t) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= total;
    }

    let (h, w, d) = (img.height() as i64, img.width() as i64, img.dim());
    let mut features = img.features().to_vec();
    for (patch, flagged) in mask.iter().enumerate() {
        if !flagged {
            continue;
        }
        let (pi, pj) = ((patch as i64) / w, (patch as i64) % w);
        for c in 0..d {
            let mut acc = 0.0;
            for (ti, ki) in kernel.iter().enumerate() {
                for (tj, kj) in kernel.iter().enumerate() {
                    let si = fold(pi + ti as i64 - radius, h);
                    let sj = fold(pj + tj as i64 - radius, w);
                    acc += ki * kj * img.patch((si * w + sj) as usize)[c];
                }
            }
            features[patch * d + c] = acc;
        }
    }
    img.with_features(features)
}

/// Half-sample reflection of an out-of-range index into [0, n).
fn fold(mut i: i64, n: i64) -> i64 {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i;
        }
    }
}

/// Mean of the perturbed logits first, then one subtraction.
pub fn reference_drift(perturbed: &[LogitVector], original: &LogitVector) -> Result<Vec<f64>> {
    if perturbed.is_empty() {
        return Err(DepError::invalid("reference drift", "no perturbed logits"));
    }
    let n = original.len();
    if perturbed.iter().any(|l| l.len() != n) {
        return Err(DepError::invalid(
            "reference drift",
            "logit vectors differ in length",
        ));
    }
    let m = perturbed.len() as f64;
    let mut out = vec![0.0; n];
    for (v, slot) in out.iter_mut().enumerate() {
        let mean = perturbed.iter().map(|l| l.values()[v]).sum::<f64>() / m;
        *slot = mean - original.values()[v];
    }
    Ok(out)
}

/// Plain greedy decoding written without the engine: repeated forwards,
/// lowest-index argmax, stop on the model's end token or the length cap.
pub fn reference_greedy(
    model: &dyn Model,
    img: &ImageGrid,
    prompt: &Prompt,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let mut prefix: Vec<TokenId> = Vec::new();
    while prefix.len() < max_len {
        let out = model.forward(img, prompt, &prefix)?;
        let values = out.logits.values();
        let mut best = 0usize;
        for (i, v) in values.iter().enumerate() {
            if *v > values[best] {
                best = i;
            }
        }
        let token = TokenId(best);
        prefix.push(token);
        if model.eos_token() == Some(token) {
            break;
        }
    }
    Ok(prefix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decouple;
    use crate::drift;
    use proptest::prelude::*;

    fn maps(rows: Vec<Vec<f64>>) -> Vec<AttentionMap> {
        rows.into_iter()
            .map(|r| AttentionMap::new(r).unwrap())
            .collect()
    }

    #[test]
    fn moments_match_streaming_implementation() {
        let maps = maps(vec![
            vec![0.1, 0.4, 0.3, 0.2],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.05, 0.6, 0.15, 0.2],
        ]);
        let slow = reference_moments(&maps).unwrap();
        let fast = decouple::attention_moments(&maps).unwrap();
        for (a, b) in [
            (&slow.mean, &fast.mean),
            (&slow.variance, &fast.variance),
            (&slow.norm_mean, &fast.norm_mean),
            (&slow.norm_variance, &fast.norm_variance),
            (&slow.std, &fast.std),
        ] {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_matches_separable_implementation() {
        let h = 4;
        let w = 5;
        let d = 3;
        let features: Vec<f64> = (0..h * w * d)
            .map(|i| ((i * 37 + 11) % 101) as f64 / 101.0 - 0.4)
            .collect();
        let img = ImageGrid::new(h, w, d, features, vec![None; h * w]).unwrap();
        let mut mask = vec![false; h * w];
        mask[0] = true;
        mask[7] = true;
        mask[19] = true;
        for sigma in [0.6, 1.0, 2.0] {
            let slow = reference_blur(&img, &mask, sigma).unwrap();
            let fast = decouple::ablate_region(&img, &mask, sigma).unwrap();
            for (a, b) in slow.features().iter().zip(fast.features()) {
                assert!((a - b).abs() < 1e-12, "sigma {sigma}");
            }
        }
    }

    #[test]
    fn drift_matches_streaming_implementation() {
        let original = LogitVector::new(vec![0.2, -1.0, 3.5]).unwrap();
        let perturbed = vec![
            LogitVector::new(vec![0.3, -0.6, 3.0]).unwrap(),
            LogitVector::new(vec![0.1, -1.1, 4.0]).unwrap(),
            LogitVector::new(vec![0.2, -0.4, 3.6]).unwrap(),
        ];
        let slow = reference_drift(&perturbed, &original).unwrap();
        let fast = drift::drift_direction(&perturbed, &original).unwrap();
        for (a, b) in slow.iter().zip(fast.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn random_drift_agrees(
            original in proptest::collection::vec(-10.0f64..10.0, 4),
            rows in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..6),
        ) {
            let original = LogitVector::new(original).unwrap();
            let perturbed: Vec<LogitVector> =
                rows.into_iter().map(|r| LogitVector::new(r).unwrap()).collect();
            let slow = reference_drift(&perturbed, &original).unwrap();
            let fast = drift::drift_direction(&perturbed, &original).unwrap();
            for (a, b) in slow.iter().zip(fast.values()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
