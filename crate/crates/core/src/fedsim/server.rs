use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::DpConfig;
use crate::diffnet::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight sums further than this from 1 are rejected.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

/// Elementwise weighted mean of `uploads`, accumulated in slice order.
///
/// Each output entry is clamped into the range spanned by the inputs at
/// that position, so identical uploads come back bitwise unchanged.
pub fn aggregate(uploads: &[ParamSet], weights: &[f64]) -> Result<ParamSet> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Consistency("nothing to aggregate".into()))?;
    if uploads.len() != weights.len() {
        return Err(Error::Consistency(format!(
            "{} uploads but {} weights",
            uploads.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Consistency(format!("aggregation weight {w} is not >= 0")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(Error::Consistency(format!(
            "aggregation weights sum to {total}, expected 1"
        )));
    }
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    for u in &uploads[1..] {
        first.expect_same_layout(u)?;
    }
    first
        .iter()
        .map(|(name, t0)| {
            let srcs: Vec<&[f64]> = uploads.iter().map(|u| u.get(name).expect("layout").data()).collect();
            let data = (0..t0.len())
                .map(|k| {
                    let mut acc = 0.0;
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for (s, w) in srcs.iter().zip(&weights) {
                        acc += w * s[k];
                        lo = lo.min(s[k]);
                        hi = hi.max(s[k]);
                    }
                    acc.clamp(lo, hi)
                })
                .collect();
            Ok((name.clone(), Tensor::new(t0.shape().to_vec(), data)?))
        })
        .collect()
}

/// `ceil(rate * m)` distinct client indices in ascending order.
pub fn sample_clients(m: usize, rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    // Guard against products like 0.3 * 100 = 30.000000000000004.
    let k = ((rate * m as f64) - 1e-9).ceil().clamp(1.0, m as f64) as usize;
    if k >= m {
        return (0..m).collect();
    }
    let mut idx = rand::seq::index::sample(rng, m, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Scales `update` to global L2 norm at most `clip_norm`, then adds
/// i.i.d. `N(0, (sigma * clip_norm)^2)` noise to every entry.
pub fn dp_sanitize(update: &ParamSet, dp: &DpConfig, rng: &mut impl Rng) -> Result<ParamSet> {
    dp.validate()?;
    let mut out = update.clone();
    if let Some(c) = dp.clip_norm {
        let norm = update.norm();
        if norm > c {
            let mut f = c / norm;
            out = update.scale(f);
            // Roundoff can leave the product a hair above c.
            while out.norm() > c {
                f *= 1.0 - f64::EPSILON;
                out = update.scale(f);
            }
        }
    }
    if dp.sigma > 0.0 {
        let std = dp.sigma * dp.clip_norm.expect("validated");
        let noise = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        out = out.map_with(|v| v + noise.sample(rng));
    }
    Ok(out)
}
