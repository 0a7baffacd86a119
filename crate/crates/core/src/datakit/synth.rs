use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Gaussian blobs: class means are seeded random unit directions scaled
/// by `separation`, noise is unit variance, and the whole feature matrix
/// is min-max rescaled to `[0, 1]`. Sample `i` has label `i % classes`.
pub fn synth_dataset(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim < 1 || per_class < 1 {
        return Err(dim_err!(
            "need classes >= 2, dim >= 1, per_class >= 1 (got {classes}, {dim}, {per_class})"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|a| a / n * separation).collect()
        })
        .collect();
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for mu in &means[c] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(mu + z);
        }
    }
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in &mut data {
        *v = (*v - lo) / span;
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}

/// Handwriting-like `side x side` images: each class has a template made
/// of a few straight strokes; samples shift it by up to one pixel, vary the
/// ink intensity, and add sparse faint noise. Background is 0.
pub fn synth_glyphs(classes: usize, side: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || side < 4 || per_class < 1 {
        return Err(dim_err!(
            "need classes >= 2, side >= 4, per_class >= 1 (got {classes}, {side}, {per_class})"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..classes).map(|_| glyph_template(side, &mut rng)).collect();
    let n = classes * per_class;
    let dim = side * side;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        let dr: isize = rng.gen_range(-1..=1);
        let dc: isize = rng.gen_range(-1..=1);
        let ink: f64 = rng.gen_range(0.75..1.0);
        for r in 0..side as isize {
            for col in 0..side as isize {
                let (sr, sc) = (r - dr, col - dc);
                let mut v = if (0..side as isize).contains(&sr) && (0..side as isize).contains(&sc) {
                    templates[c][sr as usize * side + sc as usize] * ink
                } else {
                    0.0
                };
                if rng.gen::<f64>() < 0.05 {
                    v += rng.gen_range(0.0..0.25);
                }
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)?.with_image_shape(side, side)
}

fn glyph_template(side: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    let strokes = rng.gen_range(2..=4);
    let lo = 1;
    let hi = side - 2;
    for _ in 0..strokes {
        let (r0, c0) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
        let (r1, c1) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
        let steps = (r1 as isize - r0 as isize)
            .unsigned_abs()
            .max((c1 as isize - c0 as isize).unsigned_abs())
            .max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let r = (r0 as f64 + t * (r1 as f64 - r0 as f64)).round() as usize;
            let c = (c0 as f64 + t * (c1 as f64 - c0 as f64)).round() as usize;
            img[r * side + c] = 1.0;
            // two-pixel-wide pen
            if c + 1 < side {
                img[r * side + c + 1] = 1.0;
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let a = synth_dataset(3, 8, 10, 2.0, 5).unwrap();
        let b = synth_dataset(3, 8, 10, 2.0, 5).unwrap();
        let bytes = |d: &Dataset| d.x.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(a.y, b.y);
        let c = synth_dataset(3, 8, 10, 2.0, 6).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn features_in_unit_interval() {
        let d = synth_dataset(4, 5, 20, 3.0, 1).unwrap();
        assert!(d.x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let g = synth_glyphs(5, 12, 4, 1).unwrap();
        assert!(g.x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(g.image_shape, Some((12, 12)));
    }

    #[test]
    fn glyphs_are_mostly_background() {
        let g = synth_glyphs(10, 16, 5, 2).unwrap();
        let dark = g.x.data().iter().filter(|&&v| v < 0.3).count() as f64 / g.x.len() as f64;
        assert!(dark > 0.6, "{dark}");
    }

    #[test]
    fn rejects_degenerate_args() {
        assert!(synth_dataset(1, 4, 4, 1.0, 0).is_err());
        assert!(synth_dataset(2, 0, 4, 1.0, 0).is_err());
    }
}
