use crate::datakit::Dataset;
use crate::diffnet::{logits, NetSpec, ParamSet};
use crate::error::Result;
use crate::tensor::Tensor;

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.cols();
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of samples whose highest logit is the true class.
pub fn accuracy(params: &ParamSet, spec: &NetSpec, ds: &Dataset) -> Result<f64> {
    let out = logits(params, spec, &ds.x)?;
    let hits = argmax_rows(&out)
        .iter()
        .zip(&ds.y)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / ds.len() as f64)
}
