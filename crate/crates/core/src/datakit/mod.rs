//! Datasets: synthetic generators, IDX ingestion, and non-IID partitioning.

mod idx;
mod partition;
mod synth;

pub use idx::{load_idx, parse_idx};
pub use partition::{consecutive_groups, partition, ClientShard, PartitionSpec};
pub use synth::{synth_dataset, synth_glyphs};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Features in `[0, 1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
    /// `(rows, cols)` when samples are images.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(dim_err!("dataset features must be [N, D], got {:?}", x.shape()));
        }
        if x.rows() != y.len() {
            return Err(Error::Consistency(format!(
                "{} samples but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(dim_err!("label {bad} out of range for {classes} classes"));
        }
        x.check_finite("dataset")?;
        Ok(Self {
            x,
            y,
            classes,
            image_shape: None,
        })
    }

    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.dim() {
            return Err(dim_err!("{rows}x{cols} image does not match {} features", self.dim()));
        }
        self.image_shape = Some((rows, cols));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            x: self.x.select_rows(idx)?,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
            image_shape: self.image_shape,
        })
    }

    pub fn sample(&self, i: usize) -> (Tensor, usize) {
        let x = Tensor::new(vec![1, self.dim()], self.x.row(i).to_vec()).expect("row");
        (x, self.y[i])
    }
}
