//! Reconstruction quality, classification accuracy, and per-round training
//! diagnostics.

mod classify;
mod convergence;
mod image;

pub use classify::{accuracy, argmax_rows};
pub use convergence::{
    convergence_stats, from_csv, quartile_range, to_csv, ClientRecord, ConvergenceSummary, RoundRecord,
    CSV_HEADER,
};
pub use image::{psnr, ssim, PSNR_CAP, SSIM_SIGMA, SSIM_WINDOW};
