//! Gradient-inversion attacks an honest-but-curious server can run on what
//! it observes.
//!
//! Attacks take a [`Transcript`], which holds only what the server saw.
//! The private input lives in a separate [`GroundTruth`] that only
//! [`score`] reads.

mod config;
mod hyperfl;
mod ig;
mod optimize;
mod report;
mod transcript;

pub use config::{AttackConfig, GradLoss, InitKind, Optimizer};
pub use hyperfl::{hyperfl_bilevel_attack, implied_hypernet_grad, recover_embedding, BilevelOutcome, EmbeddingRecovery};
pub use ig::{analytic_from_transcript, analytic_input_recovery, ig_attack, Reconstruction, BIAS_THRESHOLD};
pub use optimize::{init_input, match_loss_graph, minimize, total_variation, tv_graph, Minimized, TracePoint};
pub use report::{run_attack, score, summary_csv, AttackOutcome, AttackReport, Method, SampleReport, SUMMARY_HEADER};
pub use transcript::{capture, GroundTruth, Observation, Transcript};
