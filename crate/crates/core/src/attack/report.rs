//! Scoring reconstructions against held-back ground truth, and the JSON and
//! CSV forms of the results.

use serde::{Deserialize, Serialize};

use super::config::AttackConfig;
use super::hyperfl::hyperfl_bilevel_attack;
use super::ig::{analytic_from_transcript, ig_attack};
use super::optimize::TracePoint;
use super::transcript::{GroundTruth, Observation, Transcript};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, SSIM_WINDOW};
use crate::tensor::Tensor;

pub const SUMMARY_HEADER: &str = "sample,client_id,label,method,psnr,ssim,final_loss,analytic_error,analytic_psnr";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Gradient matching against the full model.
    Ig,
    /// Embedding recovery followed by extractor inversion.
    Bilevel,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ig => "ig",
            Method::Bilevel => "bilevel",
        }
    }
}

/// What an attack produced, before any comparison with the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub method: Method,
    pub x: Tensor,
    pub loss: f64,
    pub trace: Vec<TracePoint>,
    /// First-layer closed-form recovery, when the transcript allows it.
    pub analytic: Option<Tensor>,
    pub embedding_residual: Option<f64>,
}

/// Picks the attack the transcript supports and runs it.
pub fn run_attack(t: &Transcript, cfg: &AttackConfig) -> Result<AttackOutcome> {
    match &t.observation {
        Observation::FullModel { .. } => {
            let r = ig_attack(t, cfg)?;
            let analytic = match analytic_from_transcript(t) {
                Ok(x) => Some(x),
                Err(Error::DegenerateGradient(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(AttackOutcome {
                method: Method::Ig,
                x: r.x,
                loss: r.loss,
                trace: r.trace,
                analytic,
                embedding_residual: None,
            })
        }
        Observation::Hypernet { .. } => {
            let b = hyperfl_bilevel_attack(t, cfg)?;
            Ok(AttackOutcome {
                method: Method::Bilevel,
                x: b.reconstruction.x,
                loss: b.reconstruction.loss,
                trace: b.reconstruction.trace,
                analytic: None,
                embedding_residual: Some(b.embedding.residual),
            })
        }
        Observation::Nothing => Err(Error::Capability(format!(
            "{} training transmits nothing to attack",
            t.algorithm.name()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub sample: usize,
    pub client_id: usize,
    pub label: usize,
    pub method: Method,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub final_loss: f64,
    pub analytic_error: Option<f64>,
    pub analytic_psnr: Option<f64>,
    pub embedding_residual: Option<f64>,
    pub trace: Vec<TracePoint>,
    pub image_shape: Option<(usize, usize)>,
    pub reconstruction: Vec<f64>,
}

fn image_ssim(a: &Tensor, b: &Tensor, shape: Option<(usize, usize)>) -> Result<Option<f64>> {
    match shape {
        Some((h, w)) if h >= SSIM_WINDOW && w >= SSIM_WINDOW => {
            Ok(Some(ssim(&a.reshape(&[h, w])?, &b.reshape(&[h, w])?)?))
        }
        _ => Ok(None),
    }
}

/// Compares an outcome with the private input.
pub fn score(sample: usize, t: &Transcript, out: &AttackOutcome, truth: &GroundTruth) -> Result<SampleReport> {
    let x_true = truth.x.reshape(&[truth.x.len()])?;
    let (analytic_error, analytic_psnr) = match &out.analytic {
        Some(a) => {
            let err = a.sub(&x_true)?.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (Some(err), Some(psnr(a, &x_true, 1.0)?))
        }
        None => (None, None),
    };
    Ok(SampleReport {
        sample,
        client_id: t.client_id,
        label: t.label,
        method: out.method,
        psnr: psnr(&out.x, &x_true, 1.0)?,
        ssim: image_ssim(&out.x, &x_true, t.image_shape)?,
        final_loss: out.loss,
        analytic_error,
        analytic_psnr,
        embedding_residual: out.embedding_residual,
        trace: out.trace.clone(),
        image_shape: t.image_shape,
        reconstruction: out.x.data().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub config: AttackConfig,
    pub samples: Vec<SampleReport>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn summary_csv(samples: &[SampleReport]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.sample,
            s.client_id,
            s.label,
            s.method.name(),
            s.psnr,
            opt(s.ssim),
            s.final_loss,
            opt(s.analytic_error),
            opt(s.analytic_psnr)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_summary_is_header_only() {
        assert_eq!(summary_csv(&[]), format!("{SUMMARY_HEADER}\n"));
    }
}
