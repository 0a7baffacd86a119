//! What the server sees of one client's single-image step, and the private
//! ground truth kept apart from it for scoring.

use serde::{Deserialize, Serialize};

use crate::diffnet::{grad_params, Batch, ModelSpec, ParamSet};
use crate::error::{Error, Result};
use crate::fedsim::{dp_sanitize, derive_rng, hyperfl_grads, Algorithm, LocalModel, Simulator};
use crate::hypernet::{hypernet_forward, HypernetSpec};
use crate::tensor::Tensor;

const DOMAIN_ATTACK: u64 = 4;

/// Parameters the server knows and the gradient it observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    /// FedAvg, DP-FedAvg and pFedHN: the whole model and its gradient.
    FullModel { params: ParamSet, grads: ParamSet },
    /// HyperFL: the shared hypernetwork and its gradient only.
    Hypernet {
        spec: HypernetSpec,
        phi: ParamSet,
        grads: ParamSet,
    },
    /// Local-only training; nothing leaves the client.
    Nothing,
}

/// The attacker's view. Holds no trace of the private input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub algorithm: Algorithm,
    pub round: usize,
    pub client_id: usize,
    pub model: ModelSpec,
    pub label: usize,
    pub image_shape: Option<(usize, usize)>,
    pub observation: Observation,
}

/// Evaluation-only data. Attack functions never take this type.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub x: Tensor,
    pub label: usize,
}

impl Transcript {
    pub fn input_dim(&self) -> usize {
        self.model.net.input_dim()
    }

    /// `(rows, cols)` used for the smoothness prior; a single row when the
    /// data carries no image shape.
    pub fn grid(&self) -> (usize, usize) {
        self.image_shape.unwrap_or((1, self.input_dim()))
    }

    pub fn full_model(&self) -> Result<(&ParamSet, &ParamSet)> {
        match &self.observation {
            Observation::FullModel { params, grads } => Ok((params, grads)),
            Observation::Hypernet { .. } => Err(Error::Capability(
                "HyperFL transcripts carry no classifier gradients".into(),
            )),
            Observation::Nothing => Err(Error::Capability("nothing was transmitted".into())),
        }
    }
}

/// Gradient-observation snapshot of client `client` on the private sample
/// `x` (one row), taken from the simulator's current state.
///
/// DP-FedAvg gradients are clipped and noised like an upload.
pub fn capture(sim: &Simulator, client: usize, x: &Tensor, label: usize) -> Result<(Transcript, GroundTruth)> {
    let cfg = sim.config();
    let net = &cfg.model.net;
    if client >= sim.clients.len() {
        return Err(Error::Config(format!("no client {client}")));
    }
    let x = x.reshape(&[1, net.input_dim()])?;
    let labels = [label];
    let observation = match cfg.algorithm {
        Algorithm::Fedavg | Algorithm::DpFedavg => {
            let params = sim.server.global.clone();
            let mut grads = grad_params(&params, net, Batch::new(&x, &labels))?;
            if cfg.algorithm == Algorithm::DpFedavg {
                let mut rng = derive_rng(cfg.seed, DOMAIN_ATTACK, client as u64);
                grads = dp_sanitize(&grads, &cfg.dp, &mut rng)?;
            }
            Observation::FullModel { params, grads }
        }
        Algorithm::Pfedhn => {
            let params = hypernet_forward(&sim.server.embeddings[client], &sim.server.global, sim.hypernet_spec())?;
            let grads = grad_params(&params, net, Batch::new(&x, &labels))?;
            Observation::FullModel { params, grads }
        }
        Algorithm::Hyperfl => {
            let LocalModel::Hyperfl { v, phi_c, .. } = &sim.clients[client].model else {
                return Err(Error::Consistency("HyperFL client without a hypernetwork".into()));
            };
            let phi = sim.server.global.clone();
            let g = hyperfl_grads(net, sim.hypernet_spec(), v, &phi, phi_c, &x, &labels)?;
            Observation::Hypernet {
                spec: sim.hypernet_spec().clone(),
                phi,
                grads: g.phi_h,
            }
        }
        Algorithm::Local => Observation::Nothing,
    };
    let image_shape = sim.clients[client].train.image_shape;
    Ok((
        Transcript {
            algorithm: cfg.algorithm,
            round: sim.round(),
            client_id: client,
            model: cfg.model.clone(),
            label,
            image_shape,
            observation,
        },
        GroundTruth { x, label },
    ))
}
