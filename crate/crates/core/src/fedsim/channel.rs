//! The simulated wire between clients and the server.
//!
//! Every exchanged parameter set is serialized with the checkpoint codec
//! and decoded again on the other side, so what the receiver holds is
//! exactly what crossed the wire. In HyperFL mode a guard refuses any
//! message carrying a tensor that is not a hypernetwork parameter.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::config::Algorithm;
use crate::diffnet::{checkpoint, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToServer,
    ToClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Hypernet,
    Model,
    ModelDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub round: usize,
    pub client_id: usize,
    pub direction: Direction,
    pub payload: Payload,
}

/// A message as it appeared on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct WireRecord {
    pub envelope: Envelope,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Channel {
    /// Tensor names a HyperFL message may carry; `None` disables the check.
    allowed: Option<HashSet<String>>,
    record: bool,
    log: Vec<WireRecord>,
}

impl Channel {
    pub fn new(algorithm: Algorithm, hypernet_names: impl IntoIterator<Item = String>) -> Self {
        let allowed = (algorithm == Algorithm::Hyperfl).then(|| hypernet_names.into_iter().collect());
        Self {
            allowed,
            record: false,
            log: Vec::new(),
        }
    }

    /// Keep a copy of every serialized message.
    pub fn set_recording(&mut self, on: bool) {
        self.record = on;
    }

    pub fn log(&self) -> &[WireRecord] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<WireRecord> {
        std::mem::take(&mut self.log)
    }

    /// Serializes `params`, checks the privacy boundary, and returns what
    /// the receiver decodes.
    pub fn transmit(&mut self, envelope: Envelope, params: &ParamSet) -> Result<ParamSet> {
        if let Some(allowed) = &self.allowed {
            if envelope.payload != Payload::Hypernet {
                return Err(Error::Consistency(format!(
                    "privacy boundary: {:?} message in hypernetwork-only mode",
                    envelope.payload
                )));
            }
            if let Some(bad) = params.names().find(|n| !allowed.contains(*n)) {
                return Err(Error::Consistency(format!(
                    "privacy boundary: tensor `{bad}` may not leave client {}",
                    envelope.client_id
                )));
            }
        }
        let meta = serde_json::to_string(&envelope).expect("envelope serializes");
        let bytes = checkpoint::encode(params, &meta);
        let (received, _) = checkpoint::decode(&bytes)?;
        if self.record {
            self.log.push(WireRecord { envelope, bytes });
        }
        Ok(received)
    }
}

/// Byte offsets in `bytes` where the little-endian encoding of any of
/// `values` appears. Zero is ignored since it is too common to be evidence.
pub fn find_values(bytes: &[u8], values: &[f64]) -> Vec<usize> {
    let needles: HashSet<u64> = values
        .iter()
        .filter(|v| **v != 0.0)
        .map(|v| v.to_bits())
        .collect();
    if bytes.len() < 8 {
        return vec![];
    }
    (0..=bytes.len() - 8)
        .filter(|&i| needles.contains(&u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap())))
        .collect()
}
