//! Full simulator state as one flat, namespaced parameter set, suitable for
//! the checkpoint codec.
//!
//! ```text
//! server/global/<tensor>          aggregated or server-held parameters
//! server/embedding/<client>       pFedHN embeddings
//! client/<id>/v                   HyperFL embedding
//! client/<id>/phi_h/<tensor>      HyperFL local hypernetwork
//! client/<id>/phi_c/<tensor>      HyperFL classifier
//! client/<id>/params/<tensor>     full local model (other algorithms)
//! client/<id>/opt_<group>/<name>  momentum buffers (group h, v, c or full)
//! client/<id>/prev_extractor/..   drift reference points
//! client/<id>/prev_hypernet/..
//! ```

use super::client::{LocalModel, EMBEDDING};
use super::sim::Simulator;
use crate::diffnet::{ParamSet, SgdState};
use crate::error::{Error, Result};

fn put(out: &mut ParamSet, prefix: &str, set: &ParamSet) {
    for (k, t) in set.iter() {
        out.insert(format!("{prefix}{k}"), t.clone());
    }
}

fn put_opt(out: &mut ParamSet, prefix: &str, st: &SgdState) {
    if let Some(v) = &st.velocity {
        put(out, prefix, v);
    }
}

fn get_opt(snap: &ParamSet, prefix: &str) -> SgdState {
    let v = snap.strip_prefix(prefix);
    SgdState {
        velocity: (!v.is_empty()).then_some(v),
    }
}

fn nonempty(set: ParamSet, what: &str) -> Result<ParamSet> {
    if set.is_empty() {
        Err(Error::Consistency(format!("snapshot lacks {what}")))
    } else {
        Ok(set)
    }
}

impl Simulator {
    pub fn snapshot(&self) -> ParamSet {
        let mut out = ParamSet::new();
        put(&mut out, "server/global/", &self.server.global);
        for (i, e) in self.server.embeddings.iter().enumerate() {
            out.insert(format!("server/embedding/{i}"), e.clone());
        }
        for c in &self.clients {
            let p = format!("client/{}/", c.id);
            match &c.model {
                LocalModel::Hyperfl {
                    v,
                    phi_h,
                    phi_c,
                    opt_h,
                    opt_v,
                    opt_c,
                } => {
                    out.insert(format!("{p}v"), v.clone());
                    put(&mut out, &format!("{p}phi_h/"), phi_h);
                    put(&mut out, &format!("{p}phi_c/"), phi_c);
                    put_opt(&mut out, &format!("{p}opt_h/"), opt_h);
                    put_opt(&mut out, &format!("{p}opt_v/"), opt_v);
                    put_opt(&mut out, &format!("{p}opt_c/"), opt_c);
                }
                LocalModel::Full { params, opt } => {
                    put(&mut out, &format!("{p}params/"), params);
                    put_opt(&mut out, &format!("{p}opt_full/"), opt);
                }
            }
            if let Some(e) = &c.prev_extractor {
                put(&mut out, &format!("{p}prev_extractor/"), e);
            }
            if let Some(h) = &c.prev_hypernet {
                put(&mut out, &format!("{p}prev_hypernet/"), h);
            }
        }
        out
    }

    /// Overwrites server and client state from [`Simulator::snapshot`]
    /// output taken after `round` rounds of an identically configured run.
    pub fn restore(&mut self, snap: &ParamSet, round: usize) -> Result<()> {
        let global = snap.strip_prefix("server/global/");
        self.server.global.expect_same_layout(&global)?;
        let mut embeddings = Vec::with_capacity(self.server.embeddings.len());
        for i in 0..self.server.embeddings.len() {
            embeddings.push(snap.require(&format!("server/embedding/{i}"))?.clone());
        }
        let mut models = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let p = format!("client/{}/", c.id);
            let model = match &c.model {
                LocalModel::Hyperfl { .. } => {
                    let phi_h = nonempty(snap.strip_prefix(&format!("{p}phi_h/")), "phi_h")?;
                    let phi_c = nonempty(snap.strip_prefix(&format!("{p}phi_c/")), "phi_c")?;
                    self.hypernet_spec().check_params(&phi_h)?;
                    let opt_v = get_opt(snap, &format!("{p}opt_v/"));
                    if let Some(vel) = &opt_v.velocity {
                        vel.require(EMBEDDING)?;
                    }
                    LocalModel::Hyperfl {
                        v: snap.require(&format!("{p}v"))?.clone(),
                        phi_h,
                        phi_c,
                        opt_h: get_opt(snap, &format!("{p}opt_h/")),
                        opt_v,
                        opt_c: get_opt(snap, &format!("{p}opt_c/")),
                    }
                }
                LocalModel::Full { .. } => {
                    let params = nonempty(snap.strip_prefix(&format!("{p}params/")), "params")?;
                    self.config().model.net.check_params(&params)?;
                    LocalModel::Full {
                        params,
                        opt: get_opt(snap, &format!("{p}opt_full/")),
                    }
                }
            };
            let ext = snap.strip_prefix(&format!("{p}prev_extractor/"));
            let hyp = snap.strip_prefix(&format!("{p}prev_hypernet/"));
            models.push((model, (!ext.is_empty()).then_some(ext), (!hyp.is_empty()).then_some(hyp)));
        }
        self.server.global = global;
        self.server.embeddings = embeddings;
        self.server.round = round;
        for (c, (model, ext, hyp)) in self.clients.iter_mut().zip(models) {
            c.model = model;
            c.prev_extractor = ext;
            c.prev_hypernet = hyp;
        }
        Ok(())
    }
}
