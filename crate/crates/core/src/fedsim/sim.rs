use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::channel::{Channel, Direction, Envelope, Payload};
use super::client::{local_train_fedavg, local_train_full, local_train_hyperfl, ClientState, LocalModel, LocalOutcome};
use super::config::{Algorithm, DpConfig, PfedhnConfig, RoundConfig};
use super::server::{aggregate, dp_sanitize, sample_clients};
use crate::datakit::Dataset;
use crate::diffnet::net::init_uniform;
use crate::diffnet::{ModelSpec, ParamSet, SgdState};
use crate::error::{Error, Result};
use crate::hypernet::{hypernet_backward, hypernet_forward, init_hypernet, target_from_shapes, HypernetSpec};
use crate::metrics::{accuracy, ClientRecord, RoundRecord};
use crate::tensor::Tensor;

const DOMAIN_INIT: u64 = 1;
const DOMAIN_SAMPLE: u64 = 2;
const DOMAIN_TRAIN: u64 = 3;

/// Independent ChaCha stream keyed by the experiment seed and a domain tag.
pub fn derive_rng(seed: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Stream for client `client` in round `round`.
pub fn client_rng(seed: u64, round: usize, client: usize) -> ChaCha8Rng {
    derive_rng(seed, DOMAIN_TRAIN, ((round as u64) << 32) | client as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub algorithm: Algorithm,
    pub model: ModelSpec,
    #[serde(default)]
    pub hypernet: HypernetSpec,
    #[serde(default)]
    pub round: RoundConfig,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub pfedhn: PfedhnConfig,
    pub seed: u64,
    /// Worker threads for client training; 0 uses the global pool.
    #[serde(default)]
    pub threads: usize,
    /// Fill the `seconds` column with wall-clock time. Off by default so
    /// that repeated runs produce identical files.
    #[serde(default)]
    pub record_timing: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.round.validate()?;
        if self.algorithm == Algorithm::DpFedavg {
            self.dp.validate()?;
        }
        if self.algorithm == Algorithm::Pfedhn && !(self.pfedhn.server_lr >= 0.0) {
            return Err(Error::Config("pfedhn.server_lr must be >= 0".into()));
        }
        Ok(())
    }

    /// Hypernetwork spec with its target filled in for this algorithm:
    /// the extractor for HyperFL, the whole model for pFedHN.
    pub fn resolved_hypernet(&self) -> HypernetSpec {
        let shapes = match self.algorithm {
            Algorithm::Pfedhn => self.model.net.param_shapes(),
            _ => self.model.extractor_shapes(),
        };
        self.hypernet.clone().with_target(target_from_shapes(shapes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub algorithm: Algorithm,
    pub round: usize,
    /// Aggregated hypernetwork (HyperFL), global model (FedAvg, DP-FedAvg),
    /// server hypernetwork (pFedHN); empty for local-only training.
    pub global: ParamSet,
    /// Per-client embeddings held by the pFedHN server.
    pub embeddings: Vec<Tensor>,
}

pub struct Simulator {
    cfg: SimConfig,
    hyper: HypernetSpec,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub channel: Channel,
    pool: Option<rayon::ThreadPool>,
}

struct ClientResult {
    id: usize,
    outcome: LocalOutcome,
}

fn drift(prev: &Option<ParamSet>, now: &ParamSet) -> Result<Option<f64>> {
    prev.as_ref().map(|p| Ok(now.sub(p)?.norm())).transpose()
}

impl Simulator {
    /// `shards[i]` is client `i`'s (train, test) pair.
    pub fn new(cfg: SimConfig, shards: Vec<(Dataset, Dataset)>) -> Result<Self> {
        cfg.validate()?;
        if shards.is_empty() {
            return Err(Error::Config("need at least one client".into()));
        }
        let net = &cfg.model.net;
        for (i, (tr, te)) in shards.iter().enumerate() {
            if tr.is_empty() || te.is_empty() {
                return Err(Error::Config(format!("client {i} has an empty train or test split")));
            }
            if tr.dim() != net.input_dim() || tr.classes > net.output_dim() {
                return Err(Error::Config(format!(
                    "client {i}: data is {}-dimensional with {} classes, model expects {} -> {}",
                    tr.dim(),
                    tr.classes,
                    net.input_dim(),
                    net.output_dim()
                )));
            }
        }
        let hyper = cfg.resolved_hypernet();
        let mut init_rng = derive_rng(cfg.seed, DOMAIN_INIT, 0);
        let m = shards.len();
        let mut embeddings = Vec::new();
        let (global, make_model): (ParamSet, Box<dyn Fn() -> LocalModel>) = match cfg.algorithm {
            Algorithm::Hyperfl => {
                hyper.validate()?;
                let (phi, v) = init_hypernet(&hyper, cfg.seed)?;
                let phi_c = init_uniform(&cfg.model.classifier_shapes(), &mut init_rng);
                let phi2 = phi.clone();
                (
                    phi,
                    Box::new(move || LocalModel::Hyperfl {
                        v: v.clone(),
                        phi_h: phi2.clone(),
                        phi_c: phi_c.clone(),
                        opt_h: SgdState::default(),
                        opt_v: SgdState::default(),
                        opt_c: SgdState::default(),
                    }),
                )
            }
            Algorithm::Fedavg | Algorithm::DpFedavg | Algorithm::Local => {
                let w = net.init_params(&mut init_rng);
                let w2 = w.clone();
                let global = if cfg.algorithm == Algorithm::Local { ParamSet::new() } else { w };
                (
                    global,
                    Box::new(move || LocalModel::Full {
                        params: w2.clone(),
                        opt: SgdState::default(),
                    }),
                )
            }
            Algorithm::Pfedhn => {
                hyper.validate()?;
                let (phi, _) = init_hypernet(&hyper, cfg.seed)?;
                for i in 0..m {
                    let mut r = derive_rng(cfg.seed, DOMAIN_INIT, 1 + i as u64);
                    let e: Vec<f64> = (0..hyper.embedding_dim)
                        .map(|_| rand::Rng::sample(&mut r, StandardNormal))
                        .collect();
                    embeddings.push(Tensor::from_vec(e));
                }
                let theta0 = hypernet_forward(&embeddings[0], &phi, &hyper)?;
                (
                    phi,
                    Box::new(move || LocalModel::Full {
                        params: theta0.clone(),
                        opt: SgdState::default(),
                    }),
                )
            }
        };
        let mut clients: Vec<ClientState> = shards
            .into_iter()
            .enumerate()
            .map(|(id, (train, test))| ClientState {
                id,
                train,
                test,
                model: make_model(),
                prev_extractor: None,
                prev_hypernet: None,
            })
            .collect();
        if cfg.algorithm == Algorithm::Pfedhn {
            for (c, e) in clients.iter_mut().zip(&embeddings) {
                c.model = LocalModel::Full {
                    params: hypernet_forward(e, &global, &hyper)?,
                    opt: SgdState::default(),
                };
            }
        }
        let pool = if cfg.threads > 0 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        let channel = Channel::new(cfg.algorithm, global.names().cloned().collect::<Vec<_>>());
        Ok(Self {
            server: ServerState {
                algorithm: cfg.algorithm,
                round: 0,
                global,
                embeddings,
            },
            clients,
            channel,
            pool,
            hyper,
            cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn hypernet_spec(&self) -> &HypernetSpec {
        &self.hyper
    }

    pub fn round(&self) -> usize {
        self.server.round
    }

    /// Parameters a client would be evaluated with right now.
    pub fn eval_params(&self, client: usize) -> Result<ParamSet> {
        match self.cfg.algorithm {
            Algorithm::Fedavg | Algorithm::DpFedavg => Ok(self.server.global.clone()),
            _ => self.clients[client].full_params(&self.hyper),
        }
    }

    pub fn test_accuracy(&self, client: usize) -> Result<f64> {
        accuracy(&self.eval_params(client)?, &self.cfg.model.net, &self.clients[client].test)
    }

    /// Full-batch loss and squared gradient norm on a client's training set.
    fn full_batch_stats(&self, client: usize) -> Result<(f64, f64)> {
        let c = &self.clients[client];
        let net = &self.cfg.model.net;
        match &c.model {
            LocalModel::Hyperfl { v, phi_h, phi_c, .. } => {
                let g = super::client::hyperfl_grads(net, &self.hyper, v, phi_h, phi_c, &c.train.x, &c.train.y)?;
                Ok((g.loss, g.sq_norm()))
            }
            LocalModel::Full { .. } => {
                let p = self.eval_params(client)?;
                let (l, g) = crate::diffnet::loss_and_grad(&p, net, crate::diffnet::Batch::new(&c.train.x, &c.train.y))?;
                Ok((l, g.sq_norm()))
            }
        }
    }

    /// Round-0 record describing the initial state, and the reference point
    /// for the first drift measurements.
    pub fn initial_record(&mut self) -> Result<RoundRecord> {
        let mut rows = Vec::with_capacity(self.clients.len());
        for i in 0..self.clients.len() {
            let (loss, gsq) = self.full_batch_stats(i)?;
            let acc = self.test_accuracy(i)?;
            let ext = self.clients[i].extractor(&self.cfg.model, &self.hyper)?;
            let hyp = self.clients[i].hypernet().cloned();
            let c = &mut self.clients[i];
            c.prev_extractor.get_or_insert(ext);
            if c.prev_hypernet.is_none() {
                c.prev_hypernet = hyp;
            }
            rows.push(ClientRecord {
                client_id: i,
                train_loss: loss,
                test_acc: acc,
                grad_sq_norm: gsq,
                hypernet_drift: None,
                extractor_drift: None,
            });
        }
        Ok(RoundRecord {
            round: 0,
            clients: rows,
            seconds: 0.0,
        })
    }

    fn sampled(&self) -> Vec<usize> {
        let m = self.clients.len();
        let next = self.server.round + 1;
        if next >= self.cfg.round.rounds {
            return (0..m).collect();
        }
        let mut rng = derive_rng(self.cfg.seed, DOMAIN_SAMPLE, next as u64);
        sample_clients(m, self.cfg.round.sample_rate, &mut rng)
    }

    fn envelope(&self, client_id: usize, direction: Direction, payload: Payload) -> Envelope {
        Envelope {
            round: self.server.round + 1,
            client_id,
            direction,
            payload,
        }
    }

    /// Runs `f` on every sampled client, in parallel, returning results in
    /// ascending client order.
    fn train_sampled<F>(&mut self, sampled: &[usize], f: F) -> Result<Vec<ClientResult>>
    where
        F: Fn(&mut ClientState, &mut ChaCha8Rng) -> Result<LocalOutcome> + Sync,
    {
        let (seed, round) = (self.cfg.seed, self.server.round + 1);
        let work = |c: &mut ClientState| -> Result<ClientResult> {
            let mut rng = client_rng(seed, round, c.id);
            Ok(ClientResult {
                id: c.id,
                outcome: f(c, &mut rng)?,
            })
        };
        let run = |clients: &mut Vec<ClientState>| -> Vec<Result<ClientResult>> {
            clients
                .par_iter_mut()
                .filter(|c| sampled.binary_search(&c.id).is_ok())
                .map(work)
                .collect()
        };
        let results = match &self.pool {
            Some(pool) => pool.install(|| run(&mut self.clients)),
            None => run(&mut self.clients),
        };
        results.into_iter().collect()
    }

    fn weights(&self, ids: &[usize]) -> Vec<f64> {
        let total: usize = ids.iter().map(|&i| self.clients[i].train.len()).sum();
        ids.iter()
            .map(|&i| self.clients[i].train.len() as f64 / total as f64)
            .collect()
    }

    /// One communication round. Returns the per-client record for the
    /// clients that took part.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let start = Instant::now();
        let sampled = self.sampled();
        let results = match self.cfg.algorithm {
            Algorithm::Hyperfl => self.round_hyperfl(&sampled)?,
            Algorithm::Fedavg | Algorithm::DpFedavg => self.round_fedavg(&sampled)?,
            Algorithm::Local => {
                let (net, cfg) = (self.cfg.model.net.clone(), self.cfg.round.clone());
                self.train_sampled(&sampled, |c, rng| {
                    let LocalModel::Full { params, opt } = &mut c.model else {
                        return Err(Error::Capability("client does not hold a full model".into()));
                    };
                    local_train_full(
                        params,
                        opt,
                        &net,
                        &c.train,
                        &cfg.eta_g,
                        cfg.local_epochs,
                        cfg.batch_size,
                        cfg.grad_norm,
                        rng,
                    )
                })?
            }
            Algorithm::Pfedhn => self.round_pfedhn(&sampled)?,
        };
        self.server.round += 1;
        let mut rows = Vec::with_capacity(results.len());
        for r in results {
            let acc = self.test_accuracy(r.id)?;
            let ext = self.clients[r.id].extractor(&self.cfg.model, &self.hyper)?;
            let hyp = self.clients[r.id].hypernet().cloned();
            let c = &mut self.clients[r.id];
            let extractor_drift = drift(&c.prev_extractor, &ext)?;
            let hypernet_drift = match &hyp {
                Some(h) => drift(&c.prev_hypernet, h)?,
                None => None,
            };
            c.prev_extractor = Some(ext);
            c.prev_hypernet = hyp;
            rows.push(ClientRecord {
                client_id: r.id,
                train_loss: r.outcome.mean_loss,
                test_acc: acc,
                grad_sq_norm: r.outcome.mean_grad_sq_norm,
                hypernet_drift,
                extractor_drift,
            });
        }
        Ok(RoundRecord {
            round: self.server.round,
            clients: rows,
            seconds: if self.cfg.record_timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })
    }

    fn round_hyperfl(&mut self, sampled: &[usize]) -> Result<Vec<ClientResult>> {
        let mut received = Vec::with_capacity(sampled.len());
        for &i in sampled {
            let env = self.envelope(i, Direction::ToClient, Payload::Hypernet);
            received.push((i, self.channel.transmit(env, &self.server.global)?));
        }
        let (spec, hyper, cfg) = (self.cfg.model.clone(), self.hyper.clone(), self.cfg.round.clone());
        let results = self.train_sampled(sampled, |c, rng| {
            let phi_bar = &received.iter().find(|(i, _)| *i == c.id).expect("sampled").1;
            local_train_hyperfl(c, phi_bar, &spec, &hyper, &cfg, rng)
        })?;
        self.aggregate_uploads(&results, Payload::Hypernet)?;
        Ok(results)
    }

    fn round_fedavg(&mut self, sampled: &[usize]) -> Result<Vec<ClientResult>> {
        let mut received = Vec::with_capacity(sampled.len());
        for &i in sampled {
            let env = self.envelope(i, Direction::ToClient, Payload::Model);
            received.push((i, self.channel.transmit(env, &self.server.global)?));
        }
        let (net, cfg) = (self.cfg.model.net.clone(), self.cfg.round.clone());
        let dp = (self.cfg.algorithm == Algorithm::DpFedavg).then(|| self.cfg.dp.clone());
        let results = self.train_sampled(sampled, |c, rng| {
            let global = &received.iter().find(|(i, _)| *i == c.id).expect("sampled").1;
            let mut out = local_train_fedavg(c, global, &net, &cfg, rng)?;
            if let Some(dp) = &dp {
                out.upload = sanitize_model(&out.upload, global, dp, rng)?;
            }
            Ok(out)
        })?;
        self.aggregate_uploads(&results, Payload::Model)?;
        Ok(results)
    }

    fn aggregate_uploads(&mut self, results: &[ClientResult], payload: Payload) -> Result<()> {
        let mut uploads = Vec::with_capacity(results.len());
        for r in results {
            let env = self.envelope(r.id, Direction::ToServer, payload);
            uploads.push(self.channel.transmit(env, &r.outcome.upload)?);
        }
        let ids: Vec<usize> = results.iter().map(|r| r.id).collect();
        self.server.global = aggregate(&uploads, &self.weights(&ids))?;
        if !self.server.global.is_finite() {
            return Err(Error::Numeric("aggregated parameters are not finite".into()));
        }
        Ok(())
    }

    /// Clients are served one at a time in ascending order; each one's
    /// update moves the server hypernetwork before the next is generated.
    fn round_pfedhn(&mut self, sampled: &[usize]) -> Result<Vec<ClientResult>> {
        let (net, cfg) = (self.cfg.model.net.clone(), self.cfg.round.clone());
        let lr = self.cfg.pfedhn.server_lr;
        let mut results = Vec::with_capacity(sampled.len());
        for &i in sampled {
            let e = self.server.embeddings[i].clone();
            let theta = hypernet_forward(&e, &self.server.global, &self.hyper)?;
            let env = self.envelope(i, Direction::ToClient, Payload::Model);
            let theta_rx = self.channel.transmit(env, &theta)?;
            let mut rng = client_rng(self.cfg.seed, self.server.round + 1, i);
            let outcome = local_train_fedavg(&mut self.clients[i], &theta_rx, &net, &cfg, &mut rng)?;
            let delta = theta_rx.sub(&outcome.upload)?;
            let env = self.envelope(i, Direction::ToServer, Payload::ModelDelta);
            let delta = self.channel.transmit(env, &delta)?;
            let (dphi, de) = hypernet_backward(&delta, &e, &self.server.global, &self.hyper)?;
            self.server.global = self.server.global.zip_map(&dphi, |p, g| p - lr * g)?;
            self.server.embeddings[i] = e.zip_map(&de, |p, g| p - lr * g)?;
            if !self.server.global.is_finite() {
                return Err(Error::Numeric("server hypernetwork is not finite".into()));
            }
            results.push(ClientResult { id: i, outcome });
        }
        Ok(results)
    }

    /// Every client's test accuracy under its evaluation parameters.
    pub fn final_accuracies(&self) -> Result<Vec<f64>> {
        (0..self.clients.len()).map(|i| self.test_accuracy(i)).collect()
    }
}

/// DP-FedAvg upload: the update relative to `global` is clipped and noised,
/// then added back. When sanitization would leave the update untouched the
/// trained model is returned as is, so no roundoff is introduced.
pub fn sanitize_model(
    trained: &ParamSet,
    global: &ParamSet,
    dp: &DpConfig,
    rng: &mut impl rand::Rng,
) -> Result<ParamSet> {
    let update = trained.sub(global)?;
    let clipped = dp.clip_norm.is_some_and(|c| update.norm() > c);
    if !clipped && dp.sigma == 0.0 {
        return Ok(trained.clone());
    }
    global.add(&dp_sanitize(&update, dp, rng)?)
}
