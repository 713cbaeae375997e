//! Federated orchestration: proximal local SGD on each client, weighted
//! aggregation on the server, and the four training regimes.
//!
//! A local step is `w_k ← w_k − α·(g_k(w_k; ξ) + μ·(w_k − w))` where `w` is
//! the global reference received at the start of the round. Personalized
//! clients keep `w_k` across rounds; plain-FL clients restart from `w` with
//! `μ = 0` (FedAvg).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{Backbone, ModelParams, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "pfl-snn")]
    PflSnn,
    #[serde(rename = "pfl-ann")]
    PflAnn,
    #[serde(rename = "fl-snn")]
    FlSnn,
    #[serde(rename = "fl-ann")]
    FlAnn,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::PflSnn, Regime::PflAnn, Regime::FlSnn, Regime::FlAnn];

    pub fn personalized(self) -> bool {
        matches!(self, Regime::PflSnn | Regime::PflAnn)
    }

    pub fn backbone(self) -> Backbone {
        match self {
            Regime::PflSnn | Regime::FlSnn => Backbone::Snn,
            Regime::PflAnn | Regime::FlAnn => Backbone::Ann,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::PflSnn => "pfl-snn",
            Regime::PflAnn => "pfl-ann",
            Regime::FlSnn => "fl-snn",
            Regime::FlAnn => "fl-ann",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Argument(format!("unknown regime `{s}` (expected pfl-snn, pfl-ann, fl-snn or fl-ann)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Proximal coefficient μ.
    pub mu: f64,
    pub rounds: usize,
    /// Personalized clients resume from their own `w_k` each round; when
    /// false they restart from the global model.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 64,
            local_epochs: 2,
            mu: 1e-5,
            rounds: 40,
            warm_start: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("train.local_epochs", "must be at least 1"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config("train.mu", "must be non-negative"));
        }
        if self.rounds == 0 {
            return Err(Error::config("train.rounds", "must be at least 1"));
        }
        Ok(())
    }
}

/// A differentiable per-client loss that can be sampled in mini-batches.
pub trait LocalObjective: Sync {
    fn num_samples(&self) -> usize;

    /// Mean loss and gradient over the samples at `indices`.
    fn batch_loss_grad(&self, params: &[f64], indices: &[usize]) -> Result<(f64, Vec<f64>)>;

    /// Full-data loss and gradient.
    fn full_loss_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        self.batch_loss_grad(params, &all)
    }
}

/// Cross-entropy of a network on a fixed sample set.
pub struct NetworkObjective<'a> {
    pub network: &'a Network,
    pub samples: &'a [Sample],
}

impl LocalObjective for NetworkObjective<'_> {
    fn num_samples(&self) -> usize {
        self.samples.len()
    }

    fn batch_loss_grad(&self, params: &[f64], indices: &[usize]) -> Result<(f64, Vec<f64>)> {
        let batch: Vec<&Sample> = indices.iter().map(|&i| &self.samples[i]).collect();
        self.network.loss_and_grad(params, &batch)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the mini-batch stream of `client` in `round`.
pub fn stream_seed(master: u64, client: usize, round: usize) -> u64 {
    splitmix(splitmix(splitmix(master) ^ client as u64) ^ round as u64)
}

/// One proximal SGD step, in place.
pub fn prox_sgd_step(params: &mut [f64], reference: &[f64], grad: &[f64], lr: f64, mu: f64) {
    for ((w, &r), &g) in params.iter_mut().zip(reference).zip(grad) {
        *w -= lr * (g + mu * (*w - r));
    }
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub params: ModelParams,
    /// Mean mini-batch loss over the update.
    pub mean_loss: f64,
    pub steps: usize,
}

/// `E` epochs of proximal mini-batch SGD from `start`, anchored at `global`.
/// Each epoch visits `⌈n/batch⌉` mini-batches drawn without replacement from
/// a permutation seeded by `seed`.
pub fn local_update(
    start: &ModelParams,
    global: &ModelParams,
    objective: &dyn LocalObjective,
    cfg: &TrainConfig,
    mu: f64,
    seed: u64,
) -> Result<LocalUpdate> {
    if !start.same_layout(global) {
        return Err(Error::Protocol("client and global layouts differ".into()));
    }
    let n = objective.num_samples();
    if n == 0 {
        return Err(Error::config("data", "client dataset is empty"));
    }
    let mut params = start.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_sum = 0.0;
    let mut steps = 0;
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = objective.batch_loss_grad(&params.values, batch)?;
            prox_sgd_step(&mut params.values, &global.values, &grad, cfg.learning_rate, mu);
            loss_sum += loss;
            steps += 1;
        }
    }
    Ok(LocalUpdate {
        params,
        mean_loss: loss_sum / steps as f64,
        steps,
    })
}

/// `p_k = |D_k| / |D|`.
pub fn client_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::config("data", "every client needs at least one sample"));
    }
    let total: usize = sizes.iter().sum();
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub num_samples: usize,
    pub weight: f64,
    /// Personalized model `w_k` (for FL, the last local iterate).
    pub params: ModelParams,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ModelParams,
    pub round: usize,
    /// Aggregation weights indexed by client id.
    pub weights: Vec<f64>,
}

/// Weighted mean of the client models, `Σ_k p_k w_k`.
///
/// Evaluated as `w_first + Σ_{k>first} p_k (w_k − w_first)` in ascending id
/// order, which is the same quantity because the weights sum to one and
/// returns a consensus model bit for bit.
pub fn aggregate(server: &ServerState, updates: &BTreeMap<usize, ModelParams>) -> Result<ModelParams> {
    for k in 0..server.weights.len() {
        if !updates.contains_key(&k) {
            return Err(Error::Protocol(format!("client {k} did not report")));
        }
    }
    if let Some(extra) = updates.keys().find(|&&k| k >= server.weights.len()) {
        return Err(Error::Protocol(format!("unknown client {extra}")));
    }
    if let Some((k, _)) = updates.iter().find(|(_, p)| !p.same_layout(&server.global)) {
        return Err(Error::Protocol(format!("client {k} sent a mismatched layout")));
    }
    let mut iter = updates.iter();
    let (_, pivot) = iter.next().ok_or_else(|| Error::Protocol("no clients".into()))?;
    let mut out = pivot.clone();
    for (&k, p) in iter {
        let w = server.weights[k];
        for ((o, &v), &base) in out.values.iter_mut().zip(&p.values).zip(&pivot.values) {
            *o += w * (v - base);
        }
    }
    Ok(out)
}

/// Runs one synchronous round for generic objectives and returns each
/// client's mean training loss. `personalized` selects the PFL path.
pub fn federated_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    objectives: &[&dyn LocalObjective],
    cfg: &TrainConfig,
    personalized: bool,
    master_seed: u64,
) -> Result<Vec<f64>> {
    if objectives.len() != clients.len() || clients.len() != server.weights.len() {
        return Err(Error::Protocol("client, objective and weight counts differ".into()));
    }
    let round = server.round;
    let global = &server.global;
    let results: Vec<Result<LocalUpdate>> = clients
        .par_iter()
        .zip(objectives.par_iter())
        .map(|(client, objective)| {
            let seed = stream_seed(master_seed, client.id, round);
            if personalized {
                let start = if cfg.warm_start { &client.params } else { global };
                local_update(start, global, *objective, cfg, cfg.mu, seed)
            } else {
                // FedAvg: restart from the global model, no proximal anchoring.
                local_update(global, global, *objective, cfg, 0.0, seed)
            }
        })
        .collect();
    let mut updates = BTreeMap::new();
    let mut losses = Vec::with_capacity(clients.len());
    for (client, result) in clients.iter_mut().zip(results) {
        let update = result?;
        losses.push(update.mean_loss);
        client.params = update.params.clone();
        updates.insert(client.id, update.params);
    }
    server.global = aggregate(server, &updates)?;
    server.round += 1;
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub regime: Regime,
    /// 1-based round index.
    pub round: usize,
    pub train_loss: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    /// `Σ_k p_k · accuracy_k`.
    pub mean_accuracy: f64,
}

/// A full federation of network clients for one regime.
pub struct Federation<'a> {
    pub network: Arc<Network>,
    pub dataset: &'a Dataset,
    pub regime: Regime,
    pub cfg: TrainConfig,
    pub master_seed: u64,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl<'a> Federation<'a> {
    /// Every party starts from `init`.
    pub fn new(
        network: Arc<Network>,
        dataset: &'a Dataset,
        regime: Regime,
        cfg: TrainConfig,
        master_seed: u64,
        init: ModelParams,
    ) -> Result<Self> {
        cfg.validate()?;
        if network.backbone() != regime.backbone() {
            return Err(Error::config("regimes", format!("{regime} needs a {:?} network", regime.backbone())));
        }
        if init.layout().as_ref() != network.layout().as_ref() {
            return Err(Error::Protocol("initial parameters do not fit the network".into()));
        }
        let sizes: Vec<usize> = dataset.clients.iter().map(|c| c.train.len()).collect();
        let weights = client_weights(&sizes)?;
        let clients = dataset
            .clients
            .iter()
            .enumerate()
            .map(|(id, c)| ClientState {
                id,
                num_samples: c.train.len(),
                weight: weights[id],
                params: init.clone(),
            })
            .collect();
        Ok(Self {
            network,
            dataset,
            regime,
            cfg,
            master_seed,
            server: ServerState {
                global: init,
                round: 0,
                weights,
            },
            clients,
        })
    }

    /// Parameters used to evaluate client `k`: the personalized model under
    /// PFL, the global model under FL.
    pub fn eval_params(&self, k: usize) -> &ModelParams {
        if self.regime.personalized() {
            &self.clients[k].params
        } else {
            &self.server.global
        }
    }

    pub fn objectives(&self) -> Vec<NetworkObjective<'_>> {
        self.dataset
            .clients
            .iter()
            .map(|c| NetworkObjective {
                network: &self.network,
                samples: &c.train,
            })
            .collect()
    }

    /// Trains one round without evaluating.
    pub fn train_round(&mut self) -> Result<Vec<f64>> {
        let network = self.network.clone();
        let objectives: Vec<NetworkObjective<'_>> = self
            .dataset
            .clients
            .iter()
            .map(|c| NetworkObjective {
                network: &network,
                samples: &c.train,
            })
            .collect();
        let dyn_objs: Vec<&dyn LocalObjective> = objectives.iter().map(|o| o as &dyn LocalObjective).collect();
        federated_round(
            &mut self.server,
            &mut self.clients,
            &dyn_objs,
            &self.cfg,
            self.regime.personalized(),
            self.master_seed,
        )
    }

    pub fn evaluate(&self) -> Result<Vec<f64>> {
        (0..self.clients.len())
            .map(|k| {
                self.network
                    .accuracy(&self.eval_params(k).values, &self.dataset.clients[k].test)
            })
            .collect()
    }

    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let train_loss = self.train_round()?;
        let test_accuracy = self.evaluate()?;
        let mean_accuracy = test_accuracy
            .iter()
            .zip(&self.server.weights)
            .map(|(a, p)| a * p)
            .sum();
        Ok(RoundMetrics {
            regime: self.regime,
            round: self.server.round,
            train_loss,
            test_accuracy,
            mean_accuracy,
        })
    }
}
