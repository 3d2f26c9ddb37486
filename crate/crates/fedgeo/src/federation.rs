//! Federated orchestration: rounds of sample -> broadcast -> local train ->
//! aggregate, with three optional mechanisms on top of the FedAvg baseline:
//!
//! * geographic alignment: the server multiplies the embedding table by the
//!   row-stochastic spatial weight matrix before every broadcast,
//! * layer-wise similarity aggregation: per-layer convex combinations
//!   weighted by softmax of each client's dot-product similarity to the
//!   sample-weighted average,
//! * entropy-based sampling: clients are drawn proportionally to the entropy
//!   of their location distribution instead of uniformly.
//!
//! A proximal option adds a pull toward the broadcast weights during local
//! training. The server loop is single-threaded and owns all state; client
//! training within a round runs in parallel (each job is a pure function)
//! and aggregation reduces in ascending client-id order, so results are
//! independent of scheduling.

use std::time::Instant;

use rayon::prelude::*;

use crate::geogrid::{GridError, SpatialWeightMatrix};
use crate::metrics::{self, MetricsError};
use crate::mobility::FederatedDataset;
use crate::model::{self, HyperParams, ModelError, ModelWeights, NUM_LAYERS};
use crate::seed::{self, STREAM_CLIENT, STREAM_INIT, STREAM_SAMPLE};

#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("no client updates to aggregate")]
    EmptyUpdateSet,
    #[error("client updates have mismatched shapes")]
    ShapeMismatch,
    #[error("client {client_id} has an empty training split")]
    EmptyClient { client_id: u32 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Client selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Uniform,
    Ebs,
}

impl std::fmt::Display for Sampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sampler::Uniform => "uniform",
            Sampler::Ebs => "ebs",
        })
    }
}

/// Server-side aggregation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    FedAvg,
    Lwa,
}

impl std::fmt::Display for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregator::FedAvg => "fedavg",
            Aggregator::Lwa => "lwa",
        })
    }
}

/// Full configuration of one federated run.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub rounds: usize,
    /// Fraction of clients sampled per round; the round quota is
    /// `max(floor(fraction * K), 1)`.
    pub fraction: f64,
    pub sampler: Sampler,
    pub aggregator: Aggregator,
    /// Apply geographic alignment to the embedding before every broadcast
    /// (including the very first, on the fresh initialization).
    pub gaa_enabled: bool,
    /// Layers (1-based) aggregated by similarity when `aggregator` is `lwa`;
    /// the rest keep their sample-weighted average.
    pub lwa_layers: Vec<usize>,
    /// Self-weight on the spatial matrix diagonal.
    pub q: f64,
    /// Neighbor distance threshold in meters (strict inequality).
    pub neighbor_threshold_m: f64,
    /// Proximal pull strength toward the broadcast weights, if any.
    pub prox_mu: Option<f64>,
    pub hp: HyperParams,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            fraction: 0.2,
            sampler: Sampler::Uniform,
            aggregator: Aggregator::FedAvg,
            gaa_enabled: false,
            lwa_layers: vec![1, 2, 3],
            q: 1e4,
            neighbor_threshold_m: 150.0,
            prox_mu: None,
            hp: HyperParams::default(),
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        let bad = |msg: String| Err(FederationError::InvalidConfig(msg));
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("fraction must lie in (0, 1], got {}", self.fraction));
        }
        if self.aggregator == Aggregator::Lwa && self.lwa_layers.is_empty() {
            return bad("lwa_layers must be nonempty when aggregator = lwa".into());
        }
        let mut seen = [false; NUM_LAYERS];
        for &z in &self.lwa_layers {
            if z < 1 || z > NUM_LAYERS {
                return bad(format!("lwa_layers entries must lie in 1..={NUM_LAYERS}, got {z}"));
            }
            if std::mem::replace(&mut seen[z - 1], true) {
                return bad(format!("lwa_layers lists layer {z} twice"));
            }
        }
        if !(self.q > 0.0) {
            return bad(format!("q must be positive, got {}", self.q));
        }
        if !(self.neighbor_threshold_m >= 0.0) {
            return bad(format!(
                "neighbor_threshold_m must be non-negative, got {}",
                self.neighbor_threshold_m
            ));
        }
        if let Some(mu) = self.prox_mu {
            if !(mu >= 0.0) {
                return bad(format!("prox_mu must be non-negative, got {mu}"));
            }
        }
        self.hp
            .validate()
            .map_err(FederationError::InvalidConfig)?;
        Ok(())
    }
}

/// Round quota: `max(floor(fraction * n_clients), 1)`.
pub fn clients_per_round(fraction: f64, n_clients: usize) -> usize {
    ((fraction * n_clients as f64).floor() as usize).max(1)
}

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub weights: ModelWeights,
    /// Training-split size; the aggregation weight is proportional to it.
    pub n_samples: u64,
    /// Final-epoch mean training loss.
    pub train_loss: f64,
}

/// Similarity weights of one aggregated layer, aligned with the round's
/// participant list (ascending client id).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAlphas {
    pub layer: usize,
    pub alphas: Vec<f64>,
}

/// Everything recorded about one round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    /// Participating client ids, ascending.
    pub participants: Vec<u32>,
    /// Per-layer similarity weights (empty under plain FedAvg).
    pub layer_alphas: Vec<LayerAlphas>,
    pub acc1: f64,
    pub acc5: f64,
    /// Mean L2 distance of client updates from the sample-weighted average.
    pub drift: f64,
    /// Wall-clock duration of the round; excluded from determinism
    /// comparisons.
    pub seconds: f64,
}

/// Mutable server state threaded through rounds.
#[derive(Debug, Clone)]
pub struct FederationState {
    pub round: usize,
    pub weights: ModelWeights,
    /// Per-client sampling weights, aligned with dataset client order;
    /// computed once before round 0.
    pub entropies: Vec<f64>,
}

/// Pre-broadcast geographic alignment: replaces the embedding table with
/// `S* x embedding`, leaving every other layer untouched.
pub fn apply_gaa(
    global: &ModelWeights,
    s: &SpatialWeightMatrix,
) -> Result<ModelWeights, FederationError> {
    assert!(s.is_normalized(), "spatial matrix must be row-normalized");
    let mut out = global.clone();
    out.embedding = crate::geogrid::apply_to_embedding(s, &global.embedding)?;
    Ok(out)
}

/// Uniform sampling without replacement of `k_round` client indices out of
/// `0..n_clients`, ascending, deterministic in `(seed, round)`.
pub fn sample_uniform(n_clients: usize, k_round: usize, seed: u64, round: u64) -> Vec<usize> {
    assert!(
        k_round >= 1 && k_round <= n_clients,
        "k_round must lie in 1..=n_clients"
    );
    let mut rng = seed::stream(&[seed, STREAM_SAMPLE, round]);
    let mut ids = rand::seq::index::sample(&mut rng, n_clients, k_round).into_vec();
    ids.sort_unstable();
    ids
}

/// Entropy-weighted sampling without replacement: selection probability is
/// proportional to each client's entropy. Implemented with exponential keys
/// (`key = u^(1/p)`, keep the `k_round` largest), which is equivalent to
/// sequential weighted draws with renormalization. If fewer than `k_round`
/// clients have positive entropy the draw is ill-posed and the round falls
/// back to uniform sampling with a logged warning.
pub fn sample_ebs(entropies: &[f64], k_round: usize, seed: u64, round: u64) -> Vec<usize> {
    let n = entropies.len();
    assert!(k_round >= 1 && k_round <= n, "k_round must lie in 1..=n");
    assert!(
        entropies.iter().all(|e| e.is_finite() && *e >= 0.0),
        "entropies must be finite and non-negative"
    );
    let positive = entropies.iter().filter(|&&e| e > 0.0).count();
    if positive < k_round {
        log::warn!(
            "round {round}: only {positive} of {n} clients have positive entropy \
             (need {k_round}); falling back to uniform sampling"
        );
        return sample_uniform(n, k_round, seed, round);
    }
    let total: f64 = entropies.iter().sum();
    let mut rng = seed::stream(&[seed, STREAM_SAMPLE, round]);
    let keys: Vec<f64> = entropies
        .iter()
        .map(|&e| {
            let u: f64 = rand::Rng::gen(&mut rng);
            if e > 0.0 {
                u.powf(total / e) // u^(1/p), p = e / total
            } else {
                -1.0 // never beats a real key
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| keys[j].total_cmp(&keys[i]).then(i.cmp(&j)));
    let mut ids: Vec<usize> = order.into_iter().take(k_round).collect();
    ids.sort_unstable();
    ids
}

/// Returns update indices sorted by client id, validating shapes.
fn sorted_congruent(updates: &[ClientUpdate]) -> Result<Vec<usize>, FederationError> {
    if updates.is_empty() {
        return Err(FederationError::EmptyUpdateSet);
    }
    for u in &updates[1..] {
        if !u.weights.same_shape(&updates[0].weights) {
            return Err(FederationError::ShapeMismatch);
        }
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    Ok(order)
}

/// Sample-weighted average of the updates: each client contributes with
/// coefficient `n_k / sum(n)`. Reduction runs in ascending client-id order,
/// so the result is independent of the argument order.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<ModelWeights, FederationError> {
    let order = sorted_congruent(updates)?;
    let n_total: u64 = updates.iter().map(|u| u.n_samples).sum();
    if n_total == 0 {
        return Err(FederationError::EmptyUpdateSet);
    }
    let coef = |i: usize| updates[i].n_samples as f64 / n_total as f64;
    let mut out = updates[order[0]].weights.clone();
    out.scale(coef(order[0]));
    for &i in &order[1..] {
        out.scaled_add_assign(coef(i), &updates[i].weights);
    }
    Ok(out)
}

/// Similarity weights of layer `z`: each client's flattened layer is dotted
/// with the reference layer and scaled by `1/sqrt(d)` (`d` = flattened
/// length); a max-subtracted softmax across the given updates turns the
/// scores into positive weights summing to 1. Output order follows the
/// input order.
pub fn layer_similarity(
    updates: &[&ClientUpdate],
    temp: &ModelWeights,
    layer: usize,
) -> Result<Vec<f64>, FederationError> {
    if updates.is_empty() {
        return Err(FederationError::EmptyUpdateSet);
    }
    let temp_flat = temp.flatten_layer(layer)?;
    let scale = 1.0 / (temp_flat.len() as f64).sqrt();
    let mut scores = Vec::with_capacity(updates.len());
    for u in updates {
        let flat = u.weights.flatten_layer(layer)?;
        if flat.len() != temp_flat.len() {
            return Err(FederationError::ShapeMismatch);
        }
        let dot: f64 = flat.iter().zip(&temp_flat).map(|(a, b)| a * b).sum();
        scores.push(dot * scale);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

fn lwa_with_temp(
    updates: &[ClientUpdate],
    order: &[usize],
    temp: ModelWeights,
    lwa_layers: &[usize],
) -> Result<(ModelWeights, Vec<LayerAlphas>), FederationError> {
    let sorted: Vec<&ClientUpdate> = order.iter().map(|&i| &updates[i]).collect();
    let mut out = temp;
    let mut all_alphas = Vec::with_capacity(lwa_layers.len());
    for layer in 1..=NUM_LAYERS {
        if !lwa_layers.contains(&layer) {
            continue; // keep the sample-weighted average for this layer
        }
        let alphas = layer_similarity(&sorted, &out, layer)?;
        let mut acc = sorted[0].weights.flatten_layer(layer)?;
        for v in acc.iter_mut() {
            *v *= alphas[0];
        }
        for (u, &a) in sorted[1..].iter().zip(&alphas[1..]) {
            let flat = u.weights.flatten_layer(layer)?;
            for (dst, src) in acc.iter_mut().zip(&flat) {
                *dst += a * src;
            }
        }
        out.set_layer(layer, &acc)?;
        all_alphas.push(LayerAlphas { layer, alphas });
    }
    Ok((out, all_alphas))
}

/// Layer-wise similarity aggregation: layers in `lwa_layers` become convex
/// combinations weighted by [`layer_similarity`] against the sample-weighted
/// average; every other layer keeps that average. Also returns the weights
/// per aggregated layer, aligned with ascending client id.
pub fn aggregate_lwa(
    updates: &[ClientUpdate],
    lwa_layers: &[usize],
) -> Result<(ModelWeights, Vec<LayerAlphas>), FederationError> {
    let order = sorted_congruent(updates)?;
    let temp = aggregate_fedavg(updates)?;
    lwa_with_temp(updates, &order, temp, lwa_layers)
}

/// Seed for one client's local training in one round.
fn client_seed(seed: u64, round: usize, client_id: u32) -> u64 {
    seed::mix(&[seed, STREAM_CLIENT, round as u64, client_id as u64])
}

/// Executes one round in order: geographic alignment (if enabled), client
/// sampling, parallel local training from the broadcast weights, sample-
/// weighted averaging (always computed, for the drift metric), the
/// configured aggregation, and evaluation on the union of test splits.
pub fn run_round(
    state: &mut FederationState,
    ds: &FederatedDataset,
    cfg: &FederationConfig,
    s: &SpatialWeightMatrix,
) -> Result<RoundRecord, FederationError> {
    let start = Instant::now();
    let round = state.round;
    if cfg.gaa_enabled {
        state.weights = apply_gaa(&state.weights, s)?;
    }
    let k_round = clients_per_round(cfg.fraction, ds.n_clients());
    let indices = match cfg.sampler {
        Sampler::Uniform => sample_uniform(ds.n_clients(), k_round, cfg.seed, round as u64),
        Sampler::Ebs => sample_ebs(&state.entropies, k_round, cfg.seed, round as u64),
    };

    let broadcast = &state.weights;
    let updates: Vec<ClientUpdate> = indices
        .par_iter()
        .map(|&i| -> Result<ClientUpdate, FederationError> {
            let client = &ds.clients[i];
            if client.train().is_empty() {
                return Err(FederationError::EmptyClient {
                    client_id: client.client_id,
                });
            }
            let fit = model::train_local(
                broadcast,
                client.train(),
                &cfg.hp,
                client_seed(cfg.seed, round, client.client_id),
                cfg.prox_mu,
            )?;
            let train_loss = fit.final_loss();
            Ok(ClientUpdate {
                client_id: client.client_id,
                weights: fit.weights,
                n_samples: client.train_len as u64,
                train_loss,
            })
        })
        .collect::<Result<_, _>>()?;

    let temp = aggregate_fedavg(&updates)?;
    let drift = metrics::client_drift(&updates, &temp);
    let (new_weights, layer_alphas) = match cfg.aggregator {
        Aggregator::FedAvg => (temp, Vec::new()),
        Aggregator::Lwa => {
            let order = sorted_congruent(&updates)?;
            lwa_with_temp(&updates, &order, temp, &cfg.lwa_layers)?
        }
    };

    let test = ds.union_test();
    let k5 = 5.min(new_weights.n_locations());
    let report = metrics::acc_at_k(&new_weights, &test, &[1, k5])?;

    state.weights = new_weights;
    state.round += 1;
    Ok(RoundRecord {
        round,
        participants: indices.iter().map(|&i| ds.clients[i].client_id).collect(),
        layer_alphas,
        acc1: report.acc_at[&1],
        acc5: report.acc_at[&k5],
        drift,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs a full federated experiment: seeded initialization, per-client
/// entropies computed once from the train splits, then `cfg.rounds` rounds.
/// Returns every round record plus the final global weights.
pub fn run_federation(
    ds: &FederatedDataset,
    cfg: &FederationConfig,
    s: &SpatialWeightMatrix,
) -> Result<(Vec<RoundRecord>, ModelWeights), FederationError> {
    cfg.validate()?;
    if ds.clients.is_empty() {
        return Err(FederationError::InvalidConfig("dataset has no clients".into()));
    }
    for c in &ds.clients {
        if c.train().is_empty() {
            return Err(FederationError::EmptyClient {
                client_id: c.client_id,
            });
        }
    }
    let n_locations = ds.grid.n_locations();
    if s.size() != n_locations {
        return Err(FederationError::InvalidConfig(format!(
            "spatial matrix is {} x {} but the grid has {} locations",
            s.size(),
            s.size(),
            n_locations
        )));
    }
    let init = model::init_weights(n_locations, &cfg.hp, seed::mix(&[cfg.seed, STREAM_INIT]));
    let mut state = FederationState {
        round: 0,
        weights: init,
        entropies: ds.train_entropies(),
    };
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        records.push(run_round(&mut state, ds, cfg, s)?);
    }
    Ok((records, state.weights))
}

/// Accuracy snapshot after one centralized epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochAcc {
    pub epoch: usize,
    pub acc1: f64,
    pub acc5: f64,
}

/// Result of centralized training.
#[derive(Debug, Clone)]
pub struct CentralizedFit {
    pub weights: ModelWeights,
    pub epoch_acc: Vec<EpochAcc>,
}

/// Centralized upper bound: pools every client's training split on one
/// server and trains a single model for `hp.local_epochs` epochs, recording
/// union-test accuracy after each. Uses the same initialization discipline
/// as the federated runs for comparability.
pub fn train_centralized(
    ds: &FederatedDataset,
    hp: &HyperParams,
    seed: u64,
) -> Result<CentralizedFit, FederationError> {
    hp.validate().map_err(FederationError::InvalidConfig)?;
    let pooled = ds.pooled_train();
    if pooled.is_empty() {
        return Err(FederationError::Model(ModelError::EmptyDataset));
    }
    let test = ds.union_test();
    if test.is_empty() {
        return Err(FederationError::Metrics(MetricsError::EmptyTestSet));
    }
    let n_locations = ds.grid.n_locations();
    let init = model::init_weights(n_locations, hp, seed::mix(&[seed, STREAM_INIT]));
    let k5 = 5.min(n_locations);
    let mut epoch_acc = Vec::with_capacity(hp.local_epochs);
    let fit = model::fit(
        &init,
        &pooled,
        hp,
        seed::mix(&[seed, STREAM_CLIENT]),
        None,
        |epoch, w| {
            let report =
                metrics::acc_at_k(w, &test, &[1, k5]).expect("test set validated nonempty");
            epoch_acc.push(EpochAcc {
                epoch,
                acc1: report.acc_at[&1],
                acc5: report.acc_at[&k5],
            });
        },
    )?;
    Ok(CentralizedFit {
        weights: fit.weights,
        epoch_acc,
    })
}
