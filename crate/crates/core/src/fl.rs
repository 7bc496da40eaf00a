//! Federated training simulation and privacy/utility sweeps.
//!
//! Each round every client samples a minibatch from its shard, computes and
//! defends its gradient, and the server applies the size-weighted average
//! with SGD or Adam.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{invert, match_assignment, psnr, AttackConfig};
use crate::bounds::{fisher_trace_audit, reconstruction_bound, PriorSpec};
use crate::data::metrics::MetricRow;
use crate::data::Dataset;
use crate::defense::{defend, Audit, DefendedGradient, DefenseSpec};
use crate::error::{Error, Result};
use crate::nn::{Batch, GradVector, Model, ParamVector, Tensor};
use crate::probe::{exact_row_norms, sketch_row_norms_with, RowNormEstimate, EXACT_LIMIT};
use crate::rng::{self, StreamRng};

const TAG_SHARD: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_CLIENT: u64 = 3;
const TAG_ATTACK: u64 = 4;
const TAG_BOUND: u64 = 5;
const TAG_INIT: u64 = 6;

/// Initial parameters of a run.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSource {
    Fixed(ParamVector),
    /// Fresh initialization from the run's seed.
    Seeded,
}

impl ParamSource {
    pub fn resolve(&self, model: &Model, seed: u64) -> Result<ParamVector> {
        match self {
            ParamSource::Fixed(p) => model.params(p.values.clone()),
            ParamSource::Seeded => Ok(model.init_params(&mut rng::stream(seed, &[TAG_INIT]))),
        }
    }
}

/// A value shared by all clients or given per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerClient<T> {
    Each(Vec<T>),
    All(T),
}

impl<T: Default> Default for PerClient<T> {
    fn default() -> Self {
        PerClient::All(T::default())
    }
}

impl<T: Clone> PerClient<T> {
    pub fn get(&self, i: usize) -> &T {
        match self {
            PerClient::All(v) => v,
            PerClient::Each(v) => &v[i],
        }
    }

    fn check(&self, n: usize, what: &str) -> Result<()> {
        match self {
            PerClient::Each(v) if v.len() != n => Err(Error::config(format!(
                "{what} lists {} entries for {n} clients",
                v.len()
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ServerOptimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl ServerOptimizer {
    pub fn adam(lr: f64) -> Self {
        ServerOptimizer::Adam {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }

    fn lr(&self) -> f64 {
        match *self {
            ServerOptimizer::Sgd { lr } | ServerOptimizer::Adam { lr, .. } => lr,
        }
    }
}

/// What the attacker observes in sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationMode {
    /// The weighted average of all client observations.
    #[default]
    Averaged,
    /// Each client's observation separately.
    PerClient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FLConfig {
    pub num_clients: usize,
    /// Shard sizes; `None` splits the dataset evenly.
    pub shard_sizes: Option<Vec<usize>>,
    pub per_round_samples: PerClient<usize>,
    /// Set from the experiment's defense sections, not from `[fl]`.
    #[serde(skip)]
    pub defense: PerClient<DefenseSpec>,
    pub server_optimizer: ServerOptimizer,
    pub rounds: usize,
    pub seed: u64,
    /// Recompute row norms every this many rounds.
    pub refresh_every: usize,
    /// Training samples used for the evaluation loss.
    pub eval_samples: usize,
    pub smoothing_window: usize,
    pub observation: ObservationMode,
}

impl Default for FLConfig {
    fn default() -> Self {
        Self {
            num_clients: 4,
            shard_sizes: None,
            per_round_samples: PerClient::All(8),
            defense: PerClient::All(DefenseSpec::None),
            server_optimizer: ServerOptimizer::adam(1e-3),
            rounds: 100,
            seed: 0,
            refresh_every: 1,
            eval_samples: 64,
            smoothing_window: 8,
            observation: ObservationMode::Averaged,
        }
    }
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_clients;
        if n == 0 {
            return Err(Error::config("at least one client is required"));
        }
        self.per_round_samples.check(n, "per_round_samples")?;
        self.defense.check(n, "defense")?;
        for i in 0..n {
            if *self.per_round_samples.get(i) == 0 {
                return Err(Error::config(
                    "clients must use at least one sample per round",
                ));
            }
            self.defense.get(i).validate()?;
        }
        if let Some(s) = &self.shard_sizes {
            if s.len() != n {
                return Err(Error::config(format!(
                    "{} shard sizes for {n} clients",
                    s.len()
                )));
            }
        }
        let lr = self.server_optimizer.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if self.refresh_every == 0 || self.smoothing_window == 0 {
            return Err(Error::config(
                "refresh_every and smoothing_window must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn with_defense(&self, d: DefenseSpec) -> Self {
        Self {
            defense: PerClient::All(d),
            ..self.clone()
        }
    }

    /// Client index ranges into a seeded permutation of the dataset.
    fn shards(&self, ds: &Dataset) -> Result<Vec<Vec<usize>>> {
        let n = self.num_clients;
        let sizes = match &self.shard_sizes {
            Some(s) => s.clone(),
            None => (0..n)
                .map(|i| ds.len() / n + (i < ds.len() % n) as usize)
                .collect(),
        };
        let total: usize = sizes.iter().sum();
        if total > ds.len() {
            return Err(Error::config(format!(
                "shards need {total} samples, the dataset has {}",
                ds.len()
            )));
        }
        let perm = ds.shuffled_indices(&mut rng::stream(self.seed, &[TAG_SHARD]));
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        for (i, &s) in sizes.iter().enumerate() {
            let k = *self.per_round_samples.get(i);
            if k > s {
                return Err(Error::config(format!(
                    "client {i} samples {k} per round from a shard of {s}"
                )));
            }
            out.push(perm[start..start + s].to_vec());
            start += s;
        }
        Ok(out)
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientStep {
    pub loss: f64,
    pub gradient: GradVector,
    pub rows: Option<RowNormEstimate>,
    pub defended: DefendedGradient,
}

fn effective_defense(model: &Model, spec: &DefenseSpec) -> DefenseSpec {
    if model.has_relu() {
        spec.clone().with_relu_cap()
    } else {
        spec.clone()
    }
}

/// Gradient and defense of one client; `cached` rows are reused when given.
pub fn client_step<R: Rng + ?Sized>(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    defense: &DefenseSpec,
    cached: Option<&RowNormEstimate>,
    rng: &mut R,
) -> Result<ClientStep> {
    let defense = effective_defense(model, defense);
    let (loss, gradient) = model.loss_and_param_gradient(params, batch)?;
    let rows = match (defense.sketch(), cached) {
        (None, _) => None,
        (Some(_), Some(r)) => Some(r.clone()),
        (Some((k, method)), None) => {
            Some(sketch_row_norms_with(model, params, batch, k, rng, method)?)
        }
    };
    let defended = defend(&gradient, &defense, rows.as_ref(), rng)?;
    Ok(ClientStep {
        loss,
        gradient,
        rows,
        defended,
    })
}

/// The defended gradient a client shares.
pub fn client_round<R: Rng + ?Sized>(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    defense: &DefenseSpec,
    rng: &mut R,
) -> Result<DefendedGradient> {
    client_step(model, params, batch, defense, None, rng).map(|s| s.defended)
}

/// `Σ w_i y_i / Σ w_i`.
pub fn aggregate(observations: &[&[f64]], weights: &[f64]) -> Result<GradVector> {
    let first = observations
        .first()
        .ok_or_else(|| Error::config("nothing to aggregate"))?;
    if weights.len() != observations.len() {
        return Err(Error::shape(format!(
            "{} weights for {} observations",
            weights.len(),
            observations.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
        return Err(Error::config(format!(
            "aggregation weights must be positive, got {w}"
        )));
    }
    let d = first.len();
    if let Some(o) = observations.iter().find(|o| o.len() != d) {
        return Err(Error::shape(format!(
            "observation lengths {} and {d} differ",
            o.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; d];
    for (o, w) in observations.iter().zip(weights) {
        for (a, v) in out.iter_mut().zip(o.iter()) {
            *a += w * v;
        }
    }
    for a in &mut out {
        *a /= total;
    }
    Ok(GradVector::new(out))
}

struct ServerState {
    opt: ServerOptimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ServerState {
    fn new(opt: ServerOptimizer, d: usize) -> Self {
        Self {
            opt,
            m: vec![0.0; d],
            v: vec![0.0; d],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.opt {
            ServerOptimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            ServerOptimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    /// 1-based round index.
    pub round: usize,
    /// Loss on the round's union minibatch before the update.
    pub train_loss: f64,
    /// Loss on the evaluation samples after the update.
    pub eval_loss: f64,
    /// Trailing mean of `train_loss` over the smoothing window.
    pub smoothed_loss: f64,
    pub u1: f64,
    pub u2: f64,
    pub noise_frobenius: f64,
    pub prune_ratio: f64,
    /// Mean client `tr J_F`, when row norms were computed.
    pub fisher_trace: Option<f64>,
    /// Mean noise variance per parameterized layer; empty without noise.
    pub layer_sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Layer indices matching [`RoundLog::layer_sigma`].
    pub sigma_layers: Vec<usize>,
    pub rounds: Vec<RoundLog>,
}

/// Everything the clients shared in one round, plus local state an
/// evaluation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundCapture {
    pub params: ParamVector,
    pub batches: Vec<Batch>,
    pub steps: Vec<ClientStep>,
    pub weights: Vec<f64>,
    pub aggregated: GradVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub log: TrainLog,
    pub params: ParamVector,
    pub first_round: Option<RoundCapture>,
}

fn layer_means(model: &Model, audits: &[&Audit]) -> (Vec<usize>, Vec<f64>) {
    let mut layers: Vec<usize> = model.segments().iter().map(|s| s.layer).collect();
    layers.dedup();
    let noisy: Vec<&Vec<f64>> = audits
        .iter()
        .filter_map(|a| a.sigma_used.as_ref())
        .collect();
    if noisy.is_empty() {
        return (layers, Vec::new());
    }
    let means = layers
        .iter()
        .map(|&l| {
            let (mut sum, mut count) = (0.0, 0usize);
            for s in model.segments().iter().filter(|s| s.layer == l) {
                for sig in &noisy {
                    sum += sig[s.start..s.start + s.len].iter().sum::<f64>();
                }
                count += s.len * noisy.len();
            }
            sum / count as f64
        })
        .collect();
    (layers, means)
}

fn as_diverged(e: Error, round: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { round },
        other => other,
    }
}

/// Runs `cfg.rounds` federated rounds from `init`.
pub fn train(
    model: &Model,
    init: &ParamVector,
    dataset: &Dataset,
    cfg: &FLConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let shards = cfg.shards(dataset)?;
    let n = cfg.num_clients;
    let eval_idx: Vec<usize> = {
        let perm = dataset.shuffled_indices(&mut rng::stream(cfg.seed, &[TAG_SHARD]));
        perm[..cfg.eval_samples.min(perm.len()).max(1)].to_vec()
    };
    let eval_batch = dataset.batch(&eval_idx)?;
    model.check_batch(&eval_batch)?;
    let mut params = model.params(init.values.clone())?;
    let mut server = ServerState::new(cfg.server_optimizer, params.len());
    let mut cache: Vec<Option<RowNormEstimate>> = vec![None; n];
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut first_round = None;
    let mut sigma_layers = Vec::new();

    for r in 0..cfg.rounds {
        let round = r + 1;
        let batches: Vec<Batch> = (0..n)
            .map(|i| {
                let k = *cfg.per_round_samples.get(i);
                let mut rs = rng::stream(cfg.seed, &[TAG_SAMPLE, r as u64, i as u64]);
                let picks: Vec<usize> = index::sample(&mut rs, shards[i].len(), k)
                    .into_iter()
                    .map(|j| shards[i][j])
                    .collect();
                dataset.batch(&picks)
            })
            .collect::<Result<_>>()?;
        let refresh = r % cfg.refresh_every == 0;
        let steps: Vec<ClientStep> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rc: StreamRng = rng::stream(cfg.seed, &[TAG_CLIENT, r as u64, i as u64]);
                let cached = if refresh { None } else { cache[i].as_ref() };
                client_step(
                    model,
                    &params,
                    &batches[i],
                    cfg.defense.get(i),
                    cached,
                    &mut rc,
                )
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<_>>()
            .map_err(|e| as_diverged(e, round))?;
        for (i, s) in steps.iter().enumerate() {
            if s.rows.is_some() {
                cache[i] = s.rows.clone();
            }
        }
        let weights: Vec<f64> = batches.iter().map(|b| b.size() as f64).collect();
        let wsum: f64 = weights.iter().sum();
        let obs: Vec<&[f64]> = steps.iter().map(|s| s.defended.values.as_slice()).collect();
        let aggregated = aggregate(&obs, &weights)?;
        let train_loss = steps
            .iter()
            .zip(&weights)
            .map(|(s, w)| s.loss * w)
            .sum::<f64>()
            / wsum;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { round });
        }

        let nf = n as f64;
        let mut u1 = 0.0;
        let mut u2 = 0.0;
        let mut fro = 0.0;
        let mut pruned = 0.0;
        let mut trace = Some(0.0);
        for s in &steps {
            let g = &s.gradient;
            let mean = s.defended.audit.expected_observation(g);
            u1 += g.values.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>() / nf;
            if let Some(sig) = &s.defended.audit.sigma_used {
                u2 -= g
                    .values
                    .iter()
                    .zip(sig)
                    .map(|(a, v)| a * a * v)
                    .sum::<f64>()
                    / nf;
            }
            fro += s.defended.audit.noise_frobenius() / nf;
            pruned += s.defended.audit.pruned_set.len() as f64 / g.len() as f64 / nf;
            trace = match (trace, &s.rows) {
                (Some(t), Some(rows)) => {
                    Some(t + fisher_trace_audit(rows, &s.defended.audit)? / nf)
                }
                _ => None,
            };
        }
        let audits: Vec<&Audit> = steps.iter().map(|s| &s.defended.audit).collect();
        let (layers, layer_sigma) = layer_means(model, &audits);
        sigma_layers = layers;

        if r == 0 {
            first_round = Some(RoundCapture {
                params: params.clone(),
                batches: batches.clone(),
                steps: steps.clone(),
                weights: weights.clone(),
                aggregated: aggregated.clone(),
            });
        }

        server.step(&mut params.values, &aggregated.values);
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { round });
        }
        let eval_loss = model
            .loss(&params, &eval_batch)
            .map_err(|e| as_diverged(e, round))?;
        let w = cfg.smoothing_window.min(rounds.len() + 1);
        let smoothed_loss = (rounds[rounds.len() + 1 - w..]
            .iter()
            .map(|l: &RoundLog| l.train_loss)
            .sum::<f64>()
            + train_loss)
            / w as f64;
        log::debug!("round {round}: train {train_loss:.6} eval {eval_loss:.6}");
        rounds.push(RoundLog {
            round,
            train_loss,
            eval_loss,
            smoothed_loss,
            u1,
            u2,
            noise_frobenius: fro,
            prune_ratio: pruned,
            fisher_trace: trace,
            layer_sigma,
        });
    }
    Ok(TrainOutput {
        log: TrainLog {
            sigma_layers,
            rounds,
        },
        params,
        first_round,
    })
}

/// `(mse, psnr)` after optimal pairing of reconstructions with the truth.
pub fn mse_psnr(recon: &Tensor, truth: &Tensor, peak: f64) -> Result<(f64, f64)> {
    if !(peak > 0.0) {
        return Err(Error::config(format!("peak must be positive, got {peak}")));
    }
    let (_, per) = match_assignment(recon, truth)?;
    let mse = per.iter().sum::<f64>() / per.len() as f64;
    Ok((mse, psnr(mse, peak)))
}

/// How sweeps obtain row norms for the bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BoundRows {
    Exact,
    Sketch {
        k: usize,
    },
    /// Exact when the Jacobian is small enough, else a sketch with `k` directions.
    Auto {
        k: usize,
    },
}

impl Default for BoundRows {
    fn default() -> Self {
        BoundRows::Auto { k: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub experiment_id: String,
    pub seeds: Vec<u64>,
    /// Training updates per point.
    pub rounds: usize,
    pub prior: PriorSpec,
    pub bound_rows: BoundRows,
    pub peak: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            experiment_id: "sweep".into(),
            seeds: vec![0],
            rounds: 5,
            prior: PriorSpec::Flat,
            bound_rows: BoundRows::default(),
            peak: 1.0,
        }
    }
}

/// Row norms used for the bound of client `i`, seeded independently of training.
pub fn bound_row_norms(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    how: BoundRows,
    seed: u64,
    i: usize,
) -> Result<RowNormEstimate> {
    let mut r = rng::stream(seed, &[TAG_BOUND, i as u64]);
    let exact_ok = batch.input_dim().saturating_mul(params.len()) <= EXACT_LIMIT;
    match how {
        BoundRows::Exact => exact_row_norms(model, params, batch),
        BoundRows::Auto { .. } if exact_ok => exact_row_norms(model, params, batch),
        BoundRows::Sketch { k } | BoundRows::Auto { k } => {
            sketch_row_norms_with(model, params, batch, k, &mut r, Default::default())
        }
    }
}

/// Attack, bound and utility of one defense at one seed.
#[allow(clippy::too_many_arguments)]
pub fn sweep_point(
    model: &Model,
    init: &ParamSource,
    dataset: &Dataset,
    defense: &DefenseSpec,
    fl: &FLConfig,
    attack: &AttackConfig,
    sweep: &SweepConfig,
    seed: u64,
) -> Result<MetricRow> {
    let cfg = FLConfig {
        rounds: sweep.rounds.max(1),
        seed,
        ..fl.with_defense(defense.clone())
    };
    let out = train(model, &init.resolve(model, seed)?, dataset, &cfg)?;
    let cap = out.first_round.expect("at least one round");
    let n = cap.steps.len();
    let nf = n as f64;

    let mut traces = Vec::with_capacity(n);
    for (i, (b, s)) in cap.batches.iter().zip(&cap.steps).enumerate() {
        let rows = bound_row_norms(model, &cap.params, b, sweep.bound_rows, seed, i)?;
        traces.push(fisher_trace_audit(&rows, &s.defended.audit)?);
    }
    let dims: Vec<usize> = cap.batches.iter().map(|b| b.input_dim()).collect();
    let m_total: usize = dims.iter().sum();
    let trace_total: f64 = traces.iter().sum();

    let (mse, bound_value) = match fl.observation {
        ObservationMode::Averaged => {
            let refs: Vec<&Batch> = cap.batches.iter().collect();
            let truth = Batch::concat(&refs)?;
            let mut ra = rng::stream(seed, &[TAG_ATTACK, 0]);
            let res = invert(
                model,
                &cap.params,
                &cap.aggregated.values,
                &truth,
                attack,
                &mut ra,
            )?;
            let b = reconstruction_bound(trace_total, m_total, &sweep.prior)?;
            (res.mse, b.bound_value)
        }
        ObservationMode::PerClient => {
            let results: Vec<Result<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut ra = rng::stream(seed, &[TAG_ATTACK, i as u64]);
                    let y = &cap.steps[i].defended.values;
                    invert(model, &cap.params, y, &cap.batches[i], attack, &mut ra).map(|r| r.mse)
                })
                .collect();
            let mut sq = 0.0;
            for (r, &m) in results.into_iter().zip(&dims) {
                sq += r? * m as f64;
            }
            let mut total_bound = 0.0;
            for (&t, &m) in traces.iter().zip(&dims) {
                total_bound += reconstruction_bound(t, m, &sweep.prior)?.bound_value;
            }
            (sq / m_total as f64, total_bound)
        }
    };
    let last = out.log.rounds.last().expect("at least one round");
    let fro = cap
        .steps
        .iter()
        .map(|s| s.defended.audit.noise_frobenius())
        .sum::<f64>()
        / nf;
    let ratio = cap
        .steps
        .iter()
        .map(|s| s.defended.audit.pruned_set.len() as f64 / s.gradient.len() as f64)
        .sum::<f64>()
        / nf;
    Ok(MetricRow {
        experiment_id: sweep.experiment_id.clone(),
        defense: defense.descriptor(),
        seed,
        round: Some(last.round),
        mse: Some(mse),
        psnr: Some(psnr(mse, sweep.peak)),
        train_loss: Some(last.eval_loss),
        fisher_trace: Some(trace_total),
        bound_value: Some(bound_value),
        noise_frobenius: Some(fro),
        prune_ratio: Some(ratio),
        wall_time: None,
    })
}

/// One row per (defense, seed), ordered by defense then seed.
pub fn sweep(
    model: &Model,
    init: &ParamSource,
    dataset: &Dataset,
    grid: &[DefenseSpec],
    fl: &FLConfig,
    attack: &AttackConfig,
    cfg: &SweepConfig,
) -> Result<Vec<MetricRow>> {
    if grid.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::config("sweep needs at least one seed"));
    }
    fl.validate()?;
    attack.validate()?;
    let jobs: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|g| cfg.seeds.iter().map(move |&s| (g, s)))
        .collect();
    jobs.par_iter()
        .map(|&(g, s)| sweep_point(model, init, dataset, &grid[g], fl, attack, cfg, s))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}
