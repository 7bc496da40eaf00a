//! Fisher-information traces, the reconstruction-error lower bound and the
//! utility measures of a defense.
//!
//! For a defended observation `y` of `g(x)` the leakage is summarized by
//! `tr J_F(x)`. With diagonal Gaussian noise `tr J_F = Σ_i r_i / Σ_ii`, where
//! `r_i = ‖∇_x g_i(x)‖²`. Any estimator of `x ∈ R^m` then has expected squared
//! error at least `m² / (E tr J_F + m · λ₁(J_P))`.

use serde::{Deserialize, Serialize};

use crate::defense::Audit;
use crate::error::{Error, Result};
use crate::nn::GradVector;
use crate::probe::RowNormEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorSpec {
    #[default]
    Flat,
    IsotropicGaussian {
        variance: f64,
    },
}

impl PriorSpec {
    /// Smallest eigenvalue of the prior information matrix.
    pub fn lambda1(&self) -> f64 {
        match *self {
            PriorSpec::Flat => 0.0,
            PriorSpec::IsotropicGaussian { variance } => 1.0 / variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PriorSpec::Flat => Ok(()),
            PriorSpec::IsotropicGaussian { variance } if variance > 0.0 && variance.is_finite() => {
                Ok(())
            }
            PriorSpec::IsotropicGaussian { variance } => Err(Error::config(format!(
                "prior variance must be positive, got {variance}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    /// Expected `tr J_F`; `+∞` when some coordinate is observed noiselessly.
    pub fisher_trace: f64,
    pub m: usize,
    pub lambda1_prior: f64,
    /// Lower bound on the expected total squared reconstruction error.
    pub bound_value: f64,
    /// `(weight, trace)` pairs of a mixed defense; empty for a single one.
    pub per_defense_traces: Vec<(f64, f64)>,
}

impl BoundReport {
    /// The bound expressed per input scalar, comparable with a per-pixel MSE.
    pub fn per_coordinate(&self) -> f64 {
        self.bound_value / self.m as f64
    }
}

fn check_len(rows: &RowNormEstimate, n: usize, what: &str) -> Result<()> {
    if rows.len() != n {
        return Err(Error::shape(format!(
            "{} row norms for {n} {what}",
            rows.len()
        )));
    }
    Ok(())
}

/// `Σ_i r_i / Σ_ii`; coordinates with `r_i = 0` contribute nothing.
pub fn fisher_trace_noise(rows: &RowNormEstimate, sigma: &[f64]) -> Result<f64> {
    check_len(rows, sigma.len(), "variances")?;
    let mut trace = 0.0;
    for (i, (&r, &s)) in rows.values.iter().zip(sigma).enumerate() {
        if r == 0.0 {
            continue;
        }
        if s <= 0.0 {
            return Err(Error::InfiniteInformation { index: i });
        }
        trace += r / s;
    }
    Ok(trace)
}

/// `(1/ε) Σ_{i∉A} r_i` for pruning followed by `N(0, ε)` on the survivors.
///
/// `ε = 0` means noiseless pruning: the trace is `+∞` unless every surviving
/// coordinate is insensitive to the input.
pub fn fisher_trace_prune(rows: &RowNormEstimate, pruned_set: &[usize], eps: f64) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::config(format!(
            "pruning noise must be non-negative, got {eps}"
        )));
    }
    let mut kept = vec![true; rows.len()];
    for &i in pruned_set {
        if i >= rows.len() {
            return Err(Error::shape(format!(
                "pruned index {i} out of range for {} parameters",
                rows.len()
            )));
        }
        kept[i] = false;
    }
    let retained: f64 = rows
        .values
        .iter()
        .zip(&kept)
        .filter(|(_, k)| **k)
        .map(|(r, _)| r)
        .sum();
    if retained == 0.0 {
        return Ok(0.0);
    }
    if eps == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(retained / eps)
}

/// Trace for an arbitrary defended observation, read from its audit.
///
/// Pruned coordinates carry no information. Clipped coordinates are locally
/// constant in `x`, so their sensitivity is zero. The rest contribute
/// `r_i / Σ_ii`, which is `+∞` when they are observed without noise.
pub fn fisher_trace_audit(rows: &RowNormEstimate, audit: &Audit) -> Result<f64> {
    let d = rows.len();
    let mut informative = vec![true; d];
    for &i in audit.pruned_set.iter().chain(&audit.clip_mask) {
        if i >= d {
            return Err(Error::shape(format!(
                "audit index {i} out of range for {d} parameters"
            )));
        }
        informative[i] = false;
    }
    if let Some(s) = &audit.sigma_used {
        check_len(rows, s.len(), "variances")?;
    }
    let mut trace = 0.0;
    for i in 0..d {
        let r = rows.values[i];
        if !informative[i] || r == 0.0 {
            continue;
        }
        match audit.sigma_used.as_ref().map(|s| s[i]) {
            Some(s) if s > 0.0 => trace += r / s,
            _ => return Ok(f64::INFINITY),
        }
    }
    Ok(trace)
}

/// Mean of per-batch traces, in input order.
pub fn expected_trace(traces: &[f64]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::config("expected trace over an empty set of batches"));
    }
    Ok(traces.iter().sum::<f64>() / traces.len() as f64)
}

fn bound(trace: f64, m: usize, lambda1: f64) -> f64 {
    let m = m as f64;
    let denom = trace + m * lambda1;
    if trace.is_infinite() {
        0.0
    } else if denom == 0.0 {
        f64::INFINITY
    } else {
        m * m / denom
    }
}

/// `m² / (tr + m · λ₁)`; `+∞` when neither data nor prior are informative.
pub fn reconstruction_bound(fisher_trace: f64, m: usize, prior: &PriorSpec) -> Result<BoundReport> {
    if m == 0 {
        return Err(Error::config("data dimension must be at least 1"));
    }
    if !(fisher_trace >= 0.0) {
        return Err(Error::config(format!(
            "Fisher trace must be non-negative, got {fisher_trace}"
        )));
    }
    prior.validate()?;
    let lambda1 = prior.lambda1();
    Ok(BoundReport {
        fisher_trace,
        m,
        lambda1_prior: lambda1,
        bound_value: bound(fisher_trace, m, lambda1),
        per_defense_traces: Vec::new(),
    })
}

/// Bound for a defense drawn at random from weighted components.
pub fn mixed_bound(traces: &[(f64, f64)], m: usize, prior: &PriorSpec) -> Result<BoundReport> {
    if traces.is_empty() {
        return Err(Error::config("mixture has no components"));
    }
    if let Some(&(w, _)) = traces.iter().find(|(w, _)| !(*w >= 0.0)) {
        return Err(Error::config(format!(
            "mixture weight must be non-negative, got {w}"
        )));
    }
    let total: f64 = traces.iter().map(|(w, _)| w).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "mixture weights sum to {total}, not 1"
        )));
    }
    let trace: f64 = traces
        .iter()
        .filter(|(w, _)| *w > 0.0)
        .map(|(w, t)| w * t)
        .sum();
    let mut report = reconstruction_bound(trace, m, prior)?;
    report.per_defense_traces = traces.to_vec();
    Ok(report)
}

/// `E Σ_i g_i · E[y_i]`, averaged over batches.
pub fn utility_first_order(batches: &[(GradVector, Audit)]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::config("utility over an empty set of batches"));
    }
    let mut acc = 0.0;
    for (g, audit) in batches {
        let mean = audit.expected_observation(g);
        acc += g.values.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(acc / batches.len() as f64)
}

/// `−Σ_i E[g_i²] Σ_ii`.
pub fn utility_second_order(batches: &[GradVector], sigma: &[f64]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::config("utility over an empty set of batches"));
    }
    let mut acc = 0.0;
    for g in batches {
        if g.len() != sigma.len() {
            return Err(Error::shape(format!(
                "{} variances for a gradient of length {}",
                sigma.len(),
                g.len()
            )));
        }
        acc += g
            .values
            .iter()
            .zip(sigma)
            .map(|(a, s)| a * a * s)
            .sum::<f64>();
    }
    Ok(-acc / batches.len() as f64)
}

/// `λ` that brings `−Σ g_i² λ base_i` to `−budget`.
pub fn lambda_for_utility(g: &GradVector, base: &[f64], budget: f64) -> f64 {
    let cost: f64 = g.values.iter().zip(base).map(|(a, b)| a * a * b).sum();
    if cost > 0.0 {
        budget / cost
    } else {
        0.0
    }
}

/// `λ` that brings `‖λ · base‖₂` to `target`.
pub fn lambda_for_frobenius(base: &[f64], target: f64) -> f64 {
    let norm = base.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        target / norm
    } else {
        0.0
    }
}
