//! Sensitivity of the parameter gradient to the input.
//!
//! Every optimal defense needs the squared row norms `‖∇_x g_i(x)‖²` of the
//! Jacobian of `g(x) = ∇_Θ L(x, Θ)` with respect to the (flattened) batch
//! `x`. The Jacobian is `d × m` and far too large to materialize for real
//! models, so [`sketch_row_norms`] estimates all `d` row norms at once from
//! `k` Jacobian-vector products along Gaussian directions:
//!
//! ```text
//! r̂_i = (1/k) Σ_j (J v_j)_i²,   v_j ~ N(0, I_m)
//! ```
//!
//! Each `(J v_j)_i` is `N(0, ‖J_i‖²)`, so `k·r̂_i / ‖J_i‖²` is `χ²(k)` and
//! Chebyshev gives `P(|r̂_i − ‖J_i‖²| > ε‖J_i‖²) ≤ 2/(kε²)`.
//!
//! Jacobian-vector products are computed forward-over-reverse: the batch is
//! lifted to dual numbers `x + α v` and the ordinary reverse-mode gradient
//! pass is run on them, so the tangent of every gradient component is
//! `∂g_i(x + α v)/∂α` at `α = 0`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Dual, GradVector, Model, ParamVector, Tensor};
use crate::rng;

/// Refuse exact Jacobians with more entries than this.
pub const EXACT_LIMIT: usize = 10_000_000;

/// Directions per work unit; fixes the floating-point reduction order.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JvpMethod {
    /// Dual-number tangent threaded through reverse mode.
    #[default]
    ForwardOverReverse,
    /// `(g(x + h v) − g(x − h v)) / 2h` with `h = 1e-4 · max(1, ‖x‖∞)`.
    CentralDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowNormMethod {
    Sketch,
    Exact,
}

/// Per-parameter estimates of `‖∇_x g_i(x)‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowNormEstimate {
    pub values: Vec<f64>,
    /// Directions used (`m` for the exact method).
    pub k: usize,
    pub method: RowNormMethod,
}

impl RowNormEstimate {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scales every entry; used for tests and for combining estimates.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

fn check_direction(batch: &Batch, direction: &Tensor) -> Result<()> {
    if direction.shape() != batch.inputs.shape() {
        return Err(Error::shape(format!(
            "direction has shape {:?}, the batch is {:?}",
            direction.shape(),
            batch.inputs.shape()
        )));
    }
    Ok(())
}

/// `J v`: derivative of every parameter-gradient component along `direction`.
pub fn grad_directional_derivative(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    direction: &Tensor,
) -> Result<GradVector> {
    grad_directional_derivative_with(
        model,
        params,
        batch,
        direction,
        JvpMethod::ForwardOverReverse,
    )
}

pub fn grad_directional_derivative_with(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    direction: &Tensor,
    method: JvpMethod,
) -> Result<GradVector> {
    check_direction(batch, direction)?;
    model.check_batch(batch)?;
    match method {
        JvpMethod::ForwardOverReverse => {
            let p: Vec<Dual> = params.values.iter().map(|&v| Dual::new(v, 0.0)).collect();
            let x: Vec<Dual> = batch
                .inputs
                .data()
                .iter()
                .zip(direction.data())
                .map(|(&v, &t)| Dual::new(v, t))
                .collect();
            let eval = model.evaluate(&p, &x, &batch.labels, batch.size(), true, false)?;
            Ok(GradVector::new(
                eval.param_grad.iter().map(|d| d.du).collect(),
            ))
        }
        JvpMethod::CentralDifference => {
            let xs = batch.inputs.data();
            let inf = xs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let h = 1e-4 * inf.max(1.0);
            let shifted = |sign: f64| -> Result<GradVector> {
                let data = xs
                    .iter()
                    .zip(direction.data())
                    .map(|(&v, &t)| v + sign * h * t)
                    .collect();
                model.param_gradient(params, &batch.with_inputs(data)?)
            };
            let plus = shifted(1.0)?;
            let minus = shifted(-1.0)?;
            Ok(GradVector::new(
                plus.values
                    .iter()
                    .zip(&minus.values)
                    .map(|(a, b)| (a - b) / (2.0 * h))
                    .collect(),
            ))
        }
    }
}

/// `Jᵀ u = ∇_x (u · g(x))`, computed as the derivative of the input gradient
/// along the parameter direction `u`.
pub fn gradient_vjp(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    cotangent: &[f64],
) -> Result<Tensor> {
    if cotangent.len() != params.len() {
        return Err(Error::shape(format!(
            "cotangent has length {}, expected {}",
            cotangent.len(),
            params.len()
        )));
    }
    model.check_batch(batch)?;
    let p: Vec<Dual> = params
        .values
        .iter()
        .zip(cotangent)
        .map(|(&v, &u)| Dual::new(v, u))
        .collect();
    let x: Vec<Dual> = batch
        .inputs
        .data()
        .iter()
        .map(|&v| Dual::new(v, 0.0))
        .collect();
    let eval = model.evaluate(&p, &x, &batch.labels, batch.size(), false, true)?;
    Tensor::new(
        batch.inputs.shape().to_vec(),
        eval.input_grad.iter().map(|d| d.du).collect(),
    )
}

/// Randomized estimate of all row norms from `k` Gaussian directions.
pub fn sketch_row_norms<R: Rng + ?Sized>(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    k: usize,
    rng: &mut R,
) -> Result<RowNormEstimate> {
    sketch_row_norms_with(model, params, batch, k, rng, JvpMethod::ForwardOverReverse)
}

pub fn sketch_row_norms_with<R: Rng + ?Sized>(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
    k: usize,
    rng: &mut R,
    method: JvpMethod,
) -> Result<RowNormEstimate> {
    if k == 0 {
        return Err(Error::config("sketch needs at least one direction"));
    }
    model.check_batch(batch)?;
    let base: u64 = rng.gen();
    let d = params.len();
    let m = batch.input_dim();
    let shape = batch.inputs.shape().to_vec();
    let chunks: Vec<usize> = (0..k).step_by(CHUNK).collect();
    let partials: Vec<Result<Vec<f64>>> = chunks
        .par_iter()
        .map(|&start| {
            let mut acc = vec![0.0; d];
            for j in start..(start + CHUNK).min(k) {
                let mut r = rng::stream(base, &[j as u64]);
                let v: Vec<f64> = (0..m).map(|_| r.sample(StandardNormal)).collect();
                let dir = Tensor::new(shape.clone(), v)?;
                let jv = grad_directional_derivative_with(model, params, batch, &dir, method)?;
                for (a, x) in acc.iter_mut().zip(&jv.values) {
                    *a += x * x;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![0.0; d];
    for p in partials {
        for (t, x) in total.iter_mut().zip(p?) {
            *t += x;
        }
    }
    let inv = 1.0 / k as f64;
    Ok(RowNormEstimate {
        values: total.into_iter().map(|v| v * inv).collect(),
        k,
        method: RowNormMethod::Sketch,
    })
}

/// Exact row norms from `m` basis-direction derivatives; testing oracle.
pub fn exact_row_norms(
    model: &Model,
    params: &ParamVector,
    batch: &Batch,
) -> Result<RowNormEstimate> {
    let d = params.len();
    let m = batch.input_dim();
    let size = m.saturating_mul(d);
    if size > EXACT_LIMIT {
        return Err(Error::TooLarge {
            size,
            limit: EXACT_LIMIT,
        });
    }
    model.check_batch(batch)?;
    let shape = batch.inputs.shape().to_vec();
    let columns: Vec<Result<Vec<f64>>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            let dir = Tensor::new(shape.clone(), e)?;
            Ok(grad_directional_derivative(model, params, batch, &dir)?.values)
        })
        .collect();
    let mut total = vec![0.0; d];
    for c in columns {
        for (t, x) in total.iter_mut().zip(c?) {
            *t += x * x;
        }
    }
    Ok(RowNormEstimate {
        values: total,
        k: m,
        method: RowNormMethod::Exact,
    })
}
