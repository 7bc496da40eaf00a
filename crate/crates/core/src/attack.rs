//! Gradient-matching reconstruction.
//!
//! A dummy batch `x̂` is optimized with Adam so that `g(x̂)` matches the
//! observed gradient, using cosine dissimilarity (or squared L2) plus an
//! optional total-variation penalty, with multiple random restarts.

use log::warn;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Labels, Layer, Model, ParamVector, Tensor};
use crate::probe::gradient_vjp;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchLoss {
    #[default]
    Cosine,
    SquaredL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    #[default]
    StandardNormal,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    #[default]
    Known,
    /// One label for the whole batch, read off the output-bias gradient.
    InferredSingle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub iterations: usize,
    pub match_loss: MatchLoss,
    pub tv_weight: f64,
    pub step_size: f64,
    pub init: InitKind,
    pub labels: LabelMode,
    pub restarts: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            match_loss: MatchLoss::Cosine,
            tv_weight: 0.0,
            step_size: 0.1,
            init: InitKind::StandardNormal,
            labels: LabelMode::Known,
            restarts: 1,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("attack needs at least one iteration"));
        }
        if self.restarts == 0 {
            return Err(Error::config("attack needs at least one restart"));
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return Err(Error::config(format!(
                "tv_weight must be non-negative, got {}",
                self.tv_weight
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }

    /// Step size after the ×0.1 decays at 3/8, 5/8 and 7/8 of the budget.
    pub fn step_at(&self, iter: usize) -> f64 {
        let n = self.iterations;
        let decays = [3, 5, 7].iter().filter(|&&q| iter * 8 >= q * n).count();
        self.step_size * 0.1f64.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    /// Reconstruction in the attacker's sample order.
    pub reconstruction: Tensor,
    pub final_match_loss: f64,
    /// `assignment[i]` is the reconstruction index paired with true sample `i`.
    pub assignment: Vec<usize>,
    pub per_image_mse: Vec<f64>,
    pub mse: f64,
    pub psnr: f64,
    /// Labels the attacker optimized with.
    pub labels: Labels,
    pub warnings: Vec<String>,
}

/// `10 · log₁₀(peak² / mse)`, `+∞` at zero error.
pub fn psnr(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Minimum-cost perfect matching on a square matrix; returns `row → column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn sample_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Pairs true samples with reconstructions to minimize the total MSE.
/// Returns `assignment[true] = recon` and the per-image MSE in true order.
pub fn match_assignment(recon: &Tensor, truth: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    if recon.shape() != truth.shape() || truth.shape().is_empty() {
        return Err(Error::shape(format!(
            "reconstruction {:?} and truth {:?} differ",
            recon.shape(),
            truth.shape()
        )));
    }
    let b = truth.shape()[0];
    let d = truth.len() / b;
    let r = recon.data();
    let t = truth.data();
    let cost: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            (0..b)
                .map(|j| sample_mse(&r[j * d..(j + 1) * d], &t[i * d..(i + 1) * d]))
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    let per_image = (0..b).map(|i| cost[i][assignment[i]]).collect();
    Ok((assignment, per_image))
}

/// Class with the most negative output-bias gradient.
pub fn infer_single_label(model: &Model, observed: &[f64]) -> Result<usize> {
    let layers = &model.spec().layers;
    let last = layers
        .iter()
        .rposition(|l| matches!(l, Layer::Dense { .. }))
        .ok_or_else(|| Error::config("label inference needs a dense output layer"))?;
    if last + 1 != layers.len() {
        return Err(Error::config(
            "label inference needs the dense layer to produce the logits",
        ));
    }
    let Layer::Dense { outputs, bias, .. } = layers[last] else {
        unreachable!()
    };
    if !bias {
        return Err(Error::config("label inference needs an output bias"));
    }
    let seg = model
        .segments()
        .iter()
        .find(|s| s.layer == last && s.name.ends_with("bias"))
        .ok_or_else(|| Error::config("output bias segment missing"))?;
    let b = &observed[seg.start..seg.start + outputs];
    Ok((0..outputs).fold(0, |best, j| if b[j] < b[best] { j } else { best }))
}

/// Anisotropic total variation of `[b, c, h, w]` inputs, mean over pixel pairs,
/// with its subgradient. Zero for inputs without two spatial axes.
fn total_variation(shape: &[usize], x: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; x.len()];
    if shape.len() < 4 {
        return (0.0, grad);
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = x.len() / (h * w);
    let pairs = planes * (h * (w - 1) + (h - 1) * w);
    if pairs == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / pairs as f64;
    let mut tv = 0.0;
    for p in 0..planes {
        let o = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                let i = o + y * w + xx;
                if xx + 1 < w {
                    let d = x[i + 1] - x[i];
                    tv += d.abs();
                    let s = d.signum() * (d != 0.0) as u8 as f64 * scale;
                    grad[i + 1] += s;
                    grad[i] -= s;
                }
                if y + 1 < h {
                    let d = x[i + w] - x[i];
                    tv += d.abs();
                    let s = d.signum() * (d != 0.0) as u8 as f64 * scale;
                    grad[i + w] += s;
                    grad[i] -= s;
                }
            }
        }
    }
    (tv * scale, grad)
}

struct Objective<'a> {
    model: &'a Model,
    params: &'a ParamVector,
    observed: &'a [f64],
    observed_norm: f64,
    loss: MatchLoss,
    tv_weight: f64,
}

impl Objective<'_> {
    /// Match loss and its gradient with respect to the dummy inputs.
    fn eval(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let g = self.model.param_gradient(self.params, batch)?;
        let y = self.observed;
        let (value, cot): (f64, Vec<f64>) = match self.loss {
            MatchLoss::SquaredL2 => {
                let diff: Vec<f64> = g.values.iter().zip(y).map(|(a, b)| a - b).collect();
                let v = diff.iter().map(|d| d * d).sum();
                (v, diff.into_iter().map(|d| 2.0 * d).collect())
            }
            MatchLoss::Cosine => {
                let gn = g.norm_sq().sqrt();
                let dot: f64 = g.values.iter().zip(y).map(|(a, b)| a * b).sum();
                if gn == 0.0 {
                    (1.0, vec![0.0; y.len()])
                } else {
                    let denom = gn * self.observed_norm;
                    let cos = dot / denom;
                    let cot = g
                        .values
                        .iter()
                        .zip(y)
                        .map(|(gi, yi)| -(yi / denom - cos * gi / (gn * gn)))
                        .collect();
                    (1.0 - cos, cot)
                }
            }
        };
        let mut grad = gradient_vjp(self.model, self.params, batch, &cot)?.into_data();
        let mut total = value;
        if self.tv_weight > 0.0 {
            let (tv, tv_grad) = total_variation(batch.inputs.shape(), batch.inputs.data());
            total += self.tv_weight * tv;
            for (a, b) in grad.iter_mut().zip(tv_grad) {
                *a += self.tv_weight * b;
            }
        }
        Ok((total, grad))
    }
}

struct Run {
    x: Vec<f64>,
    loss: f64,
}

fn run_restart(obj: &Objective, template: &Batch, cfg: &AttackConfig, seed: u64) -> Run {
    let mut r = rng::stream(seed, &[]);
    let m = template.input_dim();
    let mut x: Vec<f64> = match cfg.init {
        InitKind::StandardNormal => (0..m).map(|_| r.sample(StandardNormal)).collect(),
        InitKind::Uniform => (0..m).map(|_| r.gen::<f64>()).collect(),
    };
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m1 = vec![0.0; m];
    let mut m2 = vec![0.0; m];
    let mut best = Run {
        x: x.clone(),
        loss: f64::INFINITY,
    };
    for t in 0..=cfg.iterations {
        let Ok(batch) = template.with_inputs(x.clone()) else {
            break;
        };
        let Ok((loss, grad)) = obj.eval(&batch) else {
            break;
        };
        if loss < best.loss {
            best = Run { x: x.clone(), loss };
        }
        if t == cfg.iterations || !grad.iter().all(|v| v.is_finite()) {
            break;
        }
        let lr = cfg.step_at(t);
        let k = (t + 1) as i32;
        let c1 = 1.0 - b1.powi(k);
        let c2 = 1.0 - b2.powi(k);
        for i in 0..m {
            m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
            m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
            x[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
        }
    }
    best
}

/// Reconstructs `truth`'s inputs from the observed gradient values.
///
/// `truth` supplies the batch shape, the labels in [`LabelMode::Known`], and
/// the reference for scoring; the optimization never reads its inputs.
pub fn invert<R: RngCore + ?Sized>(
    model: &Model,
    params: &ParamVector,
    observed: &[f64],
    truth: &Batch,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult> {
    cfg.validate()?;
    model.check_batch(truth)?;
    if observed.len() != params.len() {
        return Err(Error::shape(format!(
            "observed gradient has length {}, expected {}",
            observed.len(),
            params.len()
        )));
    }
    let mut warnings = Vec::new();
    let labels = match cfg.labels {
        LabelMode::Known => truth.labels.clone(),
        LabelMode::InferredSingle => {
            let c = infer_single_label(model, observed)?;
            Labels::Classes(vec![c; truth.size()])
        }
    };
    let observed_norm = observed.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut loss = cfg.match_loss;
    if loss == MatchLoss::Cosine && observed_norm == 0.0 {
        let msg = "observed gradient is zero; cosine loss undefined, using squared-l2".to_string();
        warn!("{msg}");
        warnings.push(msg);
        loss = MatchLoss::SquaredL2;
    }
    let obj = Objective {
        model,
        params,
        observed,
        observed_norm,
        loss,
        tv_weight: cfg.tv_weight,
    };
    let template = Batch::new(
        Tensor::zeros(truth.inputs.shape().to_vec())?,
        labels.clone(),
    )?;
    let base = rng.next_u64();
    let runs: Vec<Run> = (0..cfg.restarts)
        .into_par_iter()
        .map(|k| run_restart(&obj, &template, cfg, rng::derive_seed(base, &[k as u64])))
        .collect();
    let best = runs
        .into_iter()
        .fold(None::<Run>, |acc, r| match acc {
            Some(a) if a.loss <= r.loss => Some(a),
            _ => Some(r),
        })
        .expect("at least one restart");
    if !best.loss.is_finite() {
        warnings.push("every restart diverged; returning the initial guess".into());
    }
    let reconstruction = Tensor::new(truth.inputs.shape().to_vec(), best.x)?;
    let (assignment, per_image_mse) = match_assignment(&reconstruction, &truth.inputs)?;
    let mse = per_image_mse.iter().sum::<f64>() / per_image_mse.len() as f64;
    Ok(AttackResult {
        reconstruction,
        final_match_loss: best.loss,
        assignment,
        per_image_mse,
        mse,
        psnr: psnr(mse, 1.0),
        labels,
        warnings,
    })
}
