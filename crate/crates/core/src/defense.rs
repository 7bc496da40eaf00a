//! Gradient defenses.
//!
//! Baselines: Gaussian gradient noise, per-coordinate clipping plus noise
//! (the DP-SGD variant used here), and magnitude pruning with optional
//! noise on the survivors. Optimal variants allocate the perturbation per
//! parameter from the input sensitivities `r_i = ‖∇_x g_i(x)‖²`:
//!
//! * noise: `Σ_ii = λ · √r_i / max(|g_i|, c)`
//! * DP-SGD: as above, but `Σ_ii = 0` where the coordinate was clipped
//! * pruning: score `k'_i = √r_i / max(|g_i|, c)`; coordinates with the
//!   largest score are pruned first, which minimizes the retained
//!   information `Σ_{i∉A} r_i` per unit of retained utility `Σ_{i∉A} g_i²`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bounds::{lambda_for_frobenius, lambda_for_utility};
use crate::error::{Error, Result};
use crate::nn::GradVector;
use crate::probe::{JvpMethod, RowNormEstimate};

pub const DEFAULT_FLOOR: f64 = 1e-6;
pub const DEFAULT_SKETCH_K: usize = 10;
/// Cap used on plain-ReLU models when none is configured.
pub const DEFAULT_CAP: NoiseCap = NoiseCap::MedianMultiple(1e3);

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

fn default_k() -> usize {
    DEFAULT_SKETCH_K
}

/// How a baseline noise covariance is specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseLevel {
    /// Isotropic, `Σ_ii = v`.
    Variance(f64),
    /// Isotropic with `‖Σ‖_F` equal to the given scale.
    Frobenius(f64),
    PerParameter(Vec<f64>),
}

impl NoiseLevel {
    pub fn resolve(&self, d: usize) -> Result<Vec<f64>> {
        let sigma = match self {
            NoiseLevel::Variance(v) => vec![*v; d],
            NoiseLevel::Frobenius(s) => vec![*s / (d as f64).sqrt(); d],
            NoiseLevel::PerParameter(v) => {
                if v.len() != d {
                    return Err(Error::config(format!(
                        "per-parameter noise has {} entries, the model has {d}",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        check_variances(&sigma)?;
        Ok(sigma)
    }
}

/// How the optimal-noise multiplier `λ` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaRule {
    Fixed(f64),
    /// `λ` such that `‖Σ‖_F` equals the value (matches a DP-SGD noise scale).
    Frobenius(f64),
    /// `λ` such that the second-order utility `−Σ g_i² Σ_ii` equals `−C`.
    UtilityBudget(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseCap {
    Fixed(f64),
    /// Cap at a multiple of the median variance.
    MedianMultiple(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneBudget {
    /// Prune `⌊ratio · d⌋` coordinates.
    Ratio(f64),
    /// Prune while the retained `Σ_{i∉A} g_i²` stays at least this value.
    Utility(f64),
}

/// Parameters shared by the optimal noise variants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaRule {
    pub lambda: LambdaRule,
    pub floor_c: f64,
    pub cap: Option<NoiseCap>,
    /// Use the row norm itself in the numerator instead of its square root.
    pub raw_row_norms: bool,
}

impl SigmaRule {
    pub fn new(lambda: LambdaRule) -> Self {
        Self {
            lambda,
            floor_c: DEFAULT_FLOOR,
            cap: None,
            raw_row_norms: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DefenseSpec {
    #[default]
    None,
    Noise {
        sigma: NoiseLevel,
    },
    Dpsgd {
        sigma: NoiseLevel,
        clip: f64,
    },
    Prune {
        budget: PruneBudget,
        #[serde(default)]
        noise_eps: f64,
    },
    OptimalNoise {
        lambda: LambdaRule,
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_floor")]
        floor_c: f64,
        #[serde(default)]
        cap: Option<NoiseCap>,
        #[serde(default)]
        raw_row_norms: bool,
        #[serde(default)]
        jvp: JvpMethod,
    },
    OptimalDpsgd {
        lambda: LambdaRule,
        clip: f64,
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_floor")]
        floor_c: f64,
        #[serde(default)]
        cap: Option<NoiseCap>,
        #[serde(default)]
        raw_row_norms: bool,
        #[serde(default)]
        jvp: JvpMethod,
    },
    OptimalPrune {
        budget: PruneBudget,
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default)]
        noise_eps: f64,
        #[serde(default = "default_floor")]
        floor_c: f64,
        #[serde(default)]
        jvp: JvpMethod,
    },
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        let budget = |b: &PruneBudget| match *b {
            PruneBudget::Ratio(r) if !(0.0..=1.0).contains(&r) => Err(Error::config(format!(
                "prune ratio must lie in [0, 1], got {r}"
            ))),
            PruneBudget::Utility(c) if !(c >= 0.0 && c.is_finite()) => Err(Error::config(format!(
                "utility budget must be non-negative, got {c}"
            ))),
            _ => Ok(()),
        };
        let lambda = |l: &LambdaRule| match *l {
            LambdaRule::Fixed(v) | LambdaRule::Frobenius(v) | LambdaRule::UtilityBudget(v)
                if !(v >= 0.0 && v.is_finite()) =>
            {
                Err(Error::config(format!(
                    "noise multiplier must be non-negative, got {v}"
                )))
            }
            _ => Ok(()),
        };
        let cap = |c: &Option<NoiseCap>| match *c {
            Some(NoiseCap::Fixed(v)) | Some(NoiseCap::MedianMultiple(v)) => positive("cap", v),
            None => Ok(()),
        };
        let k_ok = |k: usize| {
            if k == 0 {
                Err(Error::config("sketch sample count k must be at least 1"))
            } else {
                Ok(())
            }
        };
        let eps = |e: f64| {
            if e >= 0.0 && e.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "noise_eps must be non-negative, got {e}"
                )))
            }
        };
        match self {
            DefenseSpec::None => Ok(()),
            DefenseSpec::Noise { sigma } => sigma_ok(sigma),
            DefenseSpec::Dpsgd { sigma, clip } => {
                sigma_ok(sigma)?;
                positive("clip", *clip)
            }
            DefenseSpec::Prune {
                budget: b,
                noise_eps,
            } => {
                budget(b)?;
                eps(*noise_eps)
            }
            DefenseSpec::OptimalNoise {
                lambda: l,
                k,
                floor_c,
                cap: c,
                ..
            } => {
                lambda(l)?;
                k_ok(*k)?;
                positive("floor_c", *floor_c)?;
                cap(c)
            }
            DefenseSpec::OptimalDpsgd {
                lambda: l,
                clip,
                k,
                floor_c,
                cap: c,
                ..
            } => {
                lambda(l)?;
                positive("clip", *clip)?;
                k_ok(*k)?;
                positive("floor_c", *floor_c)?;
                cap(c)
            }
            DefenseSpec::OptimalPrune {
                budget: b,
                k,
                noise_eps,
                floor_c,
                ..
            } => {
                budget(b)?;
                k_ok(*k)?;
                eps(*noise_eps)?;
                positive("floor_c", *floor_c)
            }
        }
    }

    /// Whether [`defend`] needs row norms for this defense.
    pub fn needs_row_norms(&self) -> bool {
        matches!(
            self,
            DefenseSpec::OptimalNoise { .. }
                | DefenseSpec::OptimalDpsgd { .. }
                | DefenseSpec::OptimalPrune { .. }
        )
    }

    /// Sketch size and differentiation method for the optimal variants.
    pub fn sketch(&self) -> Option<(usize, JvpMethod)> {
        match self {
            DefenseSpec::OptimalNoise { k, jvp, .. }
            | DefenseSpec::OptimalDpsgd { k, jvp, .. }
            | DefenseSpec::OptimalPrune { k, jvp, .. } => Some((*k, *jvp)),
            _ => None,
        }
    }

    /// Fills in the default noise cap where the model requires one.
    pub fn with_relu_cap(mut self) -> Self {
        match &mut self {
            DefenseSpec::OptimalNoise { cap, .. } | DefenseSpec::OptimalDpsgd { cap, .. } => {
                cap.get_or_insert(DEFAULT_CAP);
            }
            _ => {}
        }
        self
    }

    /// Short human-readable descriptor used in metric files.
    pub fn descriptor(&self) -> String {
        fn level(s: &NoiseLevel) -> String {
            match s {
                NoiseLevel::Variance(v) => format!("var={v}"),
                NoiseLevel::Frobenius(f) => format!("fro={f}"),
                NoiseLevel::PerParameter(_) => "per-param".to_string(),
            }
        }
        fn lam(l: &LambdaRule) -> String {
            match l {
                LambdaRule::Fixed(v) => format!("lambda={v}"),
                LambdaRule::Frobenius(v) => format!("fro={v}"),
                LambdaRule::UtilityBudget(v) => format!("u2={v}"),
            }
        }
        fn bud(b: &PruneBudget) -> String {
            match b {
                PruneBudget::Ratio(r) => format!("ratio={r}"),
                PruneBudget::Utility(c) => format!("u1={c}"),
            }
        }
        match self {
            DefenseSpec::None => "none".into(),
            DefenseSpec::Noise { sigma } => format!("noise[{}]", level(sigma)),
            DefenseSpec::Dpsgd { sigma, clip } => format!("dpsgd[{};clip={clip}]", level(sigma)),
            DefenseSpec::Prune { budget, noise_eps } => {
                format!("prune[{};eps={noise_eps}]", bud(budget))
            }
            DefenseSpec::OptimalNoise { lambda, k, .. } => {
                format!("optimal-noise[{};k={k}]", lam(lambda))
            }
            DefenseSpec::OptimalDpsgd {
                lambda, clip, k, ..
            } => {
                format!("optimal-dpsgd[{};clip={clip};k={k}]", lam(lambda))
            }
            DefenseSpec::OptimalPrune {
                budget,
                k,
                noise_eps,
                ..
            } => format!("optimal-prune[{};eps={noise_eps};k={k}]", bud(budget)),
        }
    }
}

fn sigma_ok(s: &NoiseLevel) -> Result<()> {
    match s {
        NoiseLevel::Variance(v) | NoiseLevel::Frobenius(v) => check_variances(&[*v]),
        NoiseLevel::PerParameter(v) => check_variances(v),
    }
}

fn check_variances(sigma: &[f64]) -> Result<()> {
    match sigma.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
        Some(i) => Err(Error::config(format!(
            "noise variance {i} must be finite and non-negative, got {}",
            sigma[i]
        ))),
        None => Ok(()),
    }
}

/// What the defense did, for logging and for evaluating bounds/utility.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Audit {
    /// Per-parameter noise variances; `None` when no noise was added.
    pub sigma_used: Option<Vec<f64>>,
    /// Pruned indices, ascending.
    pub pruned_set: Vec<usize>,
    /// Clipping threshold, when clipping was applied.
    pub clip: Option<f64>,
    /// Indices where `|g_i| ≥ P`, ascending.
    pub clip_mask: Vec<usize>,
    /// Optimal pruning scores `k'_i`.
    pub k_index: Option<Vec<f64>>,
    /// Resolved noise multiplier of the optimal variants.
    pub lambda: Option<f64>,
}

impl Audit {
    /// `E[y]` given the undefended gradient: clipped, with pruned entries zeroed.
    pub fn expected_observation(&self, g: &GradVector) -> Vec<f64> {
        let mut m: Vec<f64> = match self.clip {
            Some(p) => g.values.iter().map(|v| v.clamp(-p, p)).collect(),
            None => g.values.clone(),
        };
        for &i in &self.pruned_set {
            m[i] = 0.0;
        }
        m
    }

    /// `‖Σ‖_F` of the diagonal covariance (0 without noise).
    pub fn noise_frobenius(&self) -> f64 {
        self.sigma_used
            .as_ref()
            .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }
}

/// The shared observation `y = S(g(x))` and its audit record.
#[derive(Debug, Clone, PartialEq)]
pub struct DefendedGradient {
    pub values: Vec<f64>,
    pub audit: Audit,
}

impl DefendedGradient {
    pub fn undefended(g: &GradVector) -> Self {
        Self {
            values: g.values.clone(),
            audit: Audit::default(),
        }
    }
}

/// Per-coordinate clamp to `[−P, P]`.
pub fn clip_gradient(g: &GradVector, clip: f64) -> GradVector {
    GradVector::new(g.values.iter().map(|v| v.clamp(-clip, clip)).collect())
}

/// `y_i = g_i + √Σ_ii · z_i`, `z ~ N(0, I)`.
pub fn apply_noise<R: Rng + ?Sized>(
    g: &GradVector,
    sigma: &[f64],
    rng: &mut R,
) -> Result<DefendedGradient> {
    if sigma.len() != g.len() {
        return Err(Error::shape(format!(
            "{} variances for a gradient of length {}",
            sigma.len(),
            g.len()
        )));
    }
    check_variances(sigma)?;
    let values = g
        .values
        .iter()
        .zip(sigma)
        .map(|(&v, &s)| {
            let z: f64 = rng.sample(StandardNormal);
            v + s.sqrt() * z
        })
        .collect();
    Ok(DefendedGradient {
        values,
        audit: Audit {
            sigma_used: Some(sigma.to_vec()),
            ..Audit::default()
        },
    })
}

/// Indices to prune: smallest score first, ties by lower index.
pub fn prune_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// Zeroes the lowest-scoring coordinates within the budget.
pub fn prune_by_index(
    g: &GradVector,
    scores: &[f64],
    budget: PruneBudget,
) -> Result<DefendedGradient> {
    let d = g.len();
    if scores.len() != d {
        return Err(Error::shape(format!(
            "{} scores for a gradient of length {d}",
            scores.len()
        )));
    }
    let order = prune_order(scores);
    let count = match budget {
        PruneBudget::Ratio(r) => {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!(
                    "prune ratio must lie in [0, 1], got {r}"
                )));
            }
            (r * d as f64).floor() as usize
        }
        PruneBudget::Utility(c) => {
            let available = g.norm_sq();
            if c > available {
                return Err(Error::InfeasibleBudget {
                    budget: c,
                    available,
                });
            }
            let mut retained = available;
            let mut n = 0;
            for &i in &order {
                let next = retained - g.values[i] * g.values[i];
                if next < c {
                    break;
                }
                retained = next;
                n += 1;
            }
            n
        }
    };
    let mut pruned_set = order[..count].to_vec();
    pruned_set.sort_unstable();
    let mut values = g.values.clone();
    for &i in &pruned_set {
        values[i] = 0.0;
    }
    Ok(DefendedGradient {
        values,
        audit: Audit {
            pruned_set,
            ..Audit::default()
        },
    })
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn check_rows(g: &GradVector, rows: &RowNormEstimate) -> Result<()> {
    if rows.len() != g.len() {
        return Err(Error::shape(format!(
            "{} row norms for a gradient of length {}",
            rows.len(),
            g.len()
        )));
    }
    Ok(())
}

/// Optimal variances over the coordinates in `active`; the rest get 0.
/// Returns the variances and the resolved `λ`.
fn optimal_sigma_on(
    g: &GradVector,
    rows: &RowNormEstimate,
    rule: &SigmaRule,
    active: impl Fn(usize) -> bool,
) -> (Vec<f64>, f64) {
    let c = rule.floor_c;
    let mut base: Vec<f64> = g
        .values
        .iter()
        .zip(&rows.values)
        .enumerate()
        .map(|(i, (&gi, &ri))| {
            if !active(i) {
                return 0.0;
            }
            let num = if rule.raw_row_norms {
                ri.max(0.0)
            } else {
                ri.max(0.0).sqrt()
            };
            num / gi.abs().max(c)
        })
        .collect();
    if let Some(NoiseCap::MedianMultiple(k)) = rule.cap {
        let act: Vec<f64> = base
            .iter()
            .enumerate()
            .filter(|(i, _)| active(*i))
            .map(|(_, v)| *v)
            .collect();
        let limit = k * median(&act);
        for v in &mut base {
            *v = v.min(limit);
        }
    }
    let lambda = match rule.lambda {
        LambdaRule::Fixed(l) => l,
        LambdaRule::Frobenius(target) => lambda_for_frobenius(&base, target),
        LambdaRule::UtilityBudget(budget) => lambda_for_utility(g, &base, budget),
    };
    let mut sigma: Vec<f64> = base.into_iter().map(|b| lambda * b).collect();
    if let Some(NoiseCap::Fixed(cap)) = rule.cap {
        for v in &mut sigma {
            *v = v.min(cap);
        }
    }
    (sigma, lambda)
}

/// `Σ_ii = λ · √r_i / max(|g_i|, c)`, then capped.
pub fn optimal_noise_sigma(
    g: &GradVector,
    rows: &RowNormEstimate,
    rule: &SigmaRule,
) -> Result<Vec<f64>> {
    check_rows(g, rows)?;
    Ok(optimal_sigma_on(g, rows, rule, |_| true).0)
}

/// Zero noise where `|g_i| ≥ P`, the optimal-noise formula elsewhere.
pub fn optimal_dpsgd_sigma(
    g: &GradVector,
    rows: &RowNormEstimate,
    rule: &SigmaRule,
    clip: f64,
) -> Result<Vec<f64>> {
    check_rows(g, rows)?;
    Ok(optimal_sigma_on(g, rows, rule, |i| g.values[i].abs() < clip).0)
}

/// `k'_i = √r_i / max(|g_i|, c)`.
pub fn optimal_prune_scores(
    g: &GradVector,
    rows: &RowNormEstimate,
    floor_c: f64,
) -> Result<Vec<f64>> {
    check_rows(g, rows)?;
    Ok(g.values
        .iter()
        .zip(&rows.values)
        .map(|(gi, ri)| ri.max(0.0).sqrt() / gi.abs().max(floor_c))
        .collect())
}

fn clip_mask(g: &GradVector, clip: f64) -> Vec<usize> {
    (0..g.len())
        .filter(|&i| g.values[i].abs() >= clip)
        .collect()
}

/// Adds `N(0, ε)` to the unpruned coordinates of a pruned observation.
fn noisy_survivors<R: Rng + ?Sized>(
    mut out: DefendedGradient,
    eps: f64,
    rng: &mut R,
) -> DefendedGradient {
    if eps <= 0.0 {
        return out;
    }
    let mut sigma = vec![eps; out.values.len()];
    for &i in &out.audit.pruned_set {
        sigma[i] = 0.0;
    }
    let sd = eps.sqrt();
    for (v, s) in out.values.iter_mut().zip(&sigma) {
        let z: f64 = rng.sample(StandardNormal);
        if *s > 0.0 {
            *v += sd * z;
        }
    }
    out.audit.sigma_used = Some(sigma);
    out
}

/// Applies `spec` to `g`. The optimal variants need `row_norms`.
pub fn defend<R: Rng + ?Sized>(
    g: &GradVector,
    spec: &DefenseSpec,
    row_norms: Option<&RowNormEstimate>,
    rng: &mut R,
) -> Result<DefendedGradient> {
    spec.validate()?;
    let rows = || {
        row_norms
            .ok_or_else(|| Error::config(format!("defense {} needs row norms", spec.descriptor())))
    };
    match spec {
        DefenseSpec::None => Ok(DefendedGradient::undefended(g)),
        DefenseSpec::Noise { sigma } => apply_noise(g, &sigma.resolve(g.len())?, rng),
        DefenseSpec::Dpsgd { sigma, clip } => {
            let clipped = clip_gradient(g, *clip);
            let mut out = apply_noise(&clipped, &sigma.resolve(g.len())?, rng)?;
            out.audit.clip = Some(*clip);
            out.audit.clip_mask = clip_mask(g, *clip);
            Ok(out)
        }
        DefenseSpec::Prune { budget, noise_eps } => {
            let scores: Vec<f64> = g.values.iter().map(|v| v.abs()).collect();
            let out = prune_by_index(g, &scores, *budget)?;
            Ok(noisy_survivors(out, *noise_eps, rng))
        }
        DefenseSpec::OptimalNoise {
            lambda,
            floor_c,
            cap,
            raw_row_norms,
            ..
        } => {
            let rows = rows()?;
            check_rows(g, rows)?;
            let rule = SigmaRule {
                lambda: *lambda,
                floor_c: *floor_c,
                cap: *cap,
                raw_row_norms: *raw_row_norms,
            };
            let (sigma, lam) = optimal_sigma_on(g, rows, &rule, |_| true);
            let mut out = apply_noise(g, &sigma, rng)?;
            out.audit.lambda = Some(lam);
            Ok(out)
        }
        DefenseSpec::OptimalDpsgd {
            lambda,
            clip,
            floor_c,
            cap,
            raw_row_norms,
            ..
        } => {
            let rows = rows()?;
            check_rows(g, rows)?;
            let rule = SigmaRule {
                lambda: *lambda,
                floor_c: *floor_c,
                cap: *cap,
                raw_row_norms: *raw_row_norms,
            };
            let (sigma, lam) = optimal_sigma_on(g, rows, &rule, |i| g.values[i].abs() < *clip);
            let clipped = clip_gradient(g, *clip);
            let mut out = apply_noise(&clipped, &sigma, rng)?;
            out.audit.clip = Some(*clip);
            out.audit.clip_mask = clip_mask(g, *clip);
            out.audit.lambda = Some(lam);
            Ok(out)
        }
        DefenseSpec::OptimalPrune {
            budget,
            noise_eps,
            floor_c,
            ..
        } => {
            let k = optimal_prune_scores(g, rows()?, *floor_c)?;
            let order: Vec<f64> = k.iter().map(|v| -v).collect();
            let out = prune_by_index(g, &order, *budget)?;
            let mut out = noisy_survivors(out, *noise_eps, rng);
            out.audit.k_index = Some(k);
            Ok(out)
        }
    }
}
