//! Sensitivity calculus for the quadratic utility.
//!
//! The global bounds `ḡ ≥ sup|g(x,y)|` and `H̄ ≥ sup|H(x,y)|` are built from
//! a Jacobian-norm bound `∇̄` and the loss-specific bounds on `∇_f ℓ` and
//! `∇²_f ℓ`. In practice `∇̄` (and the residual bound `Ē` for the squared
//! loss) are empirical maxima over the fine-tuning set times an inflation
//! factor, so the resulting guarantee is conditional on those maxima
//! dominating the true suprema; [`SensitivityReport::conditional`] records
//! which case applies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::curvature::{per_point_gn_hessian, per_point_gradient, CurvatureBundle};
use crate::datasets::{LabeledDataset, TaskKind};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, operator_spectral_norm, sym_eigen, PowerIterationSettings, SymMatrix};
use crate::loss::LossKind;
use crate::model::{ModelSpec, Tape};
use crate::par::{map_indexed, max_by_tree, Execution};

/// Default inflation applied to empirical maxima.
pub const DEFAULT_INFLATION: f64 = 1.1;

/// Spectral norm of `J(x, θ*)` by power iteration on `JᵀJ`, falling back to
/// the exact `m × m` Gram eigenvalue if the iteration stalls.
pub fn jacobian_norm(spec: &ModelSpec, anchor: &[f64], x: &[f64]) -> Result<f64> {
    let mut tape = Tape::default();
    spec.forward_tape(anchor, x, &mut tape)?;
    let p = spec.param_count();
    let m = spec.output_dim;
    let est = operator_spectral_norm(
        |v| spec.jvp_tape(anchor, &tape, v).expect("dims checked"),
        |w| {
            let mut g = vec![0.0; p];
            spec.vjp_tape(anchor, &tape, w, 1.0, &mut g).expect("dims checked");
            g
        },
        m,
        p,
        PowerIterationSettings {
            tol: 1e-10,
            max_iter: 500,
            seed: 0x6a6e,
        },
    );
    match est {
        Ok(s) => Ok(s),
        Err(Error::NotConverged { .. }) => {
            let j = spec.jacobian_tape(anchor, &tape)?;
            let gram = SymMatrix::new(j.matmul(&j.transpose())?)?;
            Ok(sym_eigen(&gram)?.max().max(0.0).sqrt())
        }
        Err(e) => Err(e),
    }
}

/// `inflation · max_{x∈D} |J(x, θ*)|₂`
pub fn empirical_jacobian_bound(
    spec: &ModelSpec,
    anchor: &[f64],
    data: &LabeledDataset,
    inflation: f64,
    exec: Execution,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_inflation(inflation)?;
    let norms = map_indexed(exec, data.len(), |i| jacobian_norm(spec, anchor, &data.samples[i].x));
    let mut max = 0.0f64;
    for n in norms {
        max = max.max(n?);
    }
    Ok(inflation * max)
}

/// `inflation · max_{(x,y)∈D} |f(x, θ*) − y|` (regression only).
pub fn empirical_error_bound(
    spec: &ModelSpec,
    anchor: &[f64],
    data: &LabeledDataset,
    inflation: f64,
    exec: Execution,
) -> Result<f64> {
    if data.task != TaskKind::Regression {
        return Err(Error::TaskMismatch { expected: "regression" });
    }
    raw_error_bound(spec, anchor, data, inflation, exec)
}

/// Residual bound without the task check; classification with the squared
/// loss on one-hot targets uses it too.
pub fn raw_error_bound(
    spec: &ModelSpec,
    anchor: &[f64],
    data: &LabeledDataset,
    inflation: f64,
    exec: Execution,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_inflation(inflation)?;
    let max = max_by_tree(exec, &data.samples, |_, s| {
        spec.forward(anchor, &s.x)
            .map(|f| norm(&crate::linalg::sub(&f, &s.y)))
            .unwrap_or(f64::NAN)
    })
    .expect("non-empty");
    if max.is_nan() {
        // Surface the dimension error from a direct call.
        for s in &data.samples {
            spec.forward(anchor, &s.x)?;
        }
    }
    Ok(inflation * max)
}

fn check_inflation(inflation: f64) -> Result<()> {
    if inflation >= 1.0 && inflation.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInputs(format!("inflation must be >= 1, got {inflation}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityInputs {
    pub loss: LossKind,
    /// Output dimension `m`.
    pub m: usize,
    /// Smallest dataset size in the universe.
    pub n_min: usize,
    pub radius: f64,
    /// `∇̄`, already inflated.
    pub jac_bound: f64,
    /// `Ē`, already inflated; ignored for cross-entropy.
    pub err_bound: f64,
    /// Inflation used to produce the bounds (recorded for the report).
    pub inflation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityComponents {
    pub loss: LossKind,
    pub m: usize,
    pub n_min: usize,
    pub radius: f64,
    pub jac_bound: f64,
    pub err_bound: f64,
    pub inflation: f64,
    /// Bound on `|∇_f ℓ|`.
    pub loss_grad_bound: f64,
    /// Bound on `|∇²_f ℓ|`.
    pub loss_hess_bound: f64,
    /// `R ḡ + ½ R² H̄`, the bound on any per-point utility.
    pub per_point_utility_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// `ΔŪ = (2Rḡ + R²H̄)/N`
    pub delta_u: f64,
    pub g_bar: f64,
    pub h_bar: f64,
    pub components: SensitivityComponents,
    /// True when `∇̄`/`Ē` are empirical estimates rather than analytic suprema.
    pub conditional: bool,
}

impl SensitivityInputs {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInputs(msg.to_string()));
        if self.n_min == 0 {
            return bad("N must be >= 1");
        }
        if !(self.radius >= 0.0) || !self.radius.is_finite() {
            return bad("R must be finite and >= 0");
        }
        if !(self.jac_bound > 0.0) || !self.jac_bound.is_finite() {
            return bad("Jacobian bound must be finite and > 0");
        }
        if !(self.err_bound >= 0.0) || !self.err_bound.is_finite() {
            return bad("error bound must be finite and >= 0");
        }
        if !(self.inflation >= 1.0) {
            return bad("inflation must be >= 1");
        }
        if self.m == 0 || (self.loss == LossKind::CrossEntropy && self.m < 2) {
            return bad("invalid output dimension for loss");
        }
        Ok(())
    }
}

/// Closed-form sensitivity bound. Squared loss:
/// `ḡ = (2/m)Ē∇̄`, `H̄ = (2/m)∇̄²`; cross-entropy: `ḡ = √2∇̄`, `H̄ = ∇̄²/2`.
pub fn sensitivity(si: &SensitivityInputs) -> Result<SensitivityReport> {
    si.validate()?;
    let m = si.m as f64;
    let (loss_grad_bound, loss_hess_bound) = match si.loss {
        LossKind::MeanSquared => (2.0 / m * si.err_bound, 2.0 / m),
        LossKind::CrossEntropy => (2f64.sqrt(), 0.5),
    };
    let g_bar = loss_grad_bound * si.jac_bound;
    let h_bar = loss_hess_bound * si.jac_bound * si.jac_bound;
    let r = si.radius;
    let delta_u = (2.0 * r * g_bar + r * r * h_bar) / si.n_min as f64;
    Ok(SensitivityReport {
        delta_u,
        g_bar,
        h_bar,
        components: SensitivityComponents {
            loss: si.loss,
            m: si.m,
            n_min: si.n_min,
            radius: r,
            jac_bound: si.jac_bound,
            err_bound: si.err_bound,
            inflation: si.inflation,
            loss_grad_bound,
            loss_hess_bound,
            per_point_utility_bound: r * g_bar + 0.5 * r * r * h_bar,
        },
        conditional: true,
    })
}

/// Empirical `∇̄`, `Ē` over `data` followed by [`sensitivity`] with
/// `N = |data|`.
pub fn empirical_sensitivity(
    spec: &ModelSpec,
    anchor: &[f64],
    loss: LossKind,
    data: &LabeledDataset,
    radius: f64,
    inflation: f64,
    exec: Execution,
) -> Result<SensitivityReport> {
    let jac_bound = empirical_jacobian_bound(spec, anchor, data, inflation, exec)?;
    let err_bound = match loss {
        LossKind::MeanSquared => raw_error_bound(spec, anchor, data, inflation, exec)?,
        LossKind::CrossEntropy => 0.0,
    };
    sensitivity(&SensitivityInputs {
        loss,
        m: spec.output_dim,
        n_min: data.len(),
        radius,
        jac_bound,
        err_bound,
        inflation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adjacency {
    AddOne,
    ReplaceOne,
}

pub const BRUTE_FORCE_MAX_BASE: usize = 20;
pub const BRUTE_FORCE_MAX_P: usize = 6;
pub const BRUTE_FORCE_MAX_THETA: usize = 10_000;

/// Points of the closed ball `B_R(0) ⊂ R^p`: a regular grid for `p ≤ 3`,
/// uniform samples otherwise. Boundary points are always included since the
/// utility differences are maximized on the sphere for linear terms.
pub fn ball_points(p: usize, radius: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    if p <= 3 {
        let per_axis = ((count as f64).powf(1.0 / p as f64).floor() as usize).max(2);
        let step = 2.0 * radius / (per_axis - 1) as f64;
        let mut idx = vec![0usize; p];
        'grid: loop {
            let v: Vec<f64> = idx.iter().map(|&i| -radius + step * i as f64).collect();
            if norm(&v) <= radius {
                out.push(v);
            }
            for d in 0..p {
                idx[d] += 1;
                if idx[d] < per_axis {
                    continue 'grid;
                }
                idx[d] = 0;
            }
            break;
        }
        let n_sphere = count.saturating_sub(out.len()).max(count / 4);
        for _ in 0..n_sphere {
            out.push(sphere_point(p, radius, &mut rng));
        }
        out.truncate(count.max(1));
        return out;
    }
    for i in 0..count {
        let s = sphere_point(p, radius, &mut rng);
        // Half on the boundary, half uniform in the volume.
        let scale = if i % 2 == 0 {
            1.0
        } else {
            rng.random::<f64>().powf(1.0 / p as f64)
        };
        out.push(s.into_iter().map(|v| v * scale).collect());
    }
    out
}

fn sphere_point(p: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&z);
        if n > 0.0 {
            return z.into_iter().map(|v| v * radius / n).collect();
        }
    }
}

struct PointCurvature {
    g: Vec<f64>,
    h: SymMatrix,
}

impl PointCurvature {
    fn utility(&self, delta: &[f64]) -> f64 {
        -(dot(delta, &self.g) + 0.5 * self.h.quad_form(delta).expect("dims"))
    }
}

/// Test oracle: `max |U(D,θ) − U(D′,θ)|` over adjacent pairs built from
/// `base` and `pool`, and sampled `θ ∈ B_R(θ*)`, with the ridge term
/// excluded.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_sensitivity(
    spec: &ModelSpec,
    anchor: &[f64],
    loss: LossKind,
    base: &LabeledDataset,
    pool: &LabeledDataset,
    radius: f64,
    theta_samples: usize,
    adjacency: Adjacency,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    let p = spec.param_count();
    if base.len() > BRUTE_FORCE_MAX_BASE || p > BRUTE_FORCE_MAX_P || theta_samples > BRUTE_FORCE_MAX_THETA {
        return Err(Error::BudgetExceeded(format!(
            "|D|={} (max {BRUTE_FORCE_MAX_BASE}), p={p} (max {BRUTE_FORCE_MAX_P}), samples={theta_samples} (max {BRUTE_FORCE_MAX_THETA})",
            base.len()
        )));
    }
    if base.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let curv = |d: &LabeledDataset| -> Result<Vec<PointCurvature>> {
        d.samples
            .iter()
            .map(|s| {
                Ok(PointCurvature {
                    g: per_point_gradient(spec, anchor, loss, &s.x, &s.y)?,
                    h: per_point_gn_hessian(spec, anchor, loss, &s.x, &s.y)?,
                })
            })
            .collect()
    };
    let base_c = curv(base)?;
    let pool_c = curv(pool)?;
    let n = base_c.len() as f64;
    let deltas = ball_points(p, radius, theta_samples, seed);

    let best = max_by_tree(exec, &deltas, |_, delta| {
        let u_base: Vec<f64> = base_c.iter().map(|c| c.utility(delta)).collect();
        let u_d: f64 = u_base.iter().sum::<f64>() / n;
        let mut best = 0.0f64;
        for pc in &pool_c {
            let u_new = pc.utility(delta);
            match adjacency {
                Adjacency::AddOne => {
                    let u_prime = (n * u_d + u_new) / (n + 1.0);
                    best = best.max((u_prime - u_d).abs());
                }
                Adjacency::ReplaceOne => {
                    for u_old in &u_base {
                        best = best.max(((u_new - u_old) / n).abs());
                    }
                }
            }
        }
        best
    });
    Ok(best.unwrap_or(0.0))
}

/// `R̄_λ = ḡ / (λ + e_min(H))`
pub fn r_lambda_bar(bundle: &CurvatureBundle, g_bar: f64) -> Result<f64> {
    let e_min = sym_eigen(&bundle.unregularized_hess())?.min();
    let denom = bundle.lambda + e_min;
    if denom <= 1e-12 {
        return Err(Error::SingularCurvature(denom));
    }
    Ok(g_bar / denom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionBound {
    /// `(2p̄R̄_λ/(Nε))(2/R + H̄/ḡ) + (R̄_λ/R)²`
    pub bound: f64,
    /// Tighter intermediate Markov bound using the actual `tr(H_λ⁻¹)` and
    /// `|H_λ⁻¹g|`.
    pub markov: f64,
    pub r_bar_lambda: f64,
}

/// Markov bound on the probability that an untruncated proposal leaves the
/// ball.
pub fn rejection_prob_bound(
    bundle: &CurvatureBundle,
    delta_u: f64,
    epsilon: f64,
    radius: f64,
    g_bar: f64,
    h_bar: f64,
    n_min: usize,
) -> Result<RejectionBound> {
    let r_bar = r_lambda_bar(bundle, g_bar)?;
    let p = bundle.dim() as f64;
    let n = n_min as f64;
    let bound = (2.0 * p * r_bar / (n * epsilon)) * (2.0 / radius + h_bar / g_bar) + (r_bar / radius).powi(2);

    let eig = sym_eigen(&bundle.hess)?;
    let trace_inv: f64 = eig.values.iter().map(|v| 1.0 / v).sum();
    let inv = eig.apply_spectral(|v| 1.0 / v);
    let mean_shift = norm(&inv.mul_vec(&bundle.grad)?);
    let markov = ((2.0 * delta_u / epsilon) * trace_inv + mean_shift * mean_shift) / (radius * radius);
    Ok(RejectionBound {
        bound,
        markov,
        r_bar_lambda: r_bar,
    })
}

/// `1/(λ+H̄) ≤ 1/(λ+|H|) ≤ |H_λ⁻¹| ≤ 1/(λ+e_min(H)) ≤ 1/λ`, as the five
/// numbers in order (the last is `+∞` when `λ = 0`).
pub fn hlambda_inverse_chain(bundle: &CurvatureBundle, h_bar: f64) -> Result<[f64; 5]> {
    let e = sym_eigen(&bundle.unregularized_hess())?;
    let lam = bundle.lambda;
    let h_norm = e.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let inv_norm = 1.0 / sym_eigen(&bundle.hess)?.min();
    Ok([
        1.0 / (lam + h_bar),
        1.0 / (lam + h_norm),
        inv_norm,
        1.0 / (lam + e.min()),
        if lam > 0.0 { 1.0 / lam } else { f64::INFINITY },
    ])
}

/// Matrix helper for tests and audits: `H_λ^{-1/2} g`.
pub fn whitened_gradient(bundle: &CurvatureBundle) -> Result<Vec<f64>> {
    let e = sym_eigen(&bundle.hess)?;
    e.apply_spectral(|v| 1.0 / v.sqrt()).mul_vec(&bundle.grad)
}
