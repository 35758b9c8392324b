//! Monte-Carlo audits of the mechanism's privacy and accuracy guarantees.
//! Each audit owns its generator, is seed-deterministic and returns an
//! [`AuditReport`] that serializes to one JSON line.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::curvature::{dataset_curvature, CurvatureBundle};
use crate::datasets::{LabeledDataset, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::linalg::{check_len, dot, sym_eigen, SymMatrix};
use crate::loss::LossKind;
use crate::mechanism::{
    run_mechanism, sample_gibbs, sample_rejection, stiefel_sample, utility_gap, GaussianCore, MechanismConfig, Sampler,
};
use crate::model::{ModelSpec, ParamVector};
use crate::par::Execution;
use crate::privacy::{
    empirical_sensitivity, hlambda_inverse_chain, r_lambda_bar, whitened_gradient, SensitivityReport, DEFAULT_INFLATION,
};
use crate::truncnorm::standard_mass;

/// Bins whose smaller count is below this are left out of `ε̂`.
pub const MIN_BIN_COUNT: u64 = 50;

/// Absolute error target for set-length quadrature.
pub const QUADRATURE_TOL: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub check_name: String,
    pub samples_used: u64,
    pub statistic: f64,
    pub bound: f64,
    /// Statistical allowance added to `bound` before comparing.
    pub slack: f64,
    pub passed: bool,
    /// The bound is ≥ 1 or its premise does not hold, so passing says nothing.
    pub vacuous: bool,
    /// Deliberately broken setup that must not pass.
    #[serde(default)]
    pub negative_control: bool,
    pub seed: u64,
    pub details: serde_json::Value,
}

impl AuditReport {
    fn new(
        name: &str,
        samples: u64,
        statistic: f64,
        bound: f64,
        slack: f64,
        vacuous: bool,
        seed: u64,
        details: serde_json::Value,
    ) -> Self {
        Self {
            check_name: name.to_string(),
            samples_used: samples,
            statistic,
            bound,
            slack,
            passed: statistic <= bound + slack,
            vacuous,
            negative_control: false,
            seed,
            details,
        }
    }

    fn as_negative_control(mut self) -> Self {
        self.negative_control = true;
        self
    }

    /// A check that failed with an informative bound, or a negative control
    /// that passed.
    pub fn is_failure(&self) -> bool {
        if self.negative_control {
            self.passed
        } else {
            !self.passed && !self.vacuous
        }
    }
}

/// Appends one JSON object per report.
pub fn append_jsonl(path: &Path, reports: &[AuditReport]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in reports {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn two_seeds(seed: u64) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.next_u64(), rng.next_u64())
}

pub fn uniform_grid(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

fn histogram(xs: &[f64], edges: &[f64]) -> (Vec<u64>, u64) {
    let mut counts = vec![0u64; edges.len() - 1];
    let mut outside = 0;
    for &x in xs {
        let lo = edges[0];
        let hi = edges[edges.len() - 1];
        if !(x >= lo && x <= hi) {
            outside += 1;
            continue;
        }
        let k = edges.partition_point(|e| *e <= x).clamp(1, counts.len());
        counts[k - 1] += 1;
    }
    (counts, outside)
}

/// Histogram estimate of the privacy loss between `M(D)` and `M(D′)` for a
/// one-dimensional mechanism. `runner(data, n, seed)` returns `n` scalar
/// outputs.
#[allow(clippy::too_many_arguments)]
pub fn empirical_epsilon<D: ?Sized>(
    mut runner: impl FnMut(&D, usize, u64) -> Result<Vec<f64>>,
    d: &D,
    d_prime: &D,
    edges: &[f64],
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Result<AuditReport> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInputs("grid edges must be strictly increasing".into()));
    }
    let (sa, sb) = two_seeds(seed);
    let a = runner(d, n_samples, sa)?;
    let b = runner(d_prime, n_samples, sb)?;
    let (ca, out_a) = histogram(&a, edges);
    let (cb, out_b) = histogram(&b, edges);
    let (na, nb) = (a.len() as f64, b.len() as f64);

    let mut eps_hat = 0.0f64;
    let mut worst_bin = None;
    let mut min_count = u64::MAX;
    let mut used = 0;
    for (k, (&x, &y)) in ca.iter().zip(&cb).enumerate() {
        let m = x.min(y);
        if m < MIN_BIN_COUNT {
            continue;
        }
        used += 1;
        min_count = min_count.min(m);
        let r = ((x as f64 / na) / (y as f64 / nb)).ln().abs();
        if r > eps_hat {
            eps_hat = r;
            worst_bin = Some(k);
        }
    }
    if used == 0 {
        return Err(Error::InsufficientSamples(format!(
            "no bin reaches {MIN_BIN_COUNT} samples in both runs (n={n_samples})"
        )));
    }
    let slack = 3.0 * (2.0 / min_count as f64).sqrt();
    Ok(AuditReport::new(
        "empirical_epsilon",
        (a.len() + b.len()) as u64,
        eps_hat,
        epsilon,
        slack,
        false,
        seed,
        json!({
            "bins": ca.len(),
            "bins_used": used,
            "min_bin_count": min_count,
            "worst_bin": worst_bin,
            "outside_grid": [out_a, out_b],
            "slack_rule": "3*sqrt(2/min_bin_count)",
        }),
    ))
}

/// One datapoint of a one-parameter problem, entering the utility as
/// `−(g δ + ½ h δ²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarPoint {
    pub g: f64,
    pub h: f64,
}

/// One-dimensional bundle at `θ* = 0` averaging the points' coefficients.
pub fn scalar_bundle(points: &[ScalarPoint], lambda: f64) -> Result<CurvatureBundle> {
    if points.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = points.len() as f64;
    let g = points.iter().map(|p| p.g).sum::<f64>() / n;
    let h = points.iter().map(|p| p.h).sum::<f64>() / n;
    Ok(CurvatureBundle {
        anchor: ParamVector::zeros(Arc::new(ModelSpec::linear(0, 1))),
        grad: vec![g],
        hess: SymMatrix::diag(&[h + lambda]),
        lambda,
        projection: None,
        n: points.len(),
    })
}

/// Draws from the mechanism on a bundle and returns the first coordinate of
/// the offset from the ball center.
pub fn scalar_draws(bundle: &CurvatureBundle, cfg: &MechanismConfig, n: usize) -> Result<Vec<f64>> {
    let core = GaussianCore::new(bundle, cfg)?;
    let center = bundle.center();
    let draws = match cfg.sampler {
        Sampler::Rejection => sample_rejection(&core, &center, cfg, n)?,
        Sampler::Gibbs => sample_gibbs(&core, &center, cfg, n)?,
    };
    Ok(draws.samples.into_iter().map(|s| s[0] - center[0]).collect())
}

/// A pair of adjacent one-parameter datasets on which the privacy loss of
/// the mechanism comes close to `ε`: the shared points tilt the density
/// toward `+R`, and the swapped point pushes the opposite way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonInstance {
    pub d: Vec<ScalarPoint>,
    pub d_prime: Vec<ScalarPoint>,
    pub g_bar: f64,
    pub h_bar: f64,
    pub lambda: f64,
    pub radius: f64,
    pub epsilon: f64,
}

impl EpsilonInstance {
    pub fn standard(epsilon: f64) -> Self {
        let shared = vec![ScalarPoint { g: -0.8, h: 0.0 }; 5];
        let mut d = shared.clone();
        d.push(ScalarPoint { g: 1.0, h: 0.0 });
        let mut d_prime = shared;
        d_prime.push(ScalarPoint { g: -1.0, h: 0.0 });
        Self {
            d,
            d_prime,
            g_bar: 1.0,
            h_bar: 0.0,
            lambda: 0.1,
            radius: 1.0,
            epsilon,
        }
    }

    /// `(2Rḡ + R²H̄)/N`
    pub fn delta_u(&self) -> f64 {
        let r = self.radius;
        (2.0 * r * self.g_bar + r * r * self.h_bar) / self.d.len() as f64
    }

    /// Exact replace-one sensitivity of the utility over the ball, by dense
    /// evaluation.
    pub fn exact_delta_u(&self) -> Result<f64> {
        let a = scalar_bundle(&self.d, self.lambda)?;
        let b = scalar_bundle(&self.d_prime, self.lambda)?;
        let mut worst = 0.0f64;
        for x in uniform_grid(-self.radius, self.radius, 20_000) {
            worst = worst.max((a.utility_of_offset(&[x])? - b.utility_of_offset(&[x])?).abs());
        }
        Ok(worst)
    }

    pub fn grid(&self, bins: usize) -> Vec<f64> {
        uniform_grid(-self.radius, self.radius, bins)
    }

    /// Runs `empirical_epsilon` with the mechanism calibrated to `delta_u`.
    pub fn audit(
        &self,
        delta_u: f64,
        sampler: Sampler,
        bins: usize,
        n_samples: usize,
        seed: u64,
    ) -> Result<AuditReport> {
        let runner = |pts: &[ScalarPoint], n: usize, s: u64| -> Result<Vec<f64>> {
            let mut cfg = MechanismConfig::new(self.epsilon, delta_u, self.radius, sampler, s);
            // Each scan is an exact draw in one dimension.
            cfg.gibbs_burn_in = 0;
            cfg.gibbs_thin = 1;
            cfg.max_rejection_proposals = u64::MAX;
            scalar_draws(&scalar_bundle(pts, self.lambda)?, &cfg, n)
        };
        let mut report = empirical_epsilon(
            runner,
            &self.d[..],
            &self.d_prime[..],
            &self.grid(bins),
            self.epsilon,
            n_samples,
            seed,
        )?;
        if let serde_json::Value::Object(m) = &mut report.details {
            m.insert("delta_u".into(), json!(delta_u));
            m.insert("exact_log_ratio".into(), json!(self.exact_privacy_loss(delta_u)?));
        }
        Ok(report)
    }

    /// The same audit with `ΔŪ` halved; a sound audit reports it as failing.
    pub fn negative_control(&self, sampler: Sampler, bins: usize, n_samples: usize, seed: u64) -> Result<AuditReport> {
        let mut r = self
            .audit(0.5 * self.delta_u(), sampler, bins, n_samples, seed)?
            .as_negative_control();
        r.check_name = "empirical_epsilon_negative_control".into();
        Ok(r)
    }

    /// Sup over the ball of the exact log density ratio.
    pub fn exact_privacy_loss(&self, delta_u: f64) -> Result<f64> {
        let cfg = MechanismConfig::new(self.epsilon, delta_u, self.radius, Sampler::Rejection, 0);
        exact_privacy_loss_1d(
            &scalar_bundle(&self.d, self.lambda)?,
            &scalar_bundle(&self.d_prime, self.lambda)?,
            &cfg,
            4001,
        )
    }
}

/// `sup_x |log p_D(x) − log p_D′(x)|` over `points` evenly spaced in the
/// ball, from the closed-form truncated normal densities.
pub fn exact_privacy_loss_1d(
    d: &CurvatureBundle,
    d_prime: &CurvatureBundle,
    cfg: &MechanismConfig,
    points: usize,
) -> Result<f64> {
    if d.dim() != 1 || d_prime.dim() != 1 {
        return Err(Error::InvalidInputs("expected one-dimensional bundles".into()));
    }
    if !cfg.radius.is_finite() || points < 2 {
        return Err(Error::InvalidInputs(
            "need a finite radius and at least two points".into(),
        ));
    }
    let log_density = |b: &CurvatureBundle| -> Result<Box<dyn Fn(f64) -> f64>> {
        let core = GaussianCore::new(b, cfg)?;
        let c = b.center()[0];
        let mu = core.mean[0];
        let sigma = 1.0 / (core.precision_scale * b.hess.get(0, 0)).sqrt();
        let mass = standard_mass((c - cfg.radius - mu) / sigma, (c + cfg.radius - mu) / sigma);
        let log_norm = (sigma * (2.0 * std::f64::consts::PI).sqrt() * mass).ln();
        Ok(Box::new(move |x: f64| {
            let z = (x + c - mu) / sigma;
            -0.5 * z * z - log_norm
        }))
    };
    let la = log_density(d)?;
    let lb = log_density(d_prime)?;
    Ok(uniform_grid(-cfg.radius, cfg.radius, points - 1)
        .into_iter()
        .map(|x| (la(x) - lb(x)).abs())
        .fold(0.0, f64::max))
}

/// Lebesgue measure of `{x ∈ [lo, hi] : inside(x)}` by adaptive bisection of
/// the indicator. The set must meet every component of its complement's
/// boundary at a panel edge or a breakpoint; for sub-level sets of a
/// quadratic that holds when the vertex is among the breakpoints.
pub fn set_length(inside: impl Fn(f64) -> bool, lo: f64, hi: f64, breakpoints: &[f64], tol: f64) -> f64 {
    if !(hi > lo) {
        return 0.0;
    }
    let panels = 64;
    let mut nodes = uniform_grid(lo, hi, panels);
    nodes.extend(breakpoints.iter().copied().filter(|b| *b > lo && *b < hi));
    nodes.sort_by(f64::total_cmp);
    nodes.dedup();
    let min_width = tol / 8.0;
    fn refine(f: &dyn Fn(f64) -> bool, a: f64, b: f64, fa: bool, fb: bool, min_width: f64) -> f64 {
        let w = b - a;
        if fa == fb {
            return if fa { w } else { 0.0 };
        }
        if w <= min_width {
            return 0.5 * w;
        }
        let m = 0.5 * (a + b);
        let fm = f(m);
        refine(f, a, m, fa, fm, min_width) + refine(f, m, b, fm, fb, min_width)
    }
    nodes
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let (fa, fb) = (inside(a), inside(b));
            if fa == fb {
                // Equal endpoints: the midpoint catches a component strictly inside.
                let m = 0.5 * (a + b);
                let fm = inside(m);
                refine(&inside, a, m, fa, fm, min_width) + refine(&inside, m, b, fm, fb, min_width)
            } else {
                refine(&inside, a, b, fa, fb, min_width)
            }
        })
        .sum()
}

/// Checks `Pr[U(θ) ≤ U_opt − tΔŪ] ≤ (|B_t|/|B^c_{t/2}|)·exp(−εt/4)` on a
/// one-dimensional bundle, one report per `t`.
pub fn utility_tail_check(
    bundle: &CurvatureBundle,
    cfg: &MechanismConfig,
    t_values: &[f64],
    n_samples: usize,
) -> Result<Vec<AuditReport>> {
    if bundle.dim() != 1 {
        return Err(Error::InvalidInputs(
            "utility tail check needs a one-dimensional bundle".into(),
        ));
    }
    if !cfg.radius.is_finite() {
        return Err(Error::InvalidInputs("utility tail check needs a finite radius".into()));
    }
    cfg.validate()?;
    let r = cfg.radius;
    let g = bundle.grad[0];
    let h = bundle.hess.get(0, 0);
    let u = |x: f64| -(g * x + 0.5 * h * x * x);
    // Maximizer of a concave quadratic on [−R, R], or the better endpoint.
    let mut cands = vec![-r, r];
    if h > 0.0 {
        cands.push((-g / h).clamp(-r, r));
    }
    let x_opt = cands
        .iter()
        .copied()
        .max_by(|a, b| u(*a).total_cmp(&u(*b)))
        .expect("nonempty");
    let u_opt = u(x_opt);
    let breaks = [x_opt];

    let draws = scalar_draws(bundle, cfg, n_samples)?;
    let utils: Vec<f64> = draws.iter().map(|x| u(*x)).collect();
    let n = utils.len() as f64;

    let mut out = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let level = u_opt - t * cfg.delta_u;
        let half = u_opt - 0.5 * t * cfg.delta_u;
        let b_t = set_length(|x| u(x) <= level, -r, r, &breaks, QUADRATURE_TOL);
        let b_c = set_length(|x| u(x) > half, -r, r, &breaks, QUADRATURE_TOL);
        if b_c <= 0.0 {
            return Err(Error::DegenerateSets(format!("|B^c_(t/2)| = 0 at t={t}")));
        }
        let bound = b_t / b_c * (-cfg.epsilon * t / 4.0).exp();
        let hits = utils.iter().filter(|v| **v <= level).count() as f64;
        let p = hits / n;
        let se = (p * (1.0 - p) / n).sqrt();
        out.push(AuditReport::new(
            "utility_tail",
            n_samples as u64,
            p,
            bound,
            3.0 * se,
            bound >= 1.0,
            cfg.seed,
            json!({
                "t": t,
                "epsilon": cfg.epsilon,
                "delta_u": cfg.delta_u,
                "u_opt": u_opt,
                "len_b_t": b_t,
                "len_b_c_half": b_c,
                "std_error": se,
            }),
        ));
    }
    Ok(out)
}

fn beta_tail_inner(
    alpha: f64,
    beta: f64,
    eta: f64,
    n_samples: usize,
    seed: u64,
    bound_alpha: f64,
    name: &str,
) -> Result<AuditReport> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::InvalidInputs(format!(
            "need alpha, beta > 0, got {alpha}, {beta}"
        )));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidInputs(format!("need 0 < eta < 1, got {eta}")));
    }
    if n_samples == 0 {
        return Err(Error::InsufficientSamples("no samples".into()));
    }
    let dist = Beta::new(alpha, beta).map_err(|e| Error::InvalidInputs(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let threshold = (1.0 - eta) * alpha / (alpha + beta);
    let hits = (0..n_samples).filter(|_| rng.sample(dist) <= threshold).count();
    let n = n_samples as f64;
    let p = hits as f64 / n;
    let se = (p * (1.0 - p) / n).sqrt();
    let bound = (-bound_alpha * eta * eta / 4.0).exp();
    let exact = statrs::distribution::Beta::new(alpha, beta)
        .ok()
        .map(|b| statrs::distribution::ContinuousCDF::cdf(&b, threshold));
    Ok(AuditReport::new(
        name,
        n_samples as u64,
        p,
        bound,
        3.0 * se,
        false,
        seed,
        json!({
            "alpha": alpha,
            "beta": beta,
            "eta": eta,
            "threshold": threshold,
            "bound_alpha": bound_alpha,
            "exact_tail": exact,
            "std_error": se,
        }),
    ))
}

/// `Pr[X ≤ (1−η)·α/(α+β)] ≤ exp(−αη²/4)` for `X ~ Beta(α, β)`.
pub fn beta_tail_check(alpha: f64, beta: f64, eta: f64, n_samples: usize, seed: u64) -> Result<AuditReport> {
    beta_tail_inner(alpha, beta, eta, n_samples, seed, alpha, "beta_tail")
}

/// Same sampling, but the bound is evaluated with `100α`; it should fail.
pub fn beta_tail_negative_control(alpha: f64, beta: f64, eta: f64, n_samples: usize, seed: u64) -> Result<AuditReport> {
    Ok(beta_tail_inner(
        alpha,
        beta,
        eta,
        n_samples,
        seed,
        100.0 * alpha,
        "beta_tail_negative_control",
    )?
    .as_negative_control())
}

/// `max{2κp(1 − 2τ/‖z‖²), 32 log(1/γ)}` rounded up; errors when it exceeds `p`.
pub fn projection_threshold(kappa: f64, p: usize, tau: f64, z_norm2: f64, gamma: f64) -> Result<usize> {
    if !(gamma > 0.0 && gamma < 1.0) || !(tau >= 0.0) || !(kappa >= 1.0) {
        return Err(Error::InvalidInputs(format!(
            "bad parameters kappa={kappa}, tau={tau}, gamma={gamma}"
        )));
    }
    let a = if z_norm2 > 0.0 {
        2.0 * kappa * p as f64 * (1.0 - 2.0 * tau / z_norm2)
    } else {
        0.0
    };
    let b = 32.0 * (1.0 / gamma).ln();
    let threshold = a.max(b).ceil().max(1.0) as usize;
    if threshold > p {
        return Err(Error::InfeasibleThreshold { threshold, p });
    }
    Ok(threshold)
}

/// Draws `n_draws` random subspaces of the size the threshold prescribes and
/// checks that the fraction with utility gap above `τ` is at most `γ`.
pub fn projection_gap_check(
    full: &CurvatureBundle,
    tau: f64,
    gamma: f64,
    n_draws: usize,
    seed: u64,
) -> Result<AuditReport> {
    if full.is_projected() {
        return Err(Error::InvalidInputs("expected a full bundle".into()));
    }
    if n_draws == 0 {
        return Err(Error::InsufficientSamples("no draws".into()));
    }
    let p = full.dim();
    let e = sym_eigen(&full.hess)?;
    let kappa = e.max() / e.min();
    let z = whitened_gradient(full)?;
    let z2 = dot(&z, &z);
    if z2 > 0.0 && !(tau < 0.5 * z2) {
        return Err(Error::InvalidInputs(format!("need tau < |z|^2/2 = {}", 0.5 * z2)));
    }
    let (p_tilde, infeasible) = match projection_threshold(kappa, p, tau, z2, gamma) {
        Ok(k) => (k, None),
        Err(Error::InfeasibleThreshold { threshold, .. }) => (p, Some(threshold)),
        Err(e) => return Err(e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut max_gap = 0.0f64;
    for _ in 0..n_draws {
        let proj = stiefel_sample(p, p_tilde, rng.next_u64())?;
        let gap = utility_gap(full, &full.project(proj.a)?)?;
        max_gap = max_gap.max(gap);
        if gap > tau {
            violations += 1;
        }
    }
    let n = n_draws as f64;
    let frac = violations as f64 / n;
    let se = (gamma * (1.0 - gamma) / n).sqrt();
    Ok(AuditReport::new(
        "projection_gap",
        n_draws as u64,
        frac,
        gamma,
        3.0 * se,
        infeasible.is_some(),
        seed,
        json!({
            "p": p,
            "p_tilde": p_tilde,
            "kappa": kappa,
            "z_norm2": z2,
            "tau": tau,
            "gamma": gamma,
            "max_gap": max_gap,
            "infeasible_threshold": infeasible,
        }),
    ))
}

/// Measured rejection rate of the rejection sampler against the analytic
/// bound.
pub fn rejection_rate_check(
    bundle: &CurvatureBundle,
    cfg: &MechanismConfig,
    report: &SensitivityReport,
    n_samples: usize,
) -> Result<AuditReport> {
    let mut cfg = cfg.clone();
    cfg.sampler = Sampler::Rejection;
    let (_, diag) = run_mechanism(bundle, &cfg, n_samples, Some(report))?;
    let rate = diag.rejection_rate.expect("rejection sampler");
    let proposals = (n_samples as f64 / (1.0 - rate)).round();
    let se = (rate * (1.0 - rate) / proposals).sqrt();
    let bound = diag.rejection_bound.unwrap_or(f64::INFINITY);
    Ok(AuditReport::new(
        "rejection_rate",
        proposals as u64,
        rate,
        bound,
        3.0 * se,
        !(bound < 1.0),
        cfg.seed,
        json!({
            "markov": diag.rejection_markov,
            "r_bar_lambda": diag.r_bar_lambda,
            "mu_norm": diag.mu_norm,
            "radius": diag.radius,
            "dim": diag.dim,
        }),
    ))
}

/// Sample sizes for [`standard_suite`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteScale {
    pub epsilon_samples: usize,
    pub epsilon_seeds: usize,
    pub tail_samples: usize,
    pub beta_samples: usize,
    pub gap_draws: usize,
    pub rejection_samples: usize,
    pub chain_bundles: usize,
}

impl SuiteScale {
    pub fn full() -> Self {
        Self {
            epsilon_samples: 1_000_000,
            epsilon_seeds: 10,
            tail_samples: 200_000,
            beta_samples: 200_000,
            gap_draws: 500,
            rejection_samples: 20_000,
            chain_bundles: 100,
        }
    }

    pub fn quick() -> Self {
        Self {
            epsilon_samples: 200_000,
            epsilon_seeds: 2,
            tail_samples: 20_000,
            beta_samples: 20_000,
            gap_draws: 100,
            rejection_samples: 2_000,
            chain_bundles: 20,
        }
    }
}

/// `(α, β, η)` triples for the Beta tail check; the second is
/// `(p̃/2, (p − p̃)/2)` with `p = 200`, `p̃ = 40`.
pub const BETA_TRIPLES: [(f64, f64, f64); 5] = [
    (10.0, 45.0, 0.5),
    (20.0, 80.0, 0.5),
    (5.0, 5.0, 0.3),
    (50.0, 150.0, 0.2),
    (2.0, 30.0, 0.8),
];

/// Bundle with `H = diag(h)` (no ridge) and gradient `g`.
pub fn diagonal_bundle(h: &[f64], g: &[f64]) -> Result<CurvatureBundle> {
    check_len(h.len(), g.len())?;
    let p = h.len();
    if p == 0 {
        return Err(Error::InvalidInputs("empty bundle".into()));
    }
    Ok(CurvatureBundle {
        anchor: ParamVector::zeros(Arc::new(ModelSpec::linear(p - 1, 1))),
        grad: g.to_vec(),
        hess: SymMatrix::diag(h),
        lambda: 0.0,
        projection: None,
        n: 1,
    })
}

fn random_regression(spec: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<LabeledDataset> {
    let w: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let samples = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..spec.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut y = spec.forward(&w, &x)?;
            for v in &mut y {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
            Ok(Sample { x, y })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(TaskKind::Regression, spec.input_dim, spec.output_dim, samples)
}

fn random_classification(spec: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<LabeledDataset> {
    let m = spec.output_dim;
    let samples = (0..n)
        .map(|_| {
            let c = rng.random_range(0..m);
            let x: Vec<f64> = (0..spec.input_dim)
                .map(|k| if k % m == c { 1.0 } else { 0.0 } + 0.5 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Sample {
                x,
                y: crate::datasets::one_hot(c, m),
            }
        })
        .collect();
    LabeledDataset::new(TaskKind::Classification, spec.input_dim, m, samples)
}

/// One rejection-rate configuration: the radius is `radius_factor · R̄_λ`.
struct RejectionCase {
    spec: ModelSpec,
    loss: LossKind,
    lambda: f64,
    radius_factor: f64,
    epsilon: f64,
}

fn rejection_cases() -> Vec<RejectionCase> {
    let reg = |lambda, radius_factor, epsilon| RejectionCase {
        spec: ModelSpec::linear(3, 1),
        loss: LossKind::MeanSquared,
        lambda,
        radius_factor,
        epsilon,
    };
    vec![
        reg(1.0, 4.0, 1.0),
        reg(1.0, 2.0, 10.0),
        reg(0.5, 3.0, 5.0),
        reg(2.0, 1.5, 50.0),
        RejectionCase {
            spec: ModelSpec::linear(2, 3),
            loss: LossKind::CrossEntropy,
            lambda: 1.0,
            radius_factor: 3.0,
            epsilon: 5.0,
        },
    ]
}

fn rejection_case_report(case: &RejectionCase, n_samples: usize, seed: u64) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = match case.loss {
        LossKind::MeanSquared => random_regression(&case.spec, 500, &mut rng)?,
        LossKind::CrossEntropy => random_classification(&case.spec, 500, &mut rng)?,
    };
    let layout = Arc::new(case.spec.clone());
    let anchor = ParamVector::init_uniform(layout.clone(), &mut rng);
    let exec = Execution::Sequential;
    let bundle = dataset_curvature(&layout, &anchor, case.loss, &data, case.lambda, None, exec)?;
    // ḡ does not depend on R, so R̄_λ can be computed first.
    let probe = empirical_sensitivity(&layout, anchor.values(), case.loss, &data, 1.0, DEFAULT_INFLATION, exec)?;
    let radius = case.radius_factor * r_lambda_bar(&bundle, probe.g_bar)?;
    let sens = empirical_sensitivity(
        &layout,
        anchor.values(),
        case.loss,
        &data,
        radius,
        DEFAULT_INFLATION,
        exec,
    )?;
    let cfg = MechanismConfig::new(case.epsilon, sens.delta_u, radius, Sampler::Rejection, rng.next_u64());
    let mut r = rejection_rate_check(&bundle, &cfg, &sens, n_samples)?;
    if let serde_json::Value::Object(m) = &mut r.details {
        m.insert("epsilon".into(), json!(case.epsilon));
        m.insert("lambda".into(), json!(case.lambda));
        m.insert("loss".into(), json!(case.loss));
    }
    Ok(r)
}

/// `1/(λ+H̄) ≤ 1/(λ+|H|) ≤ |H_λ⁻¹| ≤ 1/(λ+e_min) ≤ 1/λ` on random bundles
/// built from small models and datasets. The statistic is the largest
/// relative step down along the chain.
pub fn inverse_chain_check(n_bundles: usize, seed: u64) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = [
        (ModelSpec::linear(3, 1), LossKind::MeanSquared),
        (
            ModelSpec::mlp(2, &[4], 1, crate::model::Activation::Tanh),
            LossKind::MeanSquared,
        ),
        (ModelSpec::linear(2, 3), LossKind::CrossEntropy),
        (
            ModelSpec::mlp(3, &[3], 2, crate::model::Activation::Relu),
            LossKind::CrossEntropy,
        ),
    ];
    let mut worst = f64::NEG_INFINITY;
    for k in 0..n_bundles {
        let (spec, loss) = &specs[k % specs.len()];
        let n = rng.random_range(5..60);
        let data = match loss {
            LossKind::MeanSquared => random_regression(spec, n, &mut rng)?,
            LossKind::CrossEntropy => random_classification(spec, n, &mut rng)?,
        };
        let layout = Arc::new(spec.clone());
        let anchor = ParamVector::init_uniform(layout.clone(), &mut rng);
        let lambda = rng.random_range(0.01..2.0);
        let bundle = dataset_curvature(&layout, &anchor, *loss, &data, lambda, None, Execution::Sequential)?;
        let sens = empirical_sensitivity(&layout, anchor.values(), *loss, &data, 1.0, 1.0, Execution::Sequential)?;
        let chain = hlambda_inverse_chain(&bundle, sens.h_bar)?;
        for w in chain.windows(2) {
            worst = worst.max((w[0] - w[1]) / w[1]);
        }
    }
    Ok(AuditReport::new(
        "hlambda_inverse_chain",
        n_bundles as u64,
        worst,
        0.0,
        1e-9,
        false,
        seed,
        json!({ "statistic": "max relative decrease between consecutive terms" }),
    ))
}

/// The check families [`run_checks`] knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditCheck {
    Epsilon,
    UtilityTail,
    BetaTail,
    ProjectionGap,
    RejectionRate,
    InverseChain,
}

impl AuditCheck {
    pub const ALL: [AuditCheck; 6] = [
        AuditCheck::Epsilon,
        AuditCheck::UtilityTail,
        AuditCheck::BetaTail,
        AuditCheck::ProjectionGap,
        AuditCheck::RejectionRate,
        AuditCheck::InverseChain,
    ];

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

/// Every check family, each with its negative control where one exists.
pub fn standard_suite(scale: &SuiteScale, seed: u64) -> Result<Vec<AuditReport>> {
    run_checks(&AuditCheck::ALL, scale, seed, false)
}

/// Runs the selected families in the given order. Each family draws from its
/// own seed stream, so selecting a subset does not change its results.
/// `broken_delta_u` halves the sensitivity used by the ε audits while still
/// reporting them as ordinary checks.
pub fn run_checks(
    checks: &[AuditCheck],
    scale: &SuiteScale,
    seed: u64,
    broken_delta_u: bool,
) -> Result<Vec<AuditReport>> {
    let mut out = Vec::new();
    for &check in checks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(check.stream());
        match check {
            AuditCheck::Epsilon => {
                let inst = EpsilonInstance::standard(1.0);
                let du = if broken_delta_u {
                    0.5 * inst.delta_u()
                } else {
                    inst.delta_u()
                };
                for _ in 0..scale.epsilon_seeds {
                    out.push(inst.audit(du, Sampler::Gibbs, 20, scale.epsilon_samples, rng.next_u64())?);
                }
                out.push(inst.negative_control(Sampler::Gibbs, 20, scale.epsilon_samples, rng.next_u64())?);
            }
            AuditCheck::UtilityTail => {
                let tail = scalar_bundle(&[ScalarPoint { g: 0.5, h: 1.0 }], 0.0)?;
                for eps in [2.0, 4.0] {
                    let cfg = MechanismConfig::new(eps, 0.1, 1.0, Sampler::Rejection, rng.next_u64());
                    out.extend(utility_tail_check(&tail, &cfg, &[1.0, 2.0, 5.0], scale.tail_samples)?);
                }
            }
            AuditCheck::BetaTail => {
                for (a, b, eta) in BETA_TRIPLES {
                    out.push(beta_tail_check(a, b, eta, scale.beta_samples, rng.next_u64())?);
                }
                let (a, b, eta) = BETA_TRIPLES[0];
                out.push(beta_tail_negative_control(
                    a,
                    b,
                    eta,
                    scale.beta_samples,
                    rng.next_u64(),
                )?);
            }
            AuditCheck::ProjectionGap => {
                let mut grng = ChaCha8Rng::seed_from_u64(rng.next_u64());
                let mut gaps = Vec::new();
                // H = I, p = 60, γ = 0.1: the threshold exceeds p.
                let g60: Vec<f64> = (0..60).map(|_| grng.random_range(-1.0..1.0)).collect();
                gaps.push((diagonal_bundle(&[1.0; 60], &g60)?, 0.4, 0.1));
                let g120: Vec<f64> = (0..120).map(|_| grng.random_range(-1.0..1.0)).collect();
                gaps.push((diagonal_bundle(&[1.0; 120], &g120)?, 0.4, 0.5));
                let h120: Vec<f64> = (0..120).map(|i| 1.0 + 0.5 * i as f64 / 119.0).collect();
                gaps.push((diagonal_bundle(&h120, &g120)?, 0.45, 0.5));
                for (b, tau_frac, gamma) in gaps {
                    let z = whitened_gradient(&b)?;
                    let tau = tau_frac * dot(&z, &z);
                    out.push(projection_gap_check(&b, tau, gamma, scale.gap_draws, rng.next_u64())?);
                }
            }
            AuditCheck::RejectionRate => {
                for case in rejection_cases() {
                    out.push(rejection_case_report(&case, scale.rejection_samples, rng.next_u64())?);
                }
            }
            AuditCheck::InverseChain => out.push(inverse_chain_check(scale.chain_bundles, rng.next_u64())?),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn quad_bundle(h: f64, g: f64, lambda: f64) -> CurvatureBundle {
        scalar_bundle(&[ScalarPoint { g, h }], lambda).unwrap()
    }

    #[test]
    fn identical_datasets_give_near_zero_epsilon() {
        let inst = EpsilonInstance::standard(1.0);
        let same = EpsilonInstance {
            d_prime: inst.d.clone(),
            ..inst.clone()
        };
        let r = same.audit(same.delta_u(), Sampler::Gibbs, 20, 100_000, 3).unwrap();
        assert!(r.passed);
        assert!(r.statistic <= r.slack, "{r:?}");
    }

    #[test]
    fn epsilon_instance_is_calibrated_and_tight() {
        let inst = EpsilonInstance::standard(1.0);
        let exact = inst.exact_delta_u().unwrap();
        assert!(exact <= inst.delta_u() + 1e-12);
        assert!(exact >= 0.99 * inst.delta_u());
        let loss = inst.exact_privacy_loss(inst.delta_u()).unwrap();
        assert!(loss <= inst.epsilon && loss > 0.6, "{loss}");
        // Halving the sensitivity roughly doubles the loss.
        assert!(inst.exact_privacy_loss(0.5 * inst.delta_u()).unwrap() > 1.5 * inst.epsilon);
    }

    #[test]
    fn halved_sensitivity_is_caught() {
        let inst = EpsilonInstance::standard(1.0);
        let good = inst.audit(inst.delta_u(), Sampler::Gibbs, 20, 200_000, 11).unwrap();
        let bad = inst.negative_control(Sampler::Gibbs, 20, 200_000, 11).unwrap();
        assert!(good.passed, "{good:?}");
        assert!(!bad.passed, "{bad:?}");
        assert!(!good.is_failure() && !bad.is_failure());
    }

    #[test]
    fn insufficient_samples() {
        let inst = EpsilonInstance::standard(1.0);
        assert!(matches!(
            inst.audit(inst.delta_u(), Sampler::Gibbs, 20, 100, 0),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn set_lengths_match_roots_of_the_quadratic() {
        // U(x) = −(0.5x + ½x²) on [−1, 1].
        let u = |x: f64| -(0.5 * x + 0.5 * x * x);
        for level in [0.1, 0.0, -0.3, -0.9, -2.0] {
            // U > level ⟺ x² + x + 2·level < 0.
            let disc: f64 = 1.0 - 8.0 * level;
            let exact = if disc <= 0.0 {
                0.0
            } else {
                let s = disc.sqrt();
                ((-1.0 + s) / 2.0).min(1.0) - ((-1.0 - s) / 2.0).max(-1.0)
            };
            let est = set_length(|x| u(x) > level, -1.0, 1.0, &[-0.5], 1e-7);
            assert!((est - exact.max(0.0)).abs() <= 1e-6, "level {level}: {est} vs {exact}");
            let est_c = set_length(|x| u(x) <= level, -1.0, 1.0, &[-0.5], 1e-7);
            assert!((est + est_c - 2.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn narrow_set_around_a_breakpoint_is_found() {
        let est = set_length(|x| (x - 0.3).abs() < 1e-4, -1.0, 1.0, &[0.3], 1e-9);
        assert!((est - 2e-4).abs() < 1e-8);
    }

    #[test]
    fn utility_tail_on_the_quadratic_instance() {
        let b = quad_bundle(1.0, 0.5, 0.0);
        let cfg = MechanismConfig::new(2.0, 0.1, 1.0, Sampler::Rejection, 5);
        let reps = utility_tail_check(&b, &cfg, &[1.0, 2.0, 5.0, 50.0], 50_000).unwrap();
        for r in &reps {
            assert!(r.passed, "{r:?}");
        }
        // t = 1 is vacuous, t = 5 is informative.
        assert!(reps[0].vacuous);
        assert!(!reps[2].vacuous);
        // Level below the minimum of U: B_t is empty.
        assert_eq!(reps[3].statistic, 0.0);
        assert_eq!(reps[3].bound, 0.0);
        // Analytic lengths at t = 5: B_t = [0.5, 1], B^c = (−1, (√2 − 1)/2).
        let d = &reps[2].details;
        assert!((d["len_b_t"].as_f64().unwrap() - 0.5).abs() < 1e-6);
        let bc = (2f64.sqrt() - 1.0) / 2.0 + 1.0;
        assert!((d["len_b_c_half"].as_f64().unwrap() - bc).abs() < 1e-6);
    }

    #[test]
    fn doubling_epsilon_shrinks_the_bound_by_the_exponential_factor() {
        let b = quad_bundle(1.0, 0.5, 0.0);
        let c1 = MechanismConfig::new(2.0, 0.1, 1.0, Sampler::Rejection, 5);
        let c2 = MechanismConfig::new(4.0, 0.1, 1.0, Sampler::Rejection, 5);
        let r1 = utility_tail_check(&b, &c1, &[5.0], 20_000).unwrap();
        let r2 = utility_tail_check(&b, &c2, &[5.0], 20_000).unwrap();
        assert!((r2[0].bound / r1[0].bound - (-2.0 * 5.0 / 4.0f64).exp()).abs() < 1e-9);
        assert!(r2[0].passed && r2[0].statistic <= r1[0].statistic);
    }

    #[test]
    fn beta_tail_and_negative_control() {
        let r = beta_tail_check(10.0, 45.0, 0.5, 20_000, 1).unwrap();
        assert!(r.passed);
        assert!((r.bound - (-10.0 * 0.25 / 4.0f64).exp()).abs() < 1e-12);
        let exact = r.details["exact_tail"].as_f64().unwrap();
        assert!((r.statistic - exact).abs() < 4.0 * r.slack / 3.0 + 1e-3);
        let bad = beta_tail_negative_control(10.0, 45.0, 0.5, 20_000, 1).unwrap();
        assert!(!bad.passed);
        let tied = beta_tail_check(20.0, 80.0, 0.5, 20_000, 2).unwrap();
        assert!(tied.passed);
    }

    #[test]
    fn beta_tail_near_one() {
        let r = beta_tail_check(3.0, 7.0, 0.999_999, 10_000, 4).unwrap();
        assert!(r.statistic < 1e-3 && r.passed);
    }

    fn identity_bundle(p: usize, seed: u64) -> CurvatureBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = Arc::new(ModelSpec::linear(p - 1, 1));
        CurvatureBundle {
            anchor: ParamVector::zeros(spec),
            grad: g,
            hess: SymMatrix::identity(p),
            lambda: 0.0,
            projection: None,
            n: 1,
        }
    }

    #[test]
    fn threshold_formula() {
        assert!(matches!(
            projection_threshold(1.0, 60, 0.4, 1.0, 0.1),
            Err(Error::InfeasibleThreshold { threshold: 74, p: 60 })
        ));
        assert_eq!(projection_threshold(1.0, 400, 0.4, 1.0, 0.5).unwrap(), 160);
    }

    #[test]
    fn capped_threshold_gives_identity_subspace() {
        let b = identity_bundle(60, 2);
        let z2 = dot(&b.grad, &b.grad);
        let r = projection_gap_check(&b, 0.4 * z2, 0.1, 50, 9).unwrap();
        assert!(r.vacuous && r.passed);
        assert_eq!(r.details["p_tilde"], 60);
        assert!(r.details["max_gap"].as_f64().unwrap() < 1e-9);
    }

    #[test]
    fn projection_gap_holds_at_the_threshold() {
        let b = identity_bundle(120, 3);
        let z2 = dot(&b.grad, &b.grad);
        let r = projection_gap_check(&b, 0.4 * z2, 0.5, 200, 10).unwrap();
        assert_eq!(r.details["p_tilde"], 48);
        assert!(r.passed && !r.vacuous, "{r:?}");
    }

    #[test]
    fn zero_gradient_has_zero_gap() {
        let mut b = identity_bundle(30, 4);
        b.grad = vec![0.0; 30];
        let r = projection_gap_check(&b, 0.0, 0.5, 20, 1).unwrap();
        assert_eq!(r.statistic, 0.0);
    }

    #[test]
    fn project_matches_explicit_congruence() {
        let b = identity_bundle(5, 6);
        let a = stiefel_sample(5, 2, 1).unwrap().a;
        let pb = b.project(a.clone()).unwrap();
        let at: Matrix = a.transpose();
        assert_eq!(pb.grad, at.mul_vec(&b.grad).unwrap());
        assert!(pb.hess.matrix().max_abs_diff(&Matrix::identity(2)) < 1e-12);
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let r = beta_tail_check(10.0, 45.0, 0.5, 1000, 1).unwrap();
        append_jsonl(&path, &[r.clone()]).unwrap();
        append_jsonl(&path, &[r.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<AuditReport> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows, vec![r.clone(), r]);
    }

    #[test]
    fn quick_suite_has_no_failures() {
        let reps = standard_suite(&SuiteScale::quick(), 1).unwrap();
        for r in &reps {
            assert!(!r.is_failure(), "{r:?}");
        }
        assert!(reps.iter().filter(|r| r.negative_control).count() == 2);
        let rej: Vec<_> = reps.iter().filter(|r| r.check_name == "rejection_rate").collect();
        assert_eq!(rej.len(), 5);
        assert!(rej.iter().all(|r| !r.vacuous), "{rej:?}");
    }

    #[test]
    fn selected_checks_match_their_part_of_the_suite() {
        let scale = SuiteScale::quick();
        let all = standard_suite(&scale, 4).unwrap();
        let chain = run_checks(&[AuditCheck::InverseChain], &scale, 4, false).unwrap();
        assert_eq!(chain.as_slice(), &all[all.len() - 1..]);
        assert!(run_checks(&[], &scale, 4, false).unwrap().is_empty());
    }

    #[test]
    fn broken_sensitivity_fails_the_epsilon_audit() {
        let mut scale = SuiteScale::quick();
        scale.epsilon_seeds = 1;
        let reps = run_checks(&[AuditCheck::Epsilon], &scale, 2, true).unwrap();
        assert!(reps[0].is_failure(), "{:?}", reps[0]);
    }

    #[test]
    fn audits_are_seed_deterministic() {
        let a = beta_tail_check(10.0, 45.0, 0.5, 5000, 7).unwrap();
        let b = beta_tail_check(10.0, 45.0, 0.5, 5000, 7).unwrap();
        assert_eq!(a, b);
        let inst = EpsilonInstance::standard(1.0);
        let x = inst.audit(inst.delta_u(), Sampler::Rejection, 10, 20_000, 1).unwrap();
        let y = inst.audit(inst.delta_u(), Sampler::Rejection, 10, 20_000, 1).unwrap();
        assert_eq!(x, y);
    }
}
