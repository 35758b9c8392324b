//! The ball-truncated Gaussian mechanism.
//!
//! Sampling density is `∝ exp(ε U(θ) / (2ΔŪ))` on `|θ − θ*| ≤ R`, which for
//! the quadratic utility is `Normal(μ, (2ΔŪ/ε) H_λ⁻¹)` restricted to the
//! ball. On the projected path everything happens in `ξ`-space centered at
//! 0 and samples are lifted with `θ = θ* + Aξ`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::curvature::CurvatureBundle;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, orthonormalize, solve_spd, spd_factor, Matrix, SpdFactor, SymMatrix};
use crate::model::ParamVector;
use crate::privacy::{rejection_prob_bound, SensitivityReport};
use crate::truncnorm::sample_truncnorm_1d;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Rejection,
    #[default]
    Gibbs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub epsilon: f64,
    pub delta_u: f64,
    /// Ball radius; `f64::INFINITY` disables truncation.
    pub radius: f64,
    #[serde(default)]
    pub sampler: Sampler,
    #[serde(default = "default_burn_in")]
    pub gibbs_burn_in: usize,
    #[serde(default = "default_thin")]
    pub gibbs_thin: usize,
    #[serde(default = "default_max_proposals")]
    pub max_rejection_proposals: u64,
    pub seed: u64,
}

fn default_burn_in() -> usize {
    500
}
fn default_thin() -> usize {
    5
}
fn default_max_proposals() -> u64 {
    1_000_000
}

impl MechanismConfig {
    pub fn new(epsilon: f64, delta_u: f64, radius: f64, sampler: Sampler, seed: u64) -> Self {
        Self {
            epsilon,
            delta_u,
            radius,
            sampler,
            gibbs_burn_in: default_burn_in(),
            gibbs_thin: default_thin(),
            max_rejection_proposals: default_max_proposals(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidInputs(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.delta_u > 0.0) || !self.delta_u.is_finite() {
            return Err(Error::InvalidInputs(format!(
                "sensitivity must be > 0, got {}",
                self.delta_u
            )));
        }
        if !(self.radius > 0.0) {
            return Err(Error::InvalidInputs(format!("radius must be > 0, got {}", self.radius)));
        }
        if self.gibbs_thin == 0 {
            return Err(Error::InvalidInputs("thin must be >= 1".into()));
        }
        Ok(())
    }

    /// `ε / (2ΔŪ)`
    pub fn precision_scale(&self) -> f64 {
        self.epsilon / (2.0 * self.delta_u)
    }
}

/// `Normal(mean, H_λ⁻¹ / precision_scale)` before truncation.
#[derive(Clone, Debug)]
pub struct GaussianCore {
    pub mean: Vec<f64>,
    pub precision_scale: f64,
    pub hess: SymMatrix,
    pub factor: SpdFactor,
}

impl GaussianCore {
    pub fn new(bundle: &CurvatureBundle, cfg: &MechanismConfig) -> Result<Self> {
        cfg.validate()?;
        let factor = spd_factor(&bundle.hess)?;
        let mean = mean_from_factor(bundle, &factor)?;
        Ok(Self {
            mean,
            precision_scale: cfg.precision_scale(),
            hess: bundle.hess.clone(),
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn mean_from_factor(bundle: &CurvatureBundle, factor: &SpdFactor) -> Result<Vec<f64>> {
    let step = solve_spd(factor, &bundle.grad)?;
    Ok(bundle.center().iter().zip(&step).map(|(c, s)| c - s).collect())
}

/// `θ* − H_λ⁻¹g` on the full path, `−H_{λ,A}⁻¹g_A` on the projected path.
pub fn mechanism_mean(bundle: &CurvatureBundle) -> Result<Vec<f64>> {
    mean_from_factor(bundle, &spd_factor(&bundle.hess)?)
}

#[derive(Clone, Debug)]
pub struct Draws {
    pub samples: Vec<Vec<f64>>,
    /// Proposals (rejection) or coordinate scans (Gibbs).
    pub work: u64,
}

fn inside(x: &[f64], center: &[f64], r: f64) -> bool {
    if r.is_infinite() {
        return true;
    }
    let d2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
    d2 <= r * r
}

/// Exact i.i.d. draws by proposing from the untruncated Gaussian and
/// discarding points outside the ball.
pub fn sample_rejection(core: &GaussianCore, center: &[f64], cfg: &MechanismConfig, count: usize) -> Result<Draws> {
    cfg.validate()?;
    let p = core.dim();
    let scale = 1.0 / core.precision_scale.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(count);
    let mut proposals = 0u64;
    while samples.len() < count {
        if proposals >= cfg.max_rejection_proposals {
            return Err(Error::ProposalBudgetExceeded {
                proposals,
                accepted: samples.len(),
                acceptance_rate: samples.len() as f64 / proposals as f64,
            });
        }
        proposals += 1;
        let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let w = core.factor.solve_upper(&z)?;
        let x: Vec<f64> = core.mean.iter().zip(&w).map(|(m, v)| m + scale * v).collect();
        if inside(&x, center, cfg.radius) {
            samples.push(x);
        }
    }
    Ok(Draws {
        samples,
        work: proposals,
    })
}

/// Systematic-scan Gibbs chain started at the ball center. Each coordinate
/// is redrawn from its Gaussian conditional truncated to the chord of the
/// ball through the current point.
pub fn sample_gibbs(core: &GaussianCore, center: &[f64], cfg: &MechanismConfig, count: usize) -> Result<Draws> {
    cfg.validate()?;
    let p = core.dim();
    crate::linalg::check_len(p, center.len())?;
    let h = core.hess.matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = center.to_vec();
    let r2 = cfg.radius * cfg.radius;
    let scans = cfg.gibbs_burn_in + count * cfg.gibbs_thin;
    let mut samples = Vec::with_capacity(count);

    for scan in 0..scans {
        // Residual H(x − μ) and squared offset are refreshed every scan so
        // rounding does not accumulate along the chain.
        let d: Vec<f64> = x.iter().zip(&core.mean).map(|(a, m)| a - m).collect();
        let mut hd = core.hess.mul_vec(&d)?;
        let mut off2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
        if cfg.radius.is_finite() && off2 > r2 * (1.0 + 1e-12) {
            return Err(Error::InfeasibleState {
                norm: off2.sqrt(),
                radius: cfg.radius,
            });
        }
        for i in 0..p {
            let hii = h[(i, i)];
            let di = x[i] - core.mean[i];
            let cond_mean = core.mean[i] - (hd[i] - hii * di) / hii;
            let sd = 1.0 / (core.precision_scale * hii).sqrt();
            let ci = x[i] - center[i];
            let rest = (off2 - ci * ci).max(0.0);
            let (lo, hi) = if cfg.radius.is_finite() {
                let half = (r2 - rest).max(0.0).sqrt();
                (center[i] - half, center[i] + half)
            } else {
                (f64::NEG_INFINITY, f64::INFINITY)
            };
            let new = sample_truncnorm_1d(cond_mean, sd, lo, hi, &mut rng)?;
            let delta = new - x[i];
            if delta != 0.0 {
                for (k, v) in hd.iter_mut().enumerate() {
                    *v += delta * h[(k, i)];
                }
                x[i] = new;
                let nci = new - center[i];
                off2 = rest + nci * nci;
            }
        }
        if scan >= cfg.gibbs_burn_in && (scan + 1 - cfg.gibbs_burn_in) % cfg.gibbs_thin == 0 {
            samples.push(x.clone());
        }
    }
    Ok(Draws {
        samples,
        work: scans as u64,
    })
}

#[derive(Clone, Debug)]
pub struct ProjectionBundle {
    pub a: Arc<Matrix>,
    pub p: usize,
    pub p_tilde: usize,
    pub seed: u64,
}

/// Haar-uniform point of the Stiefel manifold `V_{p,p̃}`.
pub fn stiefel_sample(p: usize, p_tilde: usize, seed: u64) -> Result<ProjectionBundle> {
    if p_tilde == 0 || p_tilde > p {
        return Err(Error::InvalidInputs(format!(
            "need 1 <= p~ <= p, got p~={p_tilde}, p={p}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let g = Matrix::from_fn(p, p_tilde, |_, _| rng.sample(StandardNormal));
        match orthonormalize(&g) {
            Ok(a) => {
                return Ok(ProjectionBundle {
                    a: Arc::new(a),
                    p,
                    p_tilde,
                    seed,
                })
            }
            Err(Error::RankDeficient { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub burn_in: usize,
    pub thin: usize,
    pub scans: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    /// Measured fraction of rejected proposals (rejection sampler only).
    pub rejection_rate: Option<f64>,
    /// Analytic bound on the rejection probability, when a sensitivity
    /// report is supplied and `λ + e_min(H) > 0`.
    pub rejection_bound: Option<f64>,
    pub rejection_markov: Option<f64>,
    pub r_bar_lambda: Option<f64>,
    /// Distance from the ball center to the untruncated mean.
    pub mu_norm: f64,
    pub radius: f64,
    pub dim: usize,
    pub seed: u64,
    pub sampler: Sampler,
    pub chain_params: Option<ChainParams>,
}

/// Draws `count` parameter vectors from the mechanism.
pub fn run_mechanism(
    bundle: &CurvatureBundle,
    cfg: &MechanismConfig,
    count: usize,
    report: Option<&SensitivityReport>,
) -> Result<(Vec<ParamVector>, RunDiagnostics)> {
    let core = GaussianCore::new(bundle, cfg)?;
    let center = bundle.center();
    let draws = match cfg.sampler {
        Sampler::Rejection => sample_rejection(&core, &center, cfg, count)?,
        Sampler::Gibbs => sample_gibbs(&core, &center, cfg, count)?,
    };
    let mu_off: Vec<f64> = core.mean.iter().zip(&center).map(|(m, c)| m - c).collect();
    let (rejection_bound, rejection_markov, r_bar_lambda) = match report {
        Some(rep) => match rejection_prob_bound(
            bundle,
            cfg.delta_u,
            cfg.epsilon,
            cfg.radius,
            rep.g_bar,
            rep.h_bar,
            rep.components.n_min,
        ) {
            Ok(b) => (Some(b.bound), Some(b.markov), Some(b.r_bar_lambda)),
            Err(Error::SingularCurvature(_)) => (None, None, None),
            Err(e) => return Err(e),
        },
        None => (None, None, None),
    };
    let diagnostics = RunDiagnostics {
        rejection_rate: match cfg.sampler {
            Sampler::Rejection => Some(1.0 - count as f64 / draws.work as f64),
            Sampler::Gibbs => None,
        },
        rejection_bound,
        rejection_markov,
        r_bar_lambda,
        mu_norm: norm(&mu_off),
        radius: cfg.radius,
        dim: core.dim(),
        seed: cfg.seed,
        sampler: cfg.sampler,
        chain_params: match cfg.sampler {
            Sampler::Gibbs => Some(ChainParams {
                burn_in: cfg.gibbs_burn_in,
                thin: cfg.gibbs_thin,
                scans: draws.work,
            }),
            Sampler::Rejection => None,
        },
    };
    let thetas = draws
        .samples
        .iter()
        .map(|s| bundle.lift(s))
        .collect::<Result<Vec<_>>>()?;
    Ok((thetas, diagnostics))
}

/// `½gᵀH_λ⁻¹g − ½g_AᵀH_{λ,A}⁻¹g_A`, the optimal utility lost by restricting
/// to the subspace.
pub fn utility_gap(full: &CurvatureBundle, projected: &CurvatureBundle) -> Result<f64> {
    if full.is_projected() || !projected.is_projected() {
        return Err(Error::InvalidInputs("expected a full and a projected bundle".into()));
    }
    let opt = |b: &CurvatureBundle| -> Result<f64> {
        let f = spd_factor(&b.hess)?;
        Ok(0.5 * dot(&b.grad, &solve_spd(&f, &b.grad)?))
    };
    Ok(opt(full)? - opt(projected)?)
}
