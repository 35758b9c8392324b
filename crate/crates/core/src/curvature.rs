//! Per-datapoint gradients and Gauss-Newton matrices at the anchor, their
//! dataset averages, and the quadratic utility built from them.

use std::sync::Arc;

use crate::datasets::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::linalg::{axpy, check_len, dot, Matrix, SymMatrix};
use crate::loss::LossKind;
use crate::model::{ModelSpec, ParamVector, Tape};
use crate::par::{chunked_tree_reduce, map_indexed, Execution};

/// Largest `p` for which a `p × p` Gauss-Newton matrix is materialized.
pub const DENSE_HESSIAN_CAP: usize = 2000;

/// `g(x, y) = Jᵀ ∇_f ℓ`
pub fn per_point_gradient(spec: &ModelSpec, anchor: &[f64], loss: LossKind, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::default();
    spec.forward_tape(anchor, x, &mut tape)?;
    let w = loss.grad_f(y, tape.output())?;
    let mut g = vec![0.0; spec.param_count()];
    spec.vjp_tape(anchor, &tape, &w, 1.0, &mut g)?;
    Ok(g)
}

/// `H(x, y) = Jᵀ ∇²_f ℓ J`
pub fn per_point_gn_hessian(
    spec: &ModelSpec,
    anchor: &[f64],
    loss: LossKind,
    x: &[f64],
    y: &[f64],
) -> Result<SymMatrix> {
    let p = spec.param_count();
    if p > DENSE_HESSIAN_CAP {
        return Err(Error::DimensionCap {
            dim: p,
            cap: DENSE_HESSIAN_CAP,
        });
    }
    let mut tape = Tape::default();
    spec.forward_tape(anchor, x, &mut tape)?;
    let jac = spec.jacobian_tape(anchor, &tape)?;
    let hf = loss.hess_f(y, tape.output())?;
    let mut acc = Matrix::zeros(p, p);
    accumulate_gn(&jac, &hf, 1.0, &mut acc);
    SymMatrix::new(acc)
}

/// `acc += scale · Jᵀ Hf J` for an `m × k` block `J`.
fn accumulate_gn(jac: &Matrix, hf: &SymMatrix, scale: f64, acc: &mut Matrix) {
    let hj = hf.matrix().matmul(jac).expect("m x m times m x k");
    for r in 0..jac.rows() {
        let jr = jac.row(r);
        let hr = hj.row(r);
        for (i, &ji) in jr.iter().enumerate() {
            if ji != 0.0 {
                axpy(scale * ji, hr, acc.row_mut(i));
            }
        }
    }
}

/// Dataset gradient, regularized Gauss-Newton matrix and everything needed
/// to evaluate the quadratic utility, either in full parameter space or in
/// the subspace `θ = θ* + Aξ`.
#[derive(Clone, Debug)]
pub struct CurvatureBundle {
    pub anchor: ParamVector,
    /// `g(D)` (length `p`) or `Aᵀ g(D)` (length `p̃`).
    pub grad: Vec<f64>,
    /// `H(D) + λI`, or `Aᵀ H(D) A + λI`.
    pub hess: SymMatrix,
    pub lambda: f64,
    /// Column-orthonormal `p × p̃` matrix when projected.
    pub projection: Option<Arc<Matrix>>,
    pub n: usize,
}

impl CurvatureBundle {
    /// Dimension the mechanism samples in (`p` or `p̃`).
    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn is_projected(&self) -> bool {
        self.projection.is_some()
    }

    /// `H(D)` without the ridge term.
    pub fn unregularized_hess(&self) -> SymMatrix {
        self.hess.add_identity(-self.lambda)
    }

    /// Maps a point of the sampling space to parameter space: identity on the
    /// full path, `θ* + Aξ` on the projected path.
    pub fn lift(&self, point: &[f64]) -> Result<ParamVector> {
        check_len(self.dim(), point.len())?;
        match &self.projection {
            None => self.anchor.with_values(point.to_vec()),
            Some(a) => {
                let mut theta = self.anchor.values().to_vec();
                let step = a.mul_vec(point)?;
                axpy(1.0, &step, &mut theta);
                self.anchor.with_values(theta)
            }
        }
    }

    /// Offset from the sampling-space center: `θ − θ*` (full) or `ξ` (projected).
    pub fn offset(&self, point: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), point.len())?;
        Ok(match self.projection {
            None => point.iter().zip(self.anchor.values()).map(|(t, a)| t - a).collect(),
            Some(_) => point.to_vec(),
        })
    }

    /// Sampling-space center: `θ*` (full) or `0` (projected).
    pub fn center(&self) -> Vec<f64> {
        match self.projection {
            None => self.anchor.values().to_vec(),
            Some(_) => vec![0.0; self.dim()],
        }
    }

    /// `−(δᵀg + ½ δᵀH_λδ)`
    pub fn utility_of_offset(&self, delta: &[f64]) -> Result<f64> {
        check_len(self.dim(), delta.len())?;
        Ok(-(dot(delta, &self.grad) + 0.5 * self.hess.quad_form(delta)?))
    }

    /// Restricts a full bundle to the column span of `a`: `Aᵀg`, `AᵀHA + λI`.
    pub fn project(&self, a: Arc<Matrix>) -> Result<CurvatureBundle> {
        if self.is_projected() {
            return Err(Error::InvalidInputs("bundle is already projected".into()));
        }
        check_len(self.dim(), a.rows())?;
        Ok(CurvatureBundle {
            anchor: self.anchor.clone(),
            grad: a.tr_mul_vec(&self.grad)?,
            hess: self.unregularized_hess().congruence(&a)?.add_identity(self.lambda),
            lambda: self.lambda,
            projection: Some(a),
            n: self.n,
        })
    }

    /// Utility at `θ` (full path) or `ξ` (projected path).
    pub fn utility(&self, point: &[f64]) -> Result<f64> {
        self.utility_of_offset(&self.offset(point)?)
    }
}

struct Partial {
    grad: Vec<f64>,
    hess: Matrix,
}

/// Builds `g(D)` and `H_λ(D)`. With a projection `A` the per-point products
/// `J·A` come from `p̃` forward-mode sweeps, so the `p × p` matrix is never
/// formed; the gradient is `Aᵀ` times the average per-point VJP.
pub fn dataset_curvature(
    spec: &ModelSpec,
    anchor: &ParamVector,
    loss: LossKind,
    data: &LabeledDataset,
    lambda: f64,
    projection: Option<Arc<Matrix>>,
    exec: Execution,
) -> Result<CurvatureBundle> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if lambda < 0.0 {
        return Err(Error::InvalidInputs(format!("lambda must be >= 0, got {lambda}")));
    }
    check_len(spec.param_count(), anchor.len())?;
    let p = spec.param_count();
    let theta = anchor.values();

    let (a_cols, k) = match &projection {
        Some(a) => {
            check_len(p, a.rows())?;
            (Some(a.transpose()), a.cols())
        }
        None => {
            if p > DENSE_HESSIAN_CAP {
                return Err(Error::DimensionCap {
                    dim: p,
                    cap: DENSE_HESSIAN_CAP,
                });
            }
            (None, p)
        }
    };

    let point = |acc: &mut Partial, _i: usize, s: &Sample| -> Result<()> {
        let mut tape = Tape::default();
        spec.forward_tape(theta, &s.x, &mut tape)?;
        let f = tape.output().to_vec();
        let w = loss.grad_f(&s.y, &f)?;
        spec.vjp_tape(theta, &tape, &w, 1.0, &mut acc.grad)?;
        let hf = loss.hess_f(&s.y, &f)?;
        let block = match &a_cols {
            None => spec.jacobian_tape(theta, &tape)?,
            Some(at) => {
                let m = spec.output_dim;
                let mut ja = Matrix::zeros(m, k);
                for c in 0..k {
                    let col = spec.jvp_tape(theta, &tape, at.row(c))?;
                    for (r, v) in col.into_iter().enumerate() {
                        ja[(r, c)] = v;
                    }
                }
                ja
            }
        };
        accumulate_gn(&block, &hf, 1.0, &mut acc.hess);
        Ok(())
    };

    let first_err = std::sync::Mutex::new(None::<Error>);
    let total = chunked_tree_reduce(
        exec,
        &data.samples,
        || Partial {
            grad: vec![0.0; p],
            hess: Matrix::zeros(k, k),
        },
        |acc, i, s| {
            if let Err(e) = point(acc, i, s) {
                first_err.lock().expect("poisoned").get_or_insert(e);
            }
        },
        |mut a, b| {
            axpy(1.0, &b.grad, &mut a.grad);
            axpy(1.0, b.hess.as_slice(), a.hess.as_mut_slice());
            a
        },
    )
    .expect("non-empty");
    if let Some(e) = first_err.into_inner().expect("poisoned") {
        return Err(e);
    }

    let inv_n = 1.0 / data.len() as f64;
    let mut grad: Vec<f64> = total.grad.iter().map(|v| v * inv_n).collect();
    if let Some(a) = &projection {
        grad = a.tr_mul_vec(&grad)?;
    }
    let mut h = total.hess;
    h.as_mut_slice().iter_mut().for_each(|v| *v *= inv_n);
    let hess = SymMatrix::new(h)?.add_identity(lambda);

    Ok(CurvatureBundle {
        anchor: anchor.clone(),
        grad,
        hess,
        lambda,
        projection,
        n: data.len(),
    })
}

/// Mean loss of `θ` on `data`.
pub fn mean_loss(spec: &ModelSpec, theta: &[f64], loss: LossKind, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut tape = Tape::default();
    let mut total = 0.0;
    for s in &data.samples {
        spec.forward_tape(theta, &s.x, &mut tape)?;
        total += loss.value(&s.y, tape.output())?;
    }
    Ok(total / data.len() as f64)
}

/// Mean loss of each candidate, in input order.
pub fn evaluate_candidates(
    spec: &ModelSpec,
    candidates: &[ParamVector],
    loss: LossKind,
    data: &LabeledDataset,
    exec: Execution,
) -> Result<Vec<f64>> {
    map_indexed(exec, candidates.len(), |i| {
        mean_loss(spec, candidates[i].values(), loss, data)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::TaskKind;
    use crate::linalg::{solve_spd, spd_factor, sym_eigen};
    use crate::model::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn random_data(spec: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> LabeledDataset {
        let samples = (0..n)
            .map(|_| Sample {
                x: randn(spec.input_dim, rng),
                y: randn(spec.output_dim, rng),
            })
            .collect();
        LabeledDataset::new(TaskKind::Regression, spec.input_dim, spec.output_dim, samples).unwrap()
    }

    fn anchor(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> ParamVector {
        ParamVector::init_uniform(Arc::new(spec.clone()), rng)
    }

    #[test]
    fn gradient_is_zero_at_exact_fit() {
        let spec = ModelSpec::mlp(3, &[4], 2, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let th = anchor(&spec, &mut rng);
        let x = randn(3, &mut rng);
        let y = spec.forward(th.values(), &x).unwrap();
        let g = per_point_gradient(&spec, th.values(), LossKind::MeanSquared, &x, &y).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_ms_gradient_pattern() {
        let spec = ModelSpec::linear(2, 1);
        let theta = [0.5, -1.0, 0.25];
        let x = [2.0, 3.0];
        let f = 0.5 * 2.0 - 3.0 + 0.25;
        let y = [1.0];
        let g = per_point_gradient(&spec, &theta, LossKind::MeanSquared, &x, &y).unwrap();
        let r = 2.0 * (f - 1.0);
        assert_eq!(g, vec![r * 2.0, r * 3.0, r]);
    }

    #[test]
    fn gn_hessian_is_psd_and_rank_one_for_scalar_ms() {
        let spec = ModelSpec::mlp(3, &[5], 1, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let th = anchor(&spec, &mut rng);
        let x = randn(3, &mut rng);
        let h = per_point_gn_hessian(&spec, th.values(), LossKind::MeanSquared, &x, &[0.3]).unwrap();
        let e = sym_eigen(&h).unwrap();
        assert!(e.min() >= -1e-9);
        let big = e.values.iter().filter(|v| v.abs() > 1e-9 * e.max()).count();
        assert_eq!(big, 1);
        let j = spec.jacobian(th.values(), &x).unwrap();
        assert!((e.max() - 2.0 * dot(j.row(0), j.row(0))).abs() < 1e-10);
    }

    #[test]
    fn dense_hessian_cap() {
        let spec = ModelSpec::linear(2000, 1);
        let theta = vec![0.0; spec.param_count()];
        let x = vec![0.0; 2000];
        assert!(matches!(
            per_point_gn_hessian(&spec, &theta, LossKind::MeanSquared, &x, &[0.0]),
            Err(Error::DimensionCap { .. })
        ));
    }

    #[test]
    fn single_point_bundle_equals_per_point_quantities() {
        let spec = ModelSpec::mlp(2, &[3], 2, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let th = anchor(&spec, &mut rng);
        let ds = random_data(&spec, 1, &mut rng);
        let s = &ds.samples[0];
        let b = dataset_curvature(&spec, &th, LossKind::MeanSquared, &ds, 0.0, None, Execution::Sequential).unwrap();
        assert_eq!(
            b.grad,
            per_point_gradient(&spec, th.values(), LossKind::MeanSquared, &s.x, &s.y).unwrap()
        );
        let h = per_point_gn_hessian(&spec, th.values(), LossKind::MeanSquared, &s.x, &s.y).unwrap();
        assert!(b.hess.matrix().max_abs_diff(h.matrix()) < 1e-14);
    }

    #[test]
    fn projection_onto_coordinate_axes_is_a_sub_block() {
        let spec = ModelSpec::mlp(3, &[4], 2, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let th = anchor(&spec, &mut rng);
        let ds = random_data(&spec, 17, &mut rng);
        let p = spec.param_count();
        let k = 5;
        let a = Matrix::from_fn(p, k, |i, j| if i == j { 1.0 } else { 0.0 });
        let full = dataset_curvature(&spec, &th, LossKind::MeanSquared, &ds, 0.3, None, Execution::Sequential).unwrap();
        let proj = dataset_curvature(
            &spec,
            &th,
            LossKind::MeanSquared,
            &ds,
            0.3,
            Some(Arc::new(a)),
            Execution::Sequential,
        )
        .unwrap();
        for i in 0..k {
            assert!((proj.grad[i] - full.grad[i]).abs() <= 1e-10);
            for j in 0..k {
                assert!((proj.hess.get(i, j) - full.hess.get(i, j)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_residual_linear_ridge_bundle() {
        let spec = ModelSpec::linear(2, 1);
        let theta = vec![0.4, -0.2, 0.1];
        let th = ParamVector::new(Arc::new(spec.clone()), theta.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let samples: Vec<Sample> = (0..10)
            .map(|_| {
                let x = randn(2, &mut rng);
                let y = spec.forward(&theta, &x).unwrap();
                Sample { x, y }
            })
            .collect();
        let ds = LabeledDataset::new(TaskKind::Regression, 2, 1, samples.clone()).unwrap();
        let b = dataset_curvature(&spec, &th, LossKind::MeanSquared, &ds, 1.0, None, Execution::Sequential).unwrap();
        assert!(b.grad.iter().all(|v| v.abs() < 1e-15));
        let mut expect = Matrix::zeros(3, 3);
        for s in &samples {
            let z = [s.x[0], s.x[1], 1.0];
            for i in 0..3 {
                for j in 0..3 {
                    expect[(i, j)] += 2.0 * z[i] * z[j] / 10.0;
                }
            }
        }
        let expect = SymMatrix::new(expect).unwrap().add_identity(1.0);
        assert!(b.hess.matrix().max_abs_diff(expect.matrix()) < 1e-13);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let spec = ModelSpec::linear(2, 1);
        let th = ParamVector::zeros(Arc::new(spec.clone()));
        let ds = LabeledDataset::new(TaskKind::Regression, 2, 1, vec![]).unwrap();
        assert!(matches!(
            dataset_curvature(&spec, &th, LossKind::MeanSquared, &ds, 0.0, None, Execution::Sequential),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn utility_identities() {
        let spec = ModelSpec::mlp(2, &[3], 1, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let th = anchor(&spec, &mut rng);
        let ds = random_data(&spec, 20, &mut rng);
        let b = dataset_curvature(&spec, &th, LossKind::MeanSquared, &ds, 0.5, None, Execution::Sequential).unwrap();
        assert_eq!(b.utility(th.values()).unwrap(), 0.0);

        let d = randn(b.dim(), &mut rng);
        let d2: Vec<f64> = d.iter().map(|v| 2.0 * v).collect();
        let lhs = b.utility_of_offset(&d2).unwrap() - 2.0 * b.utility_of_offset(&d).unwrap();
        assert!((lhs + b.hess.quad_form(&d).unwrap()).abs() < 1e-12);

        let step = solve_spd(&spd_factor(&b.hess).unwrap(), &b.grad).unwrap();
        let opt: Vec<f64> = step.iter().map(|v| -v).collect();
        let u_opt = b.utility_of_offset(&opt).unwrap();
        assert!((u_opt - 0.5 * dot(&b.grad, &step)).abs() < 1e-12);
        for _ in 0..50 {
            let pert: Vec<f64> = opt
                .iter()
                .map(|v| v + 1e-2 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            assert!(b.utility_of_offset(&pert).unwrap() <= u_opt);
        }
    }

    #[test]
    fn parallel_and_sequential_bundles_are_bit_identical() {
        let spec = ModelSpec::mlp(3, &[6], 2, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let th = anchor(&spec, &mut rng);
        let ds = random_data(&spec, 300, &mut rng);
        let a = dataset_curvature(&spec, &th, LossKind::MeanSquared, &ds, 0.0, None, Execution::Sequential).unwrap();
        let b = dataset_curvature(&spec, &th, LossKind::MeanSquared, &ds, 0.0, None, Execution::Parallel).unwrap();
        assert_eq!(a.grad, b.grad);
        assert_eq!(a.hess, b.hess);
    }
}
