use std::sync::Arc;

use proptest::prelude::*;
use quadmech::audit::{scalar_bundle, set_length, ScalarPoint};
use quadmech::curvature::CurvatureBundle;
use quadmech::linalg::{Matrix, SymMatrix};
use quadmech::loss::LossKind;
use quadmech::mechanism::{run_mechanism, stiefel_sample, utility_gap, MechanismConfig, Sampler};
use quadmech::model::{ModelSpec, ParamVector};
use quadmech::par::{chunked_tree_reduce, Execution};
use quadmech::privacy::{sensitivity, SensitivityInputs};
use quadmech::truncnorm::sample_truncnorm_1d;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spd_from(entries: &[f64], p: usize, shift: f64) -> SymMatrix {
    let g = Matrix::from_fn(p, p, |i, j| entries[i * p + j]);
    let m = g.tr_matmul(&g).unwrap();
    SymMatrix::new(m).unwrap().add_identity(shift)
}

fn bundle(h: SymMatrix, g: Vec<f64>, anchor: Vec<f64>) -> CurvatureBundle {
    let spec = Arc::new(ModelSpec::linear(g.len() - 1, 1));
    CurvatureBundle {
        anchor: ParamVector::new(spec, anchor).unwrap(),
        grad: g,
        hess: h,
        lambda: 0.0,
        projection: None,
        n: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncnorm_stays_in_its_interval(mu in -50.0..50.0f64, sigma in 1e-3..20.0f64, a in -60.0..60.0f64, w in 1e-9..30.0f64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let x = sample_truncnorm_1d(mu, sigma, a, a + w, &mut rng).unwrap();
            prop_assert!(x >= a && x <= a + w && x.is_finite());
        }
    }

    #[test]
    fn sensitivity_is_monotone(r in 0.0..3.0f64, dr in 0.0..1.0f64, n in 1usize..1000, jac in 0.01..10.0f64, err in 0.0..5.0f64, ce in any::<bool>()) {
        let loss = if ce { LossKind::CrossEntropy } else { LossKind::MeanSquared };
        let m = if ce { 3 } else { 1 };
        let si = |radius: f64, n_min: usize, jac_bound: f64| SensitivityInputs { loss, m, n_min, radius, jac_bound, err_bound: err, inflation: 1.0 };
        let base = sensitivity(&si(r, n, jac)).unwrap();
        prop_assert!(base.delta_u >= 0.0);
        prop_assert!(sensitivity(&si(r + dr, n, jac)).unwrap().delta_u >= base.delta_u);
        prop_assert!(sensitivity(&si(r, n + 1, jac)).unwrap().delta_u <= base.delta_u);
        prop_assert!(sensitivity(&si(r, n, jac * 1.5)).unwrap().delta_u >= base.delta_u);
        // ΔŪ·N does not depend on N.
        let scaled = sensitivity(&si(r, 2 * n, jac)).unwrap().delta_u * 2.0;
        prop_assert!((scaled - base.delta_u).abs() <= 1e-12 * base.delta_u.max(1.0));
    }

    #[test]
    fn mechanism_draws_stay_in_the_ball(
        p in 1usize..5,
        entries in prop::collection::vec(-1.0..1.0f64, 16),
        g in prop::collection::vec(-3.0..3.0f64, 4),
        anchor in prop::collection::vec(-1.0..1.0f64, 4),
        radius in 0.05..2.0f64,
        gibbs in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let b = bundle(spd_from(&entries[..p * p], p, 0.2), g[..p].to_vec(), anchor[..p].to_vec());
        let sampler = if gibbs { Sampler::Gibbs } else { Sampler::Rejection };
        let mut cfg = MechanismConfig::new(2.0, 0.3, radius, sampler, seed);
        cfg.max_rejection_proposals = 200_000;
        let (thetas, diag) = match run_mechanism(&b, &cfg, 20, None) {
            Ok(out) => out,
            // A mean far outside a small ball may exhaust the proposal budget.
            Err(quadmech::Error::ProposalBudgetExceeded { .. }) if !gibbs => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert_eq!(diag.dim, p);
        for t in thetas {
            let d2: f64 = t.values().iter().zip(&anchor[..p]).map(|(x, c)| (x - c) * (x - c)).sum();
            prop_assert!(d2.sqrt() <= radius * (1.0 + 1e-9));
        }
    }

    #[test]
    fn subspace_optimum_never_beats_the_full_one(
        p in 2usize..7,
        k in 1usize..7,
        entries in prop::collection::vec(-1.0..1.0f64, 36),
        g in prop::collection::vec(-2.0..2.0f64, 6),
        seed in any::<u64>(),
    ) {
        let k = k.min(p);
        let b = bundle(spd_from(&entries[..p * p], p, 0.1), g[..p].to_vec(), vec![0.0; p]);
        let a = stiefel_sample(p, k, seed).unwrap();
        let ata = a.a.tr_matmul(&a.a).unwrap();
        prop_assert!(ata.max_abs_diff(&Matrix::identity(k)) < 1e-10);
        let gap = utility_gap(&b, &b.project(a.a).unwrap()).unwrap();
        prop_assert!(gap >= -1e-10);
        if k == p {
            prop_assert!(gap.abs() < 1e-8);
        }
    }

    #[test]
    fn tree_reduction_is_order_fixed(xs in prop::collection::vec(-1e6..1e6f64, 1..700)) {
        let sum = |exec| chunked_tree_reduce(exec, &xs, || 0.0, |a: &mut f64, _, x| *a += x, |a, b| a + b).unwrap();
        prop_assert_eq!(sum(Execution::Sequential).to_bits(), sum(Execution::Parallel).to_bits());
    }

    #[test]
    fn set_lengths_of_complementary_sets_add_up(g in -2.0..2.0f64, h in 0.0..3.0f64, level in -3.0..1.0f64) {
        let b = scalar_bundle(&[ScalarPoint { g, h }], 0.0).unwrap();
        let u = |x: f64| b.utility_of_offset(&[x]).unwrap();
        let vertex = if h > 0.0 { (-g / h).clamp(-1.0, 1.0) } else { 0.0 };
        let inside = set_length(|x| u(x) > level, -1.0, 1.0, &[vertex], 1e-7);
        let outside = set_length(|x| u(x) <= level, -1.0, 1.0, &[vertex], 1e-7);
        prop_assert!((inside + outside - 2.0).abs() < 1e-6);
    }
}
