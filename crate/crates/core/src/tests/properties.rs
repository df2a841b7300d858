use super::common::*;
use invgame_core::equivalence::{adjust_game, AdjustmentRequest, OffDiagonalWeight};
use invgame_core::game::{
    are_residual, feedback_from_value, solve_lyapunov, solve_lyapunov_kronecker, GameSpec,
    ValueSet,
};
use invgame_core::model_based::{
    feedback_gap, gradient_step, run_algorithm1_with_target, Algorithm1Config,
};
use invgame_core::model_free::{
    model_free_gradient_step, smat_pack, smat_unpack, solve_initial_model_free, state_quad_pack,
    Anchor, CostSet,
};
use invgame_core::trajectory::{probing_signal, uniform_boundaries, NoiseSpec};
use invgame_core::FeedbackSet;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn lyapunov_solvers_agree(seed in any::<u64>(), n in 1usize..=5) {
        let mut rng = rng(seed);
        let m = random_stable(&mut rng, n);
        let w = random_symmetric(&mut rng, n, 2.0);
        let p = solve_lyapunov(&m, &w).unwrap();
        let pk = solve_lyapunov_kronecker(&m, &w).unwrap();
        prop_assert!(rel_err(&p, &pk) < 1e-8);
        let lhs = m.transpose() * &p + &p * &m;
        prop_assert!((lhs + &w).norm() < 1e-8 * w.norm().max(1.0));
    }

    #[test]
    fn converged_iterates_solve_the_riccati_equations(seed in any::<u64>(), n in 2usize..=4, players in 1usize..=3) {
        let mut rng = rng(seed);
        let (spec, sol) = random_solved_game(&mut rng, n, players);
        let res = are_residual(&spec, &sol.values, &sol.feedback).unwrap();
        let scale = sol.values.values().iter().map(|k| k.norm()).fold(1.0, f64::max);
        prop_assert!(res.max_norm() < 1e-8 * scale);
    }

    #[test]
    fn single_player_matches_sign_function(seed in any::<u64>(), n in 1usize..=4) {
        let mut rng = rng(seed);
        let (spec, sol) = random_solved_game(&mut rng, n, 1);
        let k = care_sign_function(spec.dynamics().a(), &spec.dynamics().b()[0], &spec.q()[0], &spec.r()[0][0]);
        prop_assert!(rel_err(&sol.values[0], &k) < 1e-8, "{} vs {}", sol.values[0], k);
    }

    #[test]
    fn feedback_is_invariant_to_joint_scaling(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut rng = rng(seed);
        let spec = random_game(&mut rng, 3, 2);
        let vals = ValueSet::new(vec![random_spd(&mut rng, 3, 0.1), random_spd(&mut rng, 3, 0.1)]);
        let f = feedback_from_value(&spec, &vals).unwrap();
        let mut r = spec.r().to_vec();
        r[0][0] *= c;
        let scaled = GameSpec::new(spec.dynamics().clone(), spec.q().to_vec(), r).unwrap();
        let vals_c = ValueSet::new(vec![&vals[0] * c, vals[1].clone()]);
        let f_c = feedback_from_value(&scaled, &vals_c).unwrap();
        prop_assert!(f.max_abs_diff(&f_c) < 1e-10 * f[0].norm().max(1.0));
    }

    #[test]
    fn packing_identities(seed in any::<u64>(), n in 1usize..=5) {
        let mut rng = rng(seed);
        let k = random_symmetric(&mut rng, n, 3.0);
        let x = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let packed = smat_pack(&k).unwrap();
        prop_assert_eq!(smat_unpack(packed.as_slice(), n).unwrap(), k.clone());
        let quad = (x.transpose() * &k * &x)[(0, 0)];
        prop_assert!((state_quad_pack(&x).dot(&packed) - quad).abs() < 1e-10 * quad.abs().max(1.0));
        // x⊗x laid out as a·n+b against column-major vec
        let kron = DVector::from_fn(n * n, |idx, _| x[idx / n] * x[idx % n]);
        let vec_k = DVector::from_column_slice(k.as_slice());
        prop_assert!((kron.dot(&vec_k) - quad).abs() < 1e-10 * quad.abs().max(1.0));
    }

    #[test]
    fn kronecker_vectorization_identity(seed in any::<u64>(), n in 1usize..=4, m in 1usize..=3) {
        let mut rng = rng(seed);
        let a = random_matrix(&mut rng, n, n, 1.0);
        let b = random_matrix(&mut rng, n, m, 1.0);
        let c = random_matrix(&mut rng, m, m, 1.0);
        let lhs = DVector::from_column_slice((&a * &b * &c).as_slice());
        let rhs = c.transpose().kronecker(&a) * DVector::from_column_slice(b.as_slice());
        prop_assert!((lhs - rhs).norm() < 1e-10);
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn anchored_maps_reproduce_model_based_steps(seed in any::<u64>(), alpha in 0.01f64..2.0) {
        let mut rng = rng(seed);
        let (spec, sol) = random_solved_game(&mut rng, 3, 2);
        let anchor = Anchor { feedback: sol.feedback.clone(), values: sol.values.clone() };
        let maps = anchor.gain_maps().unwrap();
        for (i, map) in maps.iter().enumerate() {
            let expected = spec.r()[i][i].clone().try_inverse().unwrap() * spec.dynamics().b()[i].transpose();
            prop_assert!((map - expected).norm() < 1e-8);
        }
        let target = FeedbackSet::new(sol.feedback.gains().iter().map(|f| f + random_matrix(&mut rng, 1, 3, 0.2)).collect());
        let cfg = Algorithm1Config { learning_rates: vec![alpha], ..Algorithm1Config::default() };
        let (mb, mb_fb, _) = gradient_step(&spec, &sol.values, &target, &cfg).unwrap();
        let (mf, mf_fb) = model_free_gradient_step(&sol.values, &anchor, &target, &[alpha]).unwrap();
        for i in 0..2 {
            prop_assert!(rel_err(&mf[i], &mb[i]) < 1e-8);
        }
        prop_assert!(mf_fb.max_abs_diff(&mb_fb) < 1e-7);
    }

    #[test]
    fn input_matrices_recovered_from_exact_data(seed in any::<u64>(), n in 2usize..=3) {
        let mut rng = rng(seed);
        let (spec, sol) = random_solved_game(&mut rng, n, 2);
        let dims = spec.dynamics().input_dims();
        let excitation = Excitation::random(&mut rng, &dims, 3, 1.0);
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let data = exact_dataset(spec.dynamics(), &sol.feedback, &excitation, &x0, &uniform_boundaries(0.0, 0.1, 40));
        let costs = CostSet::new(spec.q().to_vec(), spec.r().to_vec()).unwrap();
        let mf = solve_initial_model_free(&data, &costs, &sol.feedback, &[1e-10], 2000).unwrap();
        for (b_est, b) in mf.b_est.iter().zip(spec.dynamics().b()) {
            prop_assert!(rel_err(b_est, b) < 1e-6, "{} vs {}", b_est, b);
        }
    }

    #[test]
    fn noise_respects_its_envelope(
        seed in any::<u64>(),
        amplitude in 0.0f64..50.0,
        count in 1usize..20,
        decay in 0.0f64..5.0,
        t in 0.0f64..5.0,
    ) {
        let noise = NoiseSpec { amplitude, component_count: count, frequency_range: [-50.0, 50.0], seed, decay_rate: decay };
        let bound = amplitude * count as f64 * (-decay * t).exp();
        for w in probing_signal(&noise, &[1, 2], t).unwrap() {
            prop_assert!(w.amax() <= bound * (1.0 + 1e-12) + 1e-300);
        }
    }

    #[test]
    fn line_search_never_increases_the_gap(seed in any::<u64>(), alpha in 0.1f64..100.0) {
        let mut rng = rng(seed);
        let (spec, sol) = random_solved_game(&mut rng, 3, 2);
        let target = FeedbackSet::new(sol.feedback.gains().iter().map(|f| f + random_matrix(&mut rng, 1, 3, 0.5)).collect());
        let before = feedback_gap(&feedback_from_value(&spec, &sol.values).unwrap(), &target).unwrap();
        let cfg = Algorithm1Config { learning_rates: vec![alpha], line_search: true, ..Algorithm1Config::default() };
        let (_, _, after) = gradient_step(&spec, &sol.values, &target, &cfg).unwrap();
        for (a, b) in after.objective.iter().zip(&before.objective) {
            prop_assert!(a < b);
        }
    }

    #[test]
    fn adjustments_preserve_feedback_and_residuals(seed in any::<u64>(), r01 in -3.0f64..3.0, r10 in -3.0f64..3.0) {
        let mut rng = rng(seed);
        let (truth, sol) = random_solved_game(&mut rng, 3, 2);
        let initial = truth.with_q(vec![DMatrix::identity(3, 3); 2]).unwrap();
        let base = run_algorithm1_with_target(&initial, &sol.feedback, &Algorithm1Config {
            learning_rates: vec![0.5],
            line_search: true,
            max_outer: 50,
            ..Algorithm1Config::default()
        }).unwrap();
        let base_game = base.game(truth.dynamics()).unwrap();
        let req = AdjustmentRequest { new_r_offdiag: vec![
            OffDiagonalWeight { i: 0, j: 1, r: DMatrix::from_element(1, 1, r01) },
            OffDiagonalWeight { i: 1, j: 0, r: DMatrix::from_element(1, 1, r10) },
        ]};
        let adjusted = adjust_game(&base, &req, truth.dynamics()).unwrap();
        let f_adj = feedback_from_value(&adjusted, &base.k_star).unwrap();
        prop_assert!(f_adj.max_abs_diff(&base.f_star) < 1e-12);
        let r_base = are_residual(&base_game, &base.k_star, &base.f_star).unwrap();
        let r_adj = are_residual(&adjusted, &base.k_star, &base.f_star).unwrap();
        for (a, b) in r_adj.residuals.iter().zip(&r_base.residuals) {
            prop_assert!((a - b).norm() < 1e-9 * base.k_star[0].norm().max(1.0));
        }
    }
}
