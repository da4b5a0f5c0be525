use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regional_nmpc::model::{builtin_example_model, SystemModel};
use regional_nmpc::ocp::OcpInstance;
use regional_nmpc::sqp::{
    check_region_regularity, classify_active_sets, NlpSolution, SolverConfig, SqpSolver,
    StartStrategy,
};

fn solve(model: &SystemModel, x0: [f64; 2]) -> (OcpInstance<'_>, NlpSolution) {
    let inst = OcpInstance::new(model, DVector::from_row_slice(&x0)).unwrap();
    let sol = SqpSolver::default().solve_ocp(&inst, None).unwrap();
    (inst, sol)
}

#[test]
fn three_four_saturates_low_with_regular_kkt() {
    let model = builtin_example_model();
    let (inst, sol) = solve(&model, [3.0, 4.0]);
    assert!(sol.is_converged());
    assert!((sol.first_input(1)[0] + 1.0).abs() <= 1e-12);
    let info = classify_active_sets(&inst, &sol, 1e-6, 1e-8).unwrap();
    assert!(info.active.contains(&0));
    assert!(check_region_regularity(&inst, &sol, &info).unwrap());
}

#[test]
fn origin_has_empty_active_set() {
    let model = builtin_example_model();
    let (inst, sol) = solve(&model, [0.0, 0.0]);
    let info = classify_active_sets(&inst, &sol, 1e-6, 1e-8).unwrap();
    assert!(info.active.is_empty());
    assert!(check_region_regularity(&inst, &sol, &info).unwrap());
}

/// Closed loop in episodes from random feasible states. At every step the
/// solve warm-started from the shifted previous solution is compared with a
/// cold solve from `U = 0`.
#[test]
fn shifted_warm_start_is_no_slower_than_cold() {
    let model = builtin_example_model();
    let single = SqpSolver::new(SolverConfig {
        strategy: StartStrategy::Single,
        ..SolverConfig::default()
    });
    let multi = SqpSolver::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut steps = 0;
    let mut no_slower = 0;
    while steps < 200 {
        let x0 = DVector::from_vec(vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
        let first = multi
            .solve_ocp(&OcpInstance::new(&model, x0.clone()).unwrap(), None)
            .unwrap();
        if !first.is_converged() {
            continue;
        }
        let mut x = model.eval_dynamics(&x0, &first.first_input(1)).unwrap();
        let mut prev = first.u.clone();
        for _ in 0..20 {
            let inst = OcpInstance::new(&model, x.clone()).unwrap();
            let shifted = DVector::from_vec(vec![prev[1], prev[2], 0.0]);
            let warm = single.solve_ocp(&inst, Some(&shifted)).unwrap();
            let cold = single.solve_ocp(&inst, None).unwrap();
            assert!(warm.is_converged(), "warm solve failed at {x:?}");
            if warm.iterations <= cold.iterations || !cold.is_converged() {
                no_slower += 1;
            }
            steps += 1;
            x = model.eval_dynamics(&x, &warm.first_input(1)).unwrap();
            prev = warm.u;
        }
    }
    assert!(no_slower as f64 >= 0.95 * steps as f64, "{no_slower}/{steps}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn converged_solutions_satisfy_kkt_bounds(x1 in -4.0..4.0f64, x2 in -4.0..4.0f64) {
        let model = builtin_example_model();
        let (inst, sol) = solve(&model, [x1, x2]);
        if sol.is_converged() {
            prop_assert!(sol.kkt_residual <= 1e-8);
            let (g, _) = inst.eval_constraints(&sol.u).unwrap();
            for i in 0..g.len() {
                prop_assert!(sol.lambda[i] >= -1e-10);
                prop_assert!((sol.lambda[i] * g[i]).abs() <= 1e-8);
                prop_assert!(g[i] <= 1e-8);
            }
            prop_assert!((inst.eval_cost(&sol.u).unwrap().0 - sol.cost).abs() <= 1e-12 * (1.0 + sol.cost));

            let info = classify_active_sets(&inst, &sol, 1e-6, 1e-8).unwrap();
            let mut all: Vec<usize> = info.active.iter().chain(&info.inactive).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..inst.constraint_count()).collect::<Vec<_>>());
            let mut split: Vec<usize> =
                info.weakly_active.iter().chain(&info.strongly_active).copied().collect();
            split.sort_unstable();
            prop_assert_eq!(split, info.active.clone());
        }
    }
}
