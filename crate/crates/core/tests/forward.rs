mod common;

use common::central_jacobian;
use ioc_core::forward::{solve_forward, SolverOptions};
use ioc_core::kkt::{kkt_residual, TOL_ACTIVE};
use ioc_core::model::ControlProblem;
use ioc_core::systems::{standard_problem, true_theta, unconstrained_problem, System};
use nalgebra::DVector;
use proptest::prelude::*;

/// Box multipliers recovered from the cost gradient at a solution.
fn box_multipliers(
    p: &ControlProblem,
    theta: &DVector<f64>,
    v: &DVector<f64>,
    z0: &DVector<f64>,
) -> DVector<f64> {
    let grad = p.cost_gradient(theta, v, z0).unwrap();
    let mut lambda = DVector::zeros(2 * v.len());
    for c in 0..v.len() {
        if v[c] >= 1.0 - TOL_ACTIVE {
            lambda[2 * c] = (-grad[c]).max(0.0);
        } else if v[c] <= -1.0 + TOL_ACTIVE {
            lambda[2 * c + 1] = grad[c].max(0.0);
        }
    }
    lambda
}

#[test]
fn unconstrained_linear_solution_matches_the_normal_equations() {
    // The cost is quadratic in V: V* = −H⁻¹ ∇J(0), with H from differencing
    // the analytic gradient.
    let p = unconstrained_problem(System::Linear, 10);
    let theta = true_theta();
    let z0 = DVector::from_vec(vec![0.8, -0.3]);
    let grad = |v: &DVector<f64>| p.cost_gradient(&theta, v, &z0).unwrap();
    let zero = DVector::zeros(11);
    let h = central_jacobian(grad, &zero, 1e-3);
    let expected = h.lu().solve(&(-grad(&zero))).unwrap();
    let sol = solve_forward(&p, &theta, &z0, &SolverOptions::default()).unwrap();
    assert!(sol.report.converged);
    assert!(
        (&sol.inputs - &expected).amax() <= 1e-6,
        "{} vs {}",
        sol.inputs,
        expected
    );
}

#[test]
fn large_initial_offset_saturates_the_inputs() {
    let p = standard_problem(System::Linear, 10);
    let theta = true_theta();
    let z0 = DVector::from_vec(vec![10.0, 0.0]);
    let sol = solve_forward(&p, &theta, &z0, &SolverOptions::default()).unwrap();
    assert!(sol.report.converged);
    assert!(sol.inputs.iter().any(|v| v.abs() >= 1.0 - 1e-9));
    let lambda = box_multipliers(&p, &theta, &sol.inputs, &z0);
    let r = kkt_residual(&p, &theta, &lambda, &sol.inputs, &z0).unwrap();
    assert!(r.max_norm() <= 1e-6, "{r:?}");
}

#[test]
fn negative_weights_are_rejected() {
    let p = standard_problem(System::Linear, 10);
    let theta = DVector::from_vec(vec![1.0, -1.0, 1.0, 1.0]);
    assert!(solve_forward(&p, &theta, &DVector::zeros(2), &SolverOptions::default()).is_err());
}

#[test]
fn positive_scaling_leaves_the_solution_unchanged() {
    for system in System::ALL {
        let p = standard_problem(system, 10);
        let z0 = DVector::from_vec(vec![1.3, -0.4]);
        let opts = SolverOptions::default();
        let a = solve_forward(&p, &true_theta(), &z0, &opts).unwrap().inputs;
        let b = solve_forward(&p, &(true_theta() * 7.5), &z0, &opts)
            .unwrap()
            .inputs;
        assert!((a - b).amax() <= 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solutions_satisfy_the_kkt_conditions(
        system in prop_oneof![Just(System::Linear), Just(System::Nonlinear)],
        z0 in proptest::collection::vec(-4.0..4.0f64, 2),
        theta in proptest::collection::vec(0.2..3.0f64, 4),
    ) {
        let p = standard_problem(system, 10);
        let z0 = DVector::from_vec(z0);
        let theta = DVector::from_vec(theta);
        let sol = solve_forward(&p, &theta, &z0, &SolverOptions::default()).unwrap();
        prop_assert!(sol.report.converged);
        let lambda = box_multipliers(&p, &theta, &sol.inputs, &z0);
        let r = kkt_residual(&p, &theta, &lambda, &sol.inputs, &z0).unwrap();
        let scale = 1.0 + theta.amax() * (1.0 + p.cost(&theta, &sol.inputs, &z0).unwrap());
        prop_assert!(r.primal_violation.amax() == 0.0);
        prop_assert!(r.max_norm() <= 1e-6 * scale, "{:?}", r);
    }
}
