use ioc_core::likelihood::{
    constrained_projection, constrained_projection_general, log_likelihood, NoiseModel,
};
use ioc_core::model::{ActiveSet, ControlProblem, LinearConstraints, RegulatorFeatures};
use ioc_core::systems::{standard_problem, System};
use ioc_core::trajectory::double_integrator;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const NV: usize = 11;

/// Input box `|v| ≤ 1` written as general polytope rows, plus `|x1_k| ≤ 2`
/// on every state.
fn polytope_problem() -> ControlProblem {
    let states = 2 * (NV + 1);
    let rows = 2 * NV + 2 * (NV + 1);
    let mut a_v = DMatrix::zeros(rows, NV);
    let mut a_z = DMatrix::zeros(rows, states);
    let mut b = DVector::zeros(rows);
    for c in 0..NV {
        a_v[(2 * c, c)] = 1.0;
        a_v[(2 * c + 1, c)] = -1.0;
        b[2 * c] = 1.0;
        b[2 * c + 1] = 1.0;
    }
    for k in 0..=NV {
        let r = 2 * NV + 2 * k;
        a_z[(r, 2 * k)] = 1.0;
        a_z[(r + 1, 2 * k)] = -1.0;
        b[r] = 2.0;
        b[r + 1] = 2.0;
    }
    ControlProblem::new(
        Box::new(double_integrator()),
        Box::new(RegulatorFeatures::new(2, 1)),
        Box::new(LinearConstraints::new(a_v, a_z, b).unwrap()),
        NV - 1,
    )
    .unwrap()
}

fn box_as_polytope() -> ControlProblem {
    let mut a_v = DMatrix::zeros(2 * NV, NV);
    for c in 0..NV {
        a_v[(2 * c, c)] = 1.0;
        a_v[(2 * c + 1, c)] = -1.0;
    }
    ControlProblem::new(
        Box::new(double_integrator()),
        Box::new(RegulatorFeatures::new(2, 1)),
        Box::new(
            LinearConstraints::on_inputs(a_v, DVector::from_element(2 * NV, 1.0), 2 * (NV + 1))
                .unwrap(),
        ),
        NV - 1,
    )
    .unwrap()
}

fn selection(flags: &[bool]) -> ActiveSet {
    ActiveSet::from_flags(flags.to_vec())
}

#[test]
fn likelihood_arithmetic() {
    let u = DVector::from_vec(vec![1.0, 1.0]);
    let v = DVector::zeros(2);
    assert_eq!(
        log_likelihood(&v, &u, &DMatrix::identity(2, 2)).unwrap(),
        -1.0
    );
    assert_eq!(
        log_likelihood(&v, &u, &(DMatrix::identity(2, 2) * 4.0)).unwrap(),
        -0.25
    );
    assert_eq!(
        log_likelihood(&u, &u, &DMatrix::identity(2, 2)).unwrap(),
        0.0
    );
}

#[test]
fn broad_initial_noise_barely_changes_the_joint_likelihood() {
    let sigma0 = 1e6;
    let noise = NoiseModel::isotropic(3, 2, 0.5, sigma0).unwrap();
    let u = DVector::from_vec(vec![0.1, 0.2, 0.3]);
    let v = DVector::from_vec(vec![0.0, 0.25, 0.3]);
    let x0 = DVector::from_vec(vec![1.0, -1.0]);
    let z0 = DVector::from_vec(vec![3.0, 2.0]);
    let gap = noise.log_likelihood(&v, &u) - noise.log_likelihood_joint(&v, &u, &z0, &x0);
    assert!(gap >= 0.0);
    assert!(gap <= (&x0 - &z0).norm_squared() / (2.0 * sigma0 * sigma0));
}

#[test]
fn selected_bound_clamps_the_rest() {
    let p = standard_problem(System::Linear, NV - 1);
    let noise = NoiseModel::isotropic(NV, 2, 1.0, 1.0).unwrap();
    let mut u = DVector::from_element(NV, 0.2);
    u[0] = 0.5;
    u[4] = 1.7;
    u[7] = -1.2;
    let sel = ActiveSet::from_indices(2 * NV, &[0]).unwrap();
    let proj = constrained_projection(&p, &u, &DVector::zeros(2), &noise, &sel, false).unwrap();
    let mut expected = u.clone();
    expected[0] = 1.0;
    expected[4] = 1.0;
    expected[7] = -1.0;
    assert_eq!(proj.inputs, expected);
    let penalty = 0.5 * (0.5f64.powi(2) + 0.7f64.powi(2) + 0.2f64.powi(2));
    assert!((proj.value + penalty).abs() <= 1e-15);
}

#[test]
fn contradictory_selection_is_infeasible() {
    let p = standard_problem(System::Linear, NV - 1);
    let noise = NoiseModel::isotropic(NV, 2, 1.0, 1.0).unwrap();
    let sel = ActiveSet::from_indices(2 * NV, &[0, 1]).unwrap();
    let u = DVector::zeros(NV);
    assert!(
        !constrained_projection(&p, &u, &DVector::zeros(2), &noise, &sel, false)
            .unwrap()
            .is_feasible()
    );
    let general = constrained_projection_general(
        &box_as_polytope(),
        &u,
        &DVector::zeros(2),
        &noise,
        &sel,
        false,
    );
    assert!(!general.unwrap().is_feasible());
}

fn no_increase(small: f64, large: f64, rel: f64) -> bool {
    if small == f64::NEG_INFINITY {
        return large == f64::NEG_INFINITY;
    }
    large <= small + rel * (1.0 + small.abs())
}

fn inputs() -> impl Strategy<Value = DVector<f64>> {
    proptest::collection::vec(-1.6..1.6f64, NV).prop_map(DVector::from_vec)
}

/// Nested selections over `rows`, with at most `max` rows in the larger.
fn nested(rows: usize, max: usize) -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (
        proptest::collection::btree_set(0..rows, 0..=max),
        proptest::num::u64::ANY,
    )
        .prop_map(move |(set, bits)| {
            let outer: Vec<bool> = (0..rows).map(|i| set.contains(&i)).collect();
            let inner = outer
                .iter()
                .enumerate()
                .map(|(i, &f)| f && (bits >> (i % 64)) & 1 == 1)
                .collect();
            (inner, outer)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn enlarging_the_selection_never_raises_the_bound(
        u in inputs(),
        sigma in 0.2..2.0f64,
        (inner, outer) in nested(2 * NV, 4),
    ) {
        let p = standard_problem(System::Nonlinear, NV - 1);
        let noise = NoiseModel::isotropic(NV, 2, sigma, sigma).unwrap();
        let x0 = DVector::zeros(2);
        let small = constrained_projection(&p, &u, &x0, &noise, &selection(&inner), false).unwrap();
        let large = constrained_projection(&p, &u, &x0, &noise, &selection(&outer), false).unwrap();
        prop_assert!(no_increase(small.value, large.value, 1e-12));
    }

    #[test]
    fn closed_form_box_projection_matches_the_general_solver(
        u in inputs(),
        sigma in 0.2..2.0f64,
        (_, sel) in nested(2 * NV, 4),
    ) {
        let noise = NoiseModel::isotropic(NV, 2, sigma, sigma).unwrap();
        let x0 = DVector::zeros(2);
        let sel = selection(&sel);
        let fast = constrained_projection(&standard_problem(System::Linear, NV - 1), &u, &x0, &noise, &sel, false).unwrap();
        let general = constrained_projection_general(&box_as_polytope(), &u, &x0, &noise, &sel, false).unwrap();
        prop_assert_eq!(fast.is_feasible(), general.is_feasible());
        if fast.is_feasible() {
            prop_assert!((fast.value - general.value).abs() <= 1e-8 * (1.0 + fast.value.abs()));
            prop_assert!((&fast.inputs - &general.inputs).amax() <= 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn enlarging_a_state_selection_never_raises_the_bound(
        u in inputs(),
        x0 in proptest::collection::vec(-1.5..1.5f64, 2),
        (inner, outer) in nested(4 * NV + 2, 3),
    ) {
        let p = polytope_problem();
        let noise = NoiseModel::isotropic(NV, 2, 0.5, 0.3).unwrap();
        let x0 = DVector::from_vec(x0);
        let small = constrained_projection(&p, &u, &x0, &noise, &selection(&inner), true).unwrap();
        let large = constrained_projection(&p, &u, &x0, &noise, &selection(&outer), true).unwrap();
        prop_assert!(no_increase(small.value, large.value, 1e-8));
    }
}
