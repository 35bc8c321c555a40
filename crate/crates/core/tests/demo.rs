use ioc_core::demo::sample_demonstration;
use ioc_core::forward::SolverOptions;
use ioc_core::systems::{true_theta, System};
use nalgebra::DVector;

#[test]
fn observation_noise_is_centred_on_the_truth() {
    // Mean of 10⁴ draws per coordinate lies within 4σ/√n of the truth.
    let draws = 10_000;
    let (sigma_u, sigma_0) = (0.3, 0.2);
    let opts = SolverOptions::default();
    let reference =
        sample_demonstration(System::Linear, &true_theta(), 0.0, 0.0, 42, 10, &opts).unwrap();
    let mut input_sum = DVector::zeros(11);
    let mut state_sum = DVector::zeros(2);
    let mut input_sq = DVector::zeros(11);
    for seed in 0..draws {
        let d = sample_demonstration(
            System::Linear,
            &true_theta(),
            sigma_u,
            sigma_0,
            seed,
            10,
            &opts,
        )
        .unwrap();
        let e = &d.observation.inputs - &d.truth.inputs;
        input_sq += e.component_mul(&e);
        input_sum += e;
        state_sum += &d.observation.x0 - &d.truth.z0;
    }
    let n = draws as f64;
    let input_bound = 4.0 * sigma_u / n.sqrt();
    let state_bound = 4.0 * sigma_0 / n.sqrt();
    assert!((input_sum / n).amax() <= input_bound);
    assert!((state_sum / n).amax() <= state_bound);
    // Variance of a mean of squares of normals: 2σ⁴/n.
    let var = input_sq / n;
    let tol = 4.0 * (2.0f64).sqrt() * sigma_u * sigma_u / n.sqrt();
    assert!(var.iter().all(|v| (v - sigma_u * sigma_u).abs() <= tol));
    assert_eq!(reference.observation.inputs, reference.truth.inputs);
}

#[test]
fn truth_does_not_depend_on_the_noise_level() {
    let opts = SolverOptions::default();
    let a = sample_demonstration(System::Nonlinear, &true_theta(), 0.0, 0.0, 9, 10, &opts).unwrap();
    let b = sample_demonstration(System::Nonlinear, &true_theta(), 0.5, 0.5, 9, 10, &opts).unwrap();
    assert_eq!(a.truth.z0, b.truth.z0);
    assert_eq!(a.truth.inputs, b.truth.inputs);
    assert_ne!(a.observation.inputs, b.observation.inputs);
}
