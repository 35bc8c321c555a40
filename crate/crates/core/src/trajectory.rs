//! Stacked input/state sequences, discrete-time dynamics and rollout.
//!
//! Sequences are stored block-stacked: inputs `v_0..v_N` (length `m(N+1)`)
//! and states `z_0..z_{N+1}` (length `n(N+2)`), so that `Z = F(V, z_0)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Discrete-time system `x(k+1) = f_k(x(k), u(k))` with step Jacobians.
pub trait Dynamics: Send + Sync + std::fmt::Debug {
    fn state_dim(&self) -> usize;

    fn input_dim(&self) -> usize;

    fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// Partial derivatives `(∂f/∂x, ∂f/∂u)` evaluated at `(x, u)`.
    fn jacobians(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>);

    /// True when `f_k` is affine in `(x, u)` for every `k`.
    fn is_linear(&self) -> bool {
        false
    }

    /// Number of steps the model is defined for, `None` if unbounded.
    fn steps_defined(&self) -> Option<usize> {
        None
    }
}

/// `x(k+1) = A_k x(k) + B_k u(k)`. A single `(A, B)` pair is time-invariant.
#[derive(Debug, Clone)]
pub struct LinearTimeVarying {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
}

impl LinearTimeVarying {
    pub fn new(a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() {
            return Err(Error::Dimension(format!(
                "need the same non-zero number of A and B matrices, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        for (ak, bk) in a.iter().zip(&b) {
            if ak.shape() != (n, n) || bk.shape() != (n, m) {
                return Err(Error::Dimension(format!(
                    "expected A {n}x{n} and B {n}x{m}, got {:?} and {:?}",
                    ak.shape(),
                    bk.shape()
                )));
            }
            if ak.iter().chain(bk.iter()).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("system matrices"));
            }
        }
        Ok(Self { a, b })
    }

    pub fn time_invariant(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![a], vec![b])
    }

    pub fn a(&self, k: usize) -> &DMatrix<f64> {
        if self.a.len() == 1 {
            &self.a[0]
        } else {
            &self.a[k]
        }
    }

    pub fn b(&self, k: usize) -> &DMatrix<f64> {
        if self.b.len() == 1 {
            &self.b[0]
        } else {
            &self.b[k]
        }
    }
}

impl Dynamics for LinearTimeVarying {
    fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    fn input_dim(&self) -> usize {
        self.b[0].ncols()
    }

    fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.a(k) * x + self.b(k) * u
    }

    fn jacobians(
        &self,
        k: usize,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a(k).clone(), self.b(k).clone())
    }

    fn is_linear(&self) -> bool {
        true
    }

    fn steps_defined(&self) -> Option<usize> {
        (self.a.len() > 1).then_some(self.a.len())
    }
}

/// Double integrator whose position update is damped by the squared input:
///
/// ```text
/// x1(k+1) = x1(k) + (1 - u(k)^2) x2(k)
/// x2(k+1) = x2(k) + u(k)
/// ```
///
/// Coincides with the plain double integrator at `u = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct InputCoupledIntegrator;

impl Dynamics for InputCoupledIntegrator {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn step(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let u = u[0];
        DVector::from_vec(vec![x[0] + (1.0 - u * u) * x[1], x[1] + u])
    }

    fn jacobians(
        &self,
        _k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let u = u[0];
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0 - u * u, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[-2.0 * u * x[1], 1.0]);
        (a, b)
    }
}

/// The plain double integrator `A = [[1, 1], [0, 1]]`, `B = [0, 1]ᵀ`.
pub fn double_integrator() -> LinearTimeVarying {
    LinearTimeVarying::time_invariant(
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
    )
    .expect("constant matrices are well formed")
}

/// Stacked inputs `v_0..v_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    values: DVector<f64>,
    input_dim: usize,
}

impl InputSequence {
    pub fn new(values: DVector<f64>, input_dim: usize) -> Result<Self> {
        if input_dim == 0 || values.is_empty() || !values.len().is_multiple_of(input_dim) {
            return Err(Error::Dimension(format!(
                "input sequence of length {} is not a whole number of {}-blocks",
                values.len(),
                input_dim
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("input sequence"));
        }
        Ok(Self { values, input_dim })
    }

    pub fn zeros(input_dim: usize, horizon: usize) -> Self {
        Self {
            values: DVector::zeros(input_dim * (horizon + 1)),
            input_dim,
        }
    }

    pub fn horizon(&self) -> usize {
        self.values.len() / self.input_dim - 1
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn block(&self, k: usize) -> DVector<f64> {
        self.values
            .rows(k * self.input_dim, self.input_dim)
            .into_owned()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.values
    }
}

/// Stacked states `z_0..z_{N+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSequence {
    values: DVector<f64>,
    state_dim: usize,
}

impl StateSequence {
    pub fn block(&self, k: usize) -> DVector<f64> {
        self.values
            .rows(k * self.state_dim, self.state_dim)
            .into_owned()
    }

    pub fn len_blocks(&self) -> usize {
        self.values.len() / self.state_dim
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.values
    }
}

/// Sensitivities of the stacked states with respect to the stacked inputs and
/// the initial state. Both are block-lower-triangular in time.
#[derive(Debug, Clone)]
pub struct RolloutJacobian {
    pub wrt_inputs: DMatrix<f64>,
    pub wrt_initial: DMatrix<f64>,
}

fn check_dims(dynamics: &dyn Dynamics, inputs: &DVector<f64>, z0: &DVector<f64>) -> Result<usize> {
    let n = dynamics.state_dim();
    let m = dynamics.input_dim();
    if z0.len() != n {
        return Err(Error::Dimension(format!(
            "initial state has length {}, expected {n}",
            z0.len()
        )));
    }
    if inputs.is_empty() || !inputs.len().is_multiple_of(m) {
        return Err(Error::Dimension(format!(
            "input vector of length {} is not a whole number of {m}-blocks",
            inputs.len()
        )));
    }
    let steps = inputs.len() / m;
    if let Some(defined) = dynamics.steps_defined() {
        if steps > defined {
            return Err(Error::Dimension(format!(
                "dynamics define {defined} steps but {steps} inputs were given"
            )));
        }
    }
    Ok(steps)
}

/// Rolls the system forward from `z0`, returning `z_0..z_{N+1}` stacked.
pub fn rollout_states(
    dynamics: &dyn Dynamics,
    inputs: &DVector<f64>,
    z0: &DVector<f64>,
) -> Result<DVector<f64>> {
    let steps = check_dims(dynamics, inputs, z0)?;
    let n = dynamics.state_dim();
    let m = dynamics.input_dim();
    let mut states = DVector::zeros(n * (steps + 1));
    states.rows_mut(0, n).copy_from(z0);
    let mut x = z0.clone();
    for k in 0..steps {
        let u = inputs.rows(k * m, m).into_owned();
        x = dynamics.step(k, &x, &u);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rollout state"));
        }
        states.rows_mut((k + 1) * n, n).copy_from(&x);
    }
    Ok(states)
}

/// Typed wrapper around [`rollout_states`].
pub fn rollout(
    dynamics: &dyn Dynamics,
    inputs: &InputSequence,
    z0: &DVector<f64>,
) -> Result<StateSequence> {
    let values = rollout_states(dynamics, inputs.as_vector(), z0)?;
    Ok(StateSequence {
        values,
        state_dim: dynamics.state_dim(),
    })
}

/// Forward sensitivity recursion `S_{k+1} = A_k S_k + B_k E_k`.
pub fn rollout_jacobian(
    dynamics: &dyn Dynamics,
    inputs: &DVector<f64>,
    z0: &DVector<f64>,
) -> Result<(DVector<f64>, RolloutJacobian)> {
    let steps = check_dims(dynamics, inputs, z0)?;
    let n = dynamics.state_dim();
    let m = dynamics.input_dim();
    let rows = n * (steps + 1);
    let mut states = DVector::zeros(rows);
    let mut d_inputs = DMatrix::zeros(rows, m * steps);
    let mut d_initial = DMatrix::zeros(rows, n);
    states.rows_mut(0, n).copy_from(z0);
    d_initial.view_mut((0, 0), (n, n)).fill_with_identity();

    let mut x = z0.clone();
    for k in 0..steps {
        let u = inputs.rows(k * m, m).into_owned();
        let (a, b) = dynamics.jacobians(k, &x, &u);
        x = dynamics.step(k, &x, &u);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rollout state"));
        }
        states.rows_mut((k + 1) * n, n).copy_from(&x);

        // Only columns of earlier inputs are non-zero in block k.
        let prev = d_inputs.view((k * n, 0), (n, k * m)).into_owned();
        d_inputs
            .view_mut(((k + 1) * n, 0), (n, k * m))
            .copy_from(&(&a * prev));
        d_inputs
            .view_mut(((k + 1) * n, k * m), (n, m))
            .copy_from(&b);
        let prev0 = d_initial.view((k * n, 0), (n, n)).into_owned();
        d_initial
            .view_mut(((k + 1) * n, 0), (n, n))
            .copy_from(&(&a * prev0));
    }
    Ok((
        states,
        RolloutJacobian {
            wrt_inputs: d_inputs,
            wrt_initial: d_initial,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn zero_is_a_fixed_point_of_the_double_integrator() {
        let sys = double_integrator();
        let z = rollout_states(&sys, &DVector::zeros(11), &DVector::zeros(2)).unwrap();
        assert_eq!(z.len(), 24);
        assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_steps_match_hand_evaluation() {
        let lin = rollout_states(&double_integrator(), &v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap();
        assert_eq!(&lin.as_slice()[2..4], &[1.0, 1.0]);

        let nl = rollout_states(&InputCoupledIntegrator, &v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert_eq!(&nl.as_slice()[2..4], &[1.0, 2.0]);
    }

    #[test]
    fn linear_jacobian_blocks() {
        let sys = double_integrator();
        let (_, jac) = rollout_jacobian(&sys, &DVector::zeros(4), &DVector::zeros(2)).unwrap();
        // dz_1/dv_0 = B
        assert_eq!(
            jac.wrt_inputs
                .view((2, 0), (2, 1))
                .iter()
                .copied()
                .collect::<Vec<_>>(),
            vec![0.0, 1.0]
        );
        // dz_2/dv_0 = A B
        assert_eq!(
            jac.wrt_inputs
                .view((4, 0), (2, 1))
                .iter()
                .copied()
                .collect::<Vec<_>>(),
            vec![1.0, 1.0]
        );
        // future inputs never act on past states
        assert_eq!(jac.wrt_inputs[(2, 1)], 0.0);
        assert_eq!(jac.wrt_inputs[(3, 1)], 0.0);
    }

    #[test]
    fn systems_coincide_at_zero_input() {
        let z0 = v(&[0.3, -1.2]);
        let inputs = DVector::zeros(5);
        let (za, ja) = rollout_jacobian(&double_integrator(), &inputs, &z0).unwrap();
        let (zb, jb) = rollout_jacobian(&InputCoupledIntegrator, &inputs, &z0).unwrap();
        assert_eq!(za, zb);
        assert_eq!(ja.wrt_initial, jb.wrt_initial);
        // B differs by -2 u x2 which vanishes at u = 0
        assert!((ja.wrt_inputs - jb.wrt_inputs).abs().max() == 0.0);
    }

    #[test]
    fn dimension_errors() {
        let sys = double_integrator();
        assert!(matches!(
            rollout_states(&sys, &DVector::zeros(3), &DVector::zeros(3)),
            Err(Error::Dimension(_))
        ));
        assert!(InputSequence::new(DVector::zeros(3), 2).is_err());
        assert!(InputSequence::new(v(&[f64::NAN]), 1).is_err());
    }

    #[test]
    fn divergent_rollout_is_reported() {
        let big = LinearTimeVarying::time_invariant(
            DMatrix::from_element(1, 1, 1e200),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let res = rollout_states(&big, &DVector::zeros(4), &v(&[1e200]));
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
