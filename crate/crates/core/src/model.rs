//! The parametrized controller: cost `θᵀφ(V, Z)`, constraints `g(V, Z) ≤ 0`,
//! and their derivatives with respect to the stacked inputs.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{rollout_jacobian, rollout_states, Dynamics};

/// How a parameter vector is pinned down; the controller is invariant to
/// positive rescaling of `θ`, so estimators need one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// `θ[index] = 1`.
    FixedComponent(usize),
    /// `‖θ‖₂ = 1`.
    UnitNorm,
    /// No normalization.
    Free,
}

/// Non-negative cost weights together with their normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    theta: DVector<f64>,
    normalization: Normalization,
}

impl ParameterVector {
    /// Rescales `raw` so that it satisfies `normalization`.
    pub fn normalize(raw: DVector<f64>, normalization: Normalization) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Dimension("empty parameter vector".into()));
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        if raw.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "parameters must be non-negative, got {raw:?}"
            )));
        }
        let theta = match normalization {
            Normalization::FixedComponent(i) => {
                let pivot = *raw
                    .get(i)
                    .ok_or_else(|| Error::Dimension(format!("fixed component {i} out of range")))?;
                if pivot <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "fixed component {i} is zero"
                    )));
                }
                let mut t = raw / pivot;
                t[i] = 1.0;
                t
            }
            Normalization::UnitNorm => {
                let norm = raw.norm();
                if norm == 0.0 {
                    return Err(Error::InvalidArgument(
                        "cannot unit-normalize a zero vector".into(),
                    ));
                }
                raw / norm
            }
            Normalization::Free => raw,
        };
        Ok(Self {
            theta,
            normalization,
        })
    }

    pub fn ones(len: usize, normalization: Normalization) -> Result<Self> {
        Self::normalize(DVector::from_element(len, 1.0), normalization)
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn renormalize(&self, normalization: Normalization) -> Result<Self> {
        Self::normalize(self.theta.clone(), normalization)
    }
}

/// Feature vector `φ(V, Z)` and its partial derivatives.
pub trait FeatureMap: Send + Sync + fmt::Debug {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn evaluate(&self, inputs: &DVector<f64>, states: &DVector<f64>) -> DVector<f64>;

    /// `(∂φ/∂V, ∂φ/∂Z)` as `p × |V|` and `p × |Z|` matrices.
    fn gradients(
        &self,
        inputs: &DVector<f64>,
        states: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>);

    /// True when every feature is a quadratic form in `(V, Z)`.
    fn is_quadratic(&self) -> bool {
        false
    }
}

/// Regulation features over `k = 0..N`:
/// `Σ z_{i,k}²` for each state component `i`, then the input rate
/// `Σ ‖v_{k+1} − v_k‖²`, then the input energy `Σ ‖v_k‖²`.
///
/// The terminal state `z_{N+1}` carries no weight.
#[derive(Debug, Clone, Copy)]
pub struct RegulatorFeatures {
    pub state_dim: usize,
    pub input_dim: usize,
}

impl RegulatorFeatures {
    pub fn new(state_dim: usize, input_dim: usize) -> Self {
        Self {
            state_dim,
            input_dim,
        }
    }

    /// Index of the input-rate feature.
    pub fn rate_index(&self) -> usize {
        self.state_dim
    }

    /// Index of the input-energy feature.
    pub fn energy_index(&self) -> usize {
        self.state_dim + 1
    }
}

impl FeatureMap for RegulatorFeatures {
    fn len(&self) -> usize {
        self.state_dim + 2
    }

    fn evaluate(&self, inputs: &DVector<f64>, states: &DVector<f64>) -> DVector<f64> {
        let (n, m) = (self.state_dim, self.input_dim);
        let steps = inputs.len() / m;
        let mut phi = DVector::zeros(self.len());
        for k in 0..steps {
            for i in 0..n {
                phi[i] += states[k * n + i].powi(2);
            }
        }
        for k in 0..steps.saturating_sub(1) {
            for j in 0..m {
                phi[n] += (inputs[(k + 1) * m + j] - inputs[k * m + j]).powi(2);
            }
        }
        phi[n + 1] = inputs.norm_squared();
        phi
    }

    fn gradients(
        &self,
        inputs: &DVector<f64>,
        states: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n, m) = (self.state_dim, self.input_dim);
        let steps = inputs.len() / m;
        let mut d_inputs = DMatrix::zeros(self.len(), inputs.len());
        let mut d_states = DMatrix::zeros(self.len(), states.len());
        for k in 0..steps {
            for i in 0..n {
                d_states[(i, k * n + i)] = 2.0 * states[k * n + i];
            }
        }
        for k in 0..steps.saturating_sub(1) {
            for j in 0..m {
                let diff = inputs[(k + 1) * m + j] - inputs[k * m + j];
                d_inputs[(n, (k + 1) * m + j)] += 2.0 * diff;
                d_inputs[(n, k * m + j)] -= 2.0 * diff;
            }
        }
        for (c, &x) in inputs.iter().enumerate() {
            d_inputs[(n + 1, c)] = 2.0 * x;
        }
        (d_inputs, d_states)
    }

    fn is_quadratic(&self) -> bool {
        true
    }
}

/// Inequality constraints `g(V, Z) ≤ 0`.
pub trait ConstraintSet: Send + Sync + fmt::Debug {
    /// Number of scalar rows `s`.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn evaluate(&self, inputs: &DVector<f64>, states: &DVector<f64>) -> DVector<f64>;

    /// `(∂g/∂V, ∂g/∂Z)` as `s × |V|` and `s × |Z|` matrices.
    fn jacobians(
        &self,
        inputs: &DVector<f64>,
        states: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>);

    fn depends_on_states(&self) -> bool;

    /// True when `g` is affine in `(V, Z)`.
    fn is_linear(&self) -> bool {
        false
    }

    /// Some when the rows are exactly simple input bounds.
    fn input_box(&self) -> Option<&InputBox> {
        None
    }

    /// Euclidean projection onto the feasible input set, when it is cheap.
    fn project_inputs(&self, _inputs: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
}

/// Per-step input bounds `lower ≤ v_k ≤ upper`. For each stacked input
/// coordinate `c`, row `2c` is `v_c − upper` and row `2c+1` is `lower − v_c`.
#[derive(Debug, Clone)]
pub struct InputBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
    horizon: usize,
}

impl InputBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, horizon: usize) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Dimension(
                "bound vectors must have the input dimension".into(),
            ));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite())
        {
            return Err(Error::InvalidArgument(
                "bounds must be finite with lower <= upper".into(),
            ));
        }
        Ok(Self {
            lower,
            upper,
            horizon,
        })
    }

    /// `|v| ≤ bound` on every input component.
    pub fn symmetric(input_dim: usize, horizon: usize, bound: f64) -> Self {
        Self::new(vec![-bound; input_dim], vec![bound; input_dim], horizon)
            .expect("symmetric bounds are valid")
    }

    pub fn input_dim(&self) -> usize {
        self.lower.len()
    }

    pub fn coordinates(&self) -> usize {
        self.input_dim() * (self.horizon + 1)
    }

    /// The input coordinate a row acts on, and whether it is an upper bound.
    pub fn row_coordinate(&self, row: usize) -> (usize, bool) {
        (row / 2, row.is_multiple_of(2))
    }

    /// Value the coordinate takes when `row` holds with equality.
    pub fn row_bound(&self, row: usize) -> f64 {
        let (c, upper) = self.row_coordinate(row);
        let j = c % self.input_dim();
        if upper {
            self.upper[j]
        } else {
            self.lower[j]
        }
    }

    pub fn lower(&self, coordinate: usize) -> f64 {
        self.lower[coordinate % self.input_dim()]
    }

    pub fn upper(&self, coordinate: usize) -> f64 {
        self.upper[coordinate % self.input_dim()]
    }
}

impl ConstraintSet for InputBox {
    fn len(&self) -> usize {
        2 * self.coordinates()
    }

    fn evaluate(&self, inputs: &DVector<f64>, _states: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(2 * inputs.len());
        for (c, &v) in inputs.iter().enumerate() {
            g[2 * c] = v - self.upper(c);
            g[2 * c + 1] = self.lower(c) - v;
        }
        g
    }

    fn jacobians(
        &self,
        inputs: &DVector<f64>,
        states: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut jv = DMatrix::zeros(2 * inputs.len(), inputs.len());
        for c in 0..inputs.len() {
            jv[(2 * c, c)] = 1.0;
            jv[(2 * c + 1, c)] = -1.0;
        }
        (jv, DMatrix::zeros(2 * inputs.len(), states.len()))
    }

    fn depends_on_states(&self) -> bool {
        false
    }

    fn is_linear(&self) -> bool {
        true
    }

    fn input_box(&self) -> Option<&InputBox> {
        Some(self)
    }

    fn project_inputs(&self, inputs: &DVector<f64>) -> Option<DVector<f64>> {
        Some(DVector::from_iterator(
            inputs.len(),
            inputs
                .iter()
                .enumerate()
                .map(|(c, &v)| v.clamp(self.lower(c), self.upper(c))),
        ))
    }
}

/// No constraints at all (`s = 0`).
#[derive(Debug, Clone, Copy, Default)]
pub struct Unconstrained;

impl ConstraintSet for Unconstrained {
    fn len(&self) -> usize {
        0
    }

    fn evaluate(&self, _inputs: &DVector<f64>, _states: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn jacobians(
        &self,
        inputs: &DVector<f64>,
        states: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::zeros(0, inputs.len()),
            DMatrix::zeros(0, states.len()),
        )
    }

    fn depends_on_states(&self) -> bool {
        false
    }

    fn is_linear(&self) -> bool {
        true
    }

    fn project_inputs(&self, inputs: &DVector<f64>) -> Option<DVector<f64>> {
        Some(inputs.clone())
    }
}

/// Polytopic constraints `A_v V + A_z Z ≤ b`.
#[derive(Debug, Clone)]
pub struct LinearConstraints {
    a_inputs: DMatrix<f64>,
    a_states: DMatrix<f64>,
    b: DVector<f64>,
}

impl LinearConstraints {
    pub fn new(a_inputs: DMatrix<f64>, a_states: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a_inputs.nrows() != b.len() || a_states.nrows() != b.len() {
            return Err(Error::Dimension("constraint rows disagree".into()));
        }
        Ok(Self {
            a_inputs,
            a_states,
            b,
        })
    }

    /// Constraints on the inputs only.
    pub fn on_inputs(a_inputs: DMatrix<f64>, b: DVector<f64>, state_len: usize) -> Result<Self> {
        let rows = a_inputs.nrows();
        Self::new(a_inputs, DMatrix::zeros(rows, state_len), b)
    }
}

impl ConstraintSet for LinearConstraints {
    fn len(&self) -> usize {
        self.b.len()
    }

    fn evaluate(&self, inputs: &DVector<f64>, states: &DVector<f64>) -> DVector<f64> {
        &self.a_inputs * inputs + &self.a_states * states - &self.b
    }

    fn jacobians(
        &self,
        _inputs: &DVector<f64>,
        _states: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a_inputs.clone(), self.a_states.clone())
    }

    fn depends_on_states(&self) -> bool {
        self.a_states.iter().any(|&x| x != 0.0)
    }

    fn is_linear(&self) -> bool {
        true
    }
}

/// Which constraint rows are treated as active (`idx`); the complement is `¬idx`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActiveSet {
    flags: Vec<bool>,
}

impl ActiveSet {
    pub fn empty(len: usize) -> Self {
        Self {
            flags: vec![false; len],
        }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Result<Self> {
        let mut set = Self::empty(len);
        for &i in indices {
            if i >= len {
                return Err(Error::Dimension(format!("constraint index {i} >= {len}")));
            }
            set.flags[i] = true;
        }
        Ok(set)
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.flags.iter().any(|&f| f)
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.flags[i]
    }

    pub fn insert(&mut self, i: usize) {
        self.flags[i] = true;
    }

    pub fn remove(&mut self, i: usize) {
        self.flags[i] = false;
    }

    pub fn indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn complement(&self) -> Self {
        Self {
            flags: self.flags.iter().map(|f| !f).collect(),
        }
    }

    /// `'0'`/`'1'` per row.
    pub fn encode(&self) -> String {
        self.flags
            .iter()
            .map(|&f| if f { '1' } else { '0' })
            .collect()
    }

    pub fn decode(text: &str) -> Result<Self> {
        text.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidArgument(format!(
                    "bad active-set character {other:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::from_flags)
    }
}

impl fmt::Display for ActiveSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

/// Dynamics, features and constraints over a fixed horizon `N`.
#[derive(Debug)]
pub struct ControlProblem {
    dynamics: Box<dyn Dynamics>,
    features: Box<dyn FeatureMap>,
    constraints: Box<dyn ConstraintSet>,
    horizon: usize,
}

impl ControlProblem {
    pub fn new(
        dynamics: Box<dyn Dynamics>,
        features: Box<dyn FeatureMap>,
        constraints: Box<dyn ConstraintSet>,
        horizon: usize,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Dimension(
                "feature map must have at least one feature".into(),
            ));
        }
        if let Some(steps) = dynamics.steps_defined() {
            if steps < horizon + 1 {
                return Err(Error::Dimension(format!(
                    "dynamics define {steps} steps, horizon {horizon} needs {}",
                    horizon + 1
                )));
            }
        }
        let problem = Self {
            dynamics,
            features,
            constraints,
            horizon,
        };
        let probe = DVector::zeros(problem.input_len());
        let states = DVector::zeros(problem.state_len());
        if problem.constraints.evaluate(&probe, &states).len() != problem.constraints.len() {
            return Err(Error::Dimension(
                "constraint set does not match the horizon".into(),
            ));
        }
        if problem.features.evaluate(&probe, &states).len() != problem.features.len() {
            return Err(Error::Dimension(
                "feature map length is inconsistent".into(),
            ));
        }
        Ok(problem)
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    pub fn features(&self) -> &dyn FeatureMap {
        self.features.as_ref()
    }

    pub fn constraints(&self) -> &dyn ConstraintSet {
        self.constraints.as_ref()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.input_dim()
    }

    /// `|V| = m(N+1)`.
    pub fn input_len(&self) -> usize {
        self.input_dim() * (self.horizon + 1)
    }

    /// `|Z| = n(N+2)`.
    pub fn state_len(&self) -> usize {
        self.state_dim() * (self.horizon + 2)
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    /// Feature Hessians and constraint Jacobians do not depend on `(V, z0)`.
    pub fn has_constant_curvature(&self) -> bool {
        self.dynamics.is_linear() && self.features.is_quadratic() && self.constraints.is_linear()
    }

    fn check(&self, theta: Option<&DVector<f64>>, inputs: &DVector<f64>) -> Result<()> {
        if inputs.len() != self.input_len() {
            return Err(Error::Dimension(format!(
                "expected {} stacked inputs, got {}",
                self.input_len(),
                inputs.len()
            )));
        }
        if let Some(theta) = theta {
            if theta.len() != self.num_features() {
                return Err(Error::Dimension(format!(
                    "expected {} parameters, got {}",
                    self.num_features(),
                    theta.len()
                )));
            }
        }
        Ok(())
    }

    pub fn states(&self, inputs: &DVector<f64>, z0: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(None, inputs)?;
        rollout_states(self.dynamics(), inputs, z0)
    }

    pub fn feature_values(&self, inputs: &DVector<f64>, z0: &DVector<f64>) -> Result<DVector<f64>> {
        let states = self.states(inputs, z0)?;
        Ok(self.features.evaluate(inputs, &states))
    }

    /// `θᵀ φ(V, F(V, z0))`.
    pub fn cost(
        &self,
        theta: &DVector<f64>,
        inputs: &DVector<f64>,
        z0: &DVector<f64>,
    ) -> Result<f64> {
        self.check(Some(theta), inputs)?;
        Ok(theta.dot(&self.feature_values(inputs, z0)?))
    }

    /// Total derivative of every feature with respect to `V`, one column per
    /// feature (`|V| × p`). The cost gradient is this matrix times `θ`.
    pub fn feature_jacobian(
        &self,
        inputs: &DVector<f64>,
        z0: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        self.check(None, inputs)?;
        let (states, jac) = rollout_jacobian(self.dynamics(), inputs, z0)?;
        let (phi_v, phi_z) = self.features.gradients(inputs, &states);
        Ok(phi_v.transpose() + jac.wrt_inputs.transpose() * phi_z.transpose())
    }

    /// Feature Jacobian together with its total derivative with respect to
    /// the initial state (`p × n`, one row per feature).
    pub fn feature_jacobians_full(
        &self,
        inputs: &DVector<f64>,
        z0: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check(None, inputs)?;
        let (states, jac) = rollout_jacobian(self.dynamics(), inputs, z0)?;
        let (phi_v, phi_z) = self.features.gradients(inputs, &states);
        let g = phi_v.transpose() + jac.wrt_inputs.transpose() * phi_z.transpose();
        let gx = &phi_z * &jac.wrt_initial;
        Ok((g, gx))
    }

    pub fn cost_gradient(
        &self,
        theta: &DVector<f64>,
        inputs: &DVector<f64>,
        z0: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check(Some(theta), inputs)?;
        Ok(self.feature_jacobian(inputs, z0)? * theta)
    }

    /// `g(V, F(V, z0))`; negative entries are strictly satisfied.
    pub fn constraint_values(
        &self,
        inputs: &DVector<f64>,
        z0: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let states = if self.constraints.depends_on_states() {
            self.states(inputs, z0)?
        } else {
            self.check(None, inputs)?;
            DVector::zeros(self.state_len())
        };
        Ok(self.constraints.evaluate(inputs, &states))
    }

    /// Total constraint Jacobians `(dg/dV, dg/dz0)`.
    pub fn constraint_jacobian(
        &self,
        inputs: &DVector<f64>,
        z0: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check(None, inputs)?;
        if !self.constraints.depends_on_states() {
            let states = DVector::zeros(self.state_len());
            let (jv, _) = self.constraints.jacobians(inputs, &states);
            return Ok((jv, DMatrix::zeros(self.num_constraints(), self.state_dim())));
        }
        let (states, jac) = rollout_jacobian(self.dynamics(), inputs, z0)?;
        let (gv, gz) = self.constraints.jacobians(inputs, &states);
        Ok((gv + &gz * &jac.wrt_inputs, gz * jac.wrt_initial))
    }
}
