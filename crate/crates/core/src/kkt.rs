//! Lagrangian gradients, KKT residuals, active-set detection and the
//! KKT-residual estimator (method 1).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActiveSet, ControlProblem, Normalization, ParameterVector};

/// Default tolerance for treating a constraint row as active.
pub const TOL_ACTIVE: f64 = 1e-6;

/// `∇_V [θᵀφ + λᵀg]` along the rollout from `x0`.
pub fn lagrangian_gradient(
    problem: &ControlProblem,
    theta: &DVector<f64>,
    lambda: &DVector<f64>,
    inputs: &DVector<f64>,
    x0: &DVector<f64>,
) -> Result<DVector<f64>> {
    if lambda.len() != problem.num_constraints() {
        return Err(Error::Dimension(format!(
            "expected {} multipliers, got {}",
            problem.num_constraints(),
            lambda.len()
        )));
    }
    let mut grad = problem.cost_gradient(theta, inputs, x0)?;
    if lambda.iter().any(|&l| l != 0.0) {
        let (jv, _) = problem.constraint_jacobian(inputs, x0)?;
        grad += jv.transpose() * lambda;
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub stationarity: DVector<f64>,
    /// `|λᵀg|`.
    pub comp_slack: f64,
    /// `max(g, 0)` per row.
    pub primal_violation: DVector<f64>,
    /// `max(−λ, 0)` per row.
    pub dual_violation: DVector<f64>,
}

impl KktResidual {
    /// Largest entry over all four parts.
    pub fn max_norm(&self) -> f64 {
        let s = self.stationarity.amax();
        let p = if self.primal_violation.is_empty() {
            0.0
        } else {
            self.primal_violation.amax()
        };
        let d = if self.dual_violation.is_empty() {
            0.0
        } else {
            self.dual_violation.amax()
        };
        s.max(p).max(d).max(self.comp_slack)
    }
}

pub fn kkt_residual(
    problem: &ControlProblem,
    theta: &DVector<f64>,
    lambda: &DVector<f64>,
    inputs: &DVector<f64>,
    x0: &DVector<f64>,
) -> Result<KktResidual> {
    let stationarity = lagrangian_gradient(problem, theta, lambda, inputs, x0)?;
    let g = problem.constraint_values(inputs, x0)?;
    Ok(KktResidual {
        stationarity,
        comp_slack: lambda.dot(&g).abs(),
        primal_violation: g.map(|x| x.max(0.0)),
        dual_violation: lambda.map(|l| (-l).max(0.0)),
    })
}

/// Rows with `g_i ≥ −tol`. Observations may sit on or beyond a bound.
pub fn detect_active_set(
    problem: &ControlProblem,
    inputs: &DVector<f64>,
    x0: &DVector<f64>,
    tol_active: f64,
) -> Result<ActiveSet> {
    let g = problem.constraint_values(inputs, x0)?;
    Ok(ActiveSet::from_flags(
        g.iter().map(|&x| x >= -tol_active).collect(),
    ))
}

/// Non-negative least squares `min ‖A x − b‖` s.t. `x ≥ 0`
/// (Lawson–Hanson active set).
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    if n == 0 {
        return x;
    }
    let scale = a.amax().max(b.amax()).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale * scale * (a.nrows().max(n) as f64);
    let mut passive = vec![false; n];
    let mut w = a.transpose() * (b - a * &x);

    for _ in 0..(3 * n + 30) {
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;

        loop {
            let z = solve_passive(a, b, &passive);
            let feasible = (0..n).filter(|&i| passive[i]).all(|i| z[i] > 0.0);
            if feasible {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for i in (0..n).filter(|&i| passive[i] && z[i] <= 0.0) {
                let denom = x[i] - z[i];
                if denom > 0.0 {
                    alpha = alpha.min(x[i] / denom);
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            x += (&z - &x) * alpha;
            for i in 0..n {
                if passive[i] && x[i] <= 1e-15 * (1.0 + z[i].abs()) {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        w = a.transpose() * (b - a * &x);
    }
    x
}

fn solve_passive(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&i| passive[i]).collect();
    let sub = a.select_columns(&cols);
    let solved = sub
        .clone()
        .svd(true, true)
        .solve(b, 1e-13 * sub.amax().max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DVector::zeros(cols.len()));
    let mut z = DVector::zeros(passive.len());
    for (k, &i) in cols.iter().enumerate() {
        z[i] = solved[k];
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Method1Options {
    pub tol_active: f64,
    pub normalization: Normalization,
}

impl Default for Method1Options {
    fn default() -> Self {
        Self {
            tol_active: TOL_ACTIVE,
            normalization: crate::systems::default_normalization(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Method1Estimate {
    pub theta: ParameterVector,
    /// Full-length multipliers, zero off the detected active set.
    pub lambda: DVector<f64>,
    pub active_set: ActiveSet,
    /// `‖∇_V L‖` at the returned pair.
    pub residual: f64,
    /// The data carry no information about `θ` (zero regressor matrix).
    pub unidentifiable: bool,
}

/// Minimizes `‖∇_V L_θ(U, x0)‖²` over `θ ≥ 0` (normalized) and `λ ≥ 0`
/// supported on the rows active at the observation.
///
/// The objective is linear least squares in `(θ, λ)`, solved exactly with
/// NNLS after eliminating the pinned component. Without normalization the
/// minimizer is `θ = 0`.
pub fn method1_estimate(
    problem: &ControlProblem,
    observed: &DVector<f64>,
    x0: &DVector<f64>,
    opts: &Method1Options,
) -> Result<Method1Estimate> {
    let active_set = detect_active_set(problem, observed, x0, opts.tol_active)?;
    let relaxed = kkt_relaxation(problem, observed, x0, &active_set, opts.normalization)?;
    let theta = if relaxed.unidentifiable {
        ParameterVector::ones(problem.num_features(), opts.normalization)?
    } else {
        ParameterVector::normalize(relaxed.theta, opts.normalization)?
    };
    Ok(Method1Estimate {
        theta,
        lambda: relaxed.lambda,
        active_set,
        residual: relaxed.residual,
        unidentifiable: relaxed.unidentifiable,
    })
}

/// Solution of the KKT-residual least-squares problem for a given support.
#[derive(Debug, Clone)]
pub struct Relaxation {
    /// Raw weights; the pinned component is exactly one.
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
    pub residual: f64,
    pub unidentifiable: bool,
}

/// `min ‖G θ + J_activeᵀ λ‖` over `θ ≥ 0`, `λ ≥ 0`, with `G` the feature
/// Jacobian at `(observed, x0)`.
pub fn kkt_relaxation(
    problem: &ControlProblem,
    observed: &DVector<f64>,
    x0: &DVector<f64>,
    active_set: &ActiveSet,
    normalization: Normalization,
) -> Result<Relaxation> {
    let g = problem.feature_jacobian(observed, x0)?;
    let active = active_set.indices();
    let p = problem.num_features();
    let s = problem.num_constraints();
    if active_set.len() != s {
        return Err(Error::Dimension(
            "active set length differs from the number of constraints".into(),
        ));
    }

    let jt = if active.is_empty() {
        DMatrix::zeros(problem.input_len(), 0)
    } else {
        let (jv, _) = problem.constraint_jacobian(observed, x0)?;
        jv.select_rows(&active).transpose()
    };

    if g.amax() <= 1e-12 {
        return Ok(Relaxation {
            theta: DVector::from_element(p, 1.0),
            lambda: DVector::zeros(s),
            residual: 0.0,
            unidentifiable: true,
        });
    }

    let (theta, lambda_active) = match normalization {
        Normalization::Free => (DVector::zeros(p), DVector::zeros(active.len())),
        Normalization::FixedComponent(pin) => {
            if pin >= p {
                return Err(Error::Dimension(format!(
                    "fixed component {pin} out of range"
                )));
            }
            let free: Vec<usize> = (0..p).filter(|&i| i != pin).collect();
            let mut a = DMatrix::zeros(g.nrows(), free.len() + active.len());
            for (c, &i) in free.iter().enumerate() {
                a.set_column(c, &g.column(i));
            }
            for c in 0..active.len() {
                a.set_column(free.len() + c, &jt.column(c));
            }
            let b = -g.column(pin).into_owned();
            let w = nnls(&a, &b);
            let mut theta = DVector::zeros(p);
            theta[pin] = 1.0;
            for (c, &i) in free.iter().enumerate() {
                theta[i] = w[c];
            }
            (theta, w.rows(free.len(), active.len()).into_owned())
        }
        Normalization::UnitNorm => {
            return Err(Error::Unsupported(
                "the KKT relaxation needs a fixed component or no normalization".into(),
            ))
        }
    };

    let mut lambda = DVector::zeros(s);
    for (c, &i) in active.iter().enumerate() {
        lambda[i] = lambda_active[c];
    }
    let residual = (&g * &theta + &jt * &lambda_active).norm();
    Ok(Relaxation {
        theta,
        lambda,
        residual,
        unidentifiable: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nnls_matches_unconstrained_when_positive() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let x = nnls(&a, &b);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nnls_clips_negative_directions() {
        // min (x-(-1))² + (y-2)² with x,y ≥ 0 → (0, 2)
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_column_slice(&[-1.0, 2.0]);
        assert_eq!(nnls(&a, &b).as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn nnls_coupled() {
        // Columns nearly parallel; unconstrained solution has a negative entry.
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.1, 1.0, 0.9]);
        let b = DVector::from_column_slice(&[1.0, 0.5, 1.5]);
        let x = nnls(&a, &b);
        // KKT: x ≥ 0, w = Aᵀ(b − Ax) ≤ 0, x·w = 0.
        let w = a.transpose() * (&b - &a * &x);
        for i in 0..2 {
            assert!(x[i] >= 0.0);
            assert!(w[i] <= 1e-12);
            assert!((x[i] * w[i]).abs() <= 1e-12);
        }
    }
}
