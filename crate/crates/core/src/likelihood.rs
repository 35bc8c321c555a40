//! Gaussian observation model and likelihood projections onto the feasible
//! set with selected rows held at equality.
//!
//! Log-likelihoods drop their normalization constants: a perfect fit scores
//! zero and every other value is negative.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ActiveSet, ControlProblem};

/// Covariances of the input observations and of the observed initial state.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    input_cov: DMatrix<f64>,
    input_precision: DMatrix<f64>,
    initial: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "{what} covariance must be square"
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::NotPositiveDefinite(what));
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite(what))?;
    Ok(chol.inverse())
}

impl NoiseModel {
    /// `initial_cov = None` pins the initial state to its observation.
    pub fn new(input_cov: DMatrix<f64>, initial_cov: Option<DMatrix<f64>>) -> Result<Self> {
        let input_precision = spd_inverse(&input_cov, "input")?;
        let initial = match initial_cov {
            Some(c) => {
                let p = spd_inverse(&c, "initial state")?;
                Some((c, p))
            }
            None => None,
        };
        Ok(Self {
            input_cov,
            input_precision,
            initial,
        })
    }

    /// `σ_u² I` on the inputs and `σ₀² I` on the initial state.
    ///
    /// Zero noise levels are degenerate: `σ₀ = 0` pins the initial state, and
    /// `σ_u = 0` keeps the inputs three orders of magnitude more certain than
    /// the initial state (or uses unit weight when both are exact, where the
    /// scale is immaterial).
    pub fn isotropic(
        input_len: usize,
        state_dim: usize,
        sigma_u: f64,
        sigma_0: f64,
    ) -> Result<Self> {
        if !(sigma_u >= 0.0 && sigma_0 >= 0.0) || !sigma_u.is_finite() || !sigma_0.is_finite() {
            return Err(Error::InvalidArgument(
                "noise levels must be finite and non-negative".into(),
            ));
        }
        let su = if sigma_u > 0.0 {
            sigma_u
        } else if sigma_0 > 0.0 {
            1e-3 * sigma_0
        } else {
            1.0
        };
        let initial =
            (sigma_0 > 0.0).then(|| DMatrix::identity(state_dim, state_dim) * sigma_0.powi(2));
        Self::new(
            DMatrix::identity(input_len, input_len) * su.powi(2),
            initial,
        )
    }

    pub fn input_len(&self) -> usize {
        self.input_cov.nrows()
    }

    pub fn input_cov(&self) -> &DMatrix<f64> {
        &self.input_cov
    }

    pub fn input_precision(&self) -> &DMatrix<f64> {
        &self.input_precision
    }

    pub fn initial_cov(&self) -> Option<&DMatrix<f64>> {
        self.initial.as_ref().map(|(c, _)| c)
    }

    pub fn initial_precision(&self) -> Option<&DMatrix<f64>> {
        self.initial.as_ref().map(|(_, p)| p)
    }

    /// Whether the initial state is treated as exactly observed.
    pub fn pins_initial_state(&self) -> bool {
        self.initial.is_none()
    }

    pub fn has_diagonal_input_cov(&self) -> bool {
        let c = &self.input_cov;
        (0..c.nrows()).all(|i| (0..c.ncols()).all(|j| i == j || c[(i, j)] == 0.0))
    }

    /// `−½ (U − V)ᵀ Σ⁻¹ (U − V)`.
    pub fn log_likelihood(&self, inputs: &DVector<f64>, observed: &DVector<f64>) -> f64 {
        let r = observed - inputs;
        -0.5 * r.dot(&(&self.input_precision * &r))
    }

    /// Input term plus `−½ (x0 − z0)ᵀ Σ₀⁻¹ (x0 − z0)`; a pinned initial
    /// state contributes nothing.
    pub fn log_likelihood_joint(
        &self,
        inputs: &DVector<f64>,
        observed: &DVector<f64>,
        z0: &DVector<f64>,
        x0: &DVector<f64>,
    ) -> f64 {
        let mut value = self.log_likelihood(inputs, observed);
        if let Some((_, p)) = &self.initial {
            let r = x0 - z0;
            value -= 0.5 * r.dot(&(p * &r));
        }
        value
    }

    /// Largest precision entry; used to whiten internal objectives.
    pub(crate) fn precision_scale(&self, with_initial: bool) -> f64 {
        let mut s = self.input_precision.amax();
        if with_initial {
            if let Some((_, p)) = &self.initial {
                s = s.max(p.amax());
            }
        }
        s.max(f64::MIN_POSITIVE)
    }
}

/// `−½ (U − V)ᵀ Σ⁻¹ (U − V)` for an explicit covariance.
pub fn log_likelihood(
    inputs: &DVector<f64>,
    observed: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    if inputs.len() != observed.len() || sigma.nrows() != inputs.len() {
        return Err(Error::Dimension("likelihood dimensions disagree".into()));
    }
    let precision = spd_inverse(sigma, "input")?;
    let r = observed - inputs;
    Ok(-0.5 * r.dot(&(precision * &r)))
}

/// Maximizer of the likelihood over feasible trajectories with the selected
/// rows at equality. `value` is `−∞` when no such trajectory exists.
#[derive(Debug, Clone)]
pub struct Projection {
    pub inputs: DVector<f64>,
    pub z0: DVector<f64>,
    pub value: f64,
}

impl Projection {
    pub fn is_feasible(&self) -> bool {
        self.value > f64::NEG_INFINITY
    }
}

/// Feasibility tolerance for projections and fixed-active-set solutions.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Maximizes the likelihood of `(V, z0)` subject to `g ≤ 0` and
/// `g_selection = 0`. With `free_initial` the initial state is a decision
/// variable weighted by `Σ₀` (ignored when the noise model pins it).
///
/// Input bounds with a diagonal `Σ` are solved in closed form; everything
/// else goes through [`constrained_projection_general`].
pub fn constrained_projection(
    problem: &ControlProblem,
    observed: &DVector<f64>,
    x0: &DVector<f64>,
    noise: &NoiseModel,
    selection: &ActiveSet,
    free_initial: bool,
) -> Result<Projection> {
    check(problem, observed, x0, noise, selection)?;
    match problem.constraints().input_box() {
        Some(bounds) if noise.has_diagonal_input_cov() => {
            let mut v = observed.clone();
            for c in 0..v.len() {
                let upper = selection.contains(2 * c);
                let lower = selection.contains(2 * c + 1);
                let (lo, hi) = (bounds.lower(c), bounds.upper(c));
                v[c] = match (upper, lower) {
                    (true, true) if lo == hi => lo,
                    (true, true) => return Ok(infeasible(observed, x0)),
                    (true, false) => hi,
                    (false, true) => lo,
                    (false, false) => v[c].clamp(lo, hi),
                };
            }
            Ok(Projection {
                value: noise.log_likelihood(&v, observed),
                inputs: v,
                z0: x0.clone(),
            })
        }
        _ => constrained_projection_general(problem, observed, x0, noise, selection, free_initial),
    }
}

fn check(
    problem: &ControlProblem,
    observed: &DVector<f64>,
    x0: &DVector<f64>,
    noise: &NoiseModel,
    selection: &ActiveSet,
) -> Result<()> {
    if observed.len() != problem.input_len() || noise.input_len() != observed.len() {
        return Err(Error::Dimension(
            "observation and noise model disagree with the problem".into(),
        ));
    }
    if x0.len() != problem.state_dim() {
        return Err(Error::Dimension(
            "initial state has the wrong length".into(),
        ));
    }
    if selection.len() != problem.num_constraints() {
        return Err(Error::Dimension(
            "selection length differs from the number of constraints".into(),
        ));
    }
    Ok(())
}

fn infeasible(observed: &DVector<f64>, x0: &DVector<f64>) -> Projection {
    Projection {
        inputs: observed.clone(),
        z0: x0.clone(),
        value: f64::NEG_INFINITY,
    }
}

/// Augmented-Lagrangian solver for [`constrained_projection`] that only
/// needs constraint values and Jacobians. Inner problems are minimized by
/// semismooth Gauss–Newton with backtracking.
pub fn constrained_projection_general(
    problem: &ControlProblem,
    observed: &DVector<f64>,
    x0: &DVector<f64>,
    noise: &NoiseModel,
    selection: &ActiveSet,
    free_initial: bool,
) -> Result<Projection> {
    check(problem, observed, x0, noise, selection)?;
    let free_initial =
        free_initial && !noise.pins_initial_state() && problem.constraints().depends_on_states();
    let nv = problem.input_len();
    let n = problem.state_dim();
    let dim = nv + if free_initial { n } else { 0 };
    let s = problem.num_constraints();
    let scale = noise.precision_scale(free_initial);

    let mut precision = DMatrix::zeros(dim, dim);
    precision
        .view_mut((0, 0), (nv, nv))
        .copy_from(noise.input_precision());
    if free_initial {
        precision.view_mut((nv, nv), (n, n)).copy_from(
            noise
                .initial_precision()
                .expect("free initial state has a covariance"),
        );
    }
    precision /= scale;
    let mut target = DVector::zeros(dim);
    target.rows_mut(0, nv).copy_from(observed);
    if free_initial {
        target.rows_mut(nv, n).copy_from(x0);
    }

    let split = |y: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let v = y.rows(0, nv).into_owned();
        let z = if free_initial {
            y.rows(nv, n).into_owned()
        } else {
            x0.clone()
        };
        (v, z)
    };
    let constraints = |y: &DVector<f64>| -> Option<(DVector<f64>, DMatrix<f64>)> {
        let (v, z) = split(y);
        let g = problem.constraint_values(&v, &z).ok()?;
        let (jv, jz) = problem.constraint_jacobian(&v, &z).ok()?;
        let mut j = DMatrix::zeros(s, dim);
        j.view_mut((0, 0), (s, nv)).copy_from(&jv);
        if free_initial {
            j.view_mut((0, nv), (s, n)).copy_from(&jz);
        }
        Some((g, j))
    };
    let equality: Vec<bool> = selection.flags().to_vec();

    let mut y = target.clone();
    let mut mult = DVector::<f64>::zeros(s);
    let mut rho = 1e2;
    let mut last_violation = f64::INFINITY;

    for _outer in 0..80 {
        let augmented = |y: &DVector<f64>,
                         mult: &DVector<f64>,
                         rho: f64|
         -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
            let (g, j) = constraints(y)?;
            let r = y - &target;
            let pr = &precision * &r;
            let mut value = 0.5 * r.dot(&pr);
            let mut grad = pr;
            let mut hess = precision.clone();
            for i in 0..s {
                let shifted = if equality[i] {
                    g[i] + mult[i] / rho
                } else {
                    (g[i] + mult[i] / rho).max(0.0)
                };
                value += 0.5 * rho * (shifted * shifted - (mult[i] / rho).powi(2));
                if shifted != 0.0 || equality[i] {
                    let row = j.row(i).transpose();
                    grad += &row * (rho * shifted);
                    hess += &row * row.transpose() * rho;
                }
            }
            Some((value, grad, hess))
        };

        // Inner minimization.
        let Some((mut f, mut grad, mut hess)) = augmented(&y, &mult, rho) else {
            return Ok(infeasible(observed, x0));
        };
        for _ in 0..100 {
            if grad.norm() <= 1e-13 * (1.0 + rho) {
                break;
            }
            for i in 0..dim {
                hess[(i, i)] += 1e-12;
            }
            let Some(chol) = hess.clone().cholesky() else {
                break;
            };
            let d = chol.solve(&(-&grad));
            let slope = grad.dot(&d);
            if !(slope < 0.0) {
                break;
            }
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let trial = &y + &d * step;
                if let Some(eval) = augmented(&trial, &mult, rho) {
                    if eval.0 <= f + 1e-4 * step * slope {
                        accepted = Some((trial, eval));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((trial, (ft, gt, ht))) = accepted else {
                break;
            };
            let moved = (&trial - &y).norm();
            y = trial;
            f = ft;
            grad = gt;
            hess = ht;
            if moved <= 1e-15 * (1.0 + y.norm()) {
                break;
            }
        }

        let Some((g, _)) = constraints(&y) else {
            return Ok(infeasible(observed, x0));
        };
        let violation = (0..s)
            .map(|i| {
                if equality[i] {
                    g[i].abs()
                } else {
                    g[i].max(-mult[i] / rho).abs()
                }
            })
            .fold(0.0, f64::max);
        for i in 0..s {
            mult[i] = if equality[i] {
                mult[i] + rho * g[i]
            } else {
                (mult[i] + rho * g[i]).max(0.0)
            };
        }
        if violation <= 1e-13 {
            break;
        }
        if violation > 0.25 * last_violation && rho < 1e6 {
            rho *= 1e2;
        }
        last_violation = violation;
    }

    let (v, z) = split(&y);
    let g = problem.constraint_values(&v, &z)?;
    let feasible = (0..s).all(|i| {
        if equality[i] {
            g[i].abs() <= FEASIBILITY_TOL
        } else {
            g[i] <= FEASIBILITY_TOL
        }
    });
    if !feasible {
        return Ok(infeasible(observed, x0));
    }
    let value = if free_initial {
        noise.log_likelihood_joint(&v, observed, &z, x0)
    } else {
        noise.log_likelihood(&v, observed)
    };
    Ok(Projection {
        inputs: v,
        z0: z,
        value,
    })
}
