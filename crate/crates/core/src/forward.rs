//! Box-constrained minimization by projected gradient with Armijo
//! backtracking, and the forward controller solve built on it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ControlProblem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Tolerance on `‖x − Π(x − ∇f)‖`.
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub initial_step: f64,
    /// Start each line search from the Barzilai–Borwein step instead of
    /// `initial_step`.
    pub spectral: bool,
    /// Try a projected Newton step on the free coordinates before each
    /// gradient step, when the objective supplies curvature.
    pub newton: bool,
    /// Stop when five consecutive iterations decrease the objective by less
    /// than this fraction of `1 + |f|` in total; zero disables the test.
    pub min_progress: f64,
    /// Trial points per line search.
    pub max_backtracks: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-8,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            initial_step: 1.0,
            spectral: true,
            newton: true,
            min_progress: 0.0,
            max_backtracks: 60,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::InvalidArgument("armijo_c must lie in (0, 1)".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::InvalidArgument(
                "backtrack_factor must lie in (0, 1)".into(),
            ));
        }
        if !(self.grad_tol > 0.0) || !(self.initial_step > 0.0) {
            return Err(Error::InvalidArgument(
                "grad_tol and initial_step must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Elementwise bounds; infinite entries are unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn unbounded(len: usize) -> Self {
        Self {
            lower: DVector::from_element(len, f64::NEG_INFINITY),
            upper: DVector::from_element(len, f64::INFINITY),
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        x.zip_zip_map(&self.lower, &self.upper, |v, l, u| v.max(l).min(u))
    }

    /// `‖x − Π(x − g)‖`, zero exactly at box-stationary points.
    pub fn stationarity(&self, x: &DVector<f64>, gradient: &DVector<f64>) -> f64 {
        (x - self.project(&(x - gradient))).norm()
    }
}

/// Objective for [`minimize`]. `evaluate` returns `None` at points that must
/// not be accepted (non-finite values, or outside a region the caller wants
/// to stay in).
pub trait Objective {
    fn evaluate(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)>;

    /// Hessian used by the Newton step; `None` disables it at `x`.
    fn hessian(&mut self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// Checked at the start and after every accepted step (the last point
    /// passed to `evaluate`); `true` ends the solve early.
    fn done(&mut self, _x: &DVector<f64>, _value: f64) -> bool {
        false
    }
}

/// Wraps a value-and-gradient closure; curvature comes from central
/// differences of the gradient.
pub struct FnObjective<F> {
    pub f: F,
    pub curvature: bool,
}

impl<F> FnObjective<F>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    pub fn new(f: F) -> Self {
        Self { f, curvature: true }
    }

    pub fn first_order(f: F) -> Self {
        Self {
            f,
            curvature: false,
        }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    fn evaluate(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        (self.f)(x)
    }

    fn hessian(&mut self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        if !self.curvature {
            return None;
        }
        fd_hessian(|y| (self.f)(y).map(|(_, g)| g), x)
    }
}

/// Symmetrized central-difference Jacobian of a gradient map.
pub fn fd_hessian<G>(mut grad: G, x: &DVector<f64>) -> Option<DMatrix<f64>>
where
    G: FnMut(&DVector<f64>) -> Option<DVector<f64>>,
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut y = x.clone();
    for i in 0..n {
        let step = 1e-5 * (1.0 + x[i].abs());
        y[i] = x[i] + step;
        let plus = grad(&y)?;
        y[i] = x[i] - step;
        let minus = grad(&y)?;
        y[i] = x[i];
        h.set_column(i, &((plus - minus) / (2.0 * step)));
    }
    Some((&h + h.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations: usize,
    pub converged: bool,
    pub stationarity: f64,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub report: SolverReport,
}

/// Monotone projected gradient on a box. `x0` is projected first and must
/// evaluate to `Some`; otherwise `None` is returned.
pub fn minimize<O: Objective>(
    objective: &mut O,
    bounds: &Bounds,
    x0: &DVector<f64>,
    opts: &SolverOptions,
) -> Option<Minimum> {
    let mut x = bounds.project(x0);
    let (mut f, mut g) = objective.evaluate(&x)?;
    let mut step = opts.initial_step;
    let mut last: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut iterations = 0;
    let mut stat = bounds.stationarity(&x, &g);
    let mut history = vec![f];
    let mut finished = objective.done(&x, f);
    let mut stalled = false;

    while !finished && stat > opts.grad_tol && iterations < opts.max_iter {
        iterations += 1;
        let newton = if opts.newton {
            newton_step(objective, bounds, &x, f, &g, stat, opts)
        } else {
            None
        };
        let (x_new, f_new, g_new) = match newton {
            Some(accepted) => accepted,
            None => {
                if opts.spectral {
                    if let Some((s, y)) = &last {
                        let sy = s.dot(y);
                        step = if sy > 0.0 {
                            (s.norm_squared() / sy).clamp(1e-12, 1e12)
                        } else {
                            opts.initial_step
                        };
                    }
                } else {
                    step = opts.initial_step;
                }
                match armijo_gradient(objective, bounds, &x, f, &g, step, opts) {
                    Some(accepted) => accepted,
                    None => break,
                }
            }
        };
        last = Some((&x_new - &x, &g_new - &g));
        x = x_new;
        f = f_new;
        g = g_new;
        stat = bounds.stationarity(&x, &g);
        finished = objective.done(&x, f);
        history.push(f);
        if opts.min_progress > 0.0 && history.len() > 5 {
            let earlier = history[history.len() - 6];
            if earlier - f <= opts.min_progress * (1.0 + f.abs()) {
                stalled = true;
                break;
            }
        }
    }

    Some(Minimum {
        report: SolverReport {
            iterations,
            // A stall under `min_progress` counts, and so does a failed line
            // search once stationarity is at `grad_tol` relative to `f`.
            converged: finished || stalled || stat <= opts.grad_tol * (1.0 + f.abs()),
            stationarity: stat,
            value: f,
        },
        x,
        value: f,
        gradient: g,
    })
}

type Accepted = (DVector<f64>, f64, DVector<f64>);

fn armijo_gradient<O: Objective>(
    objective: &mut O,
    bounds: &Bounds,
    x: &DVector<f64>,
    f: f64,
    g: &DVector<f64>,
    mut step: f64,
    opts: &SolverOptions,
) -> Option<Accepted> {
    for _ in 0..opts.max_backtracks {
        let trial = bounds.project(&(x - g * step));
        let decrease = g.dot(&(&trial - x));
        if decrease >= 0.0 {
            // Projection arc collapsed onto x: nothing left to gain.
            return None;
        }
        if let Some((ft, gt)) = objective.evaluate(&trial) {
            if ft <= f + opts.armijo_c * decrease {
                return Some((trial, ft, gt));
            }
        }
        step *= opts.backtrack_factor;
    }
    None
}

/// Two-metric projected Newton step: Newton on coordinates that are not
/// held at a bound by the gradient, gradient on the rest.
fn newton_step<O: Objective>(
    objective: &mut O,
    bounds: &Bounds,
    x: &DVector<f64>,
    f: f64,
    g: &DVector<f64>,
    stat: f64,
    opts: &SolverOptions,
) -> Option<Accepted> {
    let eps = stat.min(1e-3);
    let free: Vec<usize> = (0..x.len())
        .filter(|&i| {
            let at_lower = x[i] <= bounds.lower[i] + eps && g[i] > 0.0;
            let at_upper = x[i] >= bounds.upper[i] - eps && g[i] < 0.0;
            !(at_lower || at_upper)
        })
        .collect();
    if free.is_empty() {
        return None;
    }
    let h = objective.hessian(x)?;
    let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
    let gf = DVector::from_fn(free.len(), |a, _| g[free[a]]);
    let chol = hf.cholesky()?;
    let df = chol.solve(&(-&gf));
    if !(gf.dot(&df) < 0.0) {
        return None;
    }
    let mut direction = -g.clone();
    for (a, &i) in free.iter().enumerate() {
        direction[i] = df[a];
    }
    let mut step = 1.0;
    for _ in 0..opts.max_backtracks.min(30) {
        let trial = bounds.project(&(x + &direction * step));
        let decrease = g.dot(&(&trial - x));
        if decrease < 0.0 {
            if let Some((ft, gt)) = objective.evaluate(&trial) {
                if ft <= f + opts.armijo_c * decrease {
                    return Some((trial, ft, gt));
                }
                // Near the minimum the decrease drops below the rounding of
                // f; a full step that still shrinks the gradient is kept.
                let rounding = 8.0 * f64::EPSILON * (1.0 + f.abs());
                if step == 1.0
                    && ft <= f + rounding
                    && bounds.stationarity(&trial, &gt) < 0.5 * stat
                {
                    return Some((trial, ft, gt));
                }
            }
        } else if decrease == 0.0 {
            return None;
        }
        step *= opts.backtrack_factor;
    }
    None
}

#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub inputs: DVector<f64>,
    pub report: SolverReport,
}

/// Input bounds of the problem's constraint set, when they are simple.
pub fn input_bounds(problem: &ControlProblem) -> Result<Bounds> {
    let len = problem.input_len();
    if let Some(b) = problem.constraints().input_box() {
        return Ok(Bounds {
            lower: DVector::from_fn(len, |c, _| b.lower(c)),
            upper: DVector::from_fn(len, |c, _| b.upper(c)),
        });
    }
    if problem.num_constraints() == 0 {
        return Ok(Bounds::unbounded(len));
    }
    Err(Error::Unsupported(
        "forward solve needs input bounds or no constraints".into(),
    ))
}

/// Minimizes `θᵀφ(V, F(V, z0))` over feasible `V`, starting from `V = 0`.
/// A non-converged solve still returns its last iterate with
/// `report.converged == false`.
pub fn solve_forward(
    problem: &ControlProblem,
    theta: &DVector<f64>,
    z0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<ForwardSolution> {
    opts.validate()?;
    if theta.len() != problem.num_features() {
        return Err(Error::Dimension(format!(
            "expected {} parameters, got {}",
            problem.num_features(),
            theta.len()
        )));
    }
    if theta.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidArgument(
            "parameters must be finite and non-negative".into(),
        ));
    }
    if z0.len() != problem.state_dim() {
        return Err(Error::Dimension(
            "initial state has the wrong length".into(),
        ));
    }
    let bounds = input_bounds(problem)?;
    // The minimizer is invariant to positive scaling; keeping the largest
    // weight at most one makes grad_tol attainable in floating point.
    let theta = &(theta / theta.amax().max(1.0));
    let mut objective = FnObjective::new(|v: &DVector<f64>| {
        let g = problem.feature_jacobian(v, z0).ok()?;
        let phi = problem.feature_values(v, z0).ok()?;
        Some((theta.dot(&phi), g * theta))
    });
    let start = DVector::zeros(problem.input_len());
    let min = minimize(&mut objective, &bounds, &start, opts)
        .ok_or(Error::NonFinite("forward objective"))?;
    Ok(ForwardSolution {
        inputs: min.x,
        report: min.report,
    })
}
