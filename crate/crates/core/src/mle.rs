//! Maximum-likelihood estimation of cost weights (methods 2 and 3).
//!
//! The likelihood of the observed inputs is maximized over weights `θ` and
//! the trajectory `V` they induce. Complementary slackness makes this
//! combinatorial in the active set, so the search runs branch and bound over
//! active sets: every single constraint gets a likelihood upper bound, rows
//! whose bound cannot beat the all-inactive solution are pruned, subsets of
//! the survivors are ordered by their own bounds, and fixed-active-set
//! problems are solved until no remaining bound can beat the incumbent.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{minimize, Bounds, Objective, SolverOptions};
use crate::kkt::{kkt_relaxation, method1_estimate, Method1Options};
use crate::likelihood::{constrained_projection, NoiseModel};
use crate::model::{ActiveSet, ControlProblem, Normalization, ParameterVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleOptions {
    /// Normalization of the reported weights. Estimation always pins one
    /// component; `UnitNorm` rescales afterwards.
    pub normalization: Normalization,
    /// Largest candidate active-set size; `None` means no cap.
    pub k_max: Option<usize>,
    /// Upper bound on every free weight.
    pub theta_max: f64,
    /// Outer solver over weights (and initial state).
    pub solver: SolverOptions,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            normalization: crate::systems::default_normalization(),
            k_max: None,
            theta_max: 1e4,
            solver: SolverOptions {
                max_iter: 200,
                grad_tol: 1e-10,
                min_progress: 1e-12,
                max_backtracks: 12,
                ..SolverOptions::default()
            },
        }
    }
}

impl MleOptions {
    fn pinned(&self, p: usize) -> Result<usize> {
        match self.normalization {
            Normalization::FixedComponent(i) if i < p => Ok(i),
            Normalization::FixedComponent(i) => Err(Error::Dimension(format!(
                "fixed component {i} out of range"
            ))),
            Normalization::UnitNorm => Ok(p - 1),
            Normalization::Free => Err(Error::Unsupported(
                "likelihood estimators need a normalization".into(),
            )),
        }
    }
}

/// Solution of the likelihood problem with a fixed active set.
#[derive(Debug, Clone)]
pub struct FixedSolution {
    /// Raw weights with the pinned component equal to one.
    pub theta: DVector<f64>,
    pub inputs: DVector<f64>,
    /// Full-length multipliers, zero off the active set.
    pub lambda: DVector<f64>,
    pub z0: DVector<f64>,
    pub active_set: ActiveSet,
    /// `−∞` when no admissible point was found.
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FixedSolution {
    pub fn is_admissible(&self) -> bool {
        self.loglik > f64::NEG_INFINITY
    }
}

/// Active-set hypothesis with its likelihood upper bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub active_set: ActiveSet,
    pub bound: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Log-likelihood of the all-inactive hypothesis.
    pub p0: f64,
    /// Constraint rows discarded by their single-row bound.
    pub pruned: Vec<usize>,
    /// Candidate bounds computed; the list is built lazily in bound order,
    /// so this counts only the part of it the search reached.
    pub candidates: usize,
    /// Fixed-active-set problems solved after the all-inactive one.
    pub candidates_evaluated: usize,
    /// Incumbent log-likelihood after each evaluated candidate.
    pub incumbent: Vec<f64>,
    pub converged: bool,
    pub unidentifiable: bool,
    /// No hypothesis was admissible; the result comes from the KKT relaxation.
    pub fallback: bool,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub theta: ParameterVector,
    pub inputs: DVector<f64>,
    pub lambda: DVector<f64>,
    pub active_set: ActiveSet,
    pub loglik: f64,
    pub z0: DVector<f64>,
    pub diagnostics: Diagnostics,
}

/// Data and cached structure shared by every subproblem of one estimate.
struct Context<'a> {
    problem: &'a ControlProblem,
    observed: &'a DVector<f64>,
    x0: &'a DVector<f64>,
    noise: &'a NoiseModel,
    free_initial: bool,
    pin: usize,
    theta_max: f64,
    /// Whitened precisions.
    precision: DMatrix<f64>,
    initial_precision: Option<DMatrix<f64>>,
    constant: Option<Curvature>,
    solver: SolverOptions,
}

/// Second derivatives of the feature Jacobian `G(V, z0)` (`|V| × p`):
/// `wrt_inputs[i]` is `∂G[:, i]/∂V`, `wrt_initial[i]` is `∂G[:, i]/∂z0`.
#[derive(Debug, Clone)]
struct Curvature {
    wrt_inputs: Vec<DMatrix<f64>>,
    wrt_initial: Vec<DMatrix<f64>>,
    /// `G` at the expansion point.
    offset: DMatrix<f64>,
}

fn curvature(
    problem: &ControlProblem,
    v: &DVector<f64>,
    z0: &DVector<f64>,
    exact: bool,
) -> Option<Curvature> {
    let p = problem.num_features();
    let nv = v.len();
    let n = z0.len();
    let mut wrt_inputs = vec![DMatrix::zeros(nv, nv); p];
    let mut wrt_initial = vec![DMatrix::zeros(nv, n); p];
    // Quadratic features under linear dynamics have affine G, so unit
    // steps are exact and avoid cancellation.
    let step = |x: f64| if exact { 1.0 } else { 1e-5 * (1.0 + x.abs()) };
    let mut vv = v.clone();
    for j in 0..nv {
        let h = step(v[j]);
        vv[j] = v[j] + h;
        let plus = problem.feature_jacobian(&vv, z0).ok()?;
        vv[j] = v[j] - h;
        let minus = problem.feature_jacobian(&vv, z0).ok()?;
        vv[j] = v[j];
        let d = (plus - minus) / (2.0 * h);
        for (i, hi) in wrt_inputs.iter_mut().enumerate() {
            hi.set_column(j, &d.column(i));
        }
    }
    let mut zz = z0.clone();
    for j in 0..n {
        let h = step(z0[j]);
        zz[j] = z0[j] + h;
        let plus = problem.feature_jacobian(v, &zz).ok()?;
        zz[j] = z0[j] - h;
        let minus = problem.feature_jacobian(v, &zz).ok()?;
        zz[j] = z0[j];
        let d = (plus - minus) / (2.0 * h);
        for (i, ci) in wrt_initial.iter_mut().enumerate() {
            ci.set_column(j, &d.column(i));
        }
    }
    for h in &mut wrt_inputs {
        *h = (&*h + h.transpose()) * 0.5;
    }
    let offset = problem.feature_jacobian(v, z0).ok()?;
    Some(Curvature {
        wrt_inputs,
        wrt_initial,
        offset,
    })
}

impl Curvature {
    fn weighted(&self, theta: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut hess = DMatrix::zeros(self.offset.nrows(), self.offset.nrows());
        let mut mixed = DMatrix::zeros(
            self.offset.nrows(),
            self.wrt_initial.first().map_or(0, |c| c.ncols()),
        );
        for i in 0..theta.len() {
            if theta[i] != 0.0 {
                hess += &self.wrt_inputs[i] * theta[i];
                mixed += &self.wrt_initial[i] * theta[i];
            }
        }
        (hess, mixed)
    }

    /// `G(V, z0)` for affine `G`, expanded about the origin.
    fn jacobian_at(&self, v: &DVector<f64>, z0: &DVector<f64>) -> DMatrix<f64> {
        let mut g = self.offset.clone();
        for i in 0..g.ncols() {
            let col = &self.wrt_inputs[i] * v + &self.wrt_initial[i] * z0;
            let mut target = g.column_mut(i);
            target += col;
        }
        g
    }
}

impl<'a> Context<'a> {
    fn new(
        problem: &'a ControlProblem,
        observed: &'a DVector<f64>,
        x0: &'a DVector<f64>,
        noise: &'a NoiseModel,
        free_initial: bool,
        opts: &MleOptions,
    ) -> Result<Self> {
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
        if observed.iter().chain(x0.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("observation"));
        }
        opts.solver.validate()?;
        let pin = opts.pinned(problem.num_features())?;
        let free_initial = free_initial && !noise.pins_initial_state();
        let scale = noise.precision_scale(free_initial);
        let constant = if problem.has_constant_curvature() {
            Some(
                curvature(
                    problem,
                    &DVector::zeros(problem.input_len()),
                    &DVector::zeros(problem.state_dim()),
                    true,
                )
                .ok_or(Error::NonFinite("feature curvature"))?,
            )
        } else {
            None
        };
        Ok(Self {
            problem,
            observed,
            x0,
            noise,
            free_initial,
            pin,
            theta_max: opts.theta_max,
            precision: noise.input_precision() / scale,
            initial_precision: if free_initial {
                noise.initial_precision().map(|p| p / scale)
            } else {
                None
            },
            constant,
            solver: opts.solver,
        })
    }

    fn num_weights(&self) -> usize {
        self.problem.num_features() - 1
    }

    fn num_outer(&self) -> usize {
        self.num_weights()
            + if self.free_initial {
                self.problem.state_dim()
            } else {
                0
            }
    }

    fn theta_of(&self, w: &DVector<f64>) -> DVector<f64> {
        let p = self.problem.num_features();
        let mut theta = DVector::zeros(p);
        let mut k = 0;
        for i in 0..p {
            if i == self.pin {
                theta[i] = 1.0;
            } else {
                theta[i] = w[k];
                k += 1;
            }
        }
        theta
    }

    fn z0_of(&self, w: &DVector<f64>) -> DVector<f64> {
        if self.free_initial {
            w.rows(self.num_weights(), self.problem.state_dim())
                .into_owned()
        } else {
            self.x0.clone()
        }
    }

    fn bounds(&self) -> Bounds {
        let mut b = Bounds::unbounded(self.num_outer());
        for k in 0..self.num_weights() {
            b.lower[k] = 0.0;
            b.upper[k] = self.theta_max;
        }
        b
    }

    fn loglik(&self, v: &DVector<f64>, z0: &DVector<f64>) -> f64 {
        if self.free_initial {
            self.noise
                .log_likelihood_joint(v, self.observed, z0, self.x0)
        } else {
            self.noise.log_likelihood(v, self.observed)
        }
    }
}

/// Trajectory and multipliers implied by one outer point, with their
/// sensitivities to the outer variables.
#[derive(Debug, Clone)]
struct Inner {
    v: DVector<f64>,
    lambda: DVector<f64>,
    dv: DMatrix<f64>,
    dlambda: DMatrix<f64>,
    /// Values and outer gradients of the rows outside the active set.
    g_rest: DVector<f64>,
    dg_rest: DMatrix<f64>,
}

/// Inner controller problem with a fixed set of equality rows.
struct FixedSet<'c, 'a> {
    ctx: &'c Context<'a>,
    active: Vec<usize>,
    rest: Vec<usize>,
    warm_v: DVector<f64>,
    /// Constraint Jacobians and the active null space, when they are
    /// constant.
    rows: Option<Rows>,
}

struct Rows {
    jv: DMatrix<f64>,
    jz: DMatrix<f64>,
    ja: DMatrix<f64>,
    basis: DMatrix<f64>,
}

impl Rows {
    fn at(
        problem: &ControlProblem,
        active: &[usize],
        v: &DVector<f64>,
        z0: &DVector<f64>,
    ) -> Option<Self> {
        let (jv, jz) = problem.constraint_jacobian(v, z0).ok()?;
        let ja = jv.select_rows(active);
        let basis = null_space(&ja);
        Some(Self { jv, jz, ja, basis })
    }
}

impl<'c, 'a> FixedSet<'c, 'a> {
    fn new(ctx: &'c Context<'a>, active_set: &ActiveSet) -> Self {
        let active = active_set.indices();
        let rest = active_set.complement().indices();
        let problem = ctx.problem;
        let constant_rows = problem.constraints().is_linear()
            && (problem.dynamics().is_linear() || !problem.constraints().depends_on_states());
        let rows = if constant_rows {
            Rows::at(problem, &active, ctx.observed, ctx.x0)
        } else {
            None
        };
        Self {
            ctx,
            active,
            rest,
            warm_v: ctx.observed.clone(),
            rows,
        }
    }

    fn restore(&self, mut v: DVector<f64>, z0: &DVector<f64>) -> Option<DVector<f64>> {
        let problem = self.ctx.problem;
        let na = self.active.len();
        // Minimum-norm corrections towards g_A = 0.
        for _ in 0..20 {
            if na == 0 {
                break;
            }
            let values = problem.constraint_values(&v, z0).ok()?;
            let ga = DVector::from_iterator(na, self.active.iter().map(|&i| values[i]));
            if ga.amax() <= 1e-13 * (1.0 + v.amax()) {
                break;
            }
            let ja = match &self.rows {
                Some(rows) => rows.ja.clone(),
                None => problem
                    .constraint_jacobian(&v, z0)
                    .ok()?
                    .0
                    .select_rows(&self.active),
            };
            let correction = (&ja * ja.transpose()).lu().solve(&ga)?;
            v -= ja.transpose() * correction;
        }
        Some(v)
    }

    /// Exact minimizer for a quadratic cost on an affine set.
    fn quadratic_step(
        &self,
        curv: &Curvature,
        theta: &DVector<f64>,
        z0: &DVector<f64>,
        v: DVector<f64>,
    ) -> Option<Stationary> {
        let rows = self.rows.as_ref()?;
        let (hess, mixed) = curv.weighted(theta);
        let grad = curv.jacobian_at(&v, z0) * theta;
        let reduced = rows.basis.transpose() * &grad;
        let rh = rows.basis.transpose() * &hess * &rows.basis;
        let v = v - &rows.basis * rh.cholesky()?.solve(&reduced);
        let g = curv.jacobian_at(&v, z0);
        Some(Stationary {
            v,
            g,
            hess,
            mixed,
            jv: rows.jv.clone(),
            jz: rows.jz.clone(),
        })
    }

    /// Damped reduced-space Newton on the cost.
    fn newton(
        &self,
        theta: &DVector<f64>,
        z0: &DVector<f64>,
        mut v: DVector<f64>,
    ) -> Option<Stationary> {
        let ctx = self.ctx;
        let problem = ctx.problem;
        let nv = problem.input_len();
        let cost = |v: &DVector<f64>| {
            problem
                .feature_values(v, z0)
                .ok()
                .map(|phi| theta.dot(&phi))
        };
        let mut value = cost(&v)?;
        let mut previous = f64::INFINITY;
        for _ in 0..60 {
            let g = problem.feature_jacobian(&v, z0).ok()?;
            let local;
            let curv = match &ctx.constant {
                Some(c) => c,
                None => {
                    local = curvature(problem, &v, z0, false)?;
                    &local
                }
            };
            let (hess, mixed) = curv.weighted(theta);
            let (jv, jz, basis) = match &self.rows {
                Some(rows) => (rows.jv.clone(), rows.jz.clone(), rows.basis.clone()),
                None => {
                    let (jv, jz) = problem.constraint_jacobian(&v, z0).ok()?;
                    let basis = null_space(&jv.select_rows(&self.active));
                    (jv, jz, basis)
                }
            };
            let grad = &g * theta;
            let reduced = basis.transpose() * &grad;
            let scale = 1.0 + g.amax() * theta.amax();
            let stationary = |v: DVector<f64>| Stationary {
                v,
                g: g.clone(),
                hess: hess.clone(),
                mixed: mixed.clone(),
                jv: jv.clone(),
                jz: jz.clone(),
            };
            if reduced.amax() <= 1e-12 * scale {
                return Some(stationary(v));
            }
            if reduced.amax() > 0.5 * previous {
                // Newton stopped contracting: rounding dominates.
                return (reduced.amax() <= 1e-8 * scale).then(|| stationary(v));
            }
            let rh = basis.transpose() * &hess * &basis;
            let mut shift = 0.0;
            let step = loop {
                let mut shifted = rh.clone();
                for i in 0..shifted.nrows() {
                    shifted[(i, i)] += shift;
                }
                if let Some(chol) = shifted.cholesky() {
                    break &basis * chol.solve(&(-&reduced));
                }
                shift = if shift == 0.0 {
                    1e-8 * (1.0 + rh.amax())
                } else {
                    shift * 10.0
                };
                if shift > 1e12 * (1.0 + rh.amax()) {
                    return None;
                }
            };
            let slope = grad.dot(&step);
            if !(slope < 0.0) {
                return None;
            }
            if -slope <= 1e-13 * (1.0 + value.abs()) {
                // Cost differences are below rounding; take the full step
                // and judge it by the gradient instead.
                previous = reduced.amax();
                v += step;
                value = cost(&v)?;
                continue;
            }
            previous = f64::INFINITY;
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial = &v + &step * alpha;
                if let Some(next) = cost(&trial) {
                    if next <= value + 1e-4 * alpha * slope {
                        v = trial;
                        value = next;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // Rounding floor: accept the point if it is already as
                // stationary as the arithmetic allows.
                return (reduced.amax() <= 1e-8 * scale).then(|| stationary(v));
            }
            if v.amax() > 1e8 || nv == 0 {
                return None;
            }
        }
        None
    }

    /// Minimizes `θᵀφ` over `V` with the active rows held at zero, then
    /// recovers `λ` and the sensitivities of both to the outer variables.
    fn solve(&mut self, w: &DVector<f64>) -> Option<Inner> {
        let ctx = self.ctx;
        let problem = ctx.problem;
        let theta = ctx.theta_of(w);
        let z0 = ctx.z0_of(w);
        let nv = problem.input_len();
        let na = self.active.len();
        let n = problem.state_dim();

        let start = self.restore(self.warm_v.clone(), &z0)?;
        let Stationary {
            v,
            g,
            hess,
            mixed,
            jv,
            jz,
        } = match (&ctx.constant, &self.rows) {
            (Some(curv), Some(_)) => self.quadratic_step(curv, &theta, &z0, start)?,
            _ => self.newton(&theta, &z0, start)?,
        };
        let ja = jv.select_rows(&self.active);
        let grad = &g * &theta;

        // λ from the stationarity equation J_Aᵀ λ = −∇cost.
        let lambda = if na == 0 {
            DVector::zeros(0)
        } else {
            (&ja * ja.transpose()).lu().solve(&(-(&ja * &grad)))?
        };

        let mut kkt = DMatrix::zeros(nv + na, nv + na);
        kkt.view_mut((0, 0), (nv, nv)).copy_from(&hess);
        kkt.view_mut((0, nv), (nv, na)).copy_from(&ja.transpose());
        kkt.view_mut((nv, 0), (na, nv)).copy_from(&ja);
        let lu = kkt.lu();

        // Sensitivities: K [dV; dλ] = −[∂r/∂w].
        let nw = ctx.num_outer();
        let nt = ctx.num_weights();
        let mut rhs = DMatrix::zeros(nv + na, nw);
        let mut k = 0;
        for i in 0..problem.num_features() {
            if i == ctx.pin {
                continue;
            }
            rhs.view_mut((0, k), (nv, 1)).copy_from(&(-g.column(i)));
            k += 1;
        }
        if ctx.free_initial {
            rhs.view_mut((0, nt), (nv, n)).copy_from(&(-mixed));
            let jza = jz.select_rows(&self.active);
            rhs.view_mut((nv, nt), (na, n)).copy_from(&(-jza));
        }
        let sens = lu.solve(&rhs)?;
        if sens.iter().any(|x| !x.is_finite()) {
            return None;
        }
        let dv = sens.rows(0, nv).into_owned();
        let dlambda = sens.rows(nv, na).into_owned();

        let values = problem.constraint_values(&v, &z0).ok()?;
        let jr = jv.select_rows(&self.rest);
        let mut dg_rest = &jr * &dv;
        if ctx.free_initial {
            let jzr = jz.select_rows(&self.rest);
            let mut block = dg_rest.view_mut((0, nt), (self.rest.len(), n));
            block += jzr;
        }
        let g_rest = DVector::from_iterator(self.rest.len(), self.rest.iter().map(|&i| values[i]));

        self.warm_v = v.clone();
        Some(Inner {
            v,
            lambda,
            dv,
            dlambda,
            g_rest,
            dg_rest,
        })
    }
}

/// Stationary point of the inner problem with the derivatives the
/// sensitivity solve needs.
struct Stationary {
    v: DVector<f64>,
    g: DMatrix<f64>,
    hess: DMatrix<f64>,
    mixed: DMatrix<f64>,
    jv: DMatrix<f64>,
    jz: DMatrix<f64>,
}

/// Orthonormal basis of the null space of `a` (columns).
fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // Rows of the box constraints are signed unit vectors: pick coordinates.
    let unit_rows = a
        .row_iter()
        .all(|r| r.iter().filter(|&&x| x != 0.0).count() == 1);
    if unit_rows {
        let fixed: Vec<bool> = (0..n)
            .map(|j| a.column(j).iter().any(|&x| x != 0.0))
            .collect();
        let free: Vec<usize> = (0..n).filter(|&j| !fixed[j]).collect();
        let mut z = DMatrix::zeros(n, free.len());
        for (c, &j) in free.iter().enumerate() {
            z[(j, c)] = 1.0;
        }
        return z;
    }
    let projector = DMatrix::identity(n, n)
        - a.transpose()
            * (a * a.transpose())
                .pseudo_inverse(1e-12)
                .ok()
                .unwrap_or_else(|| DMatrix::zeros(a.nrows(), a.nrows()))
            * a;
    let eig = projector.symmetric_eigen();
    let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    eig.eigenvectors.select_columns(&cols)
}

/// Margin phase one aims for inside the admissible region.
const MARGIN: f64 = 1e-7;
/// Slack allowed on `g ≤ 0` and `λ ≥ 0` when accepting outer points.
const ADMISSIBLE_TOL: f64 = 1e-9;

fn admissible(inner: &Inner) -> bool {
    inner.g_rest.iter().all(|&g| g <= ADMISSIBLE_TOL)
        && inner.lambda.iter().all(|&l| l >= -ADMISSIBLE_TOL)
}

/// Squared hinge violation of inactive rows and multiplier signs.
struct Phase1<'f, 'c, 'a> {
    fixed: &'f mut FixedSet<'c, 'a>,
    last: Option<(DVector<f64>, DMatrix<f64>)>,
    admissible: bool,
}

impl Objective for Phase1<'_, '_, '_> {
    fn evaluate(&mut self, w: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let inner = self.fixed.solve(w)?;
        self.admissible = admissible(&inner);
        let nw = w.len();
        let mut value = 0.0;
        let mut grad = DVector::zeros(nw);
        let mut gn = DMatrix::zeros(nw, nw);
        for (r, &g) in inner.g_rest.iter().enumerate() {
            let h = g + MARGIN;
            if h > 0.0 {
                let row = inner.dg_rest.row(r).transpose();
                value += 0.5 * h * h;
                grad += &row * h;
                gn += &row * row.transpose();
            }
        }
        for (r, &l) in inner.lambda.iter().enumerate() {
            let h = MARGIN - l;
            if h > 0.0 {
                let row = -inner.dlambda.row(r).transpose();
                value += 0.5 * h * h;
                grad += &row * h;
                gn += &row * row.transpose();
            }
        }
        self.last = Some((w.clone(), gn));
        Some((value, grad))
    }

    fn hessian(&mut self, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (at, gn) = self.last.as_ref()?;
        if at != w {
            return None;
        }
        let mut h = gn.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += 1e-10 * (1.0 + gn.amax());
        }
        Some(h)
    }

    fn done(&mut self, _w: &DVector<f64>, _value: f64) -> bool {
        self.admissible
    }
}

/// Whitened negative log-likelihood, rejecting inadmissible points.
struct Phase2<'f, 'c, 'a> {
    fixed: &'f mut FixedSet<'c, 'a>,
    last: Option<(DVector<f64>, DMatrix<f64>)>,
}

impl Objective for Phase2<'_, '_, '_> {
    fn evaluate(&mut self, w: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let inner = self.fixed.solve(w)?;
        if !admissible(&inner) {
            return None;
        }
        let ctx = self.fixed.ctx;
        let r = &inner.v - ctx.observed;
        let pr = &ctx.precision * &r;
        let mut value = 0.5 * r.dot(&pr);
        let mut grad = inner.dv.transpose() * pr;
        let mut gn = inner.dv.transpose() * &ctx.precision * &inner.dv;
        if let Some(p0) = &ctx.initial_precision {
            let nt = ctx.num_weights();
            let n = p0.nrows();
            let d = ctx.z0_of(w) - ctx.x0;
            let pd = p0 * &d;
            value += 0.5 * d.dot(&pd);
            let mut tail = grad.rows_mut(nt, n);
            tail += pd;
            let mut block = gn.view_mut((nt, nt), (n, n));
            block += p0;
        }
        self.last = Some((w.clone(), gn));
        Some((value, grad))
    }

    fn hessian(&mut self, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (at, gn) = self.last.as_ref()?;
        if at != w {
            return None;
        }
        let mut h = gn.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += 1e-12 * (1.0 + gn.amax());
        }
        Some(h)
    }
}

fn initial_weights(ctx: &Context<'_>, active_set: &ActiveSet) -> Vec<DVector<f64>> {
    let p = ctx.problem.num_features();
    let mut starts = Vec::new();
    let mut push = |theta: &DVector<f64>| {
        let mut w = DVector::zeros(ctx.num_outer());
        let mut k = 0;
        for i in 0..p {
            if i != ctx.pin {
                w[k] = (theta[i] / theta[ctx.pin]).clamp(0.0, ctx.theta_max);
                k += 1;
            }
        }
        if ctx.free_initial {
            w.rows_mut(ctx.num_weights(), ctx.x0.len())
                .copy_from(ctx.x0);
        }
        starts.push(w);
    };
    if let Ok(relaxed) = kkt_relaxation(
        ctx.problem,
        ctx.observed,
        ctx.x0,
        active_set,
        Normalization::FixedComponent(ctx.pin),
    ) {
        if !relaxed.unidentifiable {
            push(&relaxed.theta);
        }
    }
    push(&DVector::from_element(p, 1.0));
    starts
}

fn solve_fixed(ctx: &Context<'_>, active_set: &ActiveSet) -> FixedSolution {
    let s = ctx.problem.num_constraints();
    let bounds = ctx.bounds();
    let mut fixed = FixedSet::new(ctx, active_set);
    let mut iterations = 0;
    let phase1_opts = SolverOptions {
        max_iter: 100,
        grad_tol: 1e-14,
        ..ctx.solver
    };

    let mut best: Option<(DVector<f64>, f64, bool)> = None;
    for start in initial_weights(ctx, active_set) {
        fixed.warm_v = ctx.observed.clone();
        let mut phase1 = Phase1 {
            fixed: &mut fixed,
            last: None,
            admissible: false,
        };
        let Some(feasible) = minimize(&mut phase1, &bounds, &start, &phase1_opts) else {
            continue;
        };
        iterations += feasible.report.iterations;
        let mut phase2 = Phase2 {
            fixed: &mut fixed,
            last: None,
        };
        let Some(opt) = minimize(&mut phase2, &bounds, &feasible.x, &ctx.solver) else {
            continue;
        };
        iterations += opt.report.iterations;
        if best.as_ref().is_none_or(|(_, value, _)| opt.value < *value) {
            best = Some((opt.x, opt.value, opt.report.converged));
        }
    }

    let theta_fallback = DVector::from_element(ctx.problem.num_features(), 1.0);
    let Some((w, _, converged)) = best else {
        return FixedSolution {
            theta: theta_fallback,
            inputs: ctx.observed.clone(),
            lambda: DVector::zeros(s),
            z0: ctx.x0.clone(),
            active_set: active_set.clone(),
            loglik: f64::NEG_INFINITY,
            converged: false,
            iterations,
        };
    };
    let inner = fixed.solve(&w).filter(admissible);
    let Some(inner) = inner else {
        return FixedSolution {
            theta: theta_fallback,
            inputs: ctx.observed.clone(),
            lambda: DVector::zeros(s),
            z0: ctx.x0.clone(),
            active_set: active_set.clone(),
            loglik: f64::NEG_INFINITY,
            converged: false,
            iterations,
        };
    };
    let mut lambda = DVector::zeros(s);
    for (k, &i) in fixed.active.iter().enumerate() {
        lambda[i] = inner.lambda[k].max(0.0);
    }
    let z0 = ctx.z0_of(&w);
    FixedSolution {
        theta: ctx.theta_of(&w),
        loglik: ctx.loglik(&inner.v, &z0),
        inputs: inner.v,
        lambda,
        z0,
        active_set: active_set.clone(),
        converged,
        iterations,
    }
}

/// Maximizes the likelihood over weights and trajectories whose KKT
/// conditions hold with exactly `active_set` at equality (the initial state
/// too when `free_initial`). An inadmissible hypothesis yields
/// `loglik = −∞`; a contradictory one is an error.
pub fn solve_fixed_active_set(
    problem: &ControlProblem,
    observed: &DVector<f64>,
    x0: &DVector<f64>,
    noise: &NoiseModel,
    active_set: &ActiveSet,
    free_initial: bool,
    opts: &MleOptions,
) -> Result<FixedSolution> {
    let ctx = Context::new(problem, observed, x0, noise, free_initial, opts)?;
    if active_set.len() != problem.num_constraints() {
        return Err(Error::Dimension(
            "active set length differs from the number of constraints".into(),
        ));
    }
    if !active_set.is_empty()
        && !constrained_projection(problem, observed, x0, noise, active_set, ctx.free_initial)?
            .is_feasible()
    {
        return Err(Error::Infeasible);
    }
    Ok(solve_fixed(&ctx, active_set))
}

/// The all-inactive hypothesis.
pub fn solve_unconstrained_mle(
    problem: &ControlProblem,
    observed: &DVector<f64>,
    x0: &DVector<f64>,
    noise: &NoiseModel,
    free_initial: bool,
    opts: &MleOptions,
) -> Result<FixedSolution> {
    let ctx = Context::new(problem, observed, x0, noise, free_initial, opts)?;
    Ok(solve_fixed(
        &ctx,
        &ActiveSet::empty(problem.num_constraints()),
    ))
}

/// Single-row bounds `p̄ⁱ`; rows with `p̄ⁱ ≤ p0` are returned as pruned.
#[allow(clippy::type_complexity)]
pub fn prune_constraints(
    problem: &ControlProblem,
    observed: &DVector<f64>,
    x0: &DVector<f64>,
    noise: &NoiseModel,
    free_initial: bool,
    p0: f64,
) -> Result<(Vec<(usize, f64)>, Vec<usize>)> {
    let s = problem.num_constraints();
    let mut survivors = Vec::new();
    let mut pruned = Vec::new();
    for i in 0..s {
        let sel = ActiveSet::from_indices(s, &[i])?;
        let bound = constrained_projection(problem, observed, x0, noise, &sel, free_initial)?.value;
        if bound > p0 {
            survivors.push((i, bound));
        } else {
            pruned.push(i);
        }
    }
    Ok((survivors, pruned))
}

/// Orders candidates by bound (descending), then size, then indices.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.bound
        .total_cmp(&a.bound)
        .then(a.active_set.count().cmp(&b.active_set.count()))
        .then_with(|| a.active_set.indices().cmp(&b.active_set.indices()))
}

/// Non-empty subsets of `survivors` (at most `k_max` rows) whose bound
/// `p̃` is finite and exceeds `p0`, in [`candidate_order`].
///
/// Subsets are grown depth first; once a subset's bound drops to `p0` its
/// supersets are skipped, since adding equalities cannot raise the bound.
#[allow(clippy::too_many_arguments)]
pub fn build_candidates(
    problem: &ControlProblem,
    observed: &DVector<f64>,
    x0: &DVector<f64>,
    noise: &NoiseModel,
    free_initial: bool,
    survivors: &[usize],
    p0: f64,
    k_max: Option<usize>,
) -> Result<Vec<Candidate>> {
    let s = problem.num_constraints();
    let cap = k_max.unwrap_or(survivors.len()).min(survivors.len());
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<usize>, usize)> = vec![(Vec::new(), 0)];
    while let Some((chosen, next)) = stack.pop() {
        if chosen.len() == cap {
            continue;
        }
        for (k, &row) in survivors.iter().enumerate().skip(next) {
            let mut subset = chosen.clone();
            subset.push(row);
            let sel = ActiveSet::from_indices(s, &subset)?;
            let bound =
                constrained_projection(problem, observed, x0, noise, &sel, free_initial)?.value;
            if bound > p0 {
                out.push(Candidate {
                    active_set: sel,
                    bound,
                });
                stack.push((subset, k + 1));
            }
        }
    }
    out.sort_by(candidate_order);
    Ok(out)
}

/// Yields the same sequence as [`build_candidates`] lazily, best first.
///
/// A subset's bound never exceeds the bound of any of its subsets, so
/// expanding a subset only when it is popped keeps the heap order exact.
pub struct CandidateQueue<'a> {
    problem: &'a ControlProblem,
    observed: &'a DVector<f64>,
    x0: &'a DVector<f64>,
    noise: &'a NoiseModel,
    free_initial: bool,
    survivors: Vec<usize>,
    p0: f64,
    cap: usize,
    heap: BinaryHeap<QueueEntry>,
    /// Candidates whose bound was computed.
    pub generated: usize,
}

struct QueueEntry {
    candidate: Candidate,
    chosen: Vec<usize>,
    next: usize,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for QueueEntry {}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        candidate_order(&other.candidate, &self.candidate)
    }
}

impl<'a> CandidateQueue<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        problem: &'a ControlProblem,
        observed: &'a DVector<f64>,
        x0: &'a DVector<f64>,
        noise: &'a NoiseModel,
        free_initial: bool,
        survivors: &[usize],
        p0: f64,
        k_max: Option<usize>,
    ) -> Result<Self> {
        let mut queue = Self {
            problem,
            observed,
            x0,
            noise,
            free_initial,
            survivors: survivors.to_vec(),
            p0,
            cap: k_max.unwrap_or(survivors.len()).min(survivors.len()),
            heap: BinaryHeap::new(),
            generated: 0,
        };
        queue.expand(&[], 0)?;
        Ok(queue)
    }

    fn expand(&mut self, chosen: &[usize], next: usize) -> Result<()> {
        if chosen.len() >= self.cap {
            return Ok(());
        }
        let s = self.problem.num_constraints();
        for k in next..self.survivors.len() {
            let mut subset = chosen.to_vec();
            subset.push(self.survivors[k]);
            let sel = ActiveSet::from_indices(s, &subset)?;
            let bound = constrained_projection(
                self.problem,
                self.observed,
                self.x0,
                self.noise,
                &sel,
                self.free_initial,
            )?
            .value;
            self.generated += 1;
            if bound > self.p0 {
                self.heap.push(QueueEntry {
                    candidate: Candidate {
                        active_set: sel,
                        bound,
                    },
                    chosen: subset,
                    next: k + 1,
                });
            }
        }
        Ok(())
    }

    /// Bound of the next candidate without removing it.
    pub fn peek_bound(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.candidate.bound)
    }

    pub fn next_candidate(&mut self) -> Result<Option<Candidate>> {
        let Some(entry) = self.heap.pop() else {
            return Ok(None);
        };
        self.expand(&entry.chosen, entry.next)?;
        Ok(Some(entry.candidate))
    }
}

fn branch_and_bound(
    problem: &ControlProblem,
    observed: &DVector<f64>,
    x0: &DVector<f64>,
    noise: &NoiseModel,
    free_initial: bool,
    opts: &MleOptions,
) -> Result<EstimationResult> {
    let started = Instant::now();
    let ctx = Context::new(problem, observed, x0, noise, free_initial, opts)?;
    let free_initial = ctx.free_initial;
    let s = problem.num_constraints();

    let unconstrained = solve_fixed(&ctx, &ActiveSet::empty(s));
    let p0 = unconstrained.loglik;
    let (survivors, pruned) = prune_constraints(problem, observed, x0, noise, free_initial, p0)?;
    let survivor_rows: Vec<usize> = survivors.iter().map(|&(i, _)| i).collect();
    let mut queue = CandidateQueue::new(
        problem,
        observed,
        x0,
        noise,
        free_initial,
        &survivor_rows,
        p0,
        opts.k_max,
    )?;

    let mut best = unconstrained;
    let mut incumbent = p0;
    let mut trace = Vec::new();
    let mut evaluated = 0;
    while queue.peek_bound().is_some_and(|bound| bound > incumbent) {
        let candidate = queue.next_candidate()?.expect("peeked candidate exists");
        let solution = solve_fixed(&ctx, &candidate.active_set);
        evaluated += 1;
        if solution.is_admissible() && solution.loglik >= incumbent {
            incumbent = solution.loglik;
            best = solution;
        }
        trace.push(incumbent);
    }

    let unidentifiable = problem.feature_jacobian(observed, x0)?.amax() <= 1e-12;
    let mut diagnostics = Diagnostics {
        p0,
        pruned,
        candidates: queue.generated,
        candidates_evaluated: evaluated,
        incumbent: trace,
        converged: best.converged,
        unidentifiable,
        fallback: false,
        runtime_ms: 0.0,
    };

    let result = if best.is_admissible() {
        let theta = if unidentifiable {
            ParameterVector::ones(problem.num_features(), opts.normalization)?
        } else {
            ParameterVector::normalize(best.theta, opts.normalization)?
        };
        EstimationResult {
            theta,
            inputs: best.inputs,
            lambda: best.lambda,
            active_set: best.active_set,
            loglik: best.loglik,
            z0: best.z0,
            diagnostics: Diagnostics::default(),
        }
    } else {
        diagnostics.fallback = true;
        diagnostics.converged = false;
        let m1 = method1_estimate(
            problem,
            observed,
            x0,
            &Method1Options {
                normalization: Normalization::FixedComponent(ctx.pin),
                ..Method1Options::default()
            },
        )?;
        EstimationResult {
            theta: m1.theta.renormalize(opts.normalization)?,
            inputs: observed.clone(),
            lambda: m1.lambda,
            active_set: m1.active_set,
            loglik: f64::NEG_INFINITY,
            z0: x0.clone(),
            diagnostics: Diagnostics::default(),
        }
    };
    diagnostics.runtime_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(EstimationResult {
        diagnostics,
        ..result
    })
}

/// Maximum-likelihood weights given the observed inputs, with the initial
/// state fixed at its observation.
pub fn method2_estimate(
    problem: &ControlProblem,
    observed: &DVector<f64>,
    x0: &DVector<f64>,
    noise: &NoiseModel,
    opts: &MleOptions,
) -> Result<EstimationResult> {
    branch_and_bound(problem, observed, x0, noise, false, opts)
}

/// Like [`method2_estimate`], but the initial state is estimated jointly
/// under its own noise model. A noise model that pins the initial state
/// reduces this to method 2.
pub fn method3_estimate(
    problem: &ControlProblem,
    observed: &DVector<f64>,
    x0: &DVector<f64>,
    noise: &NoiseModel,
    opts: &MleOptions,
) -> Result<EstimationResult> {
    branch_and_bound(problem, observed, x0, noise, true, opts)
}
