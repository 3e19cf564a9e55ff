//! Forward-backward solver for `0 ∈ A(y, u) + B(y, u)` and the directional
//! derivative of its solution map.
//!
//! The iteration is `y ← J_{ρB}(y - ρ R⁻¹ A(y, u), u)`, a contraction with
//! factor `c = √(1 - 2ρμ + ρ²L²)` for `ρ ∈ (0, 2μ/L²)`. The derivative
//! `S'(u*; h)` solves the same kind of inclusion with `A` replaced by
//! `A'(y*, u*; ·, h)` and `J_{ρB}` replaced by `J'_{ρB}(q*_ρ, u*; ·, h)`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{check_len, config, Error, Result};
use crate::hilbert::HilbertSpace;
use crate::operator::{resolvent_derivative, MonotoneConstants, ResolventOp, SingleValuedOp};
use crate::oracle::QuotientTable;
use crate::vector::{Dual, Param, Primal};

/// Steps below this multiple of `eps · (1 + ‖y‖)` are treated as roundoff.
const ROUNDOFF_FACTOR: f64 = 64.0;

/// Uphill Newton steps allowed per solve.
const NONMONOTONE_BUDGET: usize = 50;

/// Relative tolerance of the fixed-point identity that certifies `ξ* ∈ B(y*, u*)`.
pub const SOLUTION_CHECK_TOL: f64 = 1e-8;

#[derive(Clone)]
pub struct GeProblem {
    pub space: Arc<HilbertSpace>,
    pub a: Arc<dyn SingleValuedOp>,
    pub b: Arc<dyn ResolventOp>,
}

impl GeProblem {
    pub fn new(space: Arc<HilbertSpace>, a: Arc<dyn SingleValuedOp>, b: Arc<dyn ResolventOp>) -> Self {
        Self { space, a, b }
    }
}

/// Step size selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rho {
    /// `μ/L²`, the minimizer of `c`.
    Auto,
    /// `s · μ/L²` with `0 < s < 2`.
    AutoScaled(f64),
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain Picard iteration of the forward-backward map.
    FixedPoint,
    /// Semismooth Newton on `y - T(y) = 0` with a finite-difference
    /// Jacobian, falling back to Picard steps; returns the best iterate seen.
    Newton,
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub rho: Rho,
    pub tol_residual: f64,
    pub max_iters: usize,
    /// Starting point; `None` means the zero vector.
    pub y0: Option<Primal>,
    pub method: Method,
    /// Allow difference quotients for resolvents without an analytic derivative.
    pub numeric_fallback: bool,
    pub record_history: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: Rho::Auto,
            tol_residual: 1e-10,
            max_iters: 10_000,
            y0: None,
            method: Method::FixedPoint,
            numeric_fallback: false,
            record_history: false,
        }
    }
}

impl SolverConfig {
    pub fn with_rho(mut self, rho: Rho) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol_residual = tol;
        self
    }

    pub fn with_y0(mut self, y0: Primal) -> Self {
        self.y0 = Some(y0);
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_history(mut self) -> Self {
        self.record_history = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_residual.is_finite() && self.tol_residual > 0.0) {
            return config(format!("tol_residual must be positive, got {}", self.tol_residual));
        }
        if self.max_iters == 0 {
            return config("max_iters must be at least 1");
        }
        Ok(())
    }
}

/// `ρ` selected by `rho` for the given constants, validated against `(0, 2μ/L²)`.
pub fn resolve_rho(rho: Rho, c: MonotoneConstants) -> Result<f64> {
    let auto = c.mu / (c.lip * c.lip);
    let upper = 2.0 * auto;
    let value = match rho {
        Rho::Auto => auto,
        Rho::AutoScaled(s) => {
            if !(s > 0.0 && s < 2.0) {
                return config(format!("rho scale must lie in (0, 2), got {s}"));
            }
            s * auto
        }
        Rho::Fixed(r) => r,
    };
    if !(value > 0.0 && value < upper) {
        return config(format!("rho = {value} outside the admissible interval (0, {upper})"));
    }
    Ok(value)
}

/// `√(1 - 2ρμ + ρ²L²)`.
pub fn contraction_factor(rho: f64, c: MonotoneConstants) -> f64 {
    (1.0 - 2.0 * rho * c.mu + rho * rho * c.lip * c.lip).max(0.0).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    NonConverged,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub y: Primal,
    pub iters: usize,
    pub rho_used: f64,
    pub c_predicted: f64,
    /// Largest ratio of successive step norms (Picard iteration only).
    pub c_measured: Option<f64>,
    /// `‖y - T(y)‖` at the returned point.
    pub residual: f64,
    /// A-posteriori bound on `‖y - y_exact‖`.
    pub error_bound: f64,
    /// Step norms (Picard) or residuals (Newton) per iteration.
    pub history: Vec<f64>,
    pub status: Status,
    /// The tolerance was below what floating point can certify; the
    /// iteration stopped once steps reached roundoff level.
    pub roundoff_limited: bool,
    pub warnings: Vec<String>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }

    /// The report itself, or `NonConverged` carrying the final residual.
    pub fn into_converged(self, context: &'static str) -> Result<Self> {
        if self.converged() {
            Ok(self)
        } else {
            Err(Error::NonConverged {
                context,
                iters: self.iters,
                residual: self.residual,
            })
        }
    }
}

type Forward<'a> = &'a dyn Fn(&Primal) -> Result<Dual>;
type Backward<'a> = &'a dyn Fn(&Primal) -> Result<Primal>;

/// Runs the forward-backward iteration `y ← backward(y - ρ R⁻¹ forward(y))`
/// certified by `constants`.
pub fn forward_backward(
    space: &HilbertSpace,
    forward: Forward<'_>,
    backward: Backward<'_>,
    constants: MonotoneConstants,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    cfg.validate()?;
    let rho = resolve_rho(cfg.rho, constants)?;
    let c = contraction_factor(rho, constants);
    let y0 = match &cfg.y0 {
        Some(y) => {
            check_len("initial point", space.dim(), y.len())?;
            y.clone()
        }
        None => space.zeros(),
    };
    let t = |y: &Primal| -> Result<Primal> {
        let a = forward(y)?;
        backward(&y.add_scaled(-rho, &space.riesz_inv(&a)?))
    };
    let mut report = match cfg.method {
        Method::FixedPoint => picard(space, &t, y0, c, cfg)?,
        Method::Newton => newton(space, &t, backward, y0, c, cfg)?,
    };
    report.rho_used = rho;
    if let Some(m) = report.c_measured {
        if m > c + 0.05 {
            report.warnings.push(format!(
                "contraction violation: measured {m:.6} exceeds predicted {c:.6}; constants are likely wrong"
            ));
        }
    }
    if report.roundoff_limited {
        report.warnings.push(format!(
            "roundoff limited: stopped at residual {:e} above the requested tolerance",
            report.residual
        ));
    }
    Ok(report)
}

fn roundoff_floor(space: &HilbertSpace, y: &Primal) -> Result<f64> {
    Ok(ROUNDOFF_FACTOR * f64::EPSILON * (1.0 + space.norm(y)?))
}

fn blank_report(y: Primal, c: f64) -> SolveReport {
    SolveReport {
        y,
        iters: 0,
        rho_used: 0.0,
        c_predicted: c,
        c_measured: None,
        residual: f64::INFINITY,
        error_bound: f64::INFINITY,
        history: Vec::new(),
        status: Status::NonConverged,
        roundoff_limited: false,
        warnings: Vec::new(),
    }
}

fn picard(
    space: &HilbertSpace,
    t: &dyn Fn(&Primal) -> Result<Primal>,
    y0: Primal,
    c: f64,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    let tol = cfg.tol_residual;
    let threshold = if c == 0.0 { f64::INFINITY } else { tol * (1.0 - c) / c };
    let mut report = blank_report(y0.clone(), c);
    let mut y = y0;
    let mut prev_step: Option<f64> = None;
    let mut measured: Option<f64> = None;
    for k in 1..=cfg.max_iters {
        let next = t(&y)?;
        let step = space.distance(&next, &y)?;
        let scale = 1.0 + space.norm(&next)?;
        if let Some(p) = prev_step {
            if p > f64::EPSILON.sqrt() * scale {
                let r = step / p;
                measured = Some(measured.map_or(r, |m: f64| m.max(r)));
            }
        }
        if cfg.record_history {
            report.history.push(step);
        }
        y = next;
        report.iters = k;
        let done = step <= threshold;
        let floor = step <= roundoff_floor(space, &y)?;
        if done || floor {
            let ty = t(&y)?;
            let residual = space.distance(&ty, &y)?;
            report.residual = residual;
            report.error_bound = if c == 0.0 {
                residual
            } else {
                (c / (1.0 - c) * step).min(residual / (1.0 - c))
            };
            report.roundoff_limited = !done;
            report.status = Status::Converged;
            report.y = y;
            report.c_measured = measured;
            return Ok(report);
        }
        prev_step = Some(step);
    }
    let residual = space.distance(&t(&y)?, &y)?;
    report.residual = residual;
    report.error_bound = residual / (1.0 - c);
    report.y = y;
    report.c_measured = measured;
    Ok(report)
}

fn newton(
    space: &HilbertSpace,
    t: &dyn Fn(&Primal) -> Result<Primal>,
    backward: Backward<'_>,
    y0: Primal,
    c: f64,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    let n = space.dim();
    let target = cfg.tol_residual * (1.0 - c);
    let mut report = blank_report(y0.clone(), c);
    let mut y = y0;
    let mut ty = t(&y)?;
    let mut r = space.distance(&ty, &y)?;
    let mut best = (y.clone(), r);
    let mut budget = NONMONOTONE_BUDGET;
    let mut stalled = 0;
    for k in 1..=cfg.max_iters {
        report.iters = k;
        if cfg.record_history {
            report.history.push(r);
        }
        if r < best.1 {
            best = (y.clone(), r);
        }
        if r <= target {
            break;
        }
        if best.1 <= roundoff_floor(space, &best.0)? && stalled >= 2 {
            report.roundoff_limited = true;
            break;
        }
        // finite-difference Jacobian of F(y) = y - T(y)
        let f0 = &y - &ty;
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let eps = f64::EPSILON.sqrt() * y[j].abs().max(1.0);
            let mut yj = y.clone();
            yj[j] += eps;
            let fj = &yj - &t(&yj)?;
            jac.set_column(j, &((&fj.0 - &f0.0) / eps));
        }
        let mut newton_best: Option<(Primal, Primal, f64)> = None;
        if let Some(d) = jac.lu().solve(&(-&f0.0)) {
            let p = Primal(&y.0 + d);
            if p.as_slice().iter().all(|v| v.is_finite()) {
                // the resolvent image of the Newton point restores the constraints
                let pp = backward(&p)?;
                for cand in [p, pp] {
                    let tc = t(&cand)?;
                    let rc = space.distance(&tc, &cand)?;
                    if newton_best.as_ref().is_none_or(|b| rc < b.2) {
                        newton_best = Some((cand, tc, rc));
                    }
                }
            }
        }
        let picard_point = ty.clone();
        let t_picard = t(&picard_point)?;
        let r_picard = space.distance(&t_picard, &picard_point)?;
        let next = match newton_best {
            Some(nb) if nb.2 <= r_picard => nb,
            // the residual is a poor merit far from the solution; allow a
            // bounded number of uphill Newton steps
            Some(nb) if budget > 0 => {
                budget -= 1;
                nb
            }
            _ => (picard_point, t_picard, r_picard),
        };
        stalled = if next.2 > 0.5 * best.1 { stalled + 1 } else { 0 };
        (y, ty, r) = next;
    }
    if r < best.1 {
        best = (y, r);
    }
    let (y, r) = best;
    report.residual = r;
    report.error_bound = if c < 1.0 { r / (1.0 - c) } else { f64::INFINITY };
    report.status = if r <= target || report.roundoff_limited {
        Status::Converged
    } else {
        Status::NonConverged
    };
    report.y = y;
    Ok(report)
}

/// Solves `0 ∈ A(y, u) + B(y, u)`.
pub fn solve(prob: &GeProblem, u: &Param, cfg: &SolverConfig) -> Result<SolveReport> {
    let rho = resolve_rho(cfg.rho, prob.a.constants())?;
    let forward = |y: &Primal| prob.a.eval(y, u);
    let backward = |q: &Primal| prob.b.resolvent(&prob.space, rho, q, u);
    forward_backward(&prob.space, &forward, &backward, prob.a.constants(), cfg)
}

/// Solves `0 ∈ A(y, u) + ζ + B(y, u)`.
pub fn solve_perturbed(prob: &GeProblem, u: &Param, zeta: &Dual, cfg: &SolverConfig) -> Result<SolveReport> {
    check_len("perturbation", prob.space.dim(), zeta.len())?;
    let rho = resolve_rho(cfg.rho, prob.a.constants())?;
    let forward = |y: &Primal| Ok(&prob.a.eval(y, u)? + zeta);
    let backward = |q: &Primal| prob.b.resolvent(&prob.space, rho, q, u);
    forward_backward(&prob.space, &forward, &backward, prob.a.constants(), cfg)
}

/// `ρ‖ζ‖/(1 - c)`: distance between the solutions with and without `ζ`.
pub fn perturbation_bound(report: &SolveReport, zeta_norm: f64) -> f64 {
    if zeta_norm == 0.0 {
        return 0.0;
    }
    report.rho_used * zeta_norm / (1.0 - report.c_predicted)
}

/// `q*_ρ = y* - ρ R⁻¹ A(y*, u*)`.
pub fn base_point(prob: &GeProblem, y_star: &Primal, u_star: &Param, rho: f64) -> Result<Primal> {
    let a = prob.a.eval(y_star, u_star)?;
    Ok(y_star.add_scaled(-rho, &prob.space.riesz_inv(&a)?))
}

/// Verifies `ξ* = -A(y*, u*) ∈ B(y*, u*)` through `y* = J_{ρB}(q*_ρ, u*)`.
pub fn check_solution(prob: &GeProblem, y_star: &Primal, u_star: &Param, rho: f64) -> Result<Primal> {
    check_len("reference solution", prob.space.dim(), y_star.len())?;
    let q = base_point(prob, y_star, u_star, rho)?;
    let gap = prob.space.distance(&prob.b.resolvent(&prob.space, rho, &q, u_star)?, y_star)?;
    if gap > SOLUTION_CHECK_TOL * (1.0 + prob.space.norm(y_star)?) {
        return Err(Error::NotASolution(gap));
    }
    Ok(q)
}

/// `S'(u*; h)` from the linearized inclusion
/// `0 ∈ A'(y*, u*; δ, h) + DB(y*, u* | ξ*)(δ, h)`, solved by the same
/// iteration and constants as the original problem, starting from `δ = 0`.
pub fn sensitivity(
    prob: &GeProblem,
    u_star: &Param,
    y_star: &Primal,
    h: &Param,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    check_len("parameter direction", u_star.len(), h.len())?;
    let constants = prob.a.constants();
    let rho = resolve_rho(cfg.rho, constants)?;
    let q = check_solution(prob, y_star, u_star, rho)?;
    let forward = |d: &Primal| prob.a.dir_deriv(y_star, u_star, d, h);
    let backward = |k: &Primal| {
        resolvent_derivative(prob.b.as_ref(), &prob.space, rho, &q, u_star, k, h, cfg.numeric_fallback)
    };
    let mut lin = cfg.clone();
    lin.y0 = None;
    forward_backward(&prob.space, &forward, &backward, constants, &lin)?.into_converged("linearized inclusion")
}

/// Difference quotients `(S(u* + t h) - S(u*))/t` over `steps`.
pub fn fd_oracle_sensitivity(
    prob: &GeProblem,
    u_star: &Param,
    h: &Param,
    steps: &[f64],
    cfg: &SolverConfig,
) -> Result<QuotientTable> {
    check_len("parameter direction", u_star.len(), h.len())?;
    let base = solve(prob, u_star, cfg)?.into_converged("base solve")?;
    let warm = cfg.clone().with_y0(base.y.clone());
    QuotientTable::build(&prob.space, &base.y, steps, |t| {
        Ok(solve(prob, &u_star.add_scaled(t, h), &warm)?
            .into_converged("perturbed solve")?
            .y)
    })
}
