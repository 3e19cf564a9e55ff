//! Quasi-generalized equations `0 ∈ A(y, u) + B(y - Φ(y, u), u)`.
//!
//! Two solution schemes are provided. The transformation approach substitutes
//! `z = y - Φ(y, u)` and solves a GE for `Ã(z, u) = A(Ψ(z, u), u)` where
//! `Ψ(·, u) = (id - Φ(·, u))⁻¹`. The iteration approach freezes the shift at
//! the previous iterate and solves a sequence of GEs with the shifted
//! resolvent `J_{ρB}(q - φ, u) + φ`. Each has a matching sensitivity scheme.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{check_len, config, Error, Result};
use crate::ge::{self, resolve_rho, GeProblem, SolveReport, SolverConfig, Status};
use crate::hilbert::HilbertSpace;
use crate::operator::{MonotoneConstants, PhiOp, ResolventOp, SingleValuedOp};
use crate::oracle::{check_derivative_symmetry, PropertyReport, Region};
use crate::vector::{Dual, Param, Primal};

const INNER_MAX_ITERS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallnessCase {
    /// `L_Φ < 1/γ_A`, any `A`.
    A,
    /// `L_Φ < 2√γ_A/(1 + γ_A)`, `A` a gradient.
    B,
    /// Case B when the potential flag is set and it applies, otherwise case A.
    Auto,
}

#[derive(Clone)]
pub struct QviProblem {
    pub space: Arc<HilbertSpace>,
    pub a: Arc<dyn SingleValuedOp>,
    pub b: Arc<dyn ResolventOp>,
    pub phi: Arc<dyn PhiOp>,
    pub case: SmallnessCase,
    /// User assertion that `A(·, u)` is the gradient of a convex function.
    pub potential: bool,
}

impl QviProblem {
    pub fn new(
        space: Arc<HilbertSpace>,
        a: Arc<dyn SingleValuedOp>,
        b: Arc<dyn ResolventOp>,
        phi: Arc<dyn PhiOp>,
    ) -> Self {
        Self {
            space,
            a,
            b,
            phi,
            case: SmallnessCase::Auto,
            potential: false,
        }
    }

    pub fn with_case(mut self, case: SmallnessCase) -> Self {
        self.case = case;
        self
    }

    pub fn with_potential(mut self, potential: bool) -> Self {
        self.potential = potential;
        self
    }

    /// The GE `0 ∈ A(y, u) + B(y - φ, u)` with the shift frozen.
    pub fn shifted_ge(&self, shift: Primal, shift_dir: Option<Primal>) -> GeProblem {
        GeProblem::new(
            self.space.clone(),
            self.a.clone(),
            Arc::new(ShiftedResolvent {
                base: self.b.clone(),
                shift,
                shift_dir,
            }),
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SmallnessReport {
    pub case: SmallnessCase,
    pub gamma_a: f64,
    pub lip_phi: f64,
    /// Bound of the applied case.
    pub bound: f64,
    pub margin: f64,
    pub bound_general: f64,
    pub bound_potential: f64,
    /// Monotonicity constant of the coupled problem.
    pub c_const: f64,
    /// Contraction factor of the frozen-shift iteration.
    pub c_tilde: f64,
}

impl SmallnessReport {
    /// Constants `(μ_Ã, L_Ã)` of the transformed operator.
    pub fn transformed_constants(&self, a: MonotoneConstants) -> Result<MonotoneConstants> {
        let l = self.lip_phi;
        let mu = self.c_const * (1.0 - self.c_tilde) / ((1.0 + l) * (1.0 + l));
        let lip = a.lip / (1.0 - l);
        MonotoneConstants::new(mu, lip.max(mu))
    }
}

pub fn smallness_bounds(gamma: f64) -> (f64, f64) {
    (1.0 / gamma, 2.0 * gamma.sqrt() / (1.0 + gamma))
}

pub fn check_smallness(prob: &QviProblem) -> Result<SmallnessReport> {
    let consts = prob.a.constants();
    let (mu, lip) = (consts.mu, consts.lip);
    let gamma = consts.gamma();
    let lip_phi = prob.phi.lip();
    if !(lip_phi.is_finite() && (0.0..1.0).contains(&lip_phi)) {
        return config(format!("lip_phi must lie in [0, 1), got {lip_phi}"));
    }
    let (bound_general, bound_potential) = smallness_bounds(gamma);
    let violated = || Error::SmallnessViolated {
        gamma,
        lip_phi,
        bound_general,
        bound_potential,
    };
    let case = match prob.case {
        SmallnessCase::A => {
            if lip_phi >= bound_general {
                return Err(violated());
            }
            SmallnessCase::A
        }
        SmallnessCase::B => {
            if lip_phi >= bound_potential {
                return Err(violated());
            }
            SmallnessCase::B
        }
        SmallnessCase::Auto => {
            if prob.potential && lip_phi < bound_potential {
                SmallnessCase::B
            } else if lip_phi < bound_general {
                SmallnessCase::A
            } else if lip_phi < bound_potential {
                SmallnessCase::B
            } else {
                return Err(violated());
            }
        }
    };
    if case == SmallnessCase::B && !prob.potential {
        return config(format!(
            "L_phi = {lip_phi} satisfies only the gradient bound {bound_potential} \
             (general bound {bound_general}); set the potential flag if A is a gradient"
        ));
    }
    let (bound, c_const, c_tilde) = match case {
        SmallnessCase::A => (bound_general, mu / 2.0, gamma * lip_phi),
        _ => (
            bound_potential,
            mu * lip / (mu + lip),
            (1.0 + gamma) * lip_phi / (2.0 * gamma.sqrt()),
        ),
    };
    Ok(SmallnessReport {
        case,
        gamma_a: gamma,
        lip_phi,
        bound,
        margin: bound - lip_phi,
        bound_general,
        bound_potential,
        c_const,
        c_tilde,
    })
}

/// Audits the potential flag by the symmetry of `A'(y, u; ·, 0)`.
pub fn audit_potential<R: Rng>(
    prob: &QviProblem,
    u: &Param,
    region: &Region,
    trials: usize,
    rng: &mut R,
) -> Result<PropertyReport> {
    check_derivative_symmetry(&prob.space, prob.a.as_ref(), u, region, trials, rng)
}

/// Fixed point of the contraction `f`, iterated to roundoff.
fn contraction_limit(
    space: &HilbertSpace,
    start: Primal,
    f: impl Fn(&Primal) -> Result<Primal>,
    context: &'static str,
) -> Result<Primal> {
    let mut x = start;
    let mut prev = f64::INFINITY;
    for _ in 0..INNER_MAX_ITERS {
        let next = f(&x)?;
        let step = space.distance(&next, &x)?;
        let scale = 1.0 + space.norm(&next)?;
        x = next;
        if step <= 64.0 * f64::EPSILON * scale || (step >= prev && step <= f64::EPSILON.sqrt() * scale) {
            return Ok(x);
        }
        prev = step;
    }
    let residual = space.distance(&f(&x)?, &x)?;
    Err(Error::NonConverged {
        context,
        iters: INNER_MAX_ITERS,
        residual,
    })
}

/// `Ψ(z, u)`: the `y` with `y - Φ(y, u) = z`.
pub fn psi(space: &HilbertSpace, phi: &dyn PhiOp, z: &Primal, u: &Param) -> Result<Primal> {
    check_len("transformed state", space.dim(), z.len())?;
    contraction_limit(space, z.clone(), |y| Ok(z + &phi.eval(y, u)?), "inner fixed point for Psi")
}

/// `Ψ'(z, u; k, h)` at `y = Ψ(z, u)`: the `δ` with `δ - Φ'(y, u; δ, h) = k`.
pub fn psi_dir_deriv(
    space: &HilbertSpace,
    phi: &dyn PhiOp,
    y: &Primal,
    u: &Param,
    k: &Primal,
    h: &Param,
) -> Result<Primal> {
    contraction_limit(
        space,
        k.clone(),
        |d| Ok(k + &phi.dir_deriv(y, u, d, h)?),
        "inner fixed point for Psi'",
    )
}

/// `Ã(z, u) = A(Ψ(z, u), u)`.
pub struct TransformedOp {
    space: Arc<HilbertSpace>,
    a: Arc<dyn SingleValuedOp>,
    phi: Arc<dyn PhiOp>,
    constants: MonotoneConstants,
}

impl TransformedOp {
    pub fn new(prob: &QviProblem, smallness: &SmallnessReport) -> Result<Self> {
        Ok(Self {
            space: prob.space.clone(),
            a: prob.a.clone(),
            phi: prob.phi.clone(),
            constants: smallness.transformed_constants(prob.a.constants())?,
        })
    }

    pub fn psi(&self, z: &Primal, u: &Param) -> Result<Primal> {
        psi(&self.space, self.phi.as_ref(), z, u)
    }
}

impl SingleValuedOp for TransformedOp {
    fn eval(&self, z: &Primal, u: &Param) -> Result<Dual> {
        self.a.eval(&self.psi(z, u)?, u)
    }

    fn dir_deriv(&self, z: &Primal, u: &Param, k: &Primal, h: &Param) -> Result<Dual> {
        let y = self.psi(z, u)?;
        let d = psi_dir_deriv(&self.space, self.phi.as_ref(), &y, u, k, h)?;
        self.a.dir_deriv(&y, u, &d, h)
    }

    fn constants(&self) -> MonotoneConstants {
        self.constants
    }
}

/// `J_{ρB}(q - φ, u) + φ`, with derivative `J'_{ρB}(q - φ, u; k - ψ, h) + ψ`.
pub struct ShiftedResolvent {
    pub base: Arc<dyn ResolventOp>,
    pub shift: Primal,
    pub shift_dir: Option<Primal>,
}

impl ResolventOp for ShiftedResolvent {
    fn name(&self) -> &'static str {
        "shifted"
    }

    fn resolvent(&self, space: &HilbertSpace, rho: f64, q: &Primal, u: &Param) -> Result<Primal> {
        Ok(&self.base.resolvent(space, rho, &(q - &self.shift), u)? + &self.shift)
    }

    fn resolvent_dir_deriv(
        &self,
        space: &HilbertSpace,
        rho: f64,
        q: &Primal,
        u: &Param,
        k: &Primal,
        h: &Param,
    ) -> Result<Primal> {
        let base_q = q - &self.shift;
        match &self.shift_dir {
            Some(psi) => Ok(&self.base.resolvent_dir_deriv(space, rho, &base_q, u, &(k - psi), h)? + psi),
            None => self.base.resolvent_dir_deriv(space, rho, &base_q, u, k, h),
        }
    }

    fn has_dir_deriv(&self) -> bool {
        self.base.has_dir_deriv()
    }

    fn membership_violation(&self, space: &HilbertSpace, y: &Primal, xi: &Dual, u: &Param) -> Option<f64> {
        self.base.membership_violation(space, &(y - &self.shift), xi, u)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TransformationReport {
    pub y: Primal,
    pub z: Primal,
    /// Report of the GE solved in `z`.
    pub ge: SolveReport,
    pub smallness: SmallnessReport,
    /// Bound on `‖y - y_exact‖` from the bound on `z`.
    pub error_bound: f64,
}

/// Solves the QVI through the transformed GE in `z = y - Φ(y, u)`.
pub fn solve_transformation(prob: &QviProblem, u: &Param, cfg: &SolverConfig) -> Result<TransformationReport> {
    let smallness = check_smallness(prob)?;
    let op = Arc::new(TransformedOp::new(prob, &smallness)?);
    let tprob = GeProblem::new(prob.space.clone(), op.clone(), prob.b.clone());
    let lip_phi = smallness.lip_phi;
    let mut inner = cfg.clone().with_tol(cfg.tol_residual * (1.0 - lip_phi));
    if let Some(y0) = &cfg.y0 {
        inner.y0 = Some(y0 - &prob.phi.eval(y0, u)?);
    }
    let report = ge::solve(&tprob, u, &inner)?;
    let y = op.psi(&report.y, u)?;
    Ok(TransformationReport {
        y,
        z: report.y.clone(),
        error_bound: report.error_bound / (1.0 - lip_phi),
        ge: report,
        smallness,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationReport {
    pub y: Primal,
    pub stages: usize,
    /// `‖y_n - y_{n-1}‖` per stage.
    pub outer_steps: Vec<f64>,
    /// `y_0, y_1, ..` when history recording is on.
    pub iterates: Vec<Primal>,
    pub rate_measured: Option<f64>,
    pub c_tilde: f64,
    pub inner_iters: usize,
    pub status: Status,
    pub warnings: Vec<String>,
}

impl IterationReport {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }

    pub fn into_converged(self, context: &'static str) -> Result<Self> {
        if self.converged() {
            Ok(self)
        } else {
            Err(Error::NonConverged {
                context,
                iters: self.stages,
                residual: self.outer_steps.last().copied().unwrap_or(f64::INFINITY),
            })
        }
    }
}

/// Outer loop shared by the solution and derivative iterations: each stage
/// maps the previous iterate to the next through `stage`, and the loop stops
/// once `‖x_n - x_{n-1}‖ <= tol (1 - c̃)/c̃`.
fn outer_loop(
    space: &HilbertSpace,
    start: Primal,
    c_tilde: f64,
    cfg: &SolverConfig,
    mut stage: impl FnMut(&Primal) -> Result<SolveReport>,
) -> Result<IterationReport> {
    let threshold = if c_tilde == 0.0 {
        f64::INFINITY
    } else {
        cfg.tol_residual * (1.0 - c_tilde) / c_tilde
    };
    let mut report = IterationReport {
        y: start.clone(),
        stages: 0,
        outer_steps: Vec::new(),
        iterates: Vec::new(),
        rate_measured: None,
        c_tilde,
        inner_iters: 0,
        status: Status::NonConverged,
        warnings: Vec::new(),
    };
    if cfg.record_history {
        report.iterates.push(start.clone());
    }
    let mut x = start;
    for n in 1..=cfg.max_iters {
        let r = stage(&x)?.into_converged("inner stage")?;
        report.inner_iters += r.iters;
        let step = space.distance(&r.y, &x)?;
        let scale = 1.0 + space.norm(&r.y)?;
        if let Some(&prev) = report.outer_steps.last() {
            if prev > f64::EPSILON.sqrt() * scale {
                let ratio = step / prev;
                report.rate_measured = Some(report.rate_measured.map_or(ratio, |m: f64| m.max(ratio)));
            }
        }
        report.outer_steps.push(step);
        if cfg.record_history {
            report.iterates.push(r.y.clone());
        }
        x = r.y;
        report.stages = n;
        // inner solves are accurate to tol/10; below that the outer steps are noise
        if step <= threshold || step <= 0.2 * cfg.tol_residual {
            report.status = Status::Converged;
            break;
        }
    }
    if let Some(m) = report.rate_measured {
        if m > c_tilde + 0.05 {
            report.warnings.push(format!(
                "outer rate {m:.6} exceeds the predicted factor {c_tilde:.6}"
            ));
        }
    }
    report.y = x;
    Ok(report)
}

fn stage_config(cfg: &SolverConfig, warm: &Primal) -> SolverConfig {
    let mut s = cfg.clone().with_tol(cfg.tol_residual / 10.0).with_y0(warm.clone());
    s.record_history = false;
    s
}

/// Solves the QVI by freezing `Φ` at the previous iterate, starting from
/// `anchor` (zero when absent).
pub fn solve_iteration(
    prob: &QviProblem,
    u: &Param,
    cfg: &SolverConfig,
    anchor: Option<&Primal>,
) -> Result<IterationReport> {
    let smallness = check_smallness(prob)?;
    let start = match anchor {
        Some(a) => {
            check_len("iteration anchor", prob.space.dim(), a.len())?;
            a.clone()
        }
        None => prob.space.zeros(),
    };
    outer_loop(&prob.space, start, smallness.c_tilde, cfg, |prev| {
        let shifted = prob.shifted_ge(prob.phi.eval(prev, u)?, None);
        ge::solve(&shifted, u, &stage_config(cfg, prev))
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BothReport {
    pub transformation: TransformationReport,
    pub iteration: IterationReport,
    pub distance: f64,
}

/// Runs both approaches; the iteration is anchored at `anchor` or zero.
pub fn solve_both(
    prob: &QviProblem,
    u: &Param,
    cfg: &SolverConfig,
    anchor: Option<&Primal>,
) -> Result<BothReport> {
    let transformation = solve_transformation(prob, u, cfg)?;
    let iteration = solve_iteration(prob, u, cfg, anchor)?;
    let distance = prob.space.distance(&transformation.y, &iteration.y)?;
    Ok(BothReport {
        transformation,
        iteration,
        distance,
    })
}

/// `2‖Φ(y*, u) - Φ(y*, u*)‖ + ‖J(q*_ρ - φ*, u) - J(q*_ρ - φ*, u*)‖ + ρ‖A(y*, u) - A(y*, u*)‖_*`.
pub fn c_rho_diagnostic(
    prob: &QviProblem,
    u: &Param,
    u_star: &Param,
    y_star: &Primal,
    rho: f64,
) -> Result<f64> {
    check_len("parameter", u_star.len(), u.len())?;
    let s = &prob.space;
    let phi_star = prob.phi.eval(y_star, u_star)?;
    let a_star = prob.a.eval(y_star, u_star)?;
    let q = &y_star.add_scaled(-rho, &s.riesz_inv(&a_star)?) - &phi_star;
    let t1 = 2.0 * s.distance(&prob.phi.eval(y_star, u)?, &phi_star)?;
    let t2 = s.distance(&prob.b.resolvent(s, rho, &q, u)?, &prob.b.resolvent(s, rho, &q, u_star)?)?;
    let t3 = rho * s.dual_norm(&(&prob.a.eval(y_star, u)? - &a_star))?;
    Ok(t1 + t2 + t3)
}

/// `c̃ⁿ/((1 - c)(1 - c̃)) · 𝒞_ρ(u)`.
pub fn apriori_bound(c: f64, c_tilde: f64, n: usize, c_rho: f64) -> f64 {
    c_tilde.powi(n as i32) / ((1.0 - c) * (1.0 - c_tilde)) * c_rho
}

/// `δ = S'(u*; h)` through the transformed problem: solves the linearized
/// GE for `k` and returns `Ψ'(z*, u*; k, h)`.
pub fn sensitivity_transformation(
    prob: &QviProblem,
    u_star: &Param,
    y_star: &Primal,
    h: &Param,
    cfg: &SolverConfig,
) -> Result<Primal> {
    check_len("reference solution", prob.space.dim(), y_star.len())?;
    let smallness = check_smallness(prob)?;
    let op = Arc::new(TransformedOp::new(prob, &smallness)?);
    let tprob = GeProblem::new(prob.space.clone(), op, prob.b.clone());
    let z_star = y_star - &prob.phi.eval(y_star, u_star)?;
    let k = ge::sensitivity(&tprob, u_star, &z_star, h, cfg)?;
    psi_dir_deriv(&prob.space, prob.phi.as_ref(), y_star, u_star, &k.y, h)
}

/// `δ = S'(u*; h)` as the limit of `δ_n`, where `δ_n` solves the linearized
/// GE with the shift direction frozen at `Φ'(y*, u*; δ_{n-1}, h)`.
pub fn sensitivity_iteration(
    prob: &QviProblem,
    u_star: &Param,
    y_star: &Primal,
    h: &Param,
    cfg: &SolverConfig,
) -> Result<IterationReport> {
    check_len("reference solution", prob.space.dim(), y_star.len())?;
    check_len("parameter direction", u_star.len(), h.len())?;
    let smallness = check_smallness(prob)?;
    let phi_star = prob.phi.eval(y_star, u_star)?;
    let rho = resolve_rho(cfg.rho, prob.a.constants())?;
    ge::check_solution(&prob.shifted_ge(phi_star.clone(), None), y_star, u_star, rho)?;
    let mut stage_cfg = cfg.clone().with_tol(cfg.tol_residual / 10.0);
    stage_cfg.record_history = false;
    outer_loop(&prob.space, prob.space.zeros(), smallness.c_tilde, cfg, |prev| {
        let psi_n = prob.phi.dir_deriv(y_star, u_star, prev, h)?;
        let lin = prob.shifted_ge(phi_star.clone(), Some(psi_n));
        ge::sensitivity(&lin, u_star, y_star, h, &stage_cfg)
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SensitivityBoth {
    pub transformation: Primal,
    pub iteration: Primal,
    pub stages: usize,
    pub distance: f64,
}

pub fn sensitivity_both(
    prob: &QviProblem,
    u_star: &Param,
    y_star: &Primal,
    h: &Param,
    cfg: &SolverConfig,
) -> Result<SensitivityBoth> {
    let transformation = sensitivity_transformation(prob, u_star, y_star, h, cfg)?;
    let it = sensitivity_iteration(prob, u_star, y_star, h, cfg)?.into_converged("sensitivity iteration")?;
    let distance = prob.space.distance(&transformation, &it.y)?;
    Ok(SensitivityBoth {
        transformation,
        iteration: it.y,
        stages: it.stages,
        distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolvent::BoxNormalCone;

    struct Shift1d;

    impl SingleValuedOp for Shift1d {
        fn eval(&self, y: &Primal, u: &Param) -> Result<Dual> {
            Ok(Dual::from_slice(&[y[0] - u[0]]))
        }
        fn dir_deriv(&self, _y: &Primal, _u: &Param, dy: &Primal, du: &Param) -> Result<Dual> {
            Ok(Dual::from_slice(&[dy[0] - du[0]]))
        }
        fn constants(&self) -> MonotoneConstants {
            MonotoneConstants::new(1.0, 1.0).unwrap()
        }
    }

    /// `½|y| + offset`.
    struct HalfAbs(f64);

    impl PhiOp for HalfAbs {
        fn eval(&self, y: &Primal, _u: &Param) -> Result<Primal> {
            Ok(Primal::from_slice(&[0.5 * y[0].abs() + self.0]))
        }
        fn dir_deriv(&self, y: &Primal, _u: &Param, dy: &Primal, _du: &Param) -> Result<Primal> {
            let s = if y[0] != 0.0 { y[0].signum() * dy[0] } else { dy[0].abs() };
            Ok(Primal::from_slice(&[0.5 * s]))
        }
        fn lip(&self) -> f64 {
            0.5
        }
    }

    struct ConstPhi(f64);

    impl PhiOp for ConstPhi {
        fn eval(&self, _y: &Primal, _u: &Param) -> Result<Primal> {
            Ok(Primal::from_slice(&[self.0]))
        }
        fn dir_deriv(&self, _y: &Primal, _u: &Param, _dy: &Primal, _du: &Param) -> Result<Primal> {
            Ok(Primal::zeros(1))
        }
        fn lip(&self) -> f64 {
            0.0
        }
    }

    fn qvi1d(phi: Arc<dyn PhiOp>) -> QviProblem {
        let s = Arc::new(HilbertSpace::euclidean(1));
        let b = BoxNormalCone::new(&s, vec![f64::NEG_INFINITY], vec![0.0]).unwrap();
        QviProblem::new(s, Arc::new(Shift1d), Arc::new(b), phi).with_case(SmallnessCase::A)
    }

    fn p(v: f64) -> Param {
        Param::from_slice(&[v])
    }

    struct Gamma(f64, f64);

    impl SingleValuedOp for Gamma {
        fn eval(&self, y: &Primal, _u: &Param) -> Result<Dual> {
            Ok(Dual(y.0.clone()))
        }
        fn dir_deriv(&self, _y: &Primal, _u: &Param, dy: &Primal, _du: &Param) -> Result<Dual> {
            Ok(Dual(dy.0.clone()))
        }
        fn constants(&self) -> MonotoneConstants {
            MonotoneConstants::new(self.0, self.1).unwrap()
        }
    }

    struct Lip(f64);

    impl PhiOp for Lip {
        fn eval(&self, y: &Primal, _u: &Param) -> Result<Primal> {
            Ok(y.scale(self.0))
        }
        fn dir_deriv(&self, _y: &Primal, _u: &Param, dy: &Primal, _du: &Param) -> Result<Primal> {
            Ok(dy.scale(self.0))
        }
        fn lip(&self) -> f64 {
            self.0
        }
    }

    fn gate(mu: f64, lip: f64, lip_phi: f64, case: SmallnessCase, potential: bool) -> Result<SmallnessReport> {
        let s = Arc::new(HilbertSpace::euclidean(1));
        let b = BoxNormalCone::unconstrained(&s).unwrap();
        let prob = QviProblem::new(s, Arc::new(Gamma(mu, lip)), Arc::new(b), Arc::new(Lip(lip_phi)))
            .with_case(case)
            .with_potential(potential);
        check_smallness(&prob)
    }

    #[test]
    fn smallness_examples() {
        let r = gate(1.0, 1.0, 0.5, SmallnessCase::A, false).unwrap();
        assert_eq!((r.bound, r.margin, r.c_const, r.c_tilde), (1.0, 0.5, 0.5, 0.5));

        let e = gate(1.0, 4.0, 0.3, SmallnessCase::A, false).unwrap_err();
        assert!(matches!(e, Error::SmallnessViolated { .. }));
        let msg = e.to_string();
        assert!(msg.contains("0.25") && msg.contains("0.8"), "{msg}");

        let r = gate(1.0, 4.0, 0.3, SmallnessCase::B, true).unwrap();
        assert!((r.bound - 0.8).abs() < 1e-15);
        assert!((r.c_tilde - 0.375).abs() < 1e-15);

        for case in [SmallnessCase::A, SmallnessCase::B] {
            assert_eq!(gate(1.0, 4.0, 0.0, case, true).unwrap().c_tilde, 0.0);
        }
    }

    #[test]
    fn case_b_needs_the_potential_flag() {
        assert!(matches!(gate(1.0, 4.0, 0.3, SmallnessCase::B, false), Err(Error::Config(_))));
        assert!(matches!(gate(1.0, 4.0, 0.3, SmallnessCase::Auto, false), Err(Error::Config(_))));
        assert_eq!(gate(1.0, 4.0, 0.3, SmallnessCase::Auto, true).unwrap().case, SmallnessCase::B);
        assert_eq!(gate(1.0, 4.0, 0.2, SmallnessCase::Auto, false).unwrap().case, SmallnessCase::A);
        assert!(matches!(
            gate(1.0, 4.0, 0.9, SmallnessCase::Auto, true),
            Err(Error::SmallnessViolated { .. })
        ));
    }

    #[test]
    fn transformation_examples() {
        let prob = qvi1d(Arc::new(HalfAbs(1.0)));
        let cfg = SolverConfig::default();
        let r = solve_transformation(&prob, &p(4.0), &cfg).unwrap();
        assert!((r.y[0] - 2.0).abs() < 1e-10, "{r:?}");
        let r = solve_transformation(&prob, &p(1.0), &cfg).unwrap();
        assert!((r.y[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_shift_matches_shifted_ge() {
        let prob = qvi1d(Arc::new(ConstPhi(0.7)));
        let cfg = SolverConfig::default();
        for u in [-1.0, 0.3, 5.0] {
            let t = solve_transformation(&prob, &p(u), &cfg).unwrap();
            let g = ge::solve(&prob.shifted_ge(Primal::from_slice(&[0.7]), None), &p(u), &cfg).unwrap();
            assert!((t.y[0] - g.y[0]).abs() < 2e-10);
            let it = solve_iteration(&prob, &p(u), &cfg, None).unwrap();
            assert_eq!(it.stages, 1);
        }
    }

    #[test]
    fn iteration_converges_at_the_predicted_rate() {
        let prob = qvi1d(Arc::new(HalfAbs(1.0)));
        let cfg = SolverConfig::default();
        let r = solve_iteration(&prob, &p(4.0), &cfg, None).unwrap();
        assert!(r.converged());
        assert!((r.y[0] - 2.0).abs() < 1e-9);
        assert!(r.rate_measured.unwrap() <= 0.5 + 1e-9);
        let both = solve_both(&prob, &p(4.0), &cfg, None).unwrap();
        assert!(both.distance <= 1e-8);
    }

    #[test]
    fn c_rho_vanishes_at_the_reference() {
        let prob = qvi1d(Arc::new(HalfAbs(1.0)));
        let y = Primal::from_slice(&[2.0]);
        assert_eq!(c_rho_diagnostic(&prob, &p(4.0), &p(4.0), &y, 1.0).unwrap(), 0.0);
        assert!((c_rho_diagnostic(&prob, &p(4.1), &p(4.0), &y, 1.0).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn qvi_sensitivities() {
        let prob = qvi1d(Arc::new(HalfAbs(1.0)));
        let cfg = SolverConfig::default();
        for (us, h, expected) in [(4.0, 1.0, 0.0), (1.0, 1.0, 1.0), (4.0, 0.0, 0.0), (1.0, -1.0, -1.0)] {
            let y = solve_transformation(&prob, &p(us), &cfg).unwrap().y;
            let both = sensitivity_both(&prob, &p(us), &y, &p(h), &cfg).unwrap();
            assert!((both.transformation[0] - expected).abs() < 1e-10, "{both:?}");
            assert!(both.distance < 1e-8);
        }
        let y = Primal::from_slice(&[2.0]);
        let it = sensitivity_iteration(&prob, &p(4.0), &y, &p(1.0), &cfg).unwrap();
        assert_eq!(it.stages, 1);
    }

    #[test]
    fn psi_inverts_id_minus_phi() {
        let s = HilbertSpace::euclidean(1);
        let phi = HalfAbs(1.0);
        for z in [-3.0, 0.0, 0.4, 2.5] {
            let y = psi(&s, &phi, &Primal::from_slice(&[z]), &p(0.0)).unwrap();
            assert!((y[0] - phi.eval(&y, &p(0.0)).unwrap()[0] - z).abs() < 1e-13 * (1.0 + y[0].abs()));
        }
    }
}
