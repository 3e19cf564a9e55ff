//! Independent checkers used to audit operator metadata and to validate the
//! engines: convex-analysis inequalities on sampled pairs, constant
//! estimators, a brute-force scalar prox and a symmetry audit for
//! gradient-type operators.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::hilbert::HilbertSpace;
use crate::operator::{PhiOp, SingleValuedOp};
use crate::vector::{Dual, Param, Primal};

/// Relative tolerance for inequalities that hold exactly in exact arithmetic.
pub const INEQUALITY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, Serialize)]
pub struct PropertyReport {
    pub property: String,
    pub trials: usize,
    /// Largest violation, each scaled by `1 + |lhs| + |rhs|` of its trial.
    pub worst_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Offending inputs (concatenated coordinates) of the worst trial.
    pub witness: Option<Vec<f64>>,
}

impl PropertyReport {
    pub fn new(property: &str, tolerance: f64) -> Self {
        Self {
            property: property.to_string(),
            trials: 0,
            worst_violation: f64::NEG_INFINITY,
            tolerance,
            pass: true,
            witness: None,
        }
    }

    pub fn record(&mut self, violation: f64, scale: f64, witness: impl FnOnce() -> Vec<f64>) {
        self.trials += 1;
        let v = violation / scale;
        if v > self.worst_violation || v.is_nan() {
            self.worst_violation = if v.is_nan() { f64::INFINITY } else { v };
            if self.worst_violation > self.tolerance {
                self.witness = Some(witness());
            }
        }
    }

    pub fn finish(mut self) -> Self {
        if self.trials == 0 {
            self.worst_violation = 0.0;
        }
        self.pass = self.worst_violation <= self.tolerance;
        if self.pass {
            self.witness = None;
        }
        self
    }
}

/// Uniform sample from the coordinate ball `B_radius(center)`.
pub fn sample_ball<R: Rng>(center: &Primal, radius: f64, rng: &mut R) -> Primal {
    let n = center.len();
    let dir: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / n.max(1) as f64);
    Primal::from_vec(
        center
            .as_slice()
            .iter()
            .zip(dir)
            .map(|(c, d)| c + r * d / norm)
            .collect(),
    )
}

/// Sampling region for pair-based checks.
#[derive(Clone, Debug)]
pub struct Region {
    pub center: Primal,
    pub radius: f64,
}

impl Region {
    /// `B_1(anchor)`.
    pub fn unit_ball(anchor: Primal) -> Self {
        Self {
            center: anchor,
            radius: 1.0,
        }
    }
}

pub fn sample_pairs<R: Rng>(region: &Region, trials: usize, rng: &mut R) -> Vec<(Primal, Primal)> {
    (0..trials)
        .map(|_| {
            (
                sample_ball(&region.center, region.radius, rng),
                sample_ball(&region.center, region.radius, rng),
            )
        })
        .collect()
}

fn witness(a: &Primal, b: &Primal) -> Vec<f64> {
    [a.as_slice(), b.as_slice()].concat()
}

/// `<f'(y₂) - f'(y₁), y₂ - y₁> >= (1/L) ‖f'(y₂) - f'(y₁)‖²` on every pair.
pub fn check_cocoercivity(
    space: &HilbertSpace,
    grad: &dyn Fn(&Primal) -> Result<Dual>,
    lip: f64,
    pairs: &[(Primal, Primal)],
) -> Result<PropertyReport> {
    let mut report = PropertyReport::new("cocoercive", INEQUALITY_TOL);
    for (y1, y2) in pairs {
        let dg = &grad(y2)? - &grad(y1)?;
        let lhs = space.pairing(&dg, &(y2 - y1))?;
        let rhs = space.dual_norm(&dg)?.powi(2) / lip;
        report.record(rhs - lhs, 1.0 + lhs.abs() + rhs.abs(), || witness(y1, y2));
    }
    Ok(report.finish())
}

/// `<Δf', Δy> >= μL/(μ+L) ‖Δy‖² + 1/(μ+L) ‖Δf'‖²` on every pair.
pub fn check_combined_inequality(
    space: &HilbertSpace,
    grad: &dyn Fn(&Primal) -> Result<Dual>,
    mu: f64,
    lip: f64,
    pairs: &[(Primal, Primal)],
) -> Result<PropertyReport> {
    let mut report = PropertyReport::new("combined", INEQUALITY_TOL);
    for (y1, y2) in pairs {
        let dy = y2 - y1;
        let dg = &grad(y2)? - &grad(y1)?;
        let lhs = space.pairing(&dg, &dy)?;
        let rhs = mu * lip / (mu + lip) * space.norm(&dy)?.powi(2)
            + space.dual_norm(&dg)?.powi(2) / (mu + lip);
        report.record(rhs - lhs, 1.0 + lhs.abs() + rhs.abs(), || witness(y1, y2));
    }
    Ok(report.finish())
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConstantEstimate {
    /// `min <ΔA, Δy>/‖Δy‖²` over the sampled pairs; `None` for `Φ`.
    pub mu: Option<f64>,
    /// `max ‖ΔA‖/‖Δy‖` over the sampled pairs.
    pub lip: f64,
    pub trials: usize,
}

pub fn estimate_constants(
    space: &HilbertSpace,
    op: &dyn SingleValuedOp,
    u: &Param,
    pairs: &[(Primal, Primal)],
) -> Result<ConstantEstimate> {
    let mut mu = f64::INFINITY;
    let mut lip: f64 = 0.0;
    let mut trials = 0;
    for (y1, y2) in pairs {
        let dy = y2 - y1;
        let n2 = space.norm(&dy)?.powi(2);
        if n2 == 0.0 {
            continue;
        }
        let da = &op.eval(y2, u)? - &op.eval(y1, u)?;
        mu = mu.min(space.pairing(&da, &dy)? / n2);
        lip = lip.max(space.dual_norm(&da)? / n2.sqrt());
        trials += 1;
    }
    Ok(ConstantEstimate {
        mu: Some(mu),
        lip,
        trials,
    })
}

pub fn estimate_phi_lipschitz(
    space: &HilbertSpace,
    phi: &dyn PhiOp,
    u: &Param,
    pairs: &[(Primal, Primal)],
) -> Result<ConstantEstimate> {
    let mut lip: f64 = 0.0;
    let mut trials = 0;
    for (y1, y2) in pairs {
        let n = space.distance(y2, y1)?;
        if n == 0.0 {
            continue;
        }
        let dphi = space.distance(&phi.eval(y2, u)?, &phi.eval(y1, u)?)?;
        lip = lip.max(dphi / n);
        trials += 1;
    }
    Ok(ConstantEstimate {
        mu: None,
        lip,
        trials,
    })
}

/// Audits declared constants against sampled estimates: the declared `mu`
/// must not exceed the estimate and the declared `lip` must not undercut it,
/// both up to `slack` (relative).
pub fn audit_constants(
    declared_mu: Option<f64>,
    declared_lip: f64,
    estimate: &ConstantEstimate,
    slack: f64,
) -> PropertyReport {
    let mut report = PropertyReport::new("constants", slack);
    if let (Some(mu), Some(est)) = (declared_mu, estimate.mu) {
        report.record(mu - est, est.abs().max(f64::MIN_POSITIVE), Vec::new);
    }
    report.record(
        estimate.lip - declared_lip,
        declared_lip.abs().max(f64::MIN_POSITIVE),
        Vec::new,
    );
    report.trials = estimate.trials;
    report.finish()
}

/// `|<A'(y; δ₁), δ₂> - <A'(y; δ₂), δ₁>|` at sampled points and directions;
/// the checkable shadow of `A` being a gradient.
pub fn check_derivative_symmetry<R: Rng>(
    space: &HilbertSpace,
    op: &dyn SingleValuedOp,
    u: &Param,
    region: &Region,
    trials: usize,
    rng: &mut R,
) -> Result<PropertyReport> {
    let mut report = PropertyReport::new("derivative_symmetry", 1e-8);
    let zero_h = Param::zeros(u.len());
    let origin = space.zeros();
    for _ in 0..trials {
        let y = sample_ball(&region.center, region.radius, rng);
        let d1 = sample_ball(&origin, 1.0, rng);
        let d2 = sample_ball(&origin, 1.0, rng);
        let a = space.pairing(&op.dir_deriv(&y, u, &d1, &zero_h)?, &d2)?;
        let b = space.pairing(&op.dir_deriv(&y, u, &d2, &zero_h)?, &d1)?;
        report.record((a - b).abs(), 1.0 + a.abs() + b.abs(), || {
            [y.as_slice(), d1.as_slice(), d2.as_slice()].concat()
        });
    }
    Ok(report.finish())
}

/// Minimizes a convex scalar function on `[lo, hi]`: best point on a uniform
/// grid, then ternary search on the bracketing cells.
pub fn grid_ternary_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, grid: usize) -> f64 {
    let grid = grid.max(3);
    let step = (hi - lo) / (grid - 1) as f64;
    let best = (0..grid)
        .map(|i| lo + step * i as f64)
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .expect("non-empty grid");
    let (mut a, mut b) = ((best - step).max(lo), (best + step).min(hi));
    for _ in 0..200 {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if f(m1) <= f(m2) {
            b = m2;
        } else {
            a = m1;
        }
        if b - a <= 1e-15 * (1.0 + a.abs()) {
            break;
        }
    }
    let mid = 0.5 * (a + b);
    // the kink of |·| at zero is the usual minimizer; snap to it when it wins
    if lo <= 0.0 && 0.0 <= hi && f(0.0) <= f(mid) {
        0.0
    } else {
        mid
    }
}

/// `argmin_v ½(v - q)² + ρ w |v|` by grid search on `[q - ρw - 1, q + ρw + 1]`.
pub fn brute_force_prox(q: f64, w: f64, rho: f64, grid: usize) -> f64 {
    let spread = rho * w.abs() + 1.0;
    grid_ternary_min(
        |v| 0.5 * (v - q).powi(2) + rho * w.abs() * v.abs(),
        q - spread,
        q + spread,
        grid,
    )
}

/// Difference quotients `(F(t) - F(0)) / t` of a vector-valued map along
/// decreasing steps, with drift between consecutive quotients.
#[derive(Clone, Debug, Serialize)]
pub struct QuotientTable {
    pub steps: Vec<f64>,
    pub quotients: Vec<Primal>,
    pub drifts: Vec<f64>,
}

impl QuotientTable {
    pub fn build(
        space: &HilbertSpace,
        base: &Primal,
        steps: &[f64],
        moved: impl Fn(f64) -> Result<Primal>,
    ) -> Result<Self> {
        crate::operator::validate_steps(steps)?;
        let mut quotients = Vec::with_capacity(steps.len());
        for &t in steps {
            quotients.push((&moved(t)? - base).scale(1.0 / t));
        }
        let mut drifts = Vec::new();
        for w in quotients.windows(2) {
            drifts.push(space.distance(&w[0], &w[1])?);
        }
        Ok(Self {
            steps: steps.to_vec(),
            quotients,
            drifts,
        })
    }

    pub fn smallest(&self) -> &Primal {
        self.quotients.last().expect("non-empty steps")
    }

    pub fn final_drift(&self) -> f64 {
        self.drifts.last().copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::MonotoneConstants;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Quadratic {
        q: DMatrix<f64>,
    }

    impl SingleValuedOp for Quadratic {
        fn eval(&self, y: &Primal, _u: &Param) -> Result<Dual> {
            Ok(Dual(&self.q * &y.0))
        }
        fn dir_deriv(&self, _y: &Primal, _u: &Param, dy: &Primal, _du: &Param) -> Result<Dual> {
            Ok(Dual(&self.q * &dy.0))
        }
        fn constants(&self) -> MonotoneConstants {
            let e = self.q.symmetric_eigenvalues();
            MonotoneConstants::new(e.min(), e.max()).unwrap()
        }
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let g = &b * b.transpose() + DMatrix::identity(n, n) * 0.3;
        (&g + g.transpose()) * 0.5
    }

    #[test]
    fn identity_gradient_is_exactly_cocoercive() {
        let s = HilbertSpace::euclidean(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = sample_pairs(&Region::unit_ball(s.zeros()), 1000, &mut rng);
        let grad = |y: &Primal| Ok(Dual(y.0.clone()));
        let r = check_cocoercivity(&s, &grad, 1.0, &pairs).unwrap();
        assert!(r.pass);
        assert!(r.worst_violation.abs() < 1e-15);
    }

    #[test]
    fn quadratic_cocoercivity_and_wrong_constant() {
        let s = HilbertSpace::euclidean(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_spd(4, &mut rng);
        let eig = q.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.max();
        let top = eig.eigenvalues.imax();
        let grad = |y: &Primal| Ok(Dual(&q * &y.0));
        let pairs = sample_pairs(&Region::unit_ball(s.zeros()), 1000, &mut rng);
        assert!(check_cocoercivity(&s, &grad, lmax, &pairs).unwrap().pass);

        let v = Primal(eig.eigenvectors.column(top).into_owned());
        let along_top = vec![(s.zeros(), v)];
        let r = check_cocoercivity(&s, &grad, lmax / 2.0, &along_top).unwrap();
        assert!(!r.pass && r.worst_violation > 0.0);
    }

    #[test]
    fn combined_inequality_cases() {
        let s = HilbertSpace::euclidean(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs = sample_pairs(&Region::unit_ball(s.zeros()), 1000, &mut rng);

        let alpha = 2.5;
        let scaled = |y: &Primal| Ok(Dual(&y.0 * alpha));
        let r = check_combined_inequality(&s, &scaled, alpha, alpha, &pairs).unwrap();
        assert!(r.pass && r.worst_violation.abs() < 1e-14);

        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let diag = |y: &Primal| Ok(Dual(&d * &y.0));
        let r = check_combined_inequality(&s, &diag, 1.0, 4.0, &pairs).unwrap();
        assert!(r.pass);
        // slack vanishes along extreme eigen-directions, not the middle one
        let s3 = HilbertSpace::euclidean(3);
        let d3 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 4.0]));
        let diag3 = |y: &Primal| Ok(Dual(&d3 * &y.0));
        let e1 = Primal::from_slice(&[1.0, 0.0, 0.0]);
        let e2 = Primal::from_slice(&[0.0, 1.0, 0.0]);
        let r1 = check_combined_inequality(&s3, &diag3, 1.0, 4.0, &[(s3.zeros(), e1)]).unwrap();
        let r2 = check_combined_inequality(&s3, &diag3, 1.0, 4.0, &[(s3.zeros(), e2)]).unwrap();
        assert!(r1.worst_violation.abs() < 1e-15);
        assert!(r2.worst_violation < -0.05);

        // rotation plus identity is monotone but not a gradient
        let rot = |y: &Primal| Ok(Dual::from_slice(&[y[1] + y[0], -y[0] + y[1]]));
        let r = check_combined_inequality(&s, &rot, 1.0, 2f64.sqrt(), &pairs).unwrap();
        assert!(!r.pass, "{r:?}");
    }

    #[test]
    fn constant_estimates() {
        let s = HilbertSpace::euclidean(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = sample_pairs(&Region::unit_ball(s.zeros()), 1000, &mut rng);
        let a = Quadratic {
            q: DMatrix::from_diagonal_element(3, 3, 2.0),
        };
        let e = estimate_constants(&s, &a, &Param::zeros(0), &pairs).unwrap();
        assert!((e.mu.unwrap() - 2.0).abs() < 1e-12 && (e.lip - 2.0).abs() < 1e-12);

        let q = random_spd(3, &mut rng);
        let a = Quadratic { q: q.clone() };
        let c = a.constants();
        let e = estimate_constants(&s, &a, &Param::zeros(0), &pairs).unwrap();
        // estimates approach the spectrum from inside
        assert!(e.mu.unwrap() >= c.mu - 1e-12 && e.lip <= c.lip + 1e-12);
        assert!((e.mu.unwrap() - c.mu) / c.mu < 0.05 && (c.lip - e.lip) / c.lip < 0.05);
        assert!(audit_constants(Some(c.mu), c.lip, &e, 1e-9).pass);
        assert!(!audit_constants(Some(2.0 * c.lip), c.lip, &e, 1e-9).pass);
    }

    #[test]
    fn brute_force_prox_examples() {
        assert!((brute_force_prox(2.0, 1.0, 1.0, 1001) - 1.0).abs() < 1e-6);
        assert!(brute_force_prox(0.3, 1.0, 1.0, 1001).abs() < 1e-6);
        assert!((brute_force_prox(-1.7, 0.0, 3.0, 1001) + 1.7).abs() < 1e-6);
    }

    #[test]
    fn quotient_table_of_linear_map_has_no_drift() {
        let s = HilbertSpace::euclidean(2);
        let base = Primal::from_slice(&[1.0, 2.0]);
        let dir = Primal::from_slice(&[0.5, -1.0]);
        let t = QuotientTable::build(&s, &base, &[1e-2, 1e-3, 1e-4], |t| {
            Ok(base.add_scaled(t, &dir))
        })
        .unwrap();
        assert!(t.final_drift() < 1e-10);
        assert!(s.distance(t.smallest(), &dir).unwrap() < 1e-10);
    }
}
