//! Operator contracts shared by the GE and QVI engines.
//!
//! `A` is single valued with strong-monotonicity / Lipschitz metadata. The
//! set-valued `B` is represented only through its resolvent family
//! `J_{ρB}(·, u)` and the directional derivative of that family. `Φ` is a
//! contraction in `y`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{check_len, config, Error, Result};
use crate::hilbert::HilbertSpace;
use crate::oracle::{sample_ball, PropertyReport};
use crate::vector::{Dual, Param, Primal};

/// Strong-monotonicity constant `mu` and Lipschitz constant `lip` of `A(·, u)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MonotoneConstants {
    pub mu: f64,
    pub lip: f64,
}

impl MonotoneConstants {
    pub fn new(mu: f64, lip: f64) -> Result<Self> {
        if !(mu.is_finite() && mu > 0.0) {
            return config(format!("strong monotonicity constant must be positive, got {mu}"));
        }
        if !(lip.is_finite() && lip > 0.0) {
            return config(format!("Lipschitz constant must be positive, got {lip}"));
        }
        if mu > lip {
            return config(format!(
                "strong monotonicity constant {mu} exceeds Lipschitz constant {lip}"
            ));
        }
        Ok(Self { mu, lip })
    }

    /// Condition number `L/mu >= 1`.
    pub fn gamma(&self) -> f64 {
        self.lip / self.mu
    }
}

/// Ball on which the operator constants are claimed to hold.
#[derive(Clone, Debug, Serialize)]
pub struct Locality {
    pub center: Primal,
    pub radius: f64,
}

/// The single-valued part `A(y, u)` with values in the dual space.
pub trait SingleValuedOp: Send + Sync {
    fn eval(&self, y: &Primal, u: &Param) -> Result<Dual>;

    /// `A'(y, u; dy, du)`, positively homogeneous in `(dy, du)`.
    fn dir_deriv(&self, y: &Primal, u: &Param, dy: &Primal, du: &Param) -> Result<Dual>;

    fn constants(&self) -> MonotoneConstants;

    fn locality(&self) -> Option<&Locality> {
        None
    }
}

/// A maximally monotone `B(·, u)` seen through its resolvents.
pub trait ResolventOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// `J_{ρB}(q, u)`: the `y` with `0 ∈ R(y - q) + ρ B(y, u)`.
    fn resolvent(&self, space: &HilbertSpace, rho: f64, q: &Primal, u: &Param) -> Result<Primal>;

    /// Directional derivative of `(q, u) ↦ J_{ρB}(q, u)` at `(q, u)` in direction `(k, h)`.
    fn resolvent_dir_deriv(
        &self,
        _space: &HilbertSpace,
        _rho: f64,
        _q: &Primal,
        _u: &Param,
        _k: &Primal,
        _h: &Param,
    ) -> Result<Primal> {
        Err(Error::MissingDerivative(self.name()))
    }

    fn has_dir_deriv(&self) -> bool {
        true
    }

    /// Distance-like measure of how far `xi ∈ B(y, u)` is from holding, when
    /// the operator offers a membership test.
    fn membership_violation(
        &self,
        _space: &HilbertSpace,
        _y: &Primal,
        _xi: &Dual,
        _u: &Param,
    ) -> Option<f64> {
        None
    }
}

/// The map `Φ(y, u)` entering `B(y - Φ(y, u), u)`.
pub trait PhiOp: Send + Sync {
    fn eval(&self, y: &Primal, u: &Param) -> Result<Primal>;

    fn dir_deriv(&self, y: &Primal, u: &Param, dy: &Primal, du: &Param) -> Result<Primal>;

    /// Lipschitz constant `L_Φ ∈ [0, 1)` of `Φ(·, u)`.
    fn lip(&self) -> f64;
}

impl<T: SingleValuedOp + ?Sized> SingleValuedOp for std::sync::Arc<T> {
    fn eval(&self, y: &Primal, u: &Param) -> Result<Dual> {
        (**self).eval(y, u)
    }
    fn dir_deriv(&self, y: &Primal, u: &Param, dy: &Primal, du: &Param) -> Result<Dual> {
        (**self).dir_deriv(y, u, dy, du)
    }
    fn constants(&self) -> MonotoneConstants {
        (**self).constants()
    }
    fn locality(&self) -> Option<&Locality> {
        (**self).locality()
    }
}

/// Exact `(μ, L)` of `y ↦ M y` from `Y` to `Y*`: the smallest eigenvalue of
/// the symmetric part and the largest singular value of `L⁻¹ M L⁻ᵀ`, where
/// `G = L Lᵀ`.
pub fn exact_constants(space: &HilbertSpace, m: &DMatrix<f64>) -> Result<(f64, f64)> {
    let n = space.dim();
    if m.nrows() != n || m.ncols() != n {
        return config(format!("operator matrix must be {n}x{n}, got {}x{}", m.nrows(), m.ncols()));
    }
    let l_inv = space
        .gram()
        .clone()
        .cholesky()
        .expect("space Gram is positive definite")
        .l()
        .try_inverse()
        .expect("triangular factor is invertible");
    let scaled = &l_inv * m * l_inv.transpose();
    let mu = ((&scaled + scaled.transpose()) * 0.5).symmetric_eigenvalues().min();
    let lip = scaled.singular_values().max();
    Ok((mu, lip))
}

/// `A(y, u) = M y + P u + c + w tanh(y)` (tanh componentwise, `w >= 0`).
#[derive(Clone, Debug)]
pub struct AffineOp {
    m: DMatrix<f64>,
    p: DMatrix<f64>,
    c: DVector<f64>,
    tanh_weight: f64,
    constants: MonotoneConstants,
}

impl AffineOp {
    /// Constants are exact for `w = 0`; otherwise `L` is enlarged by
    /// `w / λ_min(G)`, which bounds the dual norm of the tanh part.
    pub fn new(
        space: &HilbertSpace,
        m: DMatrix<f64>,
        p: DMatrix<f64>,
        c: Vec<f64>,
        tanh_weight: f64,
    ) -> Result<Self> {
        let n = space.dim();
        if p.nrows() != n {
            return config(format!("parameter matrix must have {n} rows, got {}", p.nrows()));
        }
        check_len("affine offset", n, c.len())?;
        if !(tanh_weight.is_finite() && tanh_weight >= 0.0) {
            return config(format!("tanh weight must be non-negative, got {tanh_weight}"));
        }
        let (mu, lip) = exact_constants(space, &m)?;
        if mu.is_nan() || mu <= 0.0 {
            return config(format!("affine operator is not strongly monotone (mu = {mu})"));
        }
        let gram_min = space.gram().symmetric_eigenvalues().min();
        let lip = lip + tanh_weight / gram_min;
        Ok(Self {
            m,
            p,
            c: DVector::from_vec(c),
            tanh_weight,
            constants: MonotoneConstants::new(mu, lip.max(mu))?,
        })
    }

    pub fn param_dim(&self) -> usize {
        self.p.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
}

impl SingleValuedOp for AffineOp {
    fn eval(&self, y: &Primal, u: &Param) -> Result<Dual> {
        check_len("affine operator state", self.c.len(), y.len())?;
        check_len("affine operator parameter", self.p.ncols(), u.len())?;
        let mut out = &self.m * &y.0 + &self.p * &u.0 + &self.c;
        if self.tanh_weight != 0.0 {
            out += y.0.map(f64::tanh) * self.tanh_weight;
        }
        Ok(Dual(out))
    }

    fn dir_deriv(&self, y: &Primal, _u: &Param, dy: &Primal, du: &Param) -> Result<Dual> {
        check_len("affine operator state", self.c.len(), dy.len())?;
        check_len("affine operator parameter", self.p.ncols(), du.len())?;
        let mut out = &self.m * &dy.0 + &self.p * &du.0;
        if self.tanh_weight != 0.0 {
            let sech2 = y.0.map(|v| 1.0 / v.cosh().powi(2));
            out += sech2.component_mul(&dy.0) * self.tanh_weight;
        }
        Ok(Dual(out))
    }

    fn constants(&self) -> MonotoneConstants {
        self.constants
    }
}

/// An operator with user-declared constants in place of its own.
pub struct DeclaredOp {
    pub inner: Arc<dyn SingleValuedOp>,
    pub constants: MonotoneConstants,
}

impl SingleValuedOp for DeclaredOp {
    fn eval(&self, y: &Primal, u: &Param) -> Result<Dual> {
        self.inner.eval(y, u)
    }
    fn dir_deriv(&self, y: &Primal, u: &Param, dy: &Primal, du: &Param) -> Result<Dual> {
        self.inner.dir_deriv(y, u, dy, du)
    }
    fn constants(&self) -> MonotoneConstants {
        self.constants
    }
}

/// A `Φ` with a user-declared Lipschitz constant.
pub struct DeclaredPhi {
    pub inner: Arc<dyn PhiOp>,
    pub lip: f64,
}

impl PhiOp for DeclaredPhi {
    fn eval(&self, y: &Primal, u: &Param) -> Result<Primal> {
        self.inner.eval(y, u)
    }
    fn dir_deriv(&self, y: &Primal, u: &Param, dy: &Primal, du: &Param) -> Result<Primal> {
        self.inner.dir_deriv(y, u, dy, du)
    }
    fn lip(&self) -> f64 {
        self.lip
    }
}

pub const DEFAULT_FD_STEPS: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];

/// Difference quotients of the resolvent along a sequence of steps.
#[derive(Clone, Debug, Serialize)]
pub struct NumericDerivative {
    /// Quotient at the smallest step.
    pub value: Primal,
    pub steps: Vec<f64>,
    /// `‖Q(t_i) - Q(t_{i+1})‖` for successive steps.
    pub drifts: Vec<f64>,
}

impl NumericDerivative {
    pub fn max_drift(&self) -> f64 {
        self.drifts.iter().copied().fold(0.0, f64::max)
    }

    /// Drift between the two smallest steps.
    pub fn final_drift(&self) -> f64 {
        self.drifts.last().copied().unwrap_or(0.0)
    }

    pub fn accept(self, threshold: f64) -> Result<Primal> {
        let drift = self.final_drift();
        if drift > threshold {
            Err(Error::NonConvergedDerivative { drift, threshold })
        } else {
            Ok(self.value)
        }
    }
}

pub(crate) fn validate_steps(steps: &[f64]) -> Result<()> {
    if steps.is_empty() {
        return config("difference quotient steps must be non-empty");
    }
    if steps.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return config("difference quotient steps must be positive");
    }
    if steps.windows(2).any(|w| w[1] >= w[0]) {
        return config("difference quotient steps must be strictly decreasing");
    }
    Ok(())
}

/// `(J(ρ, q + t k, u + t h) - J(ρ, q, u)) / t` for each step `t`.
#[allow(clippy::too_many_arguments)]
pub fn numeric_resolvent_deriv(
    b: &dyn ResolventOp,
    space: &HilbertSpace,
    rho: f64,
    q: &Primal,
    u: &Param,
    k: &Primal,
    h: &Param,
    steps: &[f64],
) -> Result<NumericDerivative> {
    validate_steps(steps)?;
    let base = b.resolvent(space, rho, q, u)?;
    let mut quotients = Vec::with_capacity(steps.len());
    for &t in steps {
        let moved = b.resolvent(space, rho, &q.add_scaled(t, k), &u.add_scaled(t, h))?;
        quotients.push((&moved - &base).scale(1.0 / t));
    }
    let mut drifts = Vec::with_capacity(steps.len().saturating_sub(1));
    for w in quotients.windows(2) {
        drifts.push(space.distance(&w[0], &w[1])?);
    }
    Ok(NumericDerivative {
        value: quotients.pop().expect("non-empty steps"),
        steps: steps.to_vec(),
        drifts,
    })
}

/// Drift threshold used when engines fall back to difference quotients.
pub const NUMERIC_FALLBACK_DRIFT: f64 = 1e-4;

/// Analytic resolvent derivative, or the difference-quotient fallback when
/// `numeric_fallback` is set and the operator has no closed form.
#[allow(clippy::too_many_arguments)]
pub fn resolvent_derivative(
    b: &dyn ResolventOp,
    space: &HilbertSpace,
    rho: f64,
    q: &Primal,
    u: &Param,
    k: &Primal,
    h: &Param,
    numeric_fallback: bool,
) -> Result<Primal> {
    if b.has_dir_deriv() {
        return b.resolvent_dir_deriv(space, rho, q, u, k, h);
    }
    if !numeric_fallback {
        return Err(Error::MissingDerivative(b.name()));
    }
    let scale = 1.0 + space.norm(k)? + h.norm();
    numeric_resolvent_deriv(b, space, rho, q, u, k, h, &DEFAULT_FD_STEPS)?
        .accept(NUMERIC_FALLBACK_DRIFT * scale)
}

/// Samples `trials` pairs in the coordinate ball of the given radius and
/// reports the worst violation of
/// `‖J(q₁) - J(q₂)‖² <= <J(q₁) - J(q₂), q₁ - q₂>`.
pub fn check_firm_nonexpansive<R: Rng>(
    b: &dyn ResolventOp,
    space: &HilbertSpace,
    rho: f64,
    u: &Param,
    trials: usize,
    radius: f64,
    rng: &mut R,
) -> Result<PropertyReport> {
    if trials == 0 {
        return config("firm nonexpansiveness check needs at least one trial");
    }
    let center = space.zeros();
    let mut report = PropertyReport::new("firm_nonexpansive", 1e-10);
    for _ in 0..trials {
        let q1 = sample_ball(&center, radius, rng);
        let q2 = sample_ball(&center, radius, rng);
        let dj = &b.resolvent(space, rho, &q1, u)? - &b.resolvent(space, rho, &q2, u)?;
        let dq = &q1 - &q2;
        let lhs = space.inner(&dj, &dj)?;
        let rhs = space.inner(&dj, &dq)?;
        report.record(lhs - rhs, 1.0 + lhs.abs() + rhs.abs(), || {
            [q1.as_slice(), q2.as_slice()].concat()
        });
    }
    Ok(report.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolvent::{BoxNormalCone, LinearMonotoneB, WeightedShrinkage};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn halfline() -> (HilbertSpace, BoxNormalCone) {
        let s = HilbertSpace::euclidean(1);
        let b = BoxNormalCone::new(&s, vec![0.0], vec![f64::INFINITY]).unwrap();
        (s, b)
    }

    fn p(v: f64) -> Primal {
        Primal::from_slice(&[v])
    }

    #[test]
    fn numeric_derivative_of_projection() {
        let (s, b) = halfline();
        let u = Param::zeros(0);
        let h = Param::zeros(0);
        let d = |q: f64, k: f64| {
            numeric_resolvent_deriv(&b, &s, 1.0, &p(q), &u, &p(k), &h, &DEFAULT_FD_STEPS)
                .unwrap()
        };
        let r = d(2.0, 1.0);
        assert!((r.value[0] - 1.0).abs() < 1e-10);
        assert!(r.max_drift() < 1e-9);
        assert_eq!(d(-1.0, 1.0).value[0], 0.0);
        assert_eq!(d(0.0, -1.0).value[0], 0.0);
        assert!((d(0.0, 1.0).value[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn numeric_derivative_rejects_bad_steps() {
        let (s, b) = halfline();
        let u = Param::zeros(0);
        let call = |steps: &[f64]| {
            numeric_resolvent_deriv(&b, &s, 1.0, &p(1.0), &u, &p(1.0), &u, steps)
        };
        assert!(call(&[]).is_err());
        assert!(call(&[1e-3, 1e-2]).is_err());
        assert!(call(&[1e-2, -1e-3]).is_err());
    }

    #[test]
    fn drift_threshold_signals() {
        let nd = NumericDerivative {
            value: p(1.0),
            steps: vec![1e-2, 1e-3],
            drifts: vec![0.5],
        };
        assert!(matches!(
            nd.clone().accept(0.1),
            Err(Error::NonConvergedDerivative { .. })
        ));
        assert!(nd.accept(1.0).is_ok());
    }

    struct Doubling;
    impl ResolventOp for Doubling {
        fn name(&self) -> &'static str {
            "doubling"
        }
        fn resolvent(&self, _: &HilbertSpace, _: f64, q: &Primal, _: &Param) -> Result<Primal> {
            Ok(q.scale(2.0))
        }
        fn has_dir_deriv(&self) -> bool {
            false
        }
    }

    #[test]
    fn firm_nonexpansiveness_reports() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = HilbertSpace::diagonal(&[1.0, 2.0, 0.5]).unwrap();
        let u = Param::from_slice(&[0.3, -1.0, 2.0]);

        let boxb = BoxNormalCone::new(&s, vec![-1.0, 0.0, f64::NEG_INFINITY], vec![1.0, f64::INFINITY, 0.5])
            .unwrap();
        for rho in [0.1, 1.0, 7.0] {
            let r = check_firm_nonexpansive(&boxb, &s, rho, &u, 1000, 3.0, &mut rng).unwrap();
            assert!(r.pass, "{r:?}");
        }

        let shrink = WeightedShrinkage::new(&s).unwrap();
        let r = check_firm_nonexpansive(&shrink, &s, 1.0, &u, 1000, 3.0, &mut rng).unwrap();
        assert!(r.pass);

        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, -2.0, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let lin = LinearMonotoneB::new(&s, m).unwrap();
        let r = check_firm_nonexpansive(&lin, &s, 0.7, &u, 1000, 3.0, &mut rng).unwrap();
        assert!(r.pass);

        let r = check_firm_nonexpansive(&Doubling, &s, 1.0, &u, 100, 3.0, &mut rng).unwrap();
        assert!(!r.pass);
        assert!(r.worst_violation > 0.0);
        assert!(r.witness.is_some());

        assert!(check_firm_nonexpansive(&Doubling, &s, 1.0, &u, 0, 3.0, &mut rng).is_err());
    }

    #[test]
    fn fallback_is_explicit() {
        let s = HilbertSpace::euclidean(1);
        let u = Param::zeros(0);
        let err = resolvent_derivative(&Doubling, &s, 1.0, &p(1.0), &u, &p(1.0), &u, false);
        assert!(matches!(err, Err(Error::MissingDerivative("doubling"))));
        let v = resolvent_derivative(&Doubling, &s, 1.0, &p(1.0), &u, &p(1.0), &u, true).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn constants_validation() {
        assert!(MonotoneConstants::new(0.0, 1.0).is_err());
        assert!(MonotoneConstants::new(2.0, 1.0).is_err());
        assert!(MonotoneConstants::new(1.0, f64::NAN).is_err());
        let c = MonotoneConstants::new(1.0, 4.0).unwrap();
        assert_eq!(c.gamma(), 4.0);
        assert!(MonotoneConstants::new(1.0, 1.0).is_ok());
    }
}
