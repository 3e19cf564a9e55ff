//! Concrete resolvents with closed-form directional derivatives.
//!
//! * [`BoxNormalCone`]: `B = N_K` for a box `K`; the resolvent is the clamp and
//!   its derivative is the projection onto the critical cone.
//! * [`WeightedShrinkage`]: `B(·, u) = ∂_y Σ d_i |u_i y_i|`; the resolvent is soft
//!   shrinkage with threshold `ρ|u_i|`.
//! * [`LinearMonotoneB`]: `B(y) = M y` with `M` monotone; the resolvent is a
//!   linear solve.
//!
//! Box and shrinkage are componentwise, which is only exact for a diagonal
//! Gram matrix, so their constructors reject anything else.

use std::sync::Mutex;

use nalgebra::{DMatrix, Dyn, LU};

type Factorization = (f64, LU<f64, Dyn, Dyn>);
use serde::Serialize;

use crate::error::{check_len, config, Result};
use crate::hilbert::HilbertSpace;
use crate::operator::ResolventOp;
use crate::vector::{Dual, Param, Primal};

/// Absolute tolerance for classifying active / kink components.
pub const TOL_ACTIVE: f64 = 1e-12;

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Status of one box component at `y* = clamp(q*)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BoundState {
    Free,
    /// Lower and upper bound coincide.
    Pinned,
    StrictLower,
    WeakLower,
    StrictUpper,
    WeakUpper,
}

#[derive(Clone, Debug)]
pub struct BoxNormalCone {
    lower: Vec<f64>,
    upper: Vec<f64>,
    tol_active: f64,
}

impl BoxNormalCone {
    pub fn new(space: &HilbertSpace, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if !space.is_diagonal() {
            return config("box normal cone requires a diagonal Gram matrix");
        }
        check_len("box lower bounds", space.dim(), lower.len())?;
        check_len("box upper bounds", space.dim(), upper.len())?;
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || *l == f64::INFINITY || *u == f64::NEG_INFINITY || l > u
            {
                return config(format!("invalid box bounds at component {i}: [{l}, {u}]"));
            }
        }
        Ok(Self {
            lower,
            upper,
            tol_active: TOL_ACTIVE,
        })
    }

    /// The whole space, i.e. `B = 0`.
    pub fn unconstrained(space: &HilbertSpace) -> Result<Self> {
        let n = space.dim();
        Self::new(space, vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    pub fn with_tol_active(mut self, tol: f64) -> Self {
        self.tol_active = tol;
        self
    }

    pub fn tol_active(&self) -> f64 {
        self.tol_active
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn project(&self, q: &Primal) -> Primal {
        Primal::from_vec(
            q.as_slice()
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(q, (l, u))| q.max(*l).min(*u))
                .collect(),
        )
    }

    /// Classifies each component of `y* = clamp(q*)` using the multiplier
    /// `ξ* = R(q* - y*)`.
    pub fn classify(&self, space: &HilbertSpace, q: &Primal) -> Result<Vec<BoundState>> {
        check_len("box classify", self.lower.len(), q.len())?;
        let y = self.project(q);
        let xi = space.riesz(&(q - &y))?;
        let tol = self.tol_active;
        Ok((0..q.len())
            .map(|i| {
                let (l, u) = (self.lower[i], self.upper[i]);
                let at_lo = (y[i] - l).abs() <= tol;
                let at_hi = (y[i] - u).abs() <= tol;
                match (at_lo, at_hi) {
                    (true, true) => BoundState::Pinned,
                    (true, false) if xi[i] < -tol => BoundState::StrictLower,
                    (true, false) => BoundState::WeakLower,
                    (false, true) if xi[i] > tol => BoundState::StrictUpper,
                    (false, true) => BoundState::WeakUpper,
                    (false, false) => BoundState::Free,
                }
            })
            .collect())
    }

    /// Projection of `k` onto the critical cone `T_K(y*) ∩ (ξ*)^⊥`.
    pub fn critical_cone_projection(
        &self,
        space: &HilbertSpace,
        q: &Primal,
        k: &Primal,
    ) -> Result<Primal> {
        check_len("box derivative direction", self.lower.len(), k.len())?;
        let states = self.classify(space, q)?;
        Ok(Primal::from_vec(
            states
                .iter()
                .zip(k.as_slice())
                .map(|(s, &k)| match s {
                    BoundState::Free => k,
                    BoundState::Pinned | BoundState::StrictLower | BoundState::StrictUpper => 0.0,
                    BoundState::WeakLower => k.max(0.0),
                    BoundState::WeakUpper => k.min(0.0),
                })
                .collect(),
        ))
    }
}

impl ResolventOp for BoxNormalCone {
    fn name(&self) -> &'static str {
        "box"
    }

    fn resolvent(&self, space: &HilbertSpace, _rho: f64, q: &Primal, _u: &Param) -> Result<Primal> {
        check_len("box resolvent", space.dim(), q.len())?;
        Ok(self.project(q))
    }

    fn resolvent_dir_deriv(
        &self,
        space: &HilbertSpace,
        _rho: f64,
        q: &Primal,
        _u: &Param,
        k: &Primal,
        _h: &Param,
    ) -> Result<Primal> {
        self.critical_cone_projection(space, q, k)
    }

    fn membership_violation(
        &self,
        space: &HilbertSpace,
        y: &Primal,
        xi: &Dual,
        _u: &Param,
    ) -> Option<f64> {
        if y.len() != space.dim() || xi.len() != space.dim() {
            return None;
        }
        let mut v = 0.0;
        for i in 0..y.len() {
            let (l, u) = (self.lower[i], self.upper[i]);
            v += (l - y[i]).max(0.0) + (y[i] - u).max(0.0);
            let at_lo = y[i] <= l;
            let at_hi = y[i] >= u;
            v += match (at_lo, at_hi) {
                (true, true) => 0.0,
                (true, false) => xi[i].max(0.0),
                (false, true) => (-xi[i]).max(0.0),
                (false, false) => xi[i].abs(),
            };
        }
        Some(v)
    }
}

/// `B(y, u) = ∂_y G(y, u)` with `G(y, u) = Σ_i d_i |u_i y_i|` and `d` the
/// diagonal of the Gram matrix (the measure weights).
#[derive(Clone, Debug)]
pub struct WeightedShrinkage {
    weights: Vec<f64>,
    tol_active: f64,
}

impl WeightedShrinkage {
    pub fn new(space: &HilbertSpace) -> Result<Self> {
        let Some(d) = space.diagonal_weights() else {
            return config("weighted shrinkage requires a diagonal Gram matrix");
        };
        Ok(Self {
            weights: d.iter().copied().collect(),
            tol_active: TOL_ACTIVE,
        })
    }

    pub fn with_tol_active(mut self, tol: f64) -> Self {
        self.tol_active = tol;
        self
    }

    fn check(&self, q: &Primal, u: &Param) -> Result<()> {
        check_len("shrinkage argument", self.weights.len(), q.len())?;
        check_len("shrinkage weights", self.weights.len(), u.len())
    }
}

/// `max(|q| - w, 0) sign(q)` with `sign(0) = 0`.
pub fn shrink(q: f64, w: f64) -> f64 {
    (q.abs() - w).max(0.0) * sign(q)
}

/// Directional derivative of `(q, u) ↦ shrink(q, ρ|u|)` in direction `(k, h)`.
pub fn shrink_dir_deriv(rho: f64, q: f64, u: f64, k: f64, h: f64, tol: f64) -> f64 {
    let w = rho * u.abs();
    let q_zero = q.abs() <= tol;
    let u_zero = u.abs() <= tol;
    if q_zero && u_zero {
        // shrink(tk, ρ|th|) = t · shrink(k, ρ|h|)
        return shrink(k, rho * h.abs());
    }
    // derivative of the threshold ρ|u| along h
    let dw = if u_zero { rho * h.abs() } else { rho * sign(u) * h };
    let gap = q.abs() - w;
    if gap.abs() <= tol * (1.0 + q.abs()) {
        let s = sign(q);
        s * (s * k - dw).max(0.0)
    } else if gap > 0.0 {
        k - sign(q) * dw
    } else {
        0.0
    }
}

impl ResolventOp for WeightedShrinkage {
    fn name(&self) -> &'static str {
        "shrink"
    }

    fn resolvent(&self, _space: &HilbertSpace, rho: f64, q: &Primal, u: &Param) -> Result<Primal> {
        self.check(q, u)?;
        Ok(Primal::from_vec(
            q.as_slice()
                .iter()
                .zip(u.as_slice())
                .map(|(q, u)| shrink(*q, rho * u.abs()))
                .collect(),
        ))
    }

    fn resolvent_dir_deriv(
        &self,
        _space: &HilbertSpace,
        rho: f64,
        q: &Primal,
        u: &Param,
        k: &Primal,
        h: &Param,
    ) -> Result<Primal> {
        self.check(q, u)?;
        self.check(k, h)?;
        Ok(Primal::from_vec(
            (0..q.len())
                .map(|i| shrink_dir_deriv(rho, q[i], u[i], k[i], h[i], self.tol_active))
                .collect(),
        ))
    }

    fn membership_violation(
        &self,
        _space: &HilbertSpace,
        y: &Primal,
        xi: &Dual,
        u: &Param,
    ) -> Option<f64> {
        if self.check(y, u).is_err() || xi.len() != y.len() {
            return None;
        }
        let mut v = 0.0;
        for i in 0..y.len() {
            let radius = self.weights[i] * u[i].abs();
            v += if y[i] != 0.0 {
                (xi[i] - radius * sign(y[i])).abs()
            } else {
                (xi[i].abs() - radius).max(0.0)
            };
        }
        Some(v)
    }
}

/// `B(y) = M y` with `yᵀ M y >= 0`; `M` maps primal to dual coordinates.
#[derive(Debug)]
pub struct LinearMonotoneB {
    matrix: DMatrix<f64>,
    gram: DMatrix<f64>,
    factors: Mutex<Vec<Factorization>>,
}

const LU_CACHE: usize = 4;

impl LinearMonotoneB {
    pub fn new(space: &HilbertSpace, matrix: DMatrix<f64>) -> Result<Self> {
        let n = space.dim();
        if matrix.nrows() != n || matrix.ncols() != n {
            return config(format!(
                "linear B must be {n}x{n}, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            ));
        }
        if matrix.iter().any(|m| !m.is_finite()) {
            return config("linear B has non-finite entries");
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let min_eig = sym.symmetric_eigenvalues().min();
        let scale = matrix.norm().max(1.0);
        if min_eig < -1e-12 * scale {
            return config(format!(
                "linear B is not monotone: symmetric part has eigenvalue {min_eig}"
            ));
        }
        Ok(Self {
            matrix,
            gram: space.gram().clone(),
            factors: Mutex::new(Vec::new()),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    fn solve(&self, rho: f64, rhs: &nalgebra::DVector<f64>) -> Result<Primal> {
        let mut cache = self.factors.lock().expect("resolvent cache poisoned");
        if let Some((_, lu)) = cache.iter().find(|(r, _)| *r == rho) {
            return lu
                .solve(rhs)
                .map(Primal)
                .ok_or_else(|| crate::Error::Config("singular resolvent system".into()));
        }
        let lu = (&self.gram + &self.matrix * rho).lu();
        let sol = lu.solve(rhs);
        if cache.len() == LU_CACHE {
            cache.remove(0);
        }
        cache.push((rho, lu));
        sol.map(Primal)
            .ok_or_else(|| crate::Error::Config("singular resolvent system G + rho M".into()))
    }
}

impl ResolventOp for LinearMonotoneB {
    fn name(&self) -> &'static str {
        "linear"
    }

    /// Solves `G (y - q) + ρ M y = 0`.
    fn resolvent(&self, space: &HilbertSpace, rho: f64, q: &Primal, _u: &Param) -> Result<Primal> {
        check_len("linear resolvent", space.dim(), q.len())?;
        self.solve(rho, &(&self.gram * &q.0))
    }

    fn resolvent_dir_deriv(
        &self,
        space: &HilbertSpace,
        rho: f64,
        _q: &Primal,
        u: &Param,
        k: &Primal,
        _h: &Param,
    ) -> Result<Primal> {
        self.resolvent(space, rho, k, u)
    }

    fn membership_violation(
        &self,
        space: &HilbertSpace,
        y: &Primal,
        xi: &Dual,
        _u: &Param,
    ) -> Option<f64> {
        let r = Dual(&xi.0 - &self.matrix * &y.0);
        space.dual_norm(&r).ok()
    }
}
