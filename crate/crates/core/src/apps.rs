//! Ready-made problems: sparse-weighted quadratic minimization and a 1-D
//! quasi-linear obstacle QVI discretized by finite differences.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, config, Result};
use crate::ge::GeProblem;
use crate::hilbert::HilbertSpace;
use crate::operator::{exact_constants, MonotoneConstants, PhiOp, SingleValuedOp};
use crate::qvi::{QviProblem, SmallnessCase};
use crate::resolvent::{BoxNormalCone, WeightedShrinkage};
use crate::vector::{Dual, Param, Primal};

/// `A(y, u) = Q y - b`, the gradient of `½ yᵀQy - bᵀy`.
#[derive(Clone, Debug)]
pub struct QuadraticOp {
    q: DMatrix<f64>,
    b: DVector<f64>,
    constants: MonotoneConstants,
}

impl QuadraticOp {
    /// Constants are the extreme eigenvalues of `G^{-1/2} Q G^{-1/2}`.
    pub fn new(space: &HilbertSpace, q: DMatrix<f64>, b: Vec<f64>) -> Result<Self> {
        let n = space.dim();
        if q.nrows() != n || q.ncols() != n {
            return config(format!("Q must be {n}x{n}, got {}x{}", q.nrows(), q.ncols()));
        }
        check_len("linear term b", n, b.len())?;
        if q != q.transpose() {
            return config("Q is not symmetric");
        }
        let (mu, lip) = exact_constants(space, &q)?;
        if mu <= 0.0 {
            return config(format!("Q is not positive definite (smallest eigenvalue {mu})"));
        }
        Ok(Self {
            q,
            b: DVector::from_vec(b),
            constants: MonotoneConstants::new(mu, lip.max(mu))?,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }
}

impl SingleValuedOp for QuadraticOp {
    fn eval(&self, y: &Primal, _u: &Param) -> Result<Dual> {
        check_len("quadratic operator", self.b.len(), y.len())?;
        Ok(Dual(&self.q * &y.0 - &self.b))
    }

    fn dir_deriv(&self, _y: &Primal, _u: &Param, dy: &Primal, _du: &Param) -> Result<Dual> {
        check_len("quadratic operator", self.b.len(), dy.len())?;
        Ok(Dual(&self.q * &dy.0))
    }

    fn constants(&self) -> MonotoneConstants {
        self.constants
    }
}

/// Minimize `½ yᵀQy - bᵀy + Σ dᵢ |uᵢ yᵢ|` over `y ∈ Rⁿ`, with `d` the
/// measure weights that also define the inner product.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparseSpec {
    pub weights: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl SparseSpec {
    fn q_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.weights.len();
        check_len("Q rows", n, self.q.len())?;
        for row in &self.q {
            check_len("Q columns", n, row.len())?;
        }
        Ok(DMatrix::from_fn(n, n, |i, j| self.q[i][j]))
    }

    pub fn objective(&self, y: &Primal, u: &Param) -> Result<f64> {
        let q = self.q_matrix()?;
        check_len("sparse objective state", self.b.len(), y.len())?;
        check_len("sparse objective weights", self.b.len(), u.len())?;
        let quad = 0.5 * y.0.dot(&(&q * &y.0)) - y.0.dot(&DVector::from_column_slice(&self.b));
        let reg: f64 = (0..y.len()).map(|i| self.weights[i] * (u[i] * y[i]).abs()).sum();
        Ok(quad + reg)
    }
}

pub fn build_sparse(spec: &SparseSpec) -> Result<GeProblem> {
    let space = Arc::new(HilbertSpace::diagonal(&spec.weights)?);
    let a = QuadraticOp::new(&space, spec.q_matrix()?, spec.b.clone())?;
    let b = WeightedShrinkage::new(&space)?;
    Ok(GeProblem::new(space, Arc::new(a), Arc::new(b)))
}

/// `Φ(y, u)ᵢ = α |yᵢ|_τ + offsetᵢ + (P u)ᵢ` with `|y|_τ = √(y² + τ²)`, or the
/// exact absolute value when `τ` is absent.
#[derive(Clone, Debug)]
pub struct AbsAffinePhi {
    alpha: f64,
    offset: DVector<f64>,
    tau: Option<f64>,
    param: Option<DMatrix<f64>>,
}

impl AbsAffinePhi {
    pub fn new(alpha: f64, offset: Vec<f64>, tau: Option<f64>, param: Option<DMatrix<f64>>) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return config(format!("Phi slope alpha must be non-negative, got {alpha}"));
        }
        if let Some(t) = tau {
            if !(t.is_finite() && t > 0.0) {
                return config(format!("smoothing tau must be positive, got {t}"));
            }
        }
        if let Some(p) = &param {
            check_len("Phi parameter matrix rows", offset.len(), p.nrows())?;
        }
        Ok(Self {
            alpha,
            offset: DVector::from_vec(offset),
            tau,
            param,
        })
    }

    pub fn constant(value: Vec<f64>) -> Self {
        Self::new(0.0, value, None, None).expect("zero slope is valid")
    }

    pub fn zero(n: usize) -> Self {
        Self::constant(vec![0.0; n])
    }

    pub fn smoothed(alpha: f64, offset: Vec<f64>, tau: f64) -> Result<Self> {
        Self::new(alpha, offset, Some(tau), None)
    }

    pub fn exact(alpha: f64, offset: Vec<f64>) -> Result<Self> {
        Self::new(alpha, offset, None, None)
    }

    fn abs(&self, y: f64) -> f64 {
        match self.tau {
            Some(t) => y.hypot(t),
            None => y.abs(),
        }
    }

    fn abs_deriv(&self, y: f64, dy: f64) -> f64 {
        match self.tau {
            Some(t) => y / y.hypot(t) * dy,
            None if y > 0.0 => dy,
            None if y < 0.0 => -dy,
            None => dy.abs(),
        }
    }
}

impl PhiOp for AbsAffinePhi {
    fn eval(&self, y: &Primal, u: &Param) -> Result<Primal> {
        check_len("Phi", self.offset.len(), y.len())?;
        let mut out = DVector::from_fn(y.len(), |i, _| self.alpha * self.abs(y[i]) + self.offset[i]);
        if let Some(p) = &self.param {
            check_len("Phi parameter", p.ncols(), u.len())?;
            out += p * &u.0;
        }
        Ok(Primal(out))
    }

    fn dir_deriv(&self, y: &Primal, _u: &Param, dy: &Primal, du: &Param) -> Result<Primal> {
        check_len("Phi derivative", self.offset.len(), dy.len())?;
        let mut out = DVector::from_fn(y.len(), |i, _| self.alpha * self.abs_deriv(y[i], dy[i]));
        if let Some(p) = &self.param {
            check_len("Phi parameter direction", p.ncols(), du.len())?;
            out += p * &du.0;
        }
        Ok(Primal(out))
    }

    /// `α`, valid for any diagonal Gram since the map acts componentwise.
    fn lip(&self) -> f64 {
        self.alpha
    }
}

/// Discretized `-(g(y', u))' + f(u)` on `(0, 1)` with zero boundary values,
/// `g(p, u) = p + β atan(p)/(1 + u²)` and `f(u) = u`.
#[derive(Clone, Debug)]
pub struct QuasilinearOp {
    n: usize,
    beta: f64,
    constants: MonotoneConstants,
}

impl QuasilinearOp {
    pub fn new(n: usize, beta: f64) -> Result<Self> {
        if n < 2 {
            return config(format!("quasilinear mesh needs at least 2 interior points, got {n}"));
        }
        if !(0.0..1.0).contains(&beta) {
            return config(format!("flux nonlinearity beta must lie in [0, 1), got {beta}"));
        }
        let (mu, lip) = quasilinear_constants(n, beta);
        Ok(Self {
            n,
            beta,
            constants: MonotoneConstants::new(mu, lip)?,
        })
    }

    pub fn mesh(&self) -> f64 {
        1.0 / (self.n as f64 + 1.0)
    }

    fn flux(&self, p: f64, u: f64) -> f64 {
        p + self.beta * p.atan() / (1.0 + u * u)
    }

    fn flux_dp(&self, p: f64, u: f64) -> f64 {
        1.0 + self.beta / ((1.0 + p * p) * (1.0 + u * u))
    }

    fn flux_du(&self, p: f64, u: f64) -> f64 {
        -2.0 * u * self.beta * p.atan() / (1.0 + u * u).powi(2)
    }

    /// Slope on edge `j` (between nodes `j` and `j + 1`, boundary nodes zero).
    fn slope(&self, y: &[f64], j: usize) -> f64 {
        let left = if j == 0 { 0.0 } else { y[j - 1] };
        let right = if j == self.n { 0.0 } else { y[j] };
        (right - left) / self.mesh()
    }

    /// Parameter on edge `j`: mean of the adjacent nodes, the interior
    /// neighbor at the boundary.
    fn edge_param(&self, u: &[f64], j: usize) -> f64 {
        if j == 0 {
            u[0]
        } else if j == self.n {
            u[self.n - 1]
        } else {
            0.5 * (u[j - 1] + u[j])
        }
    }

    fn check(&self, y: &Primal, u: &Param) -> Result<()> {
        check_len("quasilinear state", self.n, y.len())?;
        check_len("quasilinear parameter", self.n, u.len())
    }
}

/// `(μ, L)` of the discrete operator in the lumped-mass inner product:
/// extreme eigenvalues of the scaled Dirichlet Laplacian times `1` and `1 + β`.
pub fn quasilinear_constants(n: usize, beta: f64) -> (f64, f64) {
    let h = 1.0 / (n as f64 + 1.0);
    let arg = std::f64::consts::PI * h / 2.0;
    let mu = 4.0 / (h * h) * arg.sin().powi(2);
    let lip = (1.0 + beta) * 4.0 / (h * h) * arg.cos().powi(2);
    (mu, lip)
}

impl SingleValuedOp for QuasilinearOp {
    fn eval(&self, y: &Primal, u: &Param) -> Result<Dual> {
        self.check(y, u)?;
        let (ys, us) = (y.as_slice(), u.as_slice());
        let g: Vec<f64> = (0..=self.n)
            .map(|j| self.flux(self.slope(ys, j), self.edge_param(us, j)))
            .collect();
        let h = self.mesh();
        Ok(Dual::from_vec((0..self.n).map(|i| g[i] - g[i + 1] + h * us[i]).collect()))
    }

    fn dir_deriv(&self, y: &Primal, u: &Param, dy: &Primal, du: &Param) -> Result<Dual> {
        self.check(y, u)?;
        self.check(dy, du)?;
        let (ys, us, ds, hs) = (y.as_slice(), u.as_slice(), dy.as_slice(), du.as_slice());
        let dg: Vec<f64> = (0..=self.n)
            .map(|j| {
                let (p, ue) = (self.slope(ys, j), self.edge_param(us, j));
                self.flux_dp(p, ue) * self.slope(ds, j) + self.flux_du(p, ue) * self.edge_param(hs, j)
            })
            .collect();
        let h = self.mesh();
        Ok(Dual::from_vec((0..self.n).map(|i| dg[i] - dg[i + 1] + h * hs[i]).collect()))
    }

    fn constants(&self) -> MonotoneConstants {
        self.constants
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiKind {
    /// `α √(y² + τ²) + ψ₀`.
    Smoothed,
    /// `α |y| + ψ₀`.
    Exact,
    /// `Φ ≡ 0`.
    Zero,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuasilinearSpec {
    pub n: usize,
    pub beta: f64,
    pub alpha: f64,
    /// Upper obstacle `ψ`; `None` means no constraint.
    pub obstacle: Option<f64>,
    pub psi0: f64,
    pub tau: f64,
    pub phi: PhiKind,
}

impl Default for QuasilinearSpec {
    fn default() -> Self {
        Self {
            n: 32,
            beta: 0.5,
            alpha: 0.05,
            obstacle: Some(0.05),
            psi0: 0.0,
            tau: 1e-6,
            phi: PhiKind::Smoothed,
        }
    }
}

impl QuasilinearSpec {
    pub fn mesh(&self) -> f64 {
        1.0 / (self.n as f64 + 1.0)
    }

    pub fn space(&self) -> Result<HilbertSpace> {
        HilbertSpace::diagonal(&vec![self.mesh(); self.n])
    }

    /// Node coordinates `x_i = i h`.
    pub fn nodes(&self) -> Vec<f64> {
        (1..=self.n).map(|i| i as f64 * self.mesh()).collect()
    }

    fn phi_op(&self) -> Result<AbsAffinePhi> {
        let offset = vec![self.psi0; self.n];
        match self.phi {
            PhiKind::Smoothed => AbsAffinePhi::smoothed(self.alpha, offset, self.tau),
            PhiKind::Exact => AbsAffinePhi::exact(self.alpha, offset),
            PhiKind::Zero => Ok(AbsAffinePhi::zero(self.n)),
        }
    }

    fn obstacle_op(&self, space: &HilbertSpace) -> Result<BoxNormalCone> {
        let upper = self.obstacle.unwrap_or(f64::INFINITY);
        BoxNormalCone::new(space, vec![f64::NEG_INFINITY; self.n], vec![upper; self.n])
    }
}

/// The obstacle problem `0 ∈ A(y, u) + N_K(y)` without the `Φ` coupling.
pub fn build_quasilinear_ge(spec: &QuasilinearSpec) -> Result<GeProblem> {
    let space = Arc::new(spec.space()?);
    let a = QuasilinearOp::new(spec.n, spec.beta)?;
    let b = spec.obstacle_op(&space)?;
    Ok(GeProblem::new(space, Arc::new(a), Arc::new(b)))
}

/// The QVI `0 ∈ A(y, u) + N_K(y - Φ(y, u))`; `A` is a gradient, so the
/// gradient smallness bound applies.
pub fn build_quasilinear(spec: &QuasilinearSpec) -> Result<QviProblem> {
    let ge = build_quasilinear_ge(spec)?;
    let phi = spec.phi_op()?;
    Ok(QviProblem::new(ge.space, ge.a, ge.b, Arc::new(phi))
        .with_case(SmallnessCase::Auto)
        .with_potential(true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ge::{self, Method, SolverConfig};
    use crate::oracle::{audit_constants, estimate_constants, sample_pairs, QuotientTable, Region};
    use crate::qvi;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_sparse(b: f64) -> SparseSpec {
        SparseSpec {
            weights: vec![1.0],
            q: vec![vec![1.0]],
            b: vec![b],
        }
    }

    #[test]
    fn sparse_examples() {
        let prob = build_sparse(&scalar_sparse(2.0)).unwrap();
        let cfg = SolverConfig::default();
        let one = Param::from_slice(&[1.0]);
        let y = ge::solve(&prob, &one, &cfg).unwrap().y;
        assert!((y[0] - 1.0).abs() < 1e-12);
        let y0 = ge::solve(&prob, &Param::from_slice(&[0.0]), &cfg).unwrap().y;
        assert!((y0[0] - 2.0).abs() < 1e-12);
        let d = ge::sensitivity(&prob, &one, &y, &one, &cfg).unwrap();
        assert!((d.y[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_rejects_indefinite_q() {
        let spec = SparseSpec {
            weights: vec![1.0, 1.0],
            q: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
            b: vec![0.0, 0.0],
        };
        assert!(build_sparse(&spec).is_err());
    }

    #[test]
    fn sparse_solution_is_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let q = &m * m.transpose() + DMatrix::identity(n, n);
        let q = (&q + q.transpose()) * 0.5;
        let spec = SparseSpec {
            weights: (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
            q: (0..n).map(|i| q.row(i).iter().copied().collect()).collect(),
            b: (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        };
        let u = Param::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let prob = build_sparse(&spec).unwrap();
        let y = ge::solve(&prob, &u, &SolverConfig::default().with_tol(1e-12)).unwrap().y;
        let best = spec.objective(&y, &u).unwrap();
        for _ in 0..100 {
            let v = Primal::from_vec(y.as_slice().iter().map(|x| x + rng.random_range(-1.0..1.0)).collect());
            assert!(spec.objective(&v, &u).unwrap() >= best - 1e-12);
        }
    }

    #[test]
    fn quasilinear_constants_are_reproduced_from_inside() {
        let spec = QuasilinearSpec {
            n: 8,
            ..Default::default()
        };
        let prob = build_quasilinear_ge(&spec).unwrap();
        let c = prob.a.constants();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = Param::from_vec(vec![0.0; 8]);
        let pairs = sample_pairs(&Region::unit_ball(prob.space.zeros()), 1000, &mut rng);
        let e = estimate_constants(&prob.space, prob.a.as_ref(), &u, &pairs).unwrap();
        assert!(audit_constants(Some(c.mu), c.lip, &e, 1e-9).pass, "{e:?} vs {c:?}");
        assert!(e.mu.unwrap() >= c.mu * (1.0 - 1e-12));
    }

    #[test]
    fn quasilinear_derivative_matches_quotients() {
        let spec = QuasilinearSpec {
            n: 8,
            ..Default::default()
        };
        let op = QuasilinearOp::new(8, spec.beta).unwrap();
        let s = spec.space().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_vec = || Primal::from_vec((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (y, d) = (rand_vec(), rand_vec());
        let (u, h) = (Param(rand_vec().0), Param(rand_vec().0));
        let analytic = op.dir_deriv(&y, &u, &d, &h).unwrap();
        let base = Primal(op.eval(&y, &u).unwrap().0);
        let steps = [1e-2, 1e-3, 1e-4, 1e-5];
        let table = QuotientTable::build(&s, &base, &steps, |t| {
            Ok(Primal(op.eval(&y.add_scaled(t, &d), &u.add_scaled(t, &h)).unwrap().0))
        })
        .unwrap();
        let gaps: Vec<f64> = table
            .quotients
            .iter()
            .map(|q| s.distance(q, &Primal(analytic.0.clone())).unwrap())
            .collect();
        for (g, t) in gaps.iter().zip(steps) {
            assert!(*g <= 1e4 * t, "gap {g} at t={t}");
        }
        let zero = op
            .dir_deriv(&y, &u, &Primal::zeros(8), &Param::zeros(8))
            .unwrap();
        assert_eq!(zero.coord_norm(), 0.0);
    }

    #[test]
    fn default_qvi_passes_the_gradient_bound() {
        let prob = build_quasilinear(&QuasilinearSpec::default()).unwrap();
        let r = qvi::check_smallness(&prob).unwrap();
        assert_eq!(r.case, SmallnessCase::B);
        assert!(r.margin > 0.0 && r.c_tilde < 1.0);
        let strict = build_quasilinear(&QuasilinearSpec::default())
            .unwrap()
            .with_case(SmallnessCase::A);
        assert!(qvi::check_smallness(&strict).is_err());
    }

    #[test]
    fn mesh_refinement_moves_less() {
        let solve = |n: usize| {
            let spec = QuasilinearSpec {
                n,
                phi: PhiKind::Zero,
                obstacle: None,
                ..Default::default()
            };
            let prob = build_quasilinear_ge(&spec).unwrap();
            let u = Param::from_vec(vec![-1.0; n]);
            let cfg = SolverConfig::default().with_method(Method::Newton);
            let r = ge::solve(&prob, &u, &cfg).unwrap();
            assert!(r.converged());
            r.y
        };
        // value at x = 1/2 on nested meshes
        let mid = |y: &Primal| y[y.len() / 2];
        let (a, b, c) = (solve(7), solve(15), solve(31));
        let (d1, d2) = ((mid(&a) - mid(&b)).abs(), (mid(&b) - mid(&c)).abs());
        assert!(d2 <= d1 + 1e-12, "{d1} {d2}");
    }
}
