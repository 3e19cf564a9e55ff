//! Finite-dimensional real Hilbert spaces given by a Gram matrix.
//!
//! The inner product is `<x, y> = xᵀ G y`. Dual vectors are stored so that the
//! duality pairing is the raw dot product, hence the Riesz map multiplies by
//! `G` and its inverse solves with `G`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, config, Result};
use crate::vector::{Dual, Primal};

/// Gram matrix description as it appears in problem configs:
/// `"identity"`, `{"diag": [..]}` or `{"dense": [[..], ..]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GramSpec {
    Identity,
    Diag(Vec<f64>),
    Dense(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub dim: usize,
    pub gram: GramSpec,
}

#[derive(Clone, Debug)]
pub struct HilbertSpace {
    dim: usize,
    gram: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// Diagonal of `G` when `G` is diagonal; gates the componentwise resolvents.
    diagonal: Option<DVector<f64>>,
}

impl HilbertSpace {
    pub fn euclidean(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim]).expect("identity Gram is positive definite")
    }

    pub fn diagonal(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return config("space dimension must be positive");
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return config(format!("diagonal Gram entries must be positive and finite, got {w}"));
        }
        let d = DVector::from_column_slice(weights);
        let gram = DMatrix::from_diagonal(&d);
        let chol = Cholesky::new(gram.clone()).expect("positive diagonal");
        Ok(Self {
            dim: weights.len(),
            gram,
            chol,
            diagonal: Some(d),
        })
    }

    pub fn dense(gram: DMatrix<f64>) -> Result<Self> {
        let dim = gram.nrows();
        if dim == 0 || gram.ncols() != dim {
            return config(format!(
                "Gram matrix must be square and non-empty, got {}x{}",
                gram.nrows(),
                gram.ncols()
            ));
        }
        if gram.iter().any(|g| !g.is_finite()) {
            return config("Gram matrix has non-finite entries");
        }
        if gram != gram.transpose() {
            return config("Gram matrix is not symmetric");
        }
        let Some(chol) = Cholesky::new(gram.clone()) else {
            return config("Gram matrix is not positive definite");
        };
        let is_diag = (0..dim).all(|i| (0..dim).all(|j| i == j || gram[(i, j)] == 0.0));
        let diagonal = is_diag.then(|| gram.diagonal());
        Ok(Self {
            dim,
            gram,
            chol,
            diagonal,
        })
    }

    pub fn from_spec(spec: &SpaceSpec) -> Result<Self> {
        match &spec.gram {
            GramSpec::Identity => {
                if spec.dim == 0 {
                    return config("space dimension must be positive");
                }
                Ok(Self::euclidean(spec.dim))
            }
            GramSpec::Diag(d) => {
                check_len("diagonal Gram", spec.dim, d.len())?;
                Self::diagonal(d)
            }
            GramSpec::Dense(rows) => {
                check_len("dense Gram rows", spec.dim, rows.len())?;
                for row in rows {
                    check_len("dense Gram columns", spec.dim, row.len())?;
                }
                let g = DMatrix::from_fn(spec.dim, spec.dim, |i, j| rows[i][j]);
                Self::dense(g)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal.is_some()
    }

    pub fn diagonal_weights(&self) -> Option<&DVector<f64>> {
        self.diagonal.as_ref()
    }

    fn check(&self, context: &'static str, len: usize) -> Result<()> {
        check_len(context, self.dim, len)
    }

    pub fn inner(&self, x: &Primal, y: &Primal) -> Result<f64> {
        self.check("inner product", x.len())?;
        self.check("inner product", y.len())?;
        Ok(match &self.diagonal {
            Some(d) => d
                .iter()
                .zip(x.0.iter().zip(y.0.iter()))
                .map(|(d, (a, b))| d * a * b)
                .sum(),
            None => x.0.dot(&(&self.gram * &y.0)),
        })
    }

    pub fn norm(&self, x: &Primal) -> Result<f64> {
        Ok(self.inner(x, x)?.max(0.0).sqrt())
    }

    pub fn distance(&self, x: &Primal, y: &Primal) -> Result<f64> {
        self.check("distance", x.len())?;
        self.norm(&(x - y))
    }

    pub fn riesz(&self, x: &Primal) -> Result<Dual> {
        self.check("Riesz map", x.len())?;
        Ok(match &self.diagonal {
            Some(d) => Dual(d.component_mul(&x.0)),
            None => Dual(&self.gram * &x.0),
        })
    }

    pub fn riesz_inv(&self, mu: &Dual) -> Result<Primal> {
        self.check("inverse Riesz map", mu.len())?;
        Ok(match &self.diagonal {
            Some(d) => Primal(mu.0.component_div(d)),
            None => Primal(self.chol.solve(&mu.0)),
        })
    }

    /// `sqrt(μᵀ G⁻¹ μ)`, the norm of `Y*`.
    pub fn dual_norm(&self, mu: &Dual) -> Result<f64> {
        let x = self.riesz_inv(mu)?;
        Ok(mu.0.dot(&x.0).max(0.0).sqrt())
    }

    pub fn pairing(&self, mu: &Dual, v: &Primal) -> Result<f64> {
        self.check("duality pairing", mu.len())?;
        self.check("duality pairing", v.len())?;
        Ok(mu.pair(v))
    }

    pub fn zeros(&self) -> Primal {
        Primal::zeros(self.dim)
    }
}
