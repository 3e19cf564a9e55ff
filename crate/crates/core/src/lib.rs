//! Forward-backward solvers for parametric generalized equations
//! `0 ∈ A(y, u) + B(y, u)` and quasi-generalized equations with a state
//! dependent shift `Φ`, together with directional derivatives of the
//! solution map computed by the same fixed-point machinery.

pub mod apps;
pub mod cli;
pub mod error;
pub mod ge;
pub mod hilbert;
pub mod operator;
pub mod oracle;
pub mod qvi;
pub mod resolvent;
pub mod vector;

pub use error::{Error, Result};
pub use hilbert::{GramSpec, HilbertSpace, SpaceSpec};
pub use operator::{MonotoneConstants, PhiOp, ResolventOp, SingleValuedOp};
pub use vector::{Dual, Param, Primal};
