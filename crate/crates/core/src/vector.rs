//! Coordinate vectors tagged by the role they play: elements of the state
//! space `Y`, of its dual `Y*`, and of the parameter space `U`.
//!
//! The three types share storage (`DVector<f64>`) but are deliberately not
//! interchangeable; moving between `Primal` and `Dual` goes through the Riesz
//! map of a [`HilbertSpace`](crate::hilbert::HilbertSpace).

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use nalgebra::DVector;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

macro_rules! coord_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(pub DVector<f64>);

        impl $name {
            pub fn zeros(len: usize) -> Self {
                Self(DVector::zeros(len))
            }

            pub fn from_vec(v: Vec<f64>) -> Self {
                Self(DVector::from_vec(v))
            }

            pub fn from_slice(v: &[f64]) -> Self {
                Self(DVector::from_column_slice(v))
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                self.0.as_slice()
            }

            pub fn coords(&self) -> &DVector<f64> {
                &self.0
            }

            /// Plain Euclidean norm of the coordinate array.
            pub fn coord_norm(&self) -> f64 {
                self.0.norm()
            }

            /// `self + s * other`
            pub fn add_scaled(&self, s: f64, other: &Self) -> Self {
                Self(&self.0 + &other.0 * s)
            }

            pub fn scale(&self, s: f64) -> Self {
                Self(&self.0 * s)
            }
        }

        impl From<DVector<f64>> for $name {
            fn from(v: DVector<f64>) -> Self {
                Self(v)
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self::from_vec(v)
            }
        }

        impl Add for $name {
            type Output = $name;
            fn add(self, rhs: $name) -> $name {
                $name(self.0 + rhs.0)
            }
        }

        impl<'a> Add<&'a $name> for &'a $name {
            type Output = $name;
            fn add(self, rhs: &'a $name) -> $name {
                $name(&self.0 + &rhs.0)
            }
        }

        impl Sub for $name {
            type Output = $name;
            fn sub(self, rhs: $name) -> $name {
                $name(self.0 - rhs.0)
            }
        }

        impl<'a> Sub<&'a $name> for &'a $name {
            type Output = $name;
            fn sub(self, rhs: &'a $name) -> $name {
                $name(&self.0 - &rhs.0)
            }
        }

        impl AddAssign<&$name> for $name {
            fn add_assign(&mut self, rhs: &$name) {
                self.0 += &rhs.0;
            }
        }

        impl SubAssign<&$name> for $name {
            fn sub_assign(&mut self, rhs: &$name) {
                self.0 -= &rhs.0;
            }
        }

        impl Neg for $name {
            type Output = $name;
            fn neg(self) -> $name {
                $name(-self.0)
            }
        }

        impl Neg for &$name {
            type Output = $name;
            fn neg(self) -> $name {
                $name(-&self.0)
            }
        }

        impl Mul<f64> for $name {
            type Output = $name;
            fn mul(self, s: f64) -> $name {
                $name(self.0 * s)
            }
        }

        impl Mul<f64> for &$name {
            type Output = $name;
            fn mul(self, s: f64) -> $name {
                $name(&self.0 * s)
            }
        }

        impl Index<usize> for $name {
            type Output = f64;
            fn index(&self, i: usize) -> &f64 {
                &self.0[i]
            }
        }

        impl IndexMut<usize> for $name {
            fn index_mut(&mut self, i: usize) -> &mut f64 {
                &mut self.0[i]
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                self.0.as_slice().serialize(serializer)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                Vec::<f64>::deserialize(deserializer).map(Self::from_vec)
            }
        }
    };
}

coord_vector!(
    /// Element of the state space `Y`.
    Primal
);
coord_vector!(
    /// Element of the dual space `Y*`; pairs with a [`Primal`] by the plain
    /// dot product of coordinates.
    Dual
);
coord_vector!(
    /// Element of the parameter space `U = R^m`, normed by the Euclidean norm.
    Param
);

impl Dual {
    /// Duality pairing `<self, v>`.
    pub fn pair(&self, v: &Primal) -> f64 {
        self.0.dot(&v.0)
    }
}

impl Param {
    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}
