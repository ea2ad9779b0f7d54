//! Fixed-size vectors for points, controls and velocities in one or two
//! space dimensions. One-dimensional values keep their second component at 0.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vector(pub [f64; MAX_DIM]);

impl Vector {
    pub const ZERO: Vector = Vector([0.0; MAX_DIM]);

    pub fn new1(x: f64) -> Self {
        Vector([x, 0.0])
    }

    pub fn new2(x: f64, y: f64) -> Self {
        Vector([x, y])
    }

    /// Builds a vector from a slice of length 1 or 2.
    pub fn from_slice(s: &[f64]) -> Option<Self> {
        match s {
            [x] => Some(Self::new1(*x)),
            [x, y] => Some(Self::new2(*x, *y)),
            _ => None,
        }
    }

    /// Unit vector along `axis`.
    pub fn axis(axis: usize) -> Self {
        let mut v = Self::ZERO;
        v.0[axis] = 1.0;
        v
    }

    pub fn dot(self, o: Vector) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1]
    }

    pub fn norm(self) -> f64 {
        self.0[0].hypot(self.0[1])
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn is_finite(self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Self {
        Vector([f(self.0[0]), f(self.0[1])])
    }

    /// The first `dim` components.
    pub fn components(&self, dim: usize) -> &[f64] {
        &self.0[..dim]
    }

    /// Distance in the sup norm.
    pub fn max_abs_diff(self, o: Vector) -> f64 {
        (self.0[0] - o.0[0]).abs().max((self.0[1] - o.0[1]).abs())
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Add for Vector {
    type Output = Vector;
    fn add(self, o: Vector) -> Vector {
        Vector([self.0[0] + o.0[0], self.0[1] + o.0[1]])
    }
}

impl AddAssign for Vector {
    fn add_assign(&mut self, o: Vector) {
        self.0[0] += o.0[0];
        self.0[1] += o.0[1];
    }
}

impl Sub for Vector {
    type Output = Vector;
    fn sub(self, o: Vector) -> Vector {
        Vector([self.0[0] - o.0[0], self.0[1] - o.0[1]])
    }
}

impl Neg for Vector {
    type Output = Vector;
    fn neg(self) -> Vector {
        Vector([-self.0[0], -self.0[1]])
    }
}

impl Mul<f64> for Vector {
    type Output = Vector;
    fn mul(self, s: f64) -> Vector {
        Vector([self.0[0] * s, self.0[1] * s])
    }
}

impl Mul<Vector> for f64 {
    type Output = Vector;
    fn mul(self, v: Vector) -> Vector {
        v * self
    }
}

// Serialized as a list of one or two numbers; a trailing zero second
// component is dropped so one-dimensional data round-trips as `[x]`.
impl Serialize for Vector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0[1] == 0.0 {
            [self.0[0]].serialize(s)
        } else {
            self.0.serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for Vector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<f64>::deserialize(d)?;
        Vector::from_slice(&raw)
            .ok_or_else(|| serde::de::Error::custom("expected a list of 1 or 2 numbers"))
    }
}
