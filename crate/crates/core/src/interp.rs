//! Uniform tensor-product grids with multilinear interpolation.
//!
//! An axis with a single node is treated as a constant extension along that
//! coordinate, which lets tables of `t`- or `x`-independent quantities skip
//! those axes without failing hull checks.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fractional positions within this distance of a node snap onto it, so
/// queries landing on grid points reproduce stored values exactly.
pub const SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, n: usize) -> Result<Self> {
        let a = Axis { min, max, n };
        a.validate("axis")?;
        Ok(a)
    }

    /// Single-node axis.
    pub fn point(x: f64) -> Self {
        Axis { min: x, max: x, n: 1 }
    }

    /// Axis from `min` to `max` with nodes spaced as close to `step` as fits.
    pub fn with_step(min: f64, max: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::config("axis.step", "must be positive"));
        }
        let n = ((max - min) / step).round() as usize + 1;
        Axis::new(min, max, n.max(2))
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config(field, "needs at least one node"));
        }
        if !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::config(field, "bounds must be finite"));
        }
        if self.n == 1 && self.min != self.max {
            return Err(Error::config(field, "a single-node axis needs min == max"));
        }
        if self.n > 1 && !(self.max > self.min) {
            return Err(Error::config(field, "max must exceed min"));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        if self.n <= 1 {
            0.0
        } else {
            (self.max - self.min) / (self.n - 1) as f64
        }
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.max
        } else {
            self.min + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(|i| self.node(i))
    }

    /// Cell index and weight of the upper node, or `None` outside the axis.
    /// A weight of exactly 0 means the query sits on node `i`.
    pub fn locate(&self, x: f64) -> Option<(usize, f64)> {
        if self.n == 1 {
            return Some((0, 0.0));
        }
        let s = (x - self.min) / self.step();
        let last = (self.n - 1) as f64;
        if !(s >= -SNAP && s <= last + SNAP) {
            return None;
        }
        let s = s.clamp(0.0, last);
        let mut i = s.floor();
        let mut w = s - i;
        if w < SNAP {
            w = 0.0;
        } else if w > 1.0 - SNAP {
            w = 0.0;
            i += 1.0;
        }
        Some((i as usize, w))
    }

    /// Index of the node nearest to `x`, clamped to the axis.
    pub fn nearest(&self, x: f64) -> usize {
        if self.n == 1 {
            return 0;
        }
        let s = ((x - self.min) / self.step()).round();
        s.clamp(0.0, (self.n - 1) as f64) as usize
    }

    pub fn contains(&self, x: f64) -> bool {
        self.locate(x).is_some()
    }
}

/// Row-major tensor grid; the last axis varies fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorGrid {
    pub axes: Vec<Axis>,
}

impl TensorGrid {
    pub fn new(axes: Vec<Axis>) -> Self {
        TensorGrid { axes }
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rank(&self) -> usize {
        self.axes.len()
    }

    /// Multi-index of a flat index.
    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.axes.len()];
        for (k, a) in self.axes.iter().enumerate().rev() {
            idx[k] = flat % a.n;
            flat /= a.n;
        }
        idx
    }

    pub fn flatten(&self, idx: &[usize]) -> usize {
        self.axes
            .iter()
            .zip(idx)
            .fold(0, |acc, (a, &i)| acc * a.n + i)
    }

    /// Coordinates of the node with the given flat index.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.unflatten(flat)
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.node(i))
            .collect()
    }

    /// Multilinear interpolation of node values at `x`.
    /// Returns `None` when `x` leaves the hull; NaN values propagate.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> Option<f64> {
        debug_assert_eq!(x.len(), self.axes.len());
        let mut cells = [(0usize, 0.0f64); 8];
        for (k, (a, &xk)) in self.axes.iter().zip(x).enumerate() {
            cells[k] = a.locate(xk)?;
        }
        let rank = self.axes.len();
        let mut acc = 0.0;
        'corner: for corner in 0..(1usize << rank) {
            let mut w = 1.0;
            let mut flat = 0;
            for k in 0..rank {
                let (i, wk) = cells[k];
                let upper = (corner >> (rank - 1 - k)) & 1 == 1;
                let (idx, f) = if upper { (i + 1, wk) } else { (i, 1.0 - wk) };
                if f == 0.0 {
                    continue 'corner;
                }
                w *= f;
                flat = flat * self.axes[k].n + idx;
            }
            acc += w * values[flat];
        }
        Some(acc)
    }
}
