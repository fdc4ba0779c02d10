//! Truncated ground costs `min{d(x, y), λ}^p` and pairwise cost matrices.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::measures::{euclidean, DiscreteMeasure};

/// Ground metric on the sample space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ground {
    #[default]
    Euclidean,
}

/// Ground metric, exponent `p ≥ 1` and truncation level `λ > 0`
/// (`f64::INFINITY` disables truncation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSpec {
    ground: Ground,
    p: f64,
    lambda: f64,
}

impl CostSpec {
    pub fn new(p: f64, lambda: f64) -> Result<Self> {
        if !(p.is_finite() && p >= 1.0) {
            return Err(Error::invalid(format!("exponent p must be >= 1, got {p}")));
        }
        if lambda.is_nan() || lambda <= 0.0 {
            return Err(Error::invalid(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(CostSpec {
            ground: Ground::Euclidean,
            p,
            lambda,
        })
    }

    /// Classical (untruncated) cost `d^p`.
    pub fn untruncated(p: f64) -> Result<Self> {
        Self::new(p, f64::INFINITY)
    }

    pub fn ground(&self) -> Ground {
        self.ground
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_truncated(&self) -> bool {
        self.lambda.is_finite()
    }

    /// Same metric and exponent with a different truncation level.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.p, lambda)
    }

    /// Upper bound `λ^p` on any cost entry (infinite when untruncated).
    pub fn cost_cap(&self) -> f64 {
        self.lambda.powf(self.p)
    }

    /// Cost for a precomputed ground distance.
    #[inline]
    pub fn from_distance(&self, d: f64) -> f64 {
        let t = d.min(self.lambda);
        if self.p == 1.0 {
            t
        } else if self.p == 2.0 {
            t * t
        } else {
            t.powf(self.p)
        }
    }

    #[inline]
    pub(crate) fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.ground {
            Ground::Euclidean => self.from_distance(euclidean(x, y)),
        }
    }
}

/// `min{‖x − y‖₂, λ}^p`.
pub fn truncated_cost(x: &[f64], y: &[f64], spec: &CostSpec) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    Ok(spec.eval(x, y))
}

/// Realized pairwise cost matrix between two supports.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: Matrix,
    spec: CostSpec,
}

impl CostMatrix {
    /// Cost between explicit point lists (rows from `a`, columns from `b`).
    pub fn between<'a, 'b>(
        a: impl ExactSizeIterator<Item = &'a [f64]>,
        b: impl ExactSizeIterator<Item = &'b [f64]>,
        spec: &CostSpec,
    ) -> CostMatrix {
        let rows: Vec<&[f64]> = a.collect();
        let cols: Vec<&[f64]> = b.collect();
        let s = cols.len();
        let mut data = vec![0.0; rows.len() * s];
        // each entry is computed independently, so the split does not matter
        if rows.len() * s >= 1 << 14 {
            data.par_chunks_mut(s.max(1))
                .zip(rows.par_iter())
                .for_each(|(out, x)| {
                    for (o, y) in out.iter_mut().zip(&cols) {
                        *o = spec.eval(x, y);
                    }
                });
        } else {
            for (out, x) in data.chunks_mut(s.max(1)).zip(&rows) {
                for (o, y) in out.iter_mut().zip(&cols) {
                    *o = spec.eval(x, y);
                }
            }
        }
        CostMatrix {
            entries: Matrix::from_vec(rows.len(), s, data),
            spec: *spec,
        }
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn into_entries(self) -> Matrix {
        self.entries
    }

    pub fn spec(&self) -> &CostSpec {
        &self.spec
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries.get(i, j)
    }

    pub fn rows(&self) -> usize {
        self.entries.rows()
    }

    pub fn cols(&self) -> usize {
        self.entries.cols()
    }
}

/// Pairwise cost matrix `[c^(λ)(a_i, b_j)]^p`, shape `S_a × S_b`.
pub fn cost_matrix(a: &DiscreteMeasure, b: &DiscreteMeasure, spec: &CostSpec) -> Result<CostMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(CostMatrix::between(a.points(), b.points(), spec))
}
