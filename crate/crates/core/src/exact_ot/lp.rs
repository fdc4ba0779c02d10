//! Dense two-phase tableau simplex for `min cᵀx s.t. Ax = b, x ≥ 0`.
//!
//! Bland's rule in both phases (lowest-index entering column, lowest-index
//! leaving basic variable among ratio ties). The returned point is a basic
//! feasible solution.

use crate::error::{Error, Result};

const RC_TOL: f64 = 1e-11;
const PIVOT_EPS: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;

pub(crate) struct DenseLp {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols` constraint matrix.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

pub(crate) fn solve(lp: &DenseLp) -> Result<Vec<f64>> {
    let (m, n) = (lp.rows, lp.cols);
    let width = n + m + 1; // originals, artificials, rhs
    let mut tab = vec![0.0; m * width];
    for r in 0..m {
        let sign = if lp.b[r] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            tab[r * width + j] = sign * lp.a[r * n + j];
        }
        tab[r * width + n + r] = 1.0;
        tab[r * width + width - 1] = sign * lp.b[r];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    let scale = lp.c.iter().fold(1.0f64, |s, c| s.max(c.abs()));
    let mut t = Tableau {
        m,
        width,
        tab,
        basis: &mut basis,
    };

    // phase I: minimize the sum of artificials
    let mut phase1 = vec![0.0; n + m];
    for v in &mut phase1[n..] {
        *v = 1.0;
    }
    t.run(&phase1, n + m, RC_TOL)?;
    let infeas: f64 = (0..m)
        .filter(|&r| t.basis[r] >= n)
        .map(|r| t.rhs(r))
        .sum();
    if infeas > FEAS_TOL {
        return Err(Error::Internal(format!(
            "LP infeasible (phase I residual {infeas:e})"
        )));
    }
    // drive zero-level artificials out where a structural column allows it
    for r in 0..m {
        if t.basis[r] < n {
            continue;
        }
        if let Some(j) = (0..n).find(|&j| t.at(r, j).abs() > PIVOT_EPS) {
            t.pivot(r, j);
        }
    }

    let mut phase2 = lp.c.clone();
    phase2.extend(std::iter::repeat_n(0.0, m));
    t.run(&phase2, n, RC_TOL * scale)?;

    let mut x = vec![0.0; n];
    for r in 0..m {
        if t.basis[r] < n {
            x[t.basis[r]] = t.rhs(r).max(0.0);
        }
    }
    Ok(x)
}

struct Tableau<'b> {
    m: usize,
    width: usize,
    tab: Vec<f64>,
    basis: &'b mut Vec<usize>,
}

impl Tableau<'_> {
    #[inline]
    fn at(&self, r: usize, j: usize) -> f64 {
        self.tab[r * self.width + j]
    }

    #[inline]
    fn rhs(&self, r: usize) -> f64 {
        self.tab[r * self.width + self.width - 1]
    }

    fn reduced_costs(&self, cost: &[f64], allowed: usize) -> Vec<f64> {
        let mut rc = cost[..allowed].to_vec();
        for r in 0..self.m {
            let cb = cost[self.basis[r]];
            if cb == 0.0 {
                continue;
            }
            let row = &self.tab[r * self.width..r * self.width + allowed];
            for (v, a) in rc.iter_mut().zip(row) {
                *v -= cb * a;
            }
        }
        rc
    }

    /// Simplex iterations over columns `0..allowed` until no reduced cost is
    /// below `-tol`.
    fn run(&mut self, cost: &[f64], allowed: usize, tol: f64) -> Result<()> {
        let max_iter = 100 * (self.m + allowed) + 1000;
        for _ in 0..max_iter {
            let rc = self.reduced_costs(cost, allowed);
            let Some(enter) = (0..allowed).find(|&j| rc[j] < -tol) else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.m {
                let a = self.at(r, enter);
                if a <= PIVOT_EPS {
                    continue;
                }
                let ratio = self.rhs(r).max(0.0) / a;
                leave = match leave {
                    None => Some((r, ratio)),
                    Some((lr, best)) => {
                        if ratio < best - 1e-12 * (1.0 + best)
                            || (ratio <= best + 1e-12 * (1.0 + best)
                                && self.basis[r] < self.basis[lr])
                        {
                            Some((r, ratio))
                        } else {
                            Some((lr, best))
                        }
                    }
                };
            }
            let Some((row, _)) = leave else {
                return Err(Error::Internal("LP unbounded".into()));
            };
            self.pivot(row, enter);
        }
        Err(Error::Internal("LP simplex iteration limit reached".into()))
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let w = self.width;
        let p = self.tab[row * w + col];
        for v in &mut self.tab[row * w..(row + 1) * w] {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.tab[row * w..(row + 1) * w].to_vec();
        for r in 0..self.m {
            if r == row {
                continue;
            }
            let f = self.tab[r * w + col];
            if f == 0.0 {
                continue;
            }
            for (v, pv) in self.tab[r * w..(r + 1) * w].iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
            self.tab[r * w + col] = 0.0;
        }
        self.basis[row] = col;
    }
}
