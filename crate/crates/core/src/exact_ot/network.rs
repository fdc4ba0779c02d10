//! Transportation simplex on the complete bipartite graph `rows × cols`.
//!
//! The basis is a spanning tree with exactly `R + S − 1` (possibly
//! degenerate) cells. Pricing is Dantzig's rule with lowest-index ties; after
//! a run of degenerate pivots pricing switches to Bland's rule until a pivot
//! moves flow again, which rules out cycling.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Reduced-cost tolerance, relative to the largest cost magnitude.
pub(crate) const PIVOT_TOL: f64 = 1e-11;

const DEGENERATE_STREAK: usize = 50;

pub(crate) fn solve_transport(a: &[f64], b: &[f64], cost: &Matrix) -> Result<Matrix> {
    let (r, s) = (a.len(), b.len());
    debug_assert_eq!((cost.rows(), cost.cols()), (r, s));
    if r == 0 || s == 0 {
        return Err(Error::Internal("empty marginal".into()));
    }
    let mut solver = Tableau::initial(a, b, cost);
    solver.optimize()?;
    Ok(Matrix::from_vec(r, s, solver.flow))
}

struct Tableau<'c> {
    r: usize,
    s: usize,
    cost: &'c Matrix,
    flow: Vec<f64>,
    basic: Vec<bool>,
    // basic cells incident to each node; rows are 0..r, cols are r..r+s
    adj: Vec<Vec<usize>>,
    tol: f64,
}

impl<'c> Tableau<'c> {
    /// Least-cost greedy start: scan cells by increasing cost, saturate
    /// the smaller of supply/demand and cross out exactly one line.
    fn initial(a: &[f64], b: &[f64], cost: &'c Matrix) -> Self {
        let (r, s) = (a.len(), b.len());
        let mut order: Vec<usize> = (0..r * s).collect();
        order.sort_by(|&x, &y| {
            cost.as_slice()[x]
                .total_cmp(&cost.as_slice()[y])
                .then(x.cmp(&y))
        });
        let mut supply = a.to_vec();
        let mut demand = b.to_vec();
        let mut row_open = vec![true; r];
        let mut col_open = vec![true; s];
        let (mut rows_left, mut cols_left) = (r, s);
        let mut flow = vec![0.0; r * s];
        let mut basic = vec![false; r * s];
        let mut adj = vec![Vec::new(); r + s];
        let mut count = 0;
        for cell in order {
            if count == r + s - 1 {
                break;
            }
            let (i, j) = (cell / s, cell % s);
            if !row_open[i] || !col_open[j] {
                continue;
            }
            let q = supply[i].min(demand[j]).max(0.0);
            flow[cell] = q;
            basic[cell] = true;
            adj[i].push(cell);
            adj[r + j].push(cell);
            count += 1;
            let prefer_row = supply[i] <= demand[j];
            if rows_left > 1 && (prefer_row || cols_left == 1) {
                row_open[i] = false;
                rows_left -= 1;
                demand[j] -= q;
                supply[i] = 0.0;
            } else if cols_left > 1 {
                col_open[j] = false;
                cols_left -= 1;
                supply[i] -= q;
                demand[j] = 0.0;
            }
        }
        let cmax = cost
            .as_slice()
            .iter()
            .fold(0.0f64, |m, c| m.max(c.abs()));
        Tableau {
            r,
            s,
            cost,
            flow,
            basic,
            adj,
            tol: PIVOT_TOL * cmax.max(1.0),
        }
    }

    fn optimize(&mut self) -> Result<()> {
        let nodes = self.r + self.s;
        let mut pot = vec![0.0; nodes];
        let mut parent = vec![usize::MAX; nodes]; // cell linking a node to its parent
        let mut depth = vec![0usize; nodes];
        let mut streak = 0usize;
        let max_pivots = 50 * self.r * self.s + 10_000;
        for _ in 0..max_pivots {
            self.potentials(&mut pot, &mut parent, &mut depth)?;
            let Some(enter) = self.price(&pot, streak >= DEGENERATE_STREAK) else {
                return Ok(());
            };
            let theta = self.pivot(enter, &parent, &depth);
            if theta > 0.0 {
                streak = 0;
            } else {
                streak += 1;
            }
        }
        Err(Error::Internal("transport simplex pivot limit reached".into()))
    }

    /// Solves `u_i + v_j = c_ij` on the basis tree rooted at row 0.
    fn potentials(&self, pot: &mut [f64], parent: &mut [usize], depth: &mut [usize]) -> Result<()> {
        let nodes = self.r + self.s;
        let mut seen = vec![false; nodes];
        let mut queue = VecDeque::with_capacity(nodes);
        pot[0] = 0.0;
        parent[0] = usize::MAX;
        depth[0] = 0;
        seen[0] = true;
        queue.push_back(0);
        let mut visited = 1;
        while let Some(node) = queue.pop_front() {
            for &cell in &self.adj[node] {
                let (i, j) = (cell / self.s, cell % self.s);
                let other = if node == i { self.r + j } else { i };
                if seen[other] {
                    continue;
                }
                seen[other] = true;
                visited += 1;
                // u_i + v_j = c_ij, where v_j lives at node r + j
                pot[other] = self.cost.as_slice()[cell] - pot[node];
                parent[other] = cell;
                depth[other] = depth[node] + 1;
                queue.push_back(other);
            }
        }
        if visited != nodes {
            return Err(Error::Internal("transport basis is not a spanning tree".into()));
        }
        Ok(())
    }

    fn price(&self, pot: &[f64], bland: bool) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.r {
            let ui = pot[i];
            let row = self.cost.row(i);
            for (j, &c) in row.iter().enumerate() {
                let cell = i * self.s + j;
                if self.basic[cell] {
                    continue;
                }
                let rc = c - ui - pot[self.r + j];
                if rc < -self.tol {
                    if bland {
                        return Some(cell);
                    }
                    if best.is_none_or(|(_, b)| rc < b) {
                        best = Some((cell, rc));
                    }
                }
            }
        }
        best.map(|(cell, _)| cell)
    }

    fn other_end(&self, cell: usize, node: usize) -> usize {
        let (i, j) = (cell / self.s, cell % self.s);
        if node == i {
            self.r + j
        } else {
            i
        }
    }

    /// Pushes flow around the cycle closed by `enter`; returns the step size.
    fn pivot(&mut self, enter: usize, parent: &[usize], depth: &[usize]) -> f64 {
        let (ei, ej) = (enter / self.s, enter % self.s);
        // tree path from row ei to column node r + ej
        let mut from_row = Vec::new();
        let mut from_col = Vec::new();
        let (mut x, mut y) = (ei, self.r + ej);
        while x != y {
            if depth[x] >= depth[y] {
                let c = parent[x];
                from_row.push(c);
                x = self.other_end(c, x);
            } else {
                let c = parent[y];
                from_col.push(c);
                y = self.other_end(c, y);
            }
        }
        from_col.reverse();
        let path: Vec<usize> = from_row.into_iter().chain(from_col).collect();
        debug_assert!(path.len() % 2 == 1);

        // cells at even positions lose flow, odd positions gain
        let mut leave = usize::MAX;
        let mut theta = f64::INFINITY;
        for &c in path.iter().step_by(2) {
            let f = self.flow[c];
            if f < theta || (f == theta && c < leave) {
                theta = f;
                leave = c;
            }
        }
        let theta = theta.max(0.0);
        for (k, &c) in path.iter().enumerate() {
            if k % 2 == 0 {
                self.flow[c] = (self.flow[c] - theta).max(0.0);
            } else {
                self.flow[c] += theta;
            }
        }
        self.flow[leave] = 0.0;
        self.flow[enter] = theta;

        self.basic[leave] = false;
        let (li, lj) = (leave / self.s, leave % self.s);
        self.adj[li].retain(|&c| c != leave);
        self.adj[self.r + lj].retain(|&c| c != leave);
        self.basic[enter] = true;
        self.adj[ei].push(enter);
        self.adj[self.r + ej].push(enter);
        theta
    }
}
