//! Exact transport oracles for small instances.
//!
//! Two-marginal problems are solved by a transportation (network) simplex;
//! the fixed-candidate barycenter problem is a single LP over all plans,
//! solved by a dense simplex. Both return basic (vertex) solutions, so plans
//! have at most `S_a + S_b − 1` nonzeros and LP barycenters obey the
//! `Σ S_i + 1 − n` atom bound.

mod lp;
mod network;

use crate::cost::{cost_matrix, CostMatrix, CostSpec};
use crate::error::{Error, Result};
use crate::free_support::BarycenterProblem;
use crate::matrix::Matrix;
use crate::measures::DiscreteMeasure;

/// Default limit on the number of plan cells an exact solve may touch.
pub const DEFAULT_ORACLE_CAP: usize = 10_000;

/// Nonnegative matrix with prescribed row and column marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    matrix: Matrix,
    row_marginal: Vec<f64>,
    col_marginal: Vec<f64>,
}

impl CouplingPlan {
    pub fn new(matrix: Matrix, row_marginal: Vec<f64>, col_marginal: Vec<f64>) -> Result<Self> {
        if matrix.rows() != row_marginal.len() || matrix.cols() != col_marginal.len() {
            return Err(Error::DimensionMismatch {
                expected: matrix.rows() * matrix.cols(),
                found: row_marginal.len() * col_marginal.len(),
            });
        }
        Ok(CouplingPlan {
            matrix,
            row_marginal,
            col_marginal,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn row_marginal(&self) -> &[f64] {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &[f64] {
        &self.col_marginal
    }

    /// `⟨π, M⟩`.
    pub fn transport_cost(&self, cost: &Matrix) -> f64 {
        self.matrix.dot(cost)
    }

    /// Largest absolute deviation of a row or column sum from its marginal.
    pub fn marginal_error(&self) -> f64 {
        let rows = self.matrix.row_sums();
        let cols = self.matrix.col_sums();
        rows.iter()
            .zip(&self.row_marginal)
            .chain(cols.iter().zip(&self.col_marginal))
            .map(|(x, m)| (x - m).abs())
            .fold(0.0, f64::max)
    }

    /// True when entries are nonnegative and marginals hold within `tol`.
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.matrix.as_slice().iter().all(|&x| x >= 0.0) && self.marginal_error() <= tol
    }

    pub fn nonzeros(&self, threshold: f64) -> usize {
        self.matrix
            .as_slice()
            .iter()
            .filter(|&&x| x > threshold)
            .count()
    }
}

/// Exact robust transport result.
#[derive(Debug, Clone)]
pub struct ExactResult {
    /// `⟨π, M⟩`, the p-th power of the distance.
    pub cost: f64,
    /// `cost^(1/p)`.
    pub distance: f64,
    pub plan: CouplingPlan,
    pub is_vertex: bool,
}

/// Optimal plan between two marginals for an explicit cost matrix.
pub fn transport(a: &[f64], b: &[f64], cost: &Matrix, cap: usize) -> Result<CouplingPlan> {
    let cells = a.len() * b.len();
    if cells > cap {
        return Err(Error::OracleCap { cells, cap });
    }
    let flow = network::solve_transport(a, b, cost)?;
    CouplingPlan::new(flow, a.to_vec(), b.to_vec())
}

/// Exact `W_p^(λ)` with the default oracle cap.
pub fn exact_distance(a: &DiscreteMeasure, b: &DiscreteMeasure, spec: &CostSpec) -> Result<ExactResult> {
    exact_distance_capped(a, b, spec, DEFAULT_ORACLE_CAP)
}

pub fn exact_distance_capped(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    spec: &CostSpec,
    cap: usize,
) -> Result<ExactResult> {
    let m = cost_matrix(a, b, spec)?;
    let plan = transport(a.weights(), b.weights(), m.entries(), cap)?;
    let cost = plan.transport_cost(m.entries()).max(0.0);
    Ok(ExactResult {
        cost,
        distance: cost.powf(1.0 / spec.p()),
        plan,
        is_vertex: true,
    })
}

/// Untruncated `W_p^p` between two 1-D measures via the monotone
/// (quantile) coupling, which is optimal for any convex `|x − y|^p`.
pub fn wasserstein_1d_cost(a: &DiscreteMeasure, b: &DiscreteMeasure, p: f64) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: if a.dim() != 1 { a.dim() } else { b.dim() },
        });
    }
    let sorted = |m: &DiscreteMeasure| {
        let mut v: Vec<(f64, f64)> = m.points().map(|x| x[0]).zip(m.weights().iter().copied()).collect();
        v.sort_by(|x, y| x.0.total_cmp(&y.0));
        v
    };
    let (xa, xb) = (sorted(a), sorted(b));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (xa[0].1, xb[0].1);
    let mut total = 0.0;
    while i < xa.len() && j < xb.len() {
        let q = ra.min(rb);
        total += q * (xa[i].0 - xb[j].0).abs().powf(p);
        ra -= q;
        rb -= q;
        if ra <= rb {
            i += 1;
            if i < xa.len() {
                ra = xa[i].1;
            }
        } else {
            j += 1;
            if j < xb.len() {
                rb = xb[j].1;
            }
        }
    }
    Ok(total)
}

/// Vertex solution of the fixed-candidate barycenter LP.
#[derive(Debug, Clone)]
pub struct LpBarycenter {
    /// Mass on each candidate point (aligned with the candidate list).
    pub mass: Vec<f64>,
    /// `f = Σ_i w_i ⟨π_i, M_i⟩`.
    pub objective: f64,
    /// One `R × S_i` plan per input.
    pub plans: Vec<CouplingPlan>,
}

/// Solves `min Σ_i w_i ⟨π_i, M_i⟩` jointly over the barycenter mass `a` and
/// plans `π_i ∈ Π(a, q_i)` on a fixed candidate support.
///
/// Variables are the plan entries; `a` is the shared row marginal, enforced
/// by equating every plan's row sums with those of the first plan.
pub fn solve_barycenter_lp(
    problem: &BarycenterProblem,
    candidates: &[Vec<f64>],
    cap: usize,
) -> Result<LpBarycenter> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidate support is empty"));
    }
    let dim = problem.dim();
    if let Some(bad) = candidates.iter().find(|c| c.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let r = candidates.len();
    let n = problem.len();
    let sizes: Vec<usize> = problem.inputs().iter().map(DiscreteMeasure::len).collect();
    let total_s: usize = sizes.iter().sum();
    let cells = r * total_s;
    if cells > cap {
        return Err(Error::OracleCap { cells, cap });
    }

    let costs: Vec<CostMatrix> = problem
        .inputs()
        .iter()
        .map(|mu| CostMatrix::between(candidates.iter().map(Vec::as_slice), mu.points(), problem.spec()))
        .collect();
    let mut offsets = Vec::with_capacity(n);
    let mut acc = 0;
    for &s in &sizes {
        offsets.push(acc);
        acc += r * s;
    }
    let var = |i: usize, row: usize, col: usize| offsets[i] + row * sizes[i] + col;

    let rows = (n - 1) * r + total_s;
    let mut a = vec![0.0; rows * cells];
    let mut b = vec![0.0; rows];
    let mut c = vec![0.0; cells];
    for i in 0..n {
        for row in 0..r {
            for col in 0..sizes[i] {
                c[var(i, row, col)] = problem.weights()[i] * costs[i].get(row, col);
            }
        }
    }
    // shared row marginals: rowsum(π_i) − rowsum(π_0) = 0
    for i in 1..n {
        for row in 0..r {
            let k = (i - 1) * r + row;
            for col in 0..sizes[i] {
                a[k * cells + var(i, row, col)] = 1.0;
            }
            for col in 0..sizes[0] {
                a[k * cells + var(0, row, col)] = -1.0;
            }
        }
    }
    // column marginals: colsum(π_i) = q_i
    let mut k = (n - 1) * r;
    for (i, mu) in problem.inputs().iter().enumerate() {
        for col in 0..sizes[i] {
            for row in 0..r {
                a[k * cells + var(i, row, col)] = 1.0;
            }
            b[k] = mu.weights()[col];
            k += 1;
        }
    }

    let x = lp::solve(&lp::DenseLp {
        rows,
        cols: cells,
        a,
        b,
        c,
    })?;

    let mass: Vec<f64> = (0..r)
        .map(|row| (0..sizes[0]).map(|col| x[var(0, row, col)]).sum())
        .collect();
    let mut plans = Vec::with_capacity(n);
    let mut objective = 0.0;
    for (i, mu) in problem.inputs().iter().enumerate() {
        let m = Matrix::from_fn(r, sizes[i], |row, col| x[var(i, row, col)]);
        objective += problem.weights()[i] * m.dot(costs[i].entries());
        plans.push(CouplingPlan::new(m, mass.clone(), mu.weights().to_vec())?);
    }
    Ok(LpBarycenter {
        mass,
        objective: objective.max(0.0),
        plans,
    })
}

/// Exact barycenter on a candidate support: the mass vector (zero-mass
/// candidates kept, so it aligns with `candidates`) and the optimal `f`.
pub fn exact_barycenter_lp(
    problem: &BarycenterProblem,
    candidates: &[Vec<f64>],
) -> Result<(DiscreteMeasure, f64)> {
    let sol = solve_barycenter_lp(problem, candidates, DEFAULT_ORACLE_CAP)?;
    let measure = DiscreteMeasure::from_unnormalized(candidates.to_vec(), sol.mass)?;
    Ok((measure, sol.objective))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(p: f64, lambda: f64) -> CostSpec {
        CostSpec::new(p, lambda).unwrap()
    }

    fn line(points: &[f64], weights: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::new(points.iter().map(|&x| vec![x]).collect(), weights.to_vec()).unwrap()
    }

    #[test]
    fn forced_couplings() {
        let r = exact_distance(
            &DiscreteMeasure::dirac(vec![0.0]),
            &DiscreteMeasure::dirac(vec![10.0]),
            &spec(1.0, 3.0),
        )
        .unwrap();
        assert_eq!(r.distance, 3.0);
        assert!(r.is_vertex);

        let r = exact_distance(
            &line(&[0.0, 10.0], &[0.5, 0.5]),
            &DiscreteMeasure::dirac(vec![0.0]),
            &spec(2.0, 3.0),
        )
        .unwrap();
        assert!((r.cost - 4.5).abs() < 1e-15);
        assert!((r.distance - 4.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn two_by_two_matches_enumeration() {
        let a = line(&[0.0, 2.0], &[0.5, 0.5]);
        let b = line(&[1.0, 3.0], &[0.5, 0.5]);
        let s = spec(1.0, 1.5);
        // oracle: couplings [[t, .5-t], [.5-t, t]] for t in [0, .5]
        let m = cost_matrix(&a, &b, &s).unwrap();
        let best = (0..=1000)
            .map(|k| {
                let t = 0.5 * k as f64 / 1000.0;
                t * m.get(0, 0) + (0.5 - t) * (m.get(0, 1) + m.get(1, 0)) + t * m.get(1, 1)
            })
            .fold(f64::INFINITY, f64::min);
        assert!((best - 1.0).abs() < 1e-12);
        let r = exact_distance(&a, &b, &s).unwrap();
        assert!((r.distance - best).abs() < 1e-12);
        assert!((r.plan.matrix().get(0, 0) - 0.5).abs() < 1e-15);
        assert!((r.plan.matrix().get(1, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn oracle_cap_enforced() {
        let pts: Vec<Vec<f64>> = (0..101).map(|i| vec![i as f64]).collect();
        let m = DiscreteMeasure::uniform(pts).unwrap();
        assert!(matches!(
            exact_distance(&m, &m, &spec(1.0, 1.0)),
            Err(Error::OracleCap { cells: 10201, cap: 10_000 })
        ));
        assert!(exact_distance_capped(&m, &m, &spec(1.0, 1.0), 20_000).is_ok());
    }

    #[test]
    fn one_dimensional_closed_form_agrees() {
        let a = line(&[0.0, 1.0, 5.0], &[0.2, 0.3, 0.5]);
        let b = line(&[-1.0, 2.0], &[0.6, 0.4]);
        for p in [1.0, 2.0, 1.5] {
            let simplex = exact_distance(&a, &b, &CostSpec::untruncated(p).unwrap()).unwrap();
            let closed = wasserstein_1d_cost(&a, &b, p).unwrap();
            assert!((simplex.cost - closed).abs() < 1e-12, "p={p}");
        }
    }

    fn problem(inputs: Vec<DiscreteMeasure>, p: f64, lambda: f64) -> BarycenterProblem {
        let n = inputs.len();
        BarycenterProblem::new(inputs, vec![1.0 / n as f64; n], spec(p, lambda)).unwrap()
    }

    #[test]
    fn lp_single_input_returns_itself() {
        let mu = line(&[0.0, 1.0, 3.0], &[0.2, 0.5, 0.3]);
        let pb = problem(vec![mu.clone()], 2.0, f64::INFINITY);
        let (nu, f) = exact_barycenter_lp(&pb, &mu.points_vec()).unwrap();
        assert!(f.abs() < 1e-12);
        for (x, y) in nu.weights().iter().zip(mu.weights()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lp_two_diracs_midpoint() {
        let pb = problem(
            vec![DiscreteMeasure::dirac(vec![0.0]), DiscreteMeasure::dirac(vec![1.0])],
            2.0,
            f64::INFINITY,
        );
        let cands = vec![vec![0.0], vec![0.5], vec![1.0]];
        // oracle: f at each vertex (all mass on one candidate) is 0.5 z² + 0.5 (1 − z)²
        let vertex_f: Vec<f64> = [0.0f64, 0.5, 1.0]
            .iter()
            .map(|z| 0.5 * z * z + 0.5 * (1.0 - z) * (1.0 - z))
            .collect();
        let (nu, f) = exact_barycenter_lp(&pb, &cands).unwrap();
        assert!((f - vertex_f[1]).abs() < 1e-12);
        assert!((nu.weights()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lp_two_diracs_saturated() {
        let pb = problem(
            vec![DiscreteMeasure::dirac(vec![0.0]), DiscreteMeasure::dirac(vec![1.0])],
            1.0,
            0.2,
        );
        let cands = vec![vec![0.0], vec![0.5], vec![1.0]];
        // oracle: every plan is forced once the mass sits on one candidate
        let vertex_f: Vec<f64> = [0.0f64, 0.5, 1.0]
            .iter()
            .map(|z| 0.5 * z.abs().min(0.2) + 0.5 * (1.0 - z).abs().min(0.2))
            .collect();
        assert_eq!(vertex_f, vec![0.1, 0.2, 0.1]);
        let best = vertex_f.iter().copied().fold(f64::INFINITY, f64::min);
        let (_, f) = exact_barycenter_lp(&pb, &cands).unwrap();
        assert!((f - best).abs() < 1e-12, "{f}");
    }
}
