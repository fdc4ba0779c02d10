//! Entropic solvers on truncated cost matrices: Sinkhorn for the two-marginal
//! problem and Iterative Bregman Projections (IBP) for fixed-support
//! barycenters.
//!
//! Both run either on the linear-domain kernel `exp(−M/ε)` or on dual
//! potentials with log-sum-exp updates. The log-domain path starts from a
//! large regularization and halves it down to the target `ε`, warm-starting
//! the potentials at each stage. Reported objectives are always computed on
//! plans rounded to exact feasibility.

use rayon::prelude::*;

use crate::cost::{CostMatrix, CostSpec};
use crate::error::{Error, Result};
use crate::exact_ot::CouplingPlan;
use crate::free_support::BarycenterProblem;
use crate::matrix::Matrix;
use crate::measures::DiscreteMeasure;

/// Entropic regularization strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    /// Used as is.
    Absolute(f64),
    /// Multiplies the cost scale: `λ^p` when truncated, otherwise the largest
    /// cost entry of the instance.
    Relative(f64),
}

impl Epsilon {
    /// Resolves against a cost spec and the largest entry of the instance.
    pub fn resolve(&self, spec: &CostSpec, max_cost: f64) -> f64 {
        match *self {
            Epsilon::Absolute(e) => e,
            Epsilon::Relative(r) => r * cost_scale(spec, max_cost),
        }
    }
}

fn cost_scale(spec: &CostSpec, max_cost: f64) -> f64 {
    let s = if spec.is_truncated() {
        spec.cost_cap().min(max_cost.max(0.0))
    } else {
        max_cost
    };
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    pub epsilon: Epsilon,
    pub max_iter: usize,
    /// Sinkhorn: L1 marginal violation. IBP: L1 change of successive masses.
    pub tol: f64,
    pub log_domain: bool,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        SinkhornParams::relative(5e-3)
    }
}

impl SinkhornParams {
    /// `ε = rel · λ^p`; the log domain is switched on below `rel = 1e-2`.
    pub fn relative(rel: f64) -> Self {
        SinkhornParams {
            epsilon: Epsilon::Relative(rel),
            max_iter: 10_000,
            tol: 1e-8,
            log_domain: rel < 1e-2,
        }
    }

    pub fn absolute(eps: f64) -> Self {
        SinkhornParams {
            epsilon: Epsilon::Absolute(eps),
            max_iter: 10_000,
            tol: 1e-8,
            log_domain: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = match self.epsilon {
            Epsilon::Absolute(e) | Epsilon::Relative(e) => e,
        };
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {e}")));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be positive"));
        }
        Ok(())
    }
}

/// Result of an entropic two-marginal solve.
#[derive(Debug, Clone)]
pub struct SinkhornResult {
    /// `cost^(1/p)`.
    pub distance: f64,
    /// `⟨π, M⟩` on the rounded plan.
    pub cost: f64,
    pub plan: CouplingPlan,
    pub iterations: usize,
    /// L1 marginal violation before rounding.
    pub marginal_error: f64,
    pub epsilon: f64,
}

/// Entropic estimate of `W_p^(λ)(a, b)`.
pub fn sinkhorn_distance(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    spec: &CostSpec,
    params: &SinkhornParams,
) -> Result<SinkhornResult> {
    let m = crate::cost::cost_matrix(a, b, spec)?;
    let eps = params.epsilon.resolve(spec, m.entries().max());
    let (raw, iterations, marginal_error) =
        sinkhorn_plan(a.weights(), b.weights(), m.entries(), eps, spec, params)?;
    let plan = round_to_marginals(&raw, a.weights(), b.weights())?;
    let cost = plan.transport_cost(m.entries()).max(0.0);
    Ok(SinkhornResult {
        distance: cost.powf(1.0 / spec.p()),
        cost,
        plan,
        iterations,
        marginal_error,
        epsilon: eps,
    })
}

/// Unrounded entropic plan between explicit marginals.
pub(crate) fn sinkhorn_plan(
    a: &[f64],
    b: &[f64],
    m: &Matrix,
    eps: f64,
    spec: &CostSpec,
    params: &SinkhornParams,
) -> Result<(Matrix, usize, f64)> {
    params.validate()?;
    if params.log_domain {
        Ok(sinkhorn_log(a, b, m, eps, cost_scale(spec, m.max()), params))
    } else {
        sinkhorn_linear(a, b, m, eps, params)
    }
}

fn sinkhorn_linear(
    a: &[f64],
    b: &[f64],
    m: &Matrix,
    eps: f64,
    params: &SinkhornParams,
) -> Result<(Matrix, usize, f64)> {
    let (r, s) = (a.len(), b.len());
    let k = Matrix::from_vec(r, s, m.as_slice().iter().map(|c| (-c / eps).exp()).collect());
    let mut u = vec![1.0; r];
    let mut v = vec![1.0; s];
    let mut err = f64::INFINITY;
    let mut it = 0;
    while it < params.max_iter {
        it += 1;
        for i in 0..r {
            let kv: f64 = k.row(i).iter().zip(&v).map(|(x, y)| x * y).sum();
            u[i] = safe_ratio(a[i], kv)?;
        }
        let mut ktu = vec![0.0; s];
        for i in 0..r {
            for (acc, x) in ktu.iter_mut().zip(k.row(i)) {
                *acc += x * u[i];
            }
        }
        for j in 0..s {
            v[j] = safe_ratio(b[j], ktu[j])?;
        }
        err = 0.0;
        for i in 0..r {
            let kv: f64 = k.row(i).iter().zip(&v).map(|(x, y)| x * y).sum();
            err += (u[i] * kv - a[i]).abs();
        }
        if err < params.tol {
            break;
        }
    }
    let plan = Matrix::from_fn(r, s, |i, j| u[i] * k.get(i, j) * v[j]);
    Ok((plan, it, err))
}

fn safe_ratio(num: f64, den: f64) -> Result<f64> {
    if num == 0.0 {
        return Ok(0.0);
    }
    let x = num / den;
    if x.is_finite() && den > 0.0 {
        Ok(x)
    } else {
        Err(Error::NonFiniteScaling)
    }
}

/// `log Σ exp(x_k)`, `−∞` for an empty or all-`−∞` input.
#[inline]
fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[inline]
fn safe_ln(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Geometric ε schedule from the cost scale down to the target.
fn eps_schedule(scale: f64, target: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut e = scale;
    while e > target * 2.0 {
        out.push(e);
        e *= 0.5;
    }
    out.push(target);
    out
}

const STAGE_MAX_ITER: usize = 100;
const STAGE_TOL: f64 = 1e-6;

fn sinkhorn_log(
    a: &[f64],
    b: &[f64],
    m: &Matrix,
    eps: f64,
    scale: f64,
    params: &SinkhornParams,
) -> (Matrix, usize, f64) {
    let (r, s) = (a.len(), b.len());
    let log_a: Vec<f64> = a.iter().map(|&x| safe_ln(x)).collect();
    let log_b: Vec<f64> = b.iter().map(|&x| safe_ln(x)).collect();
    let mt = m.transpose();
    let mut f = vec![0.0f64; r];
    let mut g = vec![0.0f64; s];
    let mut total = 0;
    let mut err;
    let stages = eps_schedule(scale, eps);
    let last = stages.len() - 1;
    for (k, &e) in stages.iter().enumerate() {
        let (cap, tol) = if k == last {
            (params.max_iter.saturating_sub(total).max(1), params.tol)
        } else {
            (STAGE_MAX_ITER, STAGE_TOL.max(params.tol))
        };
        for _ in 0..cap {
            total += 1;
            // column pass; the same sums give the current column marginals
            err = 0.0;
            for j in 0..s {
                let col = mt.row(j);
                let lse = log_sum_exp(f.iter().zip(col).map(|(fi, c)| (fi - c) / e));
                if g[j].is_finite() && lse.is_finite() {
                    err += ((g[j] / e + lse).exp() - b[j]).abs();
                } else {
                    err += b[j];
                }
                g[j] = if log_b[j].is_finite() {
                    e * (log_b[j] - lse)
                } else {
                    f64::NEG_INFINITY
                };
            }
            for i in 0..r {
                let row = m.row(i);
                let lse = log_sum_exp(g.iter().zip(row).map(|(gj, c)| (gj - c) / e));
                f[i] = if log_a[i].is_finite() {
                    e * (log_a[i] - lse)
                } else {
                    f64::NEG_INFINITY
                };
            }
            if err < tol {
                break;
            }
        }
        if total >= params.max_iter {
            break;
        }
    }
    // final column error for the returned potentials
    let plan = Matrix::from_fn(r, s, |i, j| potential_entry(f[i], g[j], m.get(i, j), eps));
    let col = plan.col_sums();
    err = col.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    (plan, total, err)
}

#[inline]
fn potential_entry(f: f64, g: f64, c: f64, eps: f64) -> f64 {
    if f == f64::NEG_INFINITY || g == f64::NEG_INFINITY {
        0.0
    } else {
        ((f + g - c) / eps).exp()
    }
}

/// Rounds a nonnegative matrix onto `Π(a, b)`.
///
/// Rows are rescaled to sum to `a` exactly. Columns carrying surplus mass are
/// scaled down to `b`; the mass removed from each row is then redistributed
/// over the deficit columns in proportion to their deficits, which restores
/// both marginals.
pub fn round_to_marginals(plan: &Matrix, a: &[f64], b: &[f64]) -> Result<CouplingPlan> {
    let (r, s) = (a.len(), b.len());
    let mut p = plan.clone();
    let bsum: f64 = b.iter().sum();
    for i in 0..r {
        let rs: f64 = p.row(i).iter().sum();
        let row = p.row_mut(i);
        if rs > 0.0 && rs.is_finite() {
            let f = a[i] / rs;
            row.iter_mut().for_each(|x| *x *= f);
        } else {
            for (x, bj) in row.iter_mut().zip(b) {
                *x = a[i] * bj / bsum;
            }
        }
    }
    let cs = p.col_sums();
    let mut removed = vec![0.0; r];
    for j in 0..s {
        if cs[j] > b[j] {
            let f = b[j] / cs[j];
            for (i, rem) in removed.iter_mut().enumerate() {
                let x = p.get(i, j);
                p.set(i, j, x * f);
                *rem += x - x * f;
            }
        }
    }
    let cs = p.col_sums();
    let deficit: Vec<f64> = cs.iter().zip(b).map(|(c, bj)| (bj - c).max(0.0)).collect();
    let dsum: f64 = deficit.iter().sum();
    if dsum > 0.0 {
        for (i, &rem) in removed.iter().enumerate() {
            if rem == 0.0 {
                continue;
            }
            for (x, d) in p.row_mut(i).iter_mut().zip(&deficit) {
                *x += rem * d / dsum;
            }
        }
    }
    CouplingPlan::new(p, a.to_vec(), b.to_vec())
}

/// Fixed-support barycenter estimate.
#[derive(Debug, Clone)]
pub struct FixedSupportResult {
    /// Barycenter weights on the given support, summing to one.
    pub mass: Vec<f64>,
    /// `Σ_i w_i ⟨π_i, M_i⟩` on rounded plans, entropy excluded.
    pub objective: f64,
    pub iterations: usize,
    /// Largest L1 column-marginal violation over inputs before rounding.
    pub marginal_error: f64,
    /// Rounded plans, one `R × S_i` per input.
    pub plans: Vec<CouplingPlan>,
    pub epsilon: f64,
}

impl FixedSupportResult {
    pub fn measure(&self, support: &[Vec<f64>]) -> Result<DiscreteMeasure> {
        DiscreteMeasure::from_unnormalized(support.to_vec(), self.mass.clone())
    }
}

/// Fixed-support robust barycenter by Iterative Bregman Projections.
///
/// Per iteration, for every input `i`: `v_i ← q_i ⊘ K_iᵀ u_i`; then the mass
/// is the weighted geometric mean `a ← Π_i (K_i v_i)^{w_i}` and
/// `u_i ← a ⊘ K_i v_i`. Stops when the L1 change of `a` drops below `tol`.
pub fn ibp_barycenter(
    problem: &BarycenterProblem,
    support: &[Vec<f64>],
    params: &SinkhornParams,
) -> Result<FixedSupportResult> {
    params.validate()?;
    if support.is_empty() {
        return Err(Error::invalid("barycenter support is empty"));
    }
    if let Some(bad) = support.iter().find(|p| p.len() != problem.dim()) {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            found: bad.len(),
        });
    }
    let costs: Vec<CostMatrix> = problem
        .inputs()
        .iter()
        .map(|mu| CostMatrix::between(support.iter().map(Vec::as_slice), mu.points(), problem.spec()))
        .collect();
    let max_cost = costs.iter().map(|c| c.entries().max()).fold(0.0, f64::max);
    let eps = params.epsilon.resolve(problem.spec(), max_cost);
    let scale = cost_scale(problem.spec(), max_cost);

    let raw = if params.log_domain {
        ibp_log(problem, &costs, eps, scale, params)
    } else {
        ibp_linear(problem, &costs, eps, params)?
    };

    let total: f64 = raw.mass.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::NonFiniteScaling);
    }
    let mass: Vec<f64> = raw.mass.iter().map(|x| x / total).collect();
    let mut plans = Vec::with_capacity(problem.len());
    let mut objective = 0.0;
    let mut marginal_error = 0.0f64;
    for ((plan, mu), (c, w)) in raw
        .plans
        .iter()
        .zip(problem.inputs())
        .zip(costs.iter().zip(problem.weights()))
    {
        let col = plan.col_sums();
        let e: f64 = col.iter().zip(mu.weights()).map(|(x, y)| (x - y).abs()).sum();
        marginal_error = marginal_error.max(e);
        let rounded = round_to_marginals(plan, &mass, mu.weights())?;
        objective += w * rounded.transport_cost(c.entries());
        plans.push(rounded);
    }
    Ok(FixedSupportResult {
        mass,
        objective: objective.max(0.0),
        iterations: raw.iterations,
        marginal_error,
        plans,
        epsilon: eps,
    })
}

struct RawIbp {
    mass: Vec<f64>,
    plans: Vec<Matrix>,
    iterations: usize,
}

fn l1_change(a: &[f64], b: &[f64]) -> f64 {
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    a.iter().zip(b).map(|(x, y)| (x / sa - y / sb).abs()).sum()
}

fn ibp_log(
    problem: &BarycenterProblem,
    costs: &[CostMatrix],
    eps: f64,
    scale: f64,
    params: &SinkhornParams,
) -> RawIbp {
    let r = costs[0].rows();
    let log_q: Vec<Vec<f64>> = problem
        .inputs()
        .iter()
        .map(|mu| mu.weights().iter().map(|&q| safe_ln(q)).collect())
        .collect();
    let transposed: Vec<Matrix> = costs.iter().map(|c| c.entries().transpose()).collect();
    let n = problem.len();
    let mut phi = vec![vec![0.0; r]; n];
    let mut psi: Vec<Vec<f64>> = problem.inputs().iter().map(|mu| vec![0.0; mu.len()]).collect();
    let mut log_kv = vec![vec![0.0; r]; n];
    let mut mass = vec![1.0 / r as f64; r];
    let mut total = 0;

    let stages = eps_schedule(scale, eps);
    let last = stages.len() - 1;
    for (k, &e) in stages.iter().enumerate() {
        let (cap, tol) = if k == last {
            (params.max_iter.saturating_sub(total).max(1), params.tol)
        } else {
            (STAGE_MAX_ITER, STAGE_TOL.max(params.tol))
        };
        for _ in 0..cap {
            total += 1;
            // per-input scaling passes are independent
            let updates: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let m = costs[i].entries();
                    let mt = &transposed[i];
                    let new_psi: Vec<f64> = (0..m.cols())
                        .map(|s| {
                            if log_q[i][s].is_finite() {
                                let lse = log_sum_exp(
                                    phi[i].iter().zip(mt.row(s)).map(|(p, c)| (p - c) / e),
                                );
                                e * (log_q[i][s] - lse)
                            } else {
                                f64::NEG_INFINITY
                            }
                        })
                        .collect();
                    let lkv: Vec<f64> = (0..r)
                        .map(|row| {
                            log_sum_exp(new_psi.iter().zip(m.row(row)).map(|(p, c)| (p - c) / e))
                        })
                        .collect();
                    (new_psi, lkv)
                })
                .collect();
            for (i, (p, l)) in updates.into_iter().enumerate() {
                psi[i] = p;
                log_kv[i] = l;
            }
            // fixed reduction order over inputs
            let mut log_a = vec![0.0; r];
            for (w, lkv) in problem.weights().iter().zip(&log_kv) {
                if *w == 0.0 {
                    continue;
                }
                for (la, l) in log_a.iter_mut().zip(lkv) {
                    *la += w * l;
                }
            }
            for i in 0..n {
                for row in 0..r {
                    phi[i][row] = e * (log_a[row] - log_kv[i][row]);
                }
            }
            let new_mass: Vec<f64> = log_a.iter().map(|x| x.exp()).collect();
            let change = l1_change(&new_mass, &mass);
            mass = new_mass;
            if change < tol {
                break;
            }
        }
        if total >= params.max_iter {
            break;
        }
    }
    let plans = (0..n)
        .map(|i| {
            let m = costs[i].entries();
            Matrix::from_fn(r, m.cols(), |row, s| {
                potential_entry(phi[i][row], psi[i][s], m.get(row, s), eps)
            })
        })
        .collect();
    RawIbp {
        mass,
        plans,
        iterations: total,
    }
}

fn ibp_linear(
    problem: &BarycenterProblem,
    costs: &[CostMatrix],
    eps: f64,
    params: &SinkhornParams,
) -> Result<RawIbp> {
    let r = costs[0].rows();
    let n = problem.len();
    let kernels: Vec<Matrix> = costs
        .iter()
        .map(|c| {
            let m = c.entries();
            Matrix::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|x| (-x / eps).exp()).collect())
        })
        .collect();
    let mut u = vec![vec![1.0; r]; n];
    let mut v: Vec<Vec<f64>> = problem.inputs().iter().map(|mu| vec![1.0; mu.len()]).collect();
    let mut mass = vec![1.0 / r as f64; r];
    let mut it = 0;
    while it < params.max_iter {
        it += 1;
        let mut kv_all = Vec::with_capacity(n);
        for i in 0..n {
            let k = &kernels[i];
            let q = problem.inputs()[i].weights();
            let mut ktu = vec![0.0; k.cols()];
            for row in 0..r {
                for (acc, x) in ktu.iter_mut().zip(k.row(row)) {
                    *acc += x * u[i][row];
                }
            }
            for s in 0..k.cols() {
                v[i][s] = safe_ratio(q[s], ktu[s])?;
            }
            let kv: Vec<f64> = (0..r)
                .map(|row| k.row(row).iter().zip(&v[i]).map(|(x, y)| x * y).sum())
                .collect();
            kv_all.push(kv);
        }
        let mut new_mass = vec![1.0; r];
        for (w, kv) in problem.weights().iter().zip(&kv_all) {
            for (a, x) in new_mass.iter_mut().zip(kv) {
                *a *= x.powf(*w);
            }
        }
        for i in 0..n {
            for row in 0..r {
                u[i][row] = safe_ratio(new_mass[row], kv_all[i][row])?;
            }
        }
        if new_mass.iter().any(|x| !x.is_finite()) || new_mass.iter().sum::<f64>() <= 0.0 {
            return Err(Error::NonFiniteScaling);
        }
        let change = l1_change(&new_mass, &mass);
        mass = new_mass;
        if change < params.tol {
            break;
        }
    }
    let plans = (0..n)
        .map(|i| {
            let k = &kernels[i];
            Matrix::from_fn(r, k.cols(), |row, s| u[i][row] * k.get(row, s) * v[i][s])
        })
        .collect();
    Ok(RawIbp {
        mass,
        plans,
        iterations: it,
    })
}
