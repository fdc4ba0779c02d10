//! Free-support robust barycenters.
//!
//! The objective is `f(ν) = Σ_i w_i [W_p^(λ)(ν, μ_i)]^p` (the `k = p`
//! barycenter). The solver alternates a fixed-support mass solve with the
//! support map `y_r ↦ argmin_z Σ_i w_i Σ_s π^i_rs c(z, x^i_s)` where
//! `c = min{d, λ}^p`. For optimal plans the map never increases `f`.
//!
//! The per-point objective `g_r(z)` is not convex once truncation bites, so
//! it is decreased by majorize–minimize: targets farther than `λ` from the
//! current point are frozen at `λ^p` (which upper-bounds their true cost
//! everywhere) and the remaining active targets are handled by a weighted
//! mean (`p = 2`), Weiszfeld steps (`p = 1`), or reweighted least squares
//! with backtracking (other `p`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cluster::kmeans;
use crate::cost::{CostMatrix, CostSpec};
use crate::entropic::{ibp_barycenter, round_to_marginals, sinkhorn_plan, SinkhornParams};
use crate::error::{Error, Result};
use crate::exact_ot::{solve_barycenter_lp, transport, CouplingPlan, DEFAULT_ORACLE_CAP};
use crate::measures::{euclidean, DiscreteMeasure, DEFAULT_PRUNE_THRESHOLD, MASS_TOLERANCE};

/// Inputs `{μ_i, w_i}` and the cost; the barycenter exponent `k` equals `p`.
#[derive(Debug, Clone)]
pub struct BarycenterProblem {
    inputs: Vec<DiscreteMeasure>,
    weights: Vec<f64>,
    spec: CostSpec,
}

impl BarycenterProblem {
    pub fn new(inputs: Vec<DiscreteMeasure>, weights: Vec<f64>, spec: CostSpec) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("barycenter needs at least one input"));
        }
        if inputs.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} weights",
                inputs.len(),
                weights.len()
            )));
        }
        let dim = inputs[0].dim();
        if let Some(bad) = inputs.iter().find(|m| m.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.dim(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("barycenter weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::invalid(format!("barycenter weights sum to {total}, not 1")));
        }
        Ok(BarycenterProblem {
            inputs,
            weights,
            spec,
        })
    }

    /// Equal weights `1/n`.
    pub fn uniform(inputs: Vec<DiscreteMeasure>, spec: CostSpec) -> Result<Self> {
        let n = inputs.len().max(1);
        Self::new(inputs, vec![1.0 / n as f64; n], spec)
    }

    pub fn inputs(&self) -> &[DiscreteMeasure] {
        &self.inputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn spec(&self) -> &CostSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].dim()
    }

    /// Same inputs with a different cost.
    pub fn with_spec(&self, spec: CostSpec) -> Self {
        BarycenterProblem {
            inputs: self.inputs.clone(),
            weights: self.weights.clone(),
            spec,
        }
    }

    /// Every input shifted by `t`.
    pub fn translated(&self, t: &[f64]) -> Result<Self> {
        let inputs = self
            .inputs
            .iter()
            .map(|m| m.translated(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(BarycenterProblem {
            inputs,
            weights: self.weights.clone(),
            spec: self.spec,
        })
    }

    /// Pooled support and weights `w_i q_s^(i)` of all inputs.
    pub fn pooled(&self) -> (Vec<&[f64]>, Vec<f64>) {
        let mut pts = Vec::new();
        let mut ws = Vec::new();
        for (mu, w) in self.inputs.iter().zip(&self.weights) {
            for (p, q) in mu.points().zip(mu.weights()) {
                pts.push(p);
                ws.push(w * q);
            }
        }
        (pts, ws)
    }

    fn costs_from(&self, support: &[Vec<f64>]) -> Vec<CostMatrix> {
        self.inputs
            .iter()
            .map(|mu| CostMatrix::between(support.iter().map(Vec::as_slice), mu.points(), &self.spec))
            .collect()
    }
}

/// How transport costs inside `f` are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveMethod {
    /// Network simplex, refusing instances above `cap` plan cells.
    Exact { cap: usize },
    /// Entropic plans rounded to feasibility.
    Sinkhorn(SinkhornParams),
}

impl ObjectiveMethod {
    pub fn exact() -> Self {
        ObjectiveMethod::Exact {
            cap: DEFAULT_ORACLE_CAP,
        }
    }
}

/// `f(ν)` for a candidate barycenter.
pub fn objective_f(candidate: &DiscreteMeasure, problem: &BarycenterProblem, method: ObjectiveMethod) -> Result<f64> {
    if candidate.dim() != problem.dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            found: candidate.dim(),
        });
    }
    let support = candidate.points_vec();
    Ok(evaluate(problem, &support, candidate.weights(), method)?.0)
}

/// `f` on an explicit support and mass, with the feasible plans used.
pub fn evaluate(
    problem: &BarycenterProblem,
    support: &[Vec<f64>],
    mass: &[f64],
    method: ObjectiveMethod,
) -> Result<(f64, Vec<CouplingPlan>)> {
    let costs = problem.costs_from(support);
    let solved: Vec<Result<(f64, CouplingPlan)>> = costs
        .par_iter()
        .zip(problem.inputs().par_iter())
        .map(|(c, mu)| {
            let plan = match method {
                ObjectiveMethod::Exact { cap } => transport(mass, mu.weights(), c.entries(), cap)?,
                ObjectiveMethod::Sinkhorn(params) => {
                    let eps = params.epsilon.resolve(problem.spec(), c.entries().max());
                    let (raw, _, _) = sinkhorn_plan(mass, mu.weights(), c.entries(), eps, problem.spec(), &params)?;
                    round_to_marginals(&raw, mass, mu.weights())?
                }
            };
            Ok((plan.transport_cost(c.entries()), plan))
        })
        .collect();
    let mut total = 0.0;
    let mut plans = Vec::with_capacity(solved.len());
    for (res, w) in solved.into_iter().zip(problem.weights()) {
        let (cost, plan) = res?;
        total += w * cost;
        plans.push(plan);
    }
    Ok((total.max(0.0), plans))
}

/// A weighted target of the per-point objective.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub point: &'a [f64],
    pub weight: f64,
}

/// `g(z) = Σ_k ω_k min{d(z, x_k), λ}^p`.
pub fn point_objective(z: &[f64], targets: &[Target<'_>], spec: &CostSpec) -> f64 {
    targets
        .iter()
        .map(|t| t.weight * spec.from_distance(euclidean(z, t.point)))
        .sum()
}

/// Result of the majorize–minimize point update.
#[derive(Debug, Clone)]
pub struct MmOutcome {
    pub point: Vec<f64>,
    /// `g` at the start and after every accepted MM step.
    pub values: Vec<f64>,
    pub steps: usize,
}

const MM_MAX_STEPS: usize = 100;
const MM_MOVE_TOL: f64 = 1e-10;
const COINCIDENCE_GUARD: f64 = 1e-12;
const INNER_MAX_STEPS: usize = 500;

fn surrogate(z: &[f64], active: &[Target<'_>], p: f64) -> f64 {
    active
        .iter()
        .map(|t| t.weight * euclidean(z, t.point).powf(p))
        .sum()
}

/// Decreases `Σ_active ω d^p` starting from `z`.
fn minimize_active(z: &[f64], active: &[Target<'_>], p: f64) -> Vec<f64> {
    let dim = z.len();
    let weighted_mean = |scale: &dyn Fn(&Target<'_>) -> f64| -> Option<Vec<f64>> {
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        for t in active {
            let s = scale(t);
            den += s;
            for (n, x) in num.iter_mut().zip(t.point) {
                *n += s * x;
            }
        }
        (den > 0.0 && den.is_finite()).then(|| num.into_iter().map(|x| x / den).collect())
    };
    if p == 2.0 {
        return weighted_mean(&|t| t.weight).unwrap_or_else(|| z.to_vec());
    }
    // Weiszfeld for p = 1, reweighted least squares otherwise
    let mut cur = z.to_vec();
    let mut h = surrogate(&cur, active, p);
    for _ in 0..INNER_MAX_STEPS {
        let Some(mut next) = weighted_mean(&|t| {
            let d = euclidean(&cur, t.point).max(COINCIDENCE_GUARD);
            t.weight * d.powf(p - 2.0)
        }) else {
            break;
        };
        let mut h_next = surrogate(&next, active, p);
        let mut halvings = 0;
        while h_next > h && halvings < 40 {
            for (n, c) in next.iter_mut().zip(&cur) {
                *n = 0.5 * (*n + c);
            }
            h_next = surrogate(&next, active, p);
            halvings += 1;
        }
        if h_next >= h {
            break;
        }
        let step = euclidean(&next, &cur);
        cur = next;
        h = h_next;
        if step <= 1e-13 * (1.0 + cur.iter().map(|x| x.abs()).fold(0.0, f64::max)) {
            break;
        }
    }
    cur
}

/// Majorize–minimize descent on `g` from `start`.
///
/// Targets with `d(z, x) < λ` are active and keep `d^p`; the rest are pinned
/// at `λ^p`. If every target is saturated the point snaps to the heaviest
/// target (earliest on ties). Stops when the active set is stable and the
/// point moves less than `1e-10`, or after 100 steps.
pub fn mm_minimize(targets: &[Target<'_>], start: &[f64], spec: &CostSpec) -> MmOutcome {
    let lambda = spec.lambda();
    let p = spec.p();
    let is_active = |z: &[f64], t: &Target<'_>| euclidean(z, t.point) < lambda;
    let mut z = start.to_vec();
    let mut g = point_objective(&z, targets, spec);
    let mut values = vec![g];
    let mut steps = 0;
    if targets.is_empty() {
        return MmOutcome { point: z, values, steps };
    }
    for _ in 0..MM_MAX_STEPS {
        steps += 1;
        let mask: Vec<bool> = targets.iter().map(|t| is_active(&z, t)).collect();
        let active: Vec<Target<'_>> = targets
            .iter()
            .zip(&mask)
            .filter(|(_, &a)| a)
            .map(|(t, _)| *t)
            .collect();
        if active.is_empty() {
            let mut best = 0;
            for (k, t) in targets.iter().enumerate() {
                if t.weight > targets[best].weight {
                    best = k;
                }
            }
            let snapped = targets[best].point.to_vec();
            let g_new = point_objective(&snapped, targets, spec);
            if g_new > g {
                break;
            }
            z = snapped;
            g = g_new;
            values.push(g);
            continue;
        }
        let next = minimize_active(&z, &active, p);
        let g_new = point_objective(&next, targets, spec);
        if g_new > g + 1e-12 * (1.0 + g) {
            break;
        }
        let moved = euclidean(&next, &z);
        let next_mask: Vec<bool> = targets.iter().map(|t| is_active(&next, t)).collect();
        z = next;
        g = g_new.min(g);
        values.push(g);
        if next_mask == mask && moved < MM_MOVE_TOL {
            break;
        }
    }
    MmOutcome { point: z, values, steps }
}

/// The support map: one MM-relocated point per barycenter atom.
///
/// `plans[i]` must be `R × S_i` with row marginal equal to the current
/// weights. Atoms with no transported mass stay where they are.
pub fn update_support(
    current: &DiscreteMeasure,
    plans: &[CouplingPlan],
    problem: &BarycenterProblem,
) -> Result<Vec<Vec<f64>>> {
    update_points(&current.points_vec(), plans, problem)
}

pub(crate) fn update_points(
    support: &[Vec<f64>],
    plans: &[CouplingPlan],
    problem: &BarycenterProblem,
) -> Result<Vec<Vec<f64>>> {
    if plans.len() != problem.len() {
        return Err(Error::invalid(format!(
            "{} plans for {} inputs",
            plans.len(),
            problem.len()
        )));
    }
    for (plan, mu) in plans.iter().zip(problem.inputs()) {
        if plan.matrix().rows() != support.len() || plan.matrix().cols() != mu.len() {
            return Err(Error::invalid("plan shape does not match support and input"));
        }
    }
    let updated = (0..support.len())
        .into_par_iter()
        .map(|r| {
            let mut targets = Vec::new();
            for ((plan, mu), &w) in plans.iter().zip(problem.inputs()).zip(problem.weights()) {
                for (s, &pi) in plan.matrix().row(r).iter().enumerate() {
                    let weight = w * pi;
                    if weight > 0.0 {
                        targets.push(Target {
                            point: mu.point(s),
                            weight,
                        });
                    }
                }
            }
            if targets.is_empty() {
                support[r].clone()
            } else {
                mm_minimize(&targets, &support[r], problem.spec()).point
            }
        })
        .collect();
    Ok(updated)
}

/// Fixed-support mass solver used inside the outer loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MassSolver {
    Ibp(SinkhornParams),
    /// Exact barycenter LP over the current support.
    Exact { cap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeSupportOptions {
    pub mass_solver: MassSolver,
    pub evaluation: ObjectiveMethod,
    pub outer_max: usize,
    pub outer_tol: f64,
}

impl FreeSupportOptions {
    pub fn entropic(params: SinkhornParams, outer_max: usize, outer_tol: f64) -> Self {
        FreeSupportOptions {
            mass_solver: MassSolver::Ibp(params),
            evaluation: ObjectiveMethod::Sinkhorn(params),
            outer_max,
            outer_tol,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FreeSupportResult {
    /// Final barycenter, dust below `1e-12` pruned.
    pub barycenter: DiscreteMeasure,
    /// `f` after each outer iteration, evaluated on feasible plans.
    pub objective_trace: Vec<f64>,
    /// `f` after the first mass solve, before any support move.
    pub initial_objective: f64,
    pub outer_iterations: usize,
    pub converged: bool,
}

/// Free-support barycenter with the default entropic mass solve and
/// entropic objective evaluation.
pub fn free_support_barycenter(
    problem: &BarycenterProblem,
    init_support: &[Vec<f64>],
    params: &SinkhornParams,
    outer_max: usize,
    outer_tol: f64,
) -> Result<FreeSupportResult> {
    free_support_from(
        problem,
        init_support,
        None,
        &FreeSupportOptions::entropic(*params, outer_max, outer_tol),
    )
}

/// Alternates mass solves and support updates.
///
/// Each outer iteration: (1) solve the mass on the current support; if a
/// previous mass (or `init_mass` on the first pass) scores better on this
/// support it is kept instead; (2) move every atom with the support map
/// using the evaluation plans; (3) record `f` on the moved support. Stops
/// when the relative decrease of `f` falls below `outer_tol`. With exact
/// evaluation the recorded trace is non-increasing.
pub fn free_support_from(
    problem: &BarycenterProblem,
    init_support: &[Vec<f64>],
    init_mass: Option<&[f64]>,
    options: &FreeSupportOptions,
) -> Result<FreeSupportResult> {
    if init_support.is_empty() {
        return Err(Error::invalid("initial support is empty"));
    }
    if !(options.outer_tol > 0.0) {
        return Err(Error::invalid("outer_tol must be > 0"));
    }
    if options.outer_max == 0 {
        return Err(Error::invalid("outer_max must be positive"));
    }
    if let Some(bad) = init_support.iter().find(|p| p.len() != problem.dim()) {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            found: bad.len(),
        });
    }
    let mut support = init_support.to_vec();
    // best known (mass, f, plans) on the current support
    let mut carried: Option<(Vec<f64>, f64, Vec<CouplingPlan>)> = match init_mass {
        Some(m) => {
            if m.len() != support.len() {
                return Err(Error::invalid("initial mass does not match the initial support"));
            }
            let total: f64 = m.iter().sum();
            let m: Vec<f64> = m.iter().map(|x| x / total).collect();
            let (f, plans) = evaluate(problem, &support, &m, options.evaluation)?;
            Some((m, f, plans))
        }
        None => None,
    };

    let mut trace = Vec::new();
    let mut initial_objective = f64::NAN;
    let mut converged = false;
    let mut iterations = 0;
    let mut mass = Vec::new();
    for it in 0..options.outer_max {
        iterations += 1;
        let solved = match options.mass_solver {
            MassSolver::Ibp(params) => ibp_barycenter(problem, &support, &params)?.mass,
            MassSolver::Exact { cap } => solve_barycenter_lp(problem, &support, cap)?.mass,
        };
        let (f_solved, plans_solved) = evaluate(problem, &support, &solved, options.evaluation)?;
        let (m, f_here, plans) = match carried.take() {
            Some((m_old, f_old, p_old)) if f_old < f_solved => (m_old, f_old, p_old),
            _ => (solved, f_solved, plans_solved),
        };
        if it == 0 {
            initial_objective = f_here;
        }
        let reference = trace.last().copied().unwrap_or(f_here);

        let moved = update_points(&support, &plans, problem)?;
        let (f_moved, plans_moved) = evaluate(problem, &moved, &m, options.evaluation)?;
        // a non-exact evaluation can score the move worse; keep the old support then
        let (f_next, next_support, next_plans) = if f_moved <= f_here {
            (f_moved, moved, plans_moved)
        } else {
            (f_here, support.clone(), plans)
        };
        support = next_support;
        trace.push(f_next);
        mass = m.clone();
        carried = Some((m, f_next, next_plans));
        if reference - f_next <= options.outer_tol * reference.abs() {
            converged = true;
            break;
        }
    }
    let barycenter = DiscreteMeasure::from_unnormalized(support, mass)?.prune(DEFAULT_PRUNE_THRESHOLD);
    Ok(FreeSupportResult {
        barycenter,
        objective_trace: trace,
        initial_objective,
        outer_iterations: iterations,
        converged,
    })
}

/// Default initial support: `r` weighted k-means centroids of the pooled
/// input support. Fewer points come back if the pool has fewer distinct
/// points than `r`.
pub fn kmeans_init(problem: &BarycenterProblem, r: usize, seed: u64) -> Vec<Vec<f64>> {
    let (pts, ws) = problem.pooled();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kmeans(&pts, &ws, r.max(1), 100, &mut rng).centroids
}

/// For every tuple `(x^(1), …, x^(n))` with one support point per input,
/// the MM minimizer of `Σ_i w_i c(z, x^(i))` started at the heaviest point of
/// the tuple. Points within `1e-9` of an earlier candidate are merged.
pub fn candidate_supports(problem: &BarycenterProblem, cap: usize) -> Result<Vec<Vec<f64>>> {
    let sizes: Vec<usize> = problem.inputs().iter().map(DiscreteMeasure::len).collect();
    let count = sizes
        .iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .unwrap_or(usize::MAX);
    if count > cap {
        return Err(Error::CandidateCap { count, cap });
    }
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut idx = vec![0usize; sizes.len()];
    for _ in 0..count {
        let targets: Vec<Target<'_>> = problem
            .inputs()
            .iter()
            .zip(&idx)
            .zip(problem.weights())
            .map(|((mu, &s), &w)| Target {
                point: mu.point(s),
                weight: w,
            })
            .collect();
        let mut start = 0;
        for (k, t) in targets.iter().enumerate() {
            if t.weight > targets[start].weight {
                start = k;
            }
        }
        let z = mm_minimize(&targets, targets[start].point, problem.spec()).point;
        if !out.iter().any(|c| euclidean(c, &z) <= 1e-9) {
            out.push(z);
        }
        // odometer over tuples, last input fastest
        for k in (0..idx.len()).rev() {
            idx[k] += 1;
            if idx[k] < sizes[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Ok(out)
}
