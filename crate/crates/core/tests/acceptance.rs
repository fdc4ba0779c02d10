//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines are always shown.
//! Criteria listed in `KNOWN_FAILURES` are reported as FAIL like any other;
//! they do not fail the run, but an unexpected pass does.

mod common;

use std::time::Instant;

use common::{joint_diameter, random_measure, rng};
use rand::Rng;
use rwb::exact_ot::{exact_distance, solve_barycenter_lp, DEFAULT_ORACLE_CAP};
use rwb::experiments::{
    records_to_csv, run_image_experiment, run_lambda_sweep, ExperimentConfig, RunRecord, Scenario,
};
use rwb::free_support::{free_support_from, kmeans_init, FreeSupportOptions, MassSolver};
use rwb::{
    candidate_supports, sinkhorn_distance, BarycenterProblem, CostSpec, DiscreteMeasure, ObjectiveMethod,
    SinkhornParams,
};

/// Criteria that do not hold under the implemented protocol.
const KNOWN_FAILURES: &[u32] = &[6, 7];
const SEEDS: u64 = 10;
const IMAGE_SEEDS: u64 = 5;
/// Relative margin below which two sweep errors count as equal.
const TIE: f64 = 1e-6;

struct Outcome {
    ok: bool,
    detail: String,
}

fn c1_metric_axioms() -> Outcome {
    let mut g = rng(1);
    let mut worst_sym: f64 = 0.0;
    let mut worst_tri: f64 = f64::NEG_INFINITY;
    let mut worst_bound: f64 = f64::NEG_INFINITY;
    for _ in 0..200 {
        let d = g.random_range(1..=3);
        let m: Vec<DiscreteMeasure> = (0..3)
            .map(|_| {
                let s = g.random_range(1..=6);
                random_measure(&mut g, s, d, 1.0)
            })
            .collect();
        let diam = joint_diameter(&[&m[0], &m[1], &m[2]]).max(1e-9);
        for p in [1.0, 2.0] {
            for lambda in [0.3 * diam, diam, f64::INFINITY] {
                let spec = CostSpec::new(p, lambda).unwrap();
                let w = |i: usize, j: usize| exact_distance(&m[i], &m[j], &spec).unwrap().distance;
                let d01 = w(0, 1);
                let d12 = w(1, 2);
                let d02 = w(0, 2);
                worst_sym = worst_sym
                    .max((d01 - w(1, 0)).abs())
                    .max((d12 - w(2, 1)).abs())
                    .max((d02 - w(2, 0)).abs());
                worst_tri = worst_tri
                    .max(d02 - d01 - d12)
                    .max(d01 - d02 - d12)
                    .max(d12 - d01 - d02);
                worst_bound = worst_bound.max(d01.max(d12).max(d02) - lambda);
            }
        }
    }
    Outcome {
        ok: worst_sym <= 1e-9 && worst_tri <= 1e-9 && worst_bound <= 1e-12,
        detail: format!(
            "max asymmetry {worst_sym:.2e}, max triangle excess {worst_tri:.2e}, max excess over lambda {worst_bound:.2e}"
        ),
    }
}

fn c2_oracle_equivalence() -> Outcome {
    let mut g = rng(2);
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let (s, t) = (g.random_range(1..=8), g.random_range(1..=8));
        let a = random_measure(&mut g, s, 2, 1.0);
        let b = random_measure(&mut g, t, 2, 1.0);
        let p = if k % 2 == 0 { 1.0 } else { 2.0 };
        let lambda = joint_diameter(&[&a, &b]) * g.random_range(0.3..1.2) + 1e-3;
        let spec = CostSpec::new(p, lambda).unwrap();
        let exact = exact_distance(&a, &b, &spec).unwrap().distance;
        let params = SinkhornParams::absolute(1e-3 * lambda.powf(p));
        let approx = sinkhorn_distance(&a, &b, &spec, &params).unwrap().distance;
        worst = worst.max((approx - exact).abs() / exact.max(1e-6));
    }
    Outcome {
        ok: worst < 0.01,
        detail: format!("max relative gap {worst:.3e} over 50 instances"),
    }
}

fn c3_saturation() -> Outcome {
    let mut g = rng(3);
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let d = g.random_range(1..=3);
        let (s, t) = (g.random_range(1..=8), g.random_range(1..=8));
        let a = random_measure(&mut g, s, d, 5.0);
        let b = random_measure(&mut g, t, d, 5.0);
        let p = if k % 2 == 0 { 1.0 } else { 2.0 };
        let diam = joint_diameter(&[&a, &b]);
        let classical = exact_distance(&a, &b, &CostSpec::untruncated(p).unwrap()).unwrap().distance;
        for lambda in [diam, 2.0 * diam] {
            let robust = exact_distance(&a, &b, &CostSpec::new(p, lambda.max(1e-9)).unwrap()).unwrap().distance;
            worst = worst.max((robust - classical).abs());
        }
    }
    Outcome {
        ok: worst <= 1e-9,
        detail: format!("max gap {worst:.2e} over 50 instances"),
    }
}

fn random_problem(g: &mut rand_chacha::ChaCha8Rng, n: usize, max_s: usize, p: f64, half_diam: bool) -> BarycenterProblem {
    let inputs: Vec<DiscreteMeasure> = (0..n)
        .map(|_| {
            let s = g.random_range(1..=max_s);
            random_measure(g, s, 2, 3.0)
        })
        .collect();
    let refs: Vec<&DiscreteMeasure> = inputs.iter().collect();
    let lambda = if half_diam {
        0.5 * joint_diameter(&refs) + 1e-6
    } else {
        f64::INFINITY
    };
    let w: Vec<f64> = (0..n).map(|_| g.random_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    BarycenterProblem::new(inputs, w.iter().map(|x| x / total).collect(), CostSpec::new(p, lambda).unwrap()).unwrap()
}

fn c4_descent() -> Outcome {
    let mut g = rng(4);
    let options = FreeSupportOptions {
        mass_solver: MassSolver::Ibp(SinkhornParams::default()),
        evaluation: ObjectiveMethod::exact(),
        outer_max: 100,
        outer_tol: 1e-9,
    };
    let mut worst_step = f64::NEG_INFINITY;
    let mut unconverged = 0;
    for k in 0..100u64 {
        let n = g.random_range(1..=4);
        let p = if k % 2 == 0 { 1.0 } else { 2.0 };
        let pb = random_problem(&mut g, n, 6, p, k % 4 < 2);
        let r = g.random_range(1..=6);
        let init = kmeans_init(&pb, r, k);
        let res = free_support_from(&pb, &init, None, &options).unwrap();
        let mut prev = res.initial_objective;
        for &f in &res.objective_trace {
            worst_step = worst_step.max(f - prev);
            prev = f;
        }
        if !res.converged {
            unconverged += 1;
        }
    }
    Outcome {
        ok: worst_step <= 1e-9 && unconverged == 0,
        detail: format!("largest step increase {worst_step:.2e}, {unconverged} unconverged of 100"),
    }
}

fn c5_support_bound() -> Outcome {
    let mut g = rng(5);
    let mut violations = 0;
    let mut tightest = i64::MAX;
    for _ in 0..50 {
        let n = g.random_range(2..=3);
        let p = if g.random_bool(0.5) { 1.0 } else { 2.0 };
        let truncated = g.random_bool(0.5);
        let pb = random_problem(&mut g, n, 3, p, truncated);
        let cands = candidate_supports(&pb, 1000).unwrap();
        let sol = solve_barycenter_lp(&pb, &cands, DEFAULT_ORACLE_CAP).unwrap();
        let bound = pb.inputs().iter().map(DiscreteMeasure::len).sum::<usize>() + 1 - n;
        let atoms = sol.mass.iter().filter(|&&m| m > 1e-9).count();
        if atoms > bound {
            violations += 1;
        }
        tightest = tightest.min(bound as i64 - atoms as i64);
    }
    Outcome {
        ok: violations == 0,
        detail: format!("{violations} violations of 50, smallest slack {tightest}"),
    }
}

fn value(records: &[RunRecord], metric: &str, lambda: f64, ratio: Option<f64>) -> f64 {
    records
        .iter()
        .find(|r| r.metric == metric && r.lambda == lambda && r.ratio == ratio)
        .map(|r| r.value)
        .unwrap_or(f64::NAN)
}

/// Grid argmin of `score`; a later λ must win by more than the tie margin.
fn tuned_lambda(grid: &[f64], score: impl Fn(f64) -> f64) -> f64 {
    let mut best = grid[0];
    let mut best_score = score(best);
    for &l in &grid[1..] {
        let s = score(l);
        if s < best_score * (1.0 - TIE) {
            best = l;
            best_score = s;
        }
    }
    best
}

fn c6_contamination(csv_seed0: &mut Option<String>) -> Outcome {
    let mut passing = 0;
    let mut lines = Vec::new();
    let mut wb_curve = Vec::new();
    let mut rwb_curve = Vec::new();
    for seed in 0..SEEDS {
        let cfg = ExperimentConfig::desk(Scenario::Contamination, seed);
        let records = run_lambda_sweep(&cfg).unwrap();
        if seed == 0 {
            *csv_seed0 = Some(records_to_csv(&records));
        }
        let tuned = tuned_lambda(&cfg.lambda_grid, |l| value(&records, "mean_w_to_true", l, None));
        let mut better_everywhere = true;
        let mut wb_row = Vec::new();
        let mut rwb_row = Vec::new();
        for &ratio in &cfg.ratios {
            let rwb = value(&records, "w_to_true", tuned, Some(ratio));
            let wb = value(&records, "w_to_true", f64::INFINITY, Some(ratio));
            if ratio >= 0.05 && !(rwb < wb * (1.0 - TIE)) {
                better_everywhere = false;
            }
            wb_row.push(wb);
            rwb_row.push(rwb);
        }
        let interior = tuned < *cfg.lambda_grid.last().unwrap();
        if better_everywhere && interior {
            passing += 1;
        }
        lines.push(format!(
            "seed {seed}: tuned lambda {tuned}, RWB/WB at ratio 0.25 {:.4}/{:.4}, (a) {better_everywhere} (b) {interior}",
            rwb_row.last().unwrap(),
            wb_row.last().unwrap()
        ));
        wb_curve.push(wb_row);
        rwb_curve.push(rwb_row);
    }
    for l in &lines {
        println!("    {l}");
    }
    let mean = |rows: &[Vec<f64>]| -> Vec<f64> {
        (0..rows[0].len())
            .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64)
            .collect()
    };
    let (wb_mean, rwb_mean) = (mean(&wb_curve), mean(&rwb_curve));
    let monotone = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);
    println!(
        "    mean error over seeds by ratio: WB {:.3?} (non-decreasing {}), RWB {:.3?} (non-decreasing {})",
        wb_mean,
        monotone(&wb_mean),
        rwb_mean,
        monotone(&rwb_mean)
    );
    Outcome {
        ok: passing >= 8,
        detail: format!("{passing}/{SEEDS} seeds satisfy (a) and (b), need 8"),
    }
}

fn c7_heavytail(csv_seed0: &mut Option<String>) -> Outcome {
    let mut passing = 0;
    for seed in 0..SEEDS {
        let cfg = ExperimentConfig::desk(Scenario::Heavytail, seed);
        let records = run_lambda_sweep(&cfg).unwrap();
        if seed == 0 {
            *csv_seed0 = Some(records_to_csv(&records));
        }
        let tuned = tuned_lambda(&cfg.lambda_grid, |l| value(&records, "w_to_true", l, None));
        let rwb = value(&records, "w_to_true", tuned, None);
        let wb = value(&records, "w_to_true", f64::INFINITY, None);
        let ok = rwb < wb * (1.0 - TIE);
        if ok {
            passing += 1;
        }
        println!("    seed {seed}: tuned lambda {tuned}, RWB {rwb:.4} vs WB {wb:.4}, better {ok}");
    }
    Outcome {
        ok: passing >= 8,
        detail: format!("{passing}/{SEEDS} seeds with RWB error below WB error, need 8"),
    }
}

fn c8_images(csv_seed0: &mut Option<String>) -> Outcome {
    let (mut wb_leak, mut rwb_leak) = (0.0, 0.0);
    let mut worst_gap = f64::NEG_INFINITY;
    for seed in 0..IMAGE_SEEDS {
        let cfg = ExperimentConfig::desk(Scenario::EllipseImages, seed);
        let out = run_image_experiment(&cfg).unwrap();
        if seed == 0 {
            *csv_seed0 = Some(records_to_csv(&out.records));
        }
        println!(
            "    seed {seed}: leak RWB {:.4} WB {:.4}, f free {:.6} fixed {:.6}",
            out.rwb_leak, out.wb_leak, out.f_free, out.f_fixed
        );
        wb_leak += out.wb_leak / IMAGE_SEEDS as f64;
        rwb_leak += out.rwb_leak / IMAGE_SEEDS as f64;
        worst_gap = worst_gap.max(out.f_free - out.f_fixed);
    }
    Outcome {
        ok: rwb_leak <= 0.5 * wb_leak && worst_gap <= 1e-6,
        detail: format!(
            "mean leak RWB {rwb_leak:.4} vs 0.5 x WB {:.4}; max f(free) - f(fixed) {worst_gap:.2e}",
            0.5 * wb_leak
        ),
    }
}

fn c9_determinism(first: &[(Scenario, Option<String>)]) -> Outcome {
    let mut mismatches = Vec::new();
    for (scenario, csv) in first {
        let Some(csv) = csv else {
            mismatches.push(format!("{scenario}: no first run"));
            continue;
        };
        let cfg = ExperimentConfig::desk(*scenario, 0);
        // rerun on a different thread count
        let again = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .unwrap()
            .install(|| match scenario {
                Scenario::EllipseImages => records_to_csv(&run_image_experiment(&cfg).unwrap().records),
                _ => records_to_csv(&run_lambda_sweep(&cfg).unwrap()),
            });
        if &again != csv {
            mismatches.push(scenario.to_string());
        }
    }
    let cfg = ExperimentConfig::desk(Scenario::Pipeline1d, 0);
    if records_to_csv(&run_lambda_sweep(&cfg).unwrap()) != records_to_csv(&run_lambda_sweep(&cfg).unwrap()) {
        mismatches.push("pipeline1d".into());
    }
    Outcome {
        ok: mismatches.is_empty(),
        detail: if mismatches.is_empty() {
            "contamination, heavytail, ellipse_images and pipeline1d CSVs byte-identical on rerun".into()
        } else {
            format!("differences in {}", mismatches.join(", "))
        },
    }
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a bare filter
    // argument restricts the run to the listed criterion numbers.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |k: u32| only.is_empty() || only.contains(&k);
    let mut contamination_csv = None;
    let mut heavytail_csv = None;
    let mut images_csv = None;
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut run = |k: u32, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(k) {
            return;
        }
        let t = Instant::now();
        let out = f();
        let detail = format!("{}; {:.1}s", out.detail, t.elapsed().as_secs_f64());
        common::report(&k.to_string(), out.ok, &detail);
        results.push((k, out));
    };
    run(1, &mut c1_metric_axioms);
    run(2, &mut c2_oracle_equivalence);
    run(3, &mut c3_saturation);
    run(4, &mut c4_descent);
    run(5, &mut c5_support_bound);
    run(6, &mut || c6_contamination(&mut contamination_csv));
    run(7, &mut || c7_heavytail(&mut heavytail_csv));
    run(8, &mut || c8_images(&mut images_csv));
    let first = vec![
        (Scenario::Contamination, contamination_csv.clone()),
        (Scenario::Heavytail, heavytail_csv.clone()),
        (Scenario::EllipseImages, images_csv.clone()),
    ];
    if wanted(9) && only.is_empty() {
        run(9, &mut || c9_determinism(&first));
    }

    let failed: Vec<u32> = results.iter().filter(|(_, o)| !o.ok).map(|(k, _)| *k).collect();
    let unexpected: Vec<u32> = failed.iter().copied().filter(|k| !KNOWN_FAILURES.contains(k)).collect();
    let fixed: Vec<u32> = results
        .iter()
        .filter(|(k, o)| o.ok && KNOWN_FAILURES.contains(k))
        .map(|(k, _)| *k)
        .collect();
    println!(
        "acceptance: {} passed, {} failed {:?} (known failures {:?})",
        results.len() - failed.len(),
        failed.len(),
        failed,
        KNOWN_FAILURES
    );
    if !unexpected.is_empty() || !fixed.is_empty() {
        eprintln!("unexpected failures {unexpected:?}; known failures now passing {fixed:?}");
        std::process::exit(1);
    }
}
