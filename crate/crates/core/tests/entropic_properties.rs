mod common;

use common::{joint_diameter, random_measure, rng};
use rand::Rng;
use rwb::entropic::round_to_marginals;
use rwb::exact_ot::exact_distance;
use rwb::{ibp_barycenter, sinkhorn_distance, BarycenterProblem, CostSpec, Matrix, SinkhornParams};

#[test]
fn sinkhorn_agrees_with_exact() {
    let mut g = rng(21);
    for k in 0..50 {
        let (s, t) = (g.random_range(1..=8), g.random_range(1..=8));
        let a = random_measure(&mut g, s, 2, 1.0);
        let b = random_measure(&mut g, t, 2, 1.0);
        let p = if k % 2 == 0 { 1.0 } else { 2.0 };
        let lambda = joint_diameter(&[&a, &b]) * g.random_range(0.3..1.2) + 1e-3;
        let spec = CostSpec::new(p, lambda).unwrap();
        let exact = exact_distance(&a, &b, &spec).unwrap().distance;
        let params = SinkhornParams::absolute(1e-3 * lambda.powf(p));
        let approx = sinkhorn_distance(&a, &b, &spec, &params).unwrap();
        assert!(approx.plan.is_feasible(1e-9));
        let rel = (approx.distance - exact).abs() / exact.max(1e-6);
        assert!(rel < 0.01, "instance {k}: {} vs {exact}", approx.distance);
    }
}

#[test]
fn shrinking_epsilon_does_not_raise_the_cost() {
    let mut g = rng(22);
    for _ in 0..10 {
        let a = random_measure(&mut g, 6, 2, 1.0);
        let b = random_measure(&mut g, 7, 2, 1.0);
        let spec = CostSpec::new(2.0, 0.8).unwrap();
        let mut last = f64::INFINITY;
        for rel in [1e-1, 5e-2, 2e-2, 1e-2, 5e-3, 2e-3] {
            let mut params = SinkhornParams::relative(rel);
            params.log_domain = true;
            params.tol = 1e-12;
            params.max_iter = 100_000;
            let c = sinkhorn_distance(&a, &b, &spec, &params).unwrap().cost;
            assert!(c <= last + 1e-6, "rel {rel}: {c} > {last}");
            last = c;
        }
    }
}

#[test]
fn rounding_is_feasible_for_arbitrary_positive_matrices() {
    let mut g = rng(23);
    for _ in 0..100 {
        let (r, s) = (g.random_range(1..=6), g.random_range(1..=6));
        let m = Matrix::from_fn(r, s, |_, _| g.random_range(0.0..1.0));
        let a = random_measure(&mut g, r, 1, 1.0);
        let b = random_measure(&mut g, s, 1, 1.0);
        let plan = round_to_marginals(&m, a.weights(), b.weights()).unwrap();
        assert!(plan.is_feasible(1e-9));
    }
}

#[test]
fn ibp_objective_bounded_by_cap() {
    let mut g = rng(24);
    for _ in 0..10 {
        let inputs: Vec<_> = (0..3).map(|_| random_measure(&mut g, 5, 2, 4.0)).collect();
        let support: Vec<Vec<f64>> = (0..6).map(|_| vec![g.random_range(0.0..4.0), g.random_range(0.0..4.0)]).collect();
        let spec = CostSpec::new(2.0, 0.9).unwrap();
        let pb = BarycenterProblem::uniform(inputs, spec).unwrap();
        let res = ibp_barycenter(&pb, &support, &SinkhornParams::default()).unwrap();
        assert!(res.objective <= spec.cost_cap() + 1e-12);
        assert!((res.mass.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for plan in &res.plans {
            assert!(plan.is_feasible(1e-9));
        }
    }
}

#[test]
fn ibp_is_thread_count_independent() {
    let mut g = rng(25);
    let inputs: Vec<_> = (0..4).map(|_| random_measure(&mut g, 8, 2, 3.0)).collect();
    let support: Vec<Vec<f64>> = (0..10).map(|_| vec![g.random_range(0.0..3.0), g.random_range(0.0..3.0)]).collect();
    let pb = BarycenterProblem::uniform(inputs, CostSpec::new(1.0, 1.5).unwrap()).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| ibp_barycenter(&pb, &support, &SinkhornParams::default()).unwrap().mass)
    };
    assert_eq!(run(1), run(3));
}
