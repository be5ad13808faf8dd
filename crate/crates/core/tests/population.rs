use std::sync::OnceLock;

use mfg_lqg::mfg_model::fixtures::{toy_problem, toy_problem_on};
use mfg_lqg::mfg_model::MmMfgProblem;
use mfg_lqg::mfg_solver::{solve_consistency_finite, FixedPointConfig, MfgSolution};
use mfg_lqg::numerics::max_abs;
use mfg_lqg::par::Execution;
use mfg_lqg::population::*;
use mfg_lqg::{Mat, TimeGrid};
use proptest::prelude::*;

fn toy() -> &'static (MmMfgProblem, MfgSolution) {
    static CELL: OnceLock<(MmMfgProblem, MfgSolution)> = OnceLock::new();
    CELL.get_or_init(|| {
        let p = toy_problem();
        let sol = solve_consistency_finite(&p, &FixedPointConfig::default()).unwrap();
        (p, sol)
    })
}

fn silence(p: &mut MmMfgProblem) {
    p.major.sigma = Mat::zeros(p.n, p.r);
    for t in &mut p.minors {
        t.sigma = Mat::zeros(p.n, p.r);
    }
    p.initial_cov = Mat::zeros(p.n, p.n);
}

#[test]
fn monte_carlo_brackets_exact_cost() {
    let (p, sol) = toy();
    let cfg = PopulationConfig::new(p, 8, 2000, 11).unwrap();
    let bundle = simulate_population(p, sol, &cfg).unwrap();
    for agent in [AgentId::Major, AgentId::Minor(0), AgentId::Minor(1)] {
        let mc = finite_cost_monte_carlo(p, &bundle, agent).unwrap();
        let exact = expected_cost_exact(p, sol, &cfg, agent).unwrap();
        let em = em_expected_cost(p, sol, &cfg, agent).unwrap();
        assert!(mc.std_error > 0.0);
        assert!((mc.value - exact.value).abs() < 3.0 * mc.std_error, "{agent}: {mc:?} vs {exact:?}");
        assert!((mc.value - em.value).abs() < 3.0 * mc.std_error, "{agent}: {mc:?} vs {em:?}");
    }
}

#[test]
fn discrete_cost_converges_at_first_order() {
    let cost = |steps| {
        let p = toy_problem_on(TimeGrid::new(1.0, steps).unwrap(), 0.0);
        let sol = solve_consistency_finite(&p, &FixedPointConfig::default()).unwrap();
        let cfg = PopulationConfig::new(&p, 4, 1, 0).unwrap();
        em_expected_cost(&p, &sol, &cfg, AgentId::Minor(0)).unwrap().value
    };
    let (c1, c2, c3) = (cost(100), cost(200), cost(400));
    let ratio = (c1 - c2).abs() / (c2 - c3).abs();
    assert!((1.5..=3.0).contains(&ratio), "{ratio}");
}

#[test]
fn noiseless_deviation_is_step_bias() {
    // with no randomness the only difference between the simulated averages
    // and the mean field is the Euler step against the RK4 step
    let rms = |steps| {
        let mut p = toy_problem_on(TimeGrid::new(1.0, steps).unwrap(), 0.0);
        silence(&mut p);
        let sol = solve_consistency_finite(&p, &FixedPointConfig::default()).unwrap();
        mean_field_convergence_study(&p, &sol, &[4], 1, 0, Execution::Parallel).unwrap().rows[0].rms
    };
    let (coarse, fine) = (rms(200), rms(400));
    assert!(fine < 1e-3, "{fine}");
    let ratio = coarse / fine;
    assert!((1.8..=2.2).contains(&ratio), "{ratio}");
}

#[test]
fn larger_population_tracks_mean_field_closer() {
    let (p, sol) = toy();
    let sup = |n| {
        let cfg = PopulationConfig::new(p, n, 4, 5).unwrap();
        let bundle = simulate_population(p, sol, &cfg).unwrap();
        bundle
            .paths
            .iter()
            .flat_map(|path| path.type_means.iter().zip(&path.xbar).map(|(a, b)| max_abs(&(a - b))))
            .fold(0.0, f64::max)
    };
    assert!(sup(1024) < sup(16));
    let study = mean_field_convergence_study(p, sol, &[4, 16, 64, 256], 16, 3, Execution::Parallel).unwrap();
    for w in study.rows.windows(2) {
        assert!(w[1].rms <= w[0].rms, "{:?}", study.rows);
    }
}

#[test]
fn diverging_population_is_reported() {
    let mut p = toy_problem();
    for t in &mut p.minors {
        t.a = Mat::identity(2, 2) * 1e5;
    }
    let sol = solve_consistency_finite(&toy().0, &FixedPointConfig::default()).unwrap();
    let cfg = PopulationConfig::new(&p, 2, 2, 0).unwrap();
    match simulate_population(&p, &sol, &cfg) {
        Err(mfg_lqg::Error::DivergedPath { path, .. }) => assert_eq!(path, 0),
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn config_rejects_empty_types() {
    let (p, _) = toy();
    assert!(matches!(PopulationConfig::new(p, 1, 1, 0), Err(mfg_lqg::Error::Config(_))));
    assert!(matches!(PopulationConfig::new(p, 0, 1, 0), Err(mfg_lqg::Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_counts_follow_weights(raw in proptest::collection::vec(0.05f64..1.0, 1..5), n in 1usize..300) {
        let total: f64 = raw.iter().sum();
        let pi: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let types = assign_types(&pi, n);
        prop_assert_eq!(types.len(), n);
        for (k, w) in pi.iter().enumerate() {
            let count = types.iter().filter(|&&t| t == k).count() as f64;
            prop_assert!((count - w * n as f64).abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn type_means_reaggregate(counts in proptest::collection::vec(1usize..6, 1..4), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 2;
        let total: usize = counts.iter().sum();
        let states = Mat::from_fn(n, total, |_, _| rng.random_range(-1.0..1.0));
        let mut start = 0;
        let mut means = Vec::new();
        for &c in &counts {
            let block = states.columns(start, c);
            means.push(block.column_sum() / c as f64);
            start += c;
        }
        let stacked = Mat::from_iterator(n * counts.len(), 1, means.iter().flat_map(|m| m.iter().copied()));
        let back = aggregate_from_type_means(&stacked, &counts, n);
        let direct = Mat::from_column_slice(n, 1, (states.column_sum() / total as f64).as_slice());
        prop_assert!(max_abs(&(back - direct)) < 1e-14);
    }
}

#[test]
fn simulation_is_schedule_independent_for_many_seeds() {
    let (p, sol) = toy();
    for seed in [0u64, 1, u64::MAX] {
        let cfg = PopulationConfig::new(p, 6, 3, seed).unwrap();
        let a = simulate_population(p, sol, &cfg).unwrap();
        let b = simulate_population(p, sol, &cfg.clone().with_execution(Execution::Sequential)).unwrap();
        assert_eq!(a, b);
    }
}
