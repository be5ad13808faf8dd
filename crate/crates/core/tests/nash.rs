use mfg_lqg::mfg_model::fixtures::{scalar_problem, toy_problem};
use mfg_lqg::mfg_solver::{solve_consistency_finite, FixedPointConfig};
use mfg_lqg::nash::*;
use mfg_lqg::numerics::max_abs;
use mfg_lqg::par::Execution;
use mfg_lqg::population::{AgentId, JointLayout, PopulationConfig};
use mfg_lqg::{Mat, TimeGrid};

#[test]
fn gaps_shrink_with_population() {
    let p = toy_problem();
    let sol = solve_consistency_finite(&p, &FixedPointConfig::default()).unwrap();
    let sizes = [2, 4, 8, 16, 32];
    let table = gap_vs_population(&p, &sol, &sizes, Execution::Parallel).unwrap();
    assert_eq!(table.len(), sizes.len() * 3);
    for r in &table {
        assert!(r.gap >= -1e-8, "{r:?}");
    }
    // worst gap per population size
    let worst: Vec<f64> = sizes
        .iter()
        .map(|&n| table.iter().filter(|r| r.n_agents == n).map(|r| r.gap).fold(f64::MIN, f64::max))
        .collect();
    for w in worst.windows(2) {
        assert!(w[1] <= 1.1 * w[0], "{worst:?}");
    }
    assert!(table.iter().filter(|r| r.n_agents == 32).all(|r| r.gap < 1e-3));
}

#[test]
fn uncoupled_joint_system_is_block_diagonal() {
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let mut p = scalar_problem(grid, 0.0);
    p.major.f = Mat::zeros(1, 1);
    p.major.h = Mat::zeros(1, 1);
    p.minors[0].f = Mat::zeros(1, 1);
    p.minors[0].g = Mat::zeros(1, 1);
    p.minors[0].h = Mat::zeros(1, 1);
    p.minors[0].h_hat = Mat::zeros(1, 1);
    let sol = solve_consistency_finite(&p, &FixedPointConfig::default()).unwrap();
    let cfg = PopulationConfig::new(&p, 1, 1, 0).unwrap();
    let dev = DeviationProblem::new(&p, &sol, &cfg, AgentId::Minor(0)).unwrap();
    for t in [0.0, 0.37, 1.0] {
        let (f, _) = dev.open_loop(t).unwrap();
        // the minor agent neither sees nor drives anyone else
        assert_eq!(f[(0, 1)], 0.0);
        assert_eq!(f[(0, 2)], 0.0);
        assert_eq!(f[(1, 0)], 0.0);
        assert_eq!(f[(2, 0)], 0.0);
    }
}

#[test]
fn input_matrix_touches_only_own_rows() {
    let p = toy_problem();
    let cfg = PopulationConfig::new(&p, 4, 1, 0).unwrap();
    let layout = JointLayout { n: 2, n_agents: 4, num_types: 2 };
    for agent in [AgentId::Major, AgentId::Minor(2)] {
        let b = layout.input_matrix(&p, &cfg.type_assignment, agent);
        let own = match agent {
            AgentId::Major => layout.major(),
            AgentId::Minor(i) => layout.minor(i),
        };
        for row in 0..layout.dim() {
            if !(own..own + 2).contains(&row) {
                assert_eq!(max_abs(&b.rows(row, 1).into_owned()), 0.0);
            }
        }
    }
}

#[test]
fn oversized_population_hits_the_guard() {
    let p = toy_problem();
    let sol = solve_consistency_finite(&p, &FixedPointConfig::default()).unwrap();
    let cfg = PopulationConfig::new(&p, 1000, 1, 0).unwrap();
    assert!(matches!(
        epsilon_nash_gap(&p, &sol, &cfg, AgentId::Major),
        Err(mfg_lqg::Error::DimensionGuard { .. })
    ));
}
