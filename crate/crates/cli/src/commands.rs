use std::io;
use std::path::Path;
use std::time::Instant;

use mfg_lqg::lqg::{
    detectability_stabilizability, expected_cost, solve_finite_horizon, solve_infinite_horizon, validate_convexity,
    LqgProblem, PSD_TOL,
};
use mfg_lqg::mfg_model::{validate_problem, MmMfgProblem};
use mfg_lqg::mfg_solver::{closed_loop_stability, solve_consistency_finite, solve_consistency_infinite, MfgSolution};
use mfg_lqg::nash::gap_vs_population;
use mfg_lqg::par::Execution;
use mfg_lqg::population::{
    expected_cost_exact, finite_cost_monte_carlo, mean_field_convergence_study, simulate_population, AgentId,
    PopulationConfig,
};
use mfg_lqg::{Error, Mat};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse, LqgConfig, MfgConfig};
use crate::output::{grid_header, grid_rows, matrix_rows, nested, num, write_json, Table, Timing};

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub enum Failure {
    Solver(Error),
    Io(io::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Solver(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Solver(e) => match e {
                Error::Config(_) | Error::Shape(_) | Error::InvalidGrid(_) => 2,
                Error::Assumption(_) => 4,
                _ => 3,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Solver(e) => write!(f, "{e}"),
            Failure::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

pub type Outcome = Result<Vec<Timing>, Failure>;

struct Clock {
    start: Instant,
    timings: Vec<Timing>,
}

impl Clock {
    fn new() -> Self {
        Self { start: Instant::now(), timings: Vec::new() }
    }

    fn lap(&mut self, phase: &str) {
        let now = Instant::now();
        self.timings.push(Timing { phase: phase.into(), seconds: (now - self.start).as_secs_f64() });
        self.start = now;
    }
}

pub fn solve_lqg(config: &[u8], out: &Path) -> Outcome {
    let mut clock = Clock::new();
    let cfg: LqgConfig = parse(config)?;
    let p = cfg.to_problem()?;
    p.check_shapes()?;
    let convexity = validate_convexity(&p, PSD_TOL)?;
    let sol = solve_finite_horizon(&p)?;
    let cost = expected_cost(&p, &sol.law())?;
    clock.lap("solve");

    let header = grid_header(&[]);
    let mut pi = Table::new(&header);
    grid_rows(&mut pi, &[], &sol.pi);
    pi.write(out, "pi.csv")?;
    let mut s = Table::new(&header);
    grid_rows(&mut s, &[], &sol.s);
    s.write(out, "s.csv")?;
    let mut gains = Table::new(&grid_header(&["kind"]));
    grid_rows(&mut gains, &["gain".into()], &sol.gain);
    grid_rows(&mut gains, &["feedforward".into()], &sol.feedforward);
    gains.write(out, "gains.csv")?;

    let stationary = if cfg.infinite_horizon { Some(stationary_summary(&p, out)?) } else { None };
    let summary = json!({
        "command": "solve-lqg",
        "T": p.grid.t_end(),
        "steps": p.grid.steps(),
        "pi0": nested(sol.pi.first()),
        "s0": nested(sol.s.first()),
        "optimal_cost": cost,
        "convexity": convexity,
        "stationary": stationary,
    });
    write_json(out, "summary.json", &summary)?;
    clock.lap("write");
    Ok(clock.timings)
}

fn stationary_summary(p: &LqgProblem, out: &Path) -> Result<serde_json::Value, Failure> {
    let report = detectability_stabilizability(p, 1e-9)?;
    if !report.passed() {
        return Err(Error::Assumption(format!(
            "stationary problem: stabilizable {}, detectable {}",
            report.stabilizable.passed(),
            report.detectable.passed()
        ))
        .into());
    }
    let st = solve_infinite_horizon(p)?;
    let mut table = Table::new(&["kind", "row", "col", "value"]);
    matrix_rows(&mut table, &["pi".into()], &st.pi);
    matrix_rows(&mut table, &["s".into()], &st.s);
    matrix_rows(&mut table, &["gain".into()], &st.gain);
    matrix_rows(&mut table, &["feedforward".into()], &st.feedforward);
    table.write(out, "stationary.csv")?;
    Ok(json!({
        "pi": nested(&st.pi),
        "s": nested(&st.s),
        "gain": nested(&st.gain),
        "feedforward": nested(&st.feedforward),
        "are_residual": st.residual,
        "detectability": report,
    }))
}

struct Game {
    cfg: MfgConfig,
    problem: MmMfgProblem,
    solution: MfgSolution,
}

fn solve_game(config: &[u8], execution: Execution) -> Result<Game, Failure> {
    let cfg: MfgConfig = parse(config)?;
    let problem = cfg.to_problem()?;
    let mut fp = cfg.fixed_point();
    fp.execution = execution;
    let solution = if cfg.infinite_horizon {
        solve_consistency_infinite(&problem, &fp)?
    } else {
        solve_consistency_finite(&problem, &fp)?
    };
    Ok(Game { cfg, problem, solution })
}

fn agent_label(agent: AgentId) -> String {
    match agent {
        AgentId::Major => "major".into(),
        AgentId::Minor(i) => format!("minor{i}"),
    }
}

pub fn solve_mfg(config: &[u8], out: &Path) -> Outcome {
    let mut clock = Clock::new();
    let Game { cfg, problem: p, solution: sol } = solve_game(config, Execution::Parallel)?;
    clock.lap("solve");

    let header = grid_header(&[]);
    let typed = grid_header(&["type"]);
    let mut t = Table::new(&header);
    grid_rows(&mut t, &[], &sol.pi0);
    t.write(out, "pi0.csv")?;
    let mut t = Table::new(&header);
    grid_rows(&mut t, &[], &sol.s0);
    t.write(out, "s0.csv")?;
    let mut pik = Table::new(&typed);
    let mut sk = Table::new(&typed);
    for k in 0..sol.num_types() {
        grid_rows(&mut pik, &[(k + 1).to_string()], &sol.pik[k]);
        grid_rows(&mut sk, &[(k + 1).to_string()], &sol.sk[k]);
    }
    pik.write(out, "pik.csv")?;
    sk.write(out, "sk.csv")?;
    let mut mf = Table::new(&grid_header(&["block"]));
    grid_rows(&mut mf, &["abar".into()], &sol.mf_law.abar);
    grid_rows(&mut mf, &["gbar".into()], &sol.mf_law.gbar);
    grid_rows(&mut mf, &["mbar".into()], &sol.mf_law.mbar);
    mf.write(out, "mean_field.csv")?;
    let mut gains = Table::new(&grid_header(&["agent", "kind"]));
    grid_rows(&mut gains, &["major".into(), "gain".into()], &sol.major_gain);
    grid_rows(&mut gains, &["major".into(), "feedforward".into()], &sol.major_feedforward);
    for k in 0..sol.num_types() {
        let who = format!("type{}", k + 1);
        grid_rows(&mut gains, &[who.clone(), "gain".into()], &sol.minor_gains[k]);
        grid_rows(&mut gains, &[who, "feedforward".into()], &sol.minor_feedforwards[k]);
    }
    gains.write(out, "gains.csv")?;
    let mut res = Table::new(&["iteration", "residual"]);
    for (i, r) in sol.report.residuals.iter().enumerate() {
        res.row(&[(i + 1).to_string(), num(*r)]);
    }
    res.write(out, "residuals.csv")?;

    let terminal_ok = sol.pi0.last() == &sol.major_system.weights.g
        && (0..sol.num_types()).all(|k| sol.pik[k].last() == &sol.minor_systems[k].weights.g);
    let stability: Option<Vec<_>> = cfg.infinite_horizon.then(|| {
        closed_loop_stability(&sol, p.rho)
            .into_iter()
            .map(|(agent, abscissa)| json!({"agent": agent, "spectral_abscissa": abscissa}))
            .collect()
    });
    let summary = json!({
        "command": "solve-mfg",
        "T": p.grid.t_end(),
        "steps": p.grid.steps(),
        "num_types": p.num_types(),
        "stationary": sol.stationary,
        "iterations": sol.report.iterations,
        "final_residual": sol.report.final_residual,
        "terminal_conditions_exact": terminal_ok,
        "validation": validate_problem(&p, PSD_TOL),
        "closed_loop_stability": stability,
    });
    write_json(out, "summary.json", &summary)?;
    clock.lap("write");
    Ok(clock.timings)
}

#[derive(Serialize)]
struct CostRow {
    agent: String,
    method: &'static str,
    value: f64,
    std_error: f64,
}

pub fn simulate(config: &[u8], out: &Path, seed: Option<u64>) -> Outcome {
    let mut clock = Clock::new();
    let Game { cfg, problem: p, solution: sol } = solve_game(config, Execution::Parallel)?;
    clock.lap("solve");
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let sim = cfg.simulation();
    let mut pop = PopulationConfig::new(&p, sim.n_agents, sim.paths, seed)?;
    pop.xbar0 = cfg.xbar0(p.n, p.num_types())?;
    let bundle = simulate_population(&p, &sol, &pop)?;
    clock.lap("simulate");

    let grid = p.grid;
    let mut traj = Table::new(&["path", "node", "t", "agent", "row", "value"]);
    let mut controls = Table::new(&["path", "node", "t", "agent", "row", "value"]);
    for (path_id, path) in bundle.paths.iter().enumerate() {
        for j in 0..grid.num_nodes() {
            let base = [path_id.to_string(), j.to_string(), num(grid.node(j))];
            let emit = |table: &mut Table, agent: &str, v: &Mat| {
                for (r, x) in v.iter().enumerate() {
                    let mut cells = base.to_vec();
                    cells.extend([agent.to_string(), r.to_string(), num(*x)]);
                    table.row(&cells);
                }
            };
            emit(&mut traj, "major", &path.major_states[j]);
            for i in 0..pop.n_agents {
                emit(&mut traj, &format!("minor{i}"), &path.minor_states[j].columns(i, 1).into_owned());
            }
            emit(&mut traj, "aggregate", &path.aggregate[j]);
            emit(&mut traj, "type_means", &path.type_means[j]);
            emit(&mut traj, "xbar", &path.xbar[j]);
            emit(&mut controls, "major", &path.major_controls[j]);
            for i in 0..pop.n_agents {
                emit(&mut controls, &format!("minor{i}"), &path.minor_controls[j].columns(i, 1).into_owned());
            }
        }
    }
    traj.write(out, "trajectories.csv")?;
    controls.write(out, "controls.csv")?;

    let mut costs = Vec::new();
    let mut agents = vec![AgentId::Major];
    agents.extend((0..p.num_types()).filter_map(|k| pop.first_of_type(k)).map(AgentId::Minor));
    for agent in agents {
        let mc = finite_cost_monte_carlo(&p, &bundle, agent)?;
        costs.push(CostRow { agent: agent_label(agent), method: "monte_carlo", value: mc.value, std_error: mc.std_error });
        let exact = expected_cost_exact(&p, &sol, &pop, agent)?;
        costs.push(CostRow { agent: agent_label(agent), method: "exact", value: exact.value, std_error: 0.0 });
    }
    let mut table = Table::new(&["agent", "method", "value", "std_error"]);
    for c in &costs {
        table.row(&[c.agent.clone(), c.method.into(), num(c.value), num(c.std_error)]);
    }
    table.write(out, "costs.csv")?;
    clock.lap("costs");

    let study = if sim.convergence_sizes.is_empty() {
        None
    } else {
        let study = mean_field_convergence_study(
            &p,
            &sol,
            &sim.convergence_sizes,
            sim.convergence_paths,
            seed,
            Execution::Parallel,
        )?;
        let mut table = Table::new(&["N", "rms"]);
        for r in &study.rows {
            table.row(&[r.n_agents.to_string(), num(r.rms)]);
        }
        table.write(out, "convergence.csv")?;
        Some(study)
    };
    clock.lap("convergence");

    let summary = json!({
        "command": "simulate",
        "seed": seed,
        "N": pop.n_agents,
        "paths": pop.num_paths,
        "type_counts": pop.type_counts(p.num_types()),
        "costs": costs,
        "convergence": study,
    });
    write_json(out, "summary.json", &summary)?;
    Ok(clock.timings)
}

pub fn nash_gap(config: &[u8], out: &Path) -> Outcome {
    let mut clock = Clock::new();
    let Game { cfg, problem: p, solution: sol } = solve_game(config, Execution::Parallel)?;
    clock.lap("solve");
    let sizes = cfg.nash().sizes;
    let cells = gap_vs_population(&p, &sol, &sizes, Execution::Parallel)?;
    clock.lap("gaps");

    let mut detail = Table::new(&["N", "agent", "type", "j_equilibrium", "j_best_response", "gap", "joint_dim"]);
    for c in &cells {
        let ty = match c.agent {
            AgentId::Major => "major".to_string(),
            AgentId::Minor(i) => (mfg_lqg::population::assign_types(&p.pi, c.n_agents)[i] + 1).to_string(),
        };
        detail.row(&[
            c.n_agents.to_string(),
            agent_label(c.agent),
            ty,
            num(c.j_eq),
            num(c.j_br),
            num(c.gap),
            c.joint_dim.to_string(),
        ]);
    }
    detail.write(out, "gap_cells.csv")?;
    let mut table = Table::new(&["N", "worst_gap", "worst_agent"]);
    let mut worst = Vec::new();
    for &n in &sizes {
        let w = cells
            .iter()
            .filter(|c| c.n_agents == n)
            .max_by(|a, b| a.gap.total_cmp(&b.gap))
            .expect("every size has deviators");
        table.row(&[n.to_string(), num(w.gap), agent_label(w.agent)]);
        worst.push(json!({"N": n, "gap": w.gap, "agent": agent_label(w.agent)}));
    }
    table.write(out, "gaps.csv")?;
    let summary = json!({
        "command": "nash-gap",
        "sizes": sizes,
        "worst": worst,
        "min_gap": cells.iter().map(|c| c.gap).fold(f64::INFINITY, f64::min),
    });
    write_json(out, "summary.json", &summary)?;
    clock.lap("write");
    Ok(clock.timings)
}
