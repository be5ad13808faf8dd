//! Epsilon-Nash gaps: the cost improvement one agent obtains by deviating
//! optimally while everyone else keeps the equilibrium laws.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mfg_model::MmMfgProblem;
use crate::mfg_solver::MfgSolution;
use crate::moments::{self, law_cost, FlowCoefficients};
use crate::numerics::{GridFunction, Mat};
use crate::par::{try_map_indexed, Execution};
use crate::population::{
    expected_cost_exact, joint_cost, population_closed_loop, AgentId, JointCost, JointLayout, PopulationConfig,
};
use crate::riccati::{solve_riccati_offset, LqSystem, RiccatiSolution};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashGapReport {
    pub agent: AgentId,
    pub n_agents: usize,
    pub j_eq: f64,
    pub j_br: f64,
    pub gap: f64,
    pub joint_dim: usize,
}

/// Joint dynamics seen by a single deviator: everyone else closed-loop on
/// the equilibrium laws, the deviator's input left open.
pub struct DeviationProblem<'a> {
    pub p: &'a MmMfgProblem,
    pub sol: &'a MfgSolution,
    pub cfg: &'a PopulationConfig,
    pub layout: JointLayout,
    pub agent: AgentId,
    pub input: Mat,
    pub cost: JointCost,
    pub noise: Mat,
}

impl<'a> DeviationProblem<'a> {
    pub fn new(p: &'a MmMfgProblem, sol: &'a MfgSolution, cfg: &'a PopulationConfig, agent: AgentId) -> Result<Self> {
        cfg.check(p)?;
        if let AgentId::Minor(i) = agent {
            if i >= cfg.n_agents {
                return Err(Error::Config(format!("agent {agent} not in a population of {}", cfg.n_agents)));
            }
        }
        let layout = JointLayout { n: p.n, n_agents: cfg.n_agents, num_types: p.num_types() };
        layout.guard()?;
        Ok(Self {
            p,
            sol,
            cfg,
            layout,
            agent,
            input: layout.input_matrix(p, &cfg.type_assignment, agent),
            cost: joint_cost(p, &layout, cfg, agent)?,
            noise: layout.noise(p, &cfg.type_assignment),
        })
    }

    /// `(F(t), f(t))` with the deviator's own feedback removed.
    pub fn open_loop(&self, t: f64) -> Result<(Mat, Mat)> {
        let ta = &self.cfg.type_assignment;
        let (f, off) = population_closed_loop(self.p, self.sol, &self.layout, ta, t)?;
        let (kt, kff) = self.layout.equilibrium_law(self.sol, ta, self.agent, t)?;
        Ok((f + &self.input * kt, off + &self.input * kff))
    }

    /// Expected cost of the deviator playing `u = -gain(t) z - feedforward(t)`.
    pub fn cost_of_law(&self, gain: &GridFunction, feedforward: &GridFunction) -> Result<f64> {
        let c = &self.cost;
        let coefficients = |t: f64| {
            let (f, off) = self.open_loop(t).expect("time inside grid");
            let k = gain.interp_cubic(t).expect("time inside grid");
            let kff = feedforward.interp_cubic(t).expect("time inside grid");
            let lc = law_cost(&c.q, &c.n_cross, &c.r, &c.eta, &c.n_lin, c.constant, &k, &(-&kff));
            FlowCoefficients {
                drift: f - &self.input * &k,
                offset: off - &self.input * kff,
                noise: self.noise.clone(),
                weight: lc.weight,
                linear: lc.linear,
                constant: lc.constant,
            }
        };
        let (mean0, cov0) = self.layout.initial_moments(self.cfg);
        moments::expected_cost(coefficients, &c.terminal, self.p.rho, &mean0, &cov0, &self.p.grid)
    }

    /// Optimal feedback of the deviator on the joint state.
    pub fn best_response(&self) -> Result<RiccatiSolution> {
        let c = &self.cost;
        let sys = LqSystem {
            a: Box::new(|t| self.open_loop(t).expect("time inside grid").0),
            b: self.input.clone(),
            drift: Box::new(|t| self.open_loop(t).expect("time inside grid").1),
            q: c.q.clone(),
            n_cross: c.n_cross.clone(),
            r: c.r.clone(),
            eta: c.eta.clone(),
            n_lin: c.n_lin.clone(),
            rho: self.p.rho,
            qhat: c.terminal.weight.clone(),
            qhat_lin: -&c.terminal.linear,
        };
        solve_riccati_offset(&sys, &self.p.grid)
    }
}

/// `J_i(equilibrium) - J_i(best response)` for one deviating agent in a
/// population of `cfg.n_agents`.
pub fn epsilon_nash_gap(
    p: &MmMfgProblem,
    sol: &MfgSolution,
    cfg: &PopulationConfig,
    agent: AgentId,
) -> Result<NashGapReport> {
    let dev = DeviationProblem::new(p, sol, cfg, agent)?;
    let j_eq = expected_cost_exact(p, sol, cfg, agent)?.value;
    let br = dev.best_response()?;
    let j_br = dev.cost_of_law(&br.gain, &br.feedforward)?;
    Ok(NashGapReport { agent, n_agents: cfg.n_agents, j_eq, j_br, gap: j_eq - j_br, joint_dim: dev.layout.dim() })
}

/// Deviators used for a population: the major agent and the first agent of
/// each type present.
pub fn representative_agents(cfg: &PopulationConfig, num_types: usize) -> Vec<AgentId> {
    std::iter::once(AgentId::Major)
        .chain((0..num_types).filter_map(|k| cfg.first_of_type(k).map(AgentId::Minor)))
        .collect()
}

/// Gaps of the representative agents for each population size. Cells are
/// independent and run on the chosen executor; output order is fixed.
pub fn gap_vs_population(
    p: &MmMfgProblem,
    sol: &MfgSolution,
    sizes: &[usize],
    execution: Execution,
) -> Result<Vec<NashGapReport>> {
    let mut cells = Vec::new();
    for &n in sizes {
        let cfg = PopulationConfig::new(p, n, 1, 0)?.with_execution(execution);
        for agent in representative_agents(&cfg, p.num_types()) {
            cells.push((cfg.clone(), agent));
        }
    }
    try_map_indexed(execution, cells.len(), |i| epsilon_nash_gap(p, sol, &cells[i].0, cells[i].1))
}
