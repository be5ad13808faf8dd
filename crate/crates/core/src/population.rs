//! Finite-population simulation under the equilibrium laws, empirical mean
//! fields, and finite-population costs by Monte Carlo and by exact moment
//! propagation of the joint closed loop.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mfg_model::MmMfgProblem;
use crate::mfg_solver::{mean_field_step, MfgSolution};
use crate::moments::{self, expected_form, law_cost, FlowCoefficients, TerminalForm};
use crate::numerics::{hstack, psd_sqrt, trapezoid, GridFunction, Mat, TimeGrid};
use crate::par::{map_indexed, try_map_indexed, Execution};
use crate::rng::NoiseStream;

/// Largest joint state dimension handled by the exact evaluators.
pub const MAX_JOINT_DIM: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum AgentId {
    Major,
    /// Zero-based index into the minor population.
    Minor(usize),
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentId::Major => write!(f, "major"),
            AgentId::Minor(i) => write!(f, "minor {i}"),
        }
    }
}

/// Deterministic type assignment: agent `i` joins the type with the largest
/// deficit `pi_k (i + 1) - count_k`, ties going to the lowest index.
pub fn assign_types(pi: &[f64], n_agents: usize) -> Vec<usize> {
    let mut counts = vec![0usize; pi.len()];
    let mut out = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (k, p) in pi.iter().enumerate() {
            let deficit = p * (i + 1) as f64 - counts[k] as f64;
            if deficit > best_deficit + 1e-12 {
                best = k;
                best_deficit = deficit;
            }
        }
        counts[best] += 1;
        out.push(best);
    }
    out
}

#[derive(Debug, Clone)]
pub struct PopulationConfig {
    pub n_agents: usize,
    pub type_assignment: Vec<usize>,
    pub master_seed: u64,
    pub num_paths: usize,
    pub initial_cov: Mat,
    /// Initial mean field; zero unless overridden.
    pub xbar0: Mat,
    pub execution: Execution,
}

impl PopulationConfig {
    pub fn new(p: &MmMfgProblem, n_agents: usize, num_paths: usize, master_seed: u64) -> Result<Self> {
        let cfg = Self {
            n_agents,
            type_assignment: assign_types(&p.pi, n_agents),
            master_seed,
            num_paths,
            initial_cov: p.initial_cov.clone(),
            xbar0: Mat::zeros(p.n * p.num_types(), 1),
            execution: Execution::Parallel,
        };
        cfg.check(p)?;
        Ok(cfg)
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn type_counts(&self, num_types: usize) -> Vec<usize> {
        let mut counts = vec![0; num_types];
        for &k in &self.type_assignment {
            counts[k] += 1;
        }
        counts
    }

    /// Lowest-index agent of type `k`.
    pub fn first_of_type(&self, k: usize) -> Option<usize> {
        self.type_assignment.iter().position(|&t| t == k)
    }

    pub fn check(&self, p: &MmMfgProblem) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::Config("population needs at least one minor agent".into()));
        }
        if self.type_assignment.len() != self.n_agents
            || self.type_assignment.iter().any(|&k| k >= p.num_types())
        {
            return Err(Error::Config("type assignment does not match the population".into()));
        }
        if self.num_paths == 0 || self.num_paths > u32::MAX as usize || self.n_agents >= u32::MAX as usize {
            return Err(Error::Config("number of paths and agents must fit 32-bit stream keys".into()));
        }
        for (k, c) in self.type_counts(p.num_types()).iter().enumerate() {
            if *c == 0 && p.pi[k] > 0.0 {
                return Err(Error::Config(format!(
                    "type {} has positive weight but no agents at N = {}",
                    k + 1,
                    self.n_agents
                )));
            }
        }
        if self.initial_cov.shape() != (p.n, p.n) {
            return Err(Error::Shape("initial covariance must be n x n".into()));
        }
        if self.xbar0.shape() != (p.n * p.num_types(), 1) {
            return Err(Error::Shape("initial mean field must be nK x 1".into()));
        }
        Ok(())
    }
}

/// States and controls of one Monte Carlo path, one entry per node.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTrajectory {
    /// `n x N`, column `i` is minor agent `i` (empty unless fully recorded).
    pub minor_states: Vec<Mat>,
    pub major_states: Vec<Mat>,
    pub xbar: Vec<Mat>,
    /// `x^(N)`, the average over all minor agents.
    pub aggregate: Vec<Mat>,
    /// Stacked per-type averages, `nK x 1`.
    pub type_means: Vec<Mat>,
    /// `m x N` (empty unless fully recorded).
    pub minor_controls: Vec<Mat>,
    pub major_controls: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub grid: TimeGrid,
    pub n: usize,
    pub m: usize,
    pub num_types: usize,
    pub type_assignment: Vec<usize>,
    pub paths: Vec<PathTrajectory>,
    pub full: bool,
}

impl TrajectoryBundle {
    pub fn n_agents(&self) -> usize {
        self.type_assignment.len()
    }
}

/// Per-node feedback pieces shared by every path.
struct NodeLaw {
    /// `u0 = -K0x x0 - K0bar xbar - kff0`.
    k0x: Mat,
    k0bar: Mat,
    kff0: Mat,
    /// per type: `A_k - B_k K1`, `K2`, `K3`, `kff`, `b_k`.
    closed: Vec<Mat>,
    k2: Vec<Mat>,
    k3: Vec<Mat>,
    kff: Vec<Mat>,
    drift: Vec<Mat>,
    drift0: Mat,
}

fn node_laws(p: &MmMfgProblem, sol: &MfgSolution) -> Vec<NodeLaw> {
    let n = p.n;
    let nk = n * p.num_types();
    (0..p.grid.num_nodes())
        .map(|j| {
            let g0 = sol.major_gain.at(j);
            let mut law = NodeLaw {
                k0x: g0.columns(0, n).into_owned(),
                k0bar: g0.columns(n, nk).into_owned(),
                kff0: sol.major_feedforward.at(j).clone(),
                closed: Vec::new(),
                k2: Vec::new(),
                k3: Vec::new(),
                kff: Vec::new(),
                drift: Vec::new(),
                drift0: p.major.drift.at(j).clone(),
            };
            for (k, t) in p.minors.iter().enumerate() {
                let g = sol.minor_gains[k].at(j);
                law.closed.push(&t.a - &t.b * g.columns(0, n));
                law.k2.push(g.columns(n, n).into_owned());
                law.k3.push(g.columns(2 * n, nk).into_owned());
                law.kff.push(sol.minor_feedforwards[k].at(j).clone());
                law.drift.push(t.drift.at(j).clone());
            }
            law
        })
        .collect()
}

fn check_solution(p: &MmMfgProblem, sol: &MfgSolution) -> Result<()> {
    if sol.grid() != &p.grid {
        return Err(Error::Shape("solution and problem grids differ".into()));
    }
    if sol.num_types() != p.num_types() {
        return Err(Error::Shape("solution and problem disagree on the number of types".into()));
    }
    Ok(())
}

fn column_mean(x: &Mat, cols: impl Iterator<Item = usize>, n: usize) -> (Mat, usize) {
    let mut acc = Mat::zeros(n, 1);
    let mut count = 0;
    for i in cols {
        acc += x.column(i);
        count += 1;
    }
    if count > 0 {
        acc /= count as f64;
    }
    (acc, count)
}

fn simulate_path(
    p: &MmMfgProblem,
    sol: &MfgSolution,
    cfg: &PopulationConfig,
    laws: &[NodeLaw],
    path: usize,
    full: bool,
) -> Result<PathTrajectory> {
    let n = p.n;
    let r = p.r;
    let na = cfg.n_agents;
    let kk = p.num_types();
    let grid = p.grid;
    let h = grid.h();
    let sqrt_h = h.sqrt();
    let init_root = psd_sqrt(&cfg.initial_cov);

    let mut streams: Vec<NoiseStream> =
        (0..=na).map(|a| NoiseStream::new(cfg.master_seed, path as u32, a as u32)).collect();
    let mut z = vec![0.0; n.max(r)];
    let draw_initial = |stream: &mut NoiseStream| {
        let mut buf = vec![0.0; n];
        stream.fill(&mut buf, 1.0);
        &init_root * Mat::from_column_slice(n, 1, &buf)
    };
    let mut x0 = draw_initial(&mut streams[0]);
    let mut xs = Mat::zeros(n, na);
    for i in 0..na {
        xs.set_column(i, &draw_initial(&mut streams[i + 1]).column(0));
    }
    let mut xbar = cfg.xbar0.clone();

    let members: Vec<Vec<usize>> =
        (0..kk).map(|k| (0..na).filter(|&i| cfg.type_assignment[i] == k).collect()).collect();
    let nodes = grid.num_nodes();
    let mut out = PathTrajectory {
        minor_states: Vec::with_capacity(if full { nodes } else { 0 }),
        major_states: Vec::with_capacity(nodes),
        xbar: Vec::with_capacity(nodes),
        aggregate: Vec::with_capacity(nodes),
        type_means: Vec::with_capacity(nodes),
        minor_controls: Vec::with_capacity(if full { nodes } else { 0 }),
        major_controls: Vec::with_capacity(nodes),
    };
    let mut next = Mat::zeros(n, na);
    for j in 0..nodes {
        let law = &laws[j];
        let (agg, _) = column_mean(&xs, 0..na, n);
        let type_means: Vec<Mat> = members.iter().map(|ids| column_mean(&xs, ids.iter().copied(), n).0).collect();
        let u0 = -(&law.k0x * &x0) - &law.k0bar * &xbar - &law.kff0;
        // control of agent i: -K1 x_i + common_k
        let common: Vec<Mat> =
            (0..kk).map(|k| -(&law.k2[k] * &x0) - &law.k3[k] * &xbar - &law.kff[k]).collect();

        if full {
            let mut controls = Mat::zeros(p.m, na);
            for i in 0..na {
                let k = cfg.type_assignment[i];
                let g = sol.minor_gains[k].at(j);
                let u = -(g.columns(0, n) * xs.column(i)) + &common[k];
                controls.set_column(i, &u.column(0));
            }
            out.minor_controls.push(controls);
            out.minor_states.push(xs.clone());
        }
        out.major_states.push(x0.clone());
        out.xbar.push(xbar.clone());
        out.aggregate.push(agg.clone());
        out.type_means.push(vstack_cols(&type_means));
        out.major_controls.push(u0.clone());
        if j + 1 == nodes {
            break;
        }

        let mj = &p.major;
        let mut x0_next = &x0 + (&mj.a * &x0 + &mj.f * &agg + &mj.b * &u0 + &law.drift0) * h;
        streams[0].fill(&mut z[..r], sqrt_h);
        x0_next += &mj.sigma * Mat::from_column_slice(r, 1, &z[..r]);

        let shift: Vec<Mat> = p
            .minors
            .iter()
            .enumerate()
            .map(|(k, t)| &t.f * &agg + &t.g * &x0 + &t.b * &common[k] + &law.drift[k])
            .collect();
        for i in 0..na {
            let k = cfg.type_assignment[i];
            let c = &law.closed[k];
            let sigma = &p.minors[k].sigma;
            streams[i + 1].fill(&mut z[..r], sqrt_h);
            let xi = xs.column(i);
            for row in 0..n {
                let mut rate = shift[k][row];
                for col in 0..n {
                    rate += c[(row, col)] * xi[col];
                }
                let mut noise = 0.0;
                for q in 0..r {
                    noise += sigma[(row, q)] * z[q];
                }
                next[(row, i)] = xi[row] + h * rate + noise;
            }
        }
        let xbar_next = mean_field_step(&sol.mf_law, j, &xbar, &x0, &x0_next);
        std::mem::swap(&mut xs, &mut next);
        x0 = x0_next;
        xbar = xbar_next;
        if !(x0.iter().all(|v| v.is_finite()) && xs.iter().all(|v| v.is_finite())) {
            return Err(Error::DivergedPath { path, node: j + 1 });
        }
    }
    Ok(out)
}

fn vstack_cols(parts: &[Mat]) -> Mat {
    crate::numerics::vstack(&parts.iter().collect::<Vec<_>>())
}

fn simulate(p: &MmMfgProblem, sol: &MfgSolution, cfg: &PopulationConfig, full: bool) -> Result<TrajectoryBundle> {
    check_solution(p, sol)?;
    cfg.check(p)?;
    let laws = node_laws(p, sol);
    let paths = try_map_indexed(cfg.execution, cfg.num_paths, |path| simulate_path(p, sol, cfg, &laws, path, full))?;
    Ok(TrajectoryBundle {
        grid: p.grid,
        n: p.n,
        m: p.m,
        num_types: p.num_types(),
        type_assignment: cfg.type_assignment.clone(),
        paths,
        full,
    })
}

/// Euler-Maruyama simulation of all `N + 1` agents under the equilibrium
/// laws, with the mean field integrated alongside from the simulated major state.
pub fn simulate_population(p: &MmMfgProblem, sol: &MfgSolution, cfg: &PopulationConfig) -> Result<TrajectoryBundle> {
    simulate(p, sol, cfg, true)
}

/// Per-path stacked per-type empirical averages.
pub fn empirical_mean_field(bundle: &TrajectoryBundle) -> Result<Vec<GridFunction>> {
    if !bundle.full {
        return Err(Error::Config("bundle does not hold individual states".into()));
    }
    let n = bundle.n;
    let members: Vec<Vec<usize>> = (0..bundle.num_types)
        .map(|k| (0..bundle.n_agents()).filter(|&i| bundle.type_assignment[i] == k).collect())
        .collect();
    bundle
        .paths
        .iter()
        .map(|path| {
            let values = path
                .minor_states
                .iter()
                .map(|xs| {
                    let parts: Vec<Mat> =
                        members.iter().map(|ids| column_mean(xs, ids.iter().copied(), n).0).collect();
                    vstack_cols(&parts)
                })
                .collect();
            GridFunction::new(bundle.grid, values)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum CostMethod {
    MonteCarlo { paths: usize },
    Exact,
    EulerMoments,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub agent: AgentId,
    pub value: f64,
    pub std_error: f64,
    pub method: CostMethod,
}

/// Tracking error `e = S z - eta` and weights of one agent's finite-N cost.
struct AgentCostWeights<'a> {
    q: &'a Mat,
    n_cross: &'a Mat,
    r: &'a Mat,
    qhat: &'a Mat,
    eta: &'a Mat,
}

fn agent_weights<'a>(p: &'a MmMfgProblem, cfg: &PopulationConfig, agent: AgentId) -> Result<AgentCostWeights<'a>> {
    Ok(match agent {
        AgentId::Major => {
            let mj = &p.major;
            AgentCostWeights { q: &mj.q, n_cross: &mj.n_cross, r: &mj.r, qhat: &mj.qhat, eta: &mj.eta }
        }
        AgentId::Minor(i) => {
            let k = *cfg
                .type_assignment
                .get(i)
                .ok_or_else(|| Error::Config(format!("agent {agent} not in a population of {}", cfg.n_agents)))?;
            let t = &p.minors[k];
            AgentCostWeights { q: &t.q, n_cross: &t.n_cross, r: &t.r, qhat: &t.qhat, eta: &t.eta }
        }
    })
}

fn pathwise_cost(p: &MmMfgProblem, bundle: &TrajectoryBundle, path: &PathTrajectory, agent: AgentId) -> f64 {
    let grid = bundle.grid;
    let (e_at, u_at): (Box<dyn Fn(usize) -> Mat + '_>, Box<dyn Fn(usize) -> Mat + '_>);
    let w;
    match agent {
        AgentId::Major => {
            let mj = &p.major;
            w = (&mj.q, &mj.n_cross, &mj.r, &mj.qhat);
            e_at = Box::new(move |j| &path.major_states[j] - (&mj.h * &path.aggregate[j] + &mj.eta));
            u_at = Box::new(move |j| path.major_controls[j].clone());
        }
        AgentId::Minor(i) => {
            let t = &p.minors[bundle.type_assignment[i]];
            w = (&t.q, &t.n_cross, &t.r, &t.qhat);
            e_at = Box::new(move |j| {
                path.minor_states[j].columns(i, 1) - (&t.h * &path.major_states[j] + &t.h_hat * &path.aggregate[j] + &t.eta)
            });
            u_at = Box::new(move |j| path.minor_controls[j].columns(i, 1).into_owned());
        }
    }
    let (q, nc, r, qhat) = w;
    let rates: Vec<f64> = (0..grid.num_nodes())
        .map(|j| {
            let e = e_at(j);
            let u = u_at(j);
            let v = e.dot(&(q * &e)) + 2.0 * e.dot(&(nc * &u)) + u.dot(&(r * &u));
            (-p.rho * grid.node(j)).exp() * v
        })
        .collect();
    let e_t = e_at(grid.steps());
    0.5 * (trapezoid(grid.h(), &rates) + (-p.rho * grid.t_end()).exp() * e_t.dot(&(qhat * &e_t)))
}

/// Trapezoid-rule pathwise cost averaged over paths, with its standard error.
pub fn finite_cost_monte_carlo(p: &MmMfgProblem, bundle: &TrajectoryBundle, agent: AgentId) -> Result<CostReport> {
    if !bundle.full {
        return Err(Error::Config("bundle does not hold individual states".into()));
    }
    if let AgentId::Minor(i) = agent {
        if i >= bundle.n_agents() {
            return Err(Error::Config(format!("agent {agent} not in a population of {}", bundle.n_agents())));
        }
    }
    let costs: Vec<f64> = bundle.paths.iter().map(|path| pathwise_cost(p, bundle, path, agent)).collect();
    let k = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / k;
    let std_error = if costs.len() > 1 {
        (costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    } else {
        0.0
    };
    Ok(CostReport { agent, value: mean, std_error, method: CostMethod::MonteCarlo { paths: costs.len() } })
}

/// Block layout of the joint state `z = (x^1..x^N, x0, xbar)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointLayout {
    pub n: usize,
    pub n_agents: usize,
    pub num_types: usize,
}

impl JointLayout {
    pub fn dim(&self) -> usize {
        self.n * (self.n_agents + 1 + self.num_types)
    }

    pub fn minor(&self, i: usize) -> usize {
        self.n * i
    }

    pub fn major(&self) -> usize {
        self.n * self.n_agents
    }

    pub fn xbar(&self) -> usize {
        self.n * (self.n_agents + 1)
    }

    pub fn guard(&self) -> Result<()> {
        let dim = self.dim();
        if dim > MAX_JOINT_DIM {
            return Err(Error::DimensionGuard { dim, limit: MAX_JOINT_DIM });
        }
        Ok(())
    }

    /// `n x D` selector of agent `i`'s state.
    pub fn select_minor(&self, i: usize) -> Mat {
        self.select_at(self.minor(i), self.n)
    }

    pub fn select_major(&self) -> Mat {
        self.select_at(self.major(), self.n)
    }

    pub fn select_xbar(&self) -> Mat {
        self.select_at(self.xbar(), self.n * self.num_types)
    }

    /// `n x D` map to the minor average `x^(N)`.
    pub fn select_average(&self) -> Mat {
        let mut s = Mat::zeros(self.n, self.dim());
        let w = 1.0 / self.n_agents as f64;
        for i in 0..self.n_agents {
            for d in 0..self.n {
                s[(d, self.minor(i) + d)] = w;
            }
        }
        s
    }

    fn select_at(&self, offset: usize, rows: usize) -> Mat {
        let mut s = Mat::zeros(rows, self.dim());
        s.view_mut((0, offset), (rows, rows)).fill_with_identity();
        s
    }

    /// Tracking map `S` with `e = S z - eta` for `agent`.
    pub fn tracking_map(&self, p: &MmMfgProblem, type_assignment: &[usize], agent: AgentId) -> Mat {
        match agent {
            AgentId::Major => self.select_major() - &p.major.h * self.select_average(),
            AgentId::Minor(i) => {
                let t = &p.minors[type_assignment[i]];
                self.select_minor(i) - &t.h * self.select_major() - &t.h_hat * self.select_average()
            }
        }
    }

    /// Equilibrium law of `agent` in joint coordinates: `u = -Ktilde z - kff`.
    pub fn equilibrium_law(
        &self,
        sol: &MfgSolution,
        type_assignment: &[usize],
        agent: AgentId,
        t: f64,
    ) -> Result<(Mat, Mat)> {
        let n = self.n;
        let nk = n * self.num_types;
        let d = self.dim();
        Ok(match agent {
            AgentId::Major => {
                let (g, f) = sol.major_law_at(t)?;
                let mut kt = Mat::zeros(g.nrows(), d);
                kt.columns_mut(self.major(), n).copy_from(&g.columns(0, n));
                kt.columns_mut(self.xbar(), nk).copy_from(&g.columns(n, nk));
                (kt, f)
            }
            AgentId::Minor(i) => {
                let (g, f) = sol.minor_law_at(type_assignment[i], t)?;
                let mut kt = Mat::zeros(g.nrows(), d);
                kt.columns_mut(self.minor(i), n).copy_from(&g.columns(0, n));
                kt.columns_mut(self.major(), n).copy_from(&g.columns(n, n));
                kt.columns_mut(self.xbar(), nk).copy_from(&g.columns(2 * n, nk));
                (kt, f)
            }
        })
    }

    /// Open-loop joint drift at `t`: every agent's own dynamics with
    /// the mean field in its closed-loop law and no control applied.
    pub fn open_drift(&self, p: &MmMfgProblem, sol: &MfgSolution, type_assignment: &[usize], t: f64) -> Result<(Mat, Mat)> {
        let n = self.n;
        let nk = n * self.num_types;
        let d = self.dim();
        let inv_n = 1.0 / self.n_agents as f64;
        let mut f = Mat::zeros(d, d);
        let mut off = Mat::zeros(d, 1);
        let add = |f: &mut Mat, r: usize, c: usize, m: &Mat| {
            let mut v = f.view_mut((r, c), m.shape());
            v += m;
        };
        for (i, &k) in type_assignment.iter().enumerate() {
            let ty = &p.minors[k];
            let row = self.minor(i);
            add(&mut f, row, row, &ty.a);
            let coupling = &ty.f * inv_n;
            for j in 0..self.n_agents {
                add(&mut f, row, self.minor(j), &coupling);
            }
            add(&mut f, row, self.major(), &ty.g);
            off.view_mut((row, 0), (n, 1)).copy_from(&ty.drift.interp(t)?);
        }
        let mj = &p.major;
        let row = self.major();
        add(&mut f, row, row, &mj.a);
        let coupling = &mj.f * inv_n;
        for j in 0..self.n_agents {
            add(&mut f, row, self.minor(j), &coupling);
        }
        off.view_mut((row, 0), (n, 1)).copy_from(&mj.drift.interp(t)?);
        let law = &sol.mf_law;
        add(&mut f, self.xbar(), self.major(), &law.gbar.interp_cubic(t)?);
        add(&mut f, self.xbar(), self.xbar(), &law.abar.interp_cubic(t)?);
        off.view_mut((self.xbar(), 0), (nk, 1)).copy_from(&law.mbar.interp_cubic(t)?);
        Ok((f, off))
    }

    /// `D x m` input matrix of `agent`.
    pub fn input_matrix(&self, p: &MmMfgProblem, type_assignment: &[usize], agent: AgentId) -> Mat {
        let (row, b) = match agent {
            AgentId::Major => (self.major(), &p.major.b),
            AgentId::Minor(i) => (self.minor(i), &p.minors[type_assignment[i]].b),
        };
        let mut out = Mat::zeros(self.dim(), b.ncols());
        out.view_mut((row, 0), b.shape()).copy_from(b);
        out
    }

    /// Joint diffusion covariance rate (the mean field carries no noise).
    pub fn noise(&self, p: &MmMfgProblem, type_assignment: &[usize]) -> Mat {
        let n = self.n;
        let mut out = Mat::zeros(self.dim(), self.dim());
        for (i, &k) in type_assignment.iter().enumerate() {
            let s = &p.minors[k].sigma;
            out.view_mut((self.minor(i), self.minor(i)), (n, n)).copy_from(&(s * s.transpose()));
        }
        let s = &p.major.sigma;
        out.view_mut((self.major(), self.major()), (n, n)).copy_from(&(s * s.transpose()));
        out
    }

    /// Initial joint mean and covariance.
    pub fn initial_moments(&self, cfg: &PopulationConfig) -> (Mat, Mat) {
        let n = self.n;
        let mut mean = Mat::zeros(self.dim(), 1);
        mean.view_mut((self.xbar(), 0), cfg.xbar0.shape()).copy_from(&cfg.xbar0);
        let mut cov = Mat::zeros(self.dim(), self.dim());
        for a in 0..=self.n_agents {
            cov.view_mut((n * a, n * a), (n, n)).copy_from(&cfg.initial_cov);
        }
        (mean, cov)
    }
}

/// Joint quadratic cost terms of one agent.
pub struct JointCost {
    pub q: Mat,
    pub n_cross: Mat,
    pub r: Mat,
    pub eta: Mat,
    pub n_lin: Mat,
    pub constant: f64,
    pub terminal: TerminalForm,
}

pub fn joint_cost(p: &MmMfgProblem, layout: &JointLayout, cfg: &PopulationConfig, agent: AgentId) -> Result<JointCost> {
    let w = agent_weights(p, cfg, agent)?;
    let s = layout.tracking_map(p, &cfg.type_assignment, agent);
    let st = s.transpose();
    Ok(JointCost {
        q: &st * w.q * &s,
        n_cross: &st * w.n_cross,
        r: w.r.clone(),
        eta: &st * w.q * w.eta,
        n_lin: w.n_cross.transpose() * w.eta,
        constant: w.eta.dot(&(w.q * w.eta)),
        terminal: TerminalForm {
            weight: &st * w.qhat * &s,
            linear: -(&st * w.qhat * w.eta),
            constant: w.eta.dot(&(w.qhat * w.eta)),
        },
    })
}

/// Fully closed-loop joint drift `(F(t), f(t))` with every agent on its
/// equilibrium law.
pub fn population_closed_loop(
    p: &MmMfgProblem,
    sol: &MfgSolution,
    layout: &JointLayout,
    type_assignment: &[usize],
    t: f64,
) -> Result<(Mat, Mat)> {
    let n = layout.n;
    let nk = n * layout.num_types;
    let (mut f, mut off) = layout.open_drift(p, sol, type_assignment, t)?;
    let (g0, kff0) = sol.major_law_at(t)?;
    let b0 = &p.major.b;
    let row = layout.major();
    {
        let mut v = f.view_mut((row, layout.major()), (n, n));
        v -= b0 * g0.columns(0, n);
    }
    {
        let mut v = f.view_mut((row, layout.xbar()), (n, nk));
        v -= b0 * g0.columns(n, nk);
    }
    {
        let mut v = off.view_mut((row, 0), (n, 1));
        v -= b0 * &kff0;
    }
    let laws: Vec<(Mat, Mat)> = (0..layout.num_types).map(|k| sol.minor_law_at(k, t)).collect::<Result<_>>()?;
    for (i, &k) in type_assignment.iter().enumerate() {
        let (g, kff) = &laws[k];
        let b = &p.minors[k].b;
        let row = layout.minor(i);
        {
            let mut v = f.view_mut((row, row), (n, n));
            v -= b * g.columns(0, n);
        }
        {
            let mut v = f.view_mut((row, layout.major()), (n, n));
            v -= b * g.columns(n, n);
        }
        {
            let mut v = f.view_mut((row, layout.xbar()), (n, nk));
            v -= b * g.columns(2 * n, nk);
        }
        let mut v = off.view_mut((row, 0), (n, 1));
        v -= b * kff;
    }
    Ok((f, off))
}

fn layout_for(p: &MmMfgProblem, cfg: &PopulationConfig) -> Result<JointLayout> {
    let layout = JointLayout { n: p.n, n_agents: cfg.n_agents, num_types: p.num_types() };
    layout.guard()?;
    Ok(layout)
}

/// Exact expected finite-population cost of `agent` under the equilibrium
/// laws, from the joint mean and covariance.
pub fn expected_cost_exact(
    p: &MmMfgProblem,
    sol: &MfgSolution,
    cfg: &PopulationConfig,
    agent: AgentId,
) -> Result<CostReport> {
    check_solution(p, sol)?;
    cfg.check(p)?;
    let layout = layout_for(p, cfg)?;
    let cost = joint_cost(p, &layout, cfg, agent)?;
    let noise = layout.noise(p, &cfg.type_assignment);
    let (mean0, cov0) = layout.initial_moments(cfg);
    let coefficients = |t: f64| {
        let (f, off) =
            population_closed_loop(p, sol, &layout, &cfg.type_assignment, t).expect("time inside grid");
        let (kt, kff) = layout.equilibrium_law(sol, &cfg.type_assignment, agent, t).expect("time inside grid");
        let lc = law_cost(&cost.q, &cost.n_cross, &cost.r, &cost.eta, &cost.n_lin, cost.constant, &kt, &(-kff));
        FlowCoefficients {
            drift: f,
            offset: off,
            noise: noise.clone(),
            weight: lc.weight,
            linear: lc.linear,
            constant: lc.constant,
        }
    };
    let value = moments::expected_cost(coefficients, &cost.terminal, p.rho, &mean0, &cov0, &p.grid)?;
    Ok(CostReport { agent, value, std_error: 0.0, method: CostMethod::Exact })
}

/// Expected cost of the Euler-Maruyama scheme used by
/// [`simulate_population`], with the pathwise trapezoid rule, computed by
/// propagating the discrete-time joint mean and covariance. Monte Carlo
/// estimates converge to this value as the number of paths grows.
pub fn em_expected_cost(
    p: &MmMfgProblem,
    sol: &MfgSolution,
    cfg: &PopulationConfig,
    agent: AgentId,
) -> Result<CostReport> {
    check_solution(p, sol)?;
    cfg.check(p)?;
    let layout = layout_for(p, cfg)?;
    let n = layout.n;
    let nk = n * layout.num_types;
    let d = layout.dim();
    let grid = p.grid;
    let h = grid.h();
    let cost = joint_cost(p, &layout, cfg, agent)?;
    let (mut mean, mut cov) = layout.initial_moments(cfg);

    // noise loading per unit sqrt(h): agents' own diffusion; the mean field
    // picks up the major noise through its step map.
    let nr = p.r * (cfg.n_agents + 1);
    let mut loading = Mat::zeros(d, nr);
    for (i, &k) in cfg.type_assignment.iter().enumerate() {
        loading.view_mut((layout.minor(i), p.r * i), (n, p.r)).copy_from(&p.minors[k].sigma);
    }
    let major_noise_col = p.r * cfg.n_agents;
    loading.view_mut((layout.major(), major_noise_col), (n, p.r)).copy_from(&p.major.sigma);

    let mut rates = Vec::with_capacity(grid.num_nodes());
    for j in 0..grid.num_nodes() {
        let t = grid.node(j);
        let (kt, kff) = layout.equilibrium_law(sol, &cfg.type_assignment, agent, t)?;
        let lc = law_cost(&cost.q, &cost.n_cross, &cost.r, &cost.eta, &cost.n_lin, cost.constant, &kt, &(-kff));
        rates.push((-p.rho * t).exp() * expected_form(&lc.weight, &lc.linear, lc.constant, &mean, &cov));
        if j == grid.steps() {
            break;
        }
        let (f, off) = population_closed_loop(p, sol, &layout, &cfg.type_assignment, t)?;
        let mut step = Mat::identity(d, d) + f * h;
        let mut shift = off * h;
        // mean-field rows: affine RK4 map of (xbar_j, x0_j, x0_{j+1})
        let zero_bar = Mat::zeros(nk, 1);
        let zero0 = Mat::zeros(n, 1);
        let base = mean_field_step(&sol.mf_law, j, &zero_bar, &zero0, &zero0);
        let mut phi = Mat::zeros(nk, nk);
        for c in 0..nk {
            let mut e = zero_bar.clone();
            e[(c, 0)] = 1.0;
            phi.set_column(c, &(mean_field_step(&sol.mf_law, j, &e, &zero0, &zero0) - &base).column(0));
        }
        let mut gamma_start = Mat::zeros(nk, n);
        let mut gamma_end = Mat::zeros(nk, n);
        for c in 0..n {
            let mut e = zero0.clone();
            e[(c, 0)] = 1.0;
            gamma_start.set_column(c, &(mean_field_step(&sol.mf_law, j, &zero_bar, &e, &zero0) - &base).column(0));
            gamma_end.set_column(c, &(mean_field_step(&sol.mf_law, j, &zero_bar, &zero0, &e) - &base).column(0));
        }
        let major_rows = step.rows(layout.major(), n).into_owned();
        let major_shift = shift.rows(layout.major(), n).into_owned();
        let mut bar_rows = &gamma_end * &major_rows;
        {
            let mut v = bar_rows.columns_mut(layout.xbar(), nk);
            v += &phi;
        }
        {
            let mut v = bar_rows.columns_mut(layout.major(), n);
            v += &gamma_start;
        }
        step.rows_mut(layout.xbar(), nk).copy_from(&bar_rows);
        shift.rows_mut(layout.xbar(), nk).copy_from(&(&gamma_end * major_shift + &base));
        let mut load = loading.clone();
        let major_load = loading.view((layout.major(), 0), (n, nr)).into_owned();
        load.rows_mut(layout.xbar(), nk).copy_from(&(&gamma_end * major_load));

        mean = &step * &mean + shift;
        cov = &step * &cov * step.transpose() + &load * load.transpose() * h;
    }
    let running = 0.5 * trapezoid(h, &rates);
    let t = &cost.terminal;
    let end = 0.5 * (-p.rho * grid.t_end()).exp() * expected_form(&t.weight, &t.linear, t.constant, &mean, &cov);
    Ok(CostReport { agent, value: running + end, std_error: 0.0, method: CostMethod::EulerMoments })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n_agents: usize,
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log rms` against `log N`.
    pub slope: f64,
    pub intercept: f64,
}

/// Least-squares line through `(x, y)` pairs: `(slope, intercept)`.
pub fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { f64::NAN };
    (slope, my - slope * mx)
}

/// RMS over nodes and paths of the distance between the stacked per-type
/// empirical averages and the mean field, for each population size.
pub fn mean_field_convergence_study(
    p: &MmMfgProblem,
    sol: &MfgSolution,
    sizes: &[usize],
    num_paths: usize,
    master_seed: u64,
    execution: Execution,
) -> Result<ConvergenceStudy> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &n_agents in sizes {
        let cfg = PopulationConfig::new(p, n_agents, num_paths, master_seed)?.with_execution(execution);
        let bundle = simulate(p, sol, &cfg, false)?;
        let per_path = map_indexed(execution, bundle.paths.len(), |i| {
            let path = &bundle.paths[i];
            path.type_means.iter().zip(&path.xbar).map(|(a, b)| (a - b).norm_squared()).sum::<f64>()
        });
        let count = (bundle.paths.len() * p.grid.num_nodes()) as f64;
        rows.push(ConvergenceRow { n_agents, rms: (per_path.iter().sum::<f64>() / count).sqrt() });
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| ((r.n_agents as f64).ln(), r.rms.ln())).collect();
    let (slope, intercept) = if points.len() >= 2 { fit_line(&points) } else { (f64::NAN, f64::NAN) };
    Ok(ConvergenceStudy { rows, slope, intercept })
}

/// `[x^(N,1); ...; x^(N,K)]` weighted by `N_k / N` reproduces `x^(N)`.
pub fn aggregate_from_type_means(type_means: &Mat, counts: &[usize], n: usize) -> Mat {
    let total: usize = counts.iter().sum();
    let blocks: Vec<Mat> = counts
        .iter()
        .map(|c| Mat::identity(n, n) * (*c as f64 / total as f64))
        .collect();
    hstack(&blocks.iter().collect::<Vec<_>>()) * type_means
}
