//! Consistency fixed point of the major-minor game and the resulting
//! equilibrium feedback laws.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lqg::steady_offset;
use crate::mfg_model::{
    assemble_minor, build_extended_major, build_mean_field_matrices, extract_pi_blocks,
    require_valid, split_cross_weight, ExtendedMajorSystem, ExtendedMinorSystem,
    MeanFieldDynamics, MmMfgProblem,
};
use crate::numerics::{psd_sqrt, spd_inverse, vstack, GridFunction, Mat, TimeGrid};
use crate::par::{try_map_indexed, Execution};
use crate::riccati::{self, solve_riccati_offset, spectral_abscissa, HautusReport};

/// Closed-loop mean-field coefficients: `dxbar = (Abar xbar + Gbar x0 + mbar)dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldLaw {
    pub abar: GridFunction,
    pub gbar: GridFunction,
    pub mbar: GridFunction,
}

impl MeanFieldLaw {
    pub fn grid(&self) -> &TimeGrid {
        self.abar.grid()
    }

    /// Sup-norm distance over all nodes and all three coefficients.
    pub fn sup_distance(&self, other: &MeanFieldLaw) -> f64 {
        self.abar
            .sup_distance(&other.abar)
            .max(self.gbar.sup_distance(&other.gbar))
            .max(self.mbar.sup_distance(&other.mbar))
    }

    /// `theta * self + (1 - theta) * other`.
    pub fn blend(&self, other: &MeanFieldLaw, theta: f64) -> MeanFieldLaw {
        let mix = |a: &GridFunction, b: &GridFunction| {
            GridFunction::new(
                *a.grid(),
                a.values().iter().zip(b.values()).map(|(x, y)| x * theta + y * (1.0 - theta)).collect(),
            )
            .expect("laws share a grid")
        };
        MeanFieldLaw {
            abar: mix(&self.abar, &other.abar),
            gbar: mix(&self.gbar, &other.gbar),
            mbar: mix(&self.mbar, &other.mbar),
        }
    }

    /// `Abar(t) xbar + Gbar(t) x0 + mbar(t)`.
    pub fn rate(&self, t: f64, xbar: &Mat, x0: &Mat) -> Mat {
        let at = |g: &GridFunction| g.interp_cubic(t).expect("time inside grid");
        at(&self.abar) * xbar + at(&self.gbar) * x0 + at(&self.mbar)
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointConfig {
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub warm_start: Option<MeanFieldLaw>,
    pub execution: Execution,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self { damping: 0.5, tol: 1e-8, max_iters: 500, warm_start: None, execution: Execution::Parallel }
    }
}

impl FixedPointConfig {
    fn check(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::Config("tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointReport {
    pub iterations: usize,
    pub residuals: Vec<f64>,
    /// Sup-norm change of one undamped re-evaluation of the returned law.
    pub final_residual: f64,
}

#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub pi0: GridFunction,
    pub s0: GridFunction,
    pub pik: Vec<GridFunction>,
    pub sk: Vec<GridFunction>,
    pub mf_law: MeanFieldLaw,
    pub major_system: ExtendedMajorSystem,
    pub minor_systems: Vec<ExtendedMinorSystem>,
    pub major_gain: GridFunction,
    pub major_feedforward: GridFunction,
    pub minor_gains: Vec<GridFunction>,
    pub minor_feedforwards: Vec<GridFunction>,
    pub report: FixedPointReport,
    pub stationary: bool,
}

impl MfgSolution {
    pub fn grid(&self) -> &TimeGrid {
        self.pi0.grid()
    }

    pub fn num_types(&self) -> usize {
        self.pik.len()
    }

    /// `(K0(t), kff0(t))` with `u0 = -K0 X0 - kff0`.
    pub fn major_law_at(&self, t: f64) -> Result<(Mat, Mat)> {
        Ok((self.major_gain.interp_cubic(t)?, self.major_feedforward.interp_cubic(t)?))
    }

    /// `(K_k(t), kff_k(t))` with `u = -K_k X - kff_k`.
    pub fn minor_law_at(&self, k: usize, t: f64) -> Result<(Mat, Mat)> {
        Ok((self.minor_gains[k].interp_cubic(t)?, self.minor_feedforwards[k].interp_cubic(t)?))
    }
}

/// Mean-field law implied by per-type `(Pi_k, s_k)` samples.
fn law_from_minor_solutions(
    p: &MmMfgProblem,
    minors: &[ExtendedMinorSystem],
    pik: &[&[Mat]],
    sk: &[&[Mat]],
    grid: TimeGrid,
) -> Result<MeanFieldLaw> {
    let n = p.n;
    let kk = p.num_types();
    let r_invs = p
        .minors
        .iter()
        .enumerate()
        .map(|(k, t)| {
            spd_inverse(&t.r).ok_or_else(|| Error::Assumption(format!("type {} R not positive definite", k + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut abar = Vec::with_capacity(grid.num_nodes());
    let mut gbar = Vec::with_capacity(grid.num_nodes());
    let mut mbar = Vec::with_capacity(grid.num_nodes());
    for j in 0..grid.num_nodes() {
        let mut a_rows = Vec::with_capacity(kk);
        let mut g_rows = Vec::with_capacity(kk);
        let mut m_rows = Vec::with_capacity(kk);
        for (k, t) in p.minors.iter().enumerate() {
            let ext = &minors[k];
            let (p11, p12, p13) = extract_pi_blocks(&pik[k][j], n, kk);
            let (n11, n21, n31) = split_cross_weight(&ext.weights.n_cross, n, kk);
            let br = &t.b * &r_invs[k];
            let bt = t.b.transpose();
            let s1 = sk[k][j].view((0, 0), (n, 1)).into_owned();
            a_rows.push(
                (&t.a - &br * (n11.transpose() + &bt * p11)) * p.selector(k) + p.replicate(&t.f)
                    - &br * (n31.transpose() + &bt * p13),
            );
            g_rows.push(&t.g - &br * (n21.transpose() + &bt * p12));
            m_rows.push(t.drift.at(j) + &br * &ext.weights.n_bar - &br * &bt * s1);
        }
        abar.push(vstack(&a_rows.iter().collect::<Vec<_>>()));
        gbar.push(vstack(&g_rows.iter().collect::<Vec<_>>()));
        mbar.push(vstack(&m_rows.iter().collect::<Vec<_>>()));
    }
    Ok(MeanFieldLaw {
        abar: GridFunction::new(grid, abar)?,
        gbar: GridFunction::new(grid, gbar)?,
        mbar: GridFunction::new(grid, mbar)?,
    })
}

/// Law obtained from `Pi_k = 0`, `s_k = 0`.
pub fn initial_law(p: &MmMfgProblem) -> Result<MeanFieldLaw> {
    let mf = build_mean_field_matrices(p);
    let major = build_extended_major(p, MeanFieldDynamics::Open(&mf));
    let d0 = major.dim();
    let dk = p.minor_ext_dim();
    let minors: Vec<ExtendedMinorSystem> = (0..p.num_types())
        .map(|k| {
            assemble_minor(p, k, &major, GridFunction::zeros(p.grid, p.m, d0), GridFunction::zeros(p.grid, p.m, 1))
        })
        .collect();
    let zeros_pi = vec![Mat::zeros(dk, dk); p.grid.num_nodes()];
    let zeros_s = vec![Mat::zeros(dk, 1); p.grid.num_nodes()];
    let pik: Vec<&[Mat]> = (0..p.num_types()).map(|_| zeros_pi.as_slice()).collect();
    let sk: Vec<&[Mat]> = (0..p.num_types()).map(|_| zeros_s.as_slice()).collect();
    law_from_minor_solutions(p, &minors, &pik, &sk, p.grid)
}

/// Mean-field law implied by a solution's own `(Pi_k, s_k)`; equals
/// `sol.mf_law` up to the fixed-point residual.
pub fn implied_law(p: &MmMfgProblem, sol: &MfgSolution) -> Result<MeanFieldLaw> {
    let pik: Vec<&[Mat]> = sol.pik.iter().map(|g| g.values()).collect();
    let sk: Vec<&[Mat]> = sol.sk.iter().map(|g| g.values()).collect();
    law_from_minor_solutions(p, &sol.minor_systems, &pik, &sk, *sol.grid())
}

struct Sweep {
    major: ExtendedMajorSystem,
    pi0: GridFunction,
    s0: GridFunction,
    major_gain: GridFunction,
    major_ff: GridFunction,
    minors: Vec<ExtendedMinorSystem>,
    pik: Vec<GridFunction>,
    sk: Vec<GridFunction>,
    minor_gains: Vec<GridFunction>,
    minor_ffs: Vec<GridFunction>,
}

impl Sweep {
    fn law(&self, p: &MmMfgProblem) -> Result<MeanFieldLaw> {
        let pik: Vec<&[Mat]> = self.pik.iter().map(|g| g.values()).collect();
        let sk: Vec<&[Mat]> = self.sk.iter().map(|g| g.values()).collect();
        law_from_minor_solutions(p, &self.minors, &pik, &sk, *self.pi0.grid())
    }

    fn into_solution(self, law: MeanFieldLaw, report: FixedPointReport, stationary: bool) -> MfgSolution {
        MfgSolution {
            pi0: self.pi0,
            s0: self.s0,
            pik: self.pik,
            sk: self.sk,
            mf_law: law,
            major_system: self.major,
            minor_systems: self.minors,
            major_gain: self.major_gain,
            major_feedforward: self.major_ff,
            minor_gains: self.minor_gains,
            minor_feedforwards: self.minor_ffs,
            report,
            stationary,
        }
    }
}

/// One pass: major Riccati/offset under `law`, then each type's.
fn finite_sweep(p: &MmMfgProblem, law: &MeanFieldLaw, exec: Execution) -> Result<Sweep> {
    let major = build_extended_major(p, MeanFieldDynamics::ClosedLoop(law));
    let sol0 = solve_riccati_offset(&major.lq_system(), &p.grid)?;
    let (major_gain, major_ff) = (sol0.gain.clone(), sol0.feedforward.clone());
    let per_type = try_map_indexed(exec, p.num_types(), |k| {
        let ext = assemble_minor(p, k, &major, major_gain.clone(), major_ff.clone());
        let sol = solve_riccati_offset(&ext.lq_system(), &p.grid)?;
        Ok::<_, Error>((ext, sol))
    })?;
    let mut sweep = Sweep {
        major,
        pi0: sol0.pi,
        s0: sol0.s,
        major_gain,
        major_ff,
        minors: Vec::new(),
        pik: Vec::new(),
        sk: Vec::new(),
        minor_gains: Vec::new(),
        minor_ffs: Vec::new(),
    };
    for (ext, sol) in per_type {
        sweep.minors.push(ext);
        sweep.pik.push(sol.pi);
        sweep.sk.push(sol.s);
        sweep.minor_gains.push(sol.gain);
        sweep.minor_ffs.push(sol.feedforward);
    }
    Ok(sweep)
}

fn picard<S>(p: &MmMfgProblem, cfg: &FixedPointConfig, start: MeanFieldLaw, sweep: S, stationary: bool) -> Result<MfgSolution>
where
    S: Fn(&MeanFieldLaw, Option<&Sweep>) -> Result<Sweep>,
{
    let mut current = start;
    let mut previous_map = current.clone();
    let mut residuals = Vec::new();
    let mut last: Option<Sweep> = None;
    for it in 1..=cfg.max_iters {
        let pass = sweep(&current, last.as_ref())?;
        let mapped = pass.law(p)?;
        let res = mapped.sup_distance(&previous_map);
        residuals.push(res);
        if !res.is_finite() {
            break;
        }
        if res < cfg.tol {
            let fin = sweep(&mapped, Some(&pass))?;
            let check = fin.law(p)?;
            let report = FixedPointReport { iterations: it, residuals, final_residual: check.sup_distance(&mapped) };
            return Ok(fin.into_solution(mapped, report, stationary));
        }
        current = mapped.blend(&current, cfg.damping);
        previous_map = mapped;
        last = Some(pass);
    }
    Err(Error::FixedPointFailure {
        iterations: residuals.len(),
        last_residual: residuals.last().copied().unwrap_or(f64::NAN),
        residuals,
    })
}

/// Damped Picard iteration on `(Abar, Gbar, mbar)` over the finite horizon.
pub fn solve_consistency_finite(p: &MmMfgProblem, cfg: &FixedPointConfig) -> Result<MfgSolution> {
    require_valid(p)?;
    cfg.check()?;
    let start = match &cfg.warm_start {
        Some(w) if w.grid() == &p.grid => w.clone(),
        Some(_) => return Err(Error::Config("warm start must live on the problem grid".into())),
        None => initial_law(p)?,
    };
    picard(p, cfg, start, |law, _| finite_sweep(p, law, cfg.execution), false)
}

/// `-K0(t) X0 - kff0(t)`.
pub fn equilibrium_feedback_major(sol: &MfgSolution, t: f64, x0_ext: &Mat) -> Result<Mat> {
    let (k, f) = sol.major_law_at(t)?;
    Ok(-(k * x0_ext) - f)
}

/// `-K_k(t) X - kff_k(t)`.
pub fn equilibrium_feedback_minor(sol: &MfgSolution, k: usize, t: f64, x_ext: &Mat) -> Result<Mat> {
    if k >= sol.num_types() {
        return Err(Error::Config(format!("type index {k} out of range")));
    }
    let (g, f) = sol.minor_law_at(k, t)?;
    Ok(-(g * x_ext) - f)
}

/// RK4 step of the mean-field ODE over `[t_j, t_{j+1}]` with the major
/// state interpolated linearly between its node values.
pub fn mean_field_step(law: &MeanFieldLaw, j: usize, xbar: &Mat, x0_start: &Mat, x0_end: &Mat) -> Mat {
    let grid = law.grid();
    let h = grid.h();
    let t0 = grid.node(j);
    let t1 = grid.node(j + 1);
    let tm = t0 + 0.5 * h;
    let x0_mid = (x0_start + x0_end) * 0.5;
    let k1 = law.rate(t0, xbar, x0_start);
    let k2 = law.rate(tm, &(xbar + &k1 * (0.5 * h)), &x0_mid);
    let k3 = law.rate(tm, &(xbar + &k2 * (0.5 * h)), &x0_mid);
    let k4 = law.rate(t1, &(xbar + &k3 * h), x0_end);
    xbar + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Mean field driven by a given major-state path.
pub fn mean_field_trajectory(sol: &MfgSolution, x0_path: &GridFunction, xbar0: &Mat) -> Result<GridFunction> {
    let law = &sol.mf_law;
    if x0_path.grid() != law.grid() {
        return Err(Error::Shape("major path must live on the solution grid".into()));
    }
    if xbar0.shape() != (law.mbar.shape().0, 1) {
        return Err(Error::Shape(format!("xbar0 is {:?}, expected {:?}", xbar0.shape(), law.mbar.shape())));
    }
    let mut values = Vec::with_capacity(x0_path.values().len());
    values.push(xbar0.clone());
    for j in 0..law.grid().steps() {
        let next = mean_field_step(law, j, &values[j], x0_path.at(j), x0_path.at(j + 1));
        values.push(next);
    }
    GridFunction::new(*law.grid(), values)
}

/// Hautus and closed-loop stability checks for the stationary game.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryAssumptions {
    pub agent: String,
    pub stabilizable: HautusReport,
    pub detectable: HautusReport,
    pub closed_loop_abscissa: Option<f64>,
}

impl StationaryAssumptions {
    pub fn passed(&self) -> bool {
        self.stabilizable.passed()
            && self.detectable.passed()
            && self.closed_loop_abscissa.is_none_or(|a| a < 0.0)
    }
}

fn hautus_pair(agent: String, a: &Mat, b: &Mat, q: &Mat, rho: f64) -> StationaryAssumptions {
    let d = a.nrows();
    let shifted = a - Mat::identity(d, d) * (0.5 * rho);
    StationaryAssumptions {
        agent,
        stabilizable: riccati::stabilizability(&shifted, b, 1e-9),
        detectable: riccati::detectability(&psd_sqrt(q), &shifted, 1e-9),
        closed_loop_abscissa: None,
    }
}

fn assumption_error(report: &StationaryAssumptions) -> Error {
    let mut parts = Vec::new();
    if !report.stabilizable.passed() {
        parts.push("not stabilizable");
    }
    if !report.detectable.passed() {
        parts.push("not detectable");
    }
    if report.closed_loop_abscissa.is_some_and(|a| a >= 0.0) {
        parts.push("closed loop not asymptotically stable");
    }
    Error::Assumption(format!("{}: {}", report.agent, parts.join(", ")))
}

/// `A - B K - (rho/2) I` must be Hurwitz for every agent.
pub fn closed_loop_stability(sol: &MfgSolution, rho: f64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let t = 0.0;
    let major = &sol.major_system;
    let d0 = major.dim();
    let a0 = major.a_at(t) - &major.bb0 * sol.major_gain.at(0) - Mat::identity(d0, d0) * (0.5 * rho);
    out.push(("major".to_string(), spectral_abscissa(&a0)));
    for (k, ext) in sol.minor_systems.iter().enumerate() {
        let dk = ext.dim();
        let ak = ext.a_at(t) - &ext.bbk * sol.minor_gains[k].at(0) - Mat::identity(dk, dk) * (0.5 * rho);
        out.push((format!("type {}", k + 1), spectral_abscissa(&ak)));
    }
    out
}

struct StationaryPiece {
    pi: Mat,
    s: Mat,
    gain: Mat,
    ff: Mat,
}

#[allow(clippy::too_many_arguments)]
fn stationary_piece(
    agent: String,
    a: &Mat,
    b: &Mat,
    drift: &Mat,
    weights: &crate::mfg_model::ExtendedWeights,
    r: &Mat,
    rho: f64,
    warm: Option<&Mat>,
) -> Result<StationaryPiece> {
    let report = hautus_pair(agent, a, b, &weights.q, rho);
    if !report.passed() {
        return Err(assumption_error(&report));
    }
    let r_inv = spd_inverse(r).ok_or_else(|| Error::Assumption("R not positive definite".into()))?;
    let are = riccati::solve_are(a, b, &weights.q, &weights.n_cross, r, rho, warm)?;
    let s = steady_offset(a, b, &weights.n_cross, &r_inv, &weights.eta_bar, &weights.n_bar, drift, rho, &are.pi)?;
    let (gain, ff) = riccati::feedback_terms(&r_inv, b, &weights.n_cross, &weights.n_bar, &are.pi, &s);
    Ok(StationaryPiece { pi: are.pi, s, gain, ff })
}

fn stationary_sweep(p: &MmMfgProblem, law: &MeanFieldLaw, warm: Option<&Sweep>, exec: Execution) -> Result<Sweep> {
    let grid = p.grid;
    let constant = |m: Mat| GridFunction::constant(grid, m);
    let major = build_extended_major(p, MeanFieldDynamics::ClosedLoop(law));
    let a0 = major.a_at(0.0);
    let m0 = major.m_at(0.0);
    let piece0 = stationary_piece(
        "major".into(),
        &a0,
        &major.bb0,
        &m0,
        &major.weights,
        &major.r0,
        p.rho,
        warm.map(|w| w.pi0.first()),
    )?;
    let major_gain = constant(piece0.gain);
    let major_ff = constant(piece0.ff);
    let per_type = try_map_indexed(exec, p.num_types(), |k| {
        let ext = assemble_minor(p, k, &major, major_gain.clone(), major_ff.clone());
        let piece = stationary_piece(
            format!("type {}", k + 1),
            &ext.a_at(0.0),
            &ext.bbk,
            &ext.m_at(0.0),
            &ext.weights,
            &ext.r_k,
            p.rho,
            warm.map(|w| w.pik[k].first()),
        )?;
        Ok::<_, Error>((ext, piece))
    })?;
    let mut sweep = Sweep {
        major,
        pi0: constant(piece0.pi),
        s0: constant(piece0.s),
        major_gain,
        major_ff,
        minors: Vec::new(),
        pik: Vec::new(),
        sk: Vec::new(),
        minor_gains: Vec::new(),
        minor_ffs: Vec::new(),
    };
    for (ext, piece) in per_type {
        sweep.minors.push(ext);
        sweep.pik.push(constant(piece.pi));
        sweep.sk.push(constant(piece.s));
        sweep.minor_gains.push(constant(piece.gain));
        sweep.minor_ffs.push(constant(piece.ff));
    }
    Ok(sweep)
}

/// Stationary discounted game: the Picard loop with AREs and steady
/// offsets in place of the backward sweeps.
pub fn solve_consistency_infinite(p: &MmMfgProblem, cfg: &FixedPointConfig) -> Result<MfgSolution> {
    require_valid(p)?;
    cfg.check()?;
    if !(p.rho > 0.0) {
        return Err(Error::Config(format!("stationary game needs rho > 0, got {}", p.rho)));
    }
    if !p.major.drift.is_constant() || p.minors.iter().any(|t| !t.drift.is_constant()) {
        return Err(Error::Config("stationary game needs constant drifts".into()));
    }
    let start = match &cfg.warm_start {
        Some(w) => MeanFieldLaw {
            abar: GridFunction::constant(p.grid, w.abar.first().clone()),
            gbar: GridFunction::constant(p.grid, w.gbar.first().clone()),
            mbar: GridFunction::constant(p.grid, w.mbar.first().clone()),
        },
        None => {
            let law = initial_law(p)?;
            MeanFieldLaw {
                abar: GridFunction::constant(p.grid, law.abar.first().clone()),
                gbar: GridFunction::constant(p.grid, law.gbar.first().clone()),
                mbar: GridFunction::constant(p.grid, law.mbar.first().clone()),
            }
        }
    };
    let sol = picard(p, cfg, start, |law, warm| stationary_sweep(p, law, warm, cfg.execution), true)?;
    for (agent, abscissa) in closed_loop_stability(&sol, p.rho) {
        if !(abscissa < 0.0) {
            return Err(Error::Assumption(format!(
                "{agent}: closed loop not asymptotically stable (spectral abscissa {abscissa:e})"
            )));
        }
    }
    Ok(sol)
}
