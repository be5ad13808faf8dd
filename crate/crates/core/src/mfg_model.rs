//! Major-minor LQG mean-field game: problem data and the derived
//! mean-field, extended-dynamics and extended-cost matrices.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lqg::{convexity_checks, PSD_TOL};
use crate::mfg_solver::MeanFieldLaw;
use crate::numerics::{block_diag, hstack, max_abs, psd_check, spd_inverse, vstack, GridFunction, Mat, TimeGrid};
use crate::riccati::{feedback_terms, LqSystem};

/// Major agent: `dx0 = (A0 x0 + F0 x^(N) + B0 u0 + b0)dt + sigma0 dw0`,
/// tracking `Phi = H0 x^(N) + eta0`.
#[derive(Debug, Clone)]
pub struct MajorParams {
    pub a: Mat,
    pub f: Mat,
    pub b: Mat,
    pub drift: GridFunction,
    pub sigma: Mat,
    pub qhat: Mat,
    pub q: Mat,
    pub n_cross: Mat,
    pub r: Mat,
    pub h: Mat,
    pub eta: Mat,
}

/// Minor type `k`: `dx = (A x + F x^(N) + G x0 + B u + b)dt + sigma dw`,
/// tracking `Psi = H x0 + Hhat x^(N) + eta`.
#[derive(Debug, Clone)]
pub struct MinorTypeParams {
    pub a: Mat,
    pub f: Mat,
    pub g: Mat,
    pub b: Mat,
    pub drift: GridFunction,
    pub sigma: Mat,
    pub qhat: Mat,
    pub q: Mat,
    pub n_cross: Mat,
    pub r: Mat,
    pub h: Mat,
    pub h_hat: Mat,
    pub eta: Mat,
}

#[derive(Debug, Clone)]
pub struct MmMfgProblem {
    pub major: MajorParams,
    pub minors: Vec<MinorTypeParams>,
    pub pi: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub grid: TimeGrid,
    pub rho: f64,
    /// Mean of every agent's initial state; must be zero.
    pub initial_mean: Mat,
    /// Covariance of every agent's initial state.
    pub initial_cov: Mat,
}

impl MmMfgProblem {
    pub fn num_types(&self) -> usize {
        self.minors.len()
    }

    /// `n + nK`.
    pub fn major_ext_dim(&self) -> usize {
        self.n * (1 + self.num_types())
    }

    /// `2n + nK`.
    pub fn minor_ext_dim(&self) -> usize {
        self.n * (2 + self.num_types())
    }

    /// `[pi_1 M, ..., pi_K M]`.
    pub fn replicate(&self, m: &Mat) -> Mat {
        let blocks: Vec<Mat> = self.pi.iter().map(|p| m * *p).collect();
        hstack(&blocks.iter().collect::<Vec<_>>())
    }

    /// `e_k`: `n x nK` selector with the identity at block `k`.
    pub fn selector(&self, k: usize) -> Mat {
        let n = self.n;
        let mut e = Mat::zeros(n, n * self.num_types());
        e.view_mut((0, n * k), (n, n)).fill_with_identity();
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub items: Vec<CheckItem>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.items
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect()
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.items.push(CheckItem { name: name.into(), passed, detail: detail.into() });
    }
}

fn shape_audit(p: &MmMfgProblem) -> Vec<String> {
    let (n, m, r) = (p.n, p.m, p.r);
    let mut bad = Vec::new();
    fn want(bad: &mut Vec<String>, who: &str, name: &str, got: (usize, usize), exp: (usize, usize)) {
        if got != exp {
            bad.push(format!("{who} {name} is {got:?}, expected {exp:?}"));
        }
    }
    let mj = &p.major;
    for (name, mat, exp) in [
        ("A", &mj.a, (n, n)),
        ("F", &mj.f, (n, n)),
        ("B", &mj.b, (n, m)),
        ("sigma", &mj.sigma, (n, r)),
        ("Qhat", &mj.qhat, (n, n)),
        ("Q", &mj.q, (n, n)),
        ("N", &mj.n_cross, (n, m)),
        ("R", &mj.r, (m, m)),
        ("H", &mj.h, (n, n)),
        ("eta", &mj.eta, (n, 1)),
    ] {
        want(&mut bad, "major", name, mat.shape(), exp);
    }
    want(&mut bad, "major", "b", mj.drift.shape(), (n, 1));
    for (k, t) in p.minors.iter().enumerate() {
        let who = format!("type {}", k + 1);
        for (name, mat, exp) in [
            ("A", &t.a, (n, n)),
            ("F", &t.f, (n, n)),
            ("G", &t.g, (n, n)),
            ("B", &t.b, (n, m)),
            ("sigma", &t.sigma, (n, r)),
            ("Qhat", &t.qhat, (n, n)),
            ("Q", &t.q, (n, n)),
            ("N", &t.n_cross, (n, m)),
            ("R", &t.r, (m, m)),
            ("H", &t.h, (n, n)),
            ("Hhat", &t.h_hat, (n, n)),
            ("eta", &t.eta, (n, 1)),
        ] {
            want(&mut bad, &who, name, mat.shape(), exp);
        }
        want(&mut bad, &who, "b", t.drift.shape(), (n, 1));
        if t.drift.grid() != &p.grid {
            bad.push(format!("{who} b is not sampled on the problem grid"));
        }
    }
    if mj.drift.grid() != &p.grid {
        bad.push("major b is not sampled on the problem grid".into());
    }
    want(&mut bad, "initial", "mean", p.initial_mean.shape(), (n, 1));
    want(&mut bad, "initial", "covariance", p.initial_cov.shape(), (n, n));
    if p.pi.len() != p.minors.len() {
        bad.push(format!("pi has {} entries for {} types", p.pi.len(), p.minors.len()));
    }
    bad
}

/// Shape audit, the distribution `pi`, the initial-state law and the
/// convexity conditions of every agent.
pub fn validate_problem(p: &MmMfgProblem, tol: f64) -> ValidationReport {
    let mut report = ValidationReport { items: Vec::new() };
    let shapes = shape_audit(p);
    let shapes_ok = shapes.is_empty() && !p.minors.is_empty();
    report.push(
        "shapes",
        shapes_ok,
        if p.minors.is_empty() { "at least one minor type is required".into() } else { shapes.join("; ") },
    );

    let sum: f64 = p.pi.iter().sum();
    let dist = p.pi.iter().all(|v| v.is_finite() && *v >= 0.0) && (sum - 1.0).abs() <= 1e-12;
    report.push(
        "pi",
        dist,
        if dist { String::new() } else { format!("π not a distribution (entries {:?}, sum {sum})", p.pi) },
    );
    if !(p.rho.is_finite()) {
        report.push("rho", false, "discount rate must be finite");
    }
    if !shapes_ok {
        return report;
    }

    let zero_mean = max_abs(&p.initial_mean) == 0.0;
    report.push("initial mean", zero_mean, if zero_mean { "" } else { "initial states must have mean zero" });
    let cov_ok = max_abs(&(&p.initial_cov - p.initial_cov.transpose())) == 0.0 && psd_check(&p.initial_cov, tol);
    report.push(
        "initial covariance",
        cov_ok,
        if cov_ok { "" } else { "initial covariance must be symmetric positive semidefinite" },
    );

    let mut convexity = |who: String, qhat: &Mat, q: &Mat, n_cross: &Mat, r: &Mat| {
        for c in convexity_checks(qhat, q, n_cross, r, tol) {
            let detail = if c.passed { String::new() } else { format!("{} (min eigenvalue {:e})", c.name, c.min_eigenvalue) };
            report.push(format!("{who} convexity"), c.passed, detail);
        }
    };
    let mj = &p.major;
    convexity("major".into(), &mj.qhat, &mj.q, &mj.n_cross, &mj.r);
    for (k, t) in p.minors.iter().enumerate() {
        convexity(format!("type {}", k + 1), &t.qhat, &t.q, &t.n_cross, &t.r);
    }
    report
}

/// Errors unless the problem passes [`validate_problem`].
pub fn require_valid(p: &MmMfgProblem) -> Result<()> {
    let report = validate_problem(p, PSD_TOL);
    if report.passed() {
        return Ok(());
    }
    let shape_or_pi = report
        .items
        .iter()
        .any(|c| !c.passed && (c.name == "shapes" || c.name == "pi"));
    let msg = report.failures().join("; ");
    if shape_or_pi {
        Err(Error::Config(msg))
    } else {
        Err(Error::Assumption(msg))
    }
}

/// Open-loop mean-field matrices:
/// `dxbar = (Abreve xbar + Gbreve x0 + Bbreve ubar + mbreve)dt`.
#[derive(Debug, Clone)]
pub struct MeanFieldMatrices {
    pub abreve: Mat,
    pub gbreve: Mat,
    pub bbreve: Mat,
    pub mbreve: GridFunction,
    pub selectors: Vec<Mat>,
}

pub fn build_mean_field_matrices(p: &MmMfgProblem) -> MeanFieldMatrices {
    let kk = p.num_types();
    let selectors: Vec<Mat> = (0..kk).map(|k| p.selector(k)).collect();
    let rows: Vec<Mat> = p
        .minors
        .iter()
        .zip(&selectors)
        .map(|(t, e)| &t.a * e + p.replicate(&t.f))
        .collect();
    let abreve = vstack(&rows.iter().collect::<Vec<_>>());
    let gbreve = vstack(&p.minors.iter().map(|t| &t.g).collect::<Vec<_>>());
    let bbreve = block_diag(&p.minors.iter().map(|t| &t.b).collect::<Vec<_>>());
    let mbreve = GridFunction::from_fn(p.grid, |j, _| {
        vstack(&p.minors.iter().map(|t| t.drift.at(j)).collect::<Vec<_>>())
    })
    .expect("minor drifts share the problem grid");
    MeanFieldMatrices { abreve, gbreve, bbreve, mbreve, selectors }
}

/// Mean-field dynamics inserted into the major agent's extended state.
#[derive(Clone, Copy)]
pub enum MeanFieldDynamics<'a> {
    /// `(Abreve, Gbreve, mbreve)` with the mean-field control left open.
    Open(&'a MeanFieldMatrices),
    /// The closed-loop law `(Abar, Gbar, mbar)`.
    ClosedLoop(&'a MeanFieldLaw),
}

/// Quadratic tracking weights `e = L X - eta` expanded to
/// `(L'QL, L'N, L'Q eta, N' eta, L'Qhat L, L'Qhat eta)`.
#[derive(Debug, Clone)]
pub struct ExtendedWeights {
    pub g: Mat,
    pub q: Mat,
    pub n_cross: Mat,
    pub eta_bar: Mat,
    pub n_bar: Mat,
    pub terminal_linear: Mat,
}

fn extended_weights(l: &Mat, qhat: &Mat, q: &Mat, n_cross: &Mat, eta: &Mat) -> ExtendedWeights {
    let lt = l.transpose();
    ExtendedWeights {
        g: &lt * qhat * l,
        q: &lt * q * l,
        n_cross: &lt * n_cross,
        eta_bar: &lt * q * eta,
        n_bar: n_cross.transpose() * eta,
        terminal_linear: &lt * qhat * eta,
    }
}

/// Major agent's extended system on `X0 = (x0, xbar)`.
#[derive(Debug, Clone)]
pub struct ExtendedMajorSystem {
    pub n: usize,
    pub num_types: usize,
    pub a0: Mat,
    pub f0_pi: Mat,
    pub abar: GridFunction,
    pub gbar: GridFunction,
    pub drift0: GridFunction,
    pub mbar: GridFunction,
    pub bb0: Mat,
    pub btilde0: Mat,
    pub sigma0: Mat,
    pub weights: ExtendedWeights,
    pub r0: Mat,
    pub rho: f64,
    closed_loop: bool,
}

impl ExtendedMajorSystem {
    pub fn dim(&self) -> usize {
        self.n * (1 + self.num_types)
    }

    fn coefficient(&self, g: &GridFunction, t: f64) -> Mat {
        if self.closed_loop {
            g.interp_cubic(t).expect("time inside grid")
        } else {
            g.interp(t).expect("time inside grid")
        }
    }

    /// `[[A0, F0^pi], [Gbar(t), Abar(t)]]`.
    pub fn a_at(&self, t: f64) -> Mat {
        let top = hstack(&[&self.a0, &self.f0_pi]);
        let bottom = hstack(&[&self.coefficient(&self.gbar, t), &self.coefficient(&self.abar, t)]);
        vstack(&[&top, &bottom])
    }

    /// `[b0(t); mbar(t)]`.
    pub fn m_at(&self, t: f64) -> Mat {
        vstack(&[&self.drift0.interp(t).expect("time inside grid"), &self.coefficient(&self.mbar, t)])
    }

    pub fn lq_system(&self) -> LqSystem<'_> {
        LqSystem {
            a: Box::new(move |t| self.a_at(t)),
            b: self.bb0.clone(),
            drift: Box::new(move |t| self.m_at(t)),
            q: self.weights.q.clone(),
            n_cross: self.weights.n_cross.clone(),
            r: self.r0.clone(),
            eta: self.weights.eta_bar.clone(),
            n_lin: self.weights.n_bar.clone(),
            rho: self.rho,
            qhat: self.weights.g.clone(),
            qhat_lin: self.weights.terminal_linear.clone(),
        }
    }
}

pub fn build_extended_major(p: &MmMfgProblem, dynamics: MeanFieldDynamics<'_>) -> ExtendedMajorSystem {
    let n = p.n;
    let kk = p.num_types();
    let mj = &p.major;
    let (abar, gbar, mbar, btilde_lower, closed_loop) = match dynamics {
        MeanFieldDynamics::Open(mf) => (
            GridFunction::constant(p.grid, mf.abreve.clone()),
            GridFunction::constant(p.grid, mf.gbreve.clone()),
            mf.mbreve.clone(),
            mf.bbreve.clone(),
            false,
        ),
        MeanFieldDynamics::ClosedLoop(law) => (
            law.abar.clone(),
            law.gbar.clone(),
            law.mbar.clone(),
            block_diag(&p.minors.iter().map(|t| &t.b).collect::<Vec<_>>()),
            true,
        ),
    };
    let l = hstack(&[&Mat::identity(n, n), &(-p.replicate(&mj.h))]);
    ExtendedMajorSystem {
        n,
        num_types: kk,
        a0: mj.a.clone(),
        f0_pi: p.replicate(&mj.f),
        abar,
        gbar,
        drift0: mj.drift.clone(),
        mbar,
        bb0: vstack(&[&mj.b, &Mat::zeros(n * kk, p.m)]),
        btilde0: vstack(&[&Mat::zeros(n, p.m * kk), &btilde_lower]),
        sigma0: vstack(&[&mj.sigma, &Mat::zeros(n * kk, p.r)]),
        weights: extended_weights(&l, &mj.qhat, &mj.q, &mj.n_cross, &mj.eta),
        r0: mj.r.clone(),
        rho: p.rho,
        closed_loop,
    }
}

/// Minor agent's extended system on `X = (x, x0, xbar)` with the major
/// agent's extended state in closed loop.
#[derive(Debug, Clone)]
pub struct ExtendedMinorSystem {
    pub n: usize,
    pub num_types: usize,
    pub index: usize,
    pub a_k: Mat,
    /// `[G_k, F_k^pi]`.
    pub coupling: Mat,
    pub drift_k: GridFunction,
    pub major: ExtendedMajorSystem,
    pub major_gain: GridFunction,
    pub major_feedforward: GridFunction,
    pub bbk: Mat,
    pub btildek: Mat,
    pub sigmak: Mat,
    pub weights: ExtendedWeights,
    pub r_k: Mat,
    pub rho: f64,
}

impl ExtendedMinorSystem {
    pub fn dim(&self) -> usize {
        self.n * (2 + self.num_types)
    }

    /// `A0ext - Bb0 K0(t)`.
    pub fn major_closed_loop_at(&self, t: f64) -> Mat {
        self.major.a_at(t) - &self.major.bb0 * self.major_gain.interp_cubic(t).expect("time inside grid")
    }

    /// `[[A_k, [G_k, F_k^pi]], [0, A0ext - Bb0 K0(t)]]`.
    pub fn a_at(&self, t: f64) -> Mat {
        let n = self.n;
        let d0 = self.major.dim();
        let top = hstack(&[&self.a_k, &self.coupling]);
        let bottom = hstack(&[&Mat::zeros(d0, n), &self.major_closed_loop_at(t)]);
        vstack(&[&top, &bottom])
    }

    /// `[b_k(t); M0ext(t) - Bb0 kff0(t)]`.
    pub fn m_at(&self, t: f64) -> Mat {
        let lower = self.major.m_at(t)
            - &self.major.bb0 * self.major_feedforward.interp_cubic(t).expect("time inside grid");
        vstack(&[&self.drift_k.interp(t).expect("time inside grid"), &lower])
    }

    pub fn lq_system(&self) -> LqSystem<'_> {
        LqSystem {
            a: Box::new(move |t| self.a_at(t)),
            b: self.bbk.clone(),
            drift: Box::new(move |t| self.m_at(t)),
            q: self.weights.q.clone(),
            n_cross: self.weights.n_cross.clone(),
            r: self.r_k.clone(),
            eta: self.weights.eta_bar.clone(),
            n_lin: self.weights.n_bar.clone(),
            rho: self.rho,
            qhat: self.weights.g.clone(),
            qhat_lin: self.weights.terminal_linear.clone(),
        }
    }
}

/// Major feedback `u0 = -K0 X0 - kff0` from `(Pi0, s0)` at every node.
pub fn major_feedback_terms(major: &ExtendedMajorSystem, pi0: &GridFunction, s0: &GridFunction) -> Result<(GridFunction, GridFunction)> {
    let r_inv = spd_inverse(&major.r0).ok_or_else(|| Error::Assumption("major R not positive definite".into()))?;
    let mut gains = Vec::with_capacity(pi0.values().len());
    let mut ffs = Vec::with_capacity(pi0.values().len());
    for (pi, s) in pi0.values().iter().zip(s0.values()) {
        let (g, f) = feedback_terms(&r_inv, &major.bb0, &major.weights.n_cross, &major.weights.n_bar, pi, s);
        gains.push(g);
        ffs.push(f);
    }
    Ok((GridFunction::new(*pi0.grid(), gains)?, GridFunction::new(*pi0.grid(), ffs)?))
}

pub fn build_extended_minor(
    p: &MmMfgProblem,
    k: usize,
    major: &ExtendedMajorSystem,
    pi0: &GridFunction,
    s0: &GridFunction,
) -> Result<ExtendedMinorSystem> {
    let (major_gain, major_feedforward) = major_feedback_terms(major, pi0, s0)?;
    Ok(assemble_minor(p, k, major, major_gain, major_feedforward))
}

pub(crate) fn assemble_minor(
    p: &MmMfgProblem,
    k: usize,
    major: &ExtendedMajorSystem,
    major_gain: GridFunction,
    major_feedforward: GridFunction,
) -> ExtendedMinorSystem {
    let n = p.n;
    let kk = p.num_types();
    let t = &p.minors[k];
    let d0 = major.dim();
    let l = hstack(&[&Mat::identity(n, n), &(-&t.h), &(-p.replicate(&t.h_hat))]);
    ExtendedMinorSystem {
        n,
        num_types: kk,
        index: k,
        a_k: t.a.clone(),
        coupling: hstack(&[&t.g, &p.replicate(&t.f)]),
        drift_k: t.drift.clone(),
        major: major.clone(),
        major_gain,
        major_feedforward,
        bbk: vstack(&[&t.b, &Mat::zeros(d0, p.m)]),
        btildek: vstack(&[&Mat::zeros(n, p.m * kk), &major.btilde0]),
        sigmak: block_diag(&[&t.sigma, &major.sigma0]),
        weights: extended_weights(&l, &t.qhat, &t.q, &t.n_cross, &t.eta),
        r_k: t.r.clone(),
        rho: p.rho,
    }
}

/// First block row `(Pi_11, Pi_12, Pi_13)` of a minor extended matrix.
pub fn extract_pi_blocks(pik: &Mat, n: usize, num_types: usize) -> (Mat, Mat, Mat) {
    (
        pik.view((0, 0), (n, n)).into_owned(),
        pik.view((0, n), (n, n)).into_owned(),
        pik.view((0, 2 * n), (n, n * num_types)).into_owned(),
    )
}

/// Row blocks `(N_11, N_21, N_31)` of a minor extended cross weight.
pub fn split_cross_weight(nk: &Mat, n: usize, num_types: usize) -> (Mat, Mat, Mat) {
    let m = nk.ncols();
    (
        nk.view((0, 0), (n, m)).into_owned(),
        nk.view((n, 0), (n, m)).into_owned(),
        nk.view((2 * n, 0), (n * num_types, m)).into_owned(),
    )
}

/// Ready-made problems used by tests, benchmarks and the command line.
pub mod fixtures {
    use super::*;

    fn m2(v: [f64; 4]) -> Mat {
        Mat::from_row_slice(2, 2, &v)
    }

    fn c2(a: f64, b: f64) -> Mat {
        Mat::from_row_slice(2, 1, &[a, b])
    }

    fn s1(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn eye(s: f64) -> Mat {
        Mat::identity(2, 2) * s
    }

    /// Two-type coupled problem with `n = 2`, `m = 1`, `K = 2` on `[0, T]`.
    pub fn toy_problem_on(grid: TimeGrid, rho: f64) -> MmMfgProblem {
        let major = MajorParams {
            a: m2([0.0, 1.0, -0.5, -0.3]),
            f: eye(0.3),
            b: c2(0.0, 1.0),
            drift: GridFunction::constant(grid, c2(0.1, 0.0)),
            sigma: eye(0.3),
            qhat: m2([1.0, 0.0, 0.0, 0.0]),
            q: eye(1.0),
            n_cross: c2(0.1, 0.0),
            r: s1(1.0),
            h: eye(0.5),
            eta: c2(0.0, 0.5),
        };
        let first = MinorTypeParams {
            a: m2([0.0, 1.0, -1.0, -0.2]),
            f: eye(0.2),
            g: eye(0.3),
            b: c2(0.0, 1.0),
            drift: GridFunction::constant(grid, c2(0.0, 0.1)),
            sigma: eye(0.4),
            qhat: m2([0.0, 0.0, 0.0, 1.0]),
            q: eye(1.0),
            n_cross: c2(0.0, 0.1),
            r: s1(1.0),
            h: eye(0.3),
            h_hat: eye(0.4),
            eta: c2(0.3, 0.0),
        };
        let second = MinorTypeParams {
            a: m2([-0.5, 0.5, 0.0, -0.2]),
            f: eye(0.1),
            g: eye(0.2),
            b: c2(1.0, 0.5),
            drift: GridFunction::constant(grid, c2(0.05, 0.0)),
            sigma: eye(0.3),
            qhat: m2([1.0, 0.0, 0.0, 0.0]),
            q: eye(0.8),
            n_cross: c2(0.05, 0.0),
            r: s1(1.5),
            h: eye(0.2),
            h_hat: eye(0.5),
            eta: c2(0.0, 0.2),
        };
        MmMfgProblem {
            major,
            minors: vec![first, second],
            pi: vec![0.5, 0.5],
            n: 2,
            m: 1,
            r: 2,
            grid,
            rho,
            initial_mean: Mat::zeros(2, 1),
            initial_cov: eye(0.25),
        }
    }

    /// The coupled toy problem on `[0, 1]` with 400 steps.
    pub fn toy_problem() -> MmMfgProblem {
        toy_problem_on(TimeGrid::new(1.0, 400).expect("valid grid"), 0.0)
    }

    /// The toy problem with every coupling and tracking offset removed, so
    /// each agent faces a standalone LQG problem.
    pub fn decoupled_problem_on(grid: TimeGrid, rho: f64) -> MmMfgProblem {
        let mut p = toy_problem_on(grid, rho);
        p.major.f = Mat::zeros(2, 2);
        p.major.h = Mat::zeros(2, 2);
        p.major.eta = Mat::zeros(2, 1);
        for t in &mut p.minors {
            t.f = Mat::zeros(2, 2);
            t.g = Mat::zeros(2, 2);
            t.h = Mat::zeros(2, 2);
            t.h_hat = Mat::zeros(2, 2);
            t.eta = Mat::zeros(2, 1);
        }
        p
    }

    pub fn decoupled_problem() -> MmMfgProblem {
        decoupled_problem_on(TimeGrid::new(1.0, 400).expect("valid grid"), 0.0)
    }

    /// Single-type scalar problem (`n = m = r = 1`) used by small checks.
    pub fn scalar_problem(grid: TimeGrid, rho: f64) -> MmMfgProblem {
        let major = MajorParams {
            a: s1(-0.2),
            f: s1(0.2),
            b: s1(1.0),
            drift: GridFunction::constant(grid, s1(0.1)),
            sigma: s1(0.3),
            qhat: s1(0.5),
            q: s1(1.0),
            n_cross: s1(0.0),
            r: s1(1.0),
            h: s1(0.4),
            eta: s1(0.0),
        };
        let minor = MinorTypeParams {
            a: s1(-0.1),
            f: s1(0.1),
            g: s1(0.2),
            b: s1(1.0),
            drift: GridFunction::constant(grid, s1(0.0)),
            sigma: s1(0.4),
            qhat: s1(0.0),
            q: s1(1.0),
            n_cross: s1(0.0),
            r: s1(1.0),
            h: s1(0.3),
            h_hat: s1(0.3),
            eta: s1(0.2),
        };
        MmMfgProblem {
            major,
            minors: vec![minor],
            pi: vec![1.0],
            n: 1,
            m: 1,
            r: 1,
            grid,
            rho,
            initial_mean: s1(0.0),
            initial_cov: s1(0.25),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::numerics::min_eigenvalue;
    use proptest::prelude::*;

    #[test]
    fn toy_problem_is_valid() {
        let report = validate_problem(&toy_problem(), PSD_TOL);
        assert!(report.passed(), "{:?}", report.failures());
        assert!(validate_problem(&decoupled_problem(), PSD_TOL).passed());
    }

    #[test]
    fn rejects_bad_distribution() {
        let mut p = toy_problem();
        p.pi = vec![0.7, 0.7];
        let report = validate_problem(&p, PSD_TOL);
        assert!(!report.passed());
        assert!(report.failures().iter().any(|f| f.contains("π not a distribution")));
        assert!(matches!(require_valid(&p), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_singular_minor_r() {
        let mut p = toy_problem();
        p.minors[1].r = Mat::zeros(1, 1);
        let report = validate_problem(&p, PSD_TOL);
        assert!(report.failures().iter().any(|f| f.starts_with("type 2 convexity") && f.contains("R not positive definite")));
        assert!(matches!(require_valid(&p), Err(Error::Assumption(_))));
    }

    #[test]
    fn rejects_nonzero_mean() {
        let mut p = toy_problem();
        p.initial_mean[(0, 0)] = 0.1;
        assert!(!validate_problem(&p, PSD_TOL).passed());
    }

    #[test]
    fn single_type_mean_field_matrices() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let p = scalar_problem(grid, 0.0);
        let mf = build_mean_field_matrices(&p);
        assert_eq!(mf.abreve, &p.minors[0].a + &p.minors[0].f);
        assert_eq!(mf.gbreve, p.minors[0].g);
        assert_eq!(mf.selectors[0], Mat::identity(1, 1));
    }

    #[test]
    fn uncoupled_mean_field_is_block_diagonal() {
        let p = decoupled_problem();
        let mf = build_mean_field_matrices(&p);
        assert_eq!(mf.abreve, block_diag(&[&p.minors[0].a, &p.minors[1].a]));
        assert_eq!(mf.bbreve.shape(), (4, 2));
        assert_eq!(mf.bbreve.view((0, 1), (2, 1)).into_owned(), Mat::zeros(2, 1));
    }

    #[test]
    fn shape_bookkeeping_for_scalar_two_types() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mut p = scalar_problem(grid, 0.0);
        p.minors.push(p.minors[0].clone());
        p.pi = vec![0.5, 0.5];
        let mf = build_mean_field_matrices(&p);
        assert_eq!(mf.abreve.shape(), (2, 2));
        assert_eq!(mf.bbreve, Mat::identity(2, 2));
        let major = build_extended_major(&p, MeanFieldDynamics::Open(&mf));
        assert_eq!(major.a_at(0.0).shape(), (3, 3));
        let zeros = GridFunction::zeros(grid, 3, 3);
        let minor = build_extended_minor(&p, 0, &major, &zeros, &GridFunction::zeros(grid, 3, 1)).unwrap();
        assert_eq!(minor.a_at(0.5).shape(), (4, 4));
    }

    #[test]
    fn zero_tracking_matrix_gives_block_weights() {
        let p = decoupled_problem();
        let mf = build_mean_field_matrices(&p);
        let major = build_extended_major(&p, MeanFieldDynamics::Open(&mf));
        let mut want = Mat::zeros(6, 6);
        want.view_mut((0, 0), (2, 2)).copy_from(&p.major.q);
        assert_eq!(major.weights.q, want);
        let mut eta = Mat::zeros(6, 1);
        eta.view_mut((0, 0), (2, 1)).copy_from(&(&p.major.q * &p.major.eta));
        assert_eq!(major.weights.eta_bar, eta);
    }

    #[test]
    fn minor_reduces_to_major_block_without_feedback() {
        let mut p = decoupled_problem();
        p.major.n_cross = Mat::zeros(2, 1);
        let mf = build_mean_field_matrices(&p);
        let major = build_extended_major(&p, MeanFieldDynamics::Open(&mf));
        let zeros = GridFunction::zeros(p.grid, 6, 6);
        let minor = build_extended_minor(&p, 1, &major, &zeros, &GridFunction::zeros(p.grid, 6, 1)).unwrap();
        let a = minor.a_at(0.3);
        assert_eq!(a.view((2, 2), (6, 6)).into_owned(), major.a_at(0.3));
        assert_eq!(a.view((0, 2), (2, 6)).into_owned(), Mat::zeros(2, 6));
    }

    #[test]
    fn pi_block_extraction() {
        let (a, b, c) = extract_pi_blocks(&Mat::identity(8, 8), 2, 2);
        assert_eq!(a, Mat::identity(2, 2));
        assert_eq!(b, Mat::zeros(2, 2));
        assert_eq!(c, Mat::zeros(2, 4));
        let (_, _, c) = extract_pi_blocks(&Mat::identity(10, 10), 2, 3);
        assert_eq!(c.shape(), (2, 6));
    }

    #[test]
    fn builds_are_deterministic() {
        let p = toy_problem();
        let mf = build_mean_field_matrices(&p);
        let a = build_extended_major(&p, MeanFieldDynamics::Open(&mf));
        let b = build_extended_major(&p, MeanFieldDynamics::Open(&mf));
        assert_eq!(a.a_at(0.25), b.a_at(0.25));
        assert_eq!(a.weights.q, b.weights.q);
    }

    proptest! {
        #[test]
        fn pi_blocks_reassemble(vals in proptest::collection::vec(-5.0f64..5.0, 64)) {
            let m = Mat::from_row_slice(8, 8, &vals);
            let (a, b, c) = extract_pi_blocks(&m, 2, 2);
            prop_assert_eq!(hstack(&[&a, &b, &c]), m.view((0, 0), (2, 8)).into_owned());
        }

        #[test]
        fn extended_weights_are_psd(
            h in proptest::collection::vec(-2.0f64..2.0, 4),
            hh in proptest::collection::vec(-2.0f64..2.0, 4),
            w in 0.5f64..1.0,
        ) {
            let mut p = toy_problem();
            p.pi = vec![w, 1.0 - w];
            p.major.h = Mat::from_row_slice(2, 2, &h);
            p.minors[0].h = Mat::from_row_slice(2, 2, &h);
            p.minors[0].h_hat = Mat::from_row_slice(2, 2, &hh);
            let mf = build_mean_field_matrices(&p);
            let major = build_extended_major(&p, MeanFieldDynamics::Open(&mf));
            let zeros = GridFunction::zeros(p.grid, 6, 6);
            let minor = build_extended_minor(&p, 0, &major, &zeros, &GridFunction::zeros(p.grid, 6, 1)).unwrap();
            for m in [&major.weights.q, &major.weights.g, &minor.weights.q, &minor.weights.g] {
                let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
                prop_assert!(min_eigenvalue(m) >= -1e-12 * scale);
            }
        }
    }
}
