//! Single-agent LQG control: finite-horizon Riccati/offset solution,
//! the stationary discounted problem, exact costs and the deterministic
//! Gateaux-derivative oracle.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::moments::{self, FlowCoefficients, TerminalForm};
use crate::numerics::{
    integrate_backward, integrate_forward, max_abs, psd_sqrt, spd_inverse, symmetric_eigenvalues,
    GridFunction, Mat, TimeGrid,
};
use crate::riccati::{self, HautusReport, LqSystem, RiccatiSolution};

/// `dx = (Ax + Bu + b(t))dt + sigma(t)dw` with the discounted quadratic cost
/// `1/2 E[e^{-rho T} x_T'Qhat x_T + int e^{-rho t}(x'Qx + 2x'Nu + u'Ru - 2x'eta - 2u'n)dt]`.
#[derive(Debug, Clone)]
pub struct LqgProblem {
    pub a: Mat,
    pub b: Mat,
    pub drift: GridFunction,
    pub sigma: GridFunction,
    pub qhat: Mat,
    pub q: Mat,
    pub n_cross: Mat,
    pub r: Mat,
    pub eta: Mat,
    pub n_lin: Mat,
    pub rho: f64,
    pub grid: TimeGrid,
    pub x0: Mat,
}

impl LqgProblem {
    /// Problem with `A, B, Q, R` given and every other term zero.
    pub fn regulator(a: Mat, b: Mat, q: Mat, r: Mat, grid: TimeGrid) -> Self {
        let n = a.nrows();
        let m = b.ncols();
        Self {
            drift: GridFunction::zeros(grid, n, 1),
            sigma: GridFunction::zeros(grid, n, 1),
            qhat: Mat::zeros(n, n),
            n_cross: Mat::zeros(n, m),
            eta: Mat::zeros(n, 1),
            n_lin: Mat::zeros(m, 1),
            rho: 0.0,
            x0: Mat::zeros(n, 1),
            a,
            b,
            q,
            r,
            grid,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        let want = |name: &str, got: (usize, usize), exp: (usize, usize)| {
            if got == exp {
                Ok(())
            } else {
                Err(Error::Shape(format!("{name} is {got:?}, expected {exp:?}")))
            }
        };
        want("A", self.a.shape(), (n, n))?;
        want("B", self.b.shape(), (n, m))?;
        want("b", self.drift.shape(), (n, 1))?;
        if self.sigma.shape().0 != n {
            return Err(Error::Shape(format!("sigma has {} rows, expected {n}", self.sigma.shape().0)));
        }
        want("Qhat", self.qhat.shape(), (n, n))?;
        want("Q", self.q.shape(), (n, n))?;
        want("N", self.n_cross.shape(), (n, m))?;
        want("R", self.r.shape(), (m, m))?;
        want("eta", self.eta.shape(), (n, 1))?;
        want("n", self.n_lin.shape(), (m, 1))?;
        want("x0", self.x0.shape(), (n, 1))?;
        if self.drift.grid() != &self.grid || self.sigma.grid() != &self.grid {
            return Err(Error::Shape("b and sigma must live on the problem grid".into()));
        }
        Ok(())
    }

    fn system(&self) -> LqSystem<'_> {
        let n = self.state_dim();
        LqSystem {
            a: Box::new(move |_| self.a.clone()),
            b: self.b.clone(),
            drift: Box::new(move |t| self.drift.interp(t).expect("time inside grid")),
            q: self.q.clone(),
            n_cross: self.n_cross.clone(),
            r: self.r.clone(),
            eta: self.eta.clone(),
            n_lin: self.n_lin.clone(),
            rho: self.rho,
            qhat: self.qhat.clone(),
            qhat_lin: Mat::zeros(n, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub name: String,
    pub passed: bool,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub checks: Vec<ConditionCheck>,
}

impl ConvexityReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} (min eigenvalue {:e})", c.name, c.min_eigenvalue))
            .collect()
    }
}

/// Default PSD tolerance, relative to the largest eigenvalue magnitude.
pub const PSD_TOL: f64 = 1e-9;

fn scaled_min_eig(p: &Mat) -> (f64, f64) {
    let eig = symmetric_eigenvalues(p);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = eig.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    (if eig.is_empty() { 0.0 } else { min }, scale)
}

fn psd_condition(name: &str, p: &Mat, tol: f64, strict: bool) -> ConditionCheck {
    let (min, scale) = scaled_min_eig(p);
    let slack = tol.max(64.0 * f64::EPSILON) * scale;
    let passed = if strict { min > slack } else { min >= -slack };
    let label = if passed {
        name.to_string()
    } else if strict {
        format!("{name} not positive definite")
    } else {
        format!("{name} not positive semidefinite")
    };
    ConditionCheck { name: label, passed, min_eigenvalue: min }
}

/// Convexity conditions for a cost with weights `(Qhat, Q, N, R)`.
pub fn convexity_checks(qhat: &Mat, q: &Mat, n_cross: &Mat, r: &Mat, tol: f64) -> Vec<ConditionCheck> {
    let r_check = psd_condition("R", r, tol, true);
    let schur = if r_check.passed {
        match spd_inverse(r) {
            Some(r_inv) => psd_condition("Q - N R^-1 N'", &(q - n_cross * r_inv * n_cross.transpose()), tol, false),
            None => ConditionCheck {
                name: "Q - N R^-1 N' not positive semidefinite".into(),
                passed: false,
                min_eigenvalue: f64::NAN,
            },
        }
    } else {
        ConditionCheck {
            name: "Q - N R^-1 N' undefined (R singular)".into(),
            passed: false,
            min_eigenvalue: f64::NAN,
        }
    };
    vec![r_check, psd_condition("Qhat", qhat, tol, false), schur]
}

pub fn validate_convexity(p: &LqgProblem, tol: f64) -> Result<ConvexityReport> {
    p.check_shapes()?;
    Ok(ConvexityReport { checks: convexity_checks(&p.qhat, &p.q, &p.n_cross, &p.r, tol) })
}

/// Riccati matrix, offset and the optimal feedback `u = -K x - kff`.
#[derive(Debug, Clone)]
pub struct LqgSolution {
    pub pi: GridFunction,
    pub s: GridFunction,
    pub gain: GridFunction,
    pub feedforward: GridFunction,
}

impl LqgSolution {
    pub fn law(&self) -> LinearFeedbackLaw {
        LinearFeedbackLaw { gain: self.gain.clone(), offset: self.feedforward.map(|k| -k) }
    }
}

impl From<RiccatiSolution> for LqgSolution {
    fn from(r: RiccatiSolution) -> Self {
        Self { pi: r.pi, s: r.s, gain: r.gain, feedforward: r.feedforward }
    }
}

/// Affine state feedback `u = -K(t) x + k(t)`.
#[derive(Debug, Clone)]
pub struct LinearFeedbackLaw {
    pub gain: GridFunction,
    pub offset: GridFunction,
}

impl LinearFeedbackLaw {
    /// Open-loop control `u(t)` as a law with zero gain.
    pub fn open_loop(u: &GridFunction, state_dim: usize) -> Self {
        let m = u.shape().0;
        Self { gain: GridFunction::zeros(*u.grid(), m, state_dim), offset: u.clone() }
    }

    pub fn eval(&self, t: f64, x: &Mat) -> Result<Mat> {
        Ok(self.offset.interp(t)? - self.gain.interp(t)? * x)
    }
}

pub fn solve_finite_horizon(p: &LqgProblem) -> Result<LqgSolution> {
    let report = validate_convexity(p, PSD_TOL)?;
    if !report.passed() {
        return Err(Error::Assumption(report.failures().join("; ")));
    }
    riccati::solve_riccati_offset(&p.system(), &p.grid).map(Into::into)
}

/// `u = -R^{-1}(N'x - n + B'(Pi(t)x + s(t)))`, i.e. `-K(t)x - kff(t)`.
pub fn feedback_control(sol: &LqgSolution, t: f64, x: &Mat) -> Result<Mat> {
    Ok(-(sol.gain.interp(t)? * x) - sol.feedforward.interp(t)?)
}

/// Exact expected cost of an affine feedback law via mean/covariance propagation.
pub fn expected_cost(p: &LqgProblem, law: &LinearFeedbackLaw) -> Result<f64> {
    p.check_shapes()?;
    let n = p.state_dim();
    let coefficients = |t: f64| {
        let k = law.gain.interp(t).expect("time inside grid");
        let off = law.offset.interp(t).expect("time inside grid");
        let sig = p.sigma.interp(t).expect("time inside grid");
        let cost = moments::law_cost(&p.q, &p.n_cross, &p.r, &p.eta, &p.n_lin, 0.0, &k, &off);
        FlowCoefficients {
            drift: &p.a - &p.b * &k,
            offset: &p.b * &off + p.drift.interp(t).expect("time inside grid"),
            noise: &sig * sig.transpose(),
            weight: cost.weight,
            linear: cost.linear,
            constant: cost.constant,
        }
    };
    let terminal = TerminalForm { weight: p.qhat.clone(), linear: Mat::zeros(n, 1), constant: 0.0 };
    moments::expected_cost(coefficients, &terminal, p.rho, &p.x0, &Mat::zeros(n, n), &p.grid)
}

/// Closed-loop state path of `law` when `sigma = 0`.
pub fn deterministic_path(p: &LqgProblem, law: &LinearFeedbackLaw) -> Result<GridFunction> {
    integrate_forward(
        |t, x| {
            let u = law.eval(t, x).expect("time inside grid");
            &p.a * x + &p.b * u + p.drift.interp(t).expect("time inside grid")
        },
        p.x0.clone(),
        &p.grid,
    )
}

/// Open-loop samples of the optimal control along the noise-free optimal path.
pub fn optimal_open_loop(p: &LqgProblem, sol: &LqgSolution) -> Result<GridFunction> {
    let law = sol.law();
    let x = deterministic_path(p, &law)?;
    GridFunction::from_fn(p.grid, |j, t| law.eval(t, x.at(j)).expect("node inside grid"))
}

/// State, control and costate samples used by the deterministic oracle.
#[derive(Debug, Clone)]
pub struct CostateOracle {
    pub x: GridFunction,
    pub u: GridFunction,
    pub p: GridFunction,
}

impl CostateOracle {
    /// Integrates the state forward and the costate
    /// `dp/dt = -A'p - e^{-rho t}(Qx + Nu - eta)`, `p(T) = e^{-rho T} Qhat x_T`
    /// backward on `grid`, with the state resolved on a grid twice as fine.
    pub fn build(prob: &LqgProblem, u: &GridFunction, grid: TimeGrid) -> Result<Self> {
        let fine = TimeGrid::new(grid.t_end(), grid.steps() * 2)?;
        let x_fine = integrate_forward(
            |t, x| {
                &prob.a * x + &prob.b * u.interp(t).expect("time inside grid")
                    + prob.drift.interp(t).expect("time inside grid")
            },
            prob.x0.clone(),
            &fine,
        )?;
        let rho = prob.rho;
        let terminal = &prob.qhat * x_fine.last() * (-rho * grid.t_end()).exp();
        let p = integrate_backward(
            |t, p| {
                let x = x_fine.interp(t).expect("time inside grid");
                let ut = u.interp(t).expect("time inside grid");
                -(prob.a.transpose() * p) - (&prob.q * x + &prob.n_cross * ut - &prob.eta) * (-rho * t).exp()
            },
            terminal,
            &grid,
        )?;
        let x = GridFunction::from_fn(grid, |j, _| x_fine.at(2 * j).clone())?;
        let u = GridFunction::from_fn(grid, |_, t| u.interp(t).expect("time inside grid"))?;
        Ok(Self { x, u, p })
    }
}

/// Directional derivative `<DJ(u), omega>` for a noise-free problem, with
/// controls and directions read as piecewise-linear interpolants of their
/// node samples. Simpson's rule on each interval resolves these integrands
/// to fourth order.
pub fn gateaux_derivative_det(p: &LqgProblem, u: &GridFunction, omega: &GridFunction) -> Result<f64> {
    p.check_shapes()?;
    if p.sigma.values().iter().any(|s| max_abs(s) != 0.0) {
        return Err(Error::UnsupportedOracle(
            "Gateaux derivative oracle requires sigma = 0".into(),
        ));
    }
    let m = p.input_dim();
    if u.shape() != (m, 1) || omega.shape() != (m, 1) {
        return Err(Error::Shape(format!(
            "control {:?} and direction {:?} must be {m}x1",
            u.shape(),
            omega.shape()
        )));
    }
    let half = TimeGrid::new(p.grid.t_end(), p.grid.steps() * 2)?;
    let oracle = CostateOracle::build(p, u, half)?;
    let rho = p.rho;
    let integrand = |j: usize| -> Mat {
        let t = half.node(j);
        let x = oracle.x.at(j);
        let uj = oracle.u.at(j);
        (p.n_cross.transpose() * x + &p.r * uj - &p.n_lin) * (-rho * t).exp() + p.b.transpose() * oracle.p.at(j)
    };
    let h = p.grid.h();
    let mut total = 0.0;
    for j in 0..p.grid.steps() {
        let w0 = omega.at(j);
        let w1 = omega.at(j + 1);
        let wm = (w0 + w1) * 0.5;
        total += h / 6.0
            * (w0.dot(&integrand(2 * j)) + 4.0 * wm.dot(&integrand(2 * j + 1)) + w1.dot(&integrand(2 * j + 2)));
    }
    Ok(total)
}

/// Stationary solution of the discounted infinite-horizon problem.
#[derive(Debug, Clone)]
pub struct StationarySolution {
    pub pi: Mat,
    pub s: Mat,
    pub gain: Mat,
    pub feedforward: Mat,
    pub residual: f64,
}

/// Steady offset: `0 = -rho s + [(A - BR^{-1}N')' - Pi B R^{-1} B'] s + Pi(b + BR^{-1}n) + NR^{-1}n - eta`.
#[allow(clippy::too_many_arguments)]
pub fn steady_offset(
    a: &Mat,
    b: &Mat,
    n_cross: &Mat,
    r_inv: &Mat,
    eta: &Mat,
    n_lin: &Mat,
    drift: &Mat,
    rho: f64,
    pi: &Mat,
) -> Result<Mat> {
    let d = a.nrows();
    let closed = (a - b * r_inv * n_cross.transpose()).transpose() - pi * b * r_inv * b.transpose();
    let lhs = closed - Mat::identity(d, d) * rho;
    let rhs = -(pi * (drift + b * r_inv * n_lin) + n_cross * r_inv * n_lin - eta);
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::AreFailure("steady offset system is singular".into()))
}

pub fn solve_infinite_horizon(p: &LqgProblem) -> Result<StationarySolution> {
    let report = validate_convexity(p, PSD_TOL)?;
    if !report.passed() {
        return Err(Error::Assumption(report.failures().join("; ")));
    }
    if !p.drift.is_constant() {
        return Err(Error::Config("infinite horizon requires a constant drift b".into()));
    }
    let r_inv = spd_inverse(&p.r).ok_or_else(|| Error::Assumption("R not positive definite".into()))?;
    let are = riccati::solve_are(&p.a, &p.b, &p.q, &p.n_cross, &p.r, p.rho, None)?;
    let s = steady_offset(&p.a, &p.b, &p.n_cross, &r_inv, &p.eta, &p.n_lin, p.drift.first(), p.rho, &are.pi)?;
    let (gain, feedforward) = riccati::feedback_terms(&r_inv, &p.b, &p.n_cross, &p.n_lin, &are.pi, &s);
    Ok(StationarySolution { pi: are.pi, s, gain, feedforward, residual: are.residual })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectabilityReport {
    pub stabilizable: HautusReport,
    pub detectable: HautusReport,
}

impl DetectabilityReport {
    pub fn passed(&self) -> bool {
        self.stabilizable.passed() && self.detectable.passed()
    }
}

/// Hautus tests on `(A - rho/2 I, B)` and `(Q^{1/2}, A - rho/2 I)`.
pub fn detectability_stabilizability(p: &LqgProblem, tol: f64) -> Result<DetectabilityReport> {
    p.check_shapes()?;
    let n = p.state_dim();
    let shifted = &p.a - Mat::identity(n, n) * (0.5 * p.rho);
    Ok(DetectabilityReport {
        stabilizable: riccati::stabilizability(&shifted, &p.b, tol),
        detectable: riccati::detectability(&psd_sqrt(&p.q), &shifted, tol),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::symmetrize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn tanh_problem(t: f64) -> LqgProblem {
        let grid = TimeGrid::with_default_resolution(t).unwrap();
        LqgProblem::regulator(scalar(0.0), scalar(1.0), scalar(1.0), scalar(1.0), grid)
    }

    fn two_state() -> LqgProblem {
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let mut p = LqgProblem::regulator(
            Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.3]),
            Mat::from_row_slice(2, 1, &[0.0, 1.0]),
            Mat::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
            scalar(0.8),
            grid,
        );
        p.qhat = Mat::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]);
        p.n_cross = Mat::from_row_slice(2, 1, &[0.1, 0.05]);
        p.eta = Mat::from_row_slice(2, 1, &[0.3, -0.2]);
        p.n_lin = scalar(0.1);
        p.rho = 0.2;
        p.drift = GridFunction::from_fn(grid, |_, t| Mat::from_row_slice(2, 1, &[0.1 * t, 0.2])).unwrap();
        p.x0 = Mat::from_row_slice(2, 1, &[1.0, -0.5]);
        p
    }

    #[test]
    fn convexity_examples() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let p = LqgProblem::regulator(Mat::identity(2, 2), Mat::identity(2, 2), Mat::identity(2, 2), Mat::identity(2, 2), grid);
        assert!(validate_convexity(&p, 0.0).unwrap().passed());

        let mut bad = p.clone();
        bad.r = Mat::zeros(2, 2);
        let report = validate_convexity(&bad, 1e-9).unwrap();
        assert!(!report.passed());
        assert!(report.checks.iter().any(|c| c.name == "R not positive definite"));

        let mut edge = p.clone();
        edge.n_cross = Mat::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.4]);
        edge.q = &edge.n_cross * edge.n_cross.transpose();
        assert!(validate_convexity(&edge, 0.0).unwrap().passed());

        let mut shape = p;
        shape.q = Mat::identity(3, 3);
        assert!(matches!(validate_convexity(&shape, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn tanh_riccati() {
        let sol = solve_finite_horizon(&tanh_problem(1.0)).unwrap();
        assert!((sol.pi.first()[(0, 0)] - 1f64.tanh()).abs() < 1e-6);
        assert!(sol.s.values().iter().all(|s| s[(0, 0)] == 0.0));
    }

    #[test]
    fn terminal_weight_is_kept_exactly() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let mut p = LqgProblem::regulator(Mat::identity(2, 2), Mat::identity(2, 2), Mat::identity(2, 2), Mat::identity(2, 2), grid);
        p.qhat = Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 3.0]));
        let sol = solve_finite_horizon(&p).unwrap();
        assert_eq!(sol.pi.last(), &p.qhat);
        for pi in sol.pi.values() {
            assert_eq!(pi, &pi.transpose());
        }
    }

    #[test]
    fn feedback_examples() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let zeros = |r, c| GridFunction::zeros(grid, r, c);
        let sol = LqgSolution { pi: zeros(1, 1), s: zeros(1, 1), gain: zeros(1, 1), feedforward: zeros(1, 1) };
        assert_eq!(feedback_control(&sol, 0.3, &scalar(5.0)).unwrap(), scalar(0.0));

        let sol = LqgSolution {
            gain: GridFunction::constant(grid, scalar(1.0)),
            ..sol
        };
        assert_eq!(feedback_control(&sol, 0.5, &scalar(2.0)).unwrap(), scalar(-2.0));

        // n = 0.7, s = 0: kff = -R^{-1} n
        let sol = LqgSolution { feedforward: GridFunction::constant(grid, scalar(-0.7 / 2.0)), ..sol };
        assert_eq!(feedback_control(&sol, 0.5, &scalar(0.0)).unwrap(), scalar(0.35));
        assert!(feedback_control(&sol, 1.5, &scalar(0.0)).is_err());
    }

    #[test]
    fn zero_cost_cases() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let mut p = LqgProblem::regulator(scalar(0.3), scalar(1.0), scalar(0.0), scalar(1.0), grid);
        p.x0 = scalar(1.0);
        p.r = scalar(1.0);
        let law = LinearFeedbackLaw::open_loop(&GridFunction::zeros(grid, 1, 1), 1);
        assert_eq!(expected_cost(&p, &law).unwrap(), 0.0);

        let mut p = LqgProblem::regulator(scalar(0.3), scalar(1.0), scalar(1.0), scalar(1.0), grid);
        p.qhat = scalar(1.0);
        assert_eq!(expected_cost(&p, &law).unwrap(), 0.0);
    }

    #[test]
    fn optimal_cost_matches_value_function() {
        // J* = 1/2 x0' Pi(0) x0 + s(0)'x0 + const; with eta = n = b = 0 the constant is
        // 1/2 int tr(sigma' Pi sigma).
        let mut p = tanh_problem(1.0);
        p.x0 = scalar(1.5);
        p.sigma = GridFunction::constant(p.grid, scalar(0.4));
        let sol = solve_finite_horizon(&p).unwrap();
        let j = expected_cost(&p, &sol.law()).unwrap();
        let noise = 0.5 * 0.16 * 1f64.cosh().ln();
        let want = 0.5 * 1.5 * 1.5 * 1f64.tanh() + noise;
        assert!((j - want).abs() < 1e-8, "{j} vs {want}");
    }

    fn random_direction(rng: &mut ChaCha8Rng, grid: TimeGrid, m: usize) -> GridFunction {
        GridFunction::from_fn(grid, |_, _| Mat::from_fn(m, 1, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn euler_equality_at_optimum() {
        let p = two_state();
        let sol = solve_finite_horizon(&p).unwrap();
        let u = optimal_open_loop(&p, &sol).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let w = random_direction(&mut rng, p.grid, 1);
            let d = gateaux_derivative_det(&p, &u, &w).unwrap();
            assert!(d.abs() < 1e-6, "{d}");
        }
        assert_eq!(gateaux_derivative_det(&p, &u, &GridFunction::zeros(p.grid, 1, 1)).unwrap(), 0.0);
    }

    #[test]
    fn gateaux_matches_central_difference() {
        let p = two_state();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_direction(&mut rng, p.grid, 1);
        let w = random_direction(&mut rng, p.grid, 1);
        let eps = 1e-4;
        let cost = |v: &GridFunction| expected_cost(&p, &LinearFeedbackLaw::open_loop(v, 2)).unwrap();
        let plus = GridFunction::new(p.grid, u.values().iter().zip(w.values()).map(|(a, b)| a + b * eps).collect()).unwrap();
        let minus = GridFunction::new(p.grid, u.values().iter().zip(w.values()).map(|(a, b)| a - b * eps).collect()).unwrap();
        let fd = (cost(&plus) - cost(&minus)) / (2.0 * eps);
        let d = gateaux_derivative_det(&p, &u, &w).unwrap();
        assert!(((d - fd) / fd.abs().max(1e-12)).abs() < 1e-5, "{d} vs {fd}");
    }

    #[test]
    fn gateaux_rejects_noise() {
        let mut p = two_state();
        p.sigma = GridFunction::constant(p.grid, Mat::from_element(2, 1, 0.1));
        let u = GridFunction::zeros(p.grid, 1, 1);
        assert!(matches!(gateaux_derivative_det(&p, &u, &u), Err(Error::UnsupportedOracle(_))));
    }

    #[test]
    fn scalar_are_and_turnpike() {
        let p = tanh_problem(50.0);
        let stat = solve_infinite_horizon(&p).unwrap();
        assert!((stat.pi[(0, 0)] - 1.0).abs() < 1e-8);
        let fin = solve_finite_horizon(&p).unwrap();
        assert!((fin.pi.first()[(0, 0)] - stat.pi[(0, 0)]).abs() < 1e-6);
    }

    #[test]
    fn stable_unweighted_are_is_zero() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let p = LqgProblem::regulator(
            Mat::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]),
            Mat::from_row_slice(2, 1, &[0.0, 1.0]),
            Mat::zeros(2, 2),
            scalar(1.0),
            grid,
        );
        let stat = solve_infinite_horizon(&p).unwrap();
        assert!(max_abs(&stat.pi) < 1e-12);
    }

    #[test]
    fn steady_offset_matches_long_horizon() {
        let mut p = two_state();
        p.drift = GridFunction::constant(p.grid, Mat::from_row_slice(2, 1, &[0.1, 0.2]));
        p.rho = 0.3;
        let stat = solve_infinite_horizon(&p).unwrap();
        let mut long = p.clone();
        long.grid = TimeGrid::with_default_resolution(60.0).unwrap();
        long.drift = GridFunction::constant(long.grid, p.drift.first().clone());
        long.sigma = GridFunction::zeros(long.grid, 2, 1);
        let fin = solve_finite_horizon(&long).unwrap();
        assert!(max_abs(&(fin.pi.first() - &stat.pi)) < 1e-6);
        assert!(max_abs(&(fin.s.first() - &stat.s)) < 1e-6);
    }

    #[test]
    fn hautus_examples() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let p = LqgProblem::regulator(-Mat::identity(2, 2), Mat::zeros(2, 1), Mat::identity(2, 2), scalar(1.0), grid);
        assert!(detectability_stabilizability(&p, 1e-9).unwrap().stabilizable.passed());
        let p = LqgProblem::regulator(scalar(1.0), scalar(0.0), scalar(1.0), scalar(1.0), grid);
        assert!(!detectability_stabilizability(&p, 1e-9).unwrap().stabilizable.passed());
        let p = LqgProblem::regulator(scalar(1.0), scalar(1.0), scalar(0.0), scalar(1.0), grid);
        let rep = detectability_stabilizability(&p, 1e-9).unwrap();
        assert!(!rep.detectable.passed());
        assert!(rep.stabilizable.passed());
    }

    #[test]
    fn larger_state_weight_gives_larger_riccati() {
        let base = two_state();
        let mut bigger = base.clone();
        bigger.q = &base.q + Mat::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]);
        let p0 = solve_finite_horizon(&base).unwrap().pi.first().clone();
        let p1 = solve_finite_horizon(&bigger).unwrap().pi.first().clone();
        assert!(crate::numerics::psd_check(&symmetrize(&(p1 - p0)), 1e-12));
    }
}
