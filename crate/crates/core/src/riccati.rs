//! Shared linear-quadratic machinery: the coupled Riccati/offset sweep for
//! time-varying systems, the discounted algebraic Riccati equation, and
//! Hautus rank tests.
//!
//! Cost convention (matching every agent in the crate):
//!
//! ```text
//! J = 1/2 E[ e^{-rho T} (x_T' Qhat x_T - 2 x_T' qhat)
//!          + int e^{-rho t} (x'Qx + 2x'Nu + u'Ru - 2x'eta - 2u'n) dt ]
//! ```
//!
//! with dynamics `dx = (A(t)x + Bu + drift(t))dt + sigma dw`.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::numerics::{
    integrate_backward_projected, max_abs, spd_inverse, symmetrize, symmetrize_in_place, GridFunction,
    Mat, TimeGrid,
};

pub type Coefficient<'a> = Box<dyn Fn(f64) -> Mat + Send + Sync + 'a>;

/// Time-varying LQ control problem in the crate-wide cost convention.
pub struct LqSystem<'a> {
    pub a: Coefficient<'a>,
    pub b: Mat,
    pub drift: Coefficient<'a>,
    pub q: Mat,
    pub n_cross: Mat,
    pub r: Mat,
    pub eta: Mat,
    pub n_lin: Mat,
    pub rho: f64,
    pub qhat: Mat,
    pub qhat_lin: Mat,
}

impl<'a> LqSystem<'a> {
    pub fn state_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn r_inverse(&self) -> Result<Mat> {
        spd_inverse(&self.r).ok_or_else(|| Error::Assumption("R not positive definite".into()))
    }
}

/// Riccati matrix, offset and the feedback law `u = -K x - kff` they induce.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub pi: GridFunction,
    pub s: GridFunction,
    pub gain: GridFunction,
    pub feedforward: GridFunction,
}

/// `K = R^{-1}(N' + B'Pi)` and `kff = R^{-1}(B's - n)`.
pub fn feedback_terms(r_inv: &Mat, b: &Mat, n_cross: &Mat, n_lin: &Mat, pi: &Mat, s: &Mat) -> (Mat, Mat) {
    let gain = r_inv * (n_cross.transpose() + b.transpose() * pi);
    let ff = r_inv * (b.transpose() * s - n_lin);
    (gain, ff)
}

/// Backward RK4 sweep of the Riccati matrix and offset, integrated jointly
/// as one `n x (n+1)` state; the Riccati block is symmetrized every step.
pub fn solve_riccati_offset(sys: &LqSystem<'_>, grid: &TimeGrid) -> Result<RiccatiSolution> {
    let n = sys.state_dim();
    check_shapes(sys)?;
    let r_inv = sys.r_inverse()?;
    let b = &sys.b;
    let bt = b.transpose();
    let s_gain = b * &r_inv * &bt;
    let nr = &sys.n_cross * &r_inv;
    let a_shift = b * &r_inv * sys.n_cross.transpose();
    let nrn = &nr * &sys.n_lin;
    let brn = b * &r_inv * &sys.n_lin;
    let rho = sys.rho;

    let rhs = |t: f64, y: &Mat| -> Mat {
        let a = (sys.a)(t);
        let pi = y.columns(0, n).into_owned();
        let s = y.columns(n, 1).into_owned();
        let pb_n = &pi * b + &sys.n_cross;
        let dpi = &pi * rho - &pi * &a - a.transpose() * &pi + &pb_n * &r_inv * pb_n.transpose() - &sys.q;
        let closed = (&a - &a_shift).transpose() - &pi * &s_gain;
        let drift = (sys.drift)(t);
        let ds = &s * rho - closed * &s - &pi * (drift + &brn) - &nrn + &sys.eta;
        let mut out = Mat::zeros(n, n + 1);
        out.columns_mut(0, n).copy_from(&dpi);
        out.column_mut(n).copy_from(&ds.column(0));
        out
    };

    let mut terminal = Mat::zeros(n, n + 1);
    terminal.columns_mut(0, n).copy_from(&sys.qhat);
    terminal.column_mut(n).copy_from(&(-&sys.qhat_lin).column(0));

    let joint = integrate_backward_projected(rhs, terminal, grid, |y| {
        let mut pi = y.columns(0, n).into_owned();
        symmetrize_in_place(&mut pi);
        y.columns_mut(0, n).copy_from(&pi);
    })
    .map_err(|e| match e {
        Error::IntegrationDiverged { node, .. } => Error::RiccatiBlowup { last_finite_node: node + 1 },
        other => other,
    })?;

    let mut pis = Vec::with_capacity(grid.num_nodes());
    let mut ss = Vec::with_capacity(grid.num_nodes());
    let mut gains = Vec::with_capacity(grid.num_nodes());
    let mut ffs = Vec::with_capacity(grid.num_nodes());
    for (j, y) in joint.into_values().into_iter().enumerate() {
        let pi = if j == grid.steps() { sys.qhat.clone() } else { y.columns(0, n).into_owned() };
        let s = y.columns(n, 1).into_owned();
        let (g, f) = feedback_terms(&r_inv, b, &sys.n_cross, &sys.n_lin, &pi, &s);
        pis.push(pi);
        ss.push(s);
        gains.push(g);
        ffs.push(f);
    }
    Ok(RiccatiSolution {
        pi: GridFunction::new(*grid, pis)?,
        s: GridFunction::new(*grid, ss)?,
        gain: GridFunction::new(*grid, gains)?,
        feedforward: GridFunction::new(*grid, ffs)?,
    })
}

fn check_shapes(sys: &LqSystem<'_>) -> Result<()> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    let expect = |name: &str, mat: &Mat, r: usize, c: usize| {
        if mat.shape() == (r, c) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{name} is {:?}, expected ({r}, {c})", mat.shape())))
        }
    };
    expect("A", &(sys.a)(0.0), n, n)?;
    expect("drift", &(sys.drift)(0.0), n, 1)?;
    expect("Q", &sys.q, n, n)?;
    expect("N", &sys.n_cross, n, m)?;
    expect("R", &sys.r, m, m)?;
    expect("eta", &sys.eta, n, 1)?;
    expect("n", &sys.n_lin, m, 1)?;
    expect("Qhat", &sys.qhat, n, n)?;
    expect("qhat", &sys.qhat_lin, n, 1)
}

/// Discounted ARE residual `Pi A + A'Pi - (Pi B + N)R^{-1}(B'Pi + N') + Q - rho Pi`.
pub fn are_residual(a: &Mat, b: &Mat, q: &Mat, n_cross: &Mat, r_inv: &Mat, rho: f64, pi: &Mat) -> Mat {
    let pb_n = pi * b + n_cross;
    pi * a + a.transpose() * pi - &pb_n * r_inv * pb_n.transpose() + q - pi * rho
}

/// Solves `A'X + XA = C` by Kronecker vectorization.
pub fn solve_lyapunov(a: &Mat, c: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let eye = Mat::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = nalgebra::DVector::from_column_slice(c.as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::AreFailure("singular Lyapunov operator".into()))?;
    Ok(Mat::from_column_slice(n, n, sol.as_slice()))
}

/// Stationary solution of the discounted ARE.
#[derive(Debug, Clone)]
pub struct AreSolution {
    pub pi: Mat,
    pub residual: f64,
    pub horizon_used: f64,
}

/// Cap on the backward integration horizon used to reach the ARE fixed point.
pub const ARE_MAX_HORIZON: f64 = 200.0;
/// Stationarity threshold on `max |dPi/dt|`.
pub const ARE_STATIONARY_TOL: f64 = 1e-10;

/// Long-horizon backward integration of the Riccati flow until it is
/// stationary, followed by Newton polishing on the ARE residual. The result
/// must make `A - B K - (rho/2) I` Hurwitz.
pub fn solve_are(
    a: &Mat,
    b: &Mat,
    q: &Mat,
    n_cross: &Mat,
    r: &Mat,
    rho: f64,
    warm_start: Option<&Mat>,
) -> Result<AreSolution> {
    let n = a.nrows();
    let r_inv = spd_inverse(r).ok_or_else(|| Error::Assumption("R not positive definite".into()))?;
    let h = 1.0 / crate::numerics::DEFAULT_STEPS_PER_UNIT as f64;
    let mut pi = warm_start.cloned().unwrap_or_else(|| Mat::zeros(n, n));
    let flow = |p: &Mat| are_residual(a, b, q, n_cross, &r_inv, rho, p);
    let steps = (ARE_MAX_HORIZON / h).round() as usize;
    let mut used = 0.0;
    for step in 0..steps {
        let k1 = flow(&pi);
        if max_abs(&k1) < ARE_STATIONARY_TOL {
            break;
        }
        // integrating backward in time: dPi/d(T - t) = residual
        let k2 = flow(&(&pi + &k1 * (0.5 * h)));
        let k3 = flow(&(&pi + &k2 * (0.5 * h)));
        let k4 = flow(&(&pi + &k3 * h));
        pi += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        symmetrize_in_place(&mut pi);
        if !pi.iter().all(|v| v.is_finite()) {
            return Err(Error::AreFailure(format!(
                "Riccati flow diverged after backward time {}",
                (step + 1) as f64 * h
            )));
        }
        used = (step + 1) as f64 * h;
    }

    let shifted = a - Mat::identity(n, n) * (0.5 * rho);
    for _ in 0..3 {
        let res = flow(&pi);
        if max_abs(&res) < 1e-13 {
            break;
        }
        let closed = &shifted - b * &r_inv * (b.transpose() * &pi + n_cross.transpose());
        let delta = solve_lyapunov(&closed, &(-res))?;
        pi = symmetrize(&(pi + delta));
    }
    let residual = flow(&pi).norm();
    if !(residual < 1e-9) {
        return Err(Error::AreFailure(format!("residual {residual:e} after polishing")));
    }
    let closed = &shifted - b * &r_inv * (b.transpose() * &pi + n_cross.transpose());
    let abscissa = spectral_abscissa(&closed);
    if !(abscissa < 0.0) {
        return Err(Error::AreFailure(format!(
            "solution is not stabilizing (spectral abscissa {abscissa:e})"
        )));
    }
    Ok(AreSolution { pi, residual, horizon_used: used })
}

pub fn eigenvalues(a: &Mat) -> Vec<Complex<f64>> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    a.complex_eigenvalues().iter().copied().collect()
}

/// Largest real part of the spectrum.
pub fn spectral_abscissa(a: &Mat) -> f64 {
    eigenvalues(a).iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Outcome of a rank test at one eigenvalue.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ModeCheck {
    pub eigenvalue_re: f64,
    pub eigenvalue_im: f64,
    pub rank: usize,
    pub required: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct HautusReport {
    pub property: String,
    pub modes: Vec<ModeCheck>,
}

impl HautusReport {
    pub fn passed(&self) -> bool {
        self.modes.iter().all(|m| m.passed)
    }
}

fn complex_rank(m: &DMatrix<Complex<f64>>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().copied().fold(0.0, f64::max);
    let cut = 1e-9 * top.max(1.0);
    sv.iter().filter(|&&v| v > cut).count()
}

fn to_complex(m: &Mat) -> DMatrix<Complex<f64>> {
    m.map(|v| Complex::new(v, 0.0))
}

/// `(A, B)` stabilizable: `rank [lambda I - A, B] = n` for every eigenvalue
/// with `Re lambda >= -tol`.
pub fn stabilizability(a: &Mat, b: &Mat, tol: f64) -> HautusReport {
    let n = a.nrows();
    let ac = to_complex(a);
    let bc = to_complex(b);
    let modes = eigenvalues(a)
        .into_iter()
        .filter(|z| z.re >= -tol)
        .map(|z| {
            let mut test = DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
            let shifted = DMatrix::<Complex<f64>>::identity(n, n) * z - &ac;
            test.columns_mut(0, n).copy_from(&shifted);
            test.columns_mut(n, b.ncols()).copy_from(&bc);
            let rank = complex_rank(&test);
            ModeCheck { eigenvalue_re: z.re, eigenvalue_im: z.im, rank, required: n, passed: rank == n }
        })
        .collect();
    HautusReport { property: "stabilizable".into(), modes }
}

/// `(C, A)` detectable: `rank [lambda I - A; C] = n` for every eigenvalue
/// with `Re lambda >= -tol`.
pub fn detectability(c: &Mat, a: &Mat, tol: f64) -> HautusReport {
    let mut report = stabilizability(&a.transpose(), &c.transpose(), tol);
    report.property = "detectable".into();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::TimeGrid;

    fn constant(m: Mat) -> Coefficient<'static> {
        Box::new(move |_| m.clone())
    }

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn scalar_system(rho: f64) -> LqSystem<'static> {
        LqSystem {
            a: constant(scalar(0.0)),
            b: scalar(1.0),
            drift: constant(scalar(0.0)),
            q: scalar(1.0),
            n_cross: scalar(0.0),
            r: scalar(1.0),
            eta: scalar(0.0),
            n_lin: scalar(0.0),
            rho,
            qhat: scalar(0.0),
            qhat_lin: scalar(0.0),
        }
    }

    #[test]
    fn tanh_oracle() {
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let sol = solve_riccati_offset(&scalar_system(0.0), &grid).unwrap();
        assert!((sol.pi.first()[(0, 0)] - 1f64.tanh()).abs() < 1e-10);
        assert!(sol.s.values().iter().all(|s| s[(0, 0)] == 0.0));
    }

    #[test]
    fn terminal_linear_weight_sets_offset_terminal() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mut sys = scalar_system(0.0);
        sys.qhat_lin = scalar(0.7);
        let sol = solve_riccati_offset(&sys, &grid).unwrap();
        assert_eq!(sol.s.last()[(0, 0)], -0.7);
    }

    #[test]
    fn lyapunov_roundtrip() {
        let a = Mat::from_row_slice(2, 2, &[-1.0, 0.3, 0.2, -2.0]);
        let x = Mat::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]);
        let c = a.transpose() * &x + &x * &a;
        let got = solve_lyapunov(&a, &c).unwrap();
        assert!(max_abs(&(got - x)) < 1e-12);
    }

    #[test]
    fn scalar_are() {
        let sol = solve_are(&scalar(0.0), &scalar(1.0), &scalar(1.0), &scalar(0.0), &scalar(1.0), 0.0, None)
            .unwrap();
        assert!((sol.pi[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hautus_examples() {
        let a = -Mat::identity(2, 2);
        assert!(stabilizability(&a, &Mat::zeros(2, 1), 0.0).passed());
        assert!(!stabilizability(&scalar(1.0), &scalar(0.0), 0.0).passed());
        assert!(!detectability(&scalar(0.0), &scalar(1.0), 0.0).passed());
        assert!(detectability(&scalar(1.0), &scalar(1.0), 0.0).passed());
    }

    #[test]
    fn unstabilizable_are_fails() {
        let err = solve_are(&scalar(1.0), &scalar(0.0), &scalar(1.0), &scalar(0.0), &scalar(1.0), 0.0, None)
            .unwrap_err();
        assert!(matches!(err, Error::AreFailure(_)));
    }
}
