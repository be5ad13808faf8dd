//! Uniform time grids, fixed-step RK4 sweeps for matrix-valued ODEs, grid
//! interpolation and small symmetric-matrix utilities.
//!
//! Every solver in the crate shares nodes through [`TimeGrid`], so coupled
//! equations can be iterated as maps on one discretization.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Default number of steps per unit of time.
pub const DEFAULT_STEPS_PER_UNIT: usize = 400;

/// Uniform grid `t_j = j * h` on `[0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {t_end}")));
        }
        if steps == 0 {
            return Err(Error::InvalidGrid("number of steps must be positive".into()));
        }
        Ok(Self { t_end, steps })
    }

    /// Grid with [`DEFAULT_STEPS_PER_UNIT`] steps per unit time (at least one).
    pub fn with_default_resolution(t_end: f64) -> Result<Self> {
        let steps = (t_end * DEFAULT_STEPS_PER_UNIT as f64).ceil().max(1.0) as usize;
        Self::new(t_end, steps)
    }

    pub fn t_start(&self) -> f64 {
        0.0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn h(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        if j == self.steps {
            self.t_end
        } else {
            j as f64 * self.h()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |j| self.node(j))
    }

    /// Bracketing interval `(j, w)` with `t = (1 - w) t_j + w t_{j+1}`.
    /// Node hits (up to rounding) are reported with `w == 0`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let h = self.h();
        let slack = 1e-12 * self.t_end.max(1.0);
        if !(t >= -slack && t <= self.t_end + slack) {
            return Err(Error::OutOfRange { t, start: 0.0, end: self.t_end });
        }
        let x = (t / h).clamp(0.0, self.steps as f64);
        let nearest = x.round();
        if (x - nearest).abs() <= 1e-9 {
            return Ok((nearest as usize, 0.0));
        }
        let j = (x.floor() as usize).min(self.steps - 1);
        Ok((j, x - j as f64))
    }
}

/// Matrix-valued function sampled on every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: TimeGrid,
    values: Vec<Mat>,
}

impl GridFunction {
    pub fn new(grid: TimeGrid, values: Vec<Mat>) -> Result<Self> {
        if values.len() != grid.num_nodes() {
            return Err(Error::Shape(format!(
                "grid function needs {} samples, got {}",
                grid.num_nodes(),
                values.len()
            )));
        }
        let shape = values[0].shape();
        if let Some(bad) = values.iter().position(|v| v.shape() != shape) {
            return Err(Error::Shape(format!(
                "sample {bad} has shape {:?}, expected {:?}",
                values[bad].shape(),
                shape
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: TimeGrid, value: Mat) -> Self {
        Self { grid, values: vec![value; grid.num_nodes()] }
    }

    pub fn zeros(grid: TimeGrid, rows: usize, cols: usize) -> Self {
        Self::constant(grid, Mat::zeros(rows, cols))
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(usize, f64) -> Mat) -> Result<Self> {
        let values = (0..grid.num_nodes()).map(|j| f(j, grid.node(j))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Mat> {
        self.values
    }

    pub fn at(&self, j: usize) -> &Mat {
        &self.values[j]
    }

    pub fn first(&self) -> &Mat {
        &self.values[0]
    }

    pub fn last(&self) -> &Mat {
        &self.values[self.values.len() - 1]
    }

    /// True when every sample equals the first one exactly.
    pub fn is_constant(&self) -> bool {
        self.values.iter().all(|v| v == &self.values[0])
    }

    /// Piecewise-linear interpolation; exact on nodes.
    pub fn interp(&self, t: f64) -> Result<Mat> {
        let (j, w) = self.grid.locate(t)?;
        if w == 0.0 {
            return Ok(self.values[j].clone());
        }
        Ok(&self.values[j] * (1.0 - w) + &self.values[j + 1] * w)
    }

    /// Four-point Lagrange interpolation for smooth solution curves; exact on
    /// nodes, falls back to linear on grids with fewer than three steps.
    pub fn interp_cubic(&self, t: f64) -> Result<Mat> {
        let (j, w) = self.grid.locate(t)?;
        if w == 0.0 {
            return Ok(self.values[j].clone());
        }
        let m = self.grid.steps();
        if m < 3 {
            return Ok(&self.values[j] * (1.0 - w) + &self.values[j + 1] * w);
        }
        // stencil j0..j0+3 containing [j, j+1], shifted inward at the ends
        let j0 = j.saturating_sub(1).min(m - 3);
        let x = (j - j0) as f64 + w;
        let mut out = Mat::zeros(self.values[0].nrows(), self.values[0].ncols());
        for a in 0..4 {
            let mut c = 1.0;
            for b in 0..4 {
                if a != b {
                    c *= (x - b as f64) / (a as f64 - b as f64);
                }
            }
            out += &self.values[j0 + a] * c;
        }
        Ok(out)
    }

    /// Largest absolute entry difference over all nodes.
    pub fn sup_distance(&self, other: &GridFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| max_abs(&(a - b)))
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl FnMut(&Mat) -> Mat) -> GridFunction {
        GridFunction { grid: self.grid, values: self.values.iter().map(f).collect() }
    }
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

fn rk4_step(
    rhs: &impl Fn(f64, &Mat) -> Mat,
    t: f64,
    y: &Mat,
    dt: f64,
) -> Mat {
    let k1 = rhs(t, y);
    let k2 = rhs(t + 0.5 * dt, &(y + &k1 * (0.5 * dt)));
    let k3 = rhs(t + 0.5 * dt, &(y + &k2 * (0.5 * dt)));
    let k4 = rhs(t + dt, &(y + &k3 * dt));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Classic RK4 sweep from `t_end` down to `0` for `dY/dt = rhs(t, Y)`.
/// `result[M]` is the terminal value, untouched.
pub fn integrate_backward(
    rhs: impl Fn(f64, &Mat) -> Mat,
    terminal: Mat,
    grid: &TimeGrid,
) -> Result<GridFunction> {
    integrate_backward_projected(rhs, terminal, grid, |_| {})
}

/// Backward RK4 sweep applying `project` to every newly computed node.
pub fn integrate_backward_projected(
    rhs: impl Fn(f64, &Mat) -> Mat,
    terminal: Mat,
    grid: &TimeGrid,
    project: impl Fn(&mut Mat),
) -> Result<GridFunction> {
    let m = grid.steps();
    let h = grid.h();
    let mut values = vec![Mat::zeros(0, 0); m + 1];
    let probe = rhs(grid.t_end(), &terminal);
    if probe.shape() != terminal.shape() {
        return Err(Error::Shape(format!(
            "rhs returns {:?} but terminal value is {:?}",
            probe.shape(),
            terminal.shape()
        )));
    }
    values[m] = terminal;
    for j in (0..m).rev() {
        let mut y = rk4_step(&rhs, grid.node(j + 1), &values[j + 1], -h);
        project(&mut y);
        if !all_finite(&y) {
            return Err(Error::IntegrationDiverged { node: j, t: grid.node(j) });
        }
        values[j] = y;
    }
    Ok(GridFunction { grid: *grid, values })
}

/// Classic RK4 sweep from `0` up to `t_end`; `result[0]` is the initial value.
pub fn integrate_forward(
    rhs: impl Fn(f64, &Mat) -> Mat,
    initial: Mat,
    grid: &TimeGrid,
) -> Result<GridFunction> {
    let m = grid.steps();
    let h = grid.h();
    let probe = rhs(0.0, &initial);
    if probe.shape() != initial.shape() {
        return Err(Error::Shape(format!(
            "rhs returns {:?} but initial value is {:?}",
            probe.shape(),
            initial.shape()
        )));
    }
    let mut values = Vec::with_capacity(m + 1);
    values.push(initial);
    for j in 0..m {
        let y = rk4_step(&rhs, grid.node(j), &values[j], h);
        if !all_finite(&y) {
            return Err(Error::IntegrationDiverged { node: j + 1, t: grid.node(j + 1) });
        }
        values.push(y);
    }
    Ok(GridFunction { grid: *grid, values })
}

pub fn symmetrize(p: &Mat) -> Mat {
    (p + p.transpose()) * 0.5
}

pub fn symmetrize_in_place(p: &mut Mat) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

/// Eigenvalues of the symmetric part, ascending.
pub fn symmetric_eigenvalues(p: &Mat) -> Vec<f64> {
    if p.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(p)).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(p: &Mat) -> f64 {
    symmetric_eigenvalues(p).first().copied().unwrap_or(0.0)
}

/// `true` iff the smallest eigenvalue of the symmetric part is `>= -tol`.
pub fn psd_check(p: &Mat, tol: f64) -> bool {
    min_eigenvalue(p) >= -tol
}

/// Principal square root of the symmetric part (negative eigenvalues clipped).
pub fn psd_sqrt(p: &Mat) -> Mat {
    let eig = SymmetricEigen::new(symmetrize(p));
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * Mat::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(p: &Mat) -> Option<Mat> {
    nalgebra::Cholesky::new(symmetrize(p)).map(|c| c.inverse())
}

/// Block-diagonal assembly.
pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Horizontal concatenation of blocks with equal row counts.
pub fn hstack(blocks: &[&Mat]) -> Mat {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, c), b.shape()).copy_from(*b);
        c += b.ncols();
    }
    out
}

/// Vertical concatenation of blocks with equal column counts.
pub fn vstack(blocks: &[&Mat]) -> Mat {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), b.shape()).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Composite trapezoid rule on grid samples.
pub fn trapezoid(h: f64, samples: &[f64]) -> f64 {
    match samples.len() {
        0 | 1 => 0.0,
        len => {
            let inner: f64 = samples[1..len - 1].iter().sum();
            h * (0.5 * (samples[0] + samples[len - 1]) + inner)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn grid_nodes_are_uniform() {
        let g = TimeGrid::new(2.0, 8).unwrap();
        let nodes: Vec<f64> = g.nodes().collect();
        assert_eq!(nodes.len(), 9);
        assert_eq!(nodes[8], 2.0);
        for w in nodes.windows(2) {
            assert!((w[1] - w[0] - 0.25).abs() < 1e-15);
        }
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert_eq!(TimeGrid::with_default_resolution(1.5).unwrap().steps(), 600);
    }

    #[test]
    fn zero_rhs_keeps_terminal() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let eye = Mat::identity(2, 2);
        let gf = integrate_backward(|_, y| Mat::zeros(y.nrows(), y.ncols()), eye.clone(), &g).unwrap();
        assert!(gf.values().iter().all(|v| v == &eye));
    }

    #[test]
    fn backward_tanh_riccati() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let gf = integrate_backward(|_, p| p.map(|x| x * x - 1.0), scalar(0.0), &g).unwrap();
        assert!((gf.first()[(0, 0)] - 1f64.tanh()).abs() < 1e-8);
        assert_eq!(gf.last()[(0, 0)], 0.0);
    }

    #[test]
    fn backward_linear_offset() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let gf = integrate_backward(|_, s| s.map(|x| -x + 1.0), scalar(0.0), &g).unwrap();
        let exact = 1.0 - std::f64::consts::E;
        assert!((gf.first()[(0, 0)] - exact).abs() < 1e-8);
    }

    #[test]
    fn forward_examples() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let zero = integrate_forward(|_, y| Mat::zeros(y.nrows(), 1), scalar(0.0), &g).unwrap();
        assert!(zero.values().iter().all(|v| v[(0, 0)] == 0.0));
        let exp = integrate_forward(|_, y| y.clone(), scalar(1.0), &g).unwrap();
        assert!((exp.last()[(0, 0)] - std::f64::consts::E).abs() < 1e-8);
        let relax = integrate_forward(|_, y| y.map(|x| -x + 1.0), scalar(0.0), &g).unwrap();
        assert!((relax.last()[(0, 0)] - (1.0 - (-1f64).exp())).abs() < 1e-8);
    }

    #[test]
    fn rk4_convergence_order() {
        let err = |m: usize| {
            let g = TimeGrid::new(1.0, m).unwrap();
            let gf = integrate_backward(|_, p| p.map(|x| x * x - 1.0), scalar(0.0), &g).unwrap();
            (0..=m)
                .map(|j| (gf.at(j)[(0, 0)] - (1.0 - g.node(j)).tanh()).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(20) / err(40);
        assert!((10.0..=24.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn divergence_is_reported() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let err = integrate_backward(|_, p| p.map(|x| -x * x), scalar(1e100), &g).unwrap_err();
        assert!(matches!(err, Error::IntegrationDiverged { .. }));
    }

    #[test]
    fn interp_examples() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let gf = GridFunction::from_fn(g, |j, _| scalar(2.0 * j as f64)).unwrap();
        assert_eq!(gf.interp(g.node(3)).unwrap(), scalar(6.0));
        assert!((gf.interp(0.125).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(gf.interp(1.0).unwrap(), scalar(8.0));
        assert!(matches!(gf.interp(1.5), Err(Error::OutOfRange { .. })));
        assert!(gf.interp(-0.1).is_err());
    }

    #[test]
    fn cubic_interp_is_exact_for_cubics() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let f = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t * t;
        let gf = GridFunction::from_fn(g, |_, t| scalar(f(t))).unwrap();
        for &t in &[0.01, 0.05, 0.33, 0.5, 0.97, 0.999] {
            assert!((gf.interp_cubic(t).unwrap()[(0, 0)] - f(t)).abs() < 1e-13);
        }
        assert_eq!(gf.interp_cubic(g.node(7)).unwrap(), *gf.at(7));
    }

    #[test]
    fn symmetrize_examples() {
        let p = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(symmetrize(&p), Mat::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]));
        let s = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(symmetrize(&s), s);
    }

    #[test]
    fn psd_examples() {
        assert!(psd_check(&Mat::identity(3, 3), 0.0));
        assert!(!psd_check(&Mat::from_diagonal(&nalgebra::dvector![1.0, -1.0]), 1e-9));
        assert!(psd_check(&Mat::zeros(2, 2), 0.0));
    }

    #[test]
    fn trapezoid_integrates_linear_exactly() {
        let g = TimeGrid::new(2.0, 10).unwrap();
        let samples: Vec<f64> = g.nodes().map(|t| 3.0 * t + 1.0).collect();
        assert!((trapezoid(g.h(), &samples) - 8.0).abs() < 1e-13);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn symmetrized_is_symmetric(v in proptest::collection::vec(-10.0f64..10.0, 9)) {
                let p = Mat::from_row_slice(3, 3, &v);
                let s = symmetrize(&p);
                prop_assert_eq!(&s - s.transpose(), Mat::zeros(3, 3));
            }

            #[test]
            fn interp_is_affine_between_nodes(a in -5.0f64..5.0, b in -5.0f64..5.0, w in 0.0f64..1.0) {
                let g = TimeGrid::new(1.0, 1).unwrap();
                let gf = GridFunction::new(g, vec![scalar(a), scalar(b)]).unwrap();
                let v = gf.interp(w).unwrap()[(0, 0)];
                prop_assert!((v - (a + w * (b - a))).abs() < 1e-12);
            }
        }
    }
}
