//! JSON problem configurations. Matrices are row-major nested arrays;
//! drifts are a constant vector or one vector per grid node.

use mfg_lqg::lqg::LqgProblem;
use mfg_lqg::mfg_model::{MajorParams, MinorTypeParams, MmMfgProblem};
use mfg_lqg::mfg_solver::FixedPointConfig;
use mfg_lqg::{Error, GridFunction, Mat, Result, TimeGrid};
use serde::Deserialize;

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum VectorSignal {
    Constant(Vec<f64>),
    Sampled(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatrixSignal {
    Constant(Rows),
    Sampled(Vec<Rows>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqgConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub steps: Option<usize>,
    #[serde(default)]
    pub rho: f64,
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "b")]
    pub drift: Option<VectorSignal>,
    pub sigma: Option<MatrixSignal>,
    #[serde(rename = "Qhat")]
    pub qhat: Option<Rows>,
    #[serde(rename = "Q")]
    pub q: Rows,
    #[serde(rename = "N")]
    pub n_cross: Option<Rows>,
    #[serde(rename = "R")]
    pub r: Rows,
    pub eta: Option<Vec<f64>>,
    #[serde(rename = "n")]
    pub n_lin: Option<Vec<f64>>,
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub infinite_horizon: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MajorConfig {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "F")]
    pub f: Option<Rows>,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "b")]
    pub drift: Option<VectorSignal>,
    pub sigma: Option<Rows>,
    #[serde(rename = "Qhat")]
    pub qhat: Option<Rows>,
    #[serde(rename = "Q")]
    pub q: Rows,
    #[serde(rename = "N")]
    pub n_cross: Option<Rows>,
    #[serde(rename = "R")]
    pub r: Rows,
    #[serde(rename = "H")]
    pub h: Option<Rows>,
    pub eta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinorConfig {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "F")]
    pub f: Option<Rows>,
    #[serde(rename = "G")]
    pub g: Option<Rows>,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "b")]
    pub drift: Option<VectorSignal>,
    pub sigma: Option<Rows>,
    #[serde(rename = "Qhat")]
    pub qhat: Option<Rows>,
    #[serde(rename = "Q")]
    pub q: Rows,
    #[serde(rename = "N")]
    pub n_cross: Option<Rows>,
    #[serde(rename = "R")]
    pub r: Rows,
    #[serde(rename = "H")]
    pub h: Option<Rows>,
    #[serde(rename = "H_hat")]
    pub h_hat: Option<Rows>,
    pub eta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointSection {
    pub damping: Option<f64>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    /// Population recorded in full and used for the cost estimates.
    #[serde(rename = "N", default = "default_record_n")]
    pub n_agents: usize,
    #[serde(default = "default_record_paths")]
    pub paths: usize,
    #[serde(rename = "convergence_N", default = "default_convergence_n")]
    pub convergence_sizes: Vec<usize>,
    #[serde(default = "default_convergence_paths")]
    pub convergence_paths: usize,
}

fn default_record_n() -> usize {
    8
}
fn default_record_paths() -> usize {
    4
}
fn default_convergence_n() -> Vec<usize> {
    vec![16, 64, 256, 1024]
}
fn default_convergence_paths() -> usize {
    32
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            n_agents: default_record_n(),
            paths: default_record_paths(),
            convergence_sizes: default_convergence_n(),
            convergence_paths: default_convergence_paths(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NashSection {
    #[serde(rename = "N", default = "default_nash_n")]
    pub sizes: Vec<usize>,
}

fn default_nash_n() -> Vec<usize> {
    vec![2, 4, 8, 16, 32]
}

impl Default for NashSection {
    fn default() -> Self {
        Self { sizes: default_nash_n() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfgConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub steps: Option<usize>,
    #[serde(default)]
    pub rho: f64,
    pub pi: Vec<f64>,
    pub initial_cov: Option<Rows>,
    pub xbar0: Option<Vec<f64>>,
    pub major: MajorConfig,
    pub minors: Vec<MinorConfig>,
    pub fixed_point: Option<FixedPointSection>,
    #[serde(default)]
    pub infinite_horizon: bool,
    pub simulation: Option<SimulationSection>,
    pub nash: Option<NashSection>,
    pub seed: Option<u64>,
}

pub fn parse<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Config(e.to_string()))
}

fn grid(horizon: f64, steps: Option<usize>) -> Result<TimeGrid> {
    match steps {
        Some(s) => TimeGrid::new(horizon, s),
        None => TimeGrid::with_default_resolution(horizon),
    }
}

fn matrix(field: &str, rows: &Rows, shape: Option<(usize, usize)>) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("field `{field}`: rows have different lengths")));
    }
    if let Some(want) = shape {
        if (r, c) != want {
            return Err(Error::Config(format!("field `{field}`: expected {}x{}, got {r}x{c}", want.0, want.1)));
        }
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("field `{field}`: non-finite entry")));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

fn opt_matrix(field: &str, rows: &Option<Rows>, shape: (usize, usize)) -> Result<Mat> {
    match rows {
        Some(rows) => matrix(field, rows, Some(shape)),
        None => Ok(Mat::zeros(shape.0, shape.1)),
    }
}

fn vector(field: &str, v: &[f64], len: usize) -> Result<Mat> {
    if v.len() != len {
        return Err(Error::Config(format!("field `{field}`: expected length {len}, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config(format!("field `{field}`: non-finite entry")));
    }
    Ok(Mat::from_column_slice(len, 1, v))
}

fn opt_vector(field: &str, v: &Option<Vec<f64>>, len: usize) -> Result<Mat> {
    match v {
        Some(v) => vector(field, v, len),
        None => Ok(Mat::zeros(len, 1)),
    }
}

fn vector_signal(field: &str, s: &Option<VectorSignal>, len: usize, grid: TimeGrid) -> Result<GridFunction> {
    match s {
        None => Ok(GridFunction::zeros(grid, len, 1)),
        Some(VectorSignal::Constant(v)) => Ok(GridFunction::constant(grid, vector(field, v, len)?)),
        Some(VectorSignal::Sampled(samples)) => {
            if samples.len() != grid.num_nodes() {
                return Err(Error::Config(format!(
                    "field `{field}`: {} samples for {} grid nodes",
                    samples.len(),
                    grid.num_nodes()
                )));
            }
            let values = samples.iter().map(|v| vector(field, v, len)).collect::<Result<_>>()?;
            GridFunction::new(grid, values)
        }
    }
}

fn matrix_signal(field: &str, s: &Option<MatrixSignal>, shape: Option<(usize, usize)>, n: usize, grid: TimeGrid) -> Result<GridFunction> {
    match s {
        None => Ok(GridFunction::zeros(grid, n, 1)),
        Some(MatrixSignal::Constant(rows)) => Ok(GridFunction::constant(grid, matrix(field, rows, shape)?)),
        Some(MatrixSignal::Sampled(samples)) => {
            if samples.len() != grid.num_nodes() {
                return Err(Error::Config(format!(
                    "field `{field}`: {} samples for {} grid nodes",
                    samples.len(),
                    grid.num_nodes()
                )));
            }
            let first = matrix(field, &samples[0], shape)?;
            let values = samples.iter().map(|m| matrix(field, m, Some(first.shape()))).collect::<Result<_>>()?;
            GridFunction::new(grid, values)
        }
    }
}

fn square(field: &str, rows: &Rows) -> Result<Mat> {
    let m = matrix(field, rows, None)?;
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Config(format!("field `{field}` must be a nonempty square matrix")));
    }
    Ok(m)
}

impl LqgConfig {
    pub fn to_problem(&self) -> Result<LqgProblem> {
        let grid = grid(self.horizon, self.steps)?;
        let a = square("A", &self.a)?;
        let n = a.nrows();
        let b = matrix("B", &self.b, None)?;
        if b.nrows() != n {
            return Err(Error::Config(format!("field `B`: expected {n} rows, got {}", b.nrows())));
        }
        let m = b.ncols();
        let sigma = matrix_signal("sigma", &self.sigma, None, n, grid)?;
        if sigma.shape().0 != n {
            return Err(Error::Config(format!("field `sigma`: expected {n} rows")));
        }
        Ok(LqgProblem {
            a,
            b,
            drift: vector_signal("b", &self.drift, n, grid)?,
            sigma,
            qhat: opt_matrix("Qhat", &self.qhat, (n, n))?,
            q: matrix("Q", &self.q, Some((n, n)))?,
            n_cross: opt_matrix("N", &self.n_cross, (n, m))?,
            r: matrix("R", &self.r, Some((m, m)))?,
            eta: opt_vector("eta", &self.eta, n)?,
            n_lin: opt_vector("n", &self.n_lin, m)?,
            rho: self.rho,
            grid,
            x0: opt_vector("x0", &self.x0, n)?,
        })
    }
}

impl MfgConfig {
    pub fn to_problem(&self) -> Result<MmMfgProblem> {
        let grid = grid(self.horizon, self.steps)?;
        let a0 = square("major.A", &self.major.a)?;
        let n = a0.nrows();
        let b0 = matrix("major.B", &self.major.b, None)?;
        if b0.nrows() != n {
            return Err(Error::Config(format!("field `major.B`: expected {n} rows, got {}", b0.nrows())));
        }
        let m = b0.ncols();
        let r = self
            .major
            .sigma
            .as_ref()
            .or_else(|| self.minors.iter().find_map(|t| t.sigma.as_ref()))
            .and_then(|s| s.first().map(Vec::len))
            .unwrap_or(n);
        let mj = &self.major;
        let major = MajorParams {
            a: a0,
            f: opt_matrix("major.F", &mj.f, (n, n))?,
            b: b0,
            drift: vector_signal("major.b", &mj.drift, n, grid)?,
            sigma: opt_matrix("major.sigma", &mj.sigma, (n, r))?,
            qhat: opt_matrix("major.Qhat", &mj.qhat, (n, n))?,
            q: matrix("major.Q", &mj.q, Some((n, n)))?,
            n_cross: opt_matrix("major.N", &mj.n_cross, (n, m))?,
            r: matrix("major.R", &mj.r, Some((m, m)))?,
            h: opt_matrix("major.H", &mj.h, (n, n))?,
            eta: opt_vector("major.eta", &mj.eta, n)?,
        };
        if self.minors.is_empty() {
            return Err(Error::Config("field `minors`: at least one type required".into()));
        }
        let minors = self
            .minors
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let f = |name: &str| format!("minors[{k}].{name}");
                Ok(MinorTypeParams {
                    a: matrix(&f("A"), &t.a, Some((n, n)))?,
                    f: opt_matrix(&f("F"), &t.f, (n, n))?,
                    g: opt_matrix(&f("G"), &t.g, (n, n))?,
                    b: matrix(&f("B"), &t.b, Some((n, m)))?,
                    drift: vector_signal(&f("b"), &t.drift, n, grid)?,
                    sigma: opt_matrix(&f("sigma"), &t.sigma, (n, r))?,
                    qhat: opt_matrix(&f("Qhat"), &t.qhat, (n, n))?,
                    q: matrix(&f("Q"), &t.q, Some((n, n)))?,
                    n_cross: opt_matrix(&f("N"), &t.n_cross, (n, m))?,
                    r: matrix(&f("R"), &t.r, Some((m, m)))?,
                    h: opt_matrix(&f("H"), &t.h, (n, n))?,
                    h_hat: opt_matrix(&f("H_hat"), &t.h_hat, (n, n))?,
                    eta: opt_vector(&f("eta"), &t.eta, n)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if self.pi.len() != minors.len() {
            return Err(Error::Config(format!(
                "field `pi`: {} weights for {} minor types",
                self.pi.len(),
                minors.len()
            )));
        }
        Ok(MmMfgProblem {
            major,
            minors,
            pi: self.pi.clone(),
            n,
            m,
            r,
            grid,
            rho: self.rho,
            initial_mean: Mat::zeros(n, 1),
            initial_cov: opt_matrix("initial_cov", &self.initial_cov, (n, n))?,
        })
    }

    pub fn fixed_point(&self) -> FixedPointConfig {
        let mut cfg = FixedPointConfig::default();
        if let Some(fp) = &self.fixed_point {
            cfg.damping = fp.damping.unwrap_or(cfg.damping);
            cfg.tol = fp.tol.unwrap_or(cfg.tol);
            cfg.max_iters = fp.max_iters.unwrap_or(cfg.max_iters);
        }
        cfg
    }

    pub fn xbar0(&self, n: usize, num_types: usize) -> Result<Mat> {
        opt_vector("xbar0", &self.xbar0, n * num_types)
    }

    pub fn simulation(&self) -> SimulationSection {
        self.simulation.clone().unwrap_or_default()
    }

    pub fn nash(&self) -> NashSection {
        self.nash.clone().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TANH: &str = r#"{"T": 1.0, "A": [[0]], "B": [[1]], "Q": [[1]], "R": [[1]]}"#;

    #[test]
    fn minimal_lqg_parses() {
        let p = parse::<LqgConfig>(TANH.as_bytes()).unwrap().to_problem().unwrap();
        assert_eq!(p.grid.steps(), 400);
        assert_eq!(p.sigma.shape(), (1, 1));
    }

    #[test]
    fn missing_r_is_named() {
        let err = parse::<LqgConfig>(br#"{"T": 1.0, "A": [[0]], "B": [[1]], "Q": [[1]]}"#).unwrap_err();
        assert!(err.to_string().contains("`R`"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = TANH.replace("\"T\"", "\"Tee\": 2, \"T\"");
        let err = parse::<LqgConfig>(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("Tee"), "{err}");
    }

    #[test]
    fn ragged_and_misshapen_matrices() {
        let text = TANH.replace("\"Q\": [[1]]", "\"Q\": [[1, 2]]");
        let err = parse::<LqgConfig>(text.as_bytes()).unwrap().to_problem().unwrap_err();
        assert!(err.to_string().contains("`Q`"), "{err}");
    }

    #[test]
    fn sampled_drift_must_match_grid() {
        let text = TANH.replace("\"A\"", "\"steps\": 2, \"b\": [[0], [1], [2]], \"A\"");
        let p = parse::<LqgConfig>(text.as_bytes()).unwrap().to_problem().unwrap();
        assert_eq!(p.drift.at(2)[(0, 0)], 2.0);
        let text = TANH.replace("\"A\"", "\"steps\": 3, \"b\": [[0], [1], [2]], \"A\"");
        assert!(parse::<LqgConfig>(text.as_bytes()).unwrap().to_problem().is_err());
    }
}
