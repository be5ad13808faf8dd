//! Bundled self-checks run by `mfg-lqg verify`.

use std::path::Path;

use mfg_lqg::lqg::{gateaux_derivative_det, optimal_open_loop, solve_finite_horizon, solve_infinite_horizon};
use mfg_lqg::mfg_solver::{solve_consistency_finite, FixedPointConfig};
use mfg_lqg::nash::gap_vs_population;
use mfg_lqg::par::Execution;
use mfg_lqg::population::{simulate_population, PopulationConfig};
use mfg_lqg::{Error, GridFunction, Mat, Result};
use serde::Serialize;

use crate::config::{parse, LqgConfig, MfgConfig};

pub const FIXTURES: [(&str, &str); 5] = [
    ("tanh.json", include_str!("../fixtures/tanh.json")),
    ("scalar_are.json", include_str!("../fixtures/scalar_are.json")),
    ("two_state.json", include_str!("../fixtures/two_state.json")),
    ("toy.json", include_str!("../fixtures/toy.json")),
    ("decoupled.json", include_str!("../fixtures/decoupled.json")),
];

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub passed: bool,
    pub detail: String,
}

struct Fixtures<'a> {
    dir: Option<&'a Path>,
}

impl Fixtures<'_> {
    fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        if let Some(dir) = self.dir {
            let path = dir.join(name);
            if path.exists() {
                return std::fs::read(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())));
            }
        }
        FIXTURES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| text.as_bytes().to_vec())
            .ok_or_else(|| Error::Config(format!("no fixture named {name}")))
    }

    fn lqg(&self, name: &str) -> Result<mfg_lqg::lqg::LqgProblem> {
        parse::<LqgConfig>(&self.bytes(name)?)
            .map_err(|e| Error::Config(format!("{name}: {e}")))?
            .to_problem()
    }

    fn game(&self, name: &str) -> Result<mfg_lqg::mfg_model::MmMfgProblem> {
        parse::<MfgConfig>(&self.bytes(name)?)
            .map_err(|e| Error::Config(format!("{name}: {e}")))?
            .to_problem()
    }
}

type Check = fn(&Fixtures) -> Result<(bool, String)>;

fn tanh(f: &Fixtures) -> Result<(bool, String)> {
    let sol = solve_finite_horizon(&f.lqg("tanh.json")?)?;
    let err = (sol.pi.first()[(0, 0)] - 1f64.tanh()).abs();
    Ok((err < 1e-6, format!("|Pi(0) - tanh 1| = {err:.3e}")))
}

fn euler(f: &Fixtures) -> Result<(bool, String)> {
    let p = f.lqg("two_state.json")?;
    let sol = solve_finite_horizon(&p)?;
    let u = optimal_open_loop(&p, &sol)?;
    let mut worst = 0f64;
    for k in 1..=5 {
        let w = GridFunction::from_fn(p.grid, |_, t| Mat::from_element(1, 1, (k as f64 * 2.3 * t).sin()))?;
        worst = worst.max(gateaux_derivative_det(&p, &u, &w)?.abs());
    }
    Ok((worst < 1e-6, format!("max |DJ(u*)w| = {worst:.3e}")))
}

fn are(f: &Fixtures) -> Result<(bool, String)> {
    let p = f.lqg("scalar_are.json")?;
    let st = solve_infinite_horizon(&p)?;
    let fin = solve_finite_horizon(&p)?;
    let err = (st.pi[(0, 0)] - 1.0).abs();
    let turnpike = (fin.pi.first()[(0, 0)] - st.pi[(0, 0)]).abs();
    Ok((err < 1e-8 && turnpike < 1e-6, format!("|Pi - 1| = {err:.3e}, turnpike {turnpike:.3e}")))
}

fn terminal(f: &Fixtures) -> Result<(bool, String)> {
    let p = f.game("toy.json")?;
    let sol = solve_consistency_finite(&p, &FixedPointConfig::default())?;
    let ok = sol.pi0.last() == &sol.major_system.weights.g
        && sol.s0.last().iter().all(|v| *v == 0.0)
        && (0..sol.num_types()).all(|k| {
            sol.pik[k].last() == &sol.minor_systems[k].weights.g && sol.sk[k].last().iter().all(|v| *v == 0.0)
        });
    Ok((
        ok && sol.report.final_residual < 1e-7,
        format!("terminal exact: {ok}, residual {:.3e}", sol.report.final_residual),
    ))
}

fn decoupled(f: &Fixtures) -> Result<(bool, String)> {
    let p = f.game("decoupled.json")?;
    let sol = solve_consistency_finite(&p, &FixedPointConfig::default())?;
    let gaps = gap_vs_population(&p, &sol, &[2, 4], Execution::Parallel)?;
    let worst = gaps.iter().map(|g| g.gap.abs()).fold(0.0, f64::max);
    Ok((
        sol.report.iterations <= 2 && worst <= 1e-6,
        format!("{} iterations, max |gap| {worst:.3e}", sol.report.iterations),
    ))
}

fn determinism(f: &Fixtures) -> Result<(bool, String)> {
    let p = f.game("toy.json")?;
    let sol = solve_consistency_finite(&p, &FixedPointConfig::default())?;
    let cfg = PopulationConfig::new(&p, 6, 3, 99)?;
    let a = simulate_population(&p, &sol, &cfg)?;
    let b = simulate_population(&p, &sol, &cfg.clone().with_execution(Execution::Sequential))?;
    Ok((a == b, "parallel and sequential bundles bit-identical".into()))
}

fn gaps(f: &Fixtures) -> Result<(bool, String)> {
    let p = f.game("toy.json")?;
    let sol = solve_consistency_finite(&p, &FixedPointConfig::default())?;
    let cells = gap_vs_population(&p, &sol, &[2, 8], Execution::Parallel)?;
    let min = cells.iter().map(|c| c.gap).fold(f64::INFINITY, f64::min);
    let worst = |n| cells.iter().filter(|c| c.n_agents == n).map(|c| c.gap).fold(f64::MIN, f64::max);
    let (w2, w8) = (worst(2), worst(8));
    Ok((min >= -1e-8 && w8 < w2, format!("min gap {min:.3e}, worst N=2 {w2:.3e}, N=8 {w8:.3e}")))
}

const SUITES: [(&str, Check); 7] = [
    ("lqg-tanh", tanh),
    ("lqg-euler-equality", euler),
    ("lqg-are-turnpike", are),
    ("mfg-terminal-and-residual", terminal),
    ("mfg-decoupled", decoupled),
    ("population-determinism", determinism),
    ("nash-gap-trend", gaps),
];

/// Runs every suite; fixtures found in `dir` replace the bundled ones.
pub fn run(dir: Option<&Path>) -> Vec<SuiteResult> {
    let fixtures = Fixtures { dir };
    SUITES
        .iter()
        .map(|(suite, check)| match check(&fixtures) {
            Ok((passed, detail)) => SuiteResult { suite, passed, detail },
            Err(e) => SuiteResult { suite, passed: false, detail: e.to_string() },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mfg_lqg::mfg_model::fixtures::{decoupled_problem, toy_problem};
    use mfg_lqg::mfg_model::MmMfgProblem;

    fn same(a: &MmMfgProblem, b: &MmMfgProblem) -> bool {
        let major = |p: &MmMfgProblem| {
            let m = &p.major;
            vec![&m.a, &m.f, &m.b, &m.sigma, &m.qhat, &m.q, &m.n_cross, &m.r, &m.h, &m.eta, m.drift.first()]
                .into_iter()
                .cloned()
                .collect::<Vec<_>>()
        };
        let minors = |p: &MmMfgProblem| {
            p.minors
                .iter()
                .flat_map(|t| {
                    vec![&t.a, &t.f, &t.g, &t.b, &t.sigma, &t.qhat, &t.q, &t.n_cross, &t.r, &t.h, &t.h_hat, &t.eta, t.drift.first()]
                        .into_iter()
                        .cloned()
                })
                .collect::<Vec<_>>()
        };
        major(a) == major(b) && minors(a) == minors(b) && a.pi == b.pi && a.grid == b.grid && a.initial_cov == b.initial_cov
    }

    #[test]
    fn bundled_games_match_library_fixtures() {
        let f = Fixtures { dir: None };
        assert!(same(&f.game("toy.json").unwrap(), &toy_problem()));
        assert!(same(&f.game("decoupled.json").unwrap(), &decoupled_problem()));
    }
}
