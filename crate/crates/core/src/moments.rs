//! Exact expected quadratic costs of closed-loop linear SDEs by propagating
//! the state mean and covariance.

use crate::error::{Error, Result};
use crate::numerics::{integrate_forward, Mat, TimeGrid};

/// Closed-loop coefficients at one time: `dz = (F z + f) dt + dW` with
/// `Cov(dW) = noise dt`, cost rate `1/2 (z'Wz + 2w'z + c)`.
#[derive(Debug, Clone)]
pub struct FlowCoefficients {
    pub drift: Mat,
    pub offset: Mat,
    pub noise: Mat,
    pub weight: Mat,
    pub linear: Mat,
    pub constant: f64,
}

/// Terminal quadratic form `1/2 (z'Wz + 2w'z + c)`.
#[derive(Debug, Clone)]
pub struct TerminalForm {
    pub weight: Mat,
    pub linear: Mat,
    pub constant: f64,
}

impl TerminalForm {
    pub fn zero(dim: usize) -> Self {
        Self { weight: Mat::zeros(dim, dim), linear: Mat::zeros(dim, 1), constant: 0.0 }
    }
}

/// `E[z'Wz + 2w'z + c]` for `z` with the given mean and covariance.
pub fn expected_form(weight: &Mat, linear: &Mat, constant: f64, mean: &Mat, cov: &Mat) -> f64 {
    let second = cov + mean * mean.transpose();
    weight.component_mul(&second).sum() + 2.0 * linear.dot(mean) + constant
}

/// Expected discounted cost
/// `1/2 int e^{-rho t} E[rate] dt + 1/2 e^{-rho T} E[terminal]`.
pub fn expected_cost<C>(
    coefficients: C,
    terminal: &TerminalForm,
    rho: f64,
    mean0: &Mat,
    cov0: &Mat,
    grid: &TimeGrid,
) -> Result<f64>
where
    C: Fn(f64) -> FlowCoefficients,
{
    let d = mean0.nrows();
    if cov0.shape() != (d, d) || mean0.ncols() != 1 {
        return Err(Error::Shape(format!(
            "mean {:?} and covariance {:?} do not agree",
            mean0.shape(),
            cov0.shape()
        )));
    }
    // packed state: [V | mu | J e_1]
    let rhs = |t: f64, y: &Mat| -> Mat {
        let c = coefficients(t);
        let v = y.columns(0, d);
        let mu = y.columns(d, 1);
        let fv = &c.drift * v;
        let mut out = Mat::zeros(d, d + 2);
        out.columns_mut(0, d).copy_from(&(&fv + fv.transpose() + &c.noise));
        out.column_mut(d).copy_from(&(&c.drift * mu + &c.offset).column(0));
        let rate = expected_form(&c.weight, &c.linear, c.constant, &mu.into_owned(), &v.into_owned());
        out[(0, d + 1)] = 0.5 * (-rho * t).exp() * rate;
        out
    };
    if d == 0 {
        return Ok(0.5 * (-rho * grid.t_end()).exp() * terminal.constant);
    }
    let mut init = Mat::zeros(d, d + 2);
    init.columns_mut(0, d).copy_from(cov0);
    init.column_mut(d).copy_from(&mean0.column(0));
    let path = integrate_forward(rhs, init, grid)?;
    let last = path.last();
    let v = last.columns(0, d).into_owned();
    let mu = last.columns(d, 1).into_owned();
    let running = last[(0, d + 1)];
    let end = expected_form(&terminal.weight, &terminal.linear, terminal.constant, &mu, &v);
    Ok(running + 0.5 * (-rho * grid.t_end()).exp() * end)
}

/// Cost-rate coefficients of a linear law `u = -K z + k` applied to the
/// running cost `(z'Qz + 2z'Nu + u'Ru - 2z'eta - 2u'n + c0)`.
pub struct LawCost {
    pub weight: Mat,
    pub linear: Mat,
    pub constant: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn law_cost(
    q: &Mat,
    n_cross: &Mat,
    r: &Mat,
    eta: &Mat,
    n_lin: &Mat,
    c0: f64,
    gain: &Mat,
    offset: &Mat,
) -> LawCost {
    let nk = n_cross * gain;
    let rk = r * gain;
    let weight = q - &nk - nk.transpose() + gain.transpose() * &rk;
    let linear = n_cross * offset - rk.transpose() * offset - eta + gain.transpose() * n_lin;
    let constant = c0 + offset.dot(&(r * offset)) - 2.0 * offset.dot(n_lin);
    LawCost { weight, linear, constant }
}
