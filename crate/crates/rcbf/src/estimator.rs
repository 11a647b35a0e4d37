//! Uncertainty estimator `Delta_hat = Lambda x - xi`,
//! `xi' = Lambda (f(x) + g(x) u + Delta_hat)`, and its a-priori bounds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlAffineModel, SimulationTrace};
use crate::error::{Error, Result};

/// Tolerance on the Lyapunov residual of the closed-form `P`.
pub const LYAPUNOV_TOL: f64 = 1e-12;

/// Diagonal estimator gain and the constants derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorGain {
    /// Diagonal of `Lambda`.
    pub lambda: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Diagonal of `P`, solving `P(-Lambda) + (-Lambda)^T P = -I`.
    pub p_diag: Vec<f64>,
    /// Spectral norm of `P`.
    pub p_norm: f64,
    /// Condition factor `sqrt(lambda_max / lambda_min)`.
    pub cond: f64,
    /// Error decay rate `lambda_min / 4`.
    pub mu_e: f64,
    pub delta_l: f64,
    /// ISS offset `delta_l^2 / (2 lambda_min)`.
    pub gamma: f64,
}

impl EstimatorGain {
    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// Spectral norm of `Lambda`.
    pub fn lambda_norm(&self) -> f64 {
        self.lambda_max
    }

    pub fn lambda_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.lambda))
    }

    pub fn p_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.p_diag))
    }
}

/// Build the gain from the diagonal of `Lambda`.
pub fn make_gain(lambda: &[f64], delta_l: f64) -> Result<EstimatorGain> {
    if lambda.is_empty() {
        return Err(Error::param("estimator.lambda", "empty"));
    }
    if let Some(bad) = lambda.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::param("estimator.lambda", format!("entry {bad} is not positive")));
    }
    if !(delta_l >= 0.0 && delta_l.is_finite()) {
        return Err(Error::param("delta_l", "must be finite and >= 0"));
    }
    let lambda_min = lambda.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda_max = lambda.iter().copied().fold(0.0, f64::max);
    let p_diag: Vec<f64> = lambda.iter().map(|l| 1.0 / (2.0 * l)).collect();
    let residual = p_diag
        .iter()
        .zip(lambda)
        .map(|(p, l)| (1.0 - 2.0 * p * l).abs())
        .fold(0.0, f64::max);
    if residual > LYAPUNOV_TOL {
        return Err(Error::DesignCondition(format!("Lyapunov residual {residual:e}")));
    }
    let p_norm = p_diag.iter().copied().fold(0.0, f64::max);
    Ok(EstimatorGain {
        lambda: lambda.to_vec(),
        lambda_min,
        lambda_max,
        p_diag,
        p_norm,
        cond: (lambda_max / lambda_min).sqrt(),
        mu_e: lambda_min / 4.0,
        delta_l,
        gamma: delta_l * delta_l / (2.0 * lambda_min),
    })
}

/// Dense solve of `A^T P + P A = -Q` by Kronecker vectorisation.
///
/// Used to validate the closed-form diagonal solution.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(Error::Dimension { what: "lyapunov operands", expected: n * n, got: q.len() });
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    // Column-major vec: vec(A^T P) = (I kron A^T) vec(P), vec(P A) = (A^T kron I) vec(P).
    let k = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::DesignCondition("Lyapunov operator is singular".into()))?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Integrated estimator state `xi`.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    pub xi: DVector<f64>,
}

/// `xi(0) = Lambda x(0)`, so `Delta_hat(0) = 0`.
pub fn init(gain: &EstimatorGain, x0: &DVector<f64>) -> Result<EstimatorState> {
    check_dim(gain, x0.len())?;
    Ok(EstimatorState { xi: scale(gain, x0) })
}

/// `Delta_hat = Lambda x - xi`.
pub fn output(gain: &EstimatorGain, xi: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(gain, x.len())?;
    check_dim(gain, xi.len())?;
    Ok(scale(gain, x) - xi)
}

/// `xi' = Lambda (f(x) + g(x) u + Delta_hat)`; integrate jointly with the plant.
pub fn derivative(
    model: &ControlAffineModel,
    gain: &EstimatorGain,
    x: &DVector<f64>,
    xi: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d_hat = output(gain, xi, x)?;
    let v = model.nominal_field(x, u)? + d_hat;
    Ok(scale(gain, &v))
}

fn scale(gain: &EstimatorGain, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().zip(&gain.lambda).map(|(a, l)| a * l))
}

fn check_dim(gain: &EstimatorGain, got: usize) -> Result<()> {
    if got != gain.dim() {
        return Err(Error::Dimension { what: "estimator", expected: gain.dim(), got });
    }
    Ok(())
}

fn check_bounds(delta_l: f64, delta_b: f64, t: f64) -> Result<()> {
    if !(delta_l >= 0.0 && delta_l.is_finite()) {
        return Err(Error::param("delta_l", "must be finite and >= 0"));
    }
    if !(delta_b >= 0.0 && delta_b.is_finite()) {
        return Err(Error::param("delta_b", "must be finite and >= 0"));
    }
    if !(t >= 0.0) {
        return Err(Error::param("t", "must be >= 0"));
    }
    Ok(())
}

/// Bound on `|Delta - Delta_hat|` at time `t`:
/// `c (delta_b - 2 delta_l |P|) e^{-t/(2|P|)} + 2 c |P| delta_l`.
pub fn error_bound(gain: &EstimatorGain, delta_l: f64, delta_b: f64, t: f64) -> Result<f64> {
    check_bounds(delta_l, delta_b, t)?;
    let s = t / (2.0 * gain.p_norm);
    let decay = (-s).exp();
    let rise = -(-s).exp_m1();
    // Same value as the transient/floor split, written so that t = 0 gives c * delta_b exactly.
    Ok(gain.cond * (delta_b * decay + 2.0 * gain.p_norm * delta_l * rise))
}

/// Bound on `|Delta_hat|` at time `t`: `2 c delta_b |Lambda| |P| (1 - e^{-t/(2|P|)})`.
pub fn output_bound(gain: &EstimatorGain, delta_b: f64, t: f64) -> Result<f64> {
    check_bounds(0.0, delta_b, t)?;
    let rise = -(-t / (2.0 * gain.p_norm)).exp_m1();
    Ok(2.0 * gain.cond * delta_b * gain.lambda_norm() * gain.p_norm * rise)
}

/// Steady-state floor of [`error_bound`].
pub fn error_bound_floor(gain: &EstimatorGain, delta_l: f64) -> f64 {
    2.0 * gain.cond * gain.p_norm * delta_l
}

/// Result of checking `V' <= -(lambda_min/2)|e|^2 + delta_l^2/(2 lambda_min)` along a trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IssReport {
    pub checked: usize,
    /// (sample index, time, excess over the right-hand side beyond the slack).
    pub violations: Vec<(usize, f64, f64)>,
    /// Largest `V'_fd - rhs` seen (may be negative).
    pub max_excess: f64,
}

impl IssReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Finite-difference ISS check on `V = |e|^2 / 2` from error norms on a uniform grid.
///
/// The right-hand side is evaluated with the mean of `|e|^2` at both ends of
/// each interval.
pub fn iss_decrement_check_series(
    times: &[f64],
    err_norms: &[f64],
    gain: &EstimatorGain,
    delta_l: f64,
    slack: f64,
) -> Result<IssReport> {
    if times.len() != err_norms.len() {
        return Err(Error::Dimension { what: "iss series", expected: times.len(), got: err_norms.len() });
    }
    let gamma = delta_l * delta_l / (2.0 * gain.lambda_min);
    let mut rep = IssReport { max_excess: f64::NEG_INFINITY, ..Default::default() };
    for k in 0..times.len().saturating_sub(1) {
        let dt = times[k + 1] - times[k];
        let (e0, e1) = (err_norms[k] * err_norms[k], err_norms[k + 1] * err_norms[k + 1]);
        let v_dot = 0.5 * (e1 - e0) / dt;
        let rhs = -0.5 * gain.lambda_min * 0.5 * (e0 + e1) + gamma;
        let excess = v_dot - rhs;
        rep.max_excess = rep.max_excess.max(excess);
        if excess > slack {
            rep.violations.push((k, times[k], excess - slack));
        }
        rep.checked += 1;
    }
    Ok(rep)
}

/// [`iss_decrement_check_series`] on the `err_norm` column of a trace.
pub fn iss_decrement_check(
    trace: &SimulationTrace,
    gain: &EstimatorGain,
    delta_l: f64,
    slack: f64,
) -> Result<IssReport> {
    let t = trace.times();
    let e = trace.column_or_err("err_norm")?;
    iss_decrement_check_series(&t, &e, gain, delta_l, slack)
}
