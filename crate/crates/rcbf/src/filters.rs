//! Barrier functions and the affine QP rows of the safety filters.
//!
//! Every row is `a . z >= b`. Barrier rows act on the control `u`; the CLF
//! row acts on `(u, delta_c)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlAffineModel, TrueSystem, VecField};
use crate::error::{Error, Result};
use crate::estimator::{error_bound, EstimatorGain};
use crate::qp::AffineConstraint;

pub type ScalarField = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

pub const LABEL_NOMINAL: &str = "nominal.cbf";
pub const LABEL_NOMINAL_HOCBF: &str = "nominal.hocbf";
pub const LABEL_METHOD1: &str = "method1.theorem1";
pub const LABEL_METHOD1_ALT: &str = "method1.corollary2";
pub const LABEL_METHOD2: &str = "method2.theorem2";
pub const LABEL_METHOD2_HOCBF: &str = "method2.corollary1";
pub const LABEL_CLF: &str = "clf";

/// Extended class-K function.
#[derive(Clone)]
pub enum ClassK {
    Linear(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl ClassK {
    pub fn eval(&self, h: f64) -> f64 {
        match self {
            ClassK::Linear(a) => a * h,
            ClassK::Custom(f) => f(h),
        }
    }
}

impl fmt::Debug for ClassK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassK::Linear(a) => write!(f, "Linear({a})"),
            ClassK::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// `h(x)` with its analytic gradient and class-K gain.
#[derive(Clone)]
pub struct BarrierFunction {
    pub h: ScalarField,
    pub grad: VecField,
    pub alpha: ClassK,
}

impl fmt::Debug for BarrierFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BarrierFunction").field("alpha", &self.alpha).finish_non_exhaustive()
    }
}

/// Values needed to build a first-order barrier row at `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LieTerms {
    pub h: f64,
    pub grad: DVector<f64>,
    pub lf: f64,
    pub lg: DVector<f64>,
}

pub fn lie_terms(model: &ControlAffineModel, barrier: &BarrierFunction, x: &DVector<f64>) -> Result<LieTerms> {
    let grad = (barrier.grad)(x);
    if grad.len() != model.state_dim() {
        return Err(Error::Dimension { what: "barrier gradient", expected: model.state_dim(), got: grad.len() });
    }
    let f = model.drift(x)?;
    let g = model.input_matrix(x)?;
    let lf = grad.dot(&f);
    let lg = g.tr_mul(&grad);
    Ok(LieTerms { h: (barrier.h)(x), grad, lf, lg })
}

/// Central-difference gradient with a per-coordinate step.
pub fn gradient_fd(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, rel_step: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = rel_step * (1.0 + x[i].abs());
        let xi = x[i];
        xp[i] = xi + h;
        let fp = f(&xp);
        xp[i] = xi - h;
        let fm = f(&xp);
        xp[i] = xi;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Plain CBF row: `L_g h u >= -alpha(h) - L_f h`.
pub fn nominal_cbf_row(model: &ControlAffineModel, barrier: &BarrierFunction, x: &DVector<f64>) -> Result<AffineConstraint> {
    let lt = lie_terms(model, barrier, x)?;
    let b = -barrier.alpha.eval(lt.h) - lt.lf;
    Ok(AffineConstraint::new(lt.lg, b, LABEL_NOMINAL))
}

/// Tuning of the compensating filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Method1Params {
    pub mu_h: f64,
    pub sigma_v: f64,
    /// `4 sigma_V mu_e - 2 sigma_V mu_h`, required positive.
    pub d: f64,
}

impl Method1Params {
    pub fn new(mu_h: f64, sigma_v: f64, gain: &EstimatorGain) -> Result<Self> {
        if !(mu_h > 0.0 && mu_h.is_finite()) {
            return Err(Error::param("method1.mu_h", "must be positive"));
        }
        if !(sigma_v > 0.0 && sigma_v.is_finite()) {
            return Err(Error::param("method1.sigma_v", "must be positive"));
        }
        let d = 4.0 * sigma_v * gain.mu_e - 2.0 * sigma_v * mu_h;
        if !(d > 0.0) {
            return Err(Error::DesignCondition(format!(
                "4 sigma_V mu_e - 2 sigma_V mu_h = {d} must be positive (mu_e = {})",
                gain.mu_e
            )));
        }
        Ok(Self { mu_h, sigma_v, d })
    }
}

/// Right-hand side `S(x) = -mu_h h + |dh|^2 / D + sigma_V gamma(delta_l)`.
pub fn method1_rhs(params: &Method1Params, gain: &EstimatorGain, delta_l: f64, h: f64, grad: &DVector<f64>) -> f64 {
    let gamma = delta_l * delta_l / (2.0 * gain.lambda_min);
    -params.mu_h * h + grad.norm_squared() / params.d + params.sigma_v * gamma
}

/// Row on the pre-compensation input: `L_f h + L_g h u_tilde >= S(x)`.
pub fn method1_row(
    model: &ControlAffineModel,
    barrier: &BarrierFunction,
    params: &Method1Params,
    gain: &EstimatorGain,
    delta_l: f64,
    x: &DVector<f64>,
) -> Result<AffineConstraint> {
    let lt = lie_terms(model, barrier, x)?;
    let s = method1_rhs(params, gain, delta_l, lt.h, &lt.grad);
    Ok(AffineConstraint::new(lt.lg, s - lt.lf, LABEL_METHOD1))
}

/// Left inverse `Q = (g^T g)^{-1} g^T` of the input matrix.
pub fn matching_matrix(model: &ControlAffineModel, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let g = model.input_matrix(x)?;
    let svd = g.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax.max(f64::MIN_POSITIVE)) || smax == 0.0 {
        return Err(Error::MatchingFailure(format!("input matrix is rank deficient (sigma_min = {smin:e})")));
    }
    let gtg = g.tr_mul(&g);
    let q = gtg
        .cholesky()
        .ok_or_else(|| Error::MatchingFailure("g^T g is not positive definite".into()))?
        .solve(&g.transpose());
    let probe = DVector::from_element(model.input_dim(), 1.0);
    let gv = &g * &probe;
    let back = &g * (&q * &gv);
    if (&back - &gv).amax() > 1e-9 * gv.amax().max(1.0) {
        return Err(Error::MatchingFailure("g Q g != g".into()));
    }
    Ok(q)
}

/// `u = u_tilde - Q Delta_hat`.
pub fn method1_control(u_tilde: &DVector<f64>, q: &DMatrix<f64>, d_hat: &DVector<f64>) -> Result<DVector<f64>> {
    if q.nrows() != u_tilde.len() || q.ncols() != d_hat.len() {
        return Err(Error::Dimension { what: "compensation", expected: q.nrows() * q.ncols(), got: u_tilde.len() * d_hat.len() });
    }
    Ok(u_tilde - q * d_hat)
}

/// `(-alpha_term - lf) - grad . d_hat + |grad| bound`, shared so that reductions are exact.
fn robust_rhs(alpha_term: f64, lf: f64, grad: &DVector<f64>, d_hat: &DVector<f64>, bound: f64) -> f64 {
    ((-alpha_term - lf) - grad.dot(d_hat)) + grad.norm() * bound
}

/// Alternative compensating row: `L_g h u >= -alpha(h) - L_f h + |dh| error_bound(t)`.
#[allow(clippy::too_many_arguments)]
pub fn method1_alt_row(
    model: &ControlAffineModel,
    barrier: &BarrierFunction,
    gain: &EstimatorGain,
    delta_l: f64,
    delta_b: f64,
    x: &DVector<f64>,
    t: f64,
) -> Result<AffineConstraint> {
    let lt = lie_terms(model, barrier, x)?;
    let bound = error_bound(gain, delta_l, delta_b, t)?;
    let b = (-barrier.alpha.eval(lt.h) - lt.lf) + lt.grad.norm() * bound;
    Ok(AffineConstraint::new(lt.lg, b, LABEL_METHOD1_ALT))
}

/// Estimate-robustified row:
/// `L_g h u >= -alpha(h) - L_f h - dh . Delta_hat + |dh| error_bound(t)`.
#[allow(clippy::too_many_arguments)]
pub fn method2_row(
    model: &ControlAffineModel,
    barrier: &BarrierFunction,
    d_hat: &DVector<f64>,
    gain: &EstimatorGain,
    delta_l: f64,
    delta_b: f64,
    x: &DVector<f64>,
    t: f64,
) -> Result<AffineConstraint> {
    let lt = lie_terms(model, barrier, x)?;
    if d_hat.len() != lt.grad.len() {
        return Err(Error::Dimension { what: "estimate", expected: lt.grad.len(), got: d_hat.len() });
    }
    let bound = error_bound(gain, delta_l, delta_b, t)?;
    let b = robust_rhs(barrier.alpha.eval(lt.h), lt.lf, &lt.grad, d_hat, bound);
    Ok(AffineConstraint::new(lt.lg, b, LABEL_METHOD2))
}

/// One level `L_f^k h` of a barrier cascade with its gradient.
#[derive(Clone)]
pub struct LieLevel {
    pub value: ScalarField,
    pub grad: VecField,
}

/// Linear high-order barrier cascade
/// `phi_0 = h`, `phi_k = phi_{k-1}' + a_k phi_{k-1}`.
///
/// `levels[k]` holds `L_f^k h` for `k < m`; the top Lie derivative is formed
/// from the gradient of the last level.
#[derive(Clone)]
pub struct HocbfCascade {
    pub levels: Vec<LieLevel>,
    pub gains: Vec<f64>,
    /// Suffix for the row label when several cascades share a QP.
    pub tag: Option<String>,
}

impl fmt::Debug for HocbfCascade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HocbfCascade")
            .field("order", &self.levels.len())
            .field("gains", &self.gains)
            .field("tag", &self.tag)
            .finish()
    }
}

/// Everything about a cascade at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeEval {
    /// `L_f^k h` for `k = 0..=m`.
    pub lie: Vec<f64>,
    /// `phi_k` for `k = 0..m`.
    pub phi: Vec<f64>,
    /// Coefficients of `phi_{m-1}` over `L_f^j h`, `j = 0..m`.
    pub coeffs: Vec<f64>,
    pub top_grad: DVector<f64>,
    pub lg: DVector<f64>,
}

/// Coefficients of `phi_k` over `L_f^j h` for `k = 0..m`.
pub fn cascade_coefficients(gains: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![1.0]];
    for (k, a) in gains.iter().enumerate() {
        let prev = &out[k];
        let mut next = vec![0.0; prev.len() + 1];
        for (j, c) in prev.iter().enumerate() {
            next[j + 1] += c;
            next[j] += a * c;
        }
        out.push(next);
    }
    out
}

/// Relative tolerance of the per-call level consistency check.
const CASCADE_TOL: f64 = 1e-8;

impl HocbfCascade {
    pub fn new(levels: Vec<LieLevel>, gains: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels.len() != gains.len() {
            return Err(Error::param("cascade", "need one gain per level and at least one level"));
        }
        if let Some(a) = gains.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::param("cascade.gains", format!("gain {a} must be positive")));
        }
        Ok(Self { levels, gains, tag: None })
    }

    /// First-order cascade from a barrier with a linear class-K gain.
    pub fn from_barrier(barrier: &BarrierFunction) -> Result<Self> {
        let ClassK::Linear(a) = barrier.alpha else {
            return Err(Error::param("cascade", "needs a linear class-K gain"));
        };
        Self::new(vec![LieLevel { value: barrier.h.clone(), grad: barrier.grad.clone() }], vec![a])
    }

    pub fn order(&self) -> usize {
        self.levels.len()
    }

    pub fn eval(&self, model: &ControlAffineModel, x: &DVector<f64>) -> Result<CascadeEval> {
        let m = self.order();
        let f = model.drift(x)?;
        let mut lie = Vec::with_capacity(m + 1);
        for (k, lvl) in self.levels.iter().enumerate() {
            let v = (lvl.value)(x);
            if k > 0 {
                let from_below = (self.levels[k - 1].grad)(x).dot(&f);
                let mismatch = (v - from_below).abs();
                if mismatch > CASCADE_TOL * (1.0 + v.abs()) {
                    return Err(Error::CascadeInconsistency { level: k, mismatch });
                }
            }
            lie.push(v);
        }
        let top_grad = (self.levels[m - 1].grad)(x);
        if top_grad.len() != model.state_dim() {
            return Err(Error::Dimension { what: "cascade gradient", expected: model.state_dim(), got: top_grad.len() });
        }
        lie.push(top_grad.dot(&f));
        let g = model.input_matrix(x)?;
        let lg = g.tr_mul(&top_grad);
        let all = cascade_coefficients(&self.gains);
        let phi = (0..m).map(|k| dot_prefix(&all[k], &lie)).collect();
        Ok(CascadeEval { lie, phi, coeffs: all[m - 1].clone(), top_grad, lg })
    }

    fn label(&self, base: &str) -> String {
        match &self.tag {
            Some(t) => format!("{base}:{t}"),
            None => base.to_string(),
        }
    }

    fn row(&self, ev: &CascadeEval, d_hat: &DVector<f64>, bound: f64, label: &str) -> AffineConstraint {
        let m = self.order();
        let a_m = self.gains[m - 1];
        // Drift of phi_{m-1} from the lower levels.
        let mut residual = 0.0;
        for j in 0..m - 1 {
            residual += ev.coeffs[j] * ev.lie[j + 1];
        }
        let b = robust_rhs(a_m * ev.phi[m - 1], ev.lie[m], &ev.top_grad, d_hat, bound) - residual;
        AffineConstraint::new(ev.lg.clone(), b, self.label(label))
    }
}

fn dot_prefix(c: &[f64], v: &[f64]) -> f64 {
    c.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Nominal high-order row `phi_{m-1}' + a_m phi_{m-1} >= 0` on the model.
pub fn hocbf_row(model: &ControlAffineModel, cascade: &HocbfCascade, x: &DVector<f64>) -> Result<AffineConstraint> {
    let ev = cascade.eval(model, x)?;
    let zero = DVector::zeros(model.state_dim());
    Ok(cascade.row(&ev, &zero, 0.0, LABEL_NOMINAL_HOCBF))
}

/// Estimate-robustified high-order row.
#[allow(clippy::too_many_arguments)]
pub fn hocbf_method2_row(
    model: &ControlAffineModel,
    cascade: &HocbfCascade,
    d_hat: &DVector<f64>,
    gain: &EstimatorGain,
    delta_l: f64,
    delta_b: f64,
    x: &DVector<f64>,
    t: f64,
) -> Result<AffineConstraint> {
    if d_hat.len() != model.state_dim() {
        return Err(Error::Dimension { what: "estimate", expected: model.state_dim(), got: d_hat.len() });
    }
    let ev = cascade.eval(model, x)?;
    let bound = error_bound(gain, delta_l, delta_b, t)?;
    Ok(cascade.row(&ev, d_hat, bound, LABEL_METHOD2_HOCBF))
}

/// CLF row over `(u, delta_c)`: `-L_g V u + delta_c >= L_f V + rate V`.
pub fn clf_row(
    v: &dyn Fn(&DVector<f64>) -> f64,
    grad_v: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    model: &ControlAffineModel,
    rate: f64,
    x: &DVector<f64>,
) -> Result<AffineConstraint> {
    let grad = grad_v(x);
    if grad.len() != model.state_dim() {
        return Err(Error::Dimension { what: "clf gradient", expected: model.state_dim(), got: grad.len() });
    }
    let lf = grad.dot(&model.drift(x)?);
    let lg = model.input_matrix(x)?.tr_mul(&grad);
    let m = model.input_dim();
    let mut a = DVector::zeros(m + 1);
    for i in 0..m {
        a[i] = -lg[i];
    }
    a[m] = 1.0;
    Ok(AffineConstraint::new(a, lf + rate * v(x), LABEL_CLF))
}

/// Relative-degree diagnosis at sampled `(x, u, t)` points.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelativeDegreeReport {
    /// Input relative degree: first `r` with `L_g L_f^{r-1} h != 0`.
    pub ird: Option<usize>,
    /// Disturbance relative degree: first `r` with `d(L_f^{r-1} h) . Delta != 0`.
    pub drd: Option<usize>,
    pub matched: bool,
    /// Neither degree was found up to the maximum order.
    pub inconclusive: bool,
}

/// A sample for [`check_relative_degrees`].
#[derive(Clone, Debug, PartialEq)]
pub struct RdSample {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub t: f64,
}

const RD_STEP: f64 = 1e-4;
const RD_TOL: f64 = 1e-6;

/// Numerical relative-degree check by nested central differences of Lie derivatives.
///
/// Zero-structure in `g` and in the gradients is exact under differencing,
/// so the detection threshold only has to separate rounding noise from
/// genuine couplings.
pub fn check_relative_degrees(
    sys: &TrueSystem,
    barrier: &BarrierFunction,
    samples: &[RdSample],
    max_order: usize,
) -> Result<RelativeDegreeReport> {
    if samples.is_empty() {
        return Err(Error::param("samples", "at least one sample is required"));
    }
    if max_order == 0 || max_order > 4 {
        return Err(Error::param("max_order", "must be in 1..=4"));
    }
    let model = &sys.model;
    let mut rep = RelativeDegreeReport::default();
    for order in 1..=max_order {
        for s in samples {
            let grad = lie_gradient(model, barrier, order - 1, &s.x)?;
            let scale = grad.amax().max(1.0);
            let g = model.input_matrix(&s.x)?;
            if rep.ird.is_none() && g.tr_mul(&grad).amax() > RD_TOL * scale {
                rep.ird = Some(order);
            }
            let d = sys.uncertainty_at(&s.x, &s.u, s.t)?;
            if rep.drd.is_none() && grad.dot(&d).abs() > RD_TOL * scale * d.amax().max(1.0) {
                rep.drd = Some(order);
            }
        }
        if rep.ird.is_some() && rep.drd.is_some() {
            break;
        }
    }
    rep.matched = rep.ird.is_some() && rep.ird == rep.drd;
    rep.inconclusive = rep.ird.is_none() && rep.drd.is_none();
    Ok(rep)
}

fn lie_value(model: &ControlAffineModel, barrier: &BarrierFunction, k: usize, x: &DVector<f64>) -> f64 {
    if k == 0 {
        return (barrier.h)(x);
    }
    match (lie_gradient(model, barrier, k - 1, x), model.drift(x)) {
        (Ok(g), Ok(f)) => g.dot(&f),
        _ => f64::NAN,
    }
}

fn lie_gradient(model: &ControlAffineModel, barrier: &BarrierFunction, k: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
    if k == 0 {
        return Ok((barrier.grad)(x));
    }
    let f = |z: &DVector<f64>| lie_value(model, barrier, k, z);
    // Coarser steps for deeper nesting keep rounding noise below RD_TOL.
    let g = gradient_fd(&f, x, RD_STEP * 10f64.powi(k as i32 - 1));
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("barrier", "non-finite Lie derivative"));
    }
    Ok(g)
}
