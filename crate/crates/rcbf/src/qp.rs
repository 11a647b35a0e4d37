//! Small dense QP with diagonal weights:
//!
//! ```text
//! minimise   sum_i w_i (z_i - r_i)^2
//! subject to a_j . z >= b_j,   lower <= z <= upper
//! ```
//!
//! Solved with the Goldfarb-Idnani dual active-set method in whitened
//! coordinates `y = W^{1/2} (z - r)`, where the Hessian is the identity.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `a . z >= b`, tagged with a label that is carried into traces.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineConstraint {
    pub a: DVector<f64>,
    pub b: f64,
    pub label: String,
}

impl AffineConstraint {
    pub fn new(a: DVector<f64>, b: f64, label: impl Into<String>) -> Self {
        Self { a, b, label: label.into() }
    }

    /// `a . z - b`; non-negative when satisfied.
    pub fn margin(&self, z: &DVector<f64>) -> f64 {
        self.a.dot(z) - self.b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub weights: DVector<f64>,
    pub reference: DVector<f64>,
    pub constraints: Vec<AffineConstraint>,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
}

impl QpProblem {
    pub fn new(weights: DVector<f64>, reference: DVector<f64>) -> Self {
        Self { weights, reference, constraints: Vec::new(), lower: None, upper: None }
    }

    pub fn with_constraint(mut self, c: AffineConstraint) -> Self {
        self.constraints.push(c);
        self
    }

    pub fn dim(&self) -> usize {
        self.reference.len()
    }

    /// All rows, general constraints first, then `box.lower.i` and `box.upper.i`.
    pub fn rows(&self) -> Vec<AffineConstraint> {
        let d = self.dim();
        let mut rows = self.constraints.clone();
        let unit = |i: usize, s: f64| {
            let mut e = DVector::zeros(d);
            e[i] = s;
            e
        };
        if let Some(lo) = &self.lower {
            for i in 0..d {
                if lo[i].is_finite() {
                    rows.push(AffineConstraint::new(unit(i, 1.0), lo[i], format!("box.lower.{i}")));
                }
            }
        }
        if let Some(hi) = &self.upper {
            for i in 0..d {
                if hi[i].is_finite() {
                    rows.push(AffineConstraint::new(unit(i, -1.0), -hi[i], format!("box.upper.{i}")));
                }
            }
        }
        rows
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        self.weights
            .iter()
            .zip(z.iter().zip(self.reference.iter()))
            .map(|(w, (zi, ri))| w * (zi - ri) * (zi - ri))
            .sum()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::SolverFault("empty decision vector".into()));
        }
        if self.weights.len() != d {
            return Err(Error::Dimension { what: "qp weights", expected: d, got: self.weights.len() });
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::SolverFault("weights must be positive and finite".into()));
        }
        if self.reference.iter().any(|r| !r.is_finite()) {
            return Err(Error::SolverFault("non-finite reference".into()));
        }
        for c in &self.constraints {
            if c.a.len() != d {
                return Err(Error::Dimension { what: "qp constraint", expected: d, got: c.a.len() });
            }
            if c.a.iter().any(|v| !v.is_finite()) || !c.b.is_finite() {
                return Err(Error::SolverFault(format!("non-finite data in `{}`", c.label)));
            }
        }
        for (bound, what) in [(&self.lower, "qp lower"), (&self.upper, "qp upper")] {
            if let Some(v) = bound {
                if v.len() != d {
                    return Err(Error::Dimension { what, expected: d, got: v.len() });
                }
                if v.iter().any(|x| x.is_nan()) {
                    return Err(Error::SolverFault(format!("NaN in {what} bound")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub status: QpStatus,
    /// Minimiser when optimal; the last iterate otherwise.
    pub z: DVector<f64>,
    /// One multiplier per row of [`QpProblem::rows`], for the stated objective.
    pub multipliers: Vec<f64>,
    /// Rows in the final active set.
    pub active_set: Vec<usize>,
    /// Max of stationarity, primal, dual and complementarity residuals.
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Farkas ray when infeasible: `y >= 0`, `sum y_j a_j = 0`, `sum y_j b_j > 0`.
    pub certificate: Option<Vec<f64>>,
}

/// Feasibility tolerance in whitened, row-normalised coordinates.
const FEAS_TOL: f64 = 1e-12;
/// Below this a direction is treated as zero.
const ZERO_TOL: f64 = 1e-13;

pub fn solve(p: &QpProblem) -> Result<QpSolution> {
    solve_warm(p, &[])
}

/// Solve with a hint of rows that were active last time; violated hinted rows
/// are added first.
pub fn solve_warm(p: &QpProblem, hint: &[usize]) -> Result<QpSolution> {
    p.validate()?;
    let d = p.dim();
    let rows = p.rows();
    let sqrt_w: DVector<f64> = p.weights.map(f64::sqrt);

    // Whitened, unit-norm rows: at . y >= bt.
    let mut at: Vec<DVector<f64>> = Vec::with_capacity(rows.len());
    let mut bt = Vec::with_capacity(rows.len());
    let mut norms = Vec::with_capacity(rows.len());
    let mut skip = vec![false; rows.len()];
    for (j, c) in rows.iter().enumerate() {
        let a = c.a.component_div(&sqrt_w);
        let b = c.b - c.a.dot(&p.reference);
        let nrm = a.norm();
        if nrm <= f64::MIN_POSITIVE {
            if b > FEAS_TOL * (1.0 + c.b.abs()) {
                let mut ray = vec![0.0; rows.len()];
                ray[j] = 1.0;
                return Ok(infeasible(&rows, p.reference.clone(), ray, 0));
            }
            skip[j] = true;
            at.push(DVector::zeros(d));
            bt.push(0.0);
            norms.push(1.0);
        } else {
            at.push(a / nrm);
            bt.push(b / nrm);
            norms.push(nrm);
        }
    }

    let mut y = DVector::<f64>::zeros(d);
    let mut active: Vec<usize> = Vec::new();
    let mut nu: Vec<f64> = Vec::new();
    let max_iter = 50 * (rows.len() + d + 1);
    let mut iter = 0;

    loop {
        // Pick the constraint to add.
        let slack = |j: usize, y: &DVector<f64>| at[j].dot(y) - bt[j];
        let violated = |j: usize, y: &DVector<f64>| {
            !skip[j] && !active.contains(&j) && slack(j, y) < -FEAS_TOL * (1.0 + bt[j].abs())
        };
        let mut pick = hint.iter().copied().find(|&j| j < rows.len() && violated(j, &y));
        if pick.is_none() {
            let mut worst = 0.0;
            for j in 0..rows.len() {
                if violated(j, &y) {
                    let s = slack(j, &y);
                    if s < worst {
                        worst = s;
                        pick = Some(j);
                    }
                }
            }
        }
        let Some(pn) = pick else { break };
        let mut nu_p = 0.0;

        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::SolverFault(format!("no convergence after {max_iter} iterations")));
            }
            let q = active.len();
            let (r, z) = if q == 0 {
                (DVector::zeros(0), at[pn].clone())
            } else {
                let n_mat = DMatrix::from_columns(&active.iter().map(|&j| at[j].clone()).collect::<Vec<_>>());
                let gram = n_mat.transpose() * &n_mat;
                let rhs = n_mat.transpose() * &at[pn];
                let r = gram
                    .cholesky()
                    .map(|c| c.solve(&rhs))
                    .ok_or_else(|| Error::SolverFault("active set lost linear independence".into()))?;
                let z = &at[pn] - &n_mat * &r;
                (r, z)
            };
            let s_p = slack(pn, &y);
            let zz = z.norm_squared();
            let t1 = if zz > ZERO_TOL { -s_p / zz } else { f64::INFINITY };
            let mut t2 = f64::INFINITY;
            let mut drop = None;
            for (k, rk) in r.iter().enumerate() {
                if *rk > ZERO_TOL {
                    let ratio = nu[k] / rk;
                    if ratio < t2 {
                        t2 = ratio;
                        drop = Some(k);
                    }
                }
            }
            if !t1.is_finite() && !t2.is_finite() {
                let mut ray = vec![0.0; rows.len()];
                ray[pn] = 1.0 / norms[pn];
                for (k, &j) in active.iter().enumerate() {
                    ray[j] = (-r[k]).max(0.0) / norms[j];
                }
                let z_last = &p.reference + y.component_div(&sqrt_w);
                return Ok(infeasible(&rows, z_last, ray, iter));
            }
            let t = t1.min(t2);
            if t1.is_finite() {
                y += &z * t;
            }
            for (k, rk) in r.iter().enumerate() {
                nu[k] -= t * rk;
            }
            nu_p += t;
            if t1 <= t2 {
                active.push(pn);
                nu.push(nu_p);
                break;
            }
            let k = drop.expect("finite t2 has an index");
            active.remove(k);
            nu.remove(k);
        }
    }

    let assemble = |y: &DVector<f64>, nu: &[f64]| {
        let z = &p.reference + y.component_div(&sqrt_w);
        let mut multipliers = vec![0.0; rows.len()];
        for (k, &j) in active.iter().enumerate() {
            multipliers[j] = 2.0 * nu[k].max(0.0) / norms[j];
        }
        let res = kkt_residual(p, &rows, &z, &multipliers);
        (z, multipliers, res)
    };
    let (mut z, mut multipliers, mut kkt_residual) = assemble(&y, &nu);
    if let Some((y_pol, nu_pol)) = polish(&at, &bt, &active) {
        let (z2, m2, r2) = assemble(&y_pol, &nu_pol);
        if r2 < kkt_residual {
            (z, multipliers, kkt_residual) = (z2, m2, r2);
        }
    }
    let mut active_set = active;
    active_set.sort_unstable();
    Ok(QpSolution {
        status: QpStatus::Optimal,
        z,
        multipliers,
        active_set,
        kkt_residual,
        iterations: iter,
        certificate: None,
    })
}

/// Re-solve the equality problem on the final active set with a QR
/// factorisation; the dual updates accumulate error on near-dependent rows.
fn polish(at: &[DVector<f64>], bt: &[f64], active: &[usize]) -> Option<(DVector<f64>, Vec<f64>)> {
    if active.is_empty() {
        return None;
    }
    let n_mat = DMatrix::from_columns(&active.iter().map(|&j| at[j].clone()).collect::<Vec<_>>());
    if n_mat.ncols() > n_mat.nrows() {
        return None;
    }
    let qr = n_mat.clone().qr();
    let r = qr.r();
    let b = DVector::from_iterator(active.len(), active.iter().map(|&j| bt[j]));
    // N^T y = b with y = Q w:  R^T w = b, then R nu = w.
    let w = r.transpose().solve_lower_triangular(&b)?;
    let nu = r.solve_upper_triangular(&w)?;
    if nu.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return None;
    }
    let y = qr.q() * w;
    Some((y, nu.iter().copied().collect()))
}

fn infeasible(rows: &[AffineConstraint], z: DVector<f64>, ray: Vec<f64>, iterations: usize) -> QpSolution {
    QpSolution {
        status: QpStatus::Infeasible,
        z,
        multipliers: vec![0.0; rows.len()],
        active_set: Vec::new(),
        kkt_residual: f64::INFINITY,
        iterations,
        certificate: Some(ray),
    }
}

/// KKT residual for `sum w (z - r)^2` with multipliers `mu` on `a . z >= b`.
pub fn kkt_residual(p: &QpProblem, rows: &[AffineConstraint], z: &DVector<f64>, mu: &[f64]) -> f64 {
    let mut grad = (z - &p.reference).component_mul(&p.weights) * 2.0;
    let mut res: f64 = 0.0;
    for (c, m) in rows.iter().zip(mu) {
        grad -= &c.a * *m;
        let margin = c.margin(z);
        res = res.max((-margin).max(0.0)).max((-m).max(0.0)).max((m * margin).abs());
    }
    res.max(grad.amax())
}

/// Verify a Farkas certificate against the rows of `p`.
pub fn certificate_is_valid(p: &QpProblem, ray: &[f64], tol: f64) -> bool {
    let rows = p.rows();
    if ray.len() != rows.len() || ray.iter().any(|y| *y < 0.0) {
        return false;
    }
    let mut comb = DVector::zeros(p.dim());
    let mut rhs = 0.0;
    let mut scale: f64 = 0.0;
    for (c, y) in rows.iter().zip(ray) {
        comb += &c.a * *y;
        rhs += y * c.b;
        scale = scale.max(y * c.a.amax());
    }
    rhs > 0.0 && comb.amax() <= tol * scale.max(1.0)
}

/// Closed-form weighted projection onto a single half-space (no box).
pub fn oracle_project(p: &QpProblem) -> Result<DVector<f64>> {
    p.validate()?;
    if p.constraints.len() != 1 || p.lower.is_some() || p.upper.is_some() {
        return Err(Error::SolverFault("oracle handles exactly one general row".into()));
    }
    let c = &p.constraints[0];
    let gap = c.b - c.a.dot(&p.reference);
    if gap <= 0.0 {
        return Ok(p.reference.clone());
    }
    let winv_a = c.a.component_div(&p.weights);
    let denom = c.a.dot(&winv_a);
    if denom <= 0.0 {
        return Err(Error::SolverFault("single row is infeasible".into()));
    }
    Ok(&p.reference + winv_a * (gap / denom))
}
