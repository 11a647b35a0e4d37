//! Control-affine models, the true (uncertain) plant, and fixed-step RK4
//! simulation with a zero-order hold on the input.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type VecField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatField = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type TimeSignal = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Known part of the plant: `x' = f(x) + g(x) u`.
#[derive(Clone)]
pub struct ControlAffineModel {
    n: usize,
    m: usize,
    f_hat: VecField,
    g_hat: MatField,
}

impl fmt::Debug for ControlAffineModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .finish_non_exhaustive()
    }
}

impl ControlAffineModel {
    pub fn new(n: usize, m: usize, f_hat: VecField, g_hat: MatField) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::param("model", "state and input dimensions must be positive"));
        }
        if m > n {
            return Err(Error::param("model", format!("m = {m} exceeds n = {n}")));
        }
        Ok(Self { n, m, f_hat, g_hat })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Dimension { what: "state", expected: self.n, got: x.len() });
        }
        Ok(())
    }

    fn check_input(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.m {
            return Err(Error::Dimension { what: "input", expected: self.m, got: u.len() });
        }
        Ok(())
    }

    pub fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        let f = (self.f_hat)(x);
        if f.len() != self.n {
            return Err(Error::Dimension { what: "drift", expected: self.n, got: f.len() });
        }
        Ok(f)
    }

    pub fn input_matrix(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        let g = (self.g_hat)(x);
        if g.nrows() != self.n || g.ncols() != self.m {
            return Err(Error::Dimension {
                what: "input matrix",
                expected: self.n * self.m,
                got: g.nrows() * g.ncols(),
            });
        }
        Ok(g)
    }

    /// `f(x) + g(x) u`.
    pub fn nominal_field(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(u)?;
        Ok(self.drift(x)? + self.input_matrix(x)? * u)
    }
}

/// Unmodelled dynamics `Delta(x, u, t) = df(x) + dg(x) u + w(t)` with declared bounds.
#[derive(Clone)]
pub struct UncertaintySpec {
    pub delta_f: Option<VecField>,
    pub delta_g: Option<MatField>,
    pub time_term: Option<TimeSignal>,
    /// Declared bound on the rate of change of `Delta` along trajectories.
    pub delta_l: f64,
    /// Declared bound on the magnitude of `Delta`.
    pub delta_b: f64,
}

impl fmt::Debug for UncertaintySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UncertaintySpec")
            .field("delta_f", &self.delta_f.is_some())
            .field("delta_g", &self.delta_g.is_some())
            .field("time_term", &self.time_term.is_some())
            .field("delta_l", &self.delta_l)
            .field("delta_b", &self.delta_b)
            .finish()
    }
}

impl UncertaintySpec {
    /// No uncertainty; the declared bounds are kept for the filters.
    pub fn none(delta_l: f64, delta_b: f64) -> Self {
        Self { delta_f: None, delta_g: None, time_term: None, delta_l, delta_b }
    }

    pub fn is_zero(&self) -> bool {
        self.delta_f.is_none() && self.delta_g.is_none() && self.time_term.is_none()
    }
}

/// Known model plus the uncertainty actually acting on the plant.
#[derive(Clone, Debug)]
pub struct TrueSystem {
    pub model: ControlAffineModel,
    pub uncertainty: UncertaintySpec,
}

impl TrueSystem {
    pub fn new(model: ControlAffineModel, uncertainty: UncertaintySpec) -> Result<Self> {
        if !(uncertainty.delta_l >= 0.0 && uncertainty.delta_b >= 0.0)
            || !uncertainty.delta_l.is_finite()
            || !uncertainty.delta_b.is_finite()
        {
            return Err(Error::param("uncertainty", "delta_l and delta_b must be finite and >= 0"));
        }
        Ok(Self { model, uncertainty })
    }

    /// Evaluate `Delta(x, u, t)`.
    pub fn uncertainty_at(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let n = self.model.state_dim();
        self.model.check_state(x)?;
        self.model.check_input(u)?;
        let mut d = DVector::zeros(n);
        if let Some(df) = &self.uncertainty.delta_f {
            let v = df(x);
            if v.len() != n {
                return Err(Error::Dimension { what: "delta_f", expected: n, got: v.len() });
            }
            d += v;
        }
        if let Some(dg) = &self.uncertainty.delta_g {
            let g = dg(x);
            if g.nrows() != n || g.ncols() != u.len() {
                return Err(Error::Dimension {
                    what: "delta_g",
                    expected: n * u.len(),
                    got: g.nrows() * g.ncols(),
                });
            }
            d += g * u;
        }
        if let Some(w) = &self.uncertainty.time_term {
            let v = w(t);
            if v.len() != n {
                return Err(Error::Dimension { what: "time term", expected: n, got: v.len() });
            }
            d += v;
        }
        Ok(d)
    }
}

/// `x' = f(x) + g(x) u + Delta(x, u, t)`.
pub fn eval_true_dynamics(
    sys: &TrueSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    let xd = sys.model.nominal_field(x, u)? + sys.uncertainty_at(x, u, t)?;
    if xd.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationFault { t, reason: "non-finite state derivative".into() });
    }
    Ok(xd)
}

/// Fixed-step integration settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t_final: f64,
}

impl IntegratorConfig {
    pub fn new(dt: f64, t_final: f64) -> Result<Self> {
        let cfg = Self { dt, t_final };
        cfg.steps()?;
        Ok(cfg)
    }

    /// Number of steps; `t_final / dt` must be an integer up to rounding.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", "must be positive and finite"));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::param("t_final", "must be positive and finite"));
        }
        let ratio = self.t_final / self.dt;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::param("dt", format!("t_final / dt = {ratio} is not an integer")));
        }
        Ok(n as usize)
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

/// One classical RK4 step of an arbitrary time-varying field.
pub fn rk4_step_with<F>(mut field: F, t: f64, x: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let h2 = 0.5 * dt;
    let k1 = field(t, x)?;
    let k2 = field(t + h2, &(x + &k1 * h2))?;
    let k3 = field(t + h2, &(x + &k2 * h2))?;
    let k4 = field(t + dt, &(x + &k3 * dt))?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationFault { t, reason: "non-finite state after RK4 step".into() });
    }
    Ok(next)
}

/// One RK4 step of the true plant with `u` held constant over the step.
pub fn rk4_step(
    sys: &TrueSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<DVector<f64>> {
    rk4_step_with(|tau, z| eval_true_dynamics(sys, z, u, tau), t, x, dt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusKind {
    /// No optimisation was needed (open loop or unfiltered).
    Open,
    Optimal,
    /// QP infeasible; the previous feasible input was held.
    InfeasibleHold,
}

impl StatusKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StatusKind::Open => "open",
            StatusKind::Optimal => "optimal",
            StatusKind::InfeasibleHold => "infeasible_hold",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "open" => Some(StatusKind::Open),
            "optimal" => Some(StatusKind::Optimal),
            "infeasible_hold" => Some(StatusKind::InfeasibleHold),
            _ => None,
        }
    }
}

/// Per-step filter status together with the labels of the active constraints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepStatus {
    pub kind: StatusKind,
    pub active: Vec<String>,
}

impl StepStatus {
    pub fn open() -> Self {
        Self { kind: StatusKind::Open, active: Vec::new() }
    }

    pub fn is_fault(&self) -> bool {
        self.kind == StatusKind::InfeasibleHold
    }
}

impl fmt::Display for StepStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.as_str())?;
        if !self.active.is_empty() {
            write!(f, "[{}]", self.active.join(";"))?;
        }
        Ok(())
    }
}

impl std::str::FromStr for StepStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::TraceFormat(format!("bad status `{s}`"));
        let (kind, active) = match s.find('[') {
            Some(i) => {
                let inner = s[i + 1..].strip_suffix(']').ok_or_else(bad)?;
                (&s[..i], inner.split(';').map(str::to_string).collect())
            }
            None => (s, Vec::new()),
        };
        Ok(Self { kind: StatusKind::parse(kind).ok_or_else(bad)?, active })
    }
}

/// What a controller hands back each step.
#[derive(Clone, Debug)]
pub struct ControlOutput {
    pub u: DVector<f64>,
    pub status: StepStatus,
    /// Controller-side quantities, named by [`Controller::diagnostic_columns`].
    pub diagnostics: Vec<f64>,
}

/// A feedback law, possibly carrying its own integrated state (e.g. an estimator).
///
/// The auxiliary state is integrated jointly with the plant using the same
/// RK4 stages, with the control held over the step.
pub trait Controller {
    fn aux_dim(&self) -> usize {
        0
    }

    fn aux_init(&self, _x0: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.aux_dim())
    }

    fn aux_derivative(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _aux: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.aux_dim()))
    }

    fn diagnostic_columns(&self) -> Vec<String> {
        Vec::new()
    }

    fn control(&mut self, t: f64, x: &DVector<f64>, aux: &DVector<f64>) -> Result<ControlOutput>;
}

/// State of the loop at a sample instant.
pub struct Sample<'a> {
    pub index: usize,
    pub t: f64,
    pub x: &'a DVector<f64>,
    pub aux: &'a DVector<f64>,
    pub output: &'a ControlOutput,
}

/// Appends named scalar channels to each trace row.
pub trait Recorder {
    fn columns(&self) -> Vec<String>;
    fn record(&mut self, sample: &Sample<'_>, row: &mut Vec<f64>) -> Result<()>;
}

/// Recorder closure with fixed column names.
pub struct FnRecorder<F> {
    names: Vec<String>,
    f: F,
}

impl<F> FnRecorder<F>
where
    F: FnMut(&Sample<'_>, &mut Vec<f64>) -> Result<()>,
{
    pub fn new(names: Vec<String>, f: F) -> Self {
        Self { names, f }
    }
}

impl<F> Recorder for FnRecorder<F>
where
    F: FnMut(&Sample<'_>, &mut Vec<f64>) -> Result<()>,
{
    fn columns(&self) -> Vec<String> {
        self.names.clone()
    }

    fn record(&mut self, sample: &Sample<'_>, row: &mut Vec<f64>) -> Result<()> {
        (self.f)(sample, row)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub scenario: String,
    pub mode: String,
    pub seed: Option<u64>,
    pub dt: f64,
    pub t_final: f64,
    /// (time, message) for every logged fault.
    pub faults: Vec<(f64, String)>,
    /// Largest KKT residual over all QPs solved during the run.
    pub max_kkt_residual: f64,
}

/// Time-indexed table of named scalar channels plus a per-step status.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationTrace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub status: Vec<StepStatus>,
    pub meta: TraceMeta,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn column_or_err(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name)
            .ok_or_else(|| Error::TraceFormat(format!("missing column `{name}`")))
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }

    /// Reorder or subset columns; `t` must be among `names`.
    pub fn select(&self, names: &[&str]) -> Result<SimulationTrace> {
        let idx = names
            .iter()
            .map(|n| {
                self.column_index(n)
                    .ok_or_else(|| Error::TraceFormat(format!("missing column `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SimulationTrace {
            columns: names.iter().map(|s| s.to_string()).collect(),
            rows: self.rows.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect(),
            status: self.status.clone(),
            meta: self.meta.clone(),
        })
    }

    pub fn fault_count(&self) -> usize {
        self.status.iter().filter(|s| s.is_fault()).count()
    }
}

/// A simulation that stopped early, with everything recorded up to the fault.
#[derive(Debug)]
pub struct SimulationFailure {
    pub error: Error,
    pub partial: SimulationTrace,
}

impl fmt::Display for SimulationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} samples)", self.error, self.partial.len())
    }
}

impl SimulationFailure {
    /// A failure before any sample was taken.
    pub fn before_start(error: Error) -> Self {
        Self {
            error,
            partial: SimulationTrace {
                columns: vec!["t".into()],
                rows: Vec::new(),
                status: Vec::new(),
                meta: TraceMeta::default(),
            },
        }
    }
}

pub type RunResult = std::result::Result<SimulationTrace, SimulationFailure>;

impl std::error::Error for SimulationFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Closed-loop simulation on the grid `t_k = k dt`, `k = 0..=N`.
///
/// At each sample the controller is queried once, the sample is recorded,
/// and then plant and controller state advance by one RK4 step with the
/// input held.
pub fn simulate(
    sys: &TrueSystem,
    controller: &mut dyn Controller,
    x0: &DVector<f64>,
    cfg: &IntegratorConfig,
    recorders: &mut [&mut dyn Recorder],
) -> std::result::Result<SimulationTrace, SimulationFailure> {
    let mut columns = vec!["t".to_string()];
    columns.extend(controller.diagnostic_columns());
    for r in recorders.iter() {
        columns.extend(r.columns());
    }
    let mut trace = SimulationTrace {
        columns,
        rows: Vec::new(),
        status: Vec::new(),
        meta: TraceMeta { dt: cfg.dt, t_final: cfg.t_final, ..Default::default() },
    };
    let fail = |error: Error, mut partial: SimulationTrace| {
        let t = partial.rows.last().map_or(0.0, |r| r[0]);
        partial.meta.faults.push((t, error.to_string()));
        SimulationFailure { error, partial }
    };

    let steps = match cfg.steps() {
        Ok(s) => s,
        Err(e) => return Err(fail(e, trace)),
    };
    let n = sys.model.state_dim();
    let m = sys.model.input_dim();
    if x0.len() != n {
        return Err(fail(Error::Dimension { what: "initial state", expected: n, got: x0.len() }, trace));
    }
    let na = controller.aux_dim();
    let mut x = x0.clone();
    let mut aux = controller.aux_init(x0);
    if aux.len() != na {
        return Err(fail(Error::Dimension { what: "aux state", expected: na, got: aux.len() }, trace));
    }
    trace.rows.reserve(steps + 1);
    trace.status.reserve(steps + 1);

    for k in 0..=steps {
        let t = cfg.time(k);
        let out = match controller.control(t, &x, &aux) {
            Ok(o) => o,
            Err(e) => return Err(fail(e, trace)),
        };
        if out.u.len() != m {
            return Err(fail(Error::Dimension { what: "control", expected: m, got: out.u.len() }, trace));
        }
        if out.u.iter().any(|v| !v.is_finite()) {
            return Err(fail(Error::IntegrationFault { t, reason: "non-finite control".into() }, trace));
        }
        let mut row = Vec::with_capacity(trace.columns.len());
        row.push(t);
        row.extend_from_slice(&out.diagnostics);
        let sample = Sample { index: k, t, x: &x, aux: &aux, output: &out };
        for r in recorders.iter_mut() {
            if let Err(e) = r.record(&sample, &mut row) {
                return Err(fail(e, trace));
            }
        }
        if row.len() != trace.columns.len() {
            let got = row.len();
            let expected = trace.columns.len();
            return Err(fail(Error::Dimension { what: "trace row", expected, got }, trace));
        }
        if out.status.is_fault() {
            trace.meta.faults.push((t, out.status.to_string()));
        }
        trace.rows.push(row);
        trace.status.push(out.status.clone());
        if k == steps {
            break;
        }

        let stacked = DVector::from_iterator(n + na, x.iter().chain(aux.iter()).copied());
        let ctrl: &dyn Controller = controller;
        let u = &out.u;
        let field = |tau: f64, z: &DVector<f64>| -> Result<DVector<f64>> {
            let xs = z.rows(0, n).into_owned();
            let az = z.rows(n, na).into_owned();
            let xd = eval_true_dynamics(sys, &xs, u, tau)?;
            let ad = ctrl.aux_derivative(tau, &xs, &az, u)?;
            Ok(DVector::from_iterator(n + na, xd.iter().chain(ad.iter()).copied()))
        };
        match rk4_step_with(field, t, &stacked, cfg.dt) {
            Ok(z) => {
                x = z.rows(0, n).into_owned();
                aux = z.rows(n, na).into_owned();
            }
            Err(e) => return Err(fail(e, trace)),
        }
    }
    Ok(trace)
}

/// Records the true uncertainty vector `Delta(x, u, t)` as `delta_0..delta_{n-1}`.
pub struct UncertaintyRecorder<'a> {
    pub sys: &'a TrueSystem,
}

impl Recorder for UncertaintyRecorder<'_> {
    fn columns(&self) -> Vec<String> {
        (0..self.sys.model.state_dim()).map(|i| format!("delta_{i}")).collect()
    }

    fn record(&mut self, s: &Sample<'_>, row: &mut Vec<f64>) -> Result<()> {
        let d = self.sys.uncertainty_at(s.x, &s.output.u, s.t)?;
        row.extend(d.iter());
        Ok(())
    }
}

/// Empirical bound estimates from sampled closed-loop runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    /// Largest finite-difference rate `|Delta(t_{k+1}) - Delta(t_k)| / dt`.
    pub delta_l: f64,
    /// Largest `|Delta|` seen.
    pub delta_b: f64,
    pub runs: usize,
    pub samples: usize,
}

/// Max rate and magnitude of `Delta` along one run (the vectors at each sample).
pub fn uncertainty_extremes(deltas: &[DVector<f64>], dt: f64) -> (f64, f64) {
    let mag = deltas.iter().map(|d| d.norm()).fold(0.0, f64::max);
    let rate = deltas
        .windows(2)
        .map(|w| (&w[1] - &w[0]).norm() / dt)
        .fold(0.0, f64::max);
    (rate, mag)
}

/// One sampled closed loop for bound probing.
pub struct ProbeCase {
    pub sys: TrueSystem,
    pub x0: DVector<f64>,
    pub controller: Box<dyn Controller>,
}

/// Simulate `runs` sampled closed loops and report the largest observed
/// uncertainty rate and magnitude.
///
/// Sampled suprema only bound the true ones from below; callers compare the
/// estimates against the declared `delta_l`, `delta_b`.
pub fn probe_uncertainty_bounds<F>(runs: usize, cfg: &IntegratorConfig, mut sample: F) -> Result<BoundEstimate>
where
    F: FnMut(usize) -> Result<ProbeCase>,
{
    let mut est = BoundEstimate { runs, ..Default::default() };
    for i in 0..runs {
        let mut case = sample(i)?;
        let n = case.sys.model.state_dim();
        let mut rec = UncertaintyRecorder { sys: &case.sys };
        let trace = simulate(&case.sys, case.controller.as_mut(), &case.x0, cfg, &mut [&mut rec])
            .map_err(|f| f.error)?;
        let start = trace.columns.len() - n;
        let deltas: Vec<DVector<f64>> = trace
            .rows
            .iter()
            .map(|r| DVector::from_column_slice(&r[start..]))
            .collect();
        let (rate, mag) = uncertainty_extremes(&deltas, cfg.dt);
        est.delta_l = est.delta_l.max(rate);
        est.delta_b = est.delta_b.max(mag);
        est.samples += deltas.len();
    }
    Ok(est)
}
