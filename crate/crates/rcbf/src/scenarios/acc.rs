//! Adaptive cruise control with a robust CLF-CBF-QP.
//!
//! State `x = (v_f, D)`: follower speed and gap to the lead car.
//! `v_f' = (-F_r(v_f) + u) / M`, `D' = v_l - v_f`, with
//! `F_r = f0 + f1 v + f2 v^2`. Safety: `h = D - tau_d v_f >= 0`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{as_arr, as_f64, check_range, entry, unknown, ParamEntry, ParamSchema, Provenance};
use crate::dynamics::{
    simulate, ControlAffineModel, ControlOutput, Controller, IntegratorConfig, Recorder, RunResult, Sample,
    SimulationFailure, StatusKind, StepStatus, TrueSystem, UncertaintySpec,
};
use crate::error::{Error, Result};
use crate::estimator::{self, error_bound, make_gain, output_bound, EstimatorGain};
use crate::filters::{
    clf_row, matching_matrix, method1_alt_row, method1_control, method1_row, method2_row, nominal_cbf_row,
    check_relative_degrees, BarrierFunction, ClassK, Method1Params, RdSample, RelativeDegreeReport,
};
use crate::qp::{solve_warm, AffineConstraint, QpProblem, QpStatus};

/// Column order of emitted ACC traces.
pub const ACC_COLUMNS: [&str; 14] = [
    "t",
    "v_f",
    "D",
    "u_applied",
    "u_tilde",
    "delta_c",
    "h",
    "h_V",
    "V_clf",
    "delta_true_1",
    "delta_hat_1",
    "err_norm",
    "err_bound",
    "out_bound",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccMode {
    /// Plain CBF on a plant without uncertainty.
    Nominal,
    /// Compensation `u = u_tilde - Q Delta_hat` with the `S(x)` row.
    Method1,
    /// Compensation with the error-bound row.
    Method1Alt,
    /// Estimate-robustified row, no compensation.
    Method2,
    /// Plain CBF on the uncertain plant.
    Unprotected,
}

impl AccMode {
    pub const ALL: [AccMode; 5] =
        [AccMode::Nominal, AccMode::Method1, AccMode::Method1Alt, AccMode::Method2, AccMode::Unprotected];

    pub fn as_str(self) -> &'static str {
        match self {
            AccMode::Nominal => "nominal",
            AccMode::Method1 => "method1",
            AccMode::Method1Alt => "method1_alt",
            AccMode::Method2 => "method2",
            AccMode::Unprotected => "unprotected",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ACC mode `{s}`")))
    }

    /// Modes that claim robustness to the uncertainty.
    pub fn is_robust(self) -> bool {
        matches!(self, AccMode::Method1 | AccMode::Method1Alt | AccMode::Method2)
    }

    fn compensates(self) -> bool {
        matches!(self, AccMode::Method1 | AccMode::Method1Alt)
    }
}

/// `Delta_1 = (A sin(2 pi f t + phase) + c_r F_r(v_f) + c_u u) / M`, `Delta_2 = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccUncertainty {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub drag_fraction: f64,
    pub gain_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccScenario {
    pub mass: f64,
    pub f0: f64,
    pub f1: f64,
    pub f2: f64,
    pub tau_d: f64,
    pub v_lead: f64,
    pub v_desired: f64,
    /// `(v_f, D)` at `t = 0`.
    pub x0: [f64; 2],
    pub uncertainty: AccUncertainty,
    pub draw_amplitude: [f64; 2],
    pub draw_frequency: [f64; 2],
    pub draw_drag_fraction: [f64; 2],
    pub draw_gain_fraction: [f64; 2],
    pub lambda: [f64; 2],
    pub mu_h: f64,
    pub sigma_v: f64,
    pub delta_l: f64,
    pub delta_b: f64,
    pub cbf_alpha: f64,
    pub clf_rate: f64,
    pub clf_penalty: f64,
    /// Proportional gain of the nominal speed controller [1/s].
    pub k_p: f64,
}

/// Shipped default parameter set.
pub fn acc_defaults() -> AccScenario {
    AccScenario {
        mass: 1650.0,
        f0: 0.1,
        f1: 5.0,
        f2: 0.25,
        tau_d: 1.2,
        v_lead: 12.0,
        v_desired: 11.95,
        x0: [18.0, 24.0],
        uncertainty: AccUncertainty {
            amplitude: 2.0,
            frequency: 1.0,
            phase: 0.0,
            drag_fraction: 0.2,
            gain_fraction: 0.5,
        },
        draw_amplitude: [0.0, 2.0],
        draw_frequency: [0.5, 1.0],
        draw_drag_fraction: [0.0, 0.2],
        draw_gain_fraction: [0.0, 0.5],
        lambda: [100.0, 100.0],
        mu_h: 1.0,
        sigma_v: 0.1,
        delta_l: 26.0,
        delta_b: 12.0,
        cbf_alpha: 1.0,
        clf_rate: 0.7,
        clf_penalty: 100.0,
        k_p: 0.3,
    }
}

impl AccScenario {
    pub fn rolling_resistance(&self, v: f64) -> f64 {
        self.f0 + self.f1 * v + self.f2 * v * v
    }

    pub fn h(&self, x: &DVector<f64>) -> f64 {
        x[1] - self.tau_d * x[0]
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("mass", self.mass), ("tau_d", self.tau_d)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(k, "must be positive"));
            }
        }
        for (k, v) in [
            ("cbf.alpha", self.cbf_alpha),
            ("clf.rate", self.clf_rate),
            ("clf.penalty", self.clf_penalty),
        ] {
            if !(v > 0.0) {
                return Err(Error::param(k, "must be positive"));
            }
        }
        if !(self.k_p >= 0.0) {
            return Err(Error::param("nominal.k_p", "must be >= 0"));
        }
        let h0 = self.h(&DVector::from_column_slice(&self.x0));
        if h0 < 0.0 {
            return Err(Error::param("x0", format!("initial state is unsafe: h(x0) = {h0}")));
        }
        check_range("uncertainty.draw.amplitude", self.draw_amplitude)?;
        check_range("uncertainty.draw.frequency", self.draw_frequency)?;
        check_range("uncertainty.draw.drag_fraction", self.draw_drag_fraction)?;
        check_range("uncertainty.draw.gain_fraction", self.draw_gain_fraction)?;
        self.gain()?;
        Method1Params::new(self.mu_h, self.sigma_v, &self.gain()?)?;
        Ok(())
    }

    pub fn gain(&self) -> Result<EstimatorGain> {
        make_gain(&self.lambda, self.delta_l)
    }

    pub fn model(&self) -> ControlAffineModel {
        let sc = self.clone();
        let mass = self.mass;
        ControlAffineModel::new(
            2,
            1,
            Arc::new(move |x: &DVector<f64>| {
                DVector::from_vec(vec![-sc.rolling_resistance(x[0]) / sc.mass, sc.v_lead - x[0]])
            }),
            Arc::new(move |_x: &DVector<f64>| DMatrix::from_column_slice(2, 1, &[1.0 / mass, 0.0])),
        )
        .expect("fixed dimensions")
    }

    pub fn barrier(&self) -> BarrierFunction {
        let tau = self.tau_d;
        BarrierFunction {
            h: Arc::new(move |x: &DVector<f64>| x[1] - tau * x[0]),
            grad: Arc::new(move |_x: &DVector<f64>| DVector::from_vec(vec![-tau, 1.0])),
            alpha: ClassK::Linear(self.cbf_alpha),
        }
    }

    pub fn clf(&self, x: &DVector<f64>) -> f64 {
        let e = x[0] - self.v_desired;
        e * e
    }

    pub fn clf_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![2.0 * (x[0] - self.v_desired), 0.0])
    }

    /// Drag feed-forward plus proportional speed feedback.
    pub fn nominal_input(&self, x: &DVector<f64>) -> f64 {
        self.rolling_resistance(x[0]) - self.mass * self.k_p * (x[0] - self.v_desired)
    }

    pub fn uncertainty_spec(&self, unc: Option<&AccUncertainty>) -> UncertaintySpec {
        let mut spec = UncertaintySpec::none(self.delta_l, self.delta_b);
        let Some(u) = unc.copied() else { return spec };
        let sc = self.clone();
        let mass = self.mass;
        spec.delta_f = Some(Arc::new(move |x: &DVector<f64>| {
            DVector::from_vec(vec![u.drag_fraction * sc.rolling_resistance(x[0]) / sc.mass, 0.0])
        }));
        spec.delta_g = Some(Arc::new(move |_x: &DVector<f64>| {
            DMatrix::from_column_slice(2, 1, &[u.gain_fraction / mass, 0.0])
        }));
        spec.time_term = Some(Arc::new(move |t: f64| {
            DVector::from_vec(vec![u.amplitude * (2.0 * PI * u.frequency * t + u.phase).sin() / mass, 0.0])
        }));
        spec
    }

    pub fn true_system(&self, unc: Option<&AccUncertainty>) -> TrueSystem {
        TrueSystem::new(self.model(), self.uncertainty_spec(unc)).expect("bounds validated")
    }

    /// Seeded uncertainty draw from the configured ranges.
    pub fn draw(&self, seed: u64) -> AccUncertainty {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) };
        AccUncertainty {
            amplitude: pick(self.draw_amplitude),
            frequency: pick(self.draw_frequency),
            phase: pick([0.0, 2.0 * PI]),
            drag_fraction: pick(self.draw_drag_fraction),
            gain_fraction: pick(self.draw_gain_fraction),
        }
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x0)
    }

    /// Relative degrees of the barrier under `unc`, sampled around `x0`.
    pub fn relative_degree_report(&self, unc: &AccUncertainty) -> Result<RelativeDegreeReport> {
        let sys = self.true_system(Some(unc));
        let samples: Vec<RdSample> = [(0.0, 0.0, 0.0), (1.5, -2.0, 0.37), (-2.0, 3.0, 1.21)]
            .into_iter()
            .map(|(dv, dd, t)| {
                let x = DVector::from_vec(vec![self.x0[0] + dv, self.x0[1] + dd]);
                let u = DVector::from_element(1, self.nominal_input(&x));
                RdSample { x, u, t }
            })
            .collect();
        check_relative_degrees(&sys, &self.barrier(), &samples, 3)
    }
}

/// Robust modes need the uncertainty to enter at the input's relative degree.
fn require_matched(rep: &RelativeDegreeReport) -> Result<()> {
    if rep.matched {
        return Ok(());
    }
    Err(Error::MatchingFailure(format!(
        "input relative degree {:?} differs from disturbance relative degree {:?}",
        rep.ird, rep.drd
    )))
}

impl ParamSchema for AccScenario {
    fn params(&self) -> Vec<ParamEntry> {
        use Provenance::*;
        let u = &self.uncertainty;
        vec![
            entry("vehicle.mass", self.mass, ExternalConvention),
            entry("vehicle.f0", self.f0, ExternalConvention),
            entry("vehicle.f1", self.f1, ExternalConvention),
            entry("vehicle.f2", self.f2, ExternalConvention),
            entry("vehicle.tau_d", self.tau_d, Tuned),
            entry("vehicle.v_lead", self.v_lead, Paper),
            entry("vehicle.v_desired", self.v_desired, Tuned),
            entry("x0", self.x0, Paper),
            entry("uncertainty.amplitude", u.amplitude, Paper),
            entry("uncertainty.frequency", u.frequency, Paper),
            entry("uncertainty.phase", u.phase, Paper),
            entry("uncertainty.drag_fraction", u.drag_fraction, Paper),
            entry("uncertainty.gain_fraction", u.gain_fraction, Paper),
            entry("uncertainty.draw.amplitude", self.draw_amplitude, Tuned),
            entry("uncertainty.draw.frequency", self.draw_frequency, Tuned),
            entry("uncertainty.draw.drag_fraction", self.draw_drag_fraction, Tuned),
            entry("uncertainty.draw.gain_fraction", self.draw_gain_fraction, Tuned),
            entry("estimator.lambda", self.lambda, Paper),
            entry("estimator.delta_l", self.delta_l, Paper),
            entry("estimator.delta_b", self.delta_b, Paper),
            entry("method1.mu_h", self.mu_h, Paper),
            entry("method1.sigma_v", self.sigma_v, Paper),
            entry("cbf.alpha", self.cbf_alpha, Tuned),
            entry("clf.rate", self.clf_rate, Paper),
            entry("clf.penalty", self.clf_penalty, Paper),
            entry("nominal.k_p", self.k_p, Tuned),
        ]
    }

    fn set_param(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "vehicle.mass" => self.mass = as_f64(key, v)?,
            "vehicle.f0" => self.f0 = as_f64(key, v)?,
            "vehicle.f1" => self.f1 = as_f64(key, v)?,
            "vehicle.f2" => self.f2 = as_f64(key, v)?,
            "vehicle.tau_d" => self.tau_d = as_f64(key, v)?,
            "vehicle.v_lead" => self.v_lead = as_f64(key, v)?,
            "vehicle.v_desired" => self.v_desired = as_f64(key, v)?,
            "x0" => self.x0 = as_arr(key, v)?,
            "uncertainty.amplitude" => self.uncertainty.amplitude = as_f64(key, v)?,
            "uncertainty.frequency" => self.uncertainty.frequency = as_f64(key, v)?,
            "uncertainty.phase" => self.uncertainty.phase = as_f64(key, v)?,
            "uncertainty.drag_fraction" => self.uncertainty.drag_fraction = as_f64(key, v)?,
            "uncertainty.gain_fraction" => self.uncertainty.gain_fraction = as_f64(key, v)?,
            "uncertainty.draw.amplitude" => self.draw_amplitude = as_arr(key, v)?,
            "uncertainty.draw.frequency" => self.draw_frequency = as_arr(key, v)?,
            "uncertainty.draw.drag_fraction" => self.draw_drag_fraction = as_arr(key, v)?,
            "uncertainty.draw.gain_fraction" => self.draw_gain_fraction = as_arr(key, v)?,
            "estimator.lambda" => self.lambda = as_arr(key, v)?,
            "estimator.delta_l" => self.delta_l = as_f64(key, v)?,
            "estimator.delta_b" => self.delta_b = as_f64(key, v)?,
            "method1.mu_h" => self.mu_h = as_f64(key, v)?,
            "method1.sigma_v" => self.sigma_v = as_f64(key, v)?,
            "cbf.alpha" => self.cbf_alpha = as_f64(key, v)?,
            "clf.rate" => self.clf_rate = as_f64(key, v)?,
            "clf.penalty" => self.clf_penalty = as_f64(key, v)?,
            "nominal.k_p" => self.k_p = as_f64(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }
}

/// Robust CLF-CBF-QP controller with the estimator as auxiliary state.
pub struct AccController {
    mode: AccMode,
    sc: AccScenario,
    model: ControlAffineModel,
    barrier: BarrierFunction,
    gain: EstimatorGain,
    m1: Method1Params,
    q: DMatrix<f64>,
    last_u: f64,
    last_u_tilde: f64,
    hint: Vec<usize>,
    /// Largest KKT residual over all solves so far.
    pub max_kkt: f64,
}

impl AccController {
    pub fn new(sc: &AccScenario, mode: AccMode) -> Result<Self> {
        sc.validate()?;
        let model = sc.model();
        let gain = sc.gain()?;
        let m1 = Method1Params::new(sc.mu_h, sc.sigma_v, &gain)?;
        let q = matching_matrix(&model, &sc.x0())?;
        let u0 = sc.nominal_input(&sc.x0());
        Ok(Self {
            mode,
            sc: sc.clone(),
            model,
            barrier: sc.barrier(),
            gain,
            m1,
            q,
            last_u: u0,
            last_u_tilde: u0,
            hint: Vec::new(),
            max_kkt: 0.0,
        })
    }

    fn barrier_row(&self, x: &DVector<f64>, d_hat: &DVector<f64>, t: f64) -> Result<AffineConstraint> {
        let sc = &self.sc;
        match self.mode {
            AccMode::Nominal | AccMode::Unprotected => nominal_cbf_row(&self.model, &self.barrier, x),
            AccMode::Method1 => method1_row(&self.model, &self.barrier, &self.m1, &self.gain, sc.delta_l, x),
            AccMode::Method1Alt => {
                method1_alt_row(&self.model, &self.barrier, &self.gain, sc.delta_l, sc.delta_b, x, t)
            }
            AccMode::Method2 => {
                method2_row(&self.model, &self.barrier, d_hat, &self.gain, sc.delta_l, sc.delta_b, x, t)
            }
        }
    }
}

impl Controller for AccController {
    fn aux_dim(&self) -> usize {
        2
    }

    fn aux_init(&self, x0: &DVector<f64>) -> DVector<f64> {
        estimator::init(&self.gain, x0).expect("dimension fixed").xi
    }

    fn aux_derivative(&self, _t: f64, x: &DVector<f64>, aux: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        estimator::derivative(&self.model, &self.gain, x, aux, u)
    }

    fn diagnostic_columns(&self) -> Vec<String> {
        ["u_applied", "u_tilde", "delta_c", "h", "V_clf", "delta_hat_1", "err_bound", "out_bound"]
            .map(String::from)
            .to_vec()
    }

    fn control(&mut self, t: f64, x: &DVector<f64>, aux: &DVector<f64>) -> Result<ControlOutput> {
        let sc = &self.sc;
        let d_hat = estimator::output(&self.gain, aux, x)?;
        let clf = clf_row(&|z| sc.clf(z), &|z| sc.clf_grad(z), &self.model, sc.clf_rate, x)?;
        let bar = self.barrier_row(x, &d_hat, t)?;
        let bar = AffineConstraint::new(DVector::from_vec(vec![bar.a[0], 0.0]), bar.b, bar.label);
        let qp = QpProblem::new(
            DVector::from_vec(vec![1.0 / (sc.mass * sc.mass), sc.clf_penalty]),
            DVector::from_vec(vec![sc.nominal_input(x), 0.0]),
        )
        .with_constraint(clf)
        .with_constraint(bar);
        let sol = solve_warm(&qp, &self.hint)?;
        let (u_tilde, delta_c, status) = match sol.status {
            QpStatus::Optimal => {
                self.max_kkt = self.max_kkt.max(sol.kkt_residual);
                self.hint = sol.active_set.clone();
                let active = sol.active_set.iter().map(|&j| qp.constraints[j].label.clone()).collect();
                (sol.z[0], sol.z[1], StepStatus { kind: StatusKind::Optimal, active })
            }
            QpStatus::Infeasible => {
                (self.last_u_tilde, 0.0, StepStatus { kind: StatusKind::InfeasibleHold, active: Vec::new() })
            }
        };
        let u = if status.kind == StatusKind::InfeasibleHold {
            self.last_u
        } else if self.mode.compensates() {
            method1_control(&DVector::from_vec(vec![u_tilde]), &self.q, &d_hat)?[0]
        } else {
            u_tilde
        };
        self.last_u = u;
        self.last_u_tilde = u_tilde;
        let diagnostics = vec![
            u,
            u_tilde,
            delta_c,
            sc.h(x),
            sc.clf(x),
            d_hat[0],
            error_bound(&self.gain, sc.delta_l, sc.delta_b, t)?,
            output_bound(&self.gain, sc.delta_b, t)?,
        ];
        Ok(ControlOutput { u: DVector::from_vec(vec![u]), status, diagnostics })
    }
}

/// Records plant-side quantities the controller must not see.
struct AccRecorder<'a> {
    sys: &'a TrueSystem,
    gain: EstimatorGain,
    sigma_v: f64,
    tau_d: f64,
}

impl Recorder for AccRecorder<'_> {
    fn columns(&self) -> Vec<String> {
        ["v_f", "D", "h_V", "delta_true_1", "err_norm"].map(String::from).to_vec()
    }

    fn record(&mut self, s: &Sample<'_>, row: &mut Vec<f64>) -> Result<()> {
        let d = self.sys.uncertainty_at(s.x, &s.output.u, s.t)?;
        let d_hat = estimator::output(&self.gain, s.aux, s.x)?;
        let e = (&d - &d_hat).norm();
        let h = s.x[1] - self.tau_d * s.x[0];
        row.extend([s.x[0], s.x[1], h - self.sigma_v * 0.5 * e * e, d[0], e]);
        Ok(())
    }
}

fn unc_is_zero(u: &AccUncertainty) -> bool {
    u.amplitude == 0.0 && u.drag_fraction == 0.0 && u.gain_fraction == 0.0
}

/// Run with the scenario's own uncertainty realisation.
pub fn run_acc(sc: &AccScenario, mode: AccMode, cfg: &IntegratorConfig) -> RunResult {
    run_acc_with(sc, mode, cfg, &sc.uncertainty)
}

/// Run with a given uncertainty realisation (ignored in nominal mode).
pub fn run_acc_with(sc: &AccScenario, mode: AccMode, cfg: &IntegratorConfig, unc: &AccUncertainty) -> RunResult {
    let mut ctrl = AccController::new(sc, mode).map_err(SimulationFailure::before_start)?;
    if mode.is_robust() && !unc_is_zero(unc) {
        sc.relative_degree_report(unc).and_then(|r| require_matched(&r)).map_err(SimulationFailure::before_start)?;
    }
    let sys = sc.true_system((mode != AccMode::Nominal).then_some(unc));
    let mut rec = AccRecorder { sys: &sys, gain: ctrl.gain.clone(), sigma_v: sc.sigma_v, tau_d: sc.tau_d };
    let tag = |mut tr: crate::dynamics::SimulationTrace, kkt: f64| {
        tr.meta.scenario = "acc".into();
        tr.meta.mode = mode.as_str().into();
        tr.meta.max_kkt_residual = kkt;
        tr
    };
    let res = simulate(&sys, &mut ctrl, &sc.x0(), cfg, &mut [&mut rec]);
    let kkt = ctrl.max_kkt;
    match res {
        Ok(tr) => tag(tr, kkt).select(&ACC_COLUMNS).map_err(SimulationFailure::before_start),
        Err(mut f) => {
            f.partial = tag(f.partial, kkt);
            Err(f)
        }
    }
}
