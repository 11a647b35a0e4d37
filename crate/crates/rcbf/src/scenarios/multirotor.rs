//! Multirotor set-point tracking with high-order barrier obstacle avoidance.
//!
//! State (13): position error `e_p`, velocity, acceleration, yaw, and the
//! physical thrust-per-mass `T`, roll and pitch that define the input map.
//! Input `u = (T', omega)` (thrust rate and body rates). The position chain
//! is a triple integrator in jerk: `p''' = B_u(T, phi, theta, psi) u`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{as_arr, as_f64, as_vec, check_range, entry, unknown, ParamEntry, ParamSchema, Provenance};
use crate::dynamics::{
    simulate, ControlAffineModel, ControlOutput, Controller, IntegratorConfig, Recorder, RunResult, Sample,
    SimulationFailure, SimulationTrace, StatusKind, StepStatus, TrueSystem, UncertaintySpec,
};
use crate::error::{Error, Result};
use crate::estimator::{self, error_bound, make_gain, output_bound, EstimatorGain};
use crate::filters::{
    check_relative_degrees, hocbf_method2_row, hocbf_row, BarrierFunction, ClassK, HocbfCascade, LieLevel, RdSample,
    RelativeDegreeReport,
};
use crate::qp::{solve_warm, QpProblem, QpStatus};

pub const GRAVITY: f64 = 9.81;
pub const STATE_DIM: usize = 13;
pub const INPUT_DIM: usize = 4;

/// Indices into the state vector.
pub mod idx {
    pub const POS: usize = 0;
    pub const VEL: usize = 3;
    pub const ACC: usize = 6;
    pub const YAW: usize = 9;
    pub const THRUST: usize = 10;
    pub const ROLL: usize = 11;
    pub const PITCH: usize = 12;
}

pub const STATE_NAMES: [&str; STATE_DIM] = [
    "e_px", "e_py", "e_pz", "v_x", "v_y", "v_z", "a_x", "a_y", "a_z", "e_psi", "thrust", "roll", "pitch",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultirotorMode {
    /// Plain high-order barrier on a plant without uncertainty.
    Nominal,
    /// Estimate-robustified high-order barrier on the uncertain plant.
    Method2Hocbf,
    /// Plain high-order barrier on the uncertain plant.
    Unprotected,
}

impl MultirotorMode {
    pub const ALL: [MultirotorMode; 3] =
        [MultirotorMode::Nominal, MultirotorMode::Method2Hocbf, MultirotorMode::Unprotected];

    pub fn as_str(self) -> &'static str {
        match self {
            MultirotorMode::Nominal => "nominal",
            MultirotorMode::Method2Hocbf => "method2_hocbf",
            MultirotorMode::Unprotected => "unprotected",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown multirotor mode `{s}`")))
    }

    pub fn is_robust(self) -> bool {
        self == MultirotorMode::Method2Hocbf
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Drag-like jerk `c_d tanh(p')` plus fractional input reductions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultirotorUncertainty {
    pub c_d: f64,
    pub delta_u: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultirotorScenario {
    pub goal: [f64; 3],
    /// Initial `(e_p, e_p', e_p'', e_psi)`.
    pub eta0: [f64; 10],
    pub obstacles: Vec<Obstacle>,
    pub r0: f64,
    pub uncertainty: MultirotorUncertainty,
    pub draw_c_d: [f64; 2],
    pub draw_delta_u: [f64; 2],
    /// Linear gains `a_1, a_2, a_3` of the barrier cascade.
    pub cascade_gains: [f64; 3],
    /// Closed-loop poles (as positive magnitudes) of each position axis.
    pub tracker_poles: [f64; 3],
    pub yaw_gain: f64,
    /// Diagonal entry of the estimator gain.
    pub lambda: f64,
    pub delta_l: f64,
    pub delta_b: f64,
}

pub fn multirotor_defaults() -> MultirotorScenario {
    MultirotorScenario {
        goal: [5.0, 0.0, 0.0],
        eta0: [-5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        obstacles: vec![Obstacle { center: [2.5, 0.0, 0.0], radius: 0.6 }],
        r0: 0.2,
        uncertainty: MultirotorUncertainty { c_d: 0.2, delta_u: [0.0; 4] },
        draw_c_d: [0.05, 0.2],
        draw_delta_u: [-0.02, 0.0],
        cascade_gains: [0.5, 0.5, 0.5],
        tracker_poles: [2.0, 2.5, 3.0],
        yaw_gain: 2.0,
        lambda: 20.0,
        delta_l: 0.1,
        delta_b: 0.1,
    }
}

/// `R = Rz(psi) Ry(theta) Rx(phi)`.
pub fn rotation(phi: f64, theta: f64, psi: f64) -> Matrix3<f64> {
    let (sf, cf) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = psi.sin_cos();
    let rz = Matrix3::new(cp, -sp, 0.0, sp, cp, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(ct, 0.0, st, 0.0, 1.0, 0.0, -st, 0.0, ct);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cf, -sf, 0.0, sf, cf);
    rz * ry * rx
}

/// Body rates to Euler-angle rates.
pub fn euler_rate_map(phi: f64, theta: f64) -> Matrix3<f64> {
    let (sf, cf) = phi.sin_cos();
    let (ct, tt) = (theta.cos(), theta.tan());
    Matrix3::new(1.0, sf * tt, cf * tt, 0.0, cf, -sf, 0.0, sf / ct, cf / ct)
}

fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Map from `u` to `(p''', psi')`.
pub fn input_map(x: &DVector<f64>) -> Matrix4<f64> {
    let (t, phi, th, psi) = (x[idx::THRUST], x[idx::ROLL], x[idx::PITCH], x[idx::YAW]);
    let r = rotation(phi, th, psi);
    let w = euler_rate_map(phi, th);
    let e3 = Vector3::z();
    let re3 = r * e3;
    let rw = -t * r * hat(&e3);
    let mut b = Matrix4::zeros();
    b.fixed_view_mut::<3, 1>(0, 0).copy_from(&re3);
    b.fixed_view_mut::<3, 3>(0, 1).copy_from(&rw);
    b.fixed_view_mut::<1, 3>(3, 1).copy_from(&w.row(2));
    b
}

fn g_hat(x: &DVector<f64>) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(STATE_DIM, INPUT_DIM);
    let b = input_map(x);
    g.view_mut((idx::ACC, 0), (4, 4)).copy_from(&b);
    g[(idx::THRUST, 0)] = 1.0;
    let w = euler_rate_map(x[idx::ROLL], x[idx::PITCH]);
    for j in 0..3 {
        g[(idx::ROLL, j + 1)] = w[(0, j)];
        g[(idx::PITCH, j + 1)] = w[(1, j)];
    }
    g
}

fn f_hat(x: &DVector<f64>) -> DVector<f64> {
    let mut f = DVector::zeros(STATE_DIM);
    for i in 0..3 {
        f[idx::POS + i] = x[idx::VEL + i];
        f[idx::VEL + i] = x[idx::ACC + i];
    }
    f
}

/// Thrust, roll and pitch that produce acceleration `a` at yaw `psi`.
pub fn attitude_from_accel(a: &Vector3<f64>, psi: f64) -> Result<(f64, f64, f64)> {
    let thrust_vec = a + Vector3::new(0.0, 0.0, GRAVITY);
    let t = thrust_vec.norm();
    if t < 1e-6 {
        return Err(Error::param("eta0", "acceleration leaves no thrust"));
    }
    let (sp, cp) = psi.sin_cos();
    let b = thrust_vec / t;
    // Undo the yaw rotation: Ry(theta) Rx(phi) e3 = (cos phi sin theta, -sin phi, cos phi cos theta).
    let bx = cp * b.x + sp * b.y;
    let by = -sp * b.x + cp * b.y;
    let phi = (-by).clamp(-1.0, 1.0).asin();
    let theta = bx.atan2(b.z);
    Ok((t, phi, theta))
}

struct ObstacleChain {
    c: Vector3<f64>,
    rad: f64,
}

impl ObstacleChain {
    fn pva(x: &DVector<f64>) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        (
            Vector3::new(x[0], x[1], x[2]),
            Vector3::new(x[3], x[4], x[5]),
            Vector3::new(x[6], x[7], x[8]),
        )
    }

    fn geom(&self, x: &DVector<f64>) -> (Vector3<f64>, f64, Vector3<f64>, Vector3<f64>) {
        let (p, v, a) = Self::pva(x);
        let d = p - self.c;
        let rho = d.norm();
        (d / rho, rho, v, a)
    }

    fn l0(&self, x: &DVector<f64>) -> f64 {
        self.geom(x).1 - self.rad
    }

    fn l1(&self, x: &DVector<f64>) -> f64 {
        let (n, _, v, _) = self.geom(x);
        n.dot(&v)
    }

    fn l2(&self, x: &DVector<f64>) -> f64 {
        let (n, rho, v, a) = self.geom(x);
        let nv = n.dot(&v);
        n.dot(&a) + (v.norm_squared() - nv * nv) / rho
    }

    fn grad0(&self, x: &DVector<f64>) -> DVector<f64> {
        let (n, ..) = self.geom(x);
        let mut g = DVector::zeros(STATE_DIM);
        g.rows_mut(idx::POS, 3).copy_from(&n);
        g
    }

    fn grad1(&self, x: &DVector<f64>) -> DVector<f64> {
        let (n, rho, v, _) = self.geom(x);
        let pn = Matrix3::identity() - n * n.transpose();
        let mut g = DVector::zeros(STATE_DIM);
        g.rows_mut(idx::POS, 3).copy_from(&(pn * v / rho));
        g.rows_mut(idx::VEL, 3).copy_from(&n);
        g
    }

    fn grad2(&self, x: &DVector<f64>) -> DVector<f64> {
        let (n, rho, v, a) = self.geom(x);
        let pn = Matrix3::identity() - n * n.transpose();
        let nv = n.dot(&v);
        let tang = v.norm_squared() - nv * nv;
        let dp = pn * a / rho - pn * v * (2.0 * nv / (rho * rho)) - n * (tang / (rho * rho));
        let dv = (v - n * nv) * (2.0 / rho);
        let mut g = DVector::zeros(STATE_DIM);
        g.rows_mut(idx::POS, 3).copy_from(&dp);
        g.rows_mut(idx::VEL, 3).copy_from(&dv);
        g.rows_mut(idx::ACC, 3).copy_from(&n);
        g
    }
}

impl MultirotorScenario {
    fn chain(&self, i: usize) -> Arc<ObstacleChain> {
        let o = &self.obstacles[i];
        let c = Vector3::from(o.center) - Vector3::from(self.goal);
        Arc::new(ObstacleChain { c, rad: o.radius + self.r0 })
    }

    /// `h_i = |p - p_obs| - r_i - r_0` in error coordinates.
    pub fn h(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.chain(i).l0(x)
    }

    pub fn barrier(&self, i: usize) -> BarrierFunction {
        let c0 = self.chain(i);
        let c1 = c0.clone();
        BarrierFunction {
            h: Arc::new(move |x: &DVector<f64>| c0.l0(x)),
            grad: Arc::new(move |x: &DVector<f64>| c1.grad0(x)),
            alpha: ClassK::Linear(self.cascade_gains[0]),
        }
    }

    pub fn cascade(&self, i: usize) -> Result<HocbfCascade> {
        let ch = self.chain(i);
        let lvl = |v: fn(&ObstacleChain, &DVector<f64>) -> f64, g: fn(&ObstacleChain, &DVector<f64>) -> DVector<f64>| {
            let (a, b) = (ch.clone(), ch.clone());
            LieLevel { value: Arc::new(move |x: &DVector<f64>| v(&a, x)), grad: Arc::new(move |x: &DVector<f64>| g(&b, x)) }
        };
        let levels = vec![
            lvl(ObstacleChain::l0, ObstacleChain::grad0),
            lvl(ObstacleChain::l1, ObstacleChain::grad1),
            lvl(ObstacleChain::l2, ObstacleChain::grad2),
        ];
        let mut c = HocbfCascade::new(levels, self.cascade_gains.to_vec())?;
        if self.obstacles.len() > 1 {
            c.tag = Some(format!("obs{i}"));
        }
        Ok(c)
    }

    pub fn model(&self) -> ControlAffineModel {
        ControlAffineModel::new(STATE_DIM, INPUT_DIM, Arc::new(f_hat), Arc::new(g_hat)).expect("fixed dimensions")
    }

    pub fn x0(&self) -> Result<DVector<f64>> {
        let a = Vector3::new(self.eta0[6], self.eta0[7], self.eta0[8]);
        let (t, phi, theta) = attitude_from_accel(&a, self.eta0[9])?;
        let mut x = DVector::zeros(STATE_DIM);
        x.rows_mut(0, 10).copy_from_slice(&self.eta0);
        x[idx::THRUST] = t;
        x[idx::ROLL] = phi;
        x[idx::PITCH] = theta;
        Ok(x)
    }

    /// Per-axis gains `(k0, k1, k2)` of `p''' = -(k0 e + k1 e' + k2 e'')`.
    pub fn tracker_gains(&self) -> [f64; 3] {
        let [p1, p2, p3] = self.tracker_poles;
        [p1 * p2 * p3, p1 * p2 + p1 * p3 + p2 * p3, p1 + p2 + p3]
    }

    pub fn gain(&self) -> Result<EstimatorGain> {
        make_gain(&[self.lambda; STATE_DIM], self.delta_l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.obstacles.is_empty() {
            return Err(Error::param("obstacles", "at least one obstacle is required"));
        }
        for o in &self.obstacles {
            if !(o.radius > 0.0) {
                return Err(Error::param("obstacles", "radius must be positive"));
            }
        }
        if !(self.r0 >= 0.0) {
            return Err(Error::param("r0", "must be >= 0"));
        }
        for (k, v) in [
            ("cascade.gains", self.cascade_gains.as_slice()),
            ("tracker.poles", self.tracker_poles.as_slice()),
        ] {
            if v.iter().any(|g| !(*g > 0.0)) {
                return Err(Error::param(k, "entries must be positive"));
            }
        }
        if !(self.yaw_gain > 0.0) {
            return Err(Error::param("tracker.yaw_gain", "must be positive"));
        }
        check_delta_u("uncertainty.delta_u", &self.uncertainty.delta_u)?;
        check_range("uncertainty.draw.c_d", self.draw_c_d)?;
        check_range("uncertainty.draw.delta_u", self.draw_delta_u)?;
        if !(self.draw_delta_u[0] > -1.0 && self.draw_delta_u[1] <= 0.0) {
            return Err(Error::param("uncertainty.draw.delta_u", "must lie in (-1, 0]"));
        }
        self.gain()?;
        let x0 = self.x0()?;
        for i in 0..self.obstacles.len() {
            let h = self.h(i, &x0);
            if !(h >= 0.0) {
                return Err(Error::param("eta0", format!("start is inside obstacle {i}: h = {h}")));
            }
        }
        input_inverse(&x0, 0.0)?;
        Ok(())
    }

    pub fn uncertainty_spec(&self, unc: Option<&MultirotorUncertainty>) -> UncertaintySpec {
        let mut spec = UncertaintySpec::none(self.delta_l, self.delta_b);
        let Some(u) = unc.copied() else { return spec };
        spec.delta_f = Some(Arc::new(move |x: &DVector<f64>| {
            let mut d = DVector::zeros(STATE_DIM);
            for i in 0..3 {
                d[idx::ACC + i] = u.c_d * x[idx::VEL + i].tanh();
            }
            d
        }));
        spec.delta_g = Some(Arc::new(move |x: &DVector<f64>| {
            g_hat(x) * DMatrix::from_diagonal(&DVector::from_column_slice(&u.delta_u))
        }));
        spec
    }

    pub fn true_system(&self, unc: Option<&MultirotorUncertainty>) -> TrueSystem {
        TrueSystem::new(self.model(), self.uncertainty_spec(unc)).expect("bounds validated")
    }

    pub fn draw(&self, seed: u64) -> MultirotorUncertainty {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) };
        let c_d = pick(self.draw_c_d);
        let delta_u = [(); 4].map(|_| pick(self.draw_delta_u));
        MultirotorUncertainty { c_d, delta_u }
    }

    /// Relative degrees of obstacle `i` under `unc`, sampled at moving states near `x0`.
    pub fn relative_degree_report(&self, i: usize, unc: &MultirotorUncertainty) -> Result<RelativeDegreeReport> {
        let sys = self.true_system(Some(unc));
        let x0 = self.x0()?;
        let offsets = [
            [0.3, 0.2, -0.1, 0.8, -0.5, 0.3, 0.2, 0.1, -0.3, 0.05],
            [-0.4, 0.1, 0.2, 1.2, 0.6, -0.2, -0.1, 0.4, 0.2, -0.1],
        ];
        let mut samples = Vec::new();
        for (k, off) in offsets.iter().enumerate() {
            let a = Vector3::new(off[6], off[7], off[8]);
            let (t, phi, th) = attitude_from_accel(&a, off[9])?;
            let mut x = x0.clone();
            for j in 0..10 {
                x[j] += off[j];
            }
            x[idx::THRUST] = t;
            x[idx::ROLL] = phi;
            x[idx::PITCH] = th;
            let u = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.05]);
            samples.push(RdSample { x, u, t: 0.1 * k as f64 });
        }
        check_relative_degrees(&sys, &self.barrier(i), &samples, 4)
    }

    pub fn column_names(&self) -> Vec<String> {
        let no = self.obstacles.len();
        let mut c: Vec<String> = vec!["t".into()];
        c.extend(STATE_NAMES.iter().map(|s| s.to_string()));
        c.extend((1..=4).map(|i| format!("u_{i}")));
        c.extend((1..=4).map(|i| format!("u_nom_{i}")));
        c.extend((0..no).map(|i| format!("h_{i}")));
        c.extend((0..no).map(|i| format!("h_e_{i}")));
        c.extend(["delta_true_norm", "delta_hat_norm", "err_norm", "err_bound", "out_bound"].map(String::from));
        c
    }
}

fn check_delta_u(key: &str, d: &[f64]) -> Result<()> {
    if d.iter().any(|v| !(*v > -1.0 && *v <= 0.0)) {
        return Err(Error::param(key, "input reductions must lie in (-1, 0]"));
    }
    Ok(())
}

/// `B_u^{-1}`, or a scenario fault when the attitude leaves the chart.
fn input_inverse(x: &DVector<f64>, t: f64) -> Result<Matrix4<f64>> {
    let fault = |why: &str| Error::ScenarioFault { t, reason: why.to_string() };
    if x[idx::THRUST].abs() < 1e-3 {
        return Err(fault("thrust near zero"));
    }
    if x[idx::PITCH].cos().abs() < 1e-3 {
        return Err(fault("pitch near +-pi/2"));
    }
    input_map(x).try_inverse().ok_or_else(|| fault("input map is singular"))
}

impl ParamSchema for MultirotorScenario {
    fn params(&self) -> Vec<ParamEntry> {
        use Provenance::*;
        let centers: Vec<[f64; 3]> = self.obstacles.iter().map(|o| o.center).collect();
        let radii: Vec<f64> = self.obstacles.iter().map(|o| o.radius).collect();
        vec![
            entry("goal", self.goal, Tuned),
            entry("eta0", self.eta0, Tuned),
            entry("obstacles.centers", centers, Tuned),
            entry("obstacles.radii", radii, Tuned),
            entry("r0", self.r0, Tuned),
            entry("uncertainty.c_d", self.uncertainty.c_d, Tuned),
            entry("uncertainty.delta_u", self.uncertainty.delta_u, Tuned),
            entry("uncertainty.draw.c_d", self.draw_c_d, Tuned),
            entry("uncertainty.draw.delta_u", self.draw_delta_u, Tuned),
            entry("cascade.gains", self.cascade_gains, Tuned),
            entry("tracker.poles", self.tracker_poles, Paper),
            entry("tracker.yaw_gain", self.yaw_gain, Tuned),
            entry("estimator.lambda", self.lambda, Tuned),
            entry("estimator.delta_l", self.delta_l, Paper),
            entry("estimator.delta_b", self.delta_b, Paper),
        ]
    }

    fn set_param(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "goal" => self.goal = as_arr(key, v)?,
            "eta0" => self.eta0 = as_arr(key, v)?,
            "obstacles.centers" => {
                let arr = v.as_array().ok_or_else(|| Error::param(key, "expected an array of [x, y, z]"))?;
                let centers = arr.iter().map(|c| as_arr::<3>(key, c)).collect::<Result<Vec<_>>>()?;
                let mut obs = Vec::with_capacity(centers.len());
                for (i, c) in centers.into_iter().enumerate() {
                    let radius = self.obstacles.get(i).or(self.obstacles.last()).map_or(0.5, |o| o.radius);
                    obs.push(Obstacle { center: c, radius });
                }
                self.obstacles = obs;
            }
            "obstacles.radii" => {
                let r = as_vec(key, v, Some(self.obstacles.len()))?;
                for (o, r) in self.obstacles.iter_mut().zip(r) {
                    o.radius = r;
                }
            }
            "r0" => self.r0 = as_f64(key, v)?,
            "uncertainty.c_d" => self.uncertainty.c_d = as_f64(key, v)?,
            "uncertainty.delta_u" => self.uncertainty.delta_u = as_arr(key, v)?,
            "uncertainty.draw.c_d" => self.draw_c_d = as_arr(key, v)?,
            "uncertainty.draw.delta_u" => self.draw_delta_u = as_arr(key, v)?,
            "cascade.gains" => self.cascade_gains = as_arr(key, v)?,
            "tracker.poles" => self.tracker_poles = as_arr(key, v)?,
            "tracker.yaw_gain" => self.yaw_gain = as_f64(key, v)?,
            "estimator.lambda" => self.lambda = as_f64(key, v)?,
            "estimator.delta_l" => self.delta_l = as_f64(key, v)?,
            "estimator.delta_b" => self.delta_b = as_f64(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }
}

/// Pole-placement tracker filtered by one high-order barrier row per obstacle.
pub struct MultirotorController {
    mode: MultirotorMode,
    sc: MultirotorScenario,
    model: ControlAffineModel,
    cascades: Vec<HocbfCascade>,
    gain: EstimatorGain,
    k: [f64; 3],
    last_u: DVector<f64>,
    hint: Vec<usize>,
    pub max_kkt: f64,
}

impl MultirotorController {
    pub fn new(sc: &MultirotorScenario, mode: MultirotorMode) -> Result<Self> {
        sc.validate()?;
        let cascades = (0..sc.obstacles.len()).map(|i| sc.cascade(i)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode,
            sc: sc.clone(),
            model: sc.model(),
            cascades,
            gain: sc.gain()?,
            k: sc.tracker_gains(),
            last_u: DVector::zeros(INPUT_DIM),
            hint: Vec::new(),
            max_kkt: 0.0,
        })
    }

    /// Nominal input `B_u^{-1} v` from the per-axis tracker.
    pub fn nominal_input(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let [k0, k1, k2] = self.k;
        let mut v = Vector4::zeros();
        for i in 0..3 {
            v[i] = -(k0 * x[idx::POS + i] + k1 * x[idx::VEL + i] + k2 * x[idx::ACC + i]);
        }
        v[3] = -self.sc.yaw_gain * x[idx::YAW];
        let u = input_inverse(x, t)? * v;
        Ok(DVector::from_column_slice(u.as_slice()))
    }
}

impl Controller for MultirotorController {
    fn aux_dim(&self) -> usize {
        STATE_DIM
    }

    fn aux_init(&self, x0: &DVector<f64>) -> DVector<f64> {
        estimator::init(&self.gain, x0).expect("dimension fixed").xi
    }

    fn aux_derivative(&self, _t: f64, x: &DVector<f64>, aux: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        estimator::derivative(&self.model, &self.gain, x, aux, u)
    }

    fn diagnostic_columns(&self) -> Vec<String> {
        let no = self.cascades.len();
        let mut c: Vec<String> = (1..=4).map(|i| format!("u_{i}")).collect();
        c.extend((1..=4).map(|i| format!("u_nom_{i}")));
        c.extend((0..no).map(|i| format!("h_{i}")));
        c.extend((0..no).map(|i| format!("h_e_{i}")));
        c.extend(["delta_hat_norm", "err_bound", "out_bound"].map(String::from));
        c
    }

    fn control(&mut self, t: f64, x: &DVector<f64>, aux: &DVector<f64>) -> Result<ControlOutput> {
        let sc = &self.sc;
        let d_hat = estimator::output(&self.gain, aux, x)?;
        let u_nom = self.nominal_input(x, t)?;
        let mut qp = QpProblem::new(DVector::from_element(INPUT_DIM, 1.0), u_nom.clone());
        let mut h = Vec::with_capacity(self.cascades.len());
        let mut h_e = Vec::with_capacity(self.cascades.len());
        for c in &self.cascades {
            let ev = c.eval(&self.model, x)?;
            h.push(ev.lie[0]);
            h_e.push(ev.phi[c.order() - 1]);
            let row = match self.mode {
                MultirotorMode::Nominal | MultirotorMode::Unprotected => hocbf_row(&self.model, c, x)?,
                MultirotorMode::Method2Hocbf => {
                    hocbf_method2_row(&self.model, c, &d_hat, &self.gain, sc.delta_l, sc.delta_b, x, t)?
                }
            };
            qp.constraints.push(row);
        }
        let sol = solve_warm(&qp, &self.hint)?;
        let (u, status) = match sol.status {
            QpStatus::Optimal => {
                self.max_kkt = self.max_kkt.max(sol.kkt_residual);
                self.hint = sol.active_set.clone();
                let active = sol.active_set.iter().map(|&j| qp.constraints[j].label.clone()).collect();
                (sol.z, StepStatus { kind: StatusKind::Optimal, active })
            }
            QpStatus::Infeasible => {
                (self.last_u.clone(), StepStatus { kind: StatusKind::InfeasibleHold, active: Vec::new() })
            }
        };
        self.last_u = u.clone();
        let mut diagnostics: Vec<f64> = u.iter().chain(u_nom.iter()).copied().collect();
        diagnostics.extend(h);
        diagnostics.extend(h_e);
        diagnostics.push(d_hat.norm());
        diagnostics.push(error_bound(&self.gain, sc.delta_l, sc.delta_b, t)?);
        diagnostics.push(output_bound(&self.gain, sc.delta_b, t)?);
        Ok(ControlOutput { u, status, diagnostics })
    }
}

struct MultirotorRecorder<'a> {
    sys: &'a TrueSystem,
    gain: EstimatorGain,
}

impl Recorder for MultirotorRecorder<'_> {
    fn columns(&self) -> Vec<String> {
        let mut c: Vec<String> = STATE_NAMES.iter().map(|s| s.to_string()).collect();
        c.extend(["delta_true_norm", "err_norm"].map(String::from));
        c
    }

    fn record(&mut self, s: &Sample<'_>, row: &mut Vec<f64>) -> Result<()> {
        let d = self.sys.uncertainty_at(s.x, &s.output.u, s.t)?;
        let d_hat = estimator::output(&self.gain, s.aux, s.x)?;
        row.extend(s.x.iter());
        row.push(d.norm());
        row.push((d - d_hat).norm());
        Ok(())
    }
}

pub fn run_multirotor(sc: &MultirotorScenario, mode: MultirotorMode, cfg: &IntegratorConfig) -> RunResult {
    run_multirotor_with(sc, mode, cfg, &sc.uncertainty)
}

/// Run with a given uncertainty realisation (ignored in nominal mode).
pub fn run_multirotor_with(
    sc: &MultirotorScenario,
    mode: MultirotorMode,
    cfg: &IntegratorConfig,
    unc: &MultirotorUncertainty,
) -> RunResult {
    let mut ctrl = MultirotorController::new(sc, mode).map_err(SimulationFailure::before_start)?;
    check_delta_u("uncertainty.delta_u", &unc.delta_u).map_err(SimulationFailure::before_start)?;
    if mode.is_robust() && (unc.c_d != 0.0 || unc.delta_u.iter().any(|d| *d != 0.0)) {
        for i in 0..sc.obstacles.len() {
            let rep = sc.relative_degree_report(i, unc).map_err(SimulationFailure::before_start)?;
            if !rep.matched {
                return Err(SimulationFailure::before_start(Error::MatchingFailure(format!(
                    "obstacle {i}: input relative degree {:?}, disturbance relative degree {:?}",
                    rep.ird, rep.drd
                ))));
            }
        }
    }
    let x0 = sc.x0().map_err(SimulationFailure::before_start)?;
    let sys = sc.true_system((mode != MultirotorMode::Nominal).then_some(unc));
    let mut rec = MultirotorRecorder { sys: &sys, gain: ctrl.gain.clone() };
    let tag = |mut tr: SimulationTrace, kkt: f64| {
        tr.meta.scenario = "multirotor".into();
        tr.meta.mode = mode.as_str().into();
        tr.meta.max_kkt_residual = kkt;
        tr
    };
    let res = simulate(&sys, &mut ctrl, &x0, cfg, &mut [&mut rec]);
    let kkt = ctrl.max_kkt;
    let names = sc.column_names();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    match res {
        Ok(tr) => tag(tr, kkt).select(&names).map_err(SimulationFailure::before_start),
        Err(mut f) => {
            f.partial = tag(f.partial, kkt);
            Err(f)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::gradient_fd;

    fn sample_state() -> DVector<f64> {
        let mut x = multirotor_defaults().x0().unwrap();
        let extra = [0.3, -0.2, 0.1, 0.8, 0.4, -0.3, 0.2, -0.5, 0.6, 0.1, 0.0, 0.05, -0.04];
        for i in 0..STATE_DIM {
            x[i] += extra[i];
        }
        x
    }

    #[test]
    fn defaults_are_valid() {
        multirotor_defaults().validate().unwrap();
    }

    #[test]
    fn hover_start_has_gravity_thrust() {
        let x = multirotor_defaults().x0().unwrap();
        assert!((x[idx::THRUST] - GRAVITY).abs() < 1e-12);
        assert_eq!(x[idx::ROLL], 0.0);
        assert_eq!(x[idx::PITCH], 0.0);
    }

    #[test]
    fn attitude_reconstruction_reproduces_accel() {
        let a = Vector3::new(0.7, -1.1, 0.4);
        let psi = 0.3;
        let (t, phi, th) = attitude_from_accel(&a, psi).unwrap();
        let back = rotation(phi, th, psi) * Vector3::z() * t - Vector3::new(0.0, 0.0, GRAVITY);
        assert!((back - a).amax() < 1e-12);
    }

    #[test]
    fn input_map_matches_thrust_derivative() {
        // d/dt (T R e3) along u must equal the first three rows of B_u u.
        let x = sample_state();
        let u = DVector::from_vec(vec![0.3, 0.2, -0.1, 0.4]);
        let g = g_hat(&x);
        let xd = &g * &u;
        let acc = |z: &DVector<f64>| rotation(z[idx::ROLL], z[idx::PITCH], z[idx::YAW]) * Vector3::z() * z[idx::THRUST];
        let h = 1e-6;
        let fd = (acc(&(&x + &xd * h)) - acc(&(&x - &xd * h))) / (2.0 * h);
        let jerk = Vector3::new(xd[6], xd[7], xd[8]);
        assert!((fd - jerk).amax() < 1e-8);
    }

    #[test]
    fn chain_gradients_match_differences() {
        let sc = multirotor_defaults();
        let ch = sc.chain(0);
        let x = sample_state();
        for (val, grad) in [
            (ObstacleChain::l0 as fn(&ObstacleChain, &DVector<f64>) -> f64, ObstacleChain::grad0 as fn(&ObstacleChain, &DVector<f64>) -> DVector<f64>),
            (ObstacleChain::l1, ObstacleChain::grad1),
            (ObstacleChain::l2, ObstacleChain::grad2),
        ] {
            let fd = gradient_fd(&|z| val(&ch, z), &x, 1e-6);
            assert!((fd - grad(&ch, &x)).amax() < 1e-7);
        }
    }

    #[test]
    fn cascade_levels_are_consistent() {
        let sc = multirotor_defaults();
        let c = sc.cascade(0).unwrap();
        let ev = c.eval(&sc.model(), &sample_state()).unwrap();
        assert_eq!(ev.lie.len(), 4);
        assert_eq!(ev.phi.len(), 3);
    }

    #[test]
    fn obstacle_barrier_is_matched_at_order_three() {
        let sc = multirotor_defaults();
        let rep = sc.relative_degree_report(0, &sc.draw(3)).unwrap();
        assert_eq!((rep.ird, rep.drd, rep.matched), (Some(3), Some(3), true));
    }

    #[test]
    fn draws_respect_ranges() {
        let sc = multirotor_defaults();
        for s in 0..20 {
            let d = sc.draw(s);
            assert!(d.c_d >= 0.05 && d.c_d <= 0.2);
            assert!(d.delta_u.iter().all(|v| *v >= -0.02 && *v <= 0.0));
        }
    }

    #[test]
    fn params_round_trip() {
        let sc = multirotor_defaults();
        let mut other = multirotor_defaults();
        other.r0 = 9.0;
        other.cascade_gains = [1.0, 1.0, 1.0];
        for p in sc.params() {
            other.set_param(p.key, &p.value).unwrap();
        }
        assert_eq!(other, sc);
    }

    #[test]
    fn start_inside_obstacle_is_rejected() {
        let mut sc = multirotor_defaults();
        sc.obstacles[0].center = [0.0, 0.0, 0.0];
        assert!(sc.validate().is_err());
    }
}
