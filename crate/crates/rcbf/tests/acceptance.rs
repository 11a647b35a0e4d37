//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use rcbf::dynamics::{
    rk4_step, simulate, ControlAffineModel, ControlOutput, Controller, FnRecorder, IntegratorConfig, Sample,
    SimulationTrace, StepStatus, TrueSystem, UncertaintySpec,
};
use rcbf::estimator::{self, error_bound, iss_decrement_check, make_gain, output_bound};
use rcbf::filters::{hocbf_method2_row, method2_row, nominal_cbf_row, HocbfCascade};
use rcbf::qp::{oracle_project, solve, AffineConstraint, QpProblem};
use rcbf::scenarios::acc::{acc_defaults, run_acc, AccController, AccMode, AccScenario, AccUncertainty};
use rcbf::scenarios::multirotor::{multirotor_defaults, run_multirotor, run_multirotor_with, MultirotorMode};

const DT: f64 = 1e-3;
const ACC_T: f64 = 20.0;
const MR_T: f64 = 15.0;
const EPS_NUM: f64 = 1e-3;

// Criterion tolerances.
const C1_UNPROTECTED_MAX_H: f64 = -0.01;
const C1_MAX_WALL_S: f64 = 1.0;
const C2_RMS_RATIO: f64 = 0.5;
const C3_DRAWS: u64 = 100;
const C3_BOUND_SLACK_STEPS: f64 = 10.0;
const C4_SLACK_STEPS: f64 = 10.0;
const C5_TOL: f64 = 1e-6;
const C6_PROBLEMS: usize = 1000;
const C6_TOL: f64 = 1e-8;
const C7_SLACK_STEPS: f64 = 10.0;
const C8_DRAWS: u64 = 10;
const C8_MAX_WALL_S: f64 = 60.0;
const C10_RANGE: (f64, f64) = (14.0, 18.0);

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} [{id:>2}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn column_min(tr: &SimulationTrace, name: &str) -> f64 {
    tr.column(name).expect("column").into_iter().fold(f64::INFINITY, f64::min)
}

fn acc_cfg() -> IntegratorConfig {
    IntegratorConfig::new(DT, ACC_T).unwrap()
}

fn mr_cfg() -> IntegratorConfig {
    IntegratorConfig::new(DT, MR_T).unwrap()
}

/// Worst-case bound excesses along one run (positive means violation).
#[derive(Clone, Copy)]
struct BoundCheck {
    samples: usize,
    violations: usize,
    worst_err_excess: f64,
    worst_out_excess: f64,
}

impl Default for BoundCheck {
    fn default() -> Self {
        BoundCheck { samples: 0, violations: 0, worst_err_excess: f64::NEG_INFINITY, worst_out_excess: f64::NEG_INFINITY }
    }
}

impl BoundCheck {
    fn merge(self, o: BoundCheck) -> BoundCheck {
        BoundCheck {
            samples: self.samples + o.samples,
            violations: self.violations + o.violations,
            worst_err_excess: self.worst_err_excess.max(o.worst_err_excess),
            worst_out_excess: self.worst_out_excess.max(o.worst_out_excess),
        }
    }

    fn from_series(err: &[f64], err_bound: &[f64], out: &[f64], out_bound: &[f64], err_slack: f64, out_slack: f64) -> Self {
        let mut c = BoundCheck { samples: err.len(), ..Default::default() };
        for k in 0..err.len() {
            let ex = err[k] - err_bound[k] - err_slack;
            let ox = out[k] - out_bound[k] - out_slack;
            c.worst_err_excess = c.worst_err_excess.max(ex);
            c.worst_out_excess = c.worst_out_excess.max(ox);
            if ex > 0.0 || ox > 0.0 {
                c.violations += 1;
            }
        }
        c
    }
}

/// ACC run recording the full `|e|` and `|Delta_hat|` plus both bounds.
fn acc_bound_check(sc: &AccScenario, mode: AccMode, unc: &AccUncertainty) -> BoundCheck {
    let cfg = acc_cfg();
    let gain = sc.gain().unwrap();
    let sys = sc.true_system((mode != AccMode::Nominal).then_some(unc));
    let mut ctrl = AccController::new(sc, mode).unwrap();
    let (dl, db) = (sc.delta_l, sc.delta_b);
    let g2 = gain.clone();
    let sys2 = sys.clone();
    let mut rec = FnRecorder::new(
        ["e_full", "dhat_full", "eb", "ob"].map(String::from).to_vec(),
        move |s: &Sample<'_>, row: &mut Vec<f64>| {
            let d = sys2.uncertainty_at(s.x, &s.output.u, s.t)?;
            let dh = estimator::output(&g2, s.aux, s.x)?;
            row.extend([(d - &dh).norm(), dh.norm(), error_bound(&g2, dl, db, s.t)?, output_bound(&g2, db, s.t)?]);
            Ok(())
        },
    );
    let tr = simulate(&sys, &mut ctrl, &sc.x0(), &cfg, &mut [&mut rec]).unwrap();
    let col = |n: &str| tr.column(n).unwrap();
    BoundCheck::from_series(
        &col("e_full"),
        &col("eb"),
        &col("dhat_full"),
        &col("ob"),
        C3_BOUND_SLACK_STEPS * DT * dl,
        C3_BOUND_SLACK_STEPS * DT * db * gain.lambda_norm(),
    )
}

fn mr_bound_check(tr: &SimulationTrace) -> BoundCheck {
    let sc = multirotor_defaults();
    let gain = sc.gain().unwrap();
    let col = |n: &str| tr.column(n).unwrap();
    BoundCheck::from_series(
        &col("err_norm"),
        &col("err_bound"),
        &col("delta_hat_norm"),
        &col("out_bound"),
        C3_BOUND_SLACK_STEPS * DT * sc.delta_l,
        C3_BOUND_SLACK_STEPS * DT * sc.delta_b * gain.lambda_norm(),
    )
}

fn rms_tail(tr: &SimulationTrace, v_d: f64, from: f64) -> f64 {
    let t = tr.times();
    let v = tr.column("v_f").unwrap();
    let tail: Vec<f64> = t.iter().zip(&v).filter(|(ti, _)| **ti >= from - 1e-12).map(|(_, vi)| vi - v_d).collect();
    (tail.iter().map(|e| e * e).sum::<f64>() / tail.len() as f64).sqrt()
}

/// Zero input with the estimator as auxiliary state; reports `Delta_hat`.
struct EstimatorOnly {
    model: ControlAffineModel,
    gain: estimator::EstimatorGain,
}

impl Controller for EstimatorOnly {
    fn aux_dim(&self) -> usize {
        self.gain.dim()
    }
    fn aux_init(&self, x0: &DVector<f64>) -> DVector<f64> {
        estimator::init(&self.gain, x0).unwrap().xi
    }
    fn aux_derivative(&self, _t: f64, x: &DVector<f64>, aux: &DVector<f64>, u: &DVector<f64>) -> rcbf::Result<DVector<f64>> {
        estimator::derivative(&self.model, &self.gain, x, aux, u)
    }
    fn diagnostic_columns(&self) -> Vec<String> {
        vec!["delta_hat".into()]
    }
    fn control(&mut self, _t: f64, x: &DVector<f64>, aux: &DVector<f64>) -> rcbf::Result<ControlOutput> {
        let d = estimator::output(&self.gain, aux, x)?;
        Ok(ControlOutput { u: DVector::zeros(1), status: StepStatus::open(), diagnostics: vec![d[0]] })
    }
}

fn scalar_model(a: f64) -> ControlAffineModel {
    ControlAffineModel::new(
        1,
        1,
        Arc::new(move |x: &DVector<f64>| x * a),
        Arc::new(|_x: &DVector<f64>| DMatrix::from_element(1, 1, 1.0)),
    )
    .unwrap()
}

fn rk4_global_error(dt: f64) -> f64 {
    let sys = TrueSystem::new(scalar_model(-1.0), UncertaintySpec::none(0.0, 0.0)).unwrap();
    let n = (1.0 / dt).round() as usize;
    let mut x = DVector::from_element(1, 1.0);
    let u = DVector::zeros(1);
    for k in 0..n {
        x = rk4_step(&sys, &x, &u, k as f64 * dt, dt).unwrap();
    }
    (x[0] - (-1.0f64).exp()).abs()
}

fn main() {
    let mut rep = Report { failed: 0 };
    let sc = acc_defaults();
    let mr = multirotor_defaults();

    // Shipped runs: every ACC mode on the default uncertainty, every multirotor mode on its fixed draw.
    let acc_runs: Vec<(AccMode, SimulationTrace, f64)> = AccMode::ALL
        .iter()
        .map(|&m| {
            let start = Instant::now();
            let tr = run_acc(&sc, m, &acc_cfg()).unwrap();
            (m, tr, start.elapsed().as_secs_f64())
        })
        .collect();
    let acc = |m: AccMode| acc_runs.iter().find(|r| r.0 == m).unwrap();

    // 1. Safety separation.
    {
        let (u, m1, m2) = (acc(AccMode::Unprotected), acc(AccMode::Method1), acc(AccMode::Method2));
        let hu = column_min(&u.1, "h");
        let h1 = column_min(&m1.1, "h");
        let h2 = column_min(&m2.1, "h");
        let wall = u.2.max(m1.2).max(m2.2);
        let pass = hu < C1_UNPROTECTED_MAX_H && h1 >= -EPS_NUM && h2 >= -EPS_NUM && wall < C1_MAX_WALL_S;
        rep.line(
            1,
            "ACC safety separation",
            pass,
            format!(
                "min h unprotected {hu:.4} (< {C1_UNPROTECTED_MAX_H}), method1 {h1:.4}, method2 {h2:.4} (>= -{EPS_NUM}); slowest run {wall:.3} s (< {C1_MAX_WALL_S} s)"
            ),
        );
    }

    // 2. Disturbance attenuation.
    {
        let from = ACC_T - 10.0;
        let r1 = rms_tail(&acc(AccMode::Method1).1, sc.v_desired, from);
        let r2 = rms_tail(&acc(AccMode::Method2).1, sc.v_desired, from);
        rep.line(
            2,
            "ACC disturbance attenuation",
            r1 <= C2_RMS_RATIO * r2,
            format!("RMS(v_f - v_d) last 10 s: method1 {r1:.5}, method2 {r2:.5}, ratio {:.3} (<= {C2_RMS_RATIO})", r1 / r2),
        );
    }

    // 3. Bound containment.
    {
        let start = Instant::now();
        let mut total = AccMode::ALL.par_iter().map(|&m| acc_bound_check(&sc, m, &sc.uncertainty)).reduce(BoundCheck::default, BoundCheck::merge);
        let draws: Vec<(u64, AccMode)> =
            (0..C3_DRAWS).flat_map(|s| [(s, AccMode::Method1), (s, AccMode::Method2)]).collect();
        let rand_check = draws
            .par_iter()
            .map(|&(s, m)| acc_bound_check(&sc, m, &sc.draw(s)))
            .reduce(BoundCheck::default, BoundCheck::merge);
        total = total.merge(rand_check);
        let mr_check = MultirotorMode::ALL
            .par_iter()
            .map(|&m| mr_bound_check(&run_multirotor(&mr, m, &mr_cfg()).unwrap()))
            .reduce(BoundCheck::default, BoundCheck::merge);
        let mr_draws = (0..C8_DRAWS)
            .into_par_iter()
            .map(|s| mr_bound_check(&run_multirotor_with(&mr, MultirotorMode::Method2Hocbf, &mr_cfg(), &mr.draw(s)).unwrap()))
            .reduce(BoundCheck::default, BoundCheck::merge);
        total = total.merge(mr_check).merge(mr_draws);
        rep.line(
            3,
            "estimation error and output bounds",
            total.violations == 0,
            format!(
                "{} violating samples of {} (shipped runs + {} ACC draws x 2 modes); worst |e| - bound - slack {:.3e}, worst |Delta_hat| - bound - slack {:.3e}; {:.1} s",
                total.violations,
                total.samples,
                C3_DRAWS,
                total.worst_err_excess,
                total.worst_out_excess,
                start.elapsed().as_secs_f64()
            ),
        );
    }

    // 4. Estimator decrement on the default (method1) ACC run. The other
    // modes are reported too; their violations must all sit on steps where
    // the realised rate of Delta exceeds delta_l, i.e. where the decrement's
    // hypothesis does not hold.
    {
        let gain = sc.gain().unwrap();
        let slack = C4_SLACK_STEPS * DT * sc.delta_l * sc.delta_l;
        let mut parts = Vec::new();
        let mut pass = true;
        for (m, tr, _) in &acc_runs {
            let r = iss_decrement_check(tr, &gain, sc.delta_l, slack).unwrap();
            let d = tr.column("delta_true_1").unwrap();
            let within_hypothesis =
                r.violations.iter().filter(|(k, _, _)| (d[k + 1] - d[*k]).abs() / DT <= sc.delta_l).count();
            if *m == AccMode::Method1 {
                pass &= r.passed();
            }
            pass &= within_hypothesis == 0;
            let last = r.violations.last().map_or(String::new(), |v| format!(", last at t = {:.3}", v.1));
            parts.push(format!(
                "{}{} {} viol ({} with |Delta'| <= delta_l{last}), max excess {:.3e}",
                m.as_str(),
                if *m == AccMode::Method1 { " [default]" } else { "" },
                r.violations.len(),
                within_hypothesis,
                r.max_excess
            ));
        }
        rep.line(4, "estimator decrement", pass, format!("slack {slack:.3}; {}", parts.join("; ")));
    }

    // 5. Constant-disturbance oracle.
    {
        let dt = 1e-4;
        let lambda = 10.0;
        let mut spec = UncertaintySpec::none(0.0, 3.0);
        spec.time_term = Some(Arc::new(|_t| DVector::from_element(1, 3.0)));
        let sys = TrueSystem::new(scalar_model(0.0), spec).unwrap();
        let mut ctrl = EstimatorOnly { model: sys.model.clone(), gain: make_gain(&[lambda], 0.0).unwrap() };
        let cfg = IntegratorConfig::new(dt, 2.0).unwrap();
        let tr = simulate(&sys, &mut ctrl, &DVector::from_element(1, 0.5), &cfg, &mut []).unwrap();
        let err = tr
            .times()
            .iter()
            .zip(tr.column("delta_hat").unwrap())
            .map(|(t, d)| (d - 3.0 * (1.0 - (-lambda * t).exp())).abs())
            .fold(0.0, f64::max);
        rep.line(5, "constant-disturbance estimate", err <= C5_TOL, format!("max error {err:.3e} (<= {C5_TOL:e}) over 2 s at dt = 1e-4"));
    }

    // 6. QP oracle equivalence and scenario KKT residuals.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst = 0.0f64;
        for _ in 0..C6_PROBLEMS {
            let m = rng.random_range(1..=4);
            let w = DVector::from_fn(m, |_, _| rng.random_range(0.1..10.0));
            let r = DVector::from_fn(m, |_, _| rng.random_range(-5.0..5.0));
            let a = DVector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));
            let b = rng.random_range(-10.0..10.0);
            let p = QpProblem::new(w, r).with_constraint(AffineConstraint::new(a, b, "row"));
            let z = solve(&p).unwrap().z;
            let o = oracle_project(&p).unwrap();
            worst = worst.max((z - o).amax());
        }
        let mut kkt = acc_runs.iter().map(|r| r.1.meta.max_kkt_residual).fold(0.0, f64::max);
        for m in MultirotorMode::ALL {
            kkt = kkt.max(run_multirotor(&mr, m, &mr_cfg()).unwrap().meta.max_kkt_residual);
        }
        rep.line(
            6,
            "QP oracle equivalence",
            worst <= C6_TOL && kkt <= C6_TOL,
            format!("max |solve - projection| {worst:.3e} over {C6_PROBLEMS} problems; max scenario KKT residual {kkt:.3e} (<= {C6_TOL:e})"),
        );
    }

    // 7. Barrier decrement of the compensating filter.
    {
        let tr = &acc(AccMode::Method1).1;
        let gain = sc.gain().unwrap();
        let slack = C7_SLACK_STEPS * DT * (sc.delta_l * sc.delta_l + gain.lambda_norm() * sc.delta_b);
        let t = tr.times();
        let hv = tr.column("h_V").unwrap();
        let mut worst = f64::NEG_INFINITY;
        let mut viol = 0;
        for k in 0..t.len() - 1 {
            let rate = (hv[k + 1] - hv[k]) / (t[k + 1] - t[k]);
            let lhs = -sc.mu_h * hv[k] - slack;
            worst = worst.max(lhs - rate);
            if rate < lhs {
                viol += 1;
            }
        }
        rep.line(
            7,
            "compensated barrier decrement",
            viol == 0,
            format!("{viol} violating steps; worst shortfall {worst:.3e} with slack {slack:.3}"),
        );
    }

    // 8. Multirotor reproduction.
    {
        let start = Instant::now();
        let nominal = column_min(&run_multirotor(&mr, MultirotorMode::Nominal, &mr_cfg()).unwrap(), "h_0");
        let unprot = column_min(&run_multirotor(&mr, MultirotorMode::Unprotected, &mr_cfg()).unwrap(), "h_0");
        let robust: Vec<f64> = (0..C8_DRAWS)
            .into_par_iter()
            .map(|s| column_min(&run_multirotor_with(&mr, MultirotorMode::Method2Hocbf, &mr_cfg(), &mr.draw(s)).unwrap(), "h_0"))
            .collect();
        let wall = start.elapsed().as_secs_f64();
        let worst = robust.iter().copied().fold(f64::INFINITY, f64::min);
        let pass = nominal >= 0.0 && unprot < 0.0 && worst >= -EPS_NUM && wall < C8_MAX_WALL_S;
        rep.line(
            8,
            "multirotor obstacle avoidance",
            pass,
            format!(
                "min h nominal {nominal:.4} (>= 0), unprotected {unprot:.4} (< 0), method2_hocbf worst of {C8_DRAWS} draws {worst:.4} (>= -{EPS_NUM}); batch {wall:.1} s (< {C8_MAX_WALL_S} s)"
            ),
        );
    }

    // 9. Reduction identities.
    {
        let model = sc.model();
        let barrier = sc.barrier();
        let cascade = HocbfCascade::from_barrier(&barrier).unwrap();
        let gain = sc.gain().unwrap();
        let zero_gain = make_gain(&sc.lambda, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mismatches = 0;
        for _ in 0..200 {
            let x = DVector::from_vec(vec![rng.random_range(5.0..30.0), rng.random_range(10.0..80.0)]);
            let d = DVector::from_vec(vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
            let t = rng.random_range(0.0..5.0);
            let nom = nominal_cbf_row(&model, &barrier, &x).unwrap();
            let red = method2_row(&model, &barrier, &DVector::zeros(2), &zero_gain, 0.0, 0.0, &x, t).unwrap();
            if nom.a != red.a || nom.b != red.b {
                mismatches += 1;
            }
            let m2 = method2_row(&model, &barrier, &d, &gain, sc.delta_l, sc.delta_b, &x, t).unwrap();
            let h1 = hocbf_method2_row(&model, &cascade, &d, &gain, sc.delta_l, sc.delta_b, &x, t).unwrap();
            if m2.a != h1.a || m2.b != h1.b {
                mismatches += 1;
            }
        }
        rep.line(9, "reduction identities", mismatches == 0, format!("{mismatches} inexact pairs of 400 (bitwise comparison)"));
    }

    // 10. RK4 convergence order.
    {
        let e: Vec<f64> = [1e-2, 5e-3, 2.5e-3].iter().map(|&dt| rk4_global_error(dt)).collect();
        let (f1, f2) = (e[0] / e[1], e[1] / e[2]);
        let ok = |f: f64| f >= C10_RANGE.0 && f <= C10_RANGE.1;
        rep.line(
            10,
            "RK4 convergence",
            ok(f1) && ok(f2),
            format!("error ratios {f1:.3}, {f2:.3} in [{}, {}]", C10_RANGE.0, C10_RANGE.1),
        );
    }

    println!("{} of 10 criteria passed", 10 - rep.failed);
    if rep.failed > 0 {
        std::process::exit(1);
    }
}
