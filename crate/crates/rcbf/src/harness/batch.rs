//! Batch execution, per-run summaries, manifest and exit codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{DrawPolicy, Mode, RunConfig, ScenarioKind, ScenarioParams};
use super::csv::{emit_trace, io_at};
use crate::dynamics::{
    probe_uncertainty_bounds, BoundEstimate, IntegratorConfig, ProbeCase, RunResult, SimulationTrace,
};
use crate::error::{Error, Result};
use crate::scenarios::acc::{run_acc_with, AccController, AccMode};
use crate::scenarios::multirotor::{run_multirotor_with, MultirotorController, MultirotorMode};

/// Discretisation slack on barrier values.
pub const EPS_NUM: f64 = 1e-3;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SAFETY: i32 = 3;
pub const EXIT_SCENARIO_FAULT: i32 = 4;

/// Statistics recomputable from a trace alone (plus the config).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    /// Minimum over time of each barrier column.
    pub min_h: BTreeMap<String, f64>,
    pub safety_violated: bool,
    /// Over the second half of the horizon.
    pub rms_tracking_error: Option<f64>,
    pub max_estimation_error: Option<f64>,
    /// `min_t (error_bound - |e|)`; negative means the bound was crossed.
    pub max_bound_margin: Option<f64>,
    pub qp_fault_count: usize,
    /// Largest realised uncertainty norm.
    pub max_delta_norm: Option<f64>,
    /// Largest finite-difference rate of the uncertainty channel.
    pub max_delta_rate: Option<f64>,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Config,
    Scenario,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    #[serde(flatten)]
    pub stats: TraceStats,
    pub max_kkt_residual: f64,
    pub wall_time: f64,
    /// Uncertainty realisation used (`null` in nominal mode).
    pub uncertainty: Value,
    pub failure: Option<FailureKind>,
    pub error: Option<String>,
    pub config_hash: String,
    pub trace_file: Option<String>,
    pub trace_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub scenario: String,
    pub mode: String,
    pub robust: bool,
    pub config_hash: String,
    pub runs: Vec<RunSummary>,
    /// Minimum over runs and barriers.
    pub min_h: Option<f64>,
    pub any_safety_violation: bool,
    pub scenario_faults: usize,
    pub config_failures: usize,
    pub exit_code: i32,
    pub wall_time: f64,
}

fn barrier_columns(kind: ScenarioKind, trace: &SimulationTrace) -> Vec<String> {
    match kind {
        ScenarioKind::Acc => vec!["h".into()],
        ScenarioKind::Multirotor => trace
            .columns
            .iter()
            .filter(|c| c.strip_prefix("h_").is_some_and(|r| r.parse::<usize>().is_ok()))
            .cloned()
            .collect(),
    }
}

fn tracking_errors(cfg: &RunConfig, trace: &SimulationTrace) -> Result<Vec<f64>> {
    match &cfg.params {
        ScenarioParams::Acc(sc) => Ok(trace.column_or_err("v_f")?.iter().map(|v| v - sc.v_desired).collect()),
        ScenarioParams::Multirotor(_) => {
            let (x, y, z) = (trace.column_or_err("e_px")?, trace.column_or_err("e_py")?, trace.column_or_err("e_pz")?);
            Ok((0..x.len()).map(|i| (x[i] * x[i] + y[i] * y[i] + z[i] * z[i]).sqrt()).collect())
        }
    }
}

fn delta_column(kind: ScenarioKind) -> &'static str {
    match kind {
        ScenarioKind::Acc => "delta_true_1",
        ScenarioKind::Multirotor => "delta_true_norm",
    }
}

fn max_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    v.fold(None, |m, x| Some(m.map_or(x, |m: f64| m.max(x))))
}

fn min_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    v.fold(None, |m, x| Some(m.map_or(x, |m: f64| m.min(x))))
}

/// Summary statistics of one trace.
pub fn trace_stats(cfg: &RunConfig, trace: &SimulationTrace) -> Result<TraceStats> {
    let mut s = TraceStats { samples: trace.len(), qp_fault_count: trace.fault_count(), ..Default::default() };
    for c in barrier_columns(cfg.scenario, trace) {
        if let Some(m) = min_of(trace.column_or_err(&c)?.into_iter()) {
            s.min_h.insert(c, m);
        }
    }
    s.safety_violated = s.min_h.values().any(|&m| m < -EPS_NUM);

    let t = trace.times();
    let half = 0.5 * cfg.integrator.t_final;
    let tail: Vec<f64> = tracking_errors(cfg, trace)?
        .into_iter()
        .zip(&t)
        .filter(|(_, ti)| **ti >= half)
        .map(|(e, _)| e)
        .collect();
    if !tail.is_empty() {
        s.rms_tracking_error = Some((tail.iter().map(|e| e * e).sum::<f64>() / tail.len() as f64).sqrt());
    }

    let err = trace.column_or_err("err_norm")?;
    let bound = trace.column_or_err("err_bound")?;
    s.max_estimation_error = max_of(err.iter().copied());
    s.max_bound_margin = min_of(bound.iter().zip(&err).map(|(b, e)| b - e));

    let d = trace.column_or_err(delta_column(cfg.scenario))?;
    s.max_delta_norm = max_of(d.iter().map(|v| v.abs()));
    s.max_delta_rate = max_of(d.windows(2).map(|w| (w[1] - w[0]).abs() / cfg.integrator.dt));
    Ok(s)
}

/// Uncertainty realisation for `seed` under the config's draw policy.
pub fn uncertainty_for(cfg: &RunConfig, seed: u64) -> Value {
    let v = match (&cfg.params, cfg.draw) {
        (ScenarioParams::Acc(sc), DrawPolicy::Fixed) => serde_json::to_value(sc.uncertainty),
        (ScenarioParams::Acc(sc), DrawPolicy::Random) => serde_json::to_value(sc.draw(seed)),
        (ScenarioParams::Multirotor(sc), DrawPolicy::Fixed) => serde_json::to_value(sc.uncertainty),
        (ScenarioParams::Multirotor(sc), DrawPolicy::Random) => serde_json::to_value(sc.draw(seed)),
    };
    v.expect("plain data serialises")
}

/// Simulates one seed without touching the filesystem.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> RunResult {
    let unc = uncertainty_for(cfg, seed);
    let res = match (&cfg.params, cfg.mode) {
        (ScenarioParams::Acc(sc), Mode::Acc(m)) => {
            let u = serde_json::from_value(unc).expect("round trip");
            run_acc_with(sc, m, &cfg.integrator, &u)
        }
        (ScenarioParams::Multirotor(sc), Mode::Multirotor(m)) => {
            let u = serde_json::from_value(unc).expect("round trip");
            run_multirotor_with(sc, m, &cfg.integrator, &u)
        }
        _ => unreachable!("validated config pairs scenario and mode"),
    };
    res.map(|mut tr| {
        tr.meta.seed = Some(seed);
        tr
    })
    .map_err(|mut f| {
        f.partial.meta.seed = Some(seed);
        f
    })
}

fn is_nominal(mode: Mode) -> bool {
    matches!(mode, Mode::Acc(AccMode::Nominal) | Mode::Multirotor(MultirotorMode::Nominal))
}

pub fn trace_file_name(cfg: &RunConfig, seed: u64) -> String {
    format!("{}_{}_seed{}.csv", cfg.scenario, cfg.mode.as_str(), seed)
}

/// Runs one seed, writes its trace under `dir` (if given) and summarises it.
pub fn run_and_summarise(cfg: &RunConfig, seed: u64, dir: Option<&Path>) -> Result<(RunSummary, SimulationTrace)> {
    let start = Instant::now();
    let res = run_seed(cfg, seed);
    let wall_time = start.elapsed().as_secs_f64();
    let (trace, failure, error) = match res {
        Ok(tr) => (tr, None, None),
        Err(f) => {
            let kind = if f.error.is_config_error() { FailureKind::Config } else { FailureKind::Scenario };
            (f.partial, Some(kind), Some(f.error.to_string()))
        }
    };
    let stats = if trace.is_empty() { TraceStats::default() } else { trace_stats(cfg, &trace)? };
    let (trace_file, trace_hash) = match dir {
        Some(d) if !trace.is_empty() => {
            let name = trace_file_name(cfg, seed);
            let hash = emit_trace(&trace, &d.join(&name))?;
            (Some(name), Some(hash))
        }
        _ => (None, None),
    };
    let summary = RunSummary {
        scenario: cfg.scenario.as_str().into(),
        mode: cfg.mode.as_str().into(),
        seed,
        stats,
        max_kkt_residual: trace.meta.max_kkt_residual,
        wall_time,
        uncertainty: if is_nominal(cfg.mode) { Value::Null } else { uncertainty_for(cfg, seed) },
        failure,
        error,
        config_hash: cfg.hash(),
        trace_file,
        trace_hash,
    };
    Ok((summary, trace))
}

/// Exit code of a set of runs: safety violations in robust modes first,
/// then configuration failures, then scenario faults.
pub fn exit_code(robust: bool, runs: &[RunSummary]) -> i32 {
    if robust && runs.iter().any(|r| r.stats.safety_violated) {
        EXIT_SAFETY
    } else if runs.iter().any(|r| r.failure == Some(FailureKind::Config)) {
        EXIT_CONFIG
    } else if runs.iter().any(|r| r.failure == Some(FailureKind::Scenario)) {
        EXIT_SCENARIO_FAULT
    } else {
        EXIT_OK
    }
}

/// Runs every seed in parallel and writes traces, `summary.json`,
/// `manifest.json` and `config.resolved.json` into the output directory.
pub fn run_batch(cfg: &RunConfig) -> Result<BatchReport> {
    let start = Instant::now();
    let dir = &cfg.output_dir;
    let traces = dir.join("traces");
    std::fs::create_dir_all(&traces).map_err(|e| io_at(&traces, e))?;
    write_json(&dir.join("config.resolved.json"), &cfg.to_json())?;

    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_and_summarise(cfg, seed, Some(&traces)).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;

    let robust = cfg.mode.is_robust();
    let report = BatchReport {
        scenario: cfg.scenario.as_str().into(),
        mode: cfg.mode.as_str().into(),
        robust,
        config_hash: cfg.hash(),
        min_h: min_of(runs.iter().flat_map(|r| r.stats.min_h.values().copied())),
        any_safety_violation: runs.iter().any(|r| r.stats.safety_violated),
        scenario_faults: runs.iter().filter(|r| r.failure == Some(FailureKind::Scenario)).count(),
        config_failures: runs.iter().filter(|r| r.failure == Some(FailureKind::Config)).count(),
        exit_code: exit_code(robust, &runs),
        wall_time: start.elapsed().as_secs_f64(),
        runs,
    };
    write_json(&dir.join("summary.json"), &report)?;
    write_json(&dir.join("manifest.json"), &manifest(cfg, &report))?;
    Ok(report)
}

fn write_json(path: &PathBuf, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").map_err(|e| io_at(path, e))
}

/// Plot panels (data only) and the trace files that feed them.
pub fn manifest(cfg: &RunConfig, report: &BatchReport) -> Value {
    let panels = match cfg.scenario {
        ScenarioKind::Acc => json!([
            {"panel": "acc.safety", "x": "t", "y": ["h"], "description": "barrier value per mode"},
            {"panel": "acc.tracking", "x": "t", "y": ["v_f"], "description": "follower speed"},
            {"panel": "acc.estimation", "x": "t",
             "y": ["delta_true_1", "delta_hat_1", "err_norm", "err_bound", "out_bound"],
             "description": "uncertainty, estimate, error and bounds"},
            {"panel": "acc.input", "x": "t", "y": ["u_applied", "u_tilde"], "description": "wheel force"}
        ]),
        ScenarioKind::Multirotor => {
            let n = match &cfg.params {
                ScenarioParams::Multirotor(sc) => sc.obstacles.len(),
                ScenarioParams::Acc(_) => 0,
            };
            let h: Vec<String> = (0..n).map(|i| format!("h_{i}")).collect();
            json!([
                {"panel": "multirotor.trajectory", "x": "e_px", "y": ["e_py", "e_pz"],
                 "description": "position error path relative to the goal"},
                {"panel": "multirotor.safety", "x": "t", "y": h, "description": "obstacle barrier values"},
                {"panel": "multirotor.estimation", "x": "t",
                 "y": ["delta_true_norm", "delta_hat_norm", "err_norm", "err_bound"],
                 "description": "uncertainty norm, estimate norm, error and bound"}
            ])
        }
    };
    let files: Vec<&str> = report.runs.iter().filter_map(|r| r.trace_file.as_deref()).collect();
    json!({
        "scenario": cfg.scenario.as_str(),
        "mode": cfg.mode.as_str(),
        "trace_dir": "traces",
        "traces": files,
        "panels": panels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub scenario: String,
    pub estimate: BoundEstimate,
    pub declared_delta_l: f64,
    pub declared_delta_b: f64,
    pub within_declared: bool,
}

/// Estimates the uncertainty magnitude and rate over `runs` seeded draws,
/// closing the loop with the nominal (non-robust) filter.
pub fn bounds_probe(params: &ScenarioParams, runs: usize, integ: &IntegratorConfig, seed0: u64) -> Result<ProbeReport> {
    let (scenario, estimate) = match params {
        ScenarioParams::Acc(sc) => (
            "acc",
            probe_uncertainty_bounds(runs, integ, |i| {
                let unc = sc.draw(seed0 + i as u64);
                Ok(ProbeCase {
                    sys: sc.true_system(Some(&unc)),
                    x0: sc.x0(),
                    controller: Box::new(AccController::new(sc, AccMode::Unprotected)?),
                })
            })?,
        ),
        ScenarioParams::Multirotor(sc) => (
            "multirotor",
            probe_uncertainty_bounds(runs, integ, |i| {
                let unc = sc.draw(seed0 + i as u64);
                Ok(ProbeCase {
                    sys: sc.true_system(Some(&unc)),
                    x0: sc.x0()?,
                    controller: Box::new(MultirotorController::new(sc, MultirotorMode::Unprotected)?),
                })
            })?,
        ),
    };
    let (dl, db) = params.declared_bounds();
    if runs == 0 {
        return Err(Error::param("runs", "must be positive"));
    }
    Ok(ProbeReport {
        scenario: scenario.into(),
        estimate,
        declared_delta_l: dl,
        declared_delta_b: db,
        within_declared: estimate.delta_l <= dl && estimate.delta_b <= db,
    })
}
