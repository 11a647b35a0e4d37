use std::fs;

use rcbf::dynamics::IntegratorConfig;
use rcbf::harness::{
    emit_trace, git_blob_hash, read_trace, run_and_summarise, run_batch, trace_stats, ConfigFile, RunConfig,
};

fn short(scenario: &str, mode: &str, t_final: f64) -> RunConfig {
    let mut cfg = RunConfig::defaults(scenario, mode).unwrap();
    cfg.integrator = IntegratorConfig::new(1e-3, t_final).unwrap();
    cfg
}

#[test]
fn trace_file_round_trip_preserves_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short("acc", "method1", 2.0);
    let (summary, trace) = run_and_summarise(&cfg, 1, None).unwrap();
    let path = dir.path().join("t.csv");
    let hash = emit_trace(&trace, &path).unwrap();
    assert_eq!(hash, git_blob_hash(&fs::read(&path).unwrap()));

    let back = read_trace(&path).unwrap();
    assert_eq!(back.columns.len(), 14);
    assert_eq!(back.status, trace.status);
    let stats = trace_stats(&cfg, &back).unwrap();
    for (k, v) in &summary.stats.min_h {
        assert_eq!(stats.min_h[k].to_bits(), v.to_bits(), "{k}");
    }
    let (a, b) = (stats.max_estimation_error.unwrap(), summary.stats.max_estimation_error.unwrap());
    assert!((a - b).abs() <= 1e-12);

    let header = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header.split(',').count(), 15);
    assert!(header.ends_with("qp_status"));
}

#[test]
fn identical_configs_write_identical_bytes() {
    let cfg = short("acc", "method2", 1.0);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = run_and_summarise(&cfg, 3, Some(a.path())).unwrap().0;
    let tb = run_and_summarise(&cfg, 3, Some(b.path())).unwrap().0;
    assert_eq!(ta.trace_hash, tb.trace_hash);
    let name = ta.trace_file.unwrap();
    assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
}

#[test]
fn multirotor_batch_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short("multirotor", "method2_hocbf", 3.0);
    cfg.seeds = (1..=10).collect();
    cfg.output_dir = dir.path().to_path_buf();
    let report = run_batch(&cfg).unwrap();
    assert_eq!(report.runs.len(), 10);
    assert_eq!(report.exit_code, 0);
    let traces = fs::read_dir(dir.path().join("traces")).unwrap().count();
    assert_eq!(traces, 10);
    for f in ["summary.json", "manifest.json", "config.resolved.json"] {
        let text = fs::read_to_string(dir.path().join(f)).unwrap();
        serde_json::from_str::<serde_json::Value>(&text).unwrap();
    }
}

#[test]
fn resolved_config_reloads_to_the_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(
        &path,
        r#"{"scenario": "acc", "mode": "method2", "seeds": [1, 2], "overrides": {"vehicle.mass": 1700.0}}"#,
    )
    .unwrap();
    let cfg = ConfigFile::load(&path).unwrap().resolve().unwrap();
    assert_eq!(cfg.provenance["vehicle.mass"].to_string(), "override");
    let text = serde_json::to_string(&cfg.to_json()).unwrap();
    let again = ConfigFile::parse(&text).unwrap().resolve().unwrap();
    assert_eq!(again.hash(), cfg.hash());
    assert_eq!(again.to_json(), cfg.to_json());
}
