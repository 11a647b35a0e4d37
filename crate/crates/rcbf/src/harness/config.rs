//! Run configuration: parsing, override validation and provenance.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dynamics::IntegratorConfig;
use crate::error::{Error, Result};
use crate::scenarios::acc::{acc_defaults, AccController, AccMode, AccScenario};
use crate::scenarios::multirotor::{multirotor_defaults, MultirotorController, MultirotorMode, MultirotorScenario};
use crate::scenarios::{ParamSchema, Provenance};

pub const DEFAULT_DT: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Acc,
    Multirotor,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Acc => "acc",
            ScenarioKind::Multirotor => "multirotor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "acc" => Ok(ScenarioKind::Acc),
            "multirotor" => Ok(ScenarioKind::Multirotor),
            _ => Err(Error::Config(format!("unknown scenario `{s}` (expected acc or multirotor)"))),
        }
    }

    pub fn default_t_final(self) -> f64 {
        match self {
            ScenarioKind::Acc => 20.0,
            ScenarioKind::Multirotor => 15.0,
        }
    }

    pub fn default_mode(self) -> &'static str {
        match self {
            ScenarioKind::Acc => "method1",
            ScenarioKind::Multirotor => "method2_hocbf",
        }
    }

    /// ACC runs the scenario's own uncertainty; multirotor batches draw per seed.
    pub fn default_draw(self) -> DrawPolicy {
        match self {
            ScenarioKind::Acc => DrawPolicy::Fixed,
            ScenarioKind::Multirotor => DrawPolicy::Random,
        }
    }

    pub fn defaults(self) -> ScenarioParams {
        match self {
            ScenarioKind::Acc => ScenarioParams::Acc(acc_defaults()),
            ScenarioKind::Multirotor => ScenarioParams::Multirotor(multirotor_defaults()),
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How each seed picks its uncertainty realisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawPolicy {
    /// The scenario's `uncertainty.*` parameters for every seed.
    Fixed,
    /// A seeded draw from the `uncertainty.draw.*` ranges.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Acc(AccMode),
    Multirotor(MultirotorMode),
}

impl Mode {
    pub fn parse(kind: ScenarioKind, s: &str) -> Result<Self> {
        match kind {
            ScenarioKind::Acc => AccMode::parse(s).map(Mode::Acc),
            ScenarioKind::Multirotor => MultirotorMode::parse(s).map(Mode::Multirotor),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Acc(m) => m.as_str(),
            Mode::Multirotor(m) => m.as_str(),
        }
    }

    /// Modes whose safety claim is backed by the uncertainty estimate.
    pub fn is_robust(self) -> bool {
        match self {
            Mode::Acc(m) => m.is_robust(),
            Mode::Multirotor(m) => m.is_robust(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScenarioParams {
    Acc(AccScenario),
    Multirotor(MultirotorScenario),
}

impl ScenarioParams {
    pub fn schema(&self) -> &dyn ParamSchema {
        match self {
            ScenarioParams::Acc(s) => s,
            ScenarioParams::Multirotor(s) => s,
        }
    }

    fn schema_mut(&mut self) -> &mut dyn ParamSchema {
        match self {
            ScenarioParams::Acc(s) => s,
            ScenarioParams::Multirotor(s) => s,
        }
    }

    /// Declared `(delta_l, delta_b)`.
    pub fn declared_bounds(&self) -> (f64, f64) {
        match self {
            ScenarioParams::Acc(s) => (s.delta_l, s.delta_b),
            ScenarioParams::Multirotor(s) => (s.delta_l, s.delta_b),
        }
    }
}

/// The on-disk config document. Unknown top-level keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub scenario: Option<String>,
    pub mode: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub draw: Option<DrawPolicy>,
    /// Parameter overrides by schema key.
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
    /// Full parameter listing as written by a resolved config; entries that
    /// differ from the defaults count as overrides.
    #[serde(default)]
    pub parameters: BTreeMap<String, Value>,
    /// Informational; recomputed on load, but keys must exist.
    #[serde(default)]
    pub provenance: BTreeMap<String, Provenance>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ConfigParse {
            line: e.line(),
            column: e.column(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let kind = ScenarioKind::parse(self.scenario.as_deref().ok_or_else(|| Error::Config("missing `scenario`".into()))?)?;
        let mode = Mode::parse(kind, self.mode.as_deref().unwrap_or(kind.default_mode()))?;
        let defaults = kind.defaults();
        let mut params = defaults.clone();
        let known = defaults.schema().keys();
        let check_key = |k: &str| {
            if known.contains(&k) {
                Ok(())
            } else {
                Err(Error::Config(format!("unknown parameter `{k}` for scenario {kind}")))
            }
        };
        for k in self.provenance.keys() {
            check_key(k)?;
        }

        let default_values: BTreeMap<&str, Value> =
            defaults.schema().params().into_iter().map(|p| (p.key, p.value)).collect();
        let mut overrides = BTreeMap::new();
        for (k, v) in &self.parameters {
            check_key(k)?;
            if default_values.get(k.as_str()) != Some(v) {
                overrides.insert(k.clone(), v.clone());
            }
        }
        for (k, v) in &self.overrides {
            check_key(k)?;
            overrides.insert(k.clone(), v.clone());
        }
        // Multi-valued keys whose length depends on other keys are applied last.
        let mut ordered: Vec<(&String, &Value)> = overrides.iter().collect();
        ordered.sort_by_key(|(k, _)| *k == "obstacles.radii");
        for (k, v) in ordered {
            params.schema_mut().set_param(k, v)?;
        }

        let dt = self.dt.unwrap_or(DEFAULT_DT);
        let t_final = self.t_final.unwrap_or(kind.default_t_final());
        let integrator = IntegratorConfig::new(dt, t_final)?;
        let seeds = self.seeds.clone().unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return Err(Error::Config("`seeds` must not be empty".into()));
        }

        let mut provenance = BTreeMap::new();
        for p in params.schema().params() {
            let tag = if overrides.contains_key(p.key) { Provenance::Override } else { p.provenance };
            provenance.insert(p.key.to_string(), tag);
        }

        let cfg = RunConfig {
            scenario: kind,
            mode,
            seeds,
            integrator,
            output_dir: self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out")),
            draw: self.draw.unwrap_or(kind.default_draw()),
            overrides,
            params,
            provenance,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A fully resolved, validated run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioKind,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub integrator: IntegratorConfig,
    pub output_dir: PathBuf,
    pub draw: DrawPolicy,
    pub overrides: BTreeMap<String, Value>,
    pub params: ScenarioParams,
    pub provenance: BTreeMap<String, Provenance>,
}

impl RunConfig {
    /// Defaults for `scenario`/`mode` with a single seed.
    pub fn defaults(scenario: &str, mode: &str) -> Result<Self> {
        ConfigFile { scenario: Some(scenario.into()), mode: Some(mode.into()), ..Default::default() }.resolve()
    }

    /// Builds the controller once, which runs every parameter and design check.
    pub fn validate(&self) -> Result<()> {
        match (&self.params, self.mode) {
            (ScenarioParams::Acc(sc), Mode::Acc(m)) => {
                AccController::new(sc, m)?;
                if m.is_robust() && self.draw == DrawPolicy::Fixed {
                    let rep = sc.relative_degree_report(&sc.uncertainty)?;
                    if !rep.matched {
                        return Err(Error::MatchingFailure(format!(
                            "input relative degree {:?}, disturbance relative degree {:?}",
                            rep.ird, rep.drd
                        )));
                    }
                }
            }
            (ScenarioParams::Multirotor(sc), Mode::Multirotor(m)) => {
                MultirotorController::new(sc, m)?;
            }
            _ => return Err(Error::Config("mode does not belong to the scenario".into())),
        }
        Ok(())
    }

    /// Resolved document: loading it back reproduces this config.
    pub fn to_json(&self) -> Value {
        let parameters: BTreeMap<&str, Value> =
            self.params.schema().params().into_iter().map(|p| (p.key, p.value)).collect();
        json!({
            "scenario": self.scenario.as_str(),
            "mode": self.mode.as_str(),
            "seeds": self.seeds,
            "dt": self.integrator.dt,
            "t_final": self.integrator.t_final,
            "output_dir": self.output_dir,
            "draw": self.draw,
            "overrides": self.overrides,
            "parameters": parameters,
            "provenance": self.provenance,
        })
    }

    /// SHA-256 of the canonical resolved document without `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = self.to_json();
        v.as_object_mut().expect("object").remove("output_dir");
        let canonical = serde_json::to_string(&v).expect("json values serialise");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Reads, validates and resolves a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    ConfigFile::load(path)?.resolve()
}

/// Seed list syntax: `7`, `1,4,9`, `1..10` (inclusive) or `1..=10`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed list `{s}`"));
    let num = |t: &str| t.trim().parse::<u64>().map_err(|_| bad());
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(num).collect()
}
