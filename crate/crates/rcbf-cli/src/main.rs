use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rcbf::dynamics::IntegratorConfig;
use rcbf::harness::{self, ConfigFile, DrawPolicy, ScenarioKind, EXIT_CONFIG};
use rcbf::Error;

#[derive(Parser)]
#[command(name = "rcbf", version, about = "Robust control barrier function simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Draw {
    Fixed,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of seeded simulations and write traces and summaries.
    Run {
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        mode: Option<String>,
        /// JSON config file; flags given here take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `7`, `1,4,9`, `1..10` (inclusive).
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t_final: Option<f64>,
        #[arg(long, value_enum)]
        draw: Option<Draw>,
    },
    /// Resolve a config and print it with provenance tags.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Estimate uncertainty magnitude and rate over seeded draws.
    BoundsProbe {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        /// Config whose overrides apply to the probed scenario.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t_final: Option<f64>,
    },
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config_error() || matches!(e, Error::ConfigParse { .. }) { EXIT_CONFIG as u8 } else { 1 })
}

fn load(path: Option<&PathBuf>) -> rcbf::Result<ConfigFile> {
    path.map_or_else(|| Ok(ConfigFile::default()), |p| ConfigFile::load(p))
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { scenario, mode, config, seeds, out, dt, t_final, draw } => {
            let resolved = (|| {
                let mut file = load(config.as_ref())?;
                file.scenario = scenario.or(file.scenario);
                file.mode = mode.or(file.mode);
                if let Some(s) = seeds {
                    file.seeds = Some(harness::parse_seeds(&s)?);
                }
                file.output_dir = out.or(file.output_dir);
                file.dt = dt.or(file.dt);
                file.t_final = t_final.or(file.t_final);
                if let Some(d) = draw {
                    file.draw = Some(match d {
                        Draw::Fixed => DrawPolicy::Fixed,
                        Draw::Random => DrawPolicy::Random,
                    });
                }
                file.resolve()
            })();
            let cfg = match resolved {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let report = match harness::run_batch(&cfg) {
                Ok(r) => r,
                Err(e) => return fail(&e),
            };
            for r in &report.runs {
                let min_h = r.stats.min_h.values().copied().fold(f64::INFINITY, f64::min);
                let note = match (&r.error, r.stats.safety_violated) {
                    (Some(e), _) => format!("  FAILED: {e}"),
                    (None, true) => "  safety violated".to_string(),
                    (None, false) => String::new(),
                };
                println!("{} {} seed {}: min h = {min_h:.6}{note}", r.scenario, r.mode, r.seed);
            }
            println!("summary: {}", cfg.output_dir.join("summary.json").display());
            if report.any_safety_violation && !report.robust {
                println!("note: violation expected in non-robust mode `{}`", report.mode);
            }
            ExitCode::from(report.exit_code as u8)
        }
        Command::Validate { config } => match harness::load_config(&config) {
            Ok(cfg) => {
                println!("{}", serde_json::to_string_pretty(&cfg.to_json()).expect("json"));
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::BoundsProbe { scenario, runs, config, seed, dt, t_final } => {
            let report = (|| {
                let kind = ScenarioKind::parse(&scenario)?;
                let mut file = load(config.as_ref())?;
                if file.scenario.as_deref().is_some_and(|s| s != scenario) {
                    return Err(Error::Config("config scenario differs from --scenario".into()));
                }
                file.scenario = Some(scenario.clone());
                file.mode = Some("unprotected".into());
                let cfg = file.resolve()?;
                let integ = IntegratorConfig::new(
                    dt.unwrap_or(cfg.integrator.dt),
                    t_final.unwrap_or(kind.default_t_final()),
                )?;
                harness::bounds_probe(&cfg.params, runs, &integ, seed)
            })();
            match report {
                Ok(r) => {
                    println!("{}", serde_json::to_string_pretty(&r).expect("json"));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
    }
}
