use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drem_mrac::experiment::{
    compare_experiment, describe, load_config, run_experiment, ConfigError, ExperimentConfig,
    Overrides, Report, Status,
};

/// Adaptive tracking experiments: run, inspect and compare configs.
///
/// A config is a TOML file path, or `builtin:benchmark`, `builtin:matched`,
/// `builtin:slow_gain` for the bundled ones.
#[derive(Parser)]
#[command(name = "drem-mrac", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Simulate the proposed law, write the trace CSV and assertion report.
    Run {
        /// One or more configs; several run as independent jobs.
        #[arg(required = true)]
        configs: Vec<String>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Print dimensions, structural checks and the matching residual.
    Describe { config: String },
    /// Run the proposed law next to the baseline laws of `[baseline]`.
    Compare {
        config: String,
        #[command(flatten)]
        flags: Flags,
    },
}

#[derive(Args, Clone)]
struct Flags {
    /// Step size override (s).
    #[arg(long)]
    dt: Option<f64>,
    /// Final time override (s).
    #[arg(long = "T", value_name = "T")]
    t_final: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Reserved; the pipeline is deterministic. Recorded in the report.
    #[arg(long)]
    seed: Option<u64>,
    /// Significant digits per CSV value (1..=17).
    #[arg(long)]
    csv_precision: Option<usize>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            dt: self.dt,
            t_final: self.t_final,
            out_dir: self.out_dir.clone(),
            csv_precision: self.csv_precision,
            seed: self.seed,
        }
    }
}

fn load(path: &str, flags: Option<&Flags>) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = load_config(path)?;
    if let Some(f) = flags {
        cfg.apply_overrides(&f.overrides())?;
    }
    Ok(cfg)
}

fn print(report: &Report) {
    for line in report.lines() {
        println!("{line}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = match cli.verb {
        Verb::Describe { config } => match load(&config, None) {
            Ok(cfg) => {
                for line in describe(&cfg) {
                    println!("{line}");
                }
                Status::Pass
            }
            Err(e) => {
                eprintln!("error: {e}");
                Status::ConfigError
            }
        },
        Verb::Compare { config, flags } => match load(&config, Some(&flags)) {
            Ok(cfg) => {
                let report = compare_experiment(&cfg, flags.seed);
                print(&report);
                report.status
            }
            Err(e) => {
                eprintln!("error: {e}");
                Status::ConfigError
            }
        },
        Verb::Run { configs, flags } => {
            let statuses: Vec<Status> = std::thread::scope(|s| {
                let jobs: Vec<_> = configs
                    .iter()
                    .map(|path| {
                        let flags = flags.clone();
                        s.spawn(move || match load(path, Some(&flags)) {
                            Ok(cfg) => {
                                let r = run_experiment(&cfg, flags.seed);
                                (r.lines().join("\n"), r.status)
                            }
                            Err(e) => (format!("error: {e}"), Status::ConfigError),
                        })
                    })
                    .collect();
                jobs.into_iter()
                    .map(|j| {
                        let (text, status) = j.join().expect("job thread");
                        if status == Status::ConfigError && text.starts_with("error:") {
                            eprintln!("{text}");
                        } else {
                            println!("{text}");
                        }
                        status
                    })
                    .collect()
            });
            statuses.into_iter().max().unwrap_or(Status::Pass)
        }
    };
    ExitCode::from(status.code())
}
