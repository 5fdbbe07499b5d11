//! Command-line driver for the edge MPC testbed.
//!
//! Exit codes, stable across releases:
//!
//! | code | meaning                                    |
//! |------|--------------------------------------------|
//! | 0    | success                                    |
//! | 1    | run failed (solver failures or aborted)    |
//! | 2    | invalid config or CSV schema mismatch      |
//! | 3    | bind/connect failure                       |
//! | 4    | protocol version mismatch                  |
//!
//! `EDGE_MPC_LOG` (error|warn|info|debug) controls log verbosity; logs go to
//! standard error, data artifacts to files.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};

use edge_mpc::config::{ConfigError, RunConfig};
use edge_mpc::protocol::{fly, EdgeServer, FlyOptions, ProtocolError};
use edge_mpc::report::{summary_json, RunReport};
use edge_mpc::trajectory::TrajectoryKind;
use edge_mpc::{run_closed_loop, Error};

const EXIT_OK: i32 = 0;
const EXIT_RUN_FAILED: i32 = 1;
const EXIT_BAD_CONFIG: i32 = 2;
const EXIT_NET: i32 = 3;
const EXIT_VERSION: i32 = 4;

#[derive(Parser)]
#[command(
    name = "edge-mpc",
    version,
    about = "Quadrotor MPC loop closed over a delay-injecting edge link"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the in-process closed loop and write run.csv + summary.json.
    Simulate {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the report artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the trajectory kind (circular|spiral|helical|hover).
        #[arg(long)]
        trajectory: Option<String>,
    },
    /// Host the edge controller and handle one session.
    Serve {
        /// Port to listen on (0 picks an ephemeral port).
        #[arg(long, default_value_t = 7501)]
        port: u16,
        /// Address to bind.
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// JSON run configuration (controller blocks are used).
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the plant against a remote edge and write run.csv + summary.json.
    Fly {
        /// Edge address, e.g. 127.0.0.1:7501.
        #[arg(long)]
        addr: String,
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the report artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// How long to retry the initial connection, ms.
        #[arg(long, default_value_t = 2000)]
        connect_timeout_ms: u64,
    },
    /// Recompute and print the summary of a run CSV.
    Report {
        /// Path to a run.csv produced by simulate or fly.
        #[arg(long = "in")]
        input: PathBuf,
        /// Tolerance echoed into the summary (must match the run's).
        #[arg(long)]
        tolerance: Option<f64>,
        /// Transient window echoed into the summary (must match the run's).
        #[arg(long)]
        transient: Option<f64>,
    },
    /// Parse and validate a config file.
    ConfigCheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EDGE_MPC_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    std::process::exit(run(cli.command));
}

fn load_config(path: &Path) -> Result<RunConfig, i32> {
    RunConfig::load(path).map_err(|e| {
        eprintln!("invalid config {}: {e}", path.display());
        EXIT_BAD_CONFIG
    })
}

fn parse_trajectory(name: &str) -> Result<TrajectoryKind, i32> {
    match name.to_ascii_lowercase().as_str() {
        "circular" => Ok(TrajectoryKind::Circular),
        "spiral" => Ok(TrajectoryKind::Spiral),
        "helical" => Ok(TrajectoryKind::Helical),
        "hover" => Ok(TrajectoryKind::Hover),
        other => {
            eprintln!("unknown trajectory `{other}` (expected circular|spiral|helical|hover)");
            Err(EXIT_BAD_CONFIG)
        }
    }
}

fn finish_run(report: &RunReport, out: &Path) -> i32 {
    let summary = report.summary();
    match report.export(out) {
        Ok((csv_path, json_path)) => {
            log::info!(
                "wrote {} and {}",
                csv_path.display(),
                json_path.display()
            );
        }
        Err(e) => {
            eprintln!("failed to write report to {}: {e}", out.display());
            return EXIT_RUN_FAILED;
        }
    }
    print!("{}", summary_json(&summary));
    if report.aborted {
        eprintln!("run aborted early; the log is partial");
        return EXIT_RUN_FAILED;
    }
    if summary.failed {
        eprintln!(
            "run failed: {} of {} steps flagged",
            summary.flagged_steps, summary.steps
        );
        return EXIT_RUN_FAILED;
    }
    EXIT_OK
}

fn run(command: Command) -> i32 {
    match command {
        Command::Simulate {
            config,
            out,
            seed,
            trajectory,
        } => {
            let mut config = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(name) = trajectory {
                match parse_trajectory(&name) {
                    Ok(kind) => config.trajectory.kind = kind,
                    Err(code) => return code,
                }
            }
            match run_closed_loop(&config) {
                Ok(report) => finish_run(&report, &out),
                Err(e) => {
                    eprintln!("run failed: {e}");
                    EXIT_RUN_FAILED
                }
            }
        }

        Command::Serve { port, bind, config } => {
            let config = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let server = match EdgeServer::bind(&format!("{bind}:{port}")) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("failed to bind {bind}:{port}: {e}");
                    return EXIT_NET;
                }
            };
            match server.local_addr() {
                Ok(addr) => log::info!("listening on {addr}"),
                Err(_) => {}
            }
            match server.serve_once(&config) {
                Ok(stats) => {
                    log::info!(
                        "session complete: {} states, {} solver failures",
                        stats.states_handled,
                        stats.solver_failures
                    );
                    EXIT_OK
                }
                Err(ProtocolError::VersionMismatch { ours, theirs }) => {
                    eprintln!("protocol version mismatch: ours {ours}, client {theirs}");
                    EXIT_VERSION
                }
                Err(e) => {
                    eprintln!("session failed: {e}");
                    EXIT_RUN_FAILED
                }
            }
        }

        Command::Fly {
            addr,
            config,
            out,
            seed,
            connect_timeout_ms,
        } => {
            let mut config = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let opts = FlyOptions {
                addr,
                connect_timeout: Duration::from_millis(connect_timeout_ms),
            };
            match fly(&config, &opts) {
                Ok(report) => finish_run(&report, &out),
                Err(ProtocolError::VersionMismatch { ours, theirs }) => {
                    eprintln!("protocol version mismatch: ours {ours}, server {theirs}");
                    EXIT_VERSION
                }
                Err(ProtocolError::Io(e)) => {
                    eprintln!("connection failed: {e}");
                    EXIT_NET
                }
                Err(e) => {
                    eprintln!("flight failed: {e}");
                    EXIT_RUN_FAILED
                }
            }
        }

        Command::Report {
            input,
            tolerance,
            transient,
        } => {
            let text = match std::fs::read_to_string(&input) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("cannot read {}: {e}", input.display());
                    return EXIT_BAD_CONFIG;
                }
            };
            let tolerance = tolerance.unwrap_or_else(|| 0.68f64.sqrt());
            let transient = transient.unwrap_or(3.0);
            match RunReport::from_csv_str(&text, tolerance, transient) {
                Ok(report) => {
                    print!("{}", summary_json(&report.summary()));
                    EXIT_OK
                }
                Err(Error::InvalidArgument(msg)) => {
                    eprintln!("csv schema mismatch: {msg}");
                    EXIT_BAD_CONFIG
                }
                Err(e) => {
                    eprintln!("csv schema mismatch: {e}");
                    EXIT_BAD_CONFIG
                }
            }
        }

        Command::ConfigCheck { config } => match ConfigFileSummary::check(&config) {
            Ok(line) => {
                println!("{line}");
                EXIT_OK
            }
            Err(e) => {
                eprintln!("invalid config {}: {e}", config.display());
                EXIT_BAD_CONFIG
            }
        },
    }
}

struct ConfigFileSummary;

impl ConfigFileSummary {
    fn check(path: &Path) -> Result<String, ConfigError> {
        let config = RunConfig::load(path)?;
        Ok(format!(
            "ok: {:?} trajectory, horizon {} at {} s, {} s run, tolerance {:.4} m",
            config.trajectory.kind,
            config.mpc.horizon,
            config.mpc.dt,
            config.duration,
            config.tolerance
        ))
    }
}
