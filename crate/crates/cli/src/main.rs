use std::fs::{self, OpenOptions};
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use offload_core::profiler::ProfileStore;
use offload_core::protocol::tcp::{run_client, run_server, LiveClientOptions, LiveServerOptions};
use offload_core::sim::metrics::{trace_to_jsonl, TRACE_FILE};
use offload_core::sim::{
    build_client, build_server, compare_runs, presets, run_scenario_with, RunSummary, ScenarioConfig, SimOptions,
};
use offload_core::tasklib::TaskRegistry;
use offload_core::{Error, Result};

#[derive(Parser)]
#[command(name = "offload-kit", version, about = "Energy-aware offloading: simulate, compare, run live")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Client,
    Server,
}

#[derive(clap::Args)]
struct ScenarioArgs {
    /// Built-in scenario (fd50, fr, mixed_fleet).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Scenario file in JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Largest extra time, in seconds, a remote run may take over a local one.
    #[arg(long)]
    latency_budget: Option<f64>,
    /// Profile records to start from; new records are appended.
    #[arg(long)]
    profile_db: Option<PathBuf>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (_, Some(path)) => ScenarioConfig::from_json_file(path)?,
            (Some(name), None) => presets::preset(name)?,
            (None, None) => presets::preset("fd50")?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(l) = self.latency_budget {
            cfg.optimizer.latency_budget_s = l;
        }
        Ok(cfg)
    }

    fn profiles(&self) -> Result<Option<ProfileStore>> {
        self.profile_db.as_ref().map(ProfileStore::open).transpose()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario in the simulator and write trace.jsonl, metrics.csv
    /// and summary.txt.
    Sim {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_enum, default_value = "on")]
        offload: Switch,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a baseline run directory with another one.
    Compare {
        baseline: PathBuf,
        other: PathBuf,
        /// Also append the deltas to the second run's summary.txt.
        #[arg(long)]
        record: bool,
    },
    /// Run one side of a live offloading session over TCP.
    Live {
        #[arg(long, value_enum)]
        role: Role,
        /// Address the client listens on.
        #[arg(long, required_if_eq("role", "client"))]
        listen: Option<String>,
        /// Address of the client, for servers.
        #[arg(long, required_if_eq("role", "server"))]
        connect: Option<String>,
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Which of the scenario's servers this process plays.
        #[arg(long, default_value_t = 0)]
        server_index: usize,
        /// Servers the client waits for before releasing the workload.
        #[arg(long)]
        expect_servers: Option<usize>,
        #[arg(long, default_value_t = offload_core::protocol::tcp::DEFAULT_IDLE_TIMEOUT_S)]
        idle_timeout: f64,
        /// Directory for the live trace.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in scenarios.
    Presets,
    /// Print a scenario as JSON, as a starting point for --config.
    Show {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

fn sim(scenario: &ScenarioArgs, offload: Switch, out: &Path) -> Result<()> {
    let mut cfg = scenario.load()?;
    cfg.offloading = matches!(offload, Switch::On);
    let opts = SimOptions {
        profiles: scenario.profiles()?,
        ..SimOptions::default()
    };
    let run = run_scenario_with(&cfg, opts)?;
    run.metrics.write_outputs(out, &run.trace, "")?;
    print!("{}", run.metrics.summary().to_text());
    Ok(())
}

fn compare(baseline: &Path, other: &Path, record: bool) -> Result<()> {
    let a = RunSummary::read_dir(baseline)?;
    let b = RunSummary::read_dir(other)?;
    let cmp = compare_runs(&a, &b)?;
    let text = format!("compared_with: {}\n{}", baseline.display(), cmp.to_text());
    print!("{text}");
    if record {
        let mut f = OpenOptions::new()
            .append(true)
            .open(other.join(offload_core::sim::metrics::SUMMARY_FILE))?;
        f.write_all(text.as_bytes())?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn live(
    role: Role,
    listen: Option<&str>,
    connect: Option<&str>,
    scenario: &ScenarioArgs,
    server_index: usize,
    expect_servers: Option<usize>,
    idle_timeout: f64,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = scenario.load()?;
    let registry = Arc::new(TaskRegistry::with_demo_tasks());
    let trace = match role {
        Role::Client => {
            let addr = listen.ok_or_else(|| Error::InvalidParameter("--listen is required".into()))?;
            let listener = TcpListener::bind(addr)?;
            info!("listening on {}", listener.local_addr()?);
            let (client, arrivals) = build_client(&cfg, registry, scenario.profiles()?)?;
            let workload = arrivals.into_iter().map(|a| (a.at_s, a.instance)).collect();
            let opts = LiveClientOptions {
                expect_servers: expect_servers.unwrap_or(cfg.servers.len()),
                idle_timeout_s: idle_timeout,
                ..LiveClientOptions::default()
            };
            let report = run_client(listener, client, workload, &opts)?;
            let remote = report.completions.iter().filter(|(_, c)| c.remote).count();
            println!("tasks: {}", report.completions.len());
            println!("remote_tasks: {remote}");
            if let Some((t, _)) = report.completions.last() {
                println!("makespan_s: {t:.3}");
            }
            for row in &report.table {
                println!("{}", row.record);
            }
            report.trace
        }
        Role::Server => {
            let addr = connect.ok_or_else(|| Error::InvalidParameter("--connect is required".into()))?;
            let node = build_server(&cfg, server_index, registry)?;
            let opts = LiveServerOptions {
                idle_timeout_s: idle_timeout,
            };
            let report = run_server(addr, node, &opts)?;
            println!("frames_sent: {}", report.sent.len());
            report.trace
        }
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(TRACE_FILE), trace_to_jsonl(&trace))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sim { scenario, offload, out } => sim(&scenario, offload, &out),
        Command::Compare {
            baseline,
            other,
            record,
        } => compare(&baseline, &other, record),
        Command::Live {
            role,
            listen,
            connect,
            scenario,
            server_index,
            expect_servers,
            idle_timeout,
            out,
        } => live(
            role,
            listen.as_deref(),
            connect.as_deref(),
            &scenario,
            server_index,
            expect_servers,
            idle_timeout,
            out.as_deref(),
        ),
        Command::Presets => {
            for name in presets::PRESET_NAMES {
                println!("{name}");
            }
            Ok(())
        }
        Command::Show { scenario } => {
            println!("{}", scenario.load()?.to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
