use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use cdnlab_core::analysis::{load_series_csv, render_plots, summarize, tradeoff_report, ConfigDataset, TradeoffReport};
use cdnlab_core::client::{origin_base, StreamReport, StreamSession};
use cdnlab_core::metrics::{MetricKind, MetricSeries};
use cdnlab_core::netsim::{ManualClock, Rate, WallClock};
use cdnlab_core::orchestrator::{run_experiment, run_suite, serve_live, RunOptions, VirtualDeployment};
use cdnlab_core::topology::{load_scenario, validate_config, PRESET_NAMES};
use cdnlab_core::transport::{HttpTransport, Peer};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// CDN emulation harness: RTT-routed gateway, throttled DASH client and
/// RTT/CPU telemetry.
#[derive(Parser)]
#[command(name = "cdnlab", version)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario end to end.
    Run(RunArgs),
    /// Run several scenarios and compare them.
    Suite(SuiteArgs),
    /// Build the report and plots from recorded CSVs.
    Analyze(AnalyzeArgs),
    /// Stream a video through a gateway and log every segment.
    Stream(StreamArgs),
    /// Serve a scenario's origins and gateway on real ports until killed.
    Serve(ServeArgs),
    /// Check a scenario and list every problem with it.
    Check {
        #[arg(long)]
        scenario: String,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Args)]
struct Common {
    /// Recorder lengths of 100 rounds instead of the full cadence.
    #[arg(long)]
    quick: bool,
    /// Real listeners and real time instead of the virtual clock.
    #[arg(long)]
    wall: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// First port in wall mode; 0 picks free ports.
    #[arg(long, default_value_t = 0)]
    base_port: u16,
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            quick: self.quick,
            wall: self.wall,
            seed: self.seed,
            host: self.host.clone(),
            base_port: self.base_port,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Preset name or path to a scenario JSON file.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SuiteArgs {
    /// Presets or scenario files, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "testbed-4,testbed-8,testbed-12")]
    presets: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// `name=rtt.csv,cpu.csv`, once per configuration.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Add per-server RTT statistics.
    #[arg(long)]
    per_server: bool,
}

#[derive(Args)]
struct StreamArgs {
    /// Manifest URL on a running gateway or origin.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    manifest: Option<String>,
    /// Stream inside an in-process deployment of this preset or file instead.
    #[arg(long)]
    scenario: Option<String>,
    /// Client throttle in bytes/s; unlimited when omitted.
    #[arg(long)]
    rate: Option<f64>,
    /// Where segment requests are rewritten to. Defaults to `<manifest host>/cdn/`.
    #[arg(long)]
    redirect_base: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Keep the segment files under `<out>/segments`.
    #[arg(long)]
    save: bool,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120.0)]
    timeout: f64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "testbed-4")]
    scenario: String,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Gateway port; origins take the ports after it. 0 picks free ports.
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

/// Marks an error as the caller's fault.
#[derive(Debug)]
struct InvalidInput(String);

impl std::fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidInput {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(InvalidInput(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let invalid = err.chain().any(|cause| {
        cause.is::<InvalidInput>()
            || cause
                .downcast_ref::<cdnlab_core::Error>()
                .is_some_and(cdnlab_core::Error::is_invalid_input)
    });
    if invalid {
        EXIT_INVALID
    } else {
        EXIT_RUNTIME
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => run(args),
        Command::Suite(args) => suite(args),
        Command::Analyze(args) => analyze(args),
        Command::Stream(args) => stream(args),
        Command::Serve(args) => serve(args),
        Command::Check { scenario } => check(&scenario),
        Command::Presets => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn load(spec: &str) -> Result<cdnlab_core::topology::Scenario> {
    load_scenario(spec).map_err(|e| match e {
        cdnlab_core::Error::Io(io) => invalid(format!("scenario {spec:?}: {io}")),
        other => anyhow!(other).context(format!("scenario {spec:?}")),
    })
}

fn run(args: RunArgs) -> Result<()> {
    let scenario = load(&args.scenario)?;
    let run = run_experiment(&scenario, &args.out, &args.common.options())?;
    println!("run {}", run.run_id);
    print_series("rtt", &run.rtt, "ms");
    print_series("cpu", &run.cpu, "%");
    println!("sessions {}", run.sessions_completed);
    println!("ping csv {}", run.ping_csv.display());
    println!("cpu csv {}", run.cpu_csv.display());
    println!("report {}", run.report_dir.display());
    Ok(())
}

fn print_series(label: &str, series: &MetricSeries, unit: &str) {
    match summarize(&series.pooled()) {
        Ok(s) => println!("{label} median {:.1} {unit}, mean {:.1} {unit}, n {}", s.median, s.mean, s.n),
        Err(_) => println!("{label} no values"),
    }
}

fn suite(args: SuiteArgs) -> Result<()> {
    if args.presets.len() < 2 {
        return Err(invalid(format!("suite needs at least two scenarios, got {}", args.presets.len())));
    }
    let scenarios = args.presets.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let outcome = run_suite(&scenarios, &args.out, &args.common.options())?;
    print_report(&outcome.report);
    println!("report {}", outcome.report_dir.display());
    Ok(())
}

fn print_report(report: &TradeoffReport) {
    for line in &report.narrative {
        println!("{line}");
    }
}

/// Splits `name=rtt.csv,cpu.csv`.
fn parse_input(spec: &str) -> Result<(String, PathBuf, PathBuf)> {
    let (name, files) = spec
        .split_once('=')
        .ok_or_else(|| invalid(format!("input {spec:?} is not name=rtt.csv,cpu.csv")))?;
    let (rtt, cpu) = files
        .split_once(',')
        .ok_or_else(|| invalid(format!("input {spec:?} needs two files")))?;
    if name.is_empty() || rtt.is_empty() || cpu.is_empty() {
        return Err(invalid(format!("input {spec:?} has an empty part")));
    }
    Ok((name.to_string(), rtt.into(), cpu.into()))
}

fn read_series(path: &Path, metric: MetricKind) -> Result<MetricSeries> {
    if !path.is_file() {
        return Err(invalid(format!("no such file {}", path.display())));
    }
    load_series_csv(path, metric).with_context(|| format!("reading {}", path.display()))
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let mut datasets = BTreeMap::new();
    for spec in &args.inputs {
        let (name, rtt, cpu) = parse_input(spec)?;
        let data = ConfigDataset {
            rtt: read_series(&rtt, MetricKind::Rtt)?,
            cpu: read_series(&cpu, MetricKind::Cpu)?,
        };
        if datasets.insert(name.clone(), data).is_some() {
            return Err(invalid(format!("configuration {name:?} given twice")));
        }
    }
    let report = tradeoff_report(&datasets, args.per_server)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(args.out.join("report.txt"), report.narrative.join("\n") + "\n")?;
    render_plots(&report, &datasets, &args.out)?;
    print_report(&report);
    Ok(())
}

fn stream(args: StreamArgs) -> Result<()> {
    let throttle = Rate::from_option(args.rate)?;
    let save_dir = args.save.then(|| args.out.join("segments"));
    if let Some(dir) = &save_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let report = match (&args.manifest, &args.scenario) {
        (Some(url), _) => {
            let redirect_base = match &args.redirect_base {
                Some(b) => b.clone(),
                None => format!("{}cdn/", origin_base(url)?),
            };
            let mut session = StreamSession::new(url.clone());
            session.redirect_base = redirect_base;
            session.client_throttle = throttle;
            session.save_dir = save_dir;
            if !(args.timeout.is_finite() && args.timeout > 0.0) {
                return Err(invalid(format!("timeout {} must be positive", args.timeout)));
            }
            let transport = HttpTransport::new(Peer::Client, Duration::from_secs_f64(args.timeout));
            session.stream(&transport, &WallClock::new())?
        }
        (None, Some(spec)) => {
            let scenario = load(spec)?;
            if let Some(v) = validate_config(&scenario.config).first() {
                return Err(invalid(v.message.clone()));
            }
            let d = VirtualDeployment::build(&scenario.config)?;
            let mut session = StreamSession::new(d.manifest_url());
            session.redirect_base = args
                .redirect_base
                .clone()
                .unwrap_or_else(|| VirtualDeployment::REDIRECT_BASE.to_string());
            session.client_throttle = throttle;
            session.save_dir = save_dir;
            session.stream(&d.client_transport(), &ManualClock::new())?
        }
        (None, None) => return Err(invalid("give --manifest or --scenario")),
    };
    write_stream_report(&report, &args.out)?;
    println!(
        "{} of {} segments, {} bytes in {:.0} ms",
        report.segments_fetched, report.segments_expected, report.bytes, report.duration_ms
    );
    for (host, n) in &report.served_by {
        println!("  {host}: {n}");
    }
    if report.segments_failed > 0 {
        bail!("{} segments failed", report.segments_failed);
    }
    Ok(())
}

fn write_stream_report(report: &StreamReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("stream_report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(out.join("segments.csv"), report.segment_log_csv())?;
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let scenario = load(&args.scenario)?;
    let live = serve_live(&scenario.config, &args.host, args.port)?;
    println!("gateway {}", live.gateway_url);
    for url in &live.origin_urls {
        println!("origin {url}");
    }
    println!("manifest {}", live.manifest_url);
    loop {
        std::thread::park();
    }
}

fn check(spec: &str) -> Result<()> {
    let scenario = load(spec)?;
    let violations = validate_config(&scenario.config);
    if violations.is_empty() {
        println!("{}: ok", scenario.name);
        return Ok(());
    }
    for v in &violations {
        println!("{:?}: {}", v.code, v.message);
    }
    Err(invalid(format!("{} problems in {}", violations.len(), scenario.name)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_specs() {
        let (n, r, c) = parse_input("t4=a/ping.csv,a/cpu.csv").unwrap();
        assert_eq!((n.as_str(), r, c), ("t4", "a/ping.csv".into(), "a/cpu.csv".into()));
        for bad in ["t4", "t4=a.csv", "=a,b", "t4=,b"] {
            assert_eq!(exit_code(&parse_input(bad).unwrap_err()), EXIT_INVALID, "{bad}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&anyhow!(cdnlab_core::Error::InsufficientConfigs(1))), EXIT_INVALID);
        assert_eq!(exit_code(&anyhow!(cdnlab_core::Error::NoServers)), EXIT_RUNTIME);
        let wrapped = anyhow!(cdnlab_core::Error::EmptySeries).context("reading");
        assert_eq!(exit_code(&wrapped), EXIT_INVALID);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
