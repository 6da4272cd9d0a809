//! Experiment lifecycle: build the deployment, run the mutator, recorders and
//! client sessions side by side, then analyze what the recorders wrote.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tracing::{info, warn};

use crate::analysis::{render_plots, summary_report, tradeoff_report, ConfigDataset, TradeoffReport};
use crate::client::StreamSession;
use crate::error::{Error, Result};
use crate::gateway::{Gateway, GatewayOptions, HttpProber, Prober, ServerEntry, VirtualProber};
use crate::metrics::{log_cpu, record_ping_rounds, CpuEndpoint, MetricSeries};
use crate::netsim::{run_delay_mutator, run_tasks, Clock, Network, Rate, Task, VirtualLink, MUTATION_LOG_HEADER};
use crate::origin::{Manifest, OriginOptions, OriginServer};
use crate::topology::{build_topology, validate_config, ClockMode, ExperimentConfig, Scenario};
use crate::transport::{DirectTransport, HttpTransport, Peer, Transport, VirtualNet, VirtualTransport};
use crate::wall::WallDeployment;

pub const PING_CSV: &str = "ping.csv";
pub const CPU_CSV: &str = "cpu.csv";
pub const DECISION_LOG: &str = "decisions.csv";
pub const MUTATION_LOG: &str = "mutations.csv";
pub const SCENARIO_SNAPSHOT: &str = "scenario.json";
pub const REPORT_DIR: &str = "report";

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Desk-scale recorder lengths.
    pub quick: bool,
    /// Force wall-clock mode regardless of the scenario.
    pub wall: bool,
    pub seed: Option<u64>,
    /// Wall mode only.
    pub host: String,
    /// Wall mode only; 0 picks free ports.
    pub base_port: u16,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            quick: false,
            wall: false,
            seed: None,
            host: "127.0.0.1".into(),
            base_port: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub run_id: String,
    /// The config actually run, after option overrides.
    pub config_snapshot: ExperimentConfig,
    /// Byte copy of the scenario as given.
    pub scenario_file: PathBuf,
    pub ping_csv: PathBuf,
    pub cpu_csv: PathBuf,
    pub stream_reports: Vec<PathBuf>,
    pub segment_logs: Vec<PathBuf>,
    pub decision_log: PathBuf,
    pub mutation_log: PathBuf,
    pub report_dir: PathBuf,
    pub rtt: MetricSeries,
    pub cpu: MetricSeries,
    pub sessions_completed: u32,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    run_id: &'a str,
    scenario: &'a str,
    seed: u64,
    clock_mode: ClockMode,
    server_count: usize,
    ping_rounds: usize,
    cpu_rounds: usize,
    sessions_completed: u32,
    gateway_decisions: usize,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gateway_options(config: &ExperimentConfig) -> GatewayOptions {
    GatewayOptions {
        seed: rng_stream(config.seed, 4).random(),
        probe_cache_ttl_ms: config.probe_cache_ttl_s.map(|s| s * 1000.0),
    }
}

/// Everything the activities of one run talk to.
struct Deployment {
    net: Arc<VirtualNet>,
    servers: Vec<ServerEntry>,
    gateway: Arc<Gateway>,
    recorder_prober: Box<dyn Prober>,
    scrape: Box<dyn Transport>,
    client: Box<dyn Transport>,
    manifest_url: String,
    redirect_base: String,
    metrics: Vec<CpuEndpoint>,
    _wall: Option<WallDeployment>,
}

/// Builds the emulated network and provisioned origins for a config.
pub fn virtual_net(config: &ExperimentConfig) -> Result<Arc<VirtualNet>> {
    let topology = build_topology(config)?;
    // Link ids are 2i (gateway side) and 2i+1 (client side); both get half
    // the server's base RTT as one-way delay.
    let network = Network::new(config.base_rtt_ms.iter().flat_map(|rtt| [rtt / 2.0, rtt / 2.0]));
    let manifest = Manifest::generate(
        &config.content.video_id,
        config.content.segment_count,
        config.content.segment_bytes,
        config.content.segment_duration_s,
    );
    let throttle = Rate::from_option(config.server_throttle_bytes_per_s)?;
    let origins = topology
        .server_names()
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let mut origin = OriginServer::new(
                name,
                OriginOptions {
                    throttle,
                    cores: 1.0,
                    base_load: config.cpu_base_load,
                },
            );
            origin.provision(manifest.clone());
            origin.set_down(config.down_servers.contains(&i));
            Arc::new(origin)
        })
        .collect();
    Ok(Arc::new(VirtualNet {
        topology,
        network,
        origins,
        timeout_ms: config.probe_timeout_s * 1000.0,
    }))
}

fn entries(net: &VirtualNet, base_urls: &[String]) -> Vec<ServerEntry> {
    net.topology
        .servers
        .iter()
        .enumerate()
        .map(|(index, id)| ServerEntry {
            id: *id,
            index,
            name: net.topology.name(*id).to_string(),
            base_url: base_urls[index].clone(),
        })
        .collect()
}

/// An in-process deployment: origins, links and a gateway reachable at the
/// virtual host `gateway`.
pub struct VirtualDeployment {
    pub net: Arc<VirtualNet>,
    pub servers: Vec<ServerEntry>,
    pub gateway: Arc<Gateway>,
    video_id: String,
    overhead_ms: f64,
}

impl VirtualDeployment {
    pub const REDIRECT_BASE: &'static str = "http://gateway/cdn/";

    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self::with_net(virtual_net(config)?, config, gateway_options(config)))
    }

    fn with_net(net: Arc<VirtualNet>, config: &ExperimentConfig, options: GatewayOptions) -> Self {
        let base_urls: Vec<String> = (0..net.origins.len()).map(|i| net.base_url(i)).collect();
        let servers = entries(&net, &base_urls);
        VirtualDeployment {
            gateway: Arc::new(Gateway::new(
                servers.clone(),
                Box::new(VirtualProber {
                    net: net.clone(),
                    overhead_ms: config.coordination_overhead_ms(),
                    timeout_ms: net.timeout_ms,
                    consume_time: true,
                }),
                Box::new(VirtualTransport {
                    net: net.clone(),
                    gateway: None,
                    peer: Peer::Gateway,
                }),
                options,
            )),
            net,
            servers,
            video_id: config.content.video_id.clone(),
            overhead_ms: config.coordination_overhead_ms(),
        }
    }

    /// A prober with the gateway's view of the links.
    pub fn prober(&self, consume_time: bool) -> VirtualProber {
        VirtualProber {
            net: self.net.clone(),
            overhead_ms: self.overhead_ms,
            timeout_ms: self.net.timeout_ms,
            consume_time,
        }
    }

    /// What a client uses: the gateway plus client-side links to origins.
    pub fn client_transport(&self) -> VirtualTransport {
        VirtualTransport {
            net: self.net.clone(),
            gateway: Some(self.gateway.clone()),
            peer: Peer::Client,
        }
    }

    pub fn manifest_url(&self) -> String {
        format!("http://gateway/manifest/{}", self.video_id)
    }
}

impl Deployment {
    fn build(config: &ExperimentConfig, options: &RunOptions) -> Result<Self> {
        let net = virtual_net(config)?;
        let overhead_ms = config.coordination_overhead_ms();
        let gateway_options = gateway_options(config);
        let video = &config.content.video_id;
        match config.clock_mode {
            ClockMode::Virtual => {
                let v = VirtualDeployment::with_net(net, config, gateway_options);
                Ok(Deployment {
                    metrics: metrics_endpoints(&v.servers),
                    recorder_prober: Box::new(v.prober(false)),
                    scrape: Box::new(DirectTransport { net: v.net.clone() }),
                    client: Box::new(v.client_transport()),
                    manifest_url: v.manifest_url(),
                    redirect_base: VirtualDeployment::REDIRECT_BASE.into(),
                    net: v.net,
                    servers: v.servers,
                    gateway: v.gateway,
                    _wall: None,
                })
            }
            ClockMode::Wall => {
                let timeout = Duration::from_secs_f64(config.probe_timeout_s);
                let mut wall = WallDeployment::start_origins(net.clone(), &options.host, options.base_port)?;
                let servers = entries(&net, &wall.origin_urls);
                let gateway = Arc::new(Gateway::new(
                    servers.clone(),
                    Box::new(HttpProber::new(timeout, overhead_ms)),
                    Box::new(HttpTransport::new(Peer::Gateway, timeout)),
                    gateway_options,
                ));
                let gateway_url = wall.serve_gateway(gateway.clone(), options.base_port)?;
                Ok(Deployment {
                    metrics: metrics_endpoints(&servers),
                    recorder_prober: Box::new(HttpProber::new(timeout, overhead_ms)),
                    scrape: Box::new(HttpTransport::new(Peer::Gateway, timeout)),
                    client: Box::new(HttpTransport::new(Peer::Client, Duration::from_secs(120))),
                    manifest_url: format!("{gateway_url}manifest/{video}"),
                    redirect_base: format!("{gateway_url}cdn/"),
                    net,
                    servers,
                    gateway,
                    _wall: Some(wall),
                })
            }
        }
    }
}

/// Real listeners for one config, up until dropped. Link delays stay at their
/// configured values.
pub struct LiveDeployment {
    pub gateway_url: String,
    pub origin_urls: Vec<String>,
    pub manifest_url: String,
    _deployment: Deployment,
}

pub fn serve_live(config: &ExperimentConfig, host: &str, base_port: u16) -> Result<LiveDeployment> {
    ensure_valid(config)?;
    let mut config = config.clone();
    config.clock_mode = ClockMode::Wall;
    let options = RunOptions {
        host: host.to_string(),
        base_port,
        ..RunOptions::default()
    };
    let d = Deployment::build(&config, &options)?;
    Ok(LiveDeployment {
        gateway_url: d.redirect_base.trim_end_matches("cdn/").to_string(),
        origin_urls: d.servers.iter().map(|s| s.base_url.clone()).collect(),
        manifest_url: d.manifest_url.clone(),
        _deployment: d,
    })
}

fn ensure_valid(config: &ExperimentConfig) -> Result<()> {
    let violations = validate_config(config);
    if violations.is_empty() {
        return Ok(());
    }
    let messages: Vec<_> = violations.iter().map(|v| v.message.as_str()).collect();
    Err(Error::InvalidConfig(messages.join("; ")))
}

fn metrics_endpoints(servers: &[ServerEntry]) -> Vec<CpuEndpoint> {
    servers
        .iter()
        .map(|s| CpuEndpoint {
            instance: s.name.clone(),
            url: format!("{}metrics", s.base_url),
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_report(report: &TradeoffReport, datasets: &BTreeMap<String, ConfigDataset>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(dir.join("report.txt"), report.narrative.join("\n") + "\n")?;
    render_plots(report, datasets, dir)?;
    Ok(())
}

const PHASES: [&str; 4] = ["mutator", "ping-recorder", "cpu-logger", "client"];

/// Runs one scenario end to end into `out_dir`.
pub fn run_experiment(scenario: &Scenario, out_dir: &Path, options: &RunOptions) -> Result<RunArtifacts> {
    let mut config = scenario.config.clone();
    if options.quick {
        config = config.quick();
    }
    if let Some(seed) = options.seed {
        config.seed = seed;
    }
    if options.wall {
        config.clock_mode = ClockMode::Wall;
    }
    ensure_valid(&config)?;
    let run_id = format!("{}-seed{}", scenario.name, config.seed);
    info!(run_id, servers = config.server_count, mode = ?config.clock_mode, "starting run");

    fs::create_dir_all(out_dir).map_err(|e| Error::from(e).in_phase("setup"))?;
    let path = |name: &str| out_dir.join(name);
    fs::write(path(SCENARIO_SNAPSHOT), &scenario.source).map_err(|e| Error::from(e).in_phase("setup"))?;

    let deployment = Deployment::build(&config, options).map_err(|e| e.in_phase("build"))?;
    deployment
        .gateway
        .set_decision_log(Box::new(create(&path(DECISION_LOG))?))
        .map_err(|e| e.in_phase("build"))?;

    let rtt_slot = Mutex::new(None);
    let cpu_slot = Mutex::new(None);
    let reports = Mutex::new(Vec::new());
    let sessions = Mutex::new(0u32);
    let mut mutation_log = create(&path(MUTATION_LOG))?;

    let mut tasks = Vec::new();
    let d = &deployment;
    let cfg = &config;
    if cfg.delay_mutator.enabled {
        let link = d
            .net
            .topology
            .gateway_link(cfg.delay_mutator.target_server)
            .ok_or_else(|| Error::UnknownServer(cfg.delay_mutator.target_server.to_string()))?;
        let log = &mut mutation_log;
        tasks.push(Task::daemon(PHASES[0], move |clock| {
            let mut target = VirtualLink {
                network: &d.net.network,
                link,
            };
            let mut rng = rng_stream(cfg.seed, 1);
            run_delay_mutator(&cfg.delay_mutator, &mut target, clock, &mut rng, log).map(|_| ())
        }));
    } else {
        writeln!(mutation_log, "{MUTATION_LOG_HEADER}")?;
        mutation_log.flush()?;
    }
    let rtt_out = &rtt_slot;
    let ping_path = path(PING_CSV);
    tasks.push(Task::foreground(PHASES[1], move |clock| {
        let mut rng = rng_stream(cfg.seed, 2);
        let mut out = create(&ping_path)?;
        let series = record_ping_rounds(
            &d.servers,
            d.recorder_prober.as_ref(),
            &cfg.recorder,
            cfg.rtt_noise_lambda_ms,
            clock,
            &mut rng,
            &mut out,
        )?;
        *rtt_out.lock().unwrap_or_else(|e| e.into_inner()) = Some(series);
        Ok(())
    }));
    let cpu_out = &cpu_slot;
    let cpu_path = path(CPU_CSV);
    tasks.push(Task::foreground(PHASES[2], move |clock| {
        let mut rng = rng_stream(cfg.seed, 3);
        let mut out = create(&cpu_path)?;
        let series = log_cpu(
            &d.metrics,
            &cfg.recorder,
            cfg.cpu_noise_lambda_pct,
            d.scrape.as_ref(),
            clock,
            &mut rng,
            &mut out,
        )?;
        *cpu_out.lock().unwrap_or_else(|e| e.into_inner()) = Some(series);
        Ok(())
    }));
    let (reports_out, sessions_out) = (&reports, &sessions);
    tasks.push(Task::foreground(PHASES[3], move |clock| {
        client_activity(d, cfg, out_dir, clock, reports_out, sessions_out)
    }));

    let outcomes = run_tasks(config.clock_mode, tasks);
    drop(mutation_log);
    for outcome in outcomes {
        if let Err(e) = outcome.result {
            let phase = PHASES.iter().find(|p| **p == outcome.name).copied().unwrap_or("run");
            warn!(phase, error = %e, "activity failed");
            return Err(e.in_phase(phase));
        }
    }

    let rtt = rtt_slot.into_inner().unwrap_or_else(|e| e.into_inner()).expect("ping recorder finished");
    let cpu = cpu_slot.into_inner().unwrap_or_else(|e| e.into_inner()).expect("cpu logger finished");
    let (stream_reports, segment_logs): (Vec<_>, Vec<_>) =
        reports.into_inner().unwrap_or_else(|e| e.into_inner()).into_iter().unzip();
    let sessions_completed = sessions.into_inner().unwrap_or_else(|e| e.into_inner());

    let report_dir = path(REPORT_DIR);
    let mut datasets = BTreeMap::new();
    datasets.insert(
        scenario.name.clone(),
        ConfigDataset {
            rtt: rtt.clone(),
            cpu: cpu.clone(),
        },
    );
    summary_report(&datasets, true)
        .and_then(|report| write_report(&report, &datasets, &report_dir))
        .map_err(|e| e.in_phase("analysis"))?;

    let summary = RunSummary {
        run_id: &run_id,
        scenario: &scenario.name,
        seed: config.seed,
        clock_mode: config.clock_mode,
        server_count: config.server_count,
        ping_rounds: rtt.rows.len(),
        cpu_rounds: cpu.rows.len(),
        sessions_completed,
        gateway_decisions: deployment.gateway.decisions().len(),
    };
    fs::write(path("run.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    info!(run_id, sessions_completed, "run finished");

    Ok(RunArtifacts {
        run_id,
        config_snapshot: config,
        scenario_file: path(SCENARIO_SNAPSHOT),
        ping_csv: path(PING_CSV),
        cpu_csv: path(CPU_CSV),
        stream_reports,
        segment_logs,
        decision_log: path(DECISION_LOG),
        mutation_log: path(MUTATION_LOG),
        report_dir,
        rtt,
        cpu,
        sessions_completed,
    })
}

/// The configured sessions run in the foreground; afterwards the client keeps
/// looping the video as background load until the recorders finish.
fn client_activity(
    d: &Deployment,
    cfg: &ExperimentConfig,
    out_dir: &Path,
    clock: &dyn Clock,
    reports: &Mutex<Vec<(PathBuf, PathBuf)>>,
    sessions: &Mutex<u32>,
) -> Result<()> {
    let throttle = Rate::from_option(cfg.client.rate_bytes_per_s)?;
    let new_session = || {
        let mut s = StreamSession::new(d.manifest_url.clone());
        s.redirect_base = d.redirect_base.clone();
        s.client_throttle = throttle;
        s
    };
    for k in 1..=cfg.client.repetitions {
        let report = new_session().stream(d.client.as_ref(), clock)?;
        let json = out_dir.join(format!("stream_report_{k}.json"));
        let csv = out_dir.join(format!("segments_{k}.csv"));
        fs::write(&json, serde_json::to_string_pretty(&report)? + "\n")?;
        fs::write(&csv, report.segment_log_csv())?;
        reports.lock().unwrap_or_else(|e| e.into_inner()).push((json, csv));
        *sessions.lock().unwrap_or_else(|e| e.into_inner()) += 1;
    }
    if !cfg.client.loop_until_done {
        return Ok(());
    }
    clock.detach();
    loop {
        new_session().stream(d.client.as_ref(), clock)?;
        *sessions.lock().unwrap_or_else(|e| e.into_inner()) += 1;
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub report: TradeoffReport,
    pub runs: Vec<RunArtifacts>,
    pub report_dir: PathBuf,
}

/// Runs every scenario into `out_dir/<name>/`, then compares them.
pub fn run_suite(scenarios: &[Scenario], out_dir: &Path, options: &RunOptions) -> Result<SuiteOutcome> {
    if scenarios.len() < 2 {
        return Err(Error::InsufficientConfigs(scenarios.len()));
    }
    let mut names: Vec<&str> = scenarios.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig(format!("scenario name {:?} appears twice", w[0])));
    }
    let mut runs = Vec::new();
    let mut datasets = BTreeMap::new();
    for scenario in scenarios {
        let run = run_experiment(scenario, &out_dir.join(&scenario.name), options)?;
        datasets.insert(
            scenario.name.clone(),
            ConfigDataset {
                rtt: run.rtt.clone(),
                cpu: run.cpu.clone(),
            },
        );
        runs.push(run);
    }
    let report_dir = out_dir.join(REPORT_DIR);
    let report = tradeoff_report(&datasets, false)
        .and_then(|report| write_report(&report, &datasets, &report_dir).map(|_| report))
        .map_err(|e| e.in_phase("analysis"))?;
    Ok(SuiteOutcome {
        report,
        runs,
        report_dir,
    })
}
