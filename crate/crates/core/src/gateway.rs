//! The gateway: probe every server's RTT, pick the lowest (random server when
//! none answers) and answer segment requests with a 302 to the pick.

use std::io::Write;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::metrics::format_value;
use crate::netsim::Clock;
use crate::topology::NodeId;
use crate::transport::{HttpTransport, Peer, Response, Transport, VirtualNet};

/// Bytes in an application-level echo probe.
pub const ECHO_BYTES: u64 = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerEntry {
    pub id: NodeId,
    pub index: usize,
    pub name: String,
    /// Ends with `/`.
    pub base_url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub server: NodeId,
    /// `None` when the probe failed or timed out.
    pub rtt_ms: Option<f64>,
    pub probed_at: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub chosen: NodeId,
    /// Position of `chosen` in the candidate list.
    pub chosen_index: usize,
    pub min_rtt_ms: Option<f64>,
    pub fallback_used: bool,
    pub candidates: Vec<ProbeResult>,
}

/// Lowest present RTT wins, ties going to the earlier candidate. When every
/// RTT is absent a candidate is drawn uniformly at random.
pub fn select_server<R: Rng + ?Sized>(
    candidates: &[ProbeResult],
    rng: &mut R,
) -> Result<SelectionDecision> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, probe) in candidates.iter().enumerate() {
        if let Some(rtt) = probe.rtt_ms {
            if best.is_none_or(|(_, min)| rtt < min) {
                best = Some((i, rtt));
            }
        }
    }
    let (chosen_index, min_rtt_ms, fallback_used) = match best {
        Some((i, rtt)) => (i, Some(rtt), false),
        None => (rng.random_range(0..candidates.len()), None, true),
    };
    Ok(SelectionDecision {
        chosen: candidates[chosen_index].server,
        chosen_index,
        min_rtt_ms,
        fallback_used,
        candidates: candidates.to_vec(),
    })
}

/// Measures RTT to servers.
pub trait Prober: Send + Sync {
    fn ping_rtt(&self, server: &ServerEntry, clock: &dyn Clock) -> Result<ProbeResult>;

    /// Probes every server as one concurrent round, spending whatever time the
    /// round takes.
    fn probe_all(&self, servers: &[ServerEntry], clock: &dyn Clock) -> Result<Vec<ProbeResult>>;
}

/// Probes computed from the emulated links: `2 x (delay + echo serialization)`
/// plus the gateway's coordination overhead.
pub struct VirtualProber {
    pub net: Arc<VirtualNet>,
    pub overhead_ms: f64,
    pub timeout_ms: f64,
    /// Whether a probe round advances the caller's clock. The gateway's does;
    /// the telemetry recorder reads RTTs without waiting on them.
    pub consume_time: bool,
}

impl Prober for VirtualProber {
    fn ping_rtt(&self, server: &ServerEntry, clock: &dyn Clock) -> Result<ProbeResult> {
        let index = self
            .net
            .topology
            .server_index(server.id)
            .ok_or_else(|| Error::UnknownServer(server.name.clone()))?;
        let probed_at = clock.timestamp();
        if self.net.origins[index].is_down() {
            return Ok(ProbeResult {
                server: server.id,
                rtt_ms: None,
                probed_at,
            });
        }
        let link = self.net.link_for(Peer::Gateway, index)?;
        let now = clock.now_ms();
        let one_way = self.net.network.transmit(link, ECHO_BYTES, now)? - now;
        let rtt = 2.0 * one_way + self.overhead_ms;
        Ok(ProbeResult {
            server: server.id,
            rtt_ms: (rtt <= self.timeout_ms).then_some(rtt),
            probed_at,
        })
    }

    fn probe_all(&self, servers: &[ServerEntry], clock: &dyn Clock) -> Result<Vec<ProbeResult>> {
        let results = servers
            .iter()
            .map(|s| self.ping_rtt(s, clock))
            .collect::<Result<Vec<_>>>()?;
        if self.consume_time {
            let round_ms = results
                .iter()
                .map(|r| r.rtt_ms.unwrap_or(self.timeout_ms))
                .fold(0.0, f64::max);
            clock.sleep_ms(round_ms)?;
        }
        Ok(results)
    }
}

/// Real probes: time a `GET /ping` on each server, in parallel.
pub struct HttpProber {
    transport: HttpTransport,
    pub overhead_ms: f64,
}

impl HttpProber {
    pub fn new(timeout: Duration, overhead_ms: f64) -> Self {
        HttpProber {
            transport: HttpTransport::new(Peer::Gateway, timeout),
            overhead_ms,
        }
    }
}

impl Prober for HttpProber {
    fn ping_rtt(&self, server: &ServerEntry, clock: &dyn Clock) -> Result<ProbeResult> {
        let probed_at = clock.timestamp();
        let started = Instant::now();
        let ok = self
            .transport
            .get(&format!("{}ping", server.base_url), clock)
            .map(|r| r.status == 200)
            .unwrap_or(false);
        let rtt = started.elapsed().as_secs_f64() * 1000.0 + self.overhead_ms;
        Ok(ProbeResult {
            server: server.id,
            rtt_ms: ok.then_some(rtt),
            probed_at,
        })
    }

    fn probe_all(&self, servers: &[ServerEntry], clock: &dyn Clock) -> Result<Vec<ProbeResult>> {
        thread::scope(|scope| {
            let handles: Vec<_> = servers
                .iter()
                .map(|s| scope.spawn(move || self.ping_rtt(s, clock)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("probe thread panicked"))
                .collect()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub timestamp: String,
    pub filename: String,
    pub chosen: String,
    pub decision: SelectionDecision,
}

pub const DECISION_LOG_HEADER: &str = "timestamp,filename,chosen,min_rtt_ms,fallback,probe_values";

#[derive(Clone, Debug, PartialEq)]
pub struct Redirect {
    pub location: String,
    pub decision: SelectionDecision,
}

pub struct GatewayOptions {
    pub seed: u64,
    /// Reuse a probe round for this long; `None` probes on every request.
    pub probe_cache_ttl_ms: Option<f64>,
}

struct ProbeCache {
    taken_at_ms: f64,
    results: Vec<ProbeResult>,
}

pub struct Gateway {
    servers: Vec<ServerEntry>,
    prober: Box<dyn Prober>,
    upstream: Box<dyn Transport>,
    rng: Mutex<ChaCha8Rng>,
    cache_ttl_ms: Option<f64>,
    cache: Mutex<Option<ProbeCache>>,
    decisions: Mutex<Vec<DecisionRecord>>,
    log: Mutex<Option<Box<dyn Write + Send>>>,
}

impl Gateway {
    pub fn new(
        servers: Vec<ServerEntry>,
        prober: Box<dyn Prober>,
        upstream: Box<dyn Transport>,
        options: GatewayOptions,
    ) -> Self {
        Gateway {
            servers,
            prober,
            upstream,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(options.seed)),
            cache_ttl_ms: options.probe_cache_ttl_ms,
            cache: Mutex::new(None),
            decisions: Mutex::new(Vec::new()),
            log: Mutex::new(None),
        }
    }

    /// Starts writing the decision log as CSV.
    pub fn set_decision_log(&self, mut sink: Box<dyn Write + Send>) -> Result<()> {
        writeln!(sink, "{DECISION_LOG_HEADER}")?;
        sink.flush()?;
        *self.log.lock().unwrap_or_else(|e| e.into_inner()) = Some(sink);
        Ok(())
    }

    pub fn servers(&self) -> &[ServerEntry] {
        &self.servers
    }

    pub fn decisions(&self) -> Vec<DecisionRecord> {
        self.decisions.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn ping_rtt(&self, server: &ServerEntry, clock: &dyn Clock) -> Result<ProbeResult> {
        if !self.servers.iter().any(|s| s.id == server.id) {
            return Err(Error::UnknownServer(server.name.clone()));
        }
        self.prober.ping_rtt(server, clock)
    }

    fn probe_round(&self, clock: &dyn Clock) -> Result<Vec<ProbeResult>> {
        if let Some(ttl) = self.cache_ttl_ms {
            let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(c) = cache.as_ref() {
                if clock.now_ms() - c.taken_at_ms < ttl {
                    return Ok(c.results.clone());
                }
            }
        }
        let results = self.prober.probe_all(&self.servers, clock)?;
        if self.cache_ttl_ms.is_some() {
            *self.cache.lock().unwrap_or_else(|e| e.into_inner()) = Some(ProbeCache {
                taken_at_ms: clock.now_ms(),
                results: results.clone(),
            });
        }
        Ok(results)
    }

    /// Probe, select, and build the redirect for `filename`.
    pub fn handle_request(&self, filename: &str, clock: &dyn Clock) -> Result<Redirect> {
        if filename.is_empty() {
            return Err(Error::EmptyFilename(filename.to_string()));
        }
        if self.servers.is_empty() {
            return Err(Error::NoServers);
        }
        let probes = self.probe_round(clock)?;
        let decision = {
            let mut rng = self.rng.lock().unwrap_or_else(|e| e.into_inner());
            select_server(&probes, &mut *rng)?
        };
        let chosen = &self.servers[decision.chosen_index];
        let location = format!("{}segment/{}", chosen.base_url, filename);
        self.record(filename, &chosen.name, &decision, clock)?;
        debug!(filename, chosen = %chosen.name, fallback = decision.fallback_used, "redirect");
        Ok(Redirect { location, decision })
    }

    fn record(
        &self,
        filename: &str,
        chosen: &str,
        decision: &SelectionDecision,
        clock: &dyn Clock,
    ) -> Result<()> {
        let timestamp = clock.timestamp();
        let probe_values = self
            .servers
            .iter()
            .zip(&decision.candidates)
            .map(|(s, p)| format!("{}={}", s.name, format_value(p.rtt_ms)))
            .collect::<Vec<_>>()
            .join(";");
        if let Some(sink) = self.log.lock().unwrap_or_else(|e| e.into_inner()).as_mut() {
            writeln!(
                sink,
                "{timestamp},{filename},{chosen},{},{},{probe_values}",
                format_value(decision.min_rtt_ms),
                decision.fallback_used
            )?;
            sink.flush()?;
        }
        self.decisions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(DecisionRecord {
                timestamp,
                filename: filename.to_string(),
                chosen: chosen.to_string(),
                decision: decision.clone(),
            });
        Ok(())
    }

    /// Fetches a manifest from the first server that has it.
    pub fn proxy_manifest(&self, video_id: &str, clock: &dyn Clock) -> Result<Response> {
        let mut last = None;
        for server in &self.servers {
            let url = format!("{}manifest/{}", server.base_url, video_id);
            match self.upstream.get(&url, clock) {
                Ok(resp) if resp.status == 200 => return Ok(resp),
                Ok(resp) => last = Some(format!("{url} answered {}", resp.status)),
                Err(e) => last = Some(e.to_string()),
            }
        }
        Err(Error::ManifestUnreachable {
            url: format!("/manifest/{video_id}"),
            reason: last.unwrap_or_else(|| "no servers".into()),
        })
    }

    /// Routes a request path: `/cdn/<file>` and `/segment/<file>` redirect,
    /// `/manifest/<id>` is proxied.
    pub fn handle(&self, path: &str, clock: &dyn Clock) -> Response {
        let path = path.split(['?', '#']).next().unwrap_or("");
        let result = if let Some(file) = path
            .strip_prefix("/cdn/")
            .or_else(|| path.strip_prefix("/segment/"))
        {
            self.handle_request(file, clock)
                .map(|r| Response::redirect(r.location))
        } else if let Some(id) = path.strip_prefix("/manifest/") {
            self.proxy_manifest(id, clock)
        } else if path == "/cdn" || path == "/cdn/" {
            Err(Error::EmptyFilename(path.to_string()))
        } else {
            Err(Error::NotFound(path.to_string()))
        };
        result.unwrap_or_else(Response::from_error)
    }
}
