//! Telemetry recorders: periodic ping rounds with Poisson-modified RTTs, and
//! CPU utilization scraped from origin counters, both persisted as CSV.
//!
//! CSV dialect: comma separated, `\n` line endings, a `timestamp` column then
//! one column per server or instance, `N/A` for missing values.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::error::{Error, Result};
use crate::gateway::{Prober, ServerEntry};
use crate::netsim::{poisson_sample, Clock, PoissonParams};
use crate::prom;
use crate::topology::{NodeId, RecorderConfig};
use crate::transport::Transport;

pub const MISSING: &str = "N/A";

/// Formats a possibly-missing value. Rust's shortest float repr parses back
/// to the identical `f64`, so the CSV round trip is exact.
pub fn format_value(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => MISSING.to_string(),
    }
}

fn parse_cell(text: &str) -> std::result::Result<Option<f64>, String> {
    match text.trim() {
        "" | MISSING | "None" | "NaN" | "nan" => Ok(None),
        t => t
            .parse::<f64>()
            .map(Some)
            .map_err(|_| format!("not a number: {t:?}")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RttSample {
    pub timestamp: String,
    pub server: NodeId,
    pub rtt_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpuSample {
    pub timestamp: String,
    pub instance: String,
    pub utilization_pct: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Rtt,
    Cpu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub timestamp: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metric: MetricKind,
    pub columns: Vec<String>,
    pub rows: Vec<SeriesRow>,
}

impl MetricSeries {
    pub fn new(metric: MetricKind, columns: Vec<String>) -> Self {
        MetricSeries {
            metric,
            columns,
            rows: Vec::new(),
        }
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let i = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r.values[i]).collect())
    }

    /// Every value of every column, row-major.
    pub fn pooled(&self) -> Vec<Option<f64>> {
        self.rows.iter().flat_map(|r| r.values.iter().copied()).collect()
    }

    pub fn header_line(&self) -> String {
        let mut line = String::from("timestamp");
        for c in &self.columns {
            line.push(',');
            line.push_str(c);
        }
        line
    }

    pub fn row_line(row: &SeriesRow) -> String {
        let mut line = row.timestamp.clone();
        for v in &row.values {
            line.push(',');
            line.push_str(&format_value(*v));
        }
        line
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "{}", self.header_line())?;
        for row in &self.rows {
            writeln!(out, "{}", Self::row_line(row))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }

    /// Parses the CSV dialect. Row numbers in errors count the header as
    /// row 1.
    pub fn read_csv(input: impl Read, metric: MetricKind) -> Result<MetricSeries> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut records = reader.records();
        let header = match records.next() {
            Some(r) => r.map_err(|e| csv_error(1, None, e))?,
            None => {
                return Err(Error::Csv {
                    row: 1,
                    column: None,
                    message: "missing header".into(),
                })
            }
        };
        if header.is_empty() || header.get(0).is_some_and(str::is_empty) && header.len() == 1 {
            return Err(Error::Csv {
                row: 1,
                column: None,
                message: "empty header".into(),
            });
        }
        let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut series = MetricSeries::new(metric, columns);
        for (i, record) in records.enumerate() {
            let row = i + 2;
            let record = record.map_err(|e| csv_error(row, None, e))?;
            if record.len() == 1 && record.get(0) == Some("") {
                continue;
            }
            if record.len() != header.len() {
                return Err(Error::Csv {
                    row,
                    column: None,
                    message: format!("expected {} fields, found {}", header.len(), record.len()),
                });
            }
            let values = record
                .iter()
                .skip(1)
                .enumerate()
                .map(|(c, cell)| {
                    parse_cell(cell).map_err(|message| Error::Csv {
                        row,
                        column: Some(c + 2),
                        message,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            series.rows.push(SeriesRow {
                timestamp: record[0].to_string(),
                values,
            });
        }
        Ok(series)
    }
}

fn csv_error(row: usize, column: Option<usize>, e: csv::Error) -> Error {
    Error::Csv {
        row,
        column,
        message: e.to_string(),
    }
}

/// Writes a series incrementally: the header up front, then one flushed line
/// per row, so an interrupted run leaves a readable prefix.
pub struct CsvSink<'a> {
    out: &'a mut dyn Write,
    series: MetricSeries,
}

impl<'a> CsvSink<'a> {
    pub fn new(out: &'a mut dyn Write, metric: MetricKind, columns: Vec<String>) -> Result<Self> {
        let series = MetricSeries::new(metric, columns);
        writeln!(out, "{}", series.header_line())?;
        out.flush()?;
        Ok(CsvSink { out, series })
    }

    pub fn push(&mut self, row: SeriesRow) -> Result<()> {
        debug_assert_eq!(row.values.len(), self.series.columns.len());
        writeln!(self.out, "{}", MetricSeries::row_line(&row))?;
        self.out.flush()?;
        self.series.rows.push(row);
        Ok(())
    }

    pub fn finish(self) -> MetricSeries {
        self.series
    }
}

/// `raw + Poisson(lambda)`.
pub fn modified_rtt<R: Rng + ?Sized>(raw_rtt_ms: f64, lambda_ms: f64, rng: &mut R) -> f64 {
    raw_rtt_ms + poisson_sample(PoissonParams::new(lambda_ms), rng) as f64
}

/// Runs `cfg.num_pings` rounds: probe every server, add noise, write a row,
/// then wait for the next tick. Ticks are anchored to the first round, so
/// slow probes do not stretch the cadence.
pub fn record_ping_rounds<R: Rng + ?Sized>(
    servers: &[ServerEntry],
    prober: &dyn Prober,
    cfg: &RecorderConfig,
    lambda_ms: f64,
    clock: &dyn Clock,
    rng: &mut R,
    out: &mut dyn Write,
) -> Result<MetricSeries> {
    if servers.is_empty() {
        return Err(Error::NoServers);
    }
    let columns = servers.iter().map(|s| s.name.clone()).collect();
    let mut sink = CsvSink::new(out, MetricKind::Rtt, columns)?;
    let start = clock.now_ms();
    let interval_ms = cfg.ping_interval_s * 1000.0;
    for round in 0..cfg.num_pings {
        let timestamp = clock.timestamp();
        let probes = prober.probe_all(servers, clock)?;
        let values = probes
            .iter()
            .map(|p| p.rtt_ms.map(|raw| modified_rtt(raw, lambda_ms, rng)))
            .collect();
        sink.push(SeriesRow { timestamp, values })?;
        if round + 1 < cfg.num_pings {
            clock.sleep_until(start + f64::from(round + 1) * interval_ms)?;
        }
    }
    debug!(rounds = cfg.num_pings, "ping recording done");
    Ok(sink.finish())
}

/// A `/metrics` URL and the instance label to read from it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuEndpoint {
    pub instance: String,
    pub url: String,
}

/// Remembers the last counters seen per instance so utilization can be
/// computed from deltas.
#[derive(Debug, Default)]
pub struct UtilizationTracker {
    previous: HashMap<String, (f64, f64)>,
}

impl UtilizationTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// `100 * d_active / d_total` since the last observation; absent on the
    /// first observation or when total did not advance.
    pub fn observe(&mut self, instance: &str, total: f64, active: f64) -> Option<f64> {
        let prev = self.previous.insert(instance.to_string(), (total, active))?;
        let d_total = total - prev.0;
        let d_active = active - prev.1;
        (d_total > 0.0).then(|| 100.0 * d_active / d_total)
    }
}

/// Scrapes one endpoint and returns noisy utilization per instance found.
/// A failed scrape yields an empty map.
pub fn fetch_cpu_utilization<R: Rng + ?Sized>(
    url: &str,
    tracker: &mut UtilizationTracker,
    lambda_pct: f64,
    transport: &dyn Transport,
    clock: &dyn Clock,
    rng: &mut R,
) -> BTreeMap<String, Option<f64>> {
    let text = match transport.get(url, clock) {
        Ok(resp) if resp.status == 200 => String::from_utf8_lossy(&resp.body).into_owned(),
        Ok(resp) => {
            debug!(url, status = resp.status, "scrape refused");
            return BTreeMap::new();
        }
        Err(e) => {
            debug!(url, error = %e, "scrape failed");
            return BTreeMap::new();
        }
    };
    let samples = match prom::parse_exposition(&text) {
        Ok(s) => s,
        Err(e) => {
            warn!(url, error = %e, "unparseable metrics");
            return BTreeMap::new();
        }
    };
    let noise = PoissonParams::new(lambda_pct);
    prom::cpu_counters(&samples)
        .into_iter()
        .map(|(instance, counters)| {
            let pct = match counters {
                (Some(total), Some(active)) => tracker.observe(&instance, total, active),
                _ => None,
            };
            let noisy = pct.map(|p| p + poisson_sample(noise, rng) as f64);
            (instance, noisy)
        })
        .collect()
}

/// Runs `cfg.cpu_iterations` scrape rounds `cfg.cpu_interval_s` apart.
pub fn log_cpu<R: Rng + ?Sized>(
    endpoints: &[CpuEndpoint],
    cfg: &RecorderConfig,
    lambda_pct: f64,
    transport: &dyn Transport,
    clock: &dyn Clock,
    rng: &mut R,
    out: &mut dyn Write,
) -> Result<MetricSeries> {
    if endpoints.is_empty() {
        return Err(Error::NoServers);
    }
    let columns = endpoints.iter().map(|e| e.instance.clone()).collect();
    let mut sink = CsvSink::new(out, MetricKind::Cpu, columns)?;
    let mut tracker = UtilizationTracker::new();
    let start = clock.now_ms();
    let interval_ms = cfg.cpu_interval_s * 1000.0;
    for round in 0..cfg.cpu_iterations {
        let timestamp = clock.timestamp();
        let values = endpoints
            .iter()
            .map(|e| {
                fetch_cpu_utilization(&e.url, &mut tracker, lambda_pct, transport, clock, rng)
                    .remove(&e.instance)
                    .flatten()
            })
            .collect();
        sink.push(SeriesRow { timestamp, values })?;
        if round + 1 < cfg.cpu_iterations {
            clock.sleep_until(start + f64::from(round + 1) * interval_ms)?;
        }
    }
    Ok(sink.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ProbeResult;
    use crate::netsim::ManualClock;
    use crate::transport::Response;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Mutex;

    #[test]
    fn modified_rtt_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mean = (0..n).map(|_| modified_rtt(20.0, 200.0, &mut rng)).sum::<f64>() / n as f64;
        assert!((218.0..=222.0).contains(&mean), "{mean}");
        assert_eq!(modified_rtt(37.5, 0.0, &mut rng), 37.5);
        assert!((0..1000).all(|_| modified_rtt(0.0, 200.0, &mut rng) >= 0.0));
    }

    struct Scripted(Vec<Option<f64>>);

    impl Prober for Scripted {
        fn ping_rtt(&self, server: &ServerEntry, clock: &dyn Clock) -> Result<ProbeResult> {
            Ok(ProbeResult {
                server: server.id,
                rtt_ms: self.0[server.index],
                probed_at: clock.timestamp(),
            })
        }

        fn probe_all(&self, servers: &[ServerEntry], clock: &dyn Clock) -> Result<Vec<ProbeResult>> {
            servers.iter().map(|s| self.ping_rtt(s, clock)).collect()
        }
    }

    fn servers(n: usize) -> Vec<ServerEntry> {
        (0..n)
            .map(|i| ServerEntry {
                id: NodeId(2 + i as u32),
                index: i,
                name: format!("s{}", i + 1),
                base_url: format!("http://s{}/", i + 1),
            })
            .collect()
    }

    fn recorder(num_pings: u32) -> RecorderConfig {
        RecorderConfig {
            num_pings,
            ..RecorderConfig::default()
        }
    }

    #[test]
    fn ping_rounds_shape_and_cadence() {
        let clock = ManualClock::new();
        let mut out = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let series = record_ping_rounds(
            &servers(4),
            &Scripted(vec![Some(20.0), Some(20.0), None, Some(20.0)]),
            &recorder(1000),
            200.0,
            &clock,
            &mut rng,
            &mut out,
        )
        .unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 1001);
        assert_eq!(lines[0], "timestamp,s1,s2,s3,s4");
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));
        assert!(series.column("s3").unwrap().iter().all(Option::is_none));
        assert!(series.column("s1").unwrap().iter().all(Option::is_some));
        assert_eq!(lines[1].split(',').nth(3), Some("N/A"));
        assert_eq!(series.rows[0].timestamp, "2024-06-01T00:00:00.000Z");
        assert_eq!(series.rows[999].timestamp, "2024-06-01T00:16:39.000Z");
        // No wait after the last round.
        assert_eq!(clock.now_ms(), 999_000.0);
        assert_eq!(MetricSeries::read_csv(text.as_bytes(), MetricKind::Rtt).unwrap(), series);
    }

    #[test]
    fn minimal_ping_run() {
        let clock = ManualClock::new();
        let mut out = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let series = record_ping_rounds(
            &servers(1),
            &Scripted(vec![Some(1.0)]),
            &recorder(1),
            0.0,
            &clock,
            &mut rng,
            &mut out,
        )
        .unwrap();
        assert_eq!(series.rows.len(), 1);
        assert_eq!(series.rows[0].values, vec![Some(1.0)]);
        assert_eq!(String::from_utf8(out).unwrap().lines().nth(1).unwrap().split(',').count(), 2);
    }

    #[test]
    fn tracker_uses_deltas() {
        let mut t = UtilizationTracker::new();
        assert_eq!(t.observe("s1", 10.0, 2.0), None);
        assert_eq!(t.observe("s1", 12.0, 2.6), Some(30.000000000000004));
        assert_eq!(t.observe("s1", 12.0, 2.6), None);
        assert_eq!(t.observe("s2", 1.0, 1.0), None);
    }

    /// Serves counters from a script, one document per call.
    struct ScriptedMetrics(Mutex<Vec<Option<String>>>);

    impl Transport for ScriptedMetrics {
        fn get(&self, url: &str, _clock: &dyn Clock) -> Result<Response> {
            let mut script = self.0.lock().unwrap();
            match script.remove(0) {
                Some(doc) => Ok(Response::text(doc)),
                None => Err(Error::http(url, "connection refused")),
            }
        }
    }

    #[test]
    fn fetch_quotient_and_failure() {
        let docs = vec![
            Some(prom::render_cpu_counters([("s1", 100.0, 30.0)])),
            Some(prom::render_cpu_counters([("s1", 102.0, 30.6)])),
            None,
        ];
        let transport = ScriptedMetrics(Mutex::new(docs));
        let clock = ManualClock::new();
        let mut tracker = UtilizationTracker::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fetch = || fetch_cpu_utilization("http://s1/metrics", &mut tracker, 0.0, &transport, &clock, &mut rng);
        assert_eq!(fetch()["s1"], None);
        let pct = fetch()["s1"].unwrap();
        assert!((pct - 30.0).abs() < 1e-9, "{pct}");
        assert!(fetch().is_empty());
    }

    #[test]
    fn idle_noise_mean() {
        let mut tracker = UtilizationTracker::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clock = ManualClock::new();
        let n = 20_000;
        let docs = (0..=n)
            .map(|i| Some(prom::render_cpu_counters([("s1", 2.0 * i as f64, 0.0)])))
            .collect();
        let transport = ScriptedMetrics(Mutex::new(docs));
        fetch_cpu_utilization("u", &mut tracker, 30.0, &transport, &clock, &mut rng);
        let sum: f64 = (0..n)
            .map(|_| fetch_cpu_utilization("u", &mut tracker, 30.0, &transport, &clock, &mut rng)["s1"].unwrap())
            .sum();
        let mean = sum / n as f64;
        // 3 standard errors of Poisson(30) over n draws.
        assert!((mean - 30.0).abs() < 3.0 * (30.0f64 / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn log_cpu_single_round_is_all_absent() {
        let transport = ScriptedMetrics(Mutex::new(vec![
            Some(prom::render_cpu_counters([("s1", 0.0, 0.0)])),
            None,
        ]));
        let endpoints = vec![
            CpuEndpoint {
                instance: "s1".into(),
                url: "http://s1/metrics".into(),
            },
            CpuEndpoint {
                instance: "s2".into(),
                url: "http://s2/metrics".into(),
            },
        ];
        let cfg = RecorderConfig {
            cpu_iterations: 1,
            ..RecorderConfig::default()
        };
        let mut out = Vec::new();
        let clock = ManualClock::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let series = log_cpu(&endpoints, &cfg, 30.0, &transport, &clock, &mut rng, &mut out).unwrap();
        assert_eq!(series.rows.len(), 1);
        assert_eq!(series.rows[0].values, vec![None, None]);
        assert_eq!(String::from_utf8(out).unwrap(), "timestamp,s1,s2\n2024-06-01T00:00:00.000Z,N/A,N/A\n");
    }

    #[test]
    fn ragged_rows_are_located() {
        let text = "timestamp,s1,s2\nt0,1,2\nt1,1\n";
        match MetricSeries::read_csv(text.as_bytes(), MetricKind::Rtt) {
            Err(Error::Csv { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        match MetricSeries::read_csv("timestamp,s1\nt0,abc\n".as_bytes(), MetricKind::Rtt) {
            Err(Error::Csv { row, column, .. }) => assert_eq!((row, column), (2, Some(2))),
            other => panic!("{other:?}"),
        }
        assert!(MetricSeries::read_csv("".as_bytes(), MetricKind::Rtt).is_err());
    }

    #[test]
    fn tolerant_absences() {
        let s = MetricSeries::read_csv("timestamp,a,b,c\nt,N/A,,None\n".as_bytes(), MetricKind::Cpu).unwrap();
        assert_eq!(s.rows[0].values, vec![None, None, None]);
    }

    fn arb_series() -> impl Strategy<Value = MetricSeries> {
        (1usize..6, 0usize..30).prop_flat_map(|(cols, rows)| {
            let values = proptest::collection::vec(
                proptest::collection::vec(proptest::option::of(proptest::num::f64::NORMAL), cols),
                rows,
            );
            values.prop_map(move |rows| MetricSeries {
                metric: MetricKind::Rtt,
                columns: (0..cols).map(|c| format!("server{c}")).collect(),
                rows: rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, values)| SeriesRow {
                        timestamp: crate::netsim::clock::virtual_timestamp(i as f64 * 1000.0),
                        values,
                    })
                    .collect(),
            })
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip(series in arb_series()) {
            let text = series.to_csv_string();
            prop_assert_eq!(MetricSeries::read_csv(text.as_bytes(), MetricKind::Rtt).unwrap(), series);
        }
    }
}
