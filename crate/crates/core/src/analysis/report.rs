use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{summarize, BoxStats};
use crate::error::{Error, Result};
use crate::metrics::MetricSeries;

/// Tolerance when comparing successive mean RTTs.
pub const TREND_TOLERANCE_MS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigDataset {
    pub rtt: MetricSeries,
    pub cpu: MetricSeries,
}

impl ConfigDataset {
    pub fn server_count(&self) -> usize {
        self.rtt.columns.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Increasing,
    Decreasing,
    Flat,
    Mixed,
}

impl Trend {
    pub fn as_str(self) -> &'static str {
        match self {
            Trend::Increasing => "increasing",
            Trend::Decreasing => "decreasing",
            Trend::Flat => "flat",
            Trend::Mixed => "mixed",
        }
    }
}

/// Classifies means already ordered by server count. Flat wins when the whole
/// spread is within tolerance.
pub fn rtt_trend(means: &[f64]) -> Trend {
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = means.iter().copied().fold(f64::INFINITY, f64::min);
    if means.len() < 2 || max - min <= TREND_TOLERANCE_MS {
        return Trend::Flat;
    }
    if means.windows(2).all(|w| w[1] >= w[0] - TREND_TOLERANCE_MS) {
        Trend::Increasing
    } else if means.windows(2).all(|w| w[1] <= w[0] + TREND_TOLERANCE_MS) {
        Trend::Decreasing
    } else {
        Trend::Mixed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerStats {
    pub server: String,
    /// `None` when the server never answered.
    pub rtt: Option<BoxStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub name: String,
    pub server_count: usize,
    pub rtt: BoxStats,
    pub cpu: BoxStats,
    pub rtt_mean_ms: f64,
    pub cpu_mean_pct: f64,
    /// Filled when the per-server breakdown was requested.
    pub per_server: Vec<ServerStats>,
    /// RTT columns with no value at all.
    pub unresponsive: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    /// Ordered by server count, then name.
    pub per_config: Vec<ConfigSummary>,
    pub rtt_trend: Trend,
    pub narrative: Vec<String>,
}

impl TradeoffReport {
    pub fn config(&self, name: &str) -> Option<&ConfigSummary> {
        self.per_config.iter().find(|c| c.name == name)
    }
}

fn summarize_config(name: &str, data: &ConfigDataset, per_server: bool) -> Result<ConfigSummary> {
    let rtt = summarize(&data.rtt.pooled())?;
    let cpu = summarize(&data.cpu.pooled())?;
    let mut breakdown = Vec::new();
    let mut unresponsive = Vec::new();
    for column in &data.rtt.columns {
        let stats = match summarize(&data.rtt.column(column)?) {
            Ok(s) => Some(s),
            Err(Error::EmptySeries) => None,
            Err(e) => return Err(e),
        };
        if stats.is_none() {
            unresponsive.push(column.clone());
        }
        if per_server {
            breakdown.push(ServerStats {
                server: column.clone(),
                rtt: stats,
            });
        }
    }
    Ok(ConfigSummary {
        name: name.to_string(),
        server_count: data.server_count(),
        rtt_mean_ms: rtt.mean,
        cpu_mean_pct: cpu.mean,
        rtt,
        cpu,
        per_server: breakdown,
        unresponsive,
    })
}

/// Pools every RTT column and every CPU column per configuration, orders the
/// configurations by server count and classifies how mean RTT moves.
pub fn tradeoff_report(datasets: &BTreeMap<String, ConfigDataset>, per_server: bool) -> Result<TradeoffReport> {
    if datasets.len() < 2 {
        return Err(Error::InsufficientConfigs(datasets.len()));
    }
    summary_report(datasets, per_server)
}

/// The same report without the two-configuration minimum, for describing a
/// single run.
pub fn summary_report(datasets: &BTreeMap<String, ConfigDataset>, per_server: bool) -> Result<TradeoffReport> {
    if datasets.is_empty() {
        return Err(Error::InsufficientConfigs(0));
    }
    let mut per_config = datasets
        .iter()
        .map(|(name, data)| summarize_config(name, data, per_server))
        .collect::<Result<Vec<_>>>()?;
    per_config.sort_by(|a, b| a.server_count.cmp(&b.server_count).then_with(|| a.name.cmp(&b.name)));
    let means: Vec<f64> = per_config.iter().map(|c| c.rtt_mean_ms).collect();
    let trend = rtt_trend(&means);
    let narrative = narrative(&per_config, trend);
    Ok(TradeoffReport {
        per_config,
        rtt_trend: trend,
        narrative,
    })
}

fn narrative(configs: &[ConfigSummary], trend: Trend) -> Vec<String> {
    let mut lines = Vec::new();
    for c in configs {
        lines.push(format!(
            "{} ({} servers): RTT median {:.1} ms, mean {:.1} ms, IQR {:.1}-{:.1} ms ({:.1} ms), whiskers {:.1}-{:.1} ms, {} outliers, {} missing",
            c.name,
            c.server_count,
            c.rtt.median,
            c.rtt_mean_ms,
            c.rtt.q1,
            c.rtt.q3,
            c.rtt.iqr,
            c.rtt.whisker_low,
            c.rtt.whisker_high,
            c.rtt.outliers.len(),
            c.rtt.missing_count,
        ));
        lines.push(format!(
            "{}: CPU median {:.1}%, mean {:.1}%, IQR {:.1}-{:.1}%",
            c.name, c.cpu.median, c.cpu_mean_pct, c.cpu.q1, c.cpu.q3
        ));
        if !c.unresponsive.is_empty() {
            lines.push(format!("{}: unresponsive servers: {}", c.name, c.unresponsive.join(", ")));
        }
    }
    let (first, last) = (&configs[0], &configs[configs.len() - 1]);
    lines.push(format!(
        "Mean RTT goes from {:.1} ms at {} servers to {:.1} ms at {} servers ({:+.1} ms): {}",
        first.rtt_mean_ms,
        first.server_count,
        last.rtt_mean_ms,
        last.server_count,
        last.rtt_mean_ms - first.rtt_mean_ms,
        trend.as_str()
    ));
    let cpu_lo = configs.iter().map(|c| c.cpu.median).fold(f64::INFINITY, f64::min);
    let cpu_hi = configs.iter().map(|c| c.cpu.median).fold(f64::NEG_INFINITY, f64::max);
    lines.push(format!("CPU medians range from {cpu_lo:.1}% to {cpu_hi:.1}% across configurations"));
    if trend == Trend::Increasing && cpu_hi - cpu_lo <= 5.0 {
        lines.push(
            "Trade-off: more servers cost latency while CPU load per server stays flat".to_string(),
        );
    }
    lines
}
