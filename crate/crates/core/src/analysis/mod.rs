//! Box statistics, time series with a mean reference, the cross-metric
//! trade-off report, and SVG/CSV plot emission.

mod plot;
mod report;

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricKind, MetricSeries};

pub use plot::{render_plots, PLOT_HEIGHT, PLOT_WIDTH};
pub use report::{rtt_trend, summary_report, tradeoff_report, ConfigDataset, ConfigSummary, ServerStats, TradeoffReport, Trend};

/// Linear interpolation between order statistics: position `(n - 1) * p`
/// in the sorted data. `sorted` must be nonempty and ascending.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub missing_count: usize,
}

impl BoxStats {
    pub fn lower_fence(&self) -> f64 {
        self.q1 - 1.5 * self.iqr
    }

    pub fn upper_fence(&self) -> f64 {
        self.q3 + 1.5 * self.iqr
    }
}

/// Drops absent and non-finite values (counted as missing) and summarizes the
/// rest with Tukey's 1.5 IQR fences.
pub fn summarize(series: &[Option<f64>]) -> Result<BoxStats> {
    let mut values: Vec<f64> = series.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    if values.is_empty() {
        return Err(Error::EmptySeries);
    }
    let missing_count = series.len() - values.len();
    values.sort_by(f64::total_cmp);
    let q1 = quantile(&values, 0.25);
    let median = quantile(&values, 0.5);
    let q3 = quantile(&values, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = |v: &f64| *v >= lo_fence && *v <= hi_fence;
    let whisker_low = values.iter().copied().find(inside).unwrap_or(q1);
    let whisker_high = values.iter().rev().copied().find(inside).unwrap_or(q3);
    let outliers = values.iter().copied().filter(|v| !inside(v)).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(BoxStats {
        n: values.len(),
        median,
        q1,
        q3,
        iqr,
        whisker_low,
        whisker_high,
        outliers,
        mean,
        min: values[0],
        max: values[values.len() - 1],
        missing_count,
    })
}

/// One column as plottable points, with the mean of its present values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesData {
    pub column: String,
    /// `None` marks a gap.
    pub points: Vec<(String, Option<f64>)>,
    pub mean: f64,
}

pub fn timeseries_with_mean(series: &MetricSeries, column: &str) -> Result<TimeSeriesData> {
    let values = series.column(column)?;
    let present: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    if present.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let points = series
        .rows
        .iter()
        .zip(values)
        .map(|(row, v)| (row.timestamp.clone(), v.filter(|x| x.is_finite())))
        .collect();
    Ok(TimeSeriesData {
        column: column.to_string(),
        points,
        mean,
    })
}

/// Reads a recorder CSV (or a published dataset file in the same dialect).
pub fn load_series_csv(path: &Path, metric: MetricKind) -> Result<MetricSeries> {
    let file = File::open(path)?;
    MetricSeries::read_csv(BufReader::new(file), metric)
}
