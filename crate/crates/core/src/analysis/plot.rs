//! Hand-written SVG. Every number goes through [`num`] so output bytes depend
//! only on the input data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::report::{ConfigDataset, ConfigSummary, TradeoffReport};
use super::BoxStats;
use crate::error::{Error, Result};
use crate::metrics::{format_value, MetricSeries};
use crate::netsim::clock::parse_timestamp_ms;

pub const PLOT_WIDTH: f64 = 800.0;
pub const PLOT_HEIGHT: f64 = 600.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 60.0;
const BOTTOM: f64 = 80.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let factor = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    factor * mag
}

/// Maps data values onto the plot area.
struct Scale {
    lo: f64,
    hi: f64,
    x0: f64,
    x1: f64,
}

impl Scale {
    fn y(&self, v: f64) -> f64 {
        let top = TOP;
        let bottom = PLOT_HEIGHT - BOTTOM;
        bottom - (v - self.lo) / (self.hi - self.lo) * (bottom - top)
    }

    fn x(&self, v: f64) -> f64 {
        let (l, r) = (LEFT, PLOT_WIDTH - RIGHT);
        if self.x1 == self.x0 {
            return (l + r) / 2.0;
        }
        l + (v - self.x0) / (self.x1 - self.x0) * (r - l)
    }
}

fn y_range(min: f64, max: f64) -> (f64, f64, f64) {
    let (min, max) = if (max - min).abs() < 1e-9 { (min - 1.0, max + 1.0) } else { (min, max) };
    let step = nice_step(max - min);
    ((min / step).floor() * step, (max / step).ceil() * step, step)
}

fn open_svg(out: &mut String, title: &str, y_label: &str, x_label: &str) {
    let _ = writeln!(
        out,
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{cx}\" y=\"30\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n\
         <text x=\"20\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 20 {cy})\">{y_label}</text>\n\
         <text x=\"{cx}\" y=\"{xl}\" text-anchor=\"middle\">{x_label}</text>",
        w = PLOT_WIDTH,
        h = PLOT_HEIGHT,
        cx = num(PLOT_WIDTH / 2.0),
        cy = num((TOP + PLOT_HEIGHT - BOTTOM) / 2.0),
        xl = num(PLOT_HEIGHT - 15.0),
        title = escape(title),
        y_label = escape(y_label),
        x_label = escape(x_label),
    );
}

fn y_axis(out: &mut String, scale: &Scale, step: f64) {
    let (l, r) = (LEFT, PLOT_WIDTH - RIGHT);
    let _ = writeln!(
        out,
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>",
        l = num(l),
        r = num(r),
        t = num(TOP),
        b = num(PLOT_HEIGHT - BOTTOM),
    );
    let ticks = ((scale.hi - scale.lo) / step).round() as usize;
    for i in 0..=ticks {
        let v = scale.lo + i as f64 * step;
        let y = num(scale.y(v));
        let _ = writeln!(
            out,
            "<line x1=\"{a}\" y1=\"{y}\" x2=\"{l}\" y2=\"{y}\" stroke=\"black\"/>\n\
             <line x1=\"{l}\" y1=\"{y}\" x2=\"{r}\" y2=\"{y}\" stroke=\"#dddddd\"/>\n\
             <text x=\"{tx}\" y=\"{y}\" text-anchor=\"end\" dominant-baseline=\"middle\">{v}</text>",
            a = num(LEFT - 5.0),
            l = num(LEFT),
            r = num(PLOT_WIDTH - RIGHT),
            tx = num(LEFT - 8.0),
            v = num(v),
        );
    }
}

fn box_plot(configs: &[ConfigSummary], pick: fn(&ConfigSummary) -> &BoxStats, title: &str, unit: &str, markers: bool) -> String {
    let mut out = String::new();
    open_svg(&mut out, title, unit, "configuration");
    let min = configs.iter().map(|c| pick(c).min).fold(f64::INFINITY, f64::min);
    let max = configs.iter().map(|c| pick(c).max).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi, step) = y_range(min, max);
    let scale = Scale { lo, hi, x0: 0.0, x1: 0.0 };
    y_axis(&mut out, &scale, step);
    let slot = (PLOT_WIDTH - LEFT - RIGHT) / configs.len() as f64;
    let half = (slot * 0.25).min(60.0);
    for (i, c) in configs.iter().enumerate() {
        let s = pick(c);
        let color = PALETTE[i % PALETTE.len()];
        let cx = LEFT + (i as f64 + 0.5) * slot;
        let (x0, x1) = (num(cx - half), num(cx + half));
        let cxs = num(cx);
        let _ = writeln!(out, "<g class=\"box\" data-config=\"{}\">", escape(&c.name));
        let _ = writeln!(
            out,
            "<line x1=\"{cxs}\" y1=\"{wl}\" x2=\"{cxs}\" y2=\"{q1}\" stroke=\"black\"/>\n\
             <line x1=\"{cxs}\" y1=\"{q3}\" x2=\"{cxs}\" y2=\"{wh}\" stroke=\"black\"/>\n\
             <line x1=\"{c0}\" y1=\"{wl}\" x2=\"{c1}\" y2=\"{wl}\" stroke=\"black\"/>\n\
             <line x1=\"{c0}\" y1=\"{wh}\" x2=\"{c1}\" y2=\"{wh}\" stroke=\"black\"/>\n\
             <rect x=\"{x0}\" y=\"{q3}\" width=\"{bw}\" height=\"{bh}\" fill=\"{color}\" fill-opacity=\"0.5\" stroke=\"black\"/>\n\
             <line x1=\"{x0}\" y1=\"{med}\" x2=\"{x1}\" y2=\"{med}\" stroke=\"black\" stroke-width=\"2\"/>",
            wl = num(scale.y(s.whisker_low)),
            wh = num(scale.y(s.whisker_high)),
            q1 = num(scale.y(s.q1)),
            q3 = num(scale.y(s.q3)),
            med = num(scale.y(s.median)),
            c0 = num(cx - half / 2.0),
            c1 = num(cx + half / 2.0),
            bw = num(2.0 * half),
            bh = num(scale.y(s.q1) - scale.y(s.q3)),
        );
        for o in &s.outliers {
            let _ = writeln!(
                out,
                "<circle cx=\"{cxs}\" cy=\"{}\" r=\"2\" fill=\"none\" stroke=\"{color}\"/>",
                num(scale.y(*o))
            );
        }
        let label_y = PLOT_HEIGHT - BOTTOM + 20.0;
        let _ = writeln!(
            out,
            "<text x=\"{cxs}\" y=\"{}\" text-anchor=\"middle\">{} (n={})</text>",
            num(label_y),
            escape(&c.name),
            s.n
        );
        if markers && !c.unresponsive.is_empty() {
            let _ = writeln!(
                out,
                "<text class=\"unresponsive\" x=\"{cxs}\" y=\"{}\" text-anchor=\"middle\" fill=\"#d62728\">&#x2715; unresponsive: {}</text>",
                num(label_y + 16.0),
                escape(&c.unresponsive.join(", "))
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

fn box_csv(configs: &[ConfigSummary], pick: fn(&ConfigSummary) -> &BoxStats) -> String {
    let mut out = String::from("config,stat,value\n");
    for c in configs {
        let s = pick(c);
        let stats = [
            ("n", s.n as f64),
            ("median", s.median),
            ("q1", s.q1),
            ("q3", s.q3),
            ("iqr", s.iqr),
            ("whisker_low", s.whisker_low),
            ("whisker_high", s.whisker_high),
            ("mean", s.mean),
            ("min", s.min),
            ("max", s.max),
            ("missing_count", s.missing_count as f64),
        ];
        for (stat, value) in stats {
            let _ = writeln!(out, "{},{stat},{value}", c.name);
        }
        for o in &s.outliers {
            let _ = writeln!(out, "{},outlier,{o}", c.name);
        }
    }
    out
}

/// Per-row mean across columns (absent when the whole row is) and the
/// elapsed seconds of each row.
struct Trace {
    name: String,
    points: Vec<(String, f64, Option<f64>)>,
    mean: Option<f64>,
}

fn trace(name: &str, series: &MetricSeries) -> Trace {
    let t0 = series.rows.first().and_then(|r| parse_timestamp_ms(&r.timestamp));
    let points: Vec<_> = series
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let elapsed = match (t0, parse_timestamp_ms(&row.timestamp)) {
                (Some(a), Some(b)) => (b - a) as f64 / 1000.0,
                _ => i as f64,
            };
            let present: Vec<f64> = row.values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
            let v = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
            (row.timestamp.clone(), elapsed, v)
        })
        .collect();
    let present: Vec<f64> = points.iter().filter_map(|p| p.2).collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Trace {
        name: name.to_string(),
        points,
        mean,
    }
}

fn trace_plot(traces: &[Trace], title: &str, unit: &str) -> String {
    let mut out = String::new();
    open_svg(&mut out, title, unit, "elapsed time (s)");
    let values = traces.iter().flat_map(|t| t.points.iter().filter_map(|p| p.2));
    let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 1.0) };
    let (lo, hi, step) = y_range(min, max);
    let x1 = traces
        .iter()
        .flat_map(|t| t.points.iter().map(|p| p.1))
        .fold(0.0, f64::max);
    let scale = Scale { lo, hi, x0: 0.0, x1 };
    y_axis(&mut out, &scale, step);
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
        num(PLOT_WIDTH - RIGHT),
        num(PLOT_HEIGHT - BOTTOM + 20.0),
        num(x1)
    );
    for (i, t) in traces.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, "<g class=\"trace\" data-config=\"{}\">", escape(&t.name));
        // Gaps split the line into separate polylines.
        for run in t.points.split(|p| p.2.is_none()).filter(|r| !r.is_empty()) {
            let pts: Vec<String> = run
                .iter()
                .map(|p| format!("{},{}", num(scale.x(p.1)), num(scale.y(p.2.unwrap_or_default()))))
                .collect();
            let _ = writeln!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1\"/>",
                pts.join(" ")
            );
        }
        if let Some(mean) = t.mean {
            let y = num(scale.y(mean));
            let _ = writeln!(
                out,
                "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-dasharray=\"6 4\" stroke-width=\"2\"/>",
                num(LEFT),
                num(PLOT_WIDTH - RIGHT)
            );
        }
        let legend_y = num(TOP + 8.0 + 16.0 * i as f64);
        let mean_text = t.mean.map(num).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"4\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{legend_y}\" dominant-baseline=\"middle\">{} (mean {mean_text})</text>",
            num(PLOT_WIDTH - RIGHT - 220.0),
            num(TOP + 6.0 + 16.0 * i as f64),
            num(PLOT_WIDTH - RIGHT - 202.0),
            escape(&t.name),
        );
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

fn trace_csv(traces: &[Trace]) -> String {
    let mut out = String::from("config,timestamp,value\n");
    for t in traces {
        for (ts, _, v) in &t.points {
            let _ = writeln!(out, "{},{ts},{}", t.name, format_value(*v));
        }
    }
    out
}

/// Writes the four figures (RTT and CPU box plots, RTT and CPU time series
/// with mean lines) as SVG, each with a companion CSV. Returns the paths in
/// a fixed order.
pub fn render_plots(
    report: &TradeoffReport,
    datasets: &BTreeMap<String, ConfigDataset>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if out_dir.as_os_str().is_empty() {
        return Err(Error::Io(io::Error::new(io::ErrorKind::NotFound, "empty output directory path")));
    }
    fs::create_dir_all(out_dir)?;
    let configs = &report.per_config;
    let ordered = |pick: fn(&ConfigDataset) -> &MetricSeries| -> Vec<Trace> {
        configs
            .iter()
            .filter_map(|c| datasets.get(&c.name).map(|d| trace(&c.name, pick(d))))
            .collect()
    };
    let rtt_traces = ordered(|d| &d.rtt);
    let cpu_traces = ordered(|d| &d.cpu);
    let files = [
        ("rtt_boxplot.svg", box_plot(configs, |c| &c.rtt, "RTT distribution by configuration", "RTT (ms)", true)),
        ("rtt_boxplot.csv", box_csv(configs, |c| &c.rtt)),
        ("cpu_boxplot.svg", box_plot(configs, |c| &c.cpu, "CPU utilization by configuration", "CPU (%)", false)),
        ("cpu_boxplot.csv", box_csv(configs, |c| &c.cpu)),
        ("rtt_timeseries.svg", trace_plot(&rtt_traces, "RTT over time with mean", "RTT (ms)")),
        ("rtt_timeseries.csv", trace_csv(&rtt_traces)),
        ("cpu_timeseries.svg", trace_plot(&cpu_traces, "CPU utilization over time with mean", "CPU (%)")),
        ("cpu_timeseries.csv", trace_csv(&cpu_traces)),
    ];
    let mut paths = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body)?;
        paths.push(path);
    }
    Ok(paths)
}
