//! Just enough of the Prometheus text exposition format: rendering the CPU
//! counters and parsing samples back out of a scrape.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const CPU_METRIC: &str = "cdn_cpu_seconds_total";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub labels: BTreeMap<String, String>,
    pub value: f64,
}

impl Sample {
    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }
}

fn escape_label(value: &str) -> String {
    value
        .replace('\\', "\\\\")
        .replace('"', "\\\"")
        .replace('\n', "\\n")
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v == f64::INFINITY {
        "+Inf".into()
    } else if v == f64::NEG_INFINITY {
        "-Inf".into()
    } else {
        format!("{v}")
    }
}

/// Renders the `total`/`active` CPU counter pair for each instance.
pub fn render_cpu_counters<'a>(counters: impl IntoIterator<Item = (&'a str, f64, f64)>) -> String {
    let mut out = String::new();
    out.push_str("# HELP cdn_cpu_seconds_total Modeled CPU seconds consumed by the origin.\n");
    out.push_str("# TYPE cdn_cpu_seconds_total counter\n");
    for (instance, total, active) in counters {
        let instance = escape_label(instance);
        for (mode, value) in [("total", total), ("active", active)] {
            let _ = writeln!(
                out,
                "{CPU_METRIC}{{instance=\"{instance}\",mode=\"{mode}\"}} {}",
                format_value(value)
            );
        }
    }
    out
}

fn parse_value(text: &str) -> Option<f64> {
    match text {
        "+Inf" | "Inf" => Some(f64::INFINITY),
        "-Inf" => Some(f64::NEG_INFINITY),
        "NaN" => Some(f64::NAN),
        other => other.parse().ok(),
    }
}

fn parse_labels(body: &str, line_no: usize) -> Result<BTreeMap<String, String>> {
    let err = |msg: &str| Error::Parse(format!("metrics line {line_no}: {msg}"));
    let mut labels = BTreeMap::new();
    let mut chars = body.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace() || *c == ',') {
            chars.next();
        }
        if chars.peek().is_none() {
            return Ok(labels);
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.next() != Some('=') || key.is_empty() {
            return Err(err("expected label=\"value\""));
        }
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.next() != Some('"') {
            return Err(err("label value must be quoted"));
        }
        let mut value = String::new();
        loop {
            match chars.next() {
                Some('\\') => match chars.next() {
                    Some('n') => value.push('\n'),
                    Some(c) => value.push(c),
                    None => return Err(err("dangling escape")),
                },
                Some('"') => break,
                Some(c) => value.push(c),
                None => return Err(err("unterminated label value")),
            }
        }
        labels.insert(key, value);
    }
}

/// Parses every sample line. Comments and blank lines are skipped; a trailing
/// timestamp, if present, is ignored.
pub fn parse_exposition(text: &str) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, labels, rest) = match line.find('{') {
            Some(open) => {
                let close = line[open..]
                    .rfind('}')
                    .map(|c| c + open)
                    .ok_or_else(|| Error::Parse(format!("metrics line {line_no}: unclosed labels")))?;
                (
                    &line[..open],
                    parse_labels(&line[open + 1..close], line_no)?,
                    &line[close + 1..],
                )
            }
            None => {
                let split = line
                    .find(char::is_whitespace)
                    .ok_or_else(|| Error::Parse(format!("metrics line {line_no}: missing value")))?;
                (&line[..split], BTreeMap::new(), &line[split..])
            }
        };
        let name = name.trim();
        if name.is_empty()
            || !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == ':')
        {
            return Err(Error::Parse(format!("metrics line {line_no}: bad metric name {name:?}")));
        }
        let value_text = rest
            .split_whitespace()
            .next()
            .ok_or_else(|| Error::Parse(format!("metrics line {line_no}: missing value")))?;
        let value = parse_value(value_text)
            .ok_or_else(|| Error::Parse(format!("metrics line {line_no}: bad value {value_text:?}")))?;
        samples.push(Sample {
            name: name.to_string(),
            labels,
            value,
        });
    }
    Ok(samples)
}

/// `(total, active)` CPU seconds per instance found in a scrape.
pub fn cpu_counters(samples: &[Sample]) -> BTreeMap<String, (Option<f64>, Option<f64>)> {
    let mut out: BTreeMap<String, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.name == CPU_METRIC) {
        let Some(instance) = s.label("instance") else {
            continue;
        };
        let entry = out.entry(instance.to_string()).or_default();
        match s.label("mode") {
            Some("total") => entry.0 = Some(s.value),
            Some("active") => entry.1 = Some(s.value),
            _ => {}
        }
    }
    out
}
