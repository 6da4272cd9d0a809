//! Headless DASH client: rewrites media requests to the redirect base,
//! follows the gateway's 302 and downloads segments through a token-bucket
//! throttle.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};
use url::Url;

use crate::error::{Error, Result};
use crate::netsim::{Clock, Rate};
use crate::origin::Manifest;
use crate::transport::{Response, Transport};

pub const DEFAULT_REDIRECT_BASE: &str = "http://cdn.example.com/";
pub const MAX_REDIRECTS: u32 = 3;
pub const BUCKET_CAPACITY_BYTES: f64 = 8192.0;
pub const PACING_QUANTUM_MS: f64 = 10.0;
const CHUNK_BYTES: usize = 8192;

fn strip_query(url: &str) -> &str {
    url.split(['?', '#']).next().unwrap_or("")
}

pub fn is_media_segment(url: &str) -> bool {
    strip_query(url).ends_with(".mp4")
}

pub fn extract_file_name(url: &str) -> Result<String> {
    let path = strip_query(url);
    let name = path.rsplit('/').next().unwrap_or("");
    // A bare "http://host" has nothing after the authority.
    let bare_host = path.split_once("://").is_some_and(|(_, rest)| !rest.contains('/'));
    if name.is_empty() || bare_host {
        return Err(Error::EmptyFilename(url.to_string()));
    }
    Ok(name.to_string())
}

pub fn construct_redirect_url(file_name: &str, base: &str) -> Result<String> {
    if file_name.is_empty() {
        return Err(Error::EmptyFilename(file_name.to_string()));
    }
    if !base.ends_with('/') {
        return Err(Error::InvalidBase(base.to_string()));
    }
    Ok(format!("{base}{file_name}"))
}

/// Client-side pacing. The bucket starts empty and refills at `rate`, up to
/// [`BUCKET_CAPACITY_BYTES`]. A write may overdraw it by up to one quantum's
/// worth of bytes before the pacer sleeps, and [`TokenBucket::finish`] sleeps
/// off whatever is still owed, so a paced transfer never beats `size / rate`.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    tokens: f64,
    last_ms: f64,
}

impl TokenBucket {
    pub fn new(bytes_per_s: f64, now_ms: f64) -> Result<Self> {
        Rate::limited(bytes_per_s)?;
        Ok(TokenBucket {
            rate: bytes_per_s,
            tokens: 0.0,
            last_ms: now_ms,
        })
    }

    fn refill(&mut self, now_ms: f64) {
        let earned = (now_ms - self.last_ms).max(0.0) * self.rate / 1000.0;
        self.tokens = (self.tokens + earned).min(BUCKET_CAPACITY_BYTES);
        self.last_ms = now_ms;
    }

    fn quantum_bytes(&self) -> f64 {
        self.rate * PACING_QUANTUM_MS / 1000.0
    }

    pub fn consume(&mut self, bytes: u64, clock: &dyn Clock) -> Result<()> {
        self.refill(clock.now_ms());
        self.tokens -= bytes as f64;
        if self.tokens < -self.quantum_bytes() {
            self.pay_debt(clock)?;
        }
        Ok(())
    }

    fn pay_debt(&mut self, clock: &dyn Clock) -> Result<()> {
        clock.sleep_ms(-self.tokens / self.rate * 1000.0)?;
        self.refill(clock.now_ms());
        Ok(())
    }

    pub fn finish(&mut self, clock: &dyn Clock) -> Result<()> {
        self.refill(clock.now_ms());
        if self.tokens < 0.0 {
            self.pay_debt(clock)?;
        }
        Ok(())
    }
}

/// Copies `source` to `sink`, paced by `rate`. Returns bytes copied and the
/// elapsed clock time in ms.
pub fn throttled_copy(
    source: &mut dyn Read,
    sink: &mut dyn Write,
    rate: Rate,
    clock: &dyn Clock,
) -> Result<(u64, f64)> {
    let start = clock.now_ms();
    let mut bucket = match rate {
        Rate::Unlimited => None,
        Rate::BytesPerSec(r) => Some(TokenBucket::new(r, start)?),
    };
    let mut buf = vec![0u8; CHUNK_BYTES];
    let mut total = 0u64;
    loop {
        let n = match source.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        };
        if let Some(b) = bucket.as_mut() {
            b.consume(n as u64, clock)?;
        }
        sink.write_all(&buf[..n])?;
        total += n as u64;
    }
    if let Some(b) = bucket.as_mut() {
        b.finish(clock)?;
    }
    sink.flush()?;
    Ok((total, clock.now_ms() - start))
}

/// Writes every byte of `source` to `destination` at no more than `rate`.
/// Returns the duration in ms.
pub fn save_and_throttle_download(
    source: &mut dyn Read,
    destination: &Path,
    rate: Rate,
    clock: &dyn Clock,
) -> Result<f64> {
    if let Rate::BytesPerSec(r) = rate {
        Rate::limited(r)?;
    }
    let mut file = BufWriter::new(File::create(destination)?);
    let (_, duration) = throttled_copy(source, &mut file, rate, clock)?;
    Ok(duration)
}

/// GET with manual redirect following, at most [`MAX_REDIRECTS`] hops.
/// Returns the final response, its URL and the number of hops taken.
pub fn fetch_following(
    transport: &dyn Transport,
    url: &str,
    clock: &dyn Clock,
) -> Result<(Response, String, u32)> {
    let mut current = url.to_string();
    let mut hops = 0;
    loop {
        let resp = transport.get(&current, clock)?;
        if !(300..400).contains(&resp.status) {
            return Ok((resp, current, hops));
        }
        let location = resp
            .location
            .as_deref()
            .ok_or_else(|| Error::http(&current, "redirect without Location"))?;
        let next = Url::parse(&current)
            .and_then(|base| base.join(location))
            .map_err(|e| Error::http(&current, e))?;
        hops += 1;
        if hops > MAX_REDIRECTS {
            return Err(Error::http(url, format!("more than {MAX_REDIRECTS} redirects")));
        }
        current = next.to_string();
    }
}

/// `scheme://host[:port]/` of a URL.
pub fn origin_base(url: &str) -> Result<String> {
    let parsed = Url::parse(url).map_err(|e| Error::http(url, e))?;
    let host = parsed
        .host_str()
        .ok_or_else(|| Error::http(url, "no host"))?;
    Ok(match parsed.port() {
        Some(port) => format!("{}://{host}:{port}/", parsed.scheme()),
        None => format!("{}://{host}/", parsed.scheme()),
    })
}

fn fetch_manifest(url: &str, transport: &dyn Transport, clock: &dyn Clock) -> Result<Manifest> {
    let unreachable = |reason: String| Error::ManifestUnreachable {
        url: url.to_string(),
        reason,
    };
    let (resp, _, _) = fetch_following(transport, url, clock).map_err(|e| match e {
        Error::Shutdown => Error::Shutdown,
        other => unreachable(other.to_string()),
    })?;
    if resp.status != 200 {
        return Err(unreachable(format!(
            "status {}: {}",
            resp.status,
            String::from_utf8_lossy(&resp.body).trim()
        )));
    }
    let text = String::from_utf8(resp.body).map_err(|_| Error::Parse("manifest is not UTF-8".into()))?;
    Manifest::parse_xml(&text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentLogEntry {
    pub name: String,
    pub request_url: String,
    pub final_url: String,
    pub status: u16,
    pub bytes: u64,
    pub duration_ms: f64,
    pub redirects: u32,
    pub error: Option<String>,
}

pub const SEGMENT_LOG_HEADER: &str = "name,request_url,final_url,status,bytes,duration_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub manifest_url: String,
    pub video_id: String,
    pub segments_expected: u32,
    pub segments_fetched: u32,
    pub segments_failed: u32,
    pub bytes: u64,
    pub duration_ms: f64,
    /// Segment requests that finished on each host.
    pub served_by: BTreeMap<String, u32>,
    pub segments: Vec<SegmentLogEntry>,
}

impl StreamReport {
    pub fn segment_log_csv(&self) -> String {
        let mut out = String::from(SEGMENT_LOG_HEADER);
        out.push('\n');
        for e in &self.segments {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.name, e.request_url, e.final_url, e.status, e.bytes, e.duration_ms
            ));
        }
        out
    }
}

pub struct StreamSession {
    pub manifest_url: String,
    pub redirect_base: String,
    pub client_throttle: Rate,
    /// Where segment files go; `None` discards the bytes after pacing.
    pub save_dir: Option<PathBuf>,
    pub per_segment_log: Vec<SegmentLogEntry>,
}

impl StreamSession {
    pub fn new(manifest_url: impl Into<String>) -> Self {
        StreamSession {
            manifest_url: manifest_url.into(),
            redirect_base: DEFAULT_REDIRECT_BASE.to_string(),
            client_throttle: Rate::Unlimited,
            save_dir: None,
            per_segment_log: Vec::new(),
        }
    }

    /// Plays the manifest: every segment request is intercepted, rewritten
    /// onto the redirect base and fetched in order. Segment failures are
    /// logged and skipped.
    pub fn stream(&mut self, transport: &dyn Transport, clock: &dyn Clock) -> Result<StreamReport> {
        let start = clock.now_ms();
        let manifest = fetch_manifest(&self.manifest_url, transport, clock)?;
        let base = origin_base(&self.manifest_url)?;
        if let Some(dir) = &self.save_dir {
            std::fs::create_dir_all(dir)?;
        }
        let first_entry = self.per_segment_log.len();
        let mut report = StreamReport {
            manifest_url: self.manifest_url.clone(),
            video_id: manifest.video_id.clone(),
            segments_expected: manifest.segment_count,
            segments_fetched: 0,
            segments_failed: 0,
            bytes: 0,
            duration_ms: 0.0,
            served_by: BTreeMap::new(),
            segments: Vec::new(),
        };
        let names = std::iter::once((&manifest.init_segment, false))
            .chain(manifest.segments.iter().map(|s| (s, true)));
        for (seg, is_media) in names {
            let player_url = format!("{base}segment/{}", seg.name);
            let entry = self.fetch_segment(&seg.name, &player_url, transport, clock)?;
            if entry.error.is_none() {
                report.bytes += entry.bytes;
                if let Ok(host) = Url::parse(&entry.final_url) {
                    *report
                        .served_by
                        .entry(host.host_str().unwrap_or_default().to_string())
                        .or_default() += 1;
                }
                if is_media {
                    report.segments_fetched += 1;
                }
            } else if is_media {
                report.segments_failed += 1;
            }
            self.per_segment_log.push(entry);
        }
        report.duration_ms = clock.now_ms() - start;
        report.segments = self.per_segment_log[first_entry..].to_vec();
        debug!(
            fetched = report.segments_fetched,
            failed = report.segments_failed,
            "stream finished"
        );
        Ok(report)
    }

    fn fetch_segment(
        &self,
        name: &str,
        player_url: &str,
        transport: &dyn Transport,
        clock: &dyn Clock,
    ) -> Result<SegmentLogEntry> {
        let start = clock.now_ms();
        let request_url = if is_media_segment(player_url) {
            construct_redirect_url(&extract_file_name(player_url)?, &self.redirect_base)?
        } else {
            player_url.to_string()
        };
        let mut entry = SegmentLogEntry {
            name: name.to_string(),
            request_url: request_url.clone(),
            final_url: request_url.clone(),
            status: 0,
            bytes: 0,
            duration_ms: 0.0,
            redirects: 0,
            error: None,
        };
        let outcome = fetch_following(transport, &request_url, clock).and_then(|(resp, final_url, hops)| {
            entry.final_url = final_url;
            entry.status = resp.status;
            entry.redirects = hops;
            if resp.status != 200 {
                return Err(Error::SegmentFailed {
                    name: name.to_string(),
                    reason: format!("status {}", resp.status),
                });
            }
            let mut sink: Box<dyn Write> = match &self.save_dir {
                Some(dir) => Box::new(BufWriter::new(File::create(dir.join(name))?)),
                None => Box::new(io::sink()),
            };
            let (bytes, _) = throttled_copy(&mut resp.body.as_slice(), &mut sink, self.client_throttle, clock)?;
            entry.bytes = bytes;
            Ok(())
        });
        match outcome {
            Ok(()) => {}
            Err(Error::Shutdown) => return Err(Error::Shutdown),
            Err(e) => {
                warn!(segment = name, error = %e, "segment failed");
                entry.error = Some(e.to_string());
            }
        }
        entry.duration_ms = clock.now_ms() - start;
        Ok(entry)
    }
}

/// Fetches and parses the manifest, then downloads the init segment and every
/// media segment in order from `<scheme://host/>segment/<name>` into
/// `dest_dir`. Returns how many media segments were saved.
pub fn download_mpd_and_segments(
    manifest_url: &str,
    throttle: Rate,
    dest_dir: &Path,
    transport: &dyn Transport,
    clock: &dyn Clock,
) -> Result<u32> {
    if let Rate::BytesPerSec(r) = throttle {
        Rate::limited(r)?;
    }
    let manifest = fetch_manifest(manifest_url, transport, clock)?;
    let base = origin_base(manifest_url)?;
    std::fs::create_dir_all(dest_dir)?;
    let mut downloaded = 0;
    let all = std::iter::once(&manifest.init_segment).chain(&manifest.segments);
    for (i, seg) in all.enumerate() {
        let url = format!("{base}segment/{}", seg.name);
        let result = fetch_following(transport, &url, clock).and_then(|(resp, _, _)| {
            if resp.status != 200 {
                return Err(Error::SegmentFailed {
                    name: seg.name.clone(),
                    reason: format!("status {}", resp.status),
                });
            }
            save_and_throttle_download(&mut resp.body.as_slice(), &dest_dir.join(&seg.name), throttle, clock)
        });
        match result {
            Ok(_) if i > 0 => downloaded += 1,
            Ok(_) => {}
            Err(Error::Shutdown) => return Err(Error::Shutdown),
            Err(e) => warn!(segment = %seg.name, error = %e, "download failed"),
        }
    }
    Ok(downloaded)
}
