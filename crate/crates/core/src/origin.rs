//! Origin (content) servers: MPD manifests, media segments with optional
//! server-side throttling, and a Prometheus-text CPU endpoint.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use quick_xml::escape::escape;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::Rate;
use crate::prom;
use crate::transport::Response;

/// Active CPU time charged for each segment served.
pub const SEGMENT_WORK_S: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRef {
    pub name: String,
    pub size_bytes: u64,
    pub index: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub video_id: String,
    pub segment_count: u32,
    pub segment_duration_s: f64,
    pub init_segment: SegmentRef,
    pub segments: Vec<SegmentRef>,
}

pub fn segment_name(video_id: &str, index: u32) -> String {
    format!("{video_id}_seg_{index:04}.mp4")
}

pub fn init_segment_name(video_id: &str) -> String {
    format!("{video_id}_init.mp4")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Init,
    Media(u32),
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Deterministic pseudo-random content for a segment.
pub fn segment_payload(video_id: &str, kind: SegmentKind, size: u64) -> Vec<u8> {
    let salt = match kind {
        SegmentKind::Init => u64::MAX,
        SegmentKind::Media(i) => i as u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(video_id.as_bytes()) ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut buf = vec![0u8; size as usize];
    rng.fill_bytes(&mut buf);
    buf
}

impl Manifest {
    /// The init segment is a tenth of a media segment, at least one byte.
    pub fn generate(video_id: &str, segment_count: u32, segment_bytes: u64, duration_s: f64) -> Self {
        let segments = (0..segment_count)
            .map(|index| SegmentRef {
                name: segment_name(video_id, index),
                size_bytes: segment_bytes,
                index,
            })
            .collect();
        Manifest {
            video_id: video_id.to_string(),
            segment_count,
            segment_duration_s: duration_s,
            init_segment: SegmentRef {
                name: init_segment_name(video_id),
                size_bytes: (segment_bytes / 10).max(1),
                index: 0,
            },
            segments,
        }
    }

    pub fn to_xml(&self) -> String {
        let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        out.push_str(&format!(
            "<MPD videoId=\"{}\" segmentCount=\"{}\" segmentDurationS=\"{}\">\n",
            escape(self.video_id.as_str()),
            self.segment_count,
            self.segment_duration_s
        ));
        out.push_str(&format!(
            "  <Init name=\"{}\" sizeBytes=\"{}\"/>\n",
            escape(self.init_segment.name.as_str()),
            self.init_segment.size_bytes
        ));
        for seg in &self.segments {
            out.push_str(&format!(
                "  <Segment name=\"{}\" sizeBytes=\"{}\"/>\n",
                escape(seg.name.as_str()),
                seg.size_bytes
            ));
        }
        out.push_str("</MPD>\n");
        out
    }

    pub fn parse_xml(text: &str) -> Result<Manifest> {
        let mut reader = Reader::from_str(text);
        reader.config_mut().trim_text(true);
        let mut header: Option<(String, u32, f64)> = None;
        let mut init: Option<SegmentRef> = None;
        let mut segments = Vec::new();
        let mut closed = false;
        loop {
            let event = reader
                .read_event()
                .map_err(|e| Error::Parse(format!("MPD at byte {}: {e}", reader.buffer_position())))?;
            match event {
                Event::Start(e) | Event::Empty(e) => {
                    let tag = e.name();
                    match tag.as_ref() {
                        b"MPD" => {
                            let attrs = attributes(&e)?;
                            header = Some((
                                required(&attrs, "videoId", "MPD")?.to_string(),
                                number(&attrs, "segmentCount", "MPD")?,
                                number(&attrs, "segmentDurationS", "MPD")?,
                            ));
                        }
                        b"Init" if header.is_some() => {
                            let attrs = attributes(&e)?;
                            init = Some(SegmentRef {
                                name: required(&attrs, "name", "Init")?.to_string(),
                                size_bytes: attrs
                                    .get("sizeBytes")
                                    .map(|v| parse_num(v, "sizeBytes", "Init"))
                                    .transpose()?
                                    .unwrap_or(0),
                                index: 0,
                            });
                        }
                        b"Segment" if header.is_some() => {
                            let attrs = attributes(&e)?;
                            segments.push(SegmentRef {
                                name: required(&attrs, "name", "Segment")?.to_string(),
                                size_bytes: number(&attrs, "sizeBytes", "Segment")?,
                                index: segments.len() as u32,
                            });
                        }
                        other => {
                            return Err(Error::Parse(format!(
                                "unexpected element <{}> in MPD",
                                String::from_utf8_lossy(other)
                            )))
                        }
                    }
                }
                Event::End(e) if e.name().as_ref() == b"MPD" => closed = true,
                Event::Eof => break,
                _ => {}
            }
        }
        let (video_id, segment_count, segment_duration_s) =
            header.ok_or_else(|| Error::Parse("missing <MPD> root".into()))?;
        if !closed {
            return Err(Error::Parse("unterminated <MPD>".into()));
        }
        let init_segment = init.ok_or_else(|| Error::Parse("missing <Init>".into()))?;
        if segments.len() != segment_count as usize {
            return Err(Error::Parse(format!(
                "segmentCount is {segment_count} but {} <Segment> elements found",
                segments.len()
            )));
        }
        let mut names = HashSet::new();
        for seg in &segments {
            if !names.insert(seg.name.as_str()) {
                return Err(Error::Parse(format!("duplicate segment name {}", seg.name)));
            }
        }
        Ok(Manifest {
            video_id,
            segment_count,
            segment_duration_s,
            init_segment,
            segments,
        })
    }
}

fn attributes(e: &BytesStart<'_>) -> Result<HashMap<String, String>> {
    e.attributes()
        .map(|a| {
            let a = a.map_err(|err| Error::Parse(format!("bad attribute: {err}")))?;
            let key = String::from_utf8_lossy(a.key.as_ref()).into_owned();
            let value = a
                .unescape_value()
                .map_err(|err| Error::Parse(format!("bad attribute value: {err}")))?
                .into_owned();
            Ok((key, value))
        })
        .collect()
}

fn required<'a>(attrs: &'a HashMap<String, String>, key: &str, tag: &str) -> Result<&'a str> {
    attrs
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Parse(format!("<{tag}> missing {key}")))
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str, tag: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("<{tag}> {key}={value:?} is not a number")))
}

fn number<T: std::str::FromStr>(attrs: &HashMap<String, String>, key: &str, tag: &str) -> Result<T> {
    parse_num(required(attrs, key, tag)?, key, tag)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpuCounters {
    pub total_cpu_s: f64,
    pub active_cpu_s: f64,
}

#[derive(Clone, Debug)]
pub struct SegmentDelivery {
    pub bytes: Vec<u8>,
    /// Server-side pacing time: `size / rate`, or zero when unthrottled.
    pub duration_ms: f64,
}

#[derive(Clone, Debug)]
pub struct OriginOptions {
    pub throttle: Rate,
    pub cores: f64,
    /// Fraction of modeled CPU time busy without any requests.
    pub base_load: f64,
}

impl Default for OriginOptions {
    fn default() -> Self {
        OriginOptions {
            throttle: Rate::Unlimited,
            cores: 1.0,
            base_load: 0.0,
        }
    }
}

/// One content server. CPU counters are synthetic: total time advances at
/// one second per second per core; active time is the base load plus a fixed
/// charge per segment served, capped at the total.
#[derive(Debug)]
pub struct OriginServer {
    name: String,
    options: OriginOptions,
    videos: BTreeMap<String, Manifest>,
    segments: HashMap<String, (String, SegmentKind, u64)>,
    segments_served: AtomicU64,
    work_s: Mutex<f64>,
    down: AtomicBool,
}

impl OriginServer {
    pub fn new(name: impl Into<String>, options: OriginOptions) -> Self {
        OriginServer {
            name: name.into(),
            options,
            videos: BTreeMap::new(),
            segments: HashMap::new(),
            segments_served: AtomicU64::new(0),
            work_s: Mutex::new(0.0),
            down: AtomicBool::new(false),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn provision(&mut self, manifest: Manifest) {
        let id = manifest.video_id.clone();
        self.segments.insert(
            manifest.init_segment.name.clone(),
            (id.clone(), SegmentKind::Init, manifest.init_segment.size_bytes),
        );
        for seg in &manifest.segments {
            self.segments.insert(
                seg.name.clone(),
                (id.clone(), SegmentKind::Media(seg.index), seg.size_bytes),
            );
        }
        self.videos.insert(id, manifest);
    }

    pub fn set_down(&self, down: bool) {
        self.down.store(down, Ordering::SeqCst);
    }

    pub fn is_down(&self) -> bool {
        self.down.load(Ordering::SeqCst)
    }

    pub fn segments_served(&self) -> u64 {
        self.segments_served.load(Ordering::SeqCst)
    }

    pub fn manifest(&self, video_id: &str) -> Result<&Manifest> {
        self.videos
            .get(video_id)
            .ok_or_else(|| Error::NotFound(format!("video {video_id}")))
    }

    pub fn serve_manifest(&self, video_id: &str) -> Result<String> {
        Ok(self.manifest(video_id)?.to_xml())
    }

    pub fn has_segment(&self, name: &str) -> bool {
        self.segments.contains_key(name)
    }

    pub fn serve_segment(&self, name: &str, throttle: Rate) -> Result<SegmentDelivery> {
        if let Rate::BytesPerSec(r) = throttle {
            Rate::limited(r)?;
        }
        let (video_id, kind, size) = self
            .segments
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("segment {name}")))?;
        let bytes = segment_payload(video_id, *kind, *size);
        self.segments_served.fetch_add(1, Ordering::SeqCst);
        *self.work_s.lock().unwrap_or_else(|e| e.into_inner()) += SEGMENT_WORK_S;
        Ok(SegmentDelivery {
            duration_ms: throttle.serialization_ms(*size),
            bytes,
        })
    }

    pub fn cpu_counters(&self, now_ms: f64) -> CpuCounters {
        let now_s = now_ms.max(0.0) / 1000.0;
        let total = self.options.cores * now_s;
        let work = *self.work_s.lock().unwrap_or_else(|e| e.into_inner());
        let active = (self.options.base_load * total + work).min(total);
        CpuCounters {
            total_cpu_s: total,
            active_cpu_s: active,
        }
    }

    pub fn cpu_metrics_endpoint(&self, now_ms: f64) -> String {
        let c = self.cpu_counters(now_ms);
        prom::render_cpu_counters([(self.name.as_str(), c.total_cpu_s, c.active_cpu_s)])
    }

    /// Routes `GET <path>` for this server.
    pub fn handle(&self, path: &str, now_ms: f64) -> Response {
        let path = path.split(['?', '#']).next().unwrap_or("");
        let result = if let Some(id) = path.strip_prefix("/manifest/") {
            self.serve_manifest(id).map(Response::xml)
        } else if let Some(name) = path.strip_prefix("/segment/") {
            self.serve_segment(name, self.options.throttle)
                .map(|d| Response::bytes(d.bytes).with_serve_ms(d.duration_ms))
        } else if path == "/metrics" {
            Ok(Response::text(self.cpu_metrics_endpoint(now_ms)))
        } else if path == "/ping" {
            Ok(Response::text("pong".into()))
        } else {
            Err(Error::NotFound(path.to_string()))
        };
        result.unwrap_or_else(Response::from_error)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::ManualClock;
    use crate::netsim::Clock;
    use proptest::prelude::*;

    fn server() -> OriginServer {
        let mut s = OriginServer::new("s1", OriginOptions::default());
        s.provision(Manifest::generate("v1", 10, 262_144, 4.0));
        s
    }

    #[test]
    fn manifest_round_trip() {
        let s = server();
        let xml = s.serve_manifest("v1").unwrap();
        let m = Manifest::parse_xml(&xml).unwrap();
        assert_eq!(m.video_id, "v1");
        assert_eq!(m.segment_count, 10);
        assert_eq!(&m, s.manifest("v1").unwrap());
    }

    #[test]
    fn segment_naming() {
        let m = Manifest::generate("v1", 10, 1, 4.0);
        let names: Vec<_> = m.segments.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names.first(), Some(&"v1_seg_0000.mp4"));
        assert_eq!(names.last(), Some(&"v1_seg_0009.mp4"));
        assert_eq!(names.len(), 10);
    }

    #[test]
    fn unknown_video_and_segment() {
        let s = server();
        assert!(matches!(s.serve_manifest("zzz"), Err(Error::NotFound(_))));
        assert!(matches!(
            s.serve_segment("nope.mp4", Rate::Unlimited),
            Err(Error::NotFound(_))
        ));
        assert_eq!(s.handle("/manifest/zzz", 0.0).status, 404);
        assert_eq!(s.handle("/favicon.ico", 0.0).status, 404);
    }

    #[test]
    fn throttled_duration() {
        let s = server();
        let d = s
            .serve_segment("v1_seg_0000.mp4", Rate::limited(262_144.0).unwrap())
            .unwrap();
        assert_eq!(d.duration_ms, 1000.0);
        assert_eq!(d.bytes.len(), 262_144);
        let d = s.serve_segment("v1_seg_0001.mp4", Rate::Unlimited).unwrap();
        assert_eq!(d.duration_ms, 0.0);
        assert!(matches!(
            s.serve_segment("v1_seg_0001.mp4", Rate::BytesPerSec(0.0)),
            Err(Error::InvalidRate(_))
        ));
    }

    #[test]
    fn payload_is_deterministic_and_distinct() {
        let a = segment_payload("v1", SegmentKind::Media(1), 4096);
        assert_eq!(a, segment_payload("v1", SegmentKind::Media(1), 4096));
        assert_ne!(a, segment_payload("v1", SegmentKind::Media(2), 4096));
        assert_ne!(a, segment_payload("v2", SegmentKind::Media(1), 4096));
        let s = server();
        assert_eq!(
            s.serve_segment("v1_seg_0003.mp4", Rate::Unlimited).unwrap().bytes,
            segment_payload("v1", SegmentKind::Media(3), 262_144)
        );
    }

    #[test]
    fn counters_start_at_zero_and_track_time() {
        let s = server();
        let fresh = prom::cpu_counters(&prom::parse_exposition(&s.cpu_metrics_endpoint(0.0)).unwrap());
        assert_eq!(fresh["s1"], (Some(0.0), Some(0.0)));

        let clock = ManualClock::new();
        clock.advance(10_000.0);
        let first = s.cpu_counters(clock.now_ms());
        clock.advance(2_000.0);
        let second = s.cpu_counters(clock.now_ms());
        assert!((second.total_cpu_s - first.total_cpu_s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn serving_charges_active_time() {
        let s = server();
        s.serve_segment("v1_seg_0000.mp4", Rate::Unlimited).unwrap();
        s.serve_segment("v1_seg_0001.mp4", Rate::Unlimited).unwrap();
        let c = s.cpu_counters(1000.0);
        assert!((c.active_cpu_s - 0.01).abs() < 1e-12);
        // Clamped while modeled time is still shorter than the work done.
        let c = s.cpu_counters(1.0);
        assert_eq!(c.active_cpu_s, c.total_cpu_s);
    }

    #[test]
    fn malformed_manifests() {
        assert!(Manifest::parse_xml("<MPD videoId=\"v\" segmentCount=\"1\"").is_err());
        assert!(Manifest::parse_xml("not xml at all").is_err());
        let wrong_count = "<MPD videoId=\"v\" segmentCount=\"2\" segmentDurationS=\"4\">\
                           <Init name=\"v_init.mp4\"/><Segment name=\"a.mp4\" sizeBytes=\"1\"/></MPD>";
        assert!(Manifest::parse_xml(wrong_count).is_err());
        let dup = "<MPD videoId=\"v\" segmentCount=\"2\" segmentDurationS=\"4\"><Init name=\"i.mp4\"/>\
                   <Segment name=\"a.mp4\" sizeBytes=\"1\"/><Segment name=\"a.mp4\" sizeBytes=\"1\"/></MPD>";
        assert!(Manifest::parse_xml(dup).is_err());
        let empty = "<MPD videoId=\"v\" segmentCount=\"0\" segmentDurationS=\"4\"><Init name=\"v_init.mp4\"/></MPD>";
        assert_eq!(Manifest::parse_xml(empty).unwrap().segment_count, 0);
    }

    #[test]
    fn odd_video_ids_are_escaped() {
        let m = Manifest::generate("a&b<\"c\"", 2, 10, 4.0);
        assert_eq!(Manifest::parse_xml(&m.to_xml()).unwrap(), m);
    }

    proptest! {
        #[test]
        fn throttle_lower_bound_is_exact(size in 1u64..300_000, rate in 1.0f64..1e8) {
            let mut s = OriginServer::new("s", OriginOptions::default());
            s.provision(Manifest::generate("p", 1, size, 1.0));
            let d = s.serve_segment("p_seg_0000.mp4", Rate::limited(rate).unwrap()).unwrap();
            prop_assert_eq!(d.duration_ms, size as f64 / rate * 1000.0);
            prop_assert_eq!(d.bytes.len() as u64, size);
        }

        #[test]
        fn every_listed_segment_is_servable(count in 0u32..40) {
            let mut s = OriginServer::new("s", OriginOptions::default());
            s.provision(Manifest::generate("v", count, 16, 1.0));
            let m = Manifest::parse_xml(&s.serve_manifest("v").unwrap()).unwrap();
            prop_assert_eq!(m.segments.len() as u32, count);
            for seg in m.segments.iter().chain(std::iter::once(&m.init_segment)) {
                prop_assert_eq!(s.handle(&format!("/segment/{}", seg.name), 0.0).status, 200);
            }
        }

        #[test]
        fn metrics_always_parse_with_active_le_total(
            served in 0u32..50, now_ms in 0.0f64..1e7, load in 0.0f64..1.0
        ) {
            let mut s = OriginServer::new("s", OriginOptions { base_load: load, ..OriginOptions::default() });
            s.provision(Manifest::generate("v", 1, 8, 1.0));
            for _ in 0..served {
                s.serve_segment("v_seg_0000.mp4", Rate::Unlimited).unwrap();
            }
            let parsed = prom::cpu_counters(&prom::parse_exposition(&s.cpu_metrics_endpoint(now_ms)).unwrap());
            let (total, active) = parsed["s"];
            prop_assert!(active.unwrap() <= total.unwrap());
            prop_assert!(active.unwrap() >= 0.0);
        }
    }
}
