//! Request/response plumbing shared by the virtual and real HTTP paths.
//!
//! In virtual mode a URL host names a node of the topology (`gateway`, `s1`,
//! `s2`, ...) and requests are routed in-process, with their timing taken
//! from the emulated links. In wall mode the same calls go over real HTTP.

use std::io::Read;
use std::sync::Arc;
use std::time::Duration;

use url::Url;

use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::netsim::{Clock, Network};
use crate::origin::OriginServer;
use crate::topology::{LinkId, Topology};

/// Header a wall-mode requester uses to say which link it sits behind.
pub const PEER_HEADER: &str = "x-cdn-peer";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Peer {
    Client,
    Gateway,
}

impl Peer {
    pub fn as_str(self) -> &'static str {
        match self {
            Peer::Client => "client",
            Peer::Gateway => "gateway",
        }
    }

    pub fn parse(text: &str) -> Peer {
        if text.eq_ignore_ascii_case("gateway") {
            Peer::Gateway
        } else {
            Peer::Client
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub status: u16,
    pub location: Option<String>,
    pub content_type: String,
    pub body: Vec<u8>,
    /// Time the server spends producing the body (throttling), in ms.
    pub serve_ms: f64,
}

impl Response {
    fn new(status: u16, content_type: &str, body: Vec<u8>) -> Self {
        Response {
            status,
            location: None,
            content_type: content_type.to_string(),
            body,
            serve_ms: 0.0,
        }
    }

    pub fn xml(body: String) -> Self {
        Response::new(200, "application/dash+xml", body.into_bytes())
    }

    pub fn text(body: String) -> Self {
        Response::new(200, "text/plain; version=0.0.4", body.into_bytes())
    }

    pub fn bytes(body: Vec<u8>) -> Self {
        Response::new(200, "video/mp4", body)
    }

    pub fn redirect(location: String) -> Self {
        Response {
            location: Some(location),
            ..Response::new(302, "text/plain", Vec::new())
        }
    }

    pub fn with_serve_ms(mut self, serve_ms: f64) -> Self {
        self.serve_ms = serve_ms;
        self
    }

    pub fn from_error(err: Error) -> Self {
        let status = match &err {
            Error::NotFound(_) => 404,
            Error::EmptyFilename(_) | Error::InvalidBase(_) | Error::InvalidRate(_) => 400,
            Error::NoServers | Error::ManifestUnreachable { .. } => 503,
            _ => 500,
        };
        Response::new(status, "text/plain", err.to_string().into_bytes())
    }
}

pub trait Transport: Send + Sync {
    fn get(&self, url: &str, clock: &dyn Clock) -> Result<Response>;
}

/// The nodes and links of an in-process deployment.
#[derive(Debug)]
pub struct VirtualNet {
    pub topology: Topology,
    pub network: Network,
    pub origins: Vec<Arc<OriginServer>>,
    /// How long a requester waits on an unresponsive server.
    pub timeout_ms: f64,
}

impl VirtualNet {
    pub fn base_url(&self, server_index: usize) -> String {
        format!("http://{}/", self.topology.name(self.topology.servers[server_index]))
    }

    pub fn server_by_host(&self, host: &str) -> Option<usize> {
        self.topology
            .servers
            .iter()
            .position(|id| self.topology.name(*id) == host)
    }

    pub fn link_for(&self, peer: Peer, server_index: usize) -> Result<LinkId> {
        let link = match peer {
            Peer::Client => self.topology.client_link(server_index),
            Peer::Gateway => self.topology.gateway_link(server_index),
        };
        link.ok_or_else(|| Error::UnknownServer(server_index.to_string()))
    }
}

/// In-process transport for one requester.
#[derive(Clone)]
pub struct VirtualTransport {
    pub net: Arc<VirtualNet>,
    pub gateway: Option<Arc<Gateway>>,
    pub peer: Peer,
}

impl Transport for VirtualTransport {
    fn get(&self, url: &str, clock: &dyn Clock) -> Result<Response> {
        let parsed = Url::parse(url).map_err(|e| Error::http(url, e))?;
        let host = parsed.host_str().unwrap_or_default();
        let path = parsed.path();
        if host == "gateway" {
            let gateway = self
                .gateway
                .as_ref()
                .ok_or_else(|| Error::http(url, "gateway not reachable from here"))?;
            let response = gateway.handle(path, clock);
            // The gateway turns errors into statuses; a shutdown must not look
            // like a failed request.
            if clock.is_shut_down() {
                return Err(Error::Shutdown);
            }
            return Ok(response);
        }
        let index = self
            .net
            .server_by_host(host)
            .ok_or_else(|| Error::http(url, format!("unknown host {host:?}")))?;
        let origin = &self.net.origins[index];
        if origin.is_down() {
            clock.sleep_ms(self.net.timeout_ms)?;
            return Err(Error::http(url, "timed out"));
        }
        let link = self.net.link_for(self.peer, index)?;
        let arrive = self.net.network.transmit(link, 0, clock.now_ms())?;
        clock.sleep_until(arrive)?;
        let response = origin.handle(path, clock.now_ms());
        let done = self.net.network.transmit(
            link,
            response.body.len() as u64,
            clock.now_ms() + response.serve_ms,
        )?;
        clock.sleep_until(done)?;
        Ok(response)
    }
}

/// Reaches origins without link timing. Telemetry scrapes use it so that
/// recorder cadence in virtual time is exact.
#[derive(Clone)]
pub struct DirectTransport {
    pub net: Arc<VirtualNet>,
}

impl Transport for DirectTransport {
    fn get(&self, url: &str, clock: &dyn Clock) -> Result<Response> {
        let parsed = Url::parse(url).map_err(|e| Error::http(url, e))?;
        let host = parsed.host_str().unwrap_or_default();
        let index = self
            .net
            .server_by_host(host)
            .ok_or_else(|| Error::http(url, format!("unknown host {host:?}")))?;
        let origin = &self.net.origins[index];
        if origin.is_down() {
            return Err(Error::http(url, "timed out"));
        }
        Ok(origin.handle(parsed.path(), clock.now_ms()))
    }
}

/// Blocking HTTP client. Redirects are returned, not followed.
#[derive(Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
    peer: Peer,
}

impl HttpTransport {
    pub fn new(peer: Peer, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .max_redirects(0)
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        HttpTransport {
            agent: config.into(),
            peer,
        }
    }
}

/// Largest body the HTTP client will buffer.
const MAX_BODY_BYTES: u64 = 1 << 30;

impl Transport for HttpTransport {
    fn get(&self, url: &str, _clock: &dyn Clock) -> Result<Response> {
        let mut resp = self
            .agent
            .get(url)
            .header(PEER_HEADER, self.peer.as_str())
            .call()
            .map_err(|e| Error::http(url, e))?;
        let status = resp.status().as_u16();
        let header = |name: &str| {
            resp.headers()
                .get(name)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        };
        let location = header("location");
        let content_type = header("content-type").unwrap_or_default();
        let mut body = Vec::new();
        resp.body_mut()
            .with_config()
            .limit(MAX_BODY_BYTES)
            .reader()
            .read_to_end(&mut body)
            .map_err(|e| Error::http(url, e))?;
        Ok(Response {
            status,
            location,
            content_type,
            body,
            serve_ms: 0.0,
        })
    }
}
