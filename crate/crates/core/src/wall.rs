//! Real HTTP listeners for wall-clock runs. Origins delay their answers by the
//! emulated link of whoever is asking (the `x-cdn-peer` header), so the same
//! netsim state drives both clock modes.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::IntoResponse;
use axum::Router;
use tokio::net::TcpListener;
use tokio::runtime::Runtime;
use tracing::info;

use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::netsim::{Clock, WallClock};
use crate::transport::{Peer, Response, VirtualNet, PEER_HEADER};

fn to_http(resp: Response) -> axum::response::Response {
    let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let mut builder = axum::response::Response::builder()
        .status(status)
        .header(header::CONTENT_TYPE, resp.content_type);
    if let Some(location) = resp.location {
        builder = builder.header(header::LOCATION, location);
    }
    builder
        .body(Body::from(resp.body))
        .unwrap_or_else(|_| StatusCode::INTERNAL_SERVER_ERROR.into_response())
}

#[derive(Clone)]
struct OriginState {
    net: Arc<VirtualNet>,
    index: usize,
    clock: Arc<WallClock>,
}

async fn origin_handler(State(st): State<OriginState>, headers: HeaderMap, uri: Uri) -> axum::response::Response {
    let peer = headers
        .get(PEER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(Peer::parse)
        .unwrap_or(Peer::Client);
    if st.net.origins[st.index].is_down() {
        tokio::time::sleep(Duration::from_secs_f64(st.net.timeout_ms / 1000.0)).await;
        return StatusCode::SERVICE_UNAVAILABLE.into_response();
    }
    let link = match st.net.link_for(peer, st.index) {
        Ok(l) => l,
        Err(e) => return to_http(Response::from_error(e)),
    };
    let resp = st.net.origins[st.index].handle(uri.path(), st.clock.now_ms());
    let request_leg = st.net.network.transmit(link, 0, 0.0).unwrap_or(0.0);
    let response_leg = st
        .net
        .network
        .transmit(link, resp.body.len() as u64, 0.0)
        .unwrap_or(0.0);
    let wait_ms = request_leg + resp.serve_ms + response_leg;
    tokio::time::sleep(Duration::from_secs_f64(wait_ms.max(0.0) / 1000.0)).await;
    to_http(resp)
}

#[derive(Clone)]
struct GatewayState {
    gateway: Arc<Gateway>,
    clock: Arc<WallClock>,
}

async fn gateway_handler(State(st): State<GatewayState>, uri: Uri) -> axum::response::Response {
    let path = uri.path().to_string();
    let result = tokio::task::spawn_blocking(move || st.gateway.handle(&path, st.clock.as_ref())).await;
    match result {
        Ok(resp) => to_http(resp),
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

/// Listeners for one deployment. Dropping it stops them.
pub struct WallDeployment {
    runtime: Runtime,
    host: String,
    clock: Arc<WallClock>,
    pub origin_urls: Vec<String>,
    pub gateway_url: Option<String>,
}

impl WallDeployment {
    /// Binds one listener per origin. `base_port` 0 picks free ports;
    /// otherwise origins take `base_port + 1 ..`, leaving `base_port` for the
    /// gateway.
    pub fn start_origins(net: Arc<VirtualNet>, host: &str, base_port: u16) -> Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .worker_threads(4)
            .build()?;
        let clock = Arc::new(WallClock::new());
        let mut origin_urls = Vec::new();
        for index in 0..net.origins.len() {
            let port = if base_port == 0 { 0 } else { base_port + 1 + index as u16 };
            let state = OriginState {
                net: net.clone(),
                index,
                clock: clock.clone(),
            };
            let app = Router::new().fallback(origin_handler).with_state(state);
            let addr = bind(&runtime, app, host, port)?;
            info!(server = net.origins[index].name(), %addr, "origin listening");
            origin_urls.push(format!("http://{addr}/"));
        }
        Ok(WallDeployment {
            runtime,
            host: host.to_string(),
            clock,
            origin_urls,
            gateway_url: None,
        })
    }

    pub fn serve_gateway(&mut self, gateway: Arc<Gateway>, port: u16) -> Result<String> {
        let state = GatewayState {
            gateway,
            clock: self.clock.clone(),
        };
        let app = Router::new().fallback(gateway_handler).with_state(state);
        let addr = bind(&self.runtime, app, &self.host, port)?;
        info!(%addr, "gateway listening");
        let url = format!("http://{addr}/");
        self.gateway_url = Some(url.clone());
        Ok(url)
    }
}

impl Drop for WallDeployment {
    fn drop(&mut self) {
        // Runtime::drop would block on in-flight handlers.
        let rt = std::mem::replace(
            &mut self.runtime,
            tokio::runtime::Builder::new_current_thread()
                .build()
                .expect("build placeholder runtime"),
        );
        rt.shutdown_background();
    }
}

fn bind(runtime: &Runtime, app: Router, host: &str, port: u16) -> Result<SocketAddr> {
    let listener = runtime
        .block_on(TcpListener::bind((host, port)))
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("bind {host}:{port}: {e}"))))?;
    let addr = listener.local_addr()?;
    runtime.spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    Ok(addr)
}
