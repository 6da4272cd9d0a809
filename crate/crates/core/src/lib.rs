//! CDN emulation harness.
//!
//! A gateway probes origin servers over emulated links, redirects each media
//! segment request to the lowest-RTT server, and a headless DASH client
//! streams through it with throttled downloads. Telemetry recorders log
//! noise-modified RTT and CPU utilization to CSV, and the analysis module
//! turns those CSVs into box statistics, time series and a cross-metric
//! trade-off report.
//!
//! Runs default to a virtual clock, where a seed determines every byte of
//! output; wall-clock mode binds real HTTP listeners instead.

pub mod analysis;
pub mod client;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod netsim;
pub mod orchestrator;
pub mod origin;
pub mod prom;
pub mod topology;
pub mod transport;
pub mod wall;

pub use error::{Error, Result};
