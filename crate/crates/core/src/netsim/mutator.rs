//! Delay mutator: repeatedly replace a link's delay with a uniform integer
//! draw from `[min_delay_ms, max_delay_ms]`, then sleep a Poisson number of
//! seconds.

use std::io::Write;
use std::process::Command;

use rand::Rng;
use serde::Serialize;
use tracing::{debug, info};

use super::clock::Clock;
use super::link::Network;
use super::poisson::{poisson_sample, PoissonParams};
use crate::error::{Error, Result};
use crate::topology::{DelayMutatorConfig, LinkId};

/// Something whose one-way delay can be replaced.
pub trait DelayTarget {
    fn label(&self) -> String;

    /// Removes any existing delay and applies `delay_ms`. Returns a
    /// verification token that must change on every successful apply.
    fn apply(&mut self, delay_ms: u64) -> Result<u64>;

    fn clear(&mut self) -> Result<()>;
}

/// A link in the virtual network.
pub struct VirtualLink<'a> {
    pub network: &'a Network,
    pub link: LinkId,
}

impl DelayTarget for VirtualLink<'_> {
    fn label(&self) -> String {
        self.link.to_string()
    }

    fn apply(&mut self, delay_ms: u64) -> Result<u64> {
        Ok(self.network.apply_delay(self.link, delay_ms as f64)?.epoch)
    }

    fn clear(&mut self) -> Result<()> {
        self.network.apply_delay(self.link, 0.0).map(|_| ())
    }
}

/// Linux traffic control on a real interface (`tc qdisc ... netem delay`).
/// Needs root; never used by the virtual runs.
#[derive(Debug, Clone)]
pub struct LinuxTc {
    pub device: String,
    applied: u64,
}

impl LinuxTc {
    pub fn new(device: impl Into<String>) -> Self {
        LinuxTc {
            device: device.into(),
            applied: 0,
        }
    }

    pub fn clear_args(&self) -> Vec<String> {
        ["qdisc", "del", "dev", &self.device, "root"]
            .map(String::from)
            .to_vec()
    }

    pub fn apply_args(&self, delay_ms: u64) -> Vec<String> {
        [
            "qdisc",
            "add",
            "dev",
            &self.device,
            "root",
            "netem",
            "delay",
            &format!("{delay_ms}ms"),
        ]
        .map(String::from)
        .to_vec()
    }

    fn tc(args: &[String]) -> Result<std::process::Output> {
        Ok(Command::new("tc").args(args).output()?)
    }
}

impl DelayTarget for LinuxTc {
    fn label(&self) -> String {
        self.device.clone()
    }

    fn apply(&mut self, delay_ms: u64) -> Result<u64> {
        // Deleting a missing qdisc fails harmlessly; only the add must succeed.
        let removed = Self::tc(&self.clear_args())?;
        info!(device = %self.device, ok = removed.status.success(), "removed existing delay");
        let added = Self::tc(&self.apply_args(delay_ms))?;
        if !added.status.success() {
            return Err(Error::Io(std::io::Error::other(format!(
                "tc add failed: {}",
                String::from_utf8_lossy(&added.stderr).trim()
            ))));
        }
        info!(device = %self.device, delay_ms, "applied delay");
        self.applied += 1;
        Ok(self.applied)
    }

    fn clear(&mut self) -> Result<()> {
        Self::tc(&self.clear_args())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MutationStep {
    pub applied_delay_ms: u64,
    pub sleep_s: f64,
    pub verification: u64,
}

/// One iteration: draw, replace, verify, draw the sleep.
pub fn delay_mutator_step<R: Rng + ?Sized>(
    cfg: &DelayMutatorConfig,
    target: &mut dyn DelayTarget,
    rng: &mut R,
) -> Result<MutationStep> {
    let lo = cfg.min_delay_ms.max(0) as u64;
    let hi = (cfg.max_delay_ms.max(0) as u64).max(lo);
    let delay = rng.random_range(lo..=hi);
    let verification = target.apply(delay)?;
    let sleep_s = poisson_sample(PoissonParams::new(cfg.sleep_lambda_s.max(0.0)), rng) as f64;
    debug!(target = %target.label(), delay, sleep_s, verification, "delay mutated");
    Ok(MutationStep {
        applied_delay_ms: delay,
        sleep_s,
        verification,
    })
}

pub const MUTATION_LOG_HEADER: &str = "timestamp,link_id,delay_ms,sleep_s";

/// Runs the mutator until the clock reports shutdown, logging one CSV row per
/// step. Returns every step taken.
pub fn run_delay_mutator<R: Rng + ?Sized>(
    cfg: &DelayMutatorConfig,
    target: &mut dyn DelayTarget,
    clock: &dyn Clock,
    rng: &mut R,
    log: &mut dyn Write,
) -> Result<Vec<MutationStep>> {
    writeln!(log, "{MUTATION_LOG_HEADER}")?;
    let label = target.label();
    let mut steps = Vec::new();
    loop {
        let step = delay_mutator_step(cfg, target, rng)?;
        writeln!(
            log,
            "{},{},{},{}",
            clock.timestamp(),
            label,
            step.applied_delay_ms,
            step.sleep_s
        )?;
        log.flush()?;
        let sleep_ms = step.sleep_s * 1000.0;
        steps.push(step);
        match clock.sleep_ms(sleep_ms) {
            Ok(()) => {}
            Err(Error::Shutdown) => return Ok(steps),
            Err(e) => return Err(e),
        }
    }
}
