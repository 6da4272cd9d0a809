use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::LinkId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rate {
    #[default]
    Unlimited,
    BytesPerSec(f64),
}

impl Rate {
    /// `None` maps to unlimited; a non-positive rate is rejected.
    pub fn from_option(rate: Option<f64>) -> Result<Rate> {
        match rate {
            None => Ok(Rate::Unlimited),
            Some(r) => Rate::limited(r),
        }
    }

    pub fn limited(bytes_per_s: f64) -> Result<Rate> {
        if bytes_per_s.is_finite() && bytes_per_s > 0.0 {
            Ok(Rate::BytesPerSec(bytes_per_s))
        } else {
            Err(Error::InvalidRate(bytes_per_s))
        }
    }

    /// Milliseconds needed to push `bytes` through at this rate.
    pub fn serialization_ms(&self, bytes: u64) -> f64 {
        match self {
            Rate::Unlimited => 0.0,
            Rate::BytesPerSec(r) => bytes as f64 / r * 1000.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub link_id: LinkId,
    pub one_way_delay_ms: f64,
    pub rate_limit: Rate,
    pub epoch: u64,
}

/// Shared table of link states. Each link sits behind its own lock, so a
/// reader always sees a consistent (delay, rate, epoch) triple.
#[derive(Debug, Default)]
pub struct Network {
    links: Vec<RwLock<LinkState>>,
}

impl Network {
    /// Links are numbered densely from 0 in the order given.
    pub fn new(initial_delays_ms: impl IntoIterator<Item = f64>) -> Self {
        let links = initial_delays_ms
            .into_iter()
            .enumerate()
            .map(|(i, delay)| {
                RwLock::new(LinkState {
                    link_id: LinkId(i as u32),
                    one_way_delay_ms: delay,
                    rate_limit: Rate::Unlimited,
                    epoch: 0,
                })
            })
            .collect();
        Network { links }
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    fn slot(&self, link: LinkId) -> Result<&RwLock<LinkState>> {
        self.links
            .get(link.0 as usize)
            .ok_or(Error::UnknownLink(link))
    }

    pub fn snapshot(&self, link: LinkId) -> Result<LinkState> {
        Ok(*self.slot(link)?.read().unwrap_or_else(|e| e.into_inner()))
    }

    /// Replaces the link delay (never adds to it) and bumps the epoch.
    pub fn apply_delay(&self, link: LinkId, delay_ms: f64) -> Result<LinkState> {
        assert!(delay_ms.is_finite() && delay_ms >= 0.0, "delay must be >= 0, got {delay_ms}");
        let mut state = self.slot(link)?.write().unwrap_or_else(|e| e.into_inner());
        state.one_way_delay_ms = delay_ms;
        state.epoch += 1;
        Ok(*state)
    }

    pub fn set_rate(&self, link: LinkId, rate: Rate) -> Result<LinkState> {
        let mut state = self.slot(link)?.write().unwrap_or_else(|e| e.into_inner());
        state.rate_limit = rate;
        state.epoch += 1;
        Ok(*state)
    }

    /// Arrival time of a payload sent at `send_time_ms`, using the link as it
    /// is right now. Later mutations do not move an already computed arrival.
    pub fn transmit(&self, link: LinkId, payload_bytes: u64, send_time_ms: f64) -> Result<f64> {
        let state = self.snapshot(link)?;
        Ok(send_time_ms + state.one_way_delay_ms + state.rate_limit.serialization_ms(payload_bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn replacement_not_accumulation() {
        let net = Network::new([0.0]);
        net.apply_delay(LinkId(0), 300.0).unwrap();
        let state = net.apply_delay(LinkId(0), 500.0).unwrap();
        assert_eq!(state.one_way_delay_ms, 500.0);
        assert_eq!(state.epoch, 2);
    }

    #[test]
    fn zero_delay_still_bumps_epoch() {
        let net = Network::new([40.0]);
        let state = net.apply_delay(LinkId(0), 0.0).unwrap();
        assert_eq!(state.one_way_delay_ms, 0.0);
        assert_eq!(state.epoch, 1);
    }

    #[test]
    fn unknown_link() {
        let net = Network::new([1.0]);
        assert!(matches!(net.apply_delay(LinkId(9), 1.0), Err(Error::UnknownLink(LinkId(9)))));
        assert!(matches!(net.transmit(LinkId(9), 1, 0.0), Err(Error::UnknownLink(_))));
    }

    #[test]
    fn transmit_examples() {
        let net = Network::new([100.0, 0.0, 250.0]);
        assert_eq!(net.transmit(LinkId(0), 1, 0.0).unwrap(), 100.0);
        net.set_rate(LinkId(1), Rate::limited(102_400.0).unwrap()).unwrap();
        assert_eq!(net.transmit(LinkId(1), 204_800, 0.0).unwrap(), 2000.0);
        net.set_rate(LinkId(2), Rate::limited(102_400.0).unwrap()).unwrap();
        assert_eq!(net.transmit(LinkId(2), 102_400, 0.0).unwrap(), 1250.0);
    }

    #[test]
    fn rates_must_be_positive() {
        assert!(matches!(Rate::limited(0.0), Err(Error::InvalidRate(_))));
        assert!(matches!(Rate::limited(-5.0), Err(Error::InvalidRate(_))));
        assert_eq!(Rate::from_option(None).unwrap(), Rate::Unlimited);
    }

    #[test]
    fn in_flight_arrival_uses_send_time_snapshot() {
        let net = Network::new([100.0]);
        let arrival = net.transmit(LinkId(0), 10, 0.0).unwrap();
        net.apply_delay(LinkId(0), 700.0).unwrap();
        assert_eq!(arrival, 100.0);
    }

    proptest! {
        #[test]
        fn last_write_wins(delays in proptest::collection::vec(0.0f64..10_000.0, 1..50)) {
            let net = Network::new([0.0]);
            for d in &delays {
                net.apply_delay(LinkId(0), *d).unwrap();
            }
            let state = net.snapshot(LinkId(0)).unwrap();
            prop_assert_eq!(state.one_way_delay_ms, *delays.last().unwrap());
            prop_assert_eq!(state.epoch, delays.len() as u64);
        }

        #[test]
        fn transmit_is_monotone(
            delay in 0.0f64..1000.0,
            extra_delay in 0.0f64..1000.0,
            bytes in 0u64..10_000_000,
            extra_bytes in 0u64..10_000_000,
            rate in 1.0f64..1e9,
            send in 0.0f64..1e6,
        ) {
            let net = Network::new([delay, delay + extra_delay]);
            net.set_rate(LinkId(0), Rate::limited(rate).unwrap()).unwrap();
            net.set_rate(LinkId(1), Rate::limited(rate).unwrap()).unwrap();
            let base = net.transmit(LinkId(0), bytes, send).unwrap();
            prop_assert!(base >= send);
            prop_assert!(net.transmit(LinkId(0), bytes + extra_bytes, send).unwrap() >= base);
            prop_assert!(net.transmit(LinkId(1), bytes, send).unwrap() >= base);
        }
    }
}
