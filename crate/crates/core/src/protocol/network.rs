//! Parametric link model. Latency is computed, never measured.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, tag};
use crate::tta::DeviceId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkModel {
    /// Bytes per second.
    pub bandwidth: f64,
    /// Round-trip time in seconds.
    pub rtt: f64,
    /// Independent per-message drop probability.
    pub loss_rate: f64,
    pub seed: u64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self { bandwidth: 10e6, rtt: 0.01, loss_rate: 0.0, seed: 0 }
    }
}

impl NetworkModel {
    pub fn new(bandwidth: f64, rtt: f64, loss_rate: f64, seed: u64) -> Result<Self> {
        let net = Self { bandwidth, rtt, loss_rate, seed };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(Error::Config(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if !(self.rtt >= 0.0) || !self.rtt.is_finite() {
            return Err(Error::Config(format!("rtt must be non-negative, got {}", self.rtt)));
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err(Error::Config(format!("loss_rate must lie in [0, 1], got {}", self.loss_rate)));
        }
        Ok(())
    }

    pub fn transmission_time(&self, bytes: u64) -> f64 {
        transmission_time(bytes, self)
    }

    /// Whether a message survives the link. Depends only on the seed and the
    /// message identity, so results do not depend on send order.
    pub fn delivered(&self, round: u32, variant: u8, sender: DeviceId, recipient: DeviceId) -> bool {
        if self.loss_rate <= 0.0 {
            return true;
        }
        let mut rng = rng_for(
            self.seed,
            &[tag::LOSS, round as u64, variant as u64, sender as u64, recipient as u64],
        );
        rng.gen::<f64>() >= self.loss_rate
    }
}

/// `rtt / 2 + bytes / bandwidth`, in seconds.
pub fn transmission_time(bytes: u64, net: &NetworkModel) -> f64 {
    net.rtt / 2.0 + bytes as f64 / net.bandwidth
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transmission_examples() {
        let net = NetworkModel::new(1e6, 0.01, 0.0, 0).unwrap();
        assert!((transmission_time(0, &net) - 0.005).abs() < 1e-15);
        let net = NetworkModel::new(10e6, 0.0, 0.0, 0).unwrap();
        assert!((transmission_time(1_440_000, &net) - 0.144).abs() < 1e-12);
        let fast = NetworkModel { bandwidth: 20e6, ..net };
        assert!((transmission_time(1_440_000, &fast) * 2.0 - transmission_time(1_440_000, &net)).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(NetworkModel::new(0.0, 0.0, 0.0, 0).is_err());
        assert!(NetworkModel::new(1.0, -1.0, 0.0, 0).is_err());
        assert!(NetworkModel::new(1.0, 0.0, 1.5, 0).is_err());
    }

    #[test]
    fn loss_is_deterministic_and_near_rate() {
        let net = NetworkModel::new(1.0, 0.0, 0.3, 42).unwrap();
        let drops = (0..10_000u32).filter(|&r| !net.delivered(r, 1, 1, 0)).count();
        assert!((drops as f64 / 1e4 - 0.3).abs() < 0.02);
        assert_eq!(net.delivered(5, 1, 2, 0), net.delivered(5, 1, 2, 0));
        let lossless = NetworkModel::default();
        assert!((0..100).all(|r| lossless.delivered(r, 2, 1, 3)));
    }
}
