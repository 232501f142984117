//! Link model for the in-memory network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::SimError;

/// One-way delay of a link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Latency {
    Fixed(f64),
    /// Uniform over `[lo, hi]` milliseconds.
    Uniform(f64, f64),
}

impl Default for Latency {
    fn default() -> Self {
        Latency::Fixed(0.0)
    }
}

impl Latency {
    pub fn sample_ns(&self, rng: &mut ChaCha8Rng) -> u64 {
        let ms = match *self {
            Latency::Fixed(ms) => ms,
            Latency::Uniform(lo, hi) if hi > lo => rng.gen_range(lo..=hi),
            Latency::Uniform(lo, _) => lo,
        };
        (ms * 1e6).round() as u64
    }

    pub fn max_ns(&self) -> u64 {
        let ms = match *self {
            Latency::Fixed(ms) => ms,
            Latency::Uniform(lo, hi) => lo.max(hi),
        };
        (ms * 1e6).round() as u64
    }
}

/// Faults apply to FRAME traffic only; every other message travels over a
/// reliable, ordered stream.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetModel {
    #[serde(default)]
    pub latency_ms: Latency,
    #[serde(default)]
    pub loss_pct: f64,
    #[serde(default)]
    pub reorder_pct: f64,
    /// Per-link capacity; unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth_mbps: Option<f64>,
}

impl NetModel {
    pub fn fixed(ms: f64) -> Self {
        NetModel {
            latency_ms: Latency::Fixed(ms),
            ..NetModel::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let pct = |name: &str, v: f64| {
            if (0.0..=100.0).contains(&v) {
                Ok(())
            } else {
                Err(SimError::Scenario(format!("{name} must be within [0, 100], got {v}")))
            }
        };
        pct("loss_pct", self.loss_pct)?;
        pct("reorder_pct", self.reorder_pct)?;
        let lat_ok = match self.latency_ms {
            Latency::Fixed(ms) => ms >= 0.0 && ms.is_finite(),
            Latency::Uniform(lo, hi) => lo >= 0.0 && hi >= lo && hi.is_finite(),
        };
        if !lat_ok {
            return Err(SimError::Scenario(format!("bad latency {:?}", self.latency_ms)));
        }
        if let Some(bw) = self.bandwidth_mbps {
            if !(bw > 0.0 && bw.is_finite()) {
                return Err(SimError::Scenario(format!("bandwidth_mbps must be positive, got {bw}")));
            }
        }
        Ok(())
    }

    /// Serialisation delay of `bytes` on this link.
    pub fn transmit_ns(&self, bytes: usize) -> u64 {
        match self.bandwidth_mbps {
            Some(mbps) => (bytes as f64 * 8.0 / (mbps * 1e6) * 1e9).ceil() as u64,
            None => 0,
        }
    }
}
