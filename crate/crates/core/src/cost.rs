//! Analytic cost models for attention, expert FFNs and all-to-all exchange.
//!
//! Operation counts are accumulated in `u128` and rounded to `f64` once, so
//! scaling identities (doubling the batch, doubling the device speed) hold
//! exactly rather than approximately.

use serde::{Deserialize, Serialize};

use crate::model::{ClusterConfig, DeviceId, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    /// Slowdown per extra co-located active expert.
    pub alpha: f64,
    /// Per-message latency charged on each nonzero off-diagonal transfer.
    pub latency_ms: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            alpha: ContentionModel::default().alpha,
            latency_ms: 0.0,
        }
    }
}

impl CostConfig {
    pub fn contention(&self) -> ContentionModel {
        ContentionModel { alpha: self.alpha }
    }
}

/// Linear slowdown of expert compute when `n` active experts share a device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContentionModel {
    pub alpha: f64,
}

impl Default for ContentionModel {
    /// 0.44 puts three co-located experts at 1.88x.
    fn default() -> Self {
        Self { alpha: 0.44 }
    }
}

impl ContentionModel {
    pub fn factor(&self, co_located_active: usize) -> f64 {
        1.0 + self.alpha * (co_located_active.max(1) - 1) as f64
    }
}

/// Attention layer cost for `batch` sequences padded to `max_len`:
/// `(3*B*L*d^2 + 2*B*L^2*d) / P`. Projections plus the two batched matmuls;
/// softmax is ignored.
pub fn attention_time(batch: u64, max_len: u64, d: u64, speed: f64) -> f64 {
    attention_ops(batch, max_len, d) as f64 / speed
}

/// Exact operation count behind [`attention_time`].
pub fn attention_ops(batch: u64, max_len: u64, d: u64) -> u128 {
    let (b, l, d) = (batch as u128, max_len as u128, d as u128);
    3 * b * l * d * d + 2 * b * l * l * d
}

/// Expert FFN cost: two projections, multiply-accumulate counted as 2 ops.
pub fn expert_time(
    tokens: u64,
    model: &ModelConfig,
    speed: f64,
    co_located_active: usize,
    contention: ContentionModel,
) -> f64 {
    let flops = 4 * tokens as u128 * model.d_model as u128 * model.d_hidden as u128;
    flops as f64 / speed * contention.factor(co_located_active)
}

/// Bytes needed to ship one expert (two `d_model x d_hidden` matrices).
pub fn expert_transfer_bytes(model: &ModelConfig) -> u64 {
    2 * (model.d_model * model.d_hidden * model.bytes_per_scalar) as u64
}

/// Square `src -> dst` byte matrix. The diagonal is intra-device and free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficMatrix {
    n: usize,
    bytes: Vec<u64>,
}

impl TrafficMatrix {
    pub fn new(num_devices: usize) -> Self {
        Self {
            n: num_devices,
            bytes: vec![0; num_devices * num_devices],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let n = rows.len();
        let mut m = Self::new(n);
        for (s, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n, "traffic matrix must be square");
            m.bytes[s * n..(s + 1) * n].copy_from_slice(row);
        }
        m
    }

    pub fn num_devices(&self) -> usize {
        self.n
    }

    pub fn get(&self, src: DeviceId, dst: DeviceId) -> u64 {
        self.bytes[src * self.n + dst]
    }

    pub fn set(&mut self, src: DeviceId, dst: DeviceId, bytes: u64) {
        self.bytes[src * self.n + dst] = bytes;
    }

    pub fn add(&mut self, src: DeviceId, dst: DeviceId, bytes: u64) {
        self.bytes[src * self.n + dst] += bytes;
    }

    pub fn merge(&mut self, other: &TrafficMatrix) {
        assert_eq!(self.n, other.n);
        for (a, b) in self.bytes.iter_mut().zip(&other.bytes) {
            *a += *b;
        }
    }

    /// Bytes that actually cross the network.
    pub fn off_diagonal_total(&self) -> u64 {
        self.entries()
            .filter(|&(s, d, _)| s != d)
            .map(|(_, _, b)| b)
            .sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (DeviceId, DeviceId, u64)> + '_ {
        self.bytes
            .iter()
            .enumerate()
            .map(move |(i, &b)| (i / self.n, i % self.n, b))
    }
}

/// Bandwidth-bound all-to-all: the slowest device's off-diagonal
/// send + receive volume over its link, plus optional per-message latency.
pub fn all_to_all_time(traffic: &TrafficMatrix, cluster: &ClusterConfig, latency_ms: f64) -> f64 {
    let n = traffic.num_devices();
    let mut volume = vec![0u64; n];
    let mut messages = vec![0u32; n];
    for (s, d, b) in traffic.entries() {
        if s == d || b == 0 {
            continue;
        }
        volume[s] += b;
        volume[d] += b;
        messages[s] += 1;
        messages[d] += 1;
    }
    volume
        .iter()
        .zip(&messages)
        .map(|(&v, &m)| v as f64 / cluster.link_bandwidth + latency_ms * m as f64)
        .fold(0.0, f64::max)
}
