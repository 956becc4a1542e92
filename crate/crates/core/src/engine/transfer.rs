//! Expert-moving baselines.
//!
//! EXT copies a remote expert to a device whenever shipping the device's
//! tokens would cost more bytes than shipping the expert. HYT applies the same
//! byte test but only to the `top_m` most requested experts.

use std::collections::BTreeSet;

use crate::cost::TrafficMatrix;
use crate::model::{DeviceId, ExpertId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferDecision {
    /// `(device, expert)` pairs where a replica is installed this block.
    pub replicas: BTreeSet<(DeviceId, ExpertId)>,
    /// Expert weights shipped from the owning device to each replica.
    pub traffic: TrafficMatrix,
}

impl TransferDecision {
    pub fn none(num_devices: usize) -> Self {
        Self {
            replicas: BTreeSet::new(),
            traffic: TrafficMatrix::new(num_devices),
        }
    }

    pub fn has_replica(&self, device: DeviceId, expert: ExpertId) -> bool {
        self.replicas.contains(&(device, expert))
    }

    pub fn bytes(&self) -> u64 {
        self.traffic.off_diagonal_total()
    }

    fn install(&mut self, device: DeviceId, expert: ExpertId, owner: DeviceId, expert_bytes: u64) {
        self.replicas.insert((device, expert));
        self.traffic.add(owner, device, expert_bytes);
    }
}

/// `demand[g][e]` is the number of token copies on device `g` routed to
/// expert `e`; `placement[e]` is the device that owns `e`.
fn passes_byte_test(copies: u64, token_bytes: u64, expert_bytes: u64) -> bool {
    copies > 0 && copies * token_bytes > expert_bytes
}

pub fn strategy_ext(
    demand: &[Vec<u64>],
    placement: &[DeviceId],
    token_bytes: u64,
    expert_bytes: u64,
) -> TransferDecision {
    let mut out = TransferDecision::none(demand.len());
    for (g, row) in demand.iter().enumerate() {
        for (e, &copies) in row.iter().enumerate() {
            if placement[e] != g && passes_byte_test(copies, token_bytes, expert_bytes) {
                out.install(g, e, placement[e], expert_bytes);
            }
        }
    }
    out
}

/// Ranks experts by inbound remote copies (ties to the lower id) and
/// replicates only the first `top_m`.
pub fn strategy_hyt(
    demand: &[Vec<u64>],
    placement: &[DeviceId],
    token_bytes: u64,
    expert_bytes: u64,
    top_m: usize,
) -> TransferDecision {
    let mut out = TransferDecision::none(demand.len());
    let mut inbound: Vec<(ExpertId, u64)> = (0..placement.len())
        .map(|e| {
            let remote = demand
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != placement[e])
                .map(|(_, row)| row[e])
                .sum();
            (e, remote)
        })
        .collect();
    inbound.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(e, _) in inbound.iter().take(top_m) {
        for (g, row) in demand.iter().enumerate() {
            if placement[e] != g && passes_byte_test(row[e], token_bytes, expert_bytes) {
                out.install(g, e, placement[e], expert_bytes);
            }
        }
    }
    out
}
