//! Domain types for the modeled cluster, model and batch.
//!
//! Everything here is plain data. Configs are validated by [`validate`],
//! which collects every violation instead of stopping at the first one.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type DeviceId = usize;
pub type ExpertId = usize;
pub type SeqId = usize;
pub type TokenId = usize;

/// One dispatched copy of a token: the token routed to one of its experts.
/// A token's gate experts are distinct, so the pair is unique.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CopyKey {
    pub token: TokenId,
    pub expert: ExpertId,
}

impl CopyKey {
    pub fn new(token: TokenId, expert: ExpertId) -> Self {
        Self { token, expert }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    pub bytes_per_scalar: usize,
    /// Scales forward-only modeled compute to a full training step.
    pub train_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            d_model: 64,
            d_hidden: 256,
            experts_per_layer: 8,
            top_k: 2,
            bytes_per_scalar: 4,
            train_multiplier: 3.0,
        }
    }
}

impl ModelConfig {
    /// Wire size of one token copy.
    pub fn token_bytes(&self) -> u64 {
        (self.d_model * self.bytes_per_scalar) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub num_devices: usize,
    /// Operations per millisecond, per device.
    pub compute_speed: f64,
    /// Bytes per millisecond, per device.
    pub link_bandwidth: f64,
    /// Max tokens resident per device for combine. `None` derives it from the
    /// batch, see [`ClusterConfig::capacity_for`].
    pub device_capacity: Option<usize>,
    /// `expert_placement[e]` is the device hosting expert `e`. `None` means
    /// round-robin ([`default_placement`]).
    pub expert_placement: Option<Vec<DeviceId>>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            num_devices: 8,
            compute_speed: 1.0e10,
            link_bandwidth: 1.0e7,
            device_capacity: None,
            expert_placement: None,
        }
    }
}

impl ClusterConfig {
    pub fn placement(&self, experts_per_layer: usize) -> Vec<DeviceId> {
        match &self.expert_placement {
            Some(p) => p.clone(),
            None => default_placement(experts_per_layer, self.num_devices),
        }
    }

    /// Per-device token capacity. Defaults to ceil(1.5 * total / devices).
    pub fn capacity_for(&self, total_tokens: usize) -> usize {
        self.device_capacity
            .unwrap_or_else(|| (total_tokens * 3).div_ceil(2 * self.num_devices.max(1)))
    }
}

/// Round-robin placement: expert `e` lives on device `e mod num_devices`.
pub fn default_placement(experts_per_layer: usize, num_devices: usize) -> Vec<DeviceId> {
    (0..experts_per_layer).map(|e| e % num_devices).collect()
}

/// Returns every violated invariant; an empty list means the pair is usable.
pub fn validate(model: &ModelConfig, cluster: &ClusterConfig) -> Vec<String> {
    let mut v = Vec::new();
    for (name, value) in [
        ("num_blocks", model.num_blocks),
        ("d_model", model.d_model),
        ("d_hidden", model.d_hidden),
        ("experts_per_layer", model.experts_per_layer),
        ("top_k", model.top_k),
        ("num_devices", cluster.num_devices),
    ] {
        if value == 0 {
            v.push(format!("{name} must be at least 1"));
        }
    }
    if model.top_k > model.experts_per_layer {
        v.push("top_k exceeds experts".to_string());
    }
    if !matches!(model.bytes_per_scalar, 2 | 4) {
        v.push(format!(
            "bytes_per_scalar must be 2 or 4, got {}",
            model.bytes_per_scalar
        ));
    }
    if !(model.train_multiplier >= 1.0) {
        v.push(format!(
            "train_multiplier must be >= 1, got {}",
            model.train_multiplier
        ));
    }
    if !(cluster.compute_speed > 0.0) {
        v.push("compute_speed must be positive".to_string());
    }
    if !(cluster.link_bandwidth > 0.0) {
        v.push("link_bandwidth must be positive".to_string());
    }
    if cluster.device_capacity == Some(0) {
        v.push("device_capacity must be at least 1".to_string());
    }
    if let Some(placement) = &cluster.expert_placement {
        for e in placement.len()..model.experts_per_layer {
            v.push(format!("expert {e} has no device"));
        }
        for (e, &d) in placement.iter().enumerate() {
            if e >= model.experts_per_layer {
                v.push(format!("placement lists unknown expert {e}"));
            } else if d >= cluster.num_devices {
                v.push(format!("expert {e} placed on missing device {d}"));
            }
        }
    }
    v
}

/// Fails with [`Error::InvalidConfig`] when [`validate`] reports anything.
pub fn ensure_valid(model: &ModelConfig, cluster: &ClusterConfig) -> Result<()> {
    let v = validate(model, cluster);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: TokenId,
    pub seq_id: SeqId,
    pub position: usize,
    pub embedding: Vec<f32>,
    /// `(expert, weight)` pairs, highest weight first.
    pub gates: Vec<(ExpertId, f64)>,
}

impl TokenRecord {
    pub fn copies(&self) -> impl Iterator<Item = CopyKey> + '_ {
        self.gates
            .iter()
            .map(move |&(e, _)| CopyKey::new(self.token_id, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub seq_id: SeqId,
    pub home_device: DeviceId,
    pub token_ids: Vec<TokenId>,
    /// Per-expert routing affinity the gate is re-sampled from every block.
    pub affinity: Vec<f64>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchState {
    pub sequences: Vec<SequenceRecord>,
    pub tokens: Vec<TokenRecord>,
    pub block_index: usize,
    pub loss_initial: f64,
    pub loss_prev: f64,
    /// Stream seed for per-block evolution.
    pub seed: u64,
}

impl BatchState {
    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn total_copies(&self) -> usize {
        self.tokens.iter().map(|t| t.gates.len()).sum()
    }

    /// Maps token id to its index in `tokens`.
    pub fn token_index(&self) -> HashMap<TokenId, usize> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.token_id, i))
            .collect()
    }

    pub fn sequence_index(&self) -> HashMap<SeqId, usize> {
        self.sequences
            .iter()
            .enumerate()
            .map(|(i, s)| (s.seq_id, i))
            .collect()
    }

    /// Checks the record-level invariants against the configs.
    pub fn validate(&self, model: &ModelConfig, cluster: &ClusterConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidBatch(m));
        if self.sequences.is_empty() {
            return bad("no sequences".into());
        }
        if !(self.loss_initial > 0.0 && self.loss_prev > 0.0) {
            return bad("losses must be positive".into());
        }
        let placement = cluster.placement(model.experts_per_layer);
        let tokens = self.token_index();
        if tokens.len() != self.tokens.len() {
            return bad("duplicate token ids".into());
        }
        let seqs = self.sequence_index();
        if seqs.len() != self.sequences.len() {
            return bad("duplicate sequence ids".into());
        }
        let mut owned = 0usize;
        for s in &self.sequences {
            if s.is_empty() {
                return bad(format!("sequence {} is empty", s.seq_id));
            }
            if s.home_device >= cluster.num_devices {
                return bad(format!("sequence {} homed on missing device", s.seq_id));
            }
            for (pos, id) in s.token_ids.iter().enumerate() {
                let Some(&ti) = tokens.get(id) else {
                    return bad(format!("sequence {} lists unknown token {id}", s.seq_id));
                };
                let t = &self.tokens[ti];
                if t.seq_id != s.seq_id || t.position != pos {
                    return bad(format!("token {id} has inconsistent seq_id/position"));
                }
            }
            owned += s.len();
        }
        if owned != self.tokens.len() {
            return bad("some tokens belong to no sequence".into());
        }
        for t in &self.tokens {
            if !seqs.contains_key(&t.seq_id) {
                return bad(format!("token {} has unknown sequence", t.token_id));
            }
            if t.embedding.len() != model.d_model {
                return bad(format!(
                    "token {} embedding has wrong dimension",
                    t.token_id
                ));
            }
            if t.gates.len() != model.top_k {
                return bad(format!("token {} has {} gates", t.token_id, t.gates.len()));
            }
            let mut sum = 0.0;
            for (i, &(e, w)) in t.gates.iter().enumerate() {
                if e >= placement.len() {
                    return bad(format!(
                        "token {} routed to unplaced expert {e}",
                        t.token_id
                    ));
                }
                if t.gates[..i].iter().any(|&(o, _)| o == e) {
                    return bad(format!("token {} repeats expert {e}", t.token_id));
                }
                if !(w > 0.0) {
                    return bad(format!("token {} has non-positive gate weight", t.token_id));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return bad(format!("token {} gate weights sum to {sum}", t.token_id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        assert!(validate(&ModelConfig::default(), &ClusterConfig::default()).is_empty());
    }

    #[test]
    fn top_k_above_experts() {
        let model = ModelConfig {
            top_k: 3,
            experts_per_layer: 2,
            ..Default::default()
        };
        let cluster = ClusterConfig {
            num_devices: 2,
            ..Default::default()
        };
        assert_eq!(validate(&model, &cluster), vec!["top_k exceeds experts"]);
    }

    #[test]
    fn unplaced_expert() {
        let model = ModelConfig {
            experts_per_layer: 6,
            ..Default::default()
        };
        let cluster = ClusterConfig {
            num_devices: 2,
            expert_placement: Some(vec![0, 1, 0, 1, 0]),
            ..Default::default()
        };
        assert_eq!(validate(&model, &cluster), vec!["expert 5 has no device"]);
    }

    #[test]
    fn bad_scalars_collected() {
        let model = ModelConfig {
            bytes_per_scalar: 8,
            train_multiplier: 0.5,
            ..Default::default()
        };
        let cluster = ClusterConfig {
            compute_speed: 0.0,
            link_bandwidth: -1.0,
            ..Default::default()
        };
        assert_eq!(validate(&model, &cluster).len(), 4);
    }

    #[test]
    fn round_robin_placement() {
        assert_eq!(default_placement(4, 4), vec![0, 1, 2, 3]);
        assert_eq!(default_placement(4, 2), vec![0, 1, 0, 1]);
        assert_eq!(default_placement(1, 3), vec![0]);
    }

    #[test]
    fn capacity_default_rounds_up() {
        let c = ClusterConfig {
            num_devices: 4,
            ..Default::default()
        };
        // 10 / 4 * 1.5 = 3.75
        assert_eq!(c.capacity_for(10), 4);
        let fixed = ClusterConfig {
            device_capacity: Some(7),
            ..c
        };
        assert_eq!(fixed.capacity_for(10), 7);
    }
}
