#![allow(dead_code)]

use std::collections::HashMap;

use luffy_sim::condense::CopyLocation;
use luffy_sim::model::{
    BatchState, ClusterConfig, CopyKey, ModelConfig, SequenceRecord, TokenRecord,
};
use luffy_sim::workload::{LengthDistribution, LengthShape};
use luffy_sim::SimConfig;
use rand::seq::index::sample;
use rand::Rng;

/// Small but non-trivial config: 4 devices, 4 experts, 3 blocks.
pub fn small_config() -> SimConfig {
    let mut c = SimConfig::default();
    c.model.d_model = 16;
    c.model.d_hidden = 32;
    c.model.experts_per_layer = 4;
    c.model.num_blocks = 3;
    c.cluster.num_devices = 4;
    c.workload.batch_size = 16;
    c.workload.length_distribution = LengthDistribution {
        min: 4,
        max: 32,
        shape: LengthShape::Uniform,
    };
    c.workload.bias_concentration = 0.2;
    c
}

/// A hand-rolled batch plus random expert-output locations, for planner
/// tests that need exact control over sizes.
pub struct PlanInstance {
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub batch: BatchState,
    pub locations: HashMap<CopyKey, CopyLocation>,
}

pub fn plan_instance(rng: &mut impl Rng, devices: usize, sequences: usize) -> PlanInstance {
    let model = ModelConfig {
        d_model: 4,
        d_hidden: 8,
        experts_per_layer: 4,
        top_k: 2,
        ..ModelConfig::default()
    };
    let cluster = ClusterConfig {
        num_devices: devices,
        ..ClusterConfig::default()
    };
    let mut seqs = Vec::new();
    let mut tokens = Vec::new();
    let mut locations = HashMap::new();
    for s in 0..sequences {
        let len = rng.random_range(1..=12);
        let mut ids = Vec::new();
        for pos in 0..len {
            let id = tokens.len();
            let experts = sample(rng, model.experts_per_layer, model.top_k);
            let gates: Vec<_> = experts.iter().map(|e| (e, 0.5)).collect();
            for &(e, _) in &gates {
                let loc = if rng.random_bool(0.15) {
                    CopyLocation::Condensed
                } else {
                    CopyLocation::Located(rng.random_range(0..devices))
                };
                locations.insert(CopyKey::new(id, e), loc);
            }
            tokens.push(TokenRecord {
                token_id: id,
                seq_id: s,
                position: pos,
                embedding: vec![1.0; model.d_model],
                gates,
            });
            ids.push(id);
        }
        seqs.push(SequenceRecord {
            seq_id: s,
            home_device: rng.random_range(0..devices),
            token_ids: ids,
            affinity: vec![0.25; model.experts_per_layer],
        });
    }
    let batch = BatchState {
        sequences: seqs,
        tokens,
        block_index: 0,
        loss_initial: 1.0,
        loss_prev: 1.0,
        seed: 0,
    };
    PlanInstance {
        model,
        cluster,
        batch,
        locations,
    }
}

/// `f` recounted from scratch: bytes of located copies not on `dst`.
pub fn recount_traffic(inst: &PlanInstance, seq: usize, dst: usize) -> u64 {
    let s = &inst.batch.sequences[seq];
    let mut remote = 0;
    for &id in &s.token_ids {
        for (e, _) in &inst.batch.tokens[id].gates {
            if let Some(CopyLocation::Located(d)) = inst.locations.get(&CopyKey::new(id, *e)) {
                if *d != dst {
                    remote += 1;
                }
            }
        }
    }
    remote * inst.model.token_bytes()
}

/// `n` unit-ish vectors drawn around `clusters` random centers.
pub fn clustered_embeddings(
    rng: &mut impl Rng,
    n: usize,
    d: usize,
    clusters: usize,
    spread: f32,
) -> Vec<Vec<f32>> {
    let centers: Vec<Vec<f32>> = (0..clusters)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    (0..n)
        .map(|_| {
            let c = &centers[rng.random_range(0..clusters)];
            let v: Vec<f32> = c
                .iter()
                .map(|x| x + rng.random_range(-spread..=spread))
                .collect();
            if v.iter().all(|&x| x == 0.0) {
                vec![1.0; d]
            } else {
                v
            }
        })
        .collect()
}

/// Independent f64 cosine, rescaled to [0, 1].
pub fn oracle_similarity(u: &[f32], v: &[f32]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
    let nu: f64 = u.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    (1.0 + (dot / (nu * nv)).clamp(-1.0, 1.0)) / 2.0
}
