//! Synthetic batch generation.
//!
//! Each sequence draws a Dirichlet affinity over experts; small concentration
//! gives the skewed per-sequence activation seen in real MoE traffic. Token
//! embeddings sit near one of a few cluster centers belonging to the token's
//! top-1 expert, so tokens heading to the same expert tend to be similar.
//! [`evolve_block`] moves the batch to the next block with a shared
//! norm-preserving map plus small noise, and re-samples the gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ensure_valid, BatchState, ClusterConfig, ExpertId, ModelConfig, SequenceRecord, TokenRecord,
};

/// Affinity floor before taking logs; keeps every selected gate weight > 0.
const AFFINITY_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthShape {
    Uniform,
    /// Half the sequences in the bottom quarter of the range, half in the top.
    Bimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub min: usize,
    pub max: usize,
    pub shape: LengthShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub batch_size: usize,
    pub length_distribution: LengthDistribution,
    /// Dirichlet concentration of per-sequence expert affinity.
    pub bias_concentration: f64,
    /// Embedding cluster centers per expert.
    pub cluster_count: usize,
    /// Target raw cosine between two tokens of the same cluster.
    pub cluster_tightness: f64,
    /// Per-block embedding noise scale.
    pub drift: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            batch_size: 64,
            length_distribution: LengthDistribution {
                min: 16,
                max: 128,
                shape: LengthShape::Uniform,
            },
            bias_concentration: 0.5,
            cluster_count: 4,
            cluster_tightness: 0.9,
            drift: 0.05,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let len = &self.length_distribution;
        if self.batch_size == 0 {
            v.push("workload.batch_size must be at least 1".to_string());
        }
        if len.min == 0 || len.min > len.max {
            v.push(format!(
                "workload lengths need 1 <= min <= max, got {}..{}",
                len.min, len.max
            ));
        }
        if !(self.bias_concentration > 0.0) {
            v.push("workload.bias_concentration must be positive".to_string());
        }
        if self.cluster_count == 0 {
            v.push("workload.cluster_count must be at least 1".to_string());
        }
        if !(self.cluster_tightness > 0.0 && self.cluster_tightness < 1.0) {
            v.push("workload.cluster_tightness must lie in (0, 1)".to_string());
        }
        if !(self.drift >= 0.0) {
            v.push("workload.drift must be non-negative".to_string());
        }
        v
    }
}

/// Which cluster a generated token was drawn around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClusterLabel {
    pub expert: ExpertId,
    pub center: usize,
}

/// Per-block transform: a shared sign-flip map (orthogonal, exact in floating
/// point) plus isotropic noise.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEvolution {
    pub signs: Vec<f32>,
    pub noise_scale: f64,
}

impl BlockEvolution {
    /// Noise shrinks with depth: `drift / sqrt(1 + block)`.
    pub fn for_block(rng: &mut impl Rng, d_model: usize, block: usize, drift: f64) -> Self {
        let signs = (0..d_model)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Self {
            signs,
            noise_scale: drift / (1.0 + block as f64).sqrt(),
        }
    }
}

/// Seed for iteration `t` of a run: `seed ^ splitmix64(t)`.
pub fn iteration_seed(seed: u64, iteration: u64) -> u64 {
    seed ^ splitmix64(iteration)
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gen_batch(
    model: &ModelConfig,
    cluster: &ClusterConfig,
    spec: &WorkloadSpec,
) -> Result<BatchState> {
    gen_batch_labeled(model, cluster, spec).map(|(b, _)| b)
}

/// Like [`gen_batch`] but also returns the cluster each token was drawn from,
/// indexed like `batch.tokens`.
pub fn gen_batch_labeled(
    model: &ModelConfig,
    cluster: &ClusterConfig,
    spec: &WorkloadSpec,
) -> Result<(BatchState, Vec<ClusterLabel>)> {
    ensure_valid(model, cluster)?;
    let problems = spec.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = model.d_model;
    let experts = model.experts_per_layer;

    let centers: Vec<Vec<Vec<f64>>> = (0..experts)
        .map(|_| {
            (0..spec.cluster_count)
                .map(|_| random_unit(&mut rng, d))
                .collect()
        })
        .collect();
    // unit center + N(0, sigma^2/d) per coordinate has expected pairwise
    // cosine 1 / (1 + sigma^2) with its cluster mates
    let tau = spec.cluster_tightness;
    let coord_std = ((1.0 - tau) / tau / d as f64).sqrt();
    let gamma = Gamma::new(spec.bias_concentration, 1.0)
        .map_err(|e| Error::InvalidConfig(vec![format!("bias_concentration: {e}")]))?;

    let mut sequences = Vec::with_capacity(spec.batch_size);
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for seq_id in 0..spec.batch_size {
        let len = sample_length(&mut rng, &spec.length_distribution);
        let affinity = sample_dirichlet(&mut rng, &gamma, experts);
        let mut token_ids = Vec::with_capacity(len);
        for position in 0..len {
            let token_id = tokens.len();
            let gates = sample_gate(&mut rng, &affinity, model.top_k);
            let top1 = gates[0].0;
            let center = rng.random_range(0..spec.cluster_count);
            let embedding = centers[top1][center]
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (c + coord_std * z) as f32
                })
                .collect();
            tokens.push(TokenRecord {
                token_id,
                seq_id,
                position,
                embedding,
                gates,
            });
            labels.push(ClusterLabel {
                expert: top1,
                center,
            });
            token_ids.push(token_id);
        }
        sequences.push(SequenceRecord {
            seq_id,
            home_device: seq_id % cluster.num_devices,
            token_ids,
            affinity,
        });
    }

    let total = tokens.len();
    let per_device = cluster.capacity_for(total);
    let capacity = per_device * cluster.num_devices;
    if total > capacity {
        return Err(Error::CapacityOverflow {
            tokens: total,
            capacity,
            devices: cluster.num_devices,
            per_device,
        });
    }

    Ok((
        BatchState {
            sequences,
            tokens,
            block_index: 0,
            loss_initial: 1.0,
            loss_prev: 1.0,
            seed: spec.seed,
        },
        labels,
    ))
}

/// Advances the batch to `block`: embeddings pass through the block's shared
/// sign-flip map plus noise of relative scale `drift / sqrt(1 + block)`, and
/// every token's gate is re-drawn from its sequence's affinity.
pub fn evolve_block(batch: &BatchState, block: usize, drift: f64) -> BatchState {
    let mut rng = ChaCha8Rng::seed_from_u64(batch.seed);
    rng.set_stream(block as u64 + 1);
    let d = batch.tokens.first().map_or(0, |t| t.embedding.len());
    let evolution = BlockEvolution::for_block(&mut rng, d, block, drift);
    let seqs = batch.sequence_index();

    let mut next = batch.clone();
    next.block_index = block;
    for token in &mut next.tokens {
        let norm = token
            .embedding
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        let std = evolution.noise_scale * norm / (d.max(1) as f64).sqrt();
        for (x, &s) in token.embedding.iter_mut().zip(&evolution.signs) {
            *x *= s;
            if std > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = (f64::from(*x) + std * z) as f32;
            }
        }
        let affinity = &batch.sequences[seqs[&token.seq_id]].affinity;
        let k = token.gates.len();
        token.gates = sample_gate(&mut rng, affinity, k);
    }
    next
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample_length(rng: &mut impl Rng, dist: &LengthDistribution) -> usize {
    match dist.shape {
        LengthShape::Uniform => rng.random_range(dist.min..=dist.max),
        LengthShape::Bimodal => {
            let quarter = (dist.max - dist.min) / 4;
            if rng.random::<bool>() {
                rng.random_range(dist.min..=dist.min + quarter)
            } else {
                rng.random_range(dist.max - quarter..=dist.max)
            }
        }
    }
}

fn sample_dirichlet(rng: &mut impl Rng, gamma: &Gamma<f64>, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|x| x / sum).collect()
    } else {
        // every gamma draw underflowed; collapse onto one expert
        let hot = rng.random_range(0..n);
        (0..n).map(|e| if e == hot { 1.0 } else { 0.0 }).collect()
    }
}

/// Gumbel-top-k over log affinity (sampling experts without replacement in
/// proportion to affinity), then softmax over the selected scores.
pub(crate) fn sample_gate(
    rng: &mut impl Rng,
    affinity: &[f64],
    top_k: usize,
) -> Vec<(ExpertId, f64)> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard gumbel");
    let mut scored: Vec<(ExpertId, f64)> = affinity
        .iter()
        .enumerate()
        .map(|(e, &a)| (e, a.max(AFFINITY_FLOOR).ln() + gumbel.sample(rng)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_k);
    let max = scored[0].1;
    let exps: Vec<f64> = scored.iter().map(|&(_, s)| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    scored
        .iter()
        .zip(exps)
        .map(|(&(e, _), x)| (e, x / sum))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condense::normalized_cosine;

    fn small() -> (ModelConfig, ClusterConfig, WorkloadSpec) {
        let model = ModelConfig {
            d_model: 32,
            experts_per_layer: 4,
            ..Default::default()
        };
        let cluster = ClusterConfig {
            num_devices: 4,
            ..Default::default()
        };
        let spec = WorkloadSpec {
            batch_size: 12,
            length_distribution: LengthDistribution {
                min: 4,
                max: 20,
                shape: LengthShape::Uniform,
            },
            seed: 11,
            ..Default::default()
        };
        (model, cluster, spec)
    }

    #[test]
    fn deterministic_for_seed() {
        let (m, c, s) = small();
        assert_eq!(
            gen_batch(&m, &c, &s).unwrap(),
            gen_batch(&m, &c, &s).unwrap()
        );
        let other = WorkloadSpec {
            seed: 12,
            ..s.clone()
        };
        assert_ne!(
            gen_batch(&m, &c, &s).unwrap(),
            gen_batch(&m, &c, &other).unwrap()
        );
    }

    #[test]
    fn generated_batch_is_valid() {
        let (m, c, s) = small();
        let b = gen_batch(&m, &c, &s).unwrap();
        b.validate(&m, &c).unwrap();
        for (i, seq) in b.sequences.iter().enumerate() {
            assert_eq!(seq.home_device, i % 4);
            assert!((4..=20).contains(&seq.len()));
        }
        let evolved = evolve_block(&b, 1, s.drift);
        evolved.validate(&m, &c).unwrap();
        assert_eq!(evolved.block_index, 1);
    }

    #[test]
    fn bimodal_lengths_avoid_middle() {
        let (m, c, mut s) = small();
        s.length_distribution = LengthDistribution {
            min: 10,
            max: 50,
            shape: LengthShape::Bimodal,
        };
        s.batch_size = 40;
        let b = gen_batch(&m, &c, &s).unwrap();
        for seq in &b.sequences {
            assert!(seq.len() <= 20 || seq.len() >= 40, "{}", seq.len());
        }
    }

    #[test]
    fn capacity_overflow_rejected() {
        let (m, mut c, s) = small();
        c.device_capacity = Some(2);
        assert!(matches!(
            gen_batch(&m, &c, &s),
            Err(Error::CapacityOverflow { .. })
        ));
    }

    #[test]
    fn invalid_spec_rejected() {
        let (m, c, mut s) = small();
        s.bias_concentration = 0.0;
        s.length_distribution.min = 30;
        let Err(Error::InvalidConfig(v)) = gen_batch(&m, &c, &s) else {
            panic!("expected config error");
        };
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn zero_drift_preserves_similarity_exactly() {
        let (m, c, s) = small();
        let b = gen_batch(&m, &c, &s).unwrap();
        let e = evolve_block(&b, 1, 0.0);
        for i in 0..b.tokens.len().min(30) {
            for j in i + 1..b.tokens.len().min(30) {
                let before =
                    normalized_cosine(&b.tokens[i].embedding, &b.tokens[j].embedding).unwrap();
                let after =
                    normalized_cosine(&e.tokens[i].embedding, &e.tokens[j].embedding).unwrap();
                assert_eq!(before, after);
            }
        }
    }

    #[test]
    fn gates_renormalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let affinity = [0.0, 0.5, 0.5, 0.0];
        for _ in 0..200 {
            let g = sample_gate(&mut rng, &affinity, 3);
            let sum: f64 = g.iter().map(|x| x.1).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(g.iter().all(|x| x.1 > 0.0));
        }
    }

    #[test]
    fn iteration_seed_differs_per_iteration() {
        assert_ne!(iteration_seed(7, 0), iteration_seed(7, 1));
        assert_eq!(iteration_seed(7, 3), 7 ^ splitmix64(3));
    }
}
