mod common;

use std::collections::HashMap;

use common::{oracle_similarity, small_config};
use luffy_sim::workload::{evolve_block, gen_batch, gen_batch_labeled, iteration_seed};
use luffy_sim::SimConfig;

fn config(alpha: f64, seed: u64) -> SimConfig {
    let mut c = small_config();
    c.model.experts_per_layer = 8;
    c.cluster.num_devices = 8;
    c.workload.batch_size = 64;
    c.workload.bias_concentration = alpha;
    c.workload.seed = seed;
    c
}

/// Per sequence: share of its copies routed to its most used expert.
fn mean_top_share(c: &SimConfig) -> f64 {
    let b = gen_batch(&c.model, &c.cluster, &c.workload).unwrap();
    let index = b.token_index();
    let mut total = 0.0;
    for s in &b.sequences {
        let mut counts = vec![0usize; c.model.experts_per_layer];
        for id in &s.token_ids {
            for &(e, _) in &b.tokens[index[id]].gates {
                counts[e] += 1;
            }
        }
        let all: usize = counts.iter().sum();
        total += *counts.iter().max().unwrap() as f64 / all as f64;
    }
    total / b.sequences.len() as f64
}

#[test]
fn flat_affinity_routes_uniformly() {
    let mut c = config(1e6, 5);
    c.model.top_k = 1;
    let b = gen_batch(&c.model, &c.cluster, &c.workload).unwrap();
    let mut counts = vec![0f64; 8];
    for t in &b.tokens {
        counts[t.gates[0].0] += 1.0;
    }
    let expected = b.tokens.len() as f64 / 8.0;
    let chi2: f64 = counts
        .iter()
        .map(|o| (o - expected).powi(2) / expected)
        .sum();
    // 7 degrees of freedom, p = 0.001
    assert!(chi2 < 24.32, "chi2 = {chi2}, counts = {counts:?}");
}

#[test]
fn lower_concentration_means_more_skew() {
    let shares: Vec<f64> = [0.05, 0.5, 5.0, 500.0]
        .iter()
        .map(|&a| mean_top_share(&config(a, 9)))
        .collect();
    assert!(shares.windows(2).all(|w| w[0] > w[1]), "{shares:?}");
    // two distinct experts per token cap the share at 0.5
    assert!(shares[0] > 0.4, "{shares:?}");
}

#[test]
fn tight_clusters_are_similar() {
    let c = config(0.5, 17);
    let (b, labels) = gen_batch_labeled(&c.model, &c.cluster, &c.workload).unwrap();
    let mut by_label: HashMap<_, Vec<usize>> = HashMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_label.entry(*l).or_default().push(i);
    }
    let (mut pairs, mut close) = (0, 0);
    for members in by_label.values() {
        for (x, &i) in members.iter().enumerate().take(60) {
            for &j in members[x + 1..].iter().take(60) {
                pairs += 1;
                if oracle_similarity(&b.tokens[i].embedding, &b.tokens[j].embedding) >= 0.75 {
                    close += 1;
                }
            }
        }
    }
    assert!(pairs > 1000);
    assert!(close as f64 >= 0.9 * pairs as f64, "{close}/{pairs}");
}

#[test]
fn small_drift_keeps_pair_similarity() {
    let c = config(0.5, 23);
    let b = gen_batch(&c.model, &c.cluster, &c.workload).unwrap();
    let next = evolve_block(&b, 1, c.workload.drift);
    let n = b.tokens.len().min(300);
    let (mut pairs, mut stable) = (0, 0);
    for i in 0..n {
        for j in i + 1..n {
            let before = oracle_similarity(&b.tokens[i].embedding, &b.tokens[j].embedding);
            let after = oracle_similarity(&next.tokens[i].embedding, &next.tokens[j].embedding);
            pairs += 1;
            if (before - after).abs() < 0.2 {
                stable += 1;
            }
        }
    }
    assert!(stable as f64 >= 0.9 * pairs as f64, "{stable}/{pairs}");
}

#[test]
fn evolution_keeps_structure_and_resamples_gates() {
    let c = config(0.5, 29);
    let b = gen_batch(&c.model, &c.cluster, &c.workload).unwrap();
    let next = evolve_block(&b, 1, c.workload.drift);
    next.validate(&c.model, &c.cluster).unwrap();
    assert_eq!(next.sequences, b.sequences);
    assert_eq!(next, evolve_block(&b, 1, c.workload.drift));
    assert_ne!(next, evolve_block(&b, 2, c.workload.drift));
    assert!(b
        .tokens
        .iter()
        .zip(&next.tokens)
        .any(|(x, y)| x.gates != y.gates));
}

#[test]
fn iteration_seeds_differ_and_repeat() {
    let seeds: Vec<u64> = (0..100).map(|t| iteration_seed(7, t)).collect();
    let mut unique = seeds.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), 100);
    assert_eq!(seeds[3], iteration_seed(7, 3));
}
