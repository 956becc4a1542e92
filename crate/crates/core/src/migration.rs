//! Sequence migration.
//!
//! For every sequence we price the combine traffic `f` of rebuilding it on
//! each device, keep the `q` cheapest devices as candidates, and then place
//! sequences longest-first on the candidate whose attention cost grows the
//! least, subject to per-device token capacity.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::condense::CopyLocation;
use crate::cost::{attention_time, TrafficMatrix};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{
    BatchState, ClusterConfig, CopyKey, DeviceId, ModelConfig, SeqId, SequenceRecord, TokenId,
    TokenRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MigrationObjective {
    /// Pick the candidate with the smallest attention cost growth.
    #[default]
    Min,
    /// Pick the largest growth instead.
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MigrationConfig {
    /// Candidate devices per sequence. 0 disables migration: every sequence
    /// is rebuilt where it already is.
    pub q: usize,
    pub migration_objective: MigrationObjective,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        Self {
            q: 2,
            migration_objective: MigrationObjective::Min,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceLoad {
    pub device_id: DeviceId,
    /// Sequences assigned so far.
    pub sequences: u64,
    /// Longest assigned sequence (the padded length).
    pub max_len: u64,
    pub resident_tokens: usize,
}

impl DeviceLoad {
    pub fn empty(device_id: DeviceId) -> Self {
        Self {
            device_id,
            sequences: 0,
            max_len: 0,
            resident_tokens: 0,
        }
    }

    pub fn add(&mut self, len: usize) {
        self.sequences += 1;
        self.max_len = self.max_len.max(len as u64);
        self.resident_tokens += len;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MigrationPlan {
    /// seq_id -> device where the sequence is rebuilt.
    pub assignment: BTreeMap<SeqId, DeviceId>,
    /// Predicted combine traffic, diagonal included.
    pub combine: TrafficMatrix,
    /// The `f` value of each chosen device.
    pub chosen_traffic: BTreeMap<SeqId, u64>,
    pub candidates: BTreeMap<SeqId, Vec<DeviceId>>,
    pub loads: Vec<DeviceLoad>,
}

/// `f` for every destination device: bytes of the sequence's expert outputs
/// that live elsewhere. Condensed copies are rebuilt locally and cost nothing.
pub fn traffic_row(
    seq: &SequenceRecord,
    tokens: &[TokenRecord],
    index: &HashMap<TokenId, usize>,
    locations: &HashMap<CopyKey, CopyLocation>,
    num_devices: usize,
    token_bytes: u64,
) -> Result<Vec<u64>> {
    let mut here = vec![0u64; num_devices];
    let mut located = 0u64;
    for id in &seq.token_ids {
        let token = &tokens[*index.get(id).ok_or_else(|| {
            Error::InvalidBatch(format!("sequence {} lists unknown token {id}", seq.seq_id))
        })?];
        for key in token.copies() {
            match locations.get(&key) {
                Some(CopyLocation::Located(d)) => {
                    *here.get_mut(*d).ok_or(Error::UnknownDevice(*d))? += 1;
                    located += 1;
                }
                Some(CopyLocation::Condensed) => {}
                None => return Err(Error::UnknownCopy(key.token, key.expert)),
            }
        }
    }
    Ok(here
        .into_iter()
        .map(|n| (located - n) * token_bytes)
        .collect())
}

/// Combine traffic of rebuilding `seq` on `dst`.
pub fn combine_traffic(
    seq: &SequenceRecord,
    dst: DeviceId,
    tokens: &[TokenRecord],
    index: &HashMap<TokenId, usize>,
    locations: &HashMap<CopyKey, CopyLocation>,
    num_devices: usize,
    token_bytes: u64,
) -> Result<u64> {
    if dst >= num_devices {
        return Err(Error::UnknownDevice(dst));
    }
    traffic_row(seq, tokens, index, locations, num_devices, token_bytes).map(|row| row[dst])
}

/// The `q` devices with the least traffic, sorted by `(f, device id)`.
pub fn candidate_set(traffic: &[u64], q: usize) -> Vec<DeviceId> {
    let mut devices: Vec<DeviceId> = (0..traffic.len()).collect();
    devices.sort_by_key(|&d| (traffic[d], d));
    devices.truncate(q.max(1));
    devices
}

/// Growth of the device's attention cost when a sequence of length `len`
/// joins it.
pub fn cost_growth(len: usize, load: &DeviceLoad, d: u64, speed: f64) -> f64 {
    let after = attention_time(load.sequences + 1, load.max_len.max(len as u64), d, speed);
    let before = attention_time(load.sequences, load.max_len, d, speed);
    after - before
}

#[derive(Debug, Clone)]
pub struct MigrationPlanner<'a> {
    pub model: &'a ModelConfig,
    pub cluster: &'a ClusterConfig,
    pub q: usize,
    pub objective: MigrationObjective,
    pub capacity: usize,
    pub exec: Exec,
}

impl<'a> MigrationPlanner<'a> {
    pub fn new(
        model: &'a ModelConfig,
        cluster: &'a ClusterConfig,
        q: usize,
        capacity: usize,
    ) -> Self {
        Self {
            model,
            cluster,
            q,
            objective: MigrationObjective::Min,
            capacity,
            exec: Exec::default(),
        }
    }

    pub fn plan(
        &self,
        batch: &BatchState,
        locations: &HashMap<CopyKey, CopyLocation>,
    ) -> Result<MigrationPlan> {
        let loads = (0..self.cluster.num_devices)
            .map(DeviceLoad::empty)
            .collect();
        self.plan_from(batch, locations, loads)
    }

    /// Plans on top of pre-existing device loads.
    pub fn plan_from(
        &self,
        batch: &BatchState,
        locations: &HashMap<CopyKey, CopyLocation>,
        mut loads: Vec<DeviceLoad>,
    ) -> Result<MigrationPlan> {
        let n = self.cluster.num_devices;
        let token_bytes = self.model.token_bytes();
        let index = batch.token_index();
        let rows = self
            .exec
            .map(&batch.sequences, |s| {
                traffic_row(s, &batch.tokens, &index, locations, n, token_bytes)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        let mut order: Vec<usize> = (0..batch.sequences.len()).collect();
        order.sort_by_key(|&i| {
            (
                std::cmp::Reverse(batch.sequences[i].len()),
                batch.sequences[i].seq_id,
            )
        });

        let d = self.model.d_model as u64;
        let speed = self.cluster.compute_speed;
        let mut plan = MigrationPlan {
            assignment: BTreeMap::new(),
            combine: TrafficMatrix::new(n),
            chosen_traffic: BTreeMap::new(),
            candidates: BTreeMap::new(),
            loads: Vec::new(),
        };
        let mut unplaced = Vec::new();
        for i in order {
            let seq = &batch.sequences[i];
            let f = &rows[i];
            let len = seq.len();
            let fits = |dev: &DeviceId| loads[*dev].resident_tokens + len <= self.capacity;
            let scored = |dev: DeviceId| (cost_growth(len, &loads[dev], d, speed), f[dev], dev);

            let candidates = candidate_set(f, self.q);
            let chosen = self
                .pick(candidates.iter().copied().filter(fits).map(scored))
                .or_else(|| self.pick((0..n).filter(fits).map(scored)));
            plan.candidates.insert(seq.seq_id, candidates);
            let Some(dst) = chosen else {
                unplaced.push((seq.seq_id, len));
                continue;
            };
            loads[dst].add(len);
            plan.assignment.insert(seq.seq_id, dst);
            plan.chosen_traffic.insert(seq.seq_id, f[dst]);
        }
        if !unplaced.is_empty() {
            return Err(Error::Planning {
                unplaced,
                capacity: self.capacity,
            });
        }

        for seq in &batch.sequences {
            let dst = plan.assignment[&seq.seq_id];
            for id in &seq.token_ids {
                for key in batch.tokens[index[id]].copies() {
                    if let Some(CopyLocation::Located(src)) = locations.get(&key) {
                        plan.combine.add(*src, dst, token_bytes);
                    }
                }
            }
        }
        plan.loads = loads;
        Ok(plan)
    }

    /// Best `(growth, f, device)` under the objective; ties go to smaller `f`,
    /// then the lower device id.
    fn pick(&self, options: impl Iterator<Item = (f64, u64, DeviceId)>) -> Option<DeviceId> {
        let objective = self.objective;
        options
            .min_by(|a, b| {
                let by_growth = match objective {
                    MigrationObjective::Min => a.0.total_cmp(&b.0),
                    MigrationObjective::Max => b.0.total_cmp(&a.0),
                };
                by_growth.then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
            })
            .map(|(_, _, dev)| dev)
    }
}

/// Plans with the minimum-growth objective and the cluster's capacity.
pub fn plan_migration(
    batch: &BatchState,
    locations: &HashMap<CopyKey, CopyLocation>,
    q: usize,
    cluster: &ClusterConfig,
    model: &ModelConfig,
) -> Result<MigrationPlan> {
    let capacity = cluster.capacity_for(batch.total_tokens());
    MigrationPlanner::new(model, cluster, q, capacity).plan(batch, locations)
}
