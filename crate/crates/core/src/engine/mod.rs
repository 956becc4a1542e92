//! Per-iteration simulation of one MoE training step.
//!
//! Every block runs attention where sequences currently live, dispatches
//! token copies to experts (EXT/HYT may first ship experts to the tokens,
//! Luffy variants may condense copies), runs the experts, and combines the
//! outputs back into sequences (Luffy variants may rebuild a sequence on a
//! different device). The batch then evolves into the next block.

mod loss;
mod transfer;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use loss::LossModel;
pub use transfer::{strategy_ext, strategy_hyt, TransferDecision};

use crate::condense::{
    apply_condensation, condense_block, CondensationMap, CopyLocation, DispatchCopy, GroupKey,
    HistoryStore,
};
use crate::config::SimConfig;
use crate::cost::{
    all_to_all_time, attention_time, expert_time, expert_transfer_bytes, TrafficMatrix,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::migration::MigrationPlanner;
use crate::model::{BatchState, CopyKey, DeviceId, SeqId, TokenId};
use crate::workload::{evolve_block, gen_batch, iteration_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Vanilla,
    Ext,
    Hyt,
    Luffy,
    LuffyMigrate,
    LuffyCondense,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Vanilla,
        Strategy::Ext,
        Strategy::Hyt,
        Strategy::Luffy,
        Strategy::LuffyMigrate,
        Strategy::LuffyCondense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Ext => "ext",
            Strategy::Hyt => "hyt",
            Strategy::Luffy => "luffy",
            Strategy::LuffyMigrate => "luffy-migrate",
            Strategy::LuffyCondense => "luffy-condense",
        }
    }

    pub fn migrates(self) -> bool {
        matches!(self, Strategy::Luffy | Strategy::LuffyMigrate)
    }

    pub fn condenses(self) -> bool {
        matches!(self, Strategy::Luffy | Strategy::LuffyCondense)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

/// Controller bookkeeping: which sequence each token belongs to, where each
/// copy's expert output lives, and where each sequence is rebuilt.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocationTables {
    pub token_to_sequence: HashMap<TokenId, SeqId>,
    pub token_to_device: HashMap<CopyKey, CopyLocation>,
    pub sequence_to_device: HashMap<SeqId, DeviceId>,
}

impl LocationTables {
    pub fn new(batch: &BatchState) -> Self {
        Self {
            token_to_sequence: batch
                .tokens
                .iter()
                .map(|t| (t.token_id, t.seq_id))
                .collect(),
            token_to_device: HashMap::new(),
            sequence_to_device: batch
                .sequences
                .iter()
                .map(|s| (s.seq_id, s.home_device))
                .collect(),
        }
    }

    pub fn device_of(&self, token: TokenId) -> Option<DeviceId> {
        self.token_to_sequence
            .get(&token)
            .and_then(|s| self.sequence_to_device.get(s))
            .copied()
    }

    /// Cross-checks the three tables against each other and the batch.
    pub fn check(&self, batch: &BatchState, num_devices: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidBatch(m));
        for t in &batch.tokens {
            if self.token_to_sequence.get(&t.token_id) != Some(&t.seq_id) {
                return bad(format!("token {} not mapped to its sequence", t.token_id));
            }
        }
        for s in &batch.sequences {
            match self.sequence_to_device.get(&s.seq_id) {
                Some(&d) if d < num_devices => {}
                _ => return bad(format!("sequence {} has no device", s.seq_id)),
            }
        }
        for (key, loc) in &self.token_to_device {
            if !self.token_to_sequence.contains_key(&key.token) {
                return bad(format!("copy of unknown token {}", key.token));
            }
            if let CopyLocation::Located(d) = loc {
                if *d >= num_devices {
                    return bad(format!("copy of token {} on missing device", key.token));
                }
            }
        }
        Ok(())
    }
}

/// Per-block costs. In an iteration's totals every field is the sum over
/// blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub attention_ms: f64,
    pub expert_ms: f64,
    pub dispatch_bytes: u64,
    pub combine_bytes: u64,
    pub expert_transfer_bytes: u64,
    pub comm_ms: f64,
    pub condensed_copies: u64,
    pub migrated_sequences: u64,
    pub cosine_evals: u64,
    /// Copies produced by the gate.
    pub gate_copies: u64,
    /// Copies sent to (or kept for) an expert, local ones included.
    pub dispatched_copies: u64,
    /// Expert outputs pulled back into sequences, local ones included.
    pub combined_copies: u64,
}

impl BlockReport {
    pub fn computation_ms(&self) -> f64 {
        self.attention_ms + self.expert_ms
    }

    pub fn total_bytes(&self) -> u64 {
        self.dispatch_bytes + self.combine_bytes + self.expert_transfer_bytes
    }

    fn accumulate(&mut self, b: &BlockReport) {
        self.attention_ms += b.attention_ms;
        self.expert_ms += b.expert_ms;
        self.dispatch_bytes += b.dispatch_bytes;
        self.combine_bytes += b.combine_bytes;
        self.expert_transfer_bytes += b.expert_transfer_bytes;
        self.comm_ms += b.comm_ms;
        self.condensed_copies += b.condensed_copies;
        self.migrated_sequences += b.migrated_sequences;
        self.cosine_evals += b.cosine_evals;
        self.gate_copies += b.gate_copies;
        self.dispatched_copies += b.dispatched_copies;
        self.combined_copies += b.combined_copies;
    }

    pub fn sum<'a>(blocks: impl IntoIterator<Item = &'a BlockReport>) -> BlockReport {
        let mut t = BlockReport::default();
        for b in blocks {
            t.accumulate(b);
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub strategy: Strategy,
    /// Seed of the batch this iteration ran on.
    pub seed: u64,
    /// Condensation threshold in effect, if any.
    pub threshold: Option<f64>,
    pub blocks: Vec<BlockReport>,
    pub totals: BlockReport,
}

impl IterationReport {
    pub fn iteration_ms(&self) -> f64 {
        self.totals.computation_ms() + self.totals.comm_ms
    }
}

pub fn simulate_iteration(
    batch: &BatchState,
    strategy: Strategy,
    config: &SimConfig,
    iteration: usize,
) -> Result<IterationReport> {
    Simulator::new(config, Exec::default())?.iteration(batch, strategy, iteration)
}

/// A validated config plus everything derived from it.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    config: &'a SimConfig,
    placement: Vec<DeviceId>,
    exec: Exec,
}

impl<'a> Simulator<'a> {
    pub fn new(config: &'a SimConfig, exec: Exec) -> Result<Self> {
        config.ensure_valid()?;
        Ok(Self {
            placement: config.cluster.placement(config.model.experts_per_layer),
            config,
            exec,
        })
    }

    pub fn config(&self) -> &SimConfig {
        self.config
    }

    /// Runs all blocks of one iteration on `batch`, which holds the state
    /// entering the first block (including the losses feeding the threshold).
    pub fn iteration(
        &self,
        batch: &BatchState,
        strategy: Strategy,
        iteration: usize,
    ) -> Result<IterationReport> {
        let cfg = self.config;
        batch.validate(&cfg.model, &cfg.cluster)?;
        let threshold = if strategy.condenses() {
            cfg.condense
                .threshold(batch.loss_initial, batch.loss_prev)?
        } else {
            None
        };
        let capacity = cfg.cluster.capacity_for(batch.total_tokens());
        let mut planner =
            MigrationPlanner::new(&cfg.model, &cfg.cluster, cfg.migration.q, capacity);
        planner.objective = cfg.migration.migration_objective;
        planner.exec = self.exec;

        let mut tables = LocationTables::new(batch);
        let mut history = HistoryStore::with_band(
            cfg.condense.history_max_age,
            cfg.condense.s1,
            cfg.condense.s2,
        );
        let mut state = batch.clone();
        let mut blocks = Vec::with_capacity(cfg.model.num_blocks);
        for b in 0..cfg.model.num_blocks {
            if b > 0 {
                state = evolve_block(&state, batch.block_index + b, cfg.workload.drift);
            }
            let report = self.block(
                &state,
                strategy,
                threshold,
                &planner,
                &mut tables,
                &mut history,
                b,
            )?;
            debug_assert!(tables.check(&state, cfg.cluster.num_devices).is_ok());
            blocks.push(report);
        }
        Ok(IterationReport {
            iteration,
            strategy,
            seed: batch.seed,
            threshold,
            totals: BlockReport::sum(&blocks),
            blocks,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        state: &BatchState,
        strategy: Strategy,
        threshold: Option<f64>,
        planner: &MigrationPlanner<'_>,
        tables: &mut LocationTables,
        history: &mut HistoryStore,
        block: usize,
    ) -> Result<BlockReport> {
        let cfg = self.config;
        let model = &cfg.model;
        let cluster = &cfg.cluster;
        let n = cluster.num_devices;
        let experts = model.experts_per_layer;
        let token_bytes = model.token_bytes();
        let speed = cluster.compute_speed;
        let mut report = BlockReport::default();

        // attention where sequences currently live, padded to the longest
        let mut resident = vec![(0u64, 0u64); n];
        for s in &state.sequences {
            let r = &mut resident[tables.sequence_to_device[&s.seq_id]];
            r.0 += 1;
            r.1 = r.1.max(s.len() as u64);
        }
        report.attention_ms = resident
            .iter()
            .map(|&(b, l)| attention_time(b, l, model.d_model as u64, speed))
            .fold(0.0, f64::max)
            * model.train_multiplier;

        // gate demand per (source device, expert)
        let mut demand = vec![vec![0u64; experts]; n];
        for t in &state.tokens {
            let src = tables
                .device_of(t.token_id)
                .expect("token tables cover the batch");
            for &(e, _) in &t.gates {
                demand[src][e] += 1;
            }
        }
        report.gate_copies = demand.iter().flatten().sum();

        let expert_bytes = expert_transfer_bytes(model);
        let transfers = match strategy {
            Strategy::Ext => strategy_ext(&demand, &self.placement, token_bytes, expert_bytes),
            Strategy::Hyt => strategy_hyt(
                &demand,
                &self.placement,
                token_bytes,
                expert_bytes,
                cfg.baselines.hyt_top_m,
            ),
            _ => TransferDecision::none(n),
        };
        report.expert_transfer_bytes = transfers.bytes();

        let mut copies = Vec::with_capacity(report.gate_copies as usize);
        for t in &state.tokens {
            let src = tables
                .device_of(t.token_id)
                .expect("token tables cover the batch");
            for &(e, w) in &t.gates {
                let target = if transfers.has_replica(src, e) {
                    src
                } else {
                    self.placement[e]
                };
                copies.push(DispatchCopy::new(
                    CopyKey::new(t.token_id, e),
                    src,
                    target,
                    w,
                ));
            }
        }

        let maps = match threshold {
            Some(h) => {
                let index = state.token_index();
                let mut groups: BTreeMap<GroupKey, Vec<(TokenId, &[f32])>> = BTreeMap::new();
                for c in &copies {
                    let emb = state.tokens[index[&c.key.token]].embedding.as_slice();
                    groups
                        .entry(c.group())
                        .or_default()
                        .push((c.key.token, emb));
                }
                let groups: Vec<_> = groups.into_iter().collect();
                let out = condense_block(&groups, history, block, &cfg.condense, h, self.exec)?;
                report.cosine_evals = out.cosine_evals as u64;
                out.maps
            }
            None => Vec::<CondensationMap>::new(),
        };
        let outcome = apply_condensation(&copies, &maps, n, experts, token_bytes);
        report.condensed_copies = outcome.condensed_copies as u64;
        report.dispatched_copies = outcome.dispatched_copies as u64;
        report.dispatch_bytes = outcome.dispatch.off_diagonal_total();

        // experts sharing a device slow each other down
        let contention = cfg.cost.contention();
        report.expert_ms = outcome
            .expert_tokens
            .iter()
            .map(|row| {
                let active = row.iter().filter(|&&c| c > 0).count();
                row.iter()
                    .map(|&c| expert_time(c, model, speed, active, contention))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
            * model.train_multiplier;

        // combine
        let destinations: HashMap<SeqId, DeviceId> = if strategy.migrates() && cfg.migration.q > 0 {
            let started = Instant::now();
            let plan = planner.plan(state, &outcome.locations)?;
            log::debug!(
                "block {block}: migration planned in {:.3} ms wall-clock",
                started.elapsed().as_secs_f64() * 1e3
            );
            plan.assignment.into_iter().collect()
        } else {
            tables.sequence_to_device.clone()
        };
        let mut combine = TrafficMatrix::new(n);
        for t in &state.tokens {
            let dst = destinations[&t.seq_id];
            for key in t.copies() {
                if let Some(CopyLocation::Located(src)) = outcome.locations.get(&key) {
                    combine.add(*src, dst, token_bytes);
                    report.combined_copies += 1;
                }
            }
        }
        report.combine_bytes = combine.off_diagonal_total();
        report.migrated_sequences = destinations
            .iter()
            .filter(|(s, d)| tables.sequence_to_device[s] != **d)
            .count() as u64;

        let latency = cfg.cost.latency_ms;
        report.comm_ms = all_to_all_time(&transfers.traffic, cluster, latency)
            + all_to_all_time(&outcome.dispatch, cluster, latency)
            + all_to_all_time(&combine, cluster, latency);

        tables.token_to_device = outcome.locations;
        tables.sequence_to_device = destinations;
        Ok(report)
    }
}

/// Where each iteration's batch comes from.
#[derive(Debug, Clone)]
pub enum BatchSource {
    /// Fresh batch per iteration, seeded `workload.seed ^ splitmix64(t)`.
    Generated,
    /// The same recorded batch every iteration.
    Trace(BatchState),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub mean_attention_ms: f64,
    pub mean_expert_ms: f64,
    pub mean_computation_ms: f64,
    pub mean_communication_ms: f64,
    pub mean_iteration_ms: f64,
    pub total_bytes: u64,
    pub thresholds: Vec<Option<f64>>,
}

impl RunSummary {
    pub fn from_reports(strategy: Strategy, reports: &[IterationReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: &dyn Fn(&IterationReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            strategy,
            iterations: reports.len(),
            seeds: reports.iter().map(|r| r.seed).collect(),
            mean_attention_ms: mean(&|r| r.totals.attention_ms),
            mean_expert_ms: mean(&|r| r.totals.expert_ms),
            mean_computation_ms: mean(&|r| r.totals.computation_ms()),
            mean_communication_ms: mean(&|r| r.totals.comm_ms),
            mean_iteration_ms: mean(&|r| r.iteration_ms()),
            total_bytes: reports.iter().map(|r| r.totals.total_bytes()).sum(),
            thresholds: reports.iter().map(|r| r.threshold).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub reports: Vec<IterationReport>,
    pub summary: RunSummary,
}

/// Runs `iterations` training iterations of one strategy.
pub fn run(
    config: &SimConfig,
    strategy: Strategy,
    iterations: usize,
    source: &BatchSource,
    exec: Exec,
) -> Result<RunOutput> {
    if iterations == 0 {
        return Err(Error::InvalidConfig(vec![
            "iterations must be at least 1".into()
        ]));
    }
    let sim = Simulator::new(config, exec)?;
    let mut reports = Vec::with_capacity(iterations);
    for t in 0..iterations {
        let mut batch = source.batch(config, t)?;
        batch.loss_initial = config.loss.l_ini;
        batch.loss_prev = config.loss.loss_before(t);
        reports.push(sim.iteration(&batch, strategy, t)?);
    }
    let summary = RunSummary::from_reports(strategy, &reports);
    Ok(RunOutput { reports, summary })
}

impl BatchSource {
    /// The batch iteration `t` runs on, before losses are filled in.
    pub fn batch(&self, config: &SimConfig, t: usize) -> Result<BatchState> {
        match self {
            BatchSource::Generated => {
                let mut spec = config.workload.clone();
                spec.seed = iteration_seed(config.workload.seed, t as u64);
                gen_batch(&config.model, &config.cluster, &spec)
            }
            BatchSource::Trace(b) => Ok(b.clone()),
        }
    }
}

/// Runs each strategy on the same batches. Strategies run concurrently under
/// [`Exec::Parallel`]; output order follows `strategies`.
pub fn compare(
    config: &SimConfig,
    strategies: &[Strategy],
    iterations: usize,
    source: &BatchSource,
    exec: Exec,
) -> Result<Vec<RunOutput>> {
    exec.map(strategies, |&s| run(config, s, iterations, source, exec))
        .into_iter()
        .collect()
}
