//! Token condensation.
//!
//! Token copies are grouped by `(source device, destination expert)`. Inside
//! a group every pair gets an edge weight: pairs that were clearly similar
//! (`> S1`) or clearly dissimilar (`< S2`) in a recent block reuse that
//! verdict as 1 or 0, everything else gets a real normalized cosine. Pairs
//! in different groups are never materialized. Edges below the threshold are
//! dropped, and the highest-degree node of what remains absorbs its
//! neighbors, repeatedly, until every node is a representative or condensed.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::cost::TrafficMatrix;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{CopyKey, DeviceId, ExpertId, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CondenseConfig {
    /// History above this is treated as similar (weight 1).
    #[serde(rename = "S1")]
    pub s1: f64,
    /// History below this is treated as dissimilar (weight 0).
    #[serde(rename = "S2")]
    pub s2: f64,
    pub history_max_age: usize,
    pub threshold_mode: ThresholdMode,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        Self {
            s1: 0.8,
            s2: 0.2,
            history_max_age: 2,
            threshold_mode: ThresholdMode::Adaptive,
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0 <= self.s2 && self.s2 < self.s1 && self.s1 <= 1.0) {
            v.push(format!(
                "condense thresholds need 0 <= S2 < S1 <= 1, got S1={} S2={}",
                self.s1, self.s2
            ));
        }
        if let ThresholdMode::Fixed(h) = self.threshold_mode {
            if !(0.0..=1.0).contains(&h) {
                v.push(format!("fixed threshold must lie in [0, 1], got {h}"));
            }
        }
        v
    }

    /// Condensation threshold for an iteration, or `None` when disabled.
    pub fn threshold(&self, loss_initial: f64, loss_prev: f64) -> Result<Option<f64>> {
        match self.threshold_mode {
            ThresholdMode::Adaptive => adaptive_threshold(loss_initial, loss_prev).map(Some),
            ThresholdMode::Fixed(h) => Ok(Some(h)),
            ThresholdMode::Off => Ok(None),
        }
    }
}

/// `adaptive`, `fixed:<h>` or `off`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ThresholdMode {
    Adaptive,
    Fixed(f64),
    Off,
}

impl FromStr for ThresholdMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "off" => Ok(Self::Off),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|h| h.parse::<f64>().ok())
                .map(Self::Fixed)
                .ok_or_else(|| format!("bad threshold_mode `{s}` (adaptive | fixed:<h> | off)")),
        }
    }
}

impl TryFrom<String> for ThresholdMode {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ThresholdMode> for String {
    fn from(m: ThresholdMode) -> String {
        m.to_string()
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Adaptive => f.write_str("adaptive"),
            Self::Fixed(h) => write!(f, "fixed:{h}"),
            Self::Off => f.write_str("off"),
        }
    }
}

/// `(1 + cos(u, v)) / 2`, computed in f64.
pub fn normalized_cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(rescale(dot / (nu * nv).sqrt()))
}

fn rescale(cos: f64) -> f64 {
    (1.0 + cos.clamp(-1.0, 1.0)) / 2.0
}

/// Condensation threshold from the loss trajectory:
/// `h = 1 / (1 + exp(l_norm))`, `l_norm = (l_ini - l_prev) / l_ini`.
/// A loss above `l_ini` clamps `l_norm` to 0.
pub fn adaptive_threshold(loss_initial: f64, loss_prev: f64) -> Result<f64> {
    if !(loss_initial > 0.0) {
        return Err(Error::NonPositiveLoss(loss_initial));
    }
    let prev = loss_prev.clamp(0.0, loss_initial);
    let l_norm = (loss_initial - prev) / loss_initial;
    Ok(1.0 / (1.0 + l_norm.exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub source_device: DeviceId,
    pub expert: ExpertId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    HistoryOne,
    HistoryZero,
    Computed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub weight: f64,
    pub provenance: Provenance,
    /// Block whose real cosine this weight descends from.
    pub origin_block: usize,
}

/// Complete weighted graph over one group, stored as a packed upper triangle.
#[derive(Debug, Clone)]
pub struct SimilarityGraph {
    pub key: GroupKey,
    pub block: usize,
    nodes: Vec<TokenId>,
    edges: Vec<Edge>,
    cosine_evals: usize,
}

impl SimilarityGraph {
    pub fn nodes(&self) -> &[TokenId] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn cosine_evals(&self) -> usize {
        self.cosine_evals
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edge between node indices `i != j`.
    pub fn edge(&self, i: usize, j: usize) -> Edge {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        assert!(i != j, "no self-edges");
        self.edges[pair_index(self.nodes.len(), i, j)]
    }

    /// All `(i, j, edge)` with `i < j`, in index order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, Edge)> + '_ {
        let n = self.nodes.len();
        (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j, self.edge(i, j))))
    }

    /// Edge between two tokens of this group, if both are nodes.
    pub fn edge_between(&self, a: TokenId, b: TokenId) -> Option<Edge> {
        let i = self.nodes.iter().position(|&t| t == a)?;
        let j = self.nodes.iter().position(|&t| t == b)?;
        (i != j).then(|| self.edge(i, j))
    }
}

fn pair_index(n: usize, i: usize, j: usize) -> usize {
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

fn pair_key(a: TokenId, b: TokenId) -> (TokenId, TokenId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub value: f64,
    pub origin_block: usize,
}

/// Pair similarities carried from earlier blocks of the same iteration.
///
/// Entries age from the block their value was last really computed, so a
/// shortcut keeps being reused for at most `max_age` blocks.
///
/// With a band set, values inside `[low, high]` are not kept: they could only
/// ever send the pair back to a fresh cosine, which is what a missing entry
/// does too. This keeps the store proportional to the decisive pairs.
#[derive(Debug, Clone, Default)]
pub struct HistoryStore {
    pub max_age: usize,
    band: Option<(f64, f64)>,
    entries: FxHashMap<(TokenId, TokenId), HistoryEntry>,
}

impl HistoryStore {
    pub fn new(max_age: usize) -> Self {
        Self {
            max_age,
            band: None,
            entries: FxHashMap::default(),
        }
    }

    /// Store that drops values in `[s2, s1]`.
    pub fn with_band(max_age: usize, s1: f64, s2: f64) -> Self {
        Self {
            band: Some((s2, s1)),
            ..Self::new(max_age)
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn insert(&mut self, a: TokenId, b: TokenId, value: f64, origin_block: usize) {
        let value = value.clamp(0.0, 1.0);
        let key = pair_key(a, b);
        if matches!(self.band, Some((low, high)) if low <= value && value <= high) {
            self.entries.remove(&key);
            return;
        }
        self.entries.insert(
            key,
            HistoryEntry {
                value,
                origin_block,
            },
        );
    }

    /// Entry usable at `block`: written earlier and not older than `max_age`.
    pub fn lookup(&self, a: TokenId, b: TokenId, block: usize) -> Option<HistoryEntry> {
        self.entries
            .get(&pair_key(a, b))
            .copied()
            .filter(|e| e.origin_block < block && block - e.origin_block <= self.max_age)
    }

    /// Drops every entry that can no longer be used at `block`.
    pub fn evict_before(&mut self, block: usize) {
        let max_age = self.max_age;
        self.entries
            .retain(|_, e| block.saturating_sub(e.origin_block) <= max_age);
    }
}

/// Builds the similarity graph for one group. `tokens` pairs each token id
/// with the embedding it is dispatched with.
pub fn fast_measure(
    key: GroupKey,
    tokens: &[(TokenId, &[f32])],
    history: &HistoryStore,
    block: usize,
    s1: f64,
    s2: f64,
) -> Result<SimilarityGraph> {
    let n = tokens.len();
    let norms = tokens
        .iter()
        .map(|(_, e)| {
            let sq: f64 = e.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
            if sq == 0.0 {
                Err(Error::ZeroNorm)
            } else {
                Ok(sq)
            }
        })
        .collect::<Result<Vec<f64>>>()?;

    let use_history = !history.is_empty();
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    let mut cosine_evals = 0;
    for i in 0..n {
        let (a, u) = tokens[i];
        for j in i + 1..n {
            let (b, v) = tokens[j];
            let shortcut = use_history
                .then(|| history.lookup(a, b, block))
                .flatten()
                .and_then(|h| {
                    if h.value > s1 {
                        Some((1.0, Provenance::HistoryOne, h.origin_block))
                    } else if h.value < s2 {
                        Some((0.0, Provenance::HistoryZero, h.origin_block))
                    } else {
                        None
                    }
                });
            let edge = match shortcut {
                Some((weight, provenance, origin_block)) => Edge {
                    weight,
                    provenance,
                    origin_block,
                },
                None => {
                    cosine_evals += 1;
                    let dot: f64 = u
                        .iter()
                        .zip(v)
                        .map(|(&x, &y)| f64::from(x) * f64::from(y))
                        .sum();
                    Edge {
                        weight: rescale(dot / (norms[i] * norms[j]).sqrt()),
                        provenance: Provenance::Computed,
                        origin_block: block,
                    }
                }
            };
            edges.push(edge);
        }
    }
    Ok(SimilarityGraph {
        key,
        block,
        nodes: tokens.iter().map(|t| t.0).collect(),
        edges,
        cosine_evals,
    })
}

/// token -> representative token inside one group. Representatives map to
/// themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CondensationMap {
    pub key: GroupKey,
    rep_of: BTreeMap<TokenId, TokenId>,
}

impl CondensationMap {
    pub fn identity(key: GroupKey, nodes: &[TokenId]) -> Self {
        Self {
            key,
            rep_of: nodes.iter().map(|&t| (t, t)).collect(),
        }
    }

    pub fn representative(&self, token: TokenId) -> Option<TokenId> {
        self.rep_of.get(&token).copied()
    }

    pub fn len(&self) -> usize {
        self.rep_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rep_of.is_empty()
    }

    pub fn representative_count(&self) -> usize {
        self.rep_of.iter().filter(|(t, r)| t == r).count()
    }

    pub fn condensed_count(&self) -> usize {
        self.len() - self.representative_count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, TokenId)> + '_ {
        self.rep_of.iter().map(|(&t, &r)| (t, r))
    }
}

/// Greedy representative selection: drop edges below `threshold`, then
/// repeatedly take the remaining node of highest degree (lowest token id on
/// ties) and fold its remaining neighbors into it.
pub fn condense_group(graph: &SimilarityGraph, threshold: f64) -> CondensationMap {
    let n = graph.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, e) in graph.edges() {
        if e.weight >= threshold {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    let mut degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut alive = vec![true; n];
    let mut remaining = n;
    let mut rep_of = BTreeMap::new();
    let nodes = graph.nodes();

    while remaining > 0 {
        let best = (0..n)
            .filter(|&i| alive[i])
            .max_by(|&a, &b| degree[a].cmp(&degree[b]).then(nodes[b].cmp(&nodes[a])))
            .expect("remaining > 0");
        if degree[best] == 0 {
            for i in (0..n).filter(|&i| alive[i]) {
                rep_of.insert(nodes[i], nodes[i]);
            }
            break;
        }
        let absorbed: Vec<usize> = adj[best].iter().copied().filter(|&j| alive[j]).collect();
        rep_of.insert(nodes[best], nodes[best]);
        alive[best] = false;
        for &j in &absorbed {
            rep_of.insert(nodes[j], nodes[best]);
            alive[j] = false;
        }
        remaining -= 1 + absorbed.len();
        for &gone in std::iter::once(&best).chain(&absorbed) {
            for &k in &adj[gone] {
                if alive[k] {
                    degree[k] -= 1;
                }
            }
        }
    }
    CondensationMap {
        key: graph.key,
        rep_of,
    }
}

/// Writes every finalized edge of `graphs` into the store for later blocks.
/// Shortcut edges keep the origin of the value they reused.
pub fn update_history(graphs: &[SimilarityGraph], store: &mut HistoryStore, block: usize) {
    store.evict_before(block + 1);
    for g in graphs {
        for (i, j, e) in g.edges() {
            store.insert(g.nodes[i], g.nodes[j], e.weight, e.origin_block);
        }
    }
}

/// One token copy on its way from the sequence's device to the device that
/// runs its expert (possibly a local replica).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispatchCopy {
    pub key: CopyKey,
    pub source: DeviceId,
    pub target: DeviceId,
    pub gate_weight: f64,
}

impl DispatchCopy {
    pub fn new(key: CopyKey, source: DeviceId, target: DeviceId, gate_weight: f64) -> Self {
        Self {
            key,
            source,
            target,
            gate_weight,
        }
    }

    pub fn group(&self) -> GroupKey {
        GroupKey {
            source_device: self.source,
            expert: self.key.expert,
        }
    }
}

/// Where a copy's expert output lives after the expert phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyLocation {
    Located(DeviceId),
    /// Rebuilt from the representative's output; never transmitted.
    Condensed,
}

/// A condensed copy's output: the representative's output scaled by the
/// condensed token's own gate weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reuse {
    pub copy: CopyKey,
    pub representative: CopyKey,
    pub gate_weight: f64,
}

#[derive(Debug, Clone)]
pub struct DispatchOutcome {
    pub dispatch: TrafficMatrix,
    /// `expert_tokens[device][expert]`: copies each expert processes where.
    pub expert_tokens: Vec<Vec<u64>>,
    pub locations: HashMap<CopyKey, CopyLocation>,
    pub reused: Vec<Reuse>,
    pub dispatched_copies: usize,
    pub condensed_copies: usize,
}

/// Drops condensed copies from the dispatch: they are neither sent nor
/// computed. Copies without a map entry are dispatched as usual.
pub fn apply_condensation(
    copies: &[DispatchCopy],
    maps: &[CondensationMap],
    num_devices: usize,
    num_experts: usize,
    token_bytes: u64,
) -> DispatchOutcome {
    let by_group: HashMap<GroupKey, &CondensationMap> = maps.iter().map(|m| (m.key, m)).collect();
    let mut out = DispatchOutcome {
        dispatch: TrafficMatrix::new(num_devices),
        expert_tokens: vec![vec![0; num_experts]; num_devices],
        locations: HashMap::with_capacity(copies.len()),
        reused: Vec::new(),
        dispatched_copies: 0,
        condensed_copies: 0,
    };
    for c in copies {
        let rep = by_group
            .get(&c.group())
            .and_then(|m| m.representative(c.key.token))
            .unwrap_or(c.key.token);
        if rep != c.key.token {
            out.condensed_copies += 1;
            out.locations.insert(c.key, CopyLocation::Condensed);
            out.reused.push(Reuse {
                copy: c.key,
                representative: CopyKey::new(rep, c.key.expert),
                gate_weight: c.gate_weight,
            });
        } else {
            out.dispatched_copies += 1;
            out.dispatch.add(c.source, c.target, token_bytes);
            out.expert_tokens[c.target][c.key.expert] += 1;
            out.locations.insert(c.key, CopyLocation::Located(c.target));
        }
    }
    out
}

/// One group's tokens and the embeddings they carry.
pub type GroupTokens<'a> = (GroupKey, Vec<(TokenId, &'a [f32])>);

/// Result of measuring and condensing every group of one block.
#[derive(Debug, Clone, Default)]
pub struct BlockCondensation {
    pub maps: Vec<CondensationMap>,
    pub cosine_evals: usize,
}

/// Measures and condenses all groups (in parallel under [`Exec::Parallel`]),
/// then merges the finalized edges into `history` on a single writer.
pub fn condense_block(
    groups: &[GroupTokens<'_>],
    history: &mut HistoryStore,
    block: usize,
    config: &CondenseConfig,
    threshold: f64,
    exec: Exec,
) -> Result<BlockCondensation> {
    let store: &HistoryStore = history;
    let measured = exec.map(groups, |(key, tokens)| {
        fast_measure(*key, tokens, store, block, config.s1, config.s2).map(|g| {
            let map = condense_group(&g, threshold);
            (g, map)
        })
    });
    let mut graphs = Vec::with_capacity(measured.len());
    let mut out = BlockCondensation::default();
    for r in measured {
        let (g, map) = r?;
        out.cosine_evals += g.cosine_evals();
        out.maps.push(map);
        graphs.push(g);
    }
    update_history(&graphs, history, block);
    Ok(out)
}
