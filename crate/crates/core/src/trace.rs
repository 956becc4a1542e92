//! JSON-lines batch traces.
//!
//! Line 1 is a header object carrying batch-level state; every following line
//! is one sequence with its tokens:
//!
//! ```text
//! {"format":"luffy-trace","version":1,"block_index":0,"loss_initial":1.0,"loss_prev":1.0,"seed":7}
//! {"seq_id":0,"home_device":0,"affinity":[...],"tokens":[{"token_id":0,"position":0,"gates":[[3,0.7],[1,0.3]],"embedding":[...]}]}
//! ```
//!
//! The header and `affinity` are optional on read. Floats are written in
//! shortest round-trip form, so save/load is lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchState, DeviceId, ExpertId, SeqId, SequenceRecord, TokenId, TokenRecord};

const FORMAT: &str = "luffy-trace";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    block_index: usize,
    loss_initial: f64,
    loss_prev: f64,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceLine {
    seq_id: SeqId,
    home_device: DeviceId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    affinity: Option<Vec<f64>>,
    tokens: Vec<TokenLine>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenLine {
    token_id: TokenId,
    position: usize,
    gates: Vec<(ExpertId, f64)>,
    embedding: Vec<f32>,
}

pub fn save_trace(batch: &BatchState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_trace(batch, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trace(batch: &BatchState, out: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        block_index: batch.block_index,
        loss_initial: batch.loss_initial,
        loss_prev: batch.loss_prev,
        seed: batch.seed,
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    let index = batch.token_index();
    for seq in &batch.sequences {
        let tokens = seq
            .token_ids
            .iter()
            .map(|id| {
                let t = &batch.tokens[index[id]];
                TokenLine {
                    token_id: t.token_id,
                    position: t.position,
                    gates: t.gates.clone(),
                    embedding: t.embedding.clone(),
                }
            })
            .collect();
        let line = SequenceLine {
            seq_id: seq.seq_id,
            home_device: seq.home_device,
            affinity: Some(seq.affinity.clone()),
            tokens,
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<BatchState> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(BufReader::new(file))
}

pub fn read_trace(reader: impl BufRead) -> Result<BatchState> {
    let mut header: Option<Header> = None;
    let mut lines: Vec<SequenceLine> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Trace {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let trace_err = |e: serde_json::Error| Error::Trace {
            line: line_no,
            message: e.to_string(),
        };
        if header.is_none() && lines.is_empty() && line.contains("\"format\"") {
            let h: Header = serde_json::from_str(&line).map_err(trace_err)?;
            if h.format != FORMAT || h.version != VERSION {
                return Err(Error::Trace {
                    line: line_no,
                    message: format!("unsupported trace format {} v{}", h.format, h.version),
                });
            }
            header = Some(h);
            continue;
        }
        let seq: SequenceLine = serde_json::from_str(&line).map_err(trace_err)?;
        if seq.tokens.is_empty() {
            return Err(Error::Trace {
                line: line_no,
                message: format!("sequence {} has no tokens", seq.seq_id),
            });
        }
        lines.push(seq);
    }
    if lines.is_empty() {
        return Err(Error::EmptyTrace);
    }

    let num_experts = lines
        .iter()
        .flat_map(|s| s.tokens.iter())
        .flat_map(|t| t.gates.iter().map(|g| g.0 + 1))
        .max()
        .unwrap_or(1);
    let mut sequences = Vec::with_capacity(lines.len());
    let mut tokens = Vec::new();
    for line in lines {
        let affinity = line
            .affinity
            .unwrap_or_else(|| gate_histogram(&line.tokens, num_experts));
        let token_ids = line.tokens.iter().map(|t| t.token_id).collect();
        tokens.extend(line.tokens.into_iter().map(|t| TokenRecord {
            token_id: t.token_id,
            seq_id: line.seq_id,
            position: t.position,
            embedding: t.embedding,
            gates: t.gates,
        }));
        sequences.push(SequenceRecord {
            seq_id: line.seq_id,
            home_device: line.home_device,
            token_ids,
            affinity,
        });
    }
    let h = header.unwrap_or(Header {
        format: FORMAT.to_string(),
        version: VERSION,
        block_index: 0,
        loss_initial: 1.0,
        loss_prev: 1.0,
        seed: 0,
    });
    Ok(BatchState {
        sequences,
        tokens,
        block_index: h.block_index,
        loss_initial: h.loss_initial,
        loss_prev: h.loss_prev,
        seed: h.seed,
    })
}

/// Fallback affinity for traces recorded without one: the sequence's share of
/// gate copies per expert.
fn gate_histogram(tokens: &[TokenLine], num_experts: usize) -> Vec<f64> {
    let mut counts = vec![0.0; num_experts];
    let mut total = 0.0;
    for t in tokens {
        for &(e, _) in &t.gates {
            counts[e] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}
