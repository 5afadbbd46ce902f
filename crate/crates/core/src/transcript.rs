//! One-line-per-game JSON transcripts.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{Channel, ItemPool, Message, Proposal, Role, Utilities};
use crate::error::{Error, Result};
use crate::trainer::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptTurn {
    pub agent: Role,
    pub terminate: bool,
    pub message: Message,
    pub proposal: Proposal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptRecord {
    pub seed: u64,
    pub pool: ItemPool,
    pub util_a: Utilities,
    pub util_b: Utilities,
    pub n_limit: u32,
    pub channel: Channel,
    pub turns: Vec<TranscriptTurn>,
    pub raw_rewards: [u32; 2],
    pub scaled_scores: [f64; 2],
}

impl TranscriptRecord {
    pub fn from_trajectory(seed: u64, t: &Trajectory) -> Self {
        TranscriptRecord {
            seed,
            pool: t.pool,
            util_a: t.utilities[0],
            util_b: t.utilities[1],
            n_limit: t.turn_limit,
            channel: t.channel,
            turns: t
                .turns
                .iter()
                .map(|r| TranscriptTurn {
                    agent: r.role,
                    terminate: r.action.terminate,
                    message: r.action.message,
                    proposal: r.action.proposal,
                })
                .collect(),
            raw_rewards: t.raw_rewards,
            scaled_scores: t.scaled_scores,
        }
    }

    /// The proposal accepted by the final turn, if the game ended in
    /// agreement. The proposal may still be invalid for the pool.
    pub fn accepted_proposal(&self) -> Option<Proposal> {
        match self.turns.as_slice() {
            [.., prev, last] if last.terminate => Some(prev.proposal),
            _ => None,
        }
    }

    pub fn is_agreement(&self) -> bool {
        self.turns.last().is_some_and(|t| t.terminate)
    }
}

pub fn write_jsonl(path: &Path, records: &[TranscriptRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a transcript file, skipping blank lines. Errors name the bad line.
pub fn read_jsonl(path: &Path) -> Result<Vec<TranscriptRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        records.push(r);
    }
    Ok(records)
}
