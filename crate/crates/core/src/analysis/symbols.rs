//! Unigram and bigram counts of emitted symbols.

use std::io::Write;

use serde::Serialize;

use crate::env::{Role, MAX_TURN_LIMIT, UTTERANCE_LEN, VOCAB_SIZE};
use crate::error::Result;
use crate::transcript::TranscriptRecord;

pub type BigramCounts = [[u64; VOCAB_SIZE]; VOCAB_SIZE];

/// Symbol counts per speaking role. Every recorded message contributes,
/// including the one attached to a terminating turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolStats {
    /// `unigram[role][turn - 1][position][symbol]`
    pub unigram: [Vec<[[u64; VOCAB_SIZE]; UTTERANCE_LEN]>; 2],
    /// `bigram[role][first][second]` over adjacent positions of one message.
    pub bigram: [BigramCounts; 2],
    pub messages: [u64; 2],
}

impl Default for SymbolStats {
    fn default() -> Self {
        let turns = || vec![[[0; VOCAB_SIZE]; UTTERANCE_LEN]; MAX_TURN_LIMIT as usize];
        SymbolStats {
            unigram: [turns(), turns()],
            bigram: [[[0; VOCAB_SIZE]; VOCAB_SIZE]; 2],
            messages: [0; 2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct UnigramRow {
    pub role: Role,
    pub turn: u32,
    pub position: usize,
    pub symbol: usize,
    pub count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BigramRow {
    pub role: Role,
    pub rank: usize,
    pub first: usize,
    pub second: usize,
    pub count: u64,
}

pub fn symbol_stats(records: &[TranscriptRecord]) -> SymbolStats {
    let mut stats = SymbolStats::default();
    for r in records {
        for (k, turn) in r.turns.iter().enumerate() {
            let role = turn.agent.index();
            let m = turn.message.values();
            stats.messages[role] += 1;
            for (pos, &s) in m.iter().enumerate() {
                stats.unigram[role][k][pos][s as usize] += 1;
            }
            for w in m.windows(2) {
                stats.bigram[role][w[0] as usize][w[1] as usize] += 1;
            }
        }
    }
    stats
}

impl SymbolStats {
    pub fn is_empty(&self) -> bool {
        self.messages == [0, 0]
    }

    /// Total count of each symbol, over `role` or both roles.
    pub fn symbol_totals(&self, role: Option<Role>) -> [u64; VOCAB_SIZE] {
        let mut out = [0; VOCAB_SIZE];
        for r in roles(role) {
            for turn in &self.unigram[r] {
                for pos in turn {
                    for (s, c) in pos.iter().enumerate() {
                        out[s] += c;
                    }
                }
            }
        }
        out
    }

    /// Fraction of all emitted symbols taken by the most frequent one;
    /// `None` without any symbols.
    pub fn top_unigram_share(&self, role: Option<Role>) -> Option<f64> {
        let totals = self.symbol_totals(role);
        let sum: u64 = totals.iter().sum();
        let max = totals.iter().max().copied().unwrap_or(0);
        (sum > 0).then(|| max as f64 / sum as f64)
    }

    /// Bigram counts over `role` or both roles.
    pub fn bigrams(&self, role: Option<Role>) -> BigramCounts {
        let mut out = [[0; VOCAB_SIZE]; VOCAB_SIZE];
        for r in roles(role) {
            for (a, row) in self.bigram[r].iter().enumerate() {
                for (b, c) in row.iter().enumerate() {
                    out[a][b] += c;
                }
            }
        }
        out
    }

    /// Observed bigrams, most frequent first; ties in symbol order.
    pub fn ranked_bigrams(&self, role: Option<Role>) -> Vec<((usize, usize), u64)> {
        let counts = self.bigrams(role);
        let mut out: Vec<((usize, usize), u64)> = (0..VOCAB_SIZE)
            .flat_map(|a| (0..VOCAB_SIZE).map(move |b| (a, b)))
            .map(|(a, b)| ((a, b), counts[a][b]))
            .filter(|(_, c)| *c > 0)
            .collect();
        out.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        out
    }

    /// Nonzero unigram cells.
    pub fn unigram_rows(&self) -> Vec<UnigramRow> {
        let mut out = Vec::new();
        for role in [Role::A, Role::B] {
            for (t, turn) in self.unigram[role.index()].iter().enumerate() {
                for (position, counts) in turn.iter().enumerate() {
                    for (symbol, &count) in counts.iter().enumerate() {
                        if count > 0 {
                            out.push(UnigramRow {
                                role,
                                turn: t as u32 + 1,
                                position,
                                symbol,
                                count,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn bigram_rows(&self) -> Vec<BigramRow> {
        let mut out = Vec::new();
        for role in [Role::A, Role::B] {
            for (rank, ((first, second), count)) in self.ranked_bigrams(Some(role)).into_iter().enumerate() {
                out.push(BigramRow {
                    role,
                    rank: rank + 1,
                    first,
                    second,
                    count,
                });
            }
        }
        out
    }

    pub fn write_unigram_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.unigram_rows())
    }

    pub fn write_bigram_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.bigram_rows())
    }
}

fn roles(role: Option<Role>) -> Vec<usize> {
    match role {
        Some(r) => vec![r.index()],
        None => vec![0, 1],
    }
}

pub(crate) fn write_rows<W: Write, S: Serialize>(out: W, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
