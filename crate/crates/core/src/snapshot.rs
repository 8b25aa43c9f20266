//! Content-snapshot selection: the top-K table rows by n-gram overlap with
//! the utterance, or one synthetic row assembled per column when K=1.
//!
//! Overlap is the fraction of distinct utterance n-grams (n ≤ 3, pooled over
//! lengths) that also occur in the candidate token list, compared
//! case-insensitively. Because every candidate is scored against the same
//! utterance, scores share a denominator and all ordering is done on exact
//! integer match counts — ties always break toward the smaller row index,
//! and selected rows keep their original table order.

use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec;
use crate::table::{Cell, Table, Utterance};

/// Largest n-gram length considered.
pub const DEFAULT_MAX_NGRAM: usize = 3;

/// An overlap ratio kept in exact rational form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OverlapScore {
    /// Distinct utterance n-grams that occur in the candidate.
    pub matched: usize,
    /// Distinct utterance n-grams overall.
    pub total: usize,
}

impl OverlapScore {
    /// The ratio in `[0, 1]`; an empty utterance n-gram set scores 0.
    pub fn value(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

/// One snapshot row: its cells plus where they came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotRow {
    pub cells: Vec<Cell>,
    pub source: RowSource,
}

/// Provenance of a snapshot row.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowSource {
    /// A real table row selected whole.
    Table { row: usize, score: OverlapScore },
    /// A synthetic row: `donors[j]` is the table row that supplied column
    /// `j`'s cell, with that cell's own overlap score.
    Synthetic {
        donors: Vec<usize>,
        scores: Vec<OverlapScore>,
    },
}

/// The encoder's view of table content: K rows (or one synthetic row).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContentSnapshot {
    /// Requested row count.
    pub k: usize,
    pub rows: Vec<SnapshotRow>,
}

impl ContentSnapshot {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }
}

fn ngram_set(tokens: &[String], max_n: usize) -> HashSet<Vec<String>> {
    let lowered: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    let mut set = HashSet::new();
    for n in 1..=max_n.min(lowered.len()) {
        for window in lowered.windows(n) {
            set.insert(window.to_vec());
        }
    }
    set
}

fn score_against(utterance_ngrams: &HashSet<Vec<String>>, candidate: &[String], max_n: usize) -> OverlapScore {
    let candidate_ngrams = ngram_set(candidate, max_n);
    let matched = utterance_ngrams
        .iter()
        .filter(|g| candidate_ngrams.contains(*g))
        .count();
    OverlapScore {
        matched,
        total: utterance_ngrams.len(),
    }
}

/// Fraction of distinct utterance n-grams (n ∈ 1..=max_n) present in
/// `candidate`, case-insensitively.
pub fn ngram_overlap(utterance: &[String], candidate: &[String], max_n: usize) -> Result<OverlapScore> {
    if utterance.is_empty() {
        return Err(Error::InvalidInput("ngram_overlap requires a non-empty utterance".into()));
    }
    if max_n == 0 {
        return Err(Error::InvalidInput("ngram_overlap requires max_n >= 1".into()));
    }
    Ok(score_against(&ngram_set(utterance, max_n), candidate, max_n))
}

fn utterance_ngrams(u: &Utterance) -> Result<HashSet<Vec<String>>> {
    if u.tokens().is_empty() {
        return Err(Error::InvalidInput("snapshot selection requires a non-empty utterance".into()));
    }
    Ok(ngram_set(u.tokens(), DEFAULT_MAX_NGRAM))
}

/// Score every row of `t` against the utterance (candidate = the row's cell
/// tokens concatenated in column order).
pub fn score_rows(u: &Utterance, t: &Table) -> Result<Vec<OverlapScore>> {
    let ngrams = utterance_ngrams(u)?;
    let indices: Vec<usize> = (0..t.rows.len()).collect();
    Ok(exec::par_map(&indices, |&r| {
        score_against(&ngrams, &t.row_tokens(r), DEFAULT_MAX_NGRAM)
    }))
}

/// Select the top-K rows by overlap (ties to the smaller index), preserving
/// original table order in the snapshot. Requires K > 1; K=1 snapshots are
/// built by [`build_synthetic_row`].
pub fn select_topk_rows(u: &Utterance, t: &Table, k: usize) -> Result<ContentSnapshot> {
    if k <= 1 {
        return Err(Error::Contract(
            "select_topk_rows requires K > 1; use build_synthetic_row for K = 1".into(),
        ));
    }
    let scores = score_rows(u, t)?;
    let mut order: Vec<usize> = (0..t.rows.len()).collect();
    // All scores share the utterance denominator, so comparing match counts
    // orders exactly by ratio; ties break toward the smaller row index.
    order.sort_by(|&a, &b| scores[b].matched.cmp(&scores[a].matched).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order.into_iter().take(k.min(t.rows.len())).collect();
    selected.sort_unstable();
    Ok(ContentSnapshot {
        k,
        rows: selected
            .into_iter()
            .map(|r| SnapshotRow {
                cells: t.rows[r].clone(),
                source: RowSource::Table { row: r, score: scores[r] },
            })
            .collect(),
    })
}

/// Assemble the K=1 synthetic row: per column, the cell with the highest
/// overlap (ties to the smaller row index).
pub fn build_synthetic_row(u: &Utterance, t: &Table) -> Result<ContentSnapshot> {
    let ngrams = utterance_ngrams(u)?;
    if t.rows.is_empty() {
        return Err(Error::InvalidInput("cannot build a synthetic row from an empty table".into()));
    }
    let columns: Vec<usize> = (0..t.columns.len()).collect();
    let picks = exec::par_map(&columns, |&j| {
        let mut best_row = 0;
        let mut best = score_against(&ngrams, &t.rows[0][j], DEFAULT_MAX_NGRAM);
        for (r, row) in t.rows.iter().enumerate().skip(1) {
            let score = score_against(&ngrams, &row[j], DEFAULT_MAX_NGRAM);
            if score.matched > best.matched {
                best = score;
                best_row = r;
            }
        }
        (best_row, best)
    });
    let cells: Vec<Cell> = picks
        .iter()
        .enumerate()
        .map(|(j, &(r, _))| t.rows[r][j].clone())
        .collect();
    Ok(ContentSnapshot {
        k: 1,
        rows: vec![SnapshotRow {
            cells,
            source: RowSource::Synthetic {
                donors: picks.iter().map(|&(r, _)| r).collect(),
                scores: picks.iter().map(|&(_, s)| s).collect(),
            },
        }],
    })
}

/// Dispatch: synthetic row for K=1, top-K selection otherwise.
pub fn create_snapshot(u: &Utterance, t: &Table, k: usize) -> Result<ContentSnapshot> {
    match k {
        0 => Err(Error::InvalidInput("snapshot K must be >= 1".into())),
        1 => build_synthetic_row(u, t),
        _ => select_topk_rows(u, t, k),
    }
}
