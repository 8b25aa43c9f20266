//! Mask plans for the three pretraining objectives.
//!
//! A plan is sampled once per (instance, seed) and fully determines the
//! corruption: which utterance sub-tokens are masked (with a per-position
//! 80/10/10 mask/random/keep action), which columns are masked, and the CVR
//! targets — the original sub-tokens of every snapshot cell in a masked
//! column. Cell values themselves are never corrupted in the input.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::snapshot::ContentSnapshot;
use crate::tokenizer::{tokenize_words, Vocab};

/// Utterance sub-token masking rate.
pub const MLM_RATE: f64 = 0.15;
/// Column masking rate.
pub const MCP_RATE: f64 = 0.20;

/// What happens to one selected utterance position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAction {
    /// Replace with `[MASK]` (80%).
    Mask,
    /// Replace with a random non-control vocab id (10%).
    Random,
    /// Keep the original token (10%).
    Keep,
}

/// One selected utterance sub-token position and its corruption action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UtteranceMask {
    /// Index into the utterance sub-token sequence.
    pub position: usize,
    pub action: MaskAction,
}

/// One CVR prediction target: sub-token `position` (k) of the cell at
/// (`snapshot_row`, `column`), whose original id is `token_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CvrTarget {
    pub column: usize,
    pub snapshot_row: usize,
    pub position: usize,
    pub token_id: usize,
}

/// A complete, deterministic corruption plan for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Default)]
pub struct MaskPlan {
    /// Selected utterance positions, ascending.
    pub utterance: Vec<UtteranceMask>,
    /// Masked column indices, ascending.
    pub columns: Vec<usize>,
    /// Targets for cell value recovery, from masked columns only.
    pub cvr_targets: Vec<CvrTarget>,
}

/// Number of positions to mask: `floor(rate·total)`, at least 1.
pub fn mask_count(total: usize, rate: f64) -> usize {
    ((total as f64 * rate).floor() as usize).max(1)
}

/// Sample a mask plan for an instance with `utt_len` utterance sub-tokens,
/// `n_columns` columns, and the given snapshot. CVR targets are the
/// sub-tokens of each snapshot cell in a masked column, truncated to
/// `cvr_capacity` within-cell positions (the positional-embedding table
/// size). Deterministic given `seed`.
pub fn make_mask_plan(
    utt_len: usize,
    n_columns: usize,
    snapshot: &ContentSnapshot,
    v: &Vocab,
    cvr_capacity: usize,
    seed: u64,
) -> Result<MaskPlan> {
    if utt_len == 0 {
        return Err(Error::InvalidInput("mask plan requires at least one utterance sub-token".into()));
    }
    if n_columns == 0 {
        return Err(Error::InvalidInput("mask plan requires at least one column".into()));
    }
    let mut rng = rng_for(seed, "mask-plan", 0);

    let n_utt = mask_count(utt_len, MLM_RATE).min(utt_len);
    let mut positions = sample(&mut rng, utt_len, n_utt).into_vec();
    positions.sort_unstable();
    let utterance = positions
        .into_iter()
        .map(|position| {
            let r: f64 = rng.gen();
            let action = if r < 0.8 {
                MaskAction::Mask
            } else if r < 0.9 {
                MaskAction::Random
            } else {
                MaskAction::Keep
            };
            UtteranceMask { position, action }
        })
        .collect();

    let n_cols = mask_count(n_columns, MCP_RATE).min(n_columns);
    let mut columns = sample(&mut rng, n_columns, n_cols).into_vec();
    columns.sort_unstable();

    let mut cvr_targets = Vec::new();
    for &column in &columns {
        for (snapshot_row, row) in snapshot.rows.iter().enumerate() {
            let cell = &row.cells[column];
            let pieces = tokenize_words(cell, v);
            for (position, &token_id) in pieces.ids.iter().take(cvr_capacity).enumerate() {
                cvr_targets.push(CvrTarget { column, snapshot_row, position, token_id });
            }
        }
    }

    Ok(MaskPlan { utterance, columns, cvr_targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snapshot::create_snapshot;
    use crate::table::{words, Column, ColumnType, Table, Utterance};
    use crate::tokenizer::test_vocab;

    fn fixture() -> (Table, ContentSnapshot, Vocab) {
        let v = test_vocab();
        let t = Table {
            id: "t".into(),
            columns: (0..5)
                .map(|j| Column { name: words(&format!("c{j}")), ctype: ColumnType::Text })
                .collect(),
            rows: (0..4)
                .map(|i| (0..5).map(|j| words(&format!("v{i}{j}"))).collect())
                .collect(),
        };
        let u = Utterance::new(words("host city")).unwrap();
        let snap = create_snapshot(&u, &t, 2).unwrap();
        (t, snap, v)
    }

    #[test]
    fn counts_match_floor_with_min_one() {
        assert_eq!(mask_count(20, MLM_RATE), 3);
        assert_eq!(mask_count(5, MCP_RATE), 1);
        assert_eq!(mask_count(1, MLM_RATE), 1);
        assert_eq!(mask_count(10, MCP_RATE), 2);
    }

    #[test]
    fn five_columns_mask_exactly_one() {
        let (_, snap, v) = fixture();
        let plan = make_mask_plan(20, 5, &snap, &v, 20, 13).unwrap();
        assert_eq!(plan.columns.len(), 1);
        assert_eq!(plan.utterance.len(), 3);
    }

    #[test]
    fn same_seed_gives_identical_plans() {
        let (_, snap, v) = fixture();
        let a = make_mask_plan(20, 5, &snap, &v, 20, 7).unwrap();
        let b = make_mask_plan(20, 5, &snap, &v, 20, 7).unwrap();
        assert_eq!(a, b);
        let c = make_mask_plan(20, 5, &snap, &v, 20, 8).unwrap();
        assert!(a != c || a.utterance == c.utterance);
    }

    #[test]
    fn positions_are_sorted_distinct_and_in_range() {
        let (_, snap, v) = fixture();
        for seed in 0..50 {
            let plan = make_mask_plan(9, 5, &snap, &v, 20, seed).unwrap();
            let mut prev = None;
            for m in &plan.utterance {
                assert!(m.position < 9);
                assert!(prev.map_or(true, |p| p < m.position));
                prev = Some(m.position);
            }
            for w in plan.columns.windows(2) {
                assert!(w[0] < w[1]);
            }
            assert!(plan.columns.iter().all(|&c| c < 5));
        }
    }

    #[test]
    fn cvr_targets_cover_masked_columns_only() {
        let (_, snap, v) = fixture();
        let plan = make_mask_plan(12, 5, &snap, &v, 20, 3).unwrap();
        assert!(!plan.cvr_targets.is_empty());
        for t in &plan.cvr_targets {
            assert!(plan.columns.contains(&t.column));
            assert!(t.snapshot_row < snap.rows.len());
        }
        // Each (column, row) cell contributes its full sub-token count.
        let per_cell: usize = plan
            .cvr_targets
            .iter()
            .filter(|t| t.snapshot_row == 0 && t.column == plan.columns[0])
            .count();
        let cell = &snap.rows[0].cells[plan.columns[0]];
        assert_eq!(per_cell, tokenize_words(cell, &v).ids.len());
    }

    #[test]
    fn cvr_positions_respect_capacity() {
        let (_, snap, v) = fixture();
        let plan = make_mask_plan(12, 5, &snap, &v, 2, 3).unwrap();
        assert!(plan.cvr_targets.iter().all(|t| t.position < 2));
    }

    #[test]
    fn action_frequencies_follow_80_10_10() {
        let (_, snap, v) = fixture();
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        for seed in 0..2000 {
            let plan = make_mask_plan(40, 5, &snap, &v, 20, seed).unwrap();
            for m in &plan.utterance {
                total += 1;
                match m.action {
                    MaskAction::Mask => counts[0] += 1,
                    MaskAction::Random => counts[1] += 1,
                    MaskAction::Keep => counts[2] += 1,
                }
            }
        }
        assert!(total >= 10_000);
        let frac = |c: usize| c as f64 / total as f64;
        assert!((frac(counts[0]) - 0.8).abs() < 0.02);
        assert!((frac(counts[1]) - 0.1).abs() < 0.02);
        assert!((frac(counts[2]) - 0.1).abs() < 0.02);
    }

    #[test]
    fn degenerate_inputs_error() {
        let (_, snap, v) = fixture();
        assert!(make_mask_plan(0, 5, &snap, &v, 20, 1).is_err());
        assert!(make_mask_plan(5, 0, &snap, &v, 20, 1).is_err());
    }
}
