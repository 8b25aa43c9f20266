//! Row linearization: turning (utterance, snapshot) into per-row sub-token
//! sequences with control tokens, segment ids, and alignment tags, plus
//! mask-plan application.
//!
//! The normative row layout is
//! `[CLS] utterance [SEP] cell_1 [SEP] cell_2 [SEP] ... cell_M [SEP]`,
//! where each cell follows the selected template (e.g. `name | type |
//! value`). Template delimiters (`|`, `is`) attach to the span they follow,
//! so every position carries exactly one of the six alignment tags and an
//! empty cell value leaves its separators intact. Segment ids are 0 through
//! the first `[SEP]` and 1 after. When a row exceeds `max_len`, cell-value
//! tokens are dropped right-to-left; names and types are never truncated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{MaskAction, MaskPlan};
use crate::rng::rng_for;
use crate::snapshot::{create_snapshot, ContentSnapshot};
use crate::table::{Cell, Column, Table, Utterance};
use crate::tokenizer::{tokenize_words, SubtokenSeq, Vocab};
use rand::Rng;

/// Default maximum row-sequence length.
pub const DEFAULT_MAX_SEQ_LEN: usize = 256;

/// The four cell templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linearization {
    NameOnly,
    NameType,
    #[default]
    NameTypeValue,
    NameIsValue,
}

impl Linearization {
    pub const ALL: [Linearization; 4] = [
        Linearization::NameOnly,
        Linearization::NameType,
        Linearization::NameTypeValue,
        Linearization::NameIsValue,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Linearization::NameOnly => "name_only",
            Linearization::NameType => "name_type",
            Linearization::NameTypeValue => "name_type_value",
            Linearization::NameIsValue => "name_is_value",
        }
    }
}

impl std::str::FromStr for Linearization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Linearization::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown linearization template `{s}`")))
    }
}

impl std::fmt::Display for Linearization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Alignment tag of one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Cls,
    Sep,
    /// Utterance sub-token belonging to source word `word`.
    Utterance { word: usize },
    /// Column-name span of column `column` (includes the delimiter that
    /// follows the name, when templated).
    ColumnName { column: usize },
    /// Column-type span of column `column` (includes the delimiter that
    /// follows the type, when templated).
    ColumnType { column: usize },
    /// Cell-value span of column `column`.
    CellValue { column: usize },
}

impl Tag {
    /// The column index this tag belongs to, if any.
    pub fn column(self) -> Option<usize> {
        match self {
            Tag::ColumnName { column } | Tag::ColumnType { column } | Tag::CellValue { column } => Some(column),
            _ => None,
        }
    }

    /// True for the name/type positions masked by MCP.
    pub fn is_maskable_column_part(self, column: usize) -> bool {
        matches!(self, Tag::ColumnName { column: c } | Tag::ColumnType { column: c } if c == column)
    }
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tag::Cls => write!(f, "CLS"),
            Tag::Sep => write!(f, "SEP"),
            Tag::Utterance { word } => write!(f, "utt(w{word})"),
            Tag::ColumnName { column } => write!(f, "name({column})"),
            Tag::ColumnType { column } => write!(f, "type({column})"),
            Tag::CellValue { column } => write!(f, "value({column})"),
        }
    }
}

/// One linearized snapshot row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowEncoding {
    pub ids: Vec<usize>,
    pub segments: Vec<u8>,
    pub tags: Vec<Tag>,
}

impl RowEncoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sep_count(&self) -> usize {
        self.tags.iter().filter(|t| matches!(t, Tag::Sep)).count()
    }

    /// Positions carrying any tag of column `j`, in order.
    pub fn column_positions(&self, j: usize) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| t.column() == Some(j))
            .map(|(p, _)| p)
            .collect()
    }
}

/// Per-row encodings of one instance, sharing an utterance block.
///
/// `utterance` always holds the original (uncorrupted) utterance sub-tokens;
/// after [`apply_mask_plan`] the rows may differ from it at masked positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub rows: Vec<RowEncoding>,
    pub utterance: SubtokenSeq,
    pub n_columns: usize,
    pub template: Linearization,
}

impl EncodedInput {
    /// Utterance length in sub-tokens.
    pub fn utt_len(&self) -> usize {
        self.utterance.len()
    }

    /// Row position of utterance sub-token `i` (same in every row).
    pub fn utt_position(&self, i: usize) -> usize {
        1 + i
    }
}

/// Linearize one cell of column `j` under `tpl`: sub-token ids plus tags.
pub fn linearize_cell(
    col: &Column,
    cell: &Cell,
    j: usize,
    tpl: Linearization,
    v: &Vocab,
) -> (Vec<usize>, Vec<Tag>) {
    let mut ids = Vec::new();
    let mut tags = Vec::new();
    let push = |piece_ids: &[usize], tag: Tag, ids: &mut Vec<usize>, tags: &mut Vec<Tag>| {
        ids.extend_from_slice(piece_ids);
        tags.extend(std::iter::repeat(tag).take(piece_ids.len()));
    };

    let name = tokenize_words(&col.name, v);
    push(&name.ids, Tag::ColumnName { column: j }, &mut ids, &mut tags);

    match tpl {
        Linearization::NameOnly => {}
        Linearization::NameType | Linearization::NameTypeValue => {
            let bar = tokenize_words(&["|".to_string()], v);
            push(&bar.ids, Tag::ColumnName { column: j }, &mut ids, &mut tags);
            let ctype = tokenize_words(&[col.ctype.as_str().to_string()], v);
            push(&ctype.ids, Tag::ColumnType { column: j }, &mut ids, &mut tags);
            if tpl == Linearization::NameTypeValue {
                push(&bar.ids, Tag::ColumnType { column: j }, &mut ids, &mut tags);
                let value = tokenize_words(cell, v);
                push(&value.ids, Tag::CellValue { column: j }, &mut ids, &mut tags);
            }
        }
        Linearization::NameIsValue => {
            let is = tokenize_words(&["is".to_string()], v);
            push(&is.ids, Tag::ColumnName { column: j }, &mut ids, &mut tags);
            let value = tokenize_words(cell, v);
            push(&value.ids, Tag::CellValue { column: j }, &mut ids, &mut tags);
        }
    }
    (ids, tags)
}

/// Linearize one snapshot row against a pre-tokenized utterance.
///
/// Emits `[CLS] utterance [SEP] cell_1 [SEP] ... cell_M [SEP]`, truncating
/// trailing cell-value tokens (rightmost first) to fit `max_len`.
pub fn linearize_row(
    utterance: &SubtokenSeq,
    columns: &[Column],
    cells: &[Cell],
    tpl: Linearization,
    v: &Vocab,
    max_len: usize,
) -> Result<RowEncoding> {
    assert_eq!(columns.len(), cells.len(), "one cell per column");
    let mut ids = vec![v.cls_id()];
    let mut tags = vec![Tag::Cls];
    for (w, &(start, end)) in utterance.word_spans.iter().enumerate() {
        for i in start..end {
            ids.push(utterance.ids[i]);
            tags.push(Tag::Utterance { word: w });
        }
    }
    ids.push(v.sep_id());
    tags.push(Tag::Sep);
    for (j, (col, cell)) in columns.iter().zip(cells).enumerate() {
        let (cell_ids, cell_tags) = linearize_cell(col, cell, j, tpl, v);
        ids.extend(cell_ids);
        tags.extend(cell_tags);
        ids.push(v.sep_id());
        tags.push(Tag::Sep);
    }

    if ids.len() > max_len {
        let over = ids.len() - max_len;
        let value_positions: Vec<usize> = tags
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, Tag::CellValue { .. }))
            .map(|(p, _)| p)
            .collect();
        if value_positions.len() < over {
            return Err(Error::OverLength { length: ids.len() - value_positions.len(), max: max_len });
        }
        // Drop the rightmost `over` value tokens, back to front so earlier
        // indices stay valid.
        for &p in value_positions.iter().rev().take(over) {
            ids.remove(p);
            tags.remove(p);
        }
    }

    let first_sep = 1 + utterance.len();
    let segments = (0..ids.len()).map(|p| u8::from(p > first_sep)).collect();
    Ok(RowEncoding { ids, segments, tags })
}

/// Linearize every row of an existing snapshot.
pub fn build_input_from_snapshot(
    u: &Utterance,
    snapshot: &ContentSnapshot,
    columns: &[Column],
    tpl: Linearization,
    v: &Vocab,
    max_len: usize,
) -> Result<EncodedInput> {
    let utterance = tokenize_words(u.tokens(), v);
    let rows: Vec<RowEncoding> = snapshot
        .rows
        .iter()
        .map(|row| linearize_row(&utterance, columns, &row.cells, tpl, v, max_len))
        .collect::<Result<_>>()?;
    for row in &rows[1..] {
        debug_assert_eq!(
            row.ids[..1 + utterance.len()],
            rows[0].ids[..1 + utterance.len()],
            "utterance block must be identical across rows"
        );
    }
    Ok(EncodedInput { rows, utterance, n_columns: columns.len(), template: tpl })
}

/// Create the snapshot for `(u, t, k)` and linearize it.
pub fn build_input(
    u: &Utterance,
    t: &Table,
    k: usize,
    tpl: Linearization,
    v: &Vocab,
    max_len: usize,
) -> Result<EncodedInput> {
    let snapshot = create_snapshot(u, t, k)?;
    build_input_from_snapshot(u, &snapshot, &t.columns, tpl, v, max_len)
}

/// Apply a mask plan: corrupt selected utterance positions (identically in
/// every row) and replace all name/type positions of masked columns with
/// `[MASK]`. Cell-value positions are never altered. Random replacements are
/// drawn from the non-control vocabulary, deterministically by `rng_seed`.
pub fn apply_mask_plan(ei: &EncodedInput, plan: &MaskPlan, v: &Vocab, rng_seed: u64) -> Result<EncodedInput> {
    for m in &plan.utterance {
        if m.position >= ei.utt_len() {
            return Err(Error::Contract(format!(
                "mask plan position {} exceeds utterance length {}",
                m.position,
                ei.utt_len()
            )));
        }
    }
    for &c in &plan.columns {
        if c >= ei.n_columns {
            return Err(Error::Contract(format!(
                "mask plan column {c} exceeds column count {}",
                ei.n_columns
            )));
        }
    }

    let mut rng = rng_for(rng_seed, "mask-apply", 0);
    let non_control = v.len().saturating_sub(5);
    let mut out = ei.clone();
    for m in &plan.utterance {
        let replacement = match m.action {
            MaskAction::Mask => Some(v.mask_id()),
            MaskAction::Random => {
                if non_control == 0 {
                    Some(v.mask_id())
                } else {
                    let id = loop {
                        let id = rng.gen_range(0..v.len());
                        if !v.is_control(id) {
                            break id;
                        }
                    };
                    Some(id)
                }
            }
            MaskAction::Keep => None,
        };
        if let Some(id) = replacement {
            let pos = ei.utt_position(m.position);
            for row in &mut out.rows {
                row.ids[pos] = id;
            }
        }
    }
    for &column in &plan.columns {
        for row in &mut out.rows {
            for p in 0..row.len() {
                if row.tags[p].is_maskable_column_part(column) {
                    row.ids[p] = v.mask_id();
                }
            }
        }
    }
    Ok(out)
}
