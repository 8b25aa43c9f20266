//! Corpus ingestion: JSONL parsing, the six cleaning heuristics (R1..R6),
//! and sliding-window extraction of training instances.
//!
//! `clean_table` applies, in order: R1 drop columns whose names exceed 10
//! tokens; R2 blank cells with more than 2 non-ASCII characters or more than
//! 20 tokens; R3 remove empty columns, empty rows, and rows identical to
//! their predecessor; R4 reject tables with fewer than 3 rows or 4 columns;
//! R5 re-infer all column types; R6 rotate vertically oriented tables (mostly
//! numeric column names over a mostly non-numeric first column). Because a
//! rotation or drop can re-trigger earlier rules, the pass repeats until
//! nothing changes, which makes the function idempotent by construction.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::rng::rng_for;
use crate::table::{cell_is_numeric, infer_column_type, words, Column, ColumnType, Table, Utterance};
use crate::tokenizer::{tokenize_words, Vocab};

/// Maximum utterance window length, in sub-tokens.
pub const MAX_UTTERANCE_SUBTOKENS: usize = 128;

/// Column-name token budget before R1 drops the column.
pub const MAX_NAME_TOKENS: usize = 10;

/// Cell budgets before R2 blanks the cell.
pub const MAX_CELL_TOKENS: usize = 20;
pub const MAX_CELL_NON_ASCII: usize = 2;

/// Minimum accepted table shape (R4).
pub const MIN_ROWS: usize = 3;
pub const MIN_COLUMNS: usize = 4;

/// The cleaning rules, used as report keys and rejection reasons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// One parsed corpus example: an uncleaned table plus its context paragraphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExample {
    pub id: String,
    pub table: Table,
    /// Ordered paragraphs, each a word list; non-empty.
    pub context: Vec<Vec<String>>,
}

/// One pretraining instance: a context window over a cleaned table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub id: String,
    pub utterance: Utterance,
    pub table: Table,
    /// Row indices available to the snapshot, sorted ascending.
    pub sampled_rows: Vec<usize>,
}

/// Aggregate cleaning statistics over a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub kept: usize,
    pub rejected: BTreeMap<Rule, usize>,
    pub cells_blanked: usize,
    pub columns_dropped: usize,
    pub malformed_lines: usize,
}

impl CleaningReport {
    pub fn total_rejected(&self) -> usize {
        self.rejected.values().sum()
    }

    /// Parsed examples seen (kept + rejected); excludes malformed lines.
    pub fn total_examples(&self) -> usize {
        self.kept + self.total_rejected()
    }
}

/// Result of cleaning one table: the cleaned table or the rejecting rule,
/// plus the mutation counts accumulated along the way (rejected tables keep
/// the counts for work done before rejection).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanOutcome {
    pub table: std::result::Result<Table, Rule>,
    pub cells_blanked: usize,
    pub columns_dropped: usize,
}

fn non_ascii_chars(cell: &[String]) -> usize {
    cell.iter().flat_map(|w| w.chars()).filter(|c| !c.is_ascii()).count()
}

fn drop_columns(table: &mut Table, keep: &[bool]) -> usize {
    let dropped = keep.iter().filter(|&&k| !k).count();
    if dropped > 0 {
        let mut it = keep.iter();
        table.columns.retain(|_| *it.next().unwrap());
        for row in &mut table.rows {
            let mut it = keep.iter();
            row.retain(|_| *it.next().unwrap());
        }
    }
    dropped
}

/// Rotate a vertically oriented table: the first column becomes the header
/// row and each remaining original column becomes a row.
fn rotate(table: &Table) -> Table {
    let mut columns = Vec::with_capacity(1 + table.rows.len());
    columns.push(Column { name: table.columns[0].name.clone(), ctype: ColumnType::Text });
    for row in &table.rows {
        columns.push(Column { name: row[0].clone(), ctype: ColumnType::Text });
    }
    let rows = (1..table.columns.len())
        .map(|j| {
            let mut row = Vec::with_capacity(1 + table.rows.len());
            row.push(table.columns[j].name.clone());
            row.extend(table.rows.iter().map(|r| r[j].clone()));
            row
        })
        .collect();
    Table { id: table.id.clone(), columns, rows }
}

/// Apply the cleaning heuristics R1..R6 to one table.
pub fn clean_table(t: &Table) -> CleanOutcome {
    let mut table = t.clone();
    let mut cells_blanked = 0;
    let mut columns_dropped = 0;
    let reject = |rule, cells_blanked, columns_dropped| CleanOutcome {
        table: Err(rule),
        cells_blanked,
        columns_dropped,
    };

    loop {
        let mut changed = false;

        // R1: drop columns with over-long names.
        let keep: Vec<bool> = table.columns.iter().map(|c| c.name.len() <= MAX_NAME_TOKENS).collect();
        let dropped = drop_columns(&mut table, &keep);
        if dropped > 0 {
            columns_dropped += dropped;
            changed = true;
        }

        // R2: blank oversized or heavily non-ASCII cells.
        for row in &mut table.rows {
            for cell in row.iter_mut() {
                if !cell.is_empty()
                    && (cell.len() > MAX_CELL_TOKENS || non_ascii_chars(cell) > MAX_CELL_NON_ASCII)
                {
                    cell.clear();
                    cells_blanked += 1;
                    changed = true;
                }
            }
        }

        // R3: drop empty columns, then empty rows, then adjacent duplicates.
        if !table.rows.is_empty() {
            let keep: Vec<bool> = (0..table.columns.len())
                .map(|j| table.rows.iter().any(|r| !r[j].is_empty()))
                .collect();
            let dropped = drop_columns(&mut table, &keep);
            if dropped > 0 {
                columns_dropped += dropped;
                changed = true;
            }
        }
        let before = table.rows.len();
        table.rows.retain(|r| r.iter().any(|c| !c.is_empty()));
        let mut deduped: Vec<Vec<crate::table::Cell>> = Vec::with_capacity(table.rows.len());
        for row in table.rows.drain(..) {
            if deduped.last() != Some(&row) {
                deduped.push(row);
            }
        }
        table.rows = deduped;
        if table.rows.len() != before {
            changed = true;
        }

        // R4: reject degenerate shapes.
        if table.rows.len() < MIN_ROWS || table.columns.len() < MIN_COLUMNS {
            return reject(Rule::R4, cells_blanked, columns_dropped);
        }

        // R5: re-infer every column type from the surviving cells.
        for j in 0..table.columns.len() {
            let cells: Vec<_> = table.rows.iter().map(|r| r[j].clone()).collect();
            table.columns[j].ctype = infer_column_type(&cells).expect("R4 guarantees rows");
        }

        // R6: rotate vertically oriented tables.
        let numeric_names = table.columns.iter().filter(|c| cell_is_numeric(&c.name)).count();
        let non_numeric_first = table.rows.iter().filter(|r| !cell_is_numeric(&r[0])).count();
        if numeric_names * 2 > table.columns.len() && non_numeric_first * 2 > table.rows.len() {
            table = rotate(&table);
            changed = true;
        }

        if !changed {
            return CleanOutcome { table: Ok(table), cells_blanked, columns_dropped };
        }
    }
}

#[derive(Deserialize)]
struct WireColumn {
    name: String,
    #[serde(rename = "type")]
    ctype: Option<String>,
}

#[derive(Deserialize)]
struct WireExample {
    id: String,
    columns: Vec<WireColumn>,
    rows: Vec<Vec<String>>,
    context: Vec<String>,
}

#[derive(Deserialize)]
struct WireTable {
    id: String,
    columns: Vec<WireColumn>,
    rows: Vec<Vec<String>>,
}

fn build_table(id: String, wire_columns: &[WireColumn], wire_rows: &[Vec<String>]) -> Result<Table> {
    let rows: Vec<Vec<crate::table::Cell>> = wire_rows
        .iter()
        .map(|r| r.iter().map(|c| words(c)).collect())
        .collect();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != wire_columns.len() {
            return Err(Error::InvalidInput(format!(
                "example {id}: row {i} has {} cells for {} columns",
                row.len(),
                wire_columns.len()
            )));
        }
    }
    let columns = wire_columns
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let ctype = match c.ctype.as_deref() {
                Some("text") => ColumnType::Text,
                Some("real") => ColumnType::Real,
                Some(other) => {
                    return Err(Error::InvalidInput(format!(
                        "example {id}: unknown column type `{other}`"
                    )))
                }
                None => {
                    let cells: Vec<_> = rows.iter().map(|r| r[j].clone()).collect();
                    infer_column_type(&cells).unwrap_or(ColumnType::Text)
                }
            };
            Ok(Column { name: words(&c.name), ctype })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Table { id, columns, rows })
}

/// Parse one JSONL line into a [`RawExample`].
pub fn parse_example(line: &str) -> Result<RawExample> {
    let wire: WireExample = serde_json::from_str(line)?;
    if wire.context.is_empty() {
        return Err(Error::InvalidInput(format!("example {}: empty context", wire.id)));
    }
    let context = wire.context.iter().map(|p| words(p)).collect();
    let table = build_table(wire.id.clone(), &wire.columns, &wire.rows)?;
    Ok(RawExample { id: wire.id, table, context })
}

/// Parse a standalone table file: the same object schema as a corpus line
/// but without `context` (one is ignored if present). Requires at least one
/// column and one row.
pub fn parse_table(text: &str) -> Result<Table> {
    let wire: WireTable = serde_json::from_str(text)?;
    let table = build_table(wire.id, &wire.columns, &wire.rows)?;
    if table.columns.is_empty() || table.rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "table {}: must have at least one column and one row",
            table.id
        )));
    }
    Ok(table)
}

/// Load a JSONL corpus, clean every table, and accumulate the report.
///
/// Returns the kept examples with their tables already cleaned, in file
/// order. Malformed lines are counted and skipped; rejected tables are
/// tallied per rule.
pub fn load_corpus(path: &Path) -> Result<(Vec<RawExample>, CleaningReport)> {
    let file = std::fs::File::open(path)?;
    let mut report = CleaningReport::default();
    let mut parsed = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_example(&line) {
            Ok(ex) => parsed.push(ex),
            Err(_) => report.malformed_lines += 1,
        }
    }

    let outcomes = exec::par_map(&parsed, |ex| clean_table(&ex.table));
    let mut kept = Vec::new();
    for (ex, outcome) in parsed.into_iter().zip(outcomes) {
        report.cells_blanked += outcome.cells_blanked;
        report.columns_dropped += outcome.columns_dropped;
        match outcome.table {
            Ok(table) => {
                report.kept += 1;
                kept.push(RawExample { table, ..ex });
            }
            Err(rule) => *report.rejected.entry(rule).or_insert(0) += 1,
        }
    }
    Ok((kept, report))
}

/// Split a cleaned example's context into ≤128-sub-token windows (cut at
/// word boundaries) and emit one instance per window, each with
/// `rows_per_instance` distinct rows sampled uniformly (clamped to the row
/// count). Deterministic given `seed`.
pub fn extract_instances(
    ex: &RawExample,
    rows_per_instance: usize,
    v: &Vocab,
    seed: u64,
) -> Vec<TrainingInstance> {
    let mut windows: Vec<Vec<String>> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut current_len = 0;
    for word in ex.context.iter().flatten() {
        let n = tokenize_words(std::slice::from_ref(word), v).ids.len();
        if current_len + n > MAX_UTTERANCE_SUBTOKENS && !current.is_empty() {
            windows.push(std::mem::take(&mut current));
            current_len = 0;
        }
        current.push(word.clone());
        current_len += n;
    }
    if !current.is_empty() {
        windows.push(current);
    }

    let tag = format!("rows:{}", ex.id);
    let n_rows = ex.table.rows.len();
    windows
        .into_iter()
        .enumerate()
        .map(|(w, window)| {
            let mut rng = rng_for(seed, &tag, w as u64);
            let take = rows_per_instance.min(n_rows).max(1);
            let mut sampled = rand::seq::index::sample(&mut rng, n_rows, take).into_vec();
            sampled.sort_unstable();
            TrainingInstance {
                id: format!("{}#w{w}", ex.id),
                utterance: Utterance::new(window).expect("windows are non-empty"),
                table: ex.table.clone(),
                sampled_rows: sampled,
            }
        })
        .collect()
}

/// Load, clean, and window a corpus in one step.
pub fn prepare_corpus(
    path: &Path,
    rows_per_instance: usize,
    v: &Vocab,
    seed: u64,
) -> Result<(Vec<TrainingInstance>, CleaningReport)> {
    let (examples, report) = load_corpus(path)?;
    let batches = exec::par_map(&examples, |ex| extract_instances(ex, rows_per_instance, v, seed));
    Ok((batches.into_iter().flatten().collect(), report))
}

/// Read back a JSONL file of [`TrainingInstance`]s written by preprocess.
pub fn load_instances(path: &Path) -> Result<Vec<TrainingInstance>> {
    let file = std::fs::File::open(path)?;
    let mut instances = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: TrainingInstance = serde_json::from_str(&line)?;
        if inst.utterance.tokens().is_empty() {
            return Err(Error::InvalidInput(format!("instance {}: empty utterance", inst.id)));
        }
        if inst.sampled_rows.iter().any(|&r| r >= inst.table.rows.len()) {
            return Err(Error::InvalidInput(format!(
                "instance {}: sampled row out of range",
                inst.id
            )));
        }
        if inst.sampled_rows.is_empty() {
            return Err(Error::InvalidInput(format!("instance {}: no sampled rows", inst.id)));
        }
        instances.push(inst);
    }
    Ok(instances)
}
