//! Tables, columns, cells, and utterances, with validation and column-type
//! inference.
//!
//! Cells and column names are stored as whitespace-split word lists; all
//! comparisons downstream are case-insensitive. Column typing uses a numeric
//! regex with strict-majority voting over non-empty cells (ties vote text),
//! standing in for NER-based typing, which is out of reach at this scale.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A cell's content: a possibly empty list of word tokens.
pub type Cell = Vec<String>;

/// The two supported column data types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Text,
    Real,
}

impl ColumnType {
    /// The lowercase surface form used in linearizations.
    pub fn as_str(self) -> &'static str {
        match self {
            ColumnType::Text => "text",
            ColumnType::Real => "real",
        }
    }
}

impl std::fmt::Display for ColumnType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named, typed table column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    /// Column name as a list of words.
    pub name: Vec<String>,
    #[serde(rename = "type")]
    pub ctype: ColumnType,
}

/// A rectangular table: `rows[i][j]` belongs to `columns[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    /// All cell tokens of row `r`, concatenated in column order.
    pub fn row_tokens(&self, r: usize) -> Vec<String> {
        self.rows[r].iter().flatten().cloned().collect()
    }
}

/// A natural-language utterance: non-empty list of words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Utterance(pub Vec<String>);

impl Utterance {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("utterance must be non-empty".into()));
        }
        Ok(Utterance(tokens))
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }
}

static NUMERIC: LazyLock<Regex> = LazyLock::new(|| {
    // Optional sign, digits with optional thousands separators, optional
    // decimal part.
    Regex::new(r"^[+-]?(\d{1,3}(,\d{3})+|\d+)(\.\d+)?$").expect("static regex")
});

/// Whether `text` parses as a number under the cleaning heuristics.
pub fn is_numeric(text: &str) -> bool {
    NUMERIC.is_match(text)
}

/// Whether a whole cell parses as a number (single numeric token).
pub fn cell_is_numeric(cell: &[String]) -> bool {
    cell.len() == 1 && is_numeric(&cell[0])
}

/// Infer a column's type from its cells: `Real` iff a strict majority of
/// non-empty cells parse as numbers; ties and all-empty input give `Text`.
pub fn infer_column_type(column_cells: &[Cell]) -> Result<ColumnType> {
    if column_cells.is_empty() {
        return Err(Error::InvalidInput(
            "infer_column_type requires at least one cell".into(),
        ));
    }
    let non_empty: Vec<&Cell> = column_cells.iter().filter(|c| !c.is_empty()).collect();
    let numeric = non_empty.iter().filter(|c| cell_is_numeric(c)).count();
    if numeric * 2 > non_empty.len() {
        Ok(ColumnType::Real)
    } else {
        Ok(ColumnType::Text)
    }
}

/// Check the `Table` invariants, returning one message per violation.
/// An empty report means the table is valid. Never mutates its input.
pub fn validate_table(t: &Table) -> Vec<String> {
    let mut violations = Vec::new();
    if t.columns.is_empty() {
        violations.push("no columns".to_string());
    }
    if t.rows.is_empty() {
        violations.push("no rows".to_string());
    }
    for (i, row) in t.rows.iter().enumerate() {
        if row.len() != t.columns.len() {
            violations.push(format!("ragged row at index {i}"));
        }
    }
    violations
}

/// Split text into whitespace-separated word tokens.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

#[cfg(test)]
pub(crate) fn cells(texts: &[&str]) -> Vec<Cell> {
    texts.iter().map(|t| words(t)).collect()
}
