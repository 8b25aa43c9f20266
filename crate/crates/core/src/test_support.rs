//! Shared fixtures for unit tests: a small athletics table, an utterance
//! that selects a known snapshot from it, and a whole-word vocabulary that
//! covers both so tokenization stays one-sub-token-per-word.

use crate::table::{words, Column, ColumnType, Table, Utterance};
use crate::tokenizer::Vocab;

/// Vocabulary covering the fixture table and utterance as whole words.
pub(crate) fn fig1_vocab() -> Vocab {
    let mut tokens: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend(
        [
            "|", "is", "text", "real", // template words
            "in", "which", "city", "did", "piotr", "s", "last", "place", "finish", "occur",
            "year", "venue", "position", "host", "country", "event", "season",
            "2001", "2005", "2007", "2008", "2012", "1st", "2nd", "3rd",
            "helsinki", "erfurt", "tampere", "beijing", "london", "athens",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    // Single letters and digit pieces so arbitrary short words stay in-vocab.
    for c in 'a'..='z' {
        tokens.push(c.to_string());
        tokens.push(format!("##{c}"));
    }
    for d in '0'..='9' {
        tokens.push(d.to_string());
        tokens.push(format!("##{d}"));
    }
    let mut seen = std::collections::HashSet::new();
    tokens.retain(|t| seen.insert(t.clone()));
    Vocab::from_tokens(tokens).expect("fixture vocab is valid")
}

/// Five-row athletics results table (Year real, Venue text, Position text).
pub(crate) fn fig1_table() -> Table {
    Table {
        id: "fig1".to_string(),
        columns: vec![
            Column { name: words("Year"), ctype: ColumnType::Real },
            Column { name: words("Venue"), ctype: ColumnType::Text },
            Column { name: words("Position"), ctype: ColumnType::Text },
        ],
        rows: vec![
            vec![words("2001"), words("helsinki"), words("2nd")],
            vec![words("2005"), words("erfurt"), words("1st")],
            vec![words("2007"), words("tampere"), words("1st")],
            vec![words("2008"), words("beijing"), words("2nd")],
            vec![words("2012"), words("london"), words("1st")],
        ],
    }
}

/// Utterance whose top-3 snapshot over [`fig1_table`] is rows {1, 2, 4}.
pub(crate) fn fig1_utterance() -> Utterance {
    Utterance::new(words("in which city did piotr s last 1st place finish occur"))
        .expect("fixture utterance is non-empty")
}
