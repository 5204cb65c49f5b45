use std::fmt::Write as _;

use crate::error::{LasynError, Result};

pub const HEADER: &str = "id\ttokens\ttags\tscore";

/// One decoded sentence as written to a decode file.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeRecord {
    pub id: usize,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub score: f64,
}

/// Tab-separated lines under a header; tokens and tags are space-joined.
pub fn format_records(records: &[DecodeRecord]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.id, r.tokens.join(" "), r.tags.join(" "), r.score);
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<DecodeRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(LasynError::data("decode file lacks the `id tokens tags score` header"));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || LasynError::data(format!("decode file line {}: malformed record", n + 2));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad());
            }
            let split = |c: &str| c.split_whitespace().map(str::to_string).collect();
            Ok(DecodeRecord {
                id: cols[0].parse().map_err(|_| bad())?,
                tokens: split(cols[1]),
                tags: split(cols[2]),
                score: cols[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
