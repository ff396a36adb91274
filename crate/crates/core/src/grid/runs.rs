//! Merged index strings: `""`, `"5"`, `"0-2,5,7"`.
//!
//! Canonical form lists maximal runs of consecutive indices in ascending
//! order, a run of length one as `n` and longer runs as `a-b`.

use std::fmt;

use thiserror::Error;

use super::{BlockLabelSet, GridSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    /// Token is not `n` or `a-b`.
    Malformed,
    /// `a-b` with `a >= b`.
    ReversedRange,
    /// Index at or beyond the block count.
    OutOfRange { index: u64, count: usize },
    NegativeIndex,
    /// Strict mode only: well formed but not canonical.
    NonCanonical,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::Malformed => write!(f, "malformed token"),
            ParseErrorKind::ReversedRange => write!(f, "reversed range"),
            ParseErrorKind::OutOfRange { index, count } => {
                write!(f, "index {index} out of range for {count} blocks")
            }
            ParseErrorKind::NegativeIndex => write!(f, "negative index"),
            ParseErrorKind::NonCanonical => write!(f, "not in canonical run form"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at byte {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

/// Renders a block set as its canonical run string.
pub fn serialize_runs(labels: &BlockLabelSet) -> String {
    let mut out = String::new();
    let mut iter = labels.iter().peekable();
    while let Some(start) = iter.next() {
        let mut end = start;
        while iter.peek() == Some(&(end + 1)) {
            end += 1;
            iter.next();
        }
        if !out.is_empty() {
            out.push(',');
        }
        if end == start {
            out.push_str(&start.to_string());
        } else {
            out.push_str(&format!("{start}-{end}"));
        }
    }
    out
}

/// Tolerant parser: accepts unsorted, overlapping or adjacent items, spaces
/// around items, and the literal `none`, then canonicalizes.
pub fn parse_runs(text: &str, grid: GridSpec) -> Result<BlockLabelSet, ParseError> {
    if text.trim().eq_ignore_ascii_case("none") {
        return Ok(BlockLabelSet::empty(grid));
    }
    let mut set = BlockLabelSet::empty(grid);
    for (lo, hi) in items(text, grid, true)? {
        for i in lo..=hi {
            set.changed.insert(i);
        }
    }
    Ok(set)
}

/// Strict parser: the input must already be the canonical serialization.
pub fn parse_runs_strict(text: &str, grid: GridSpec) -> Result<BlockLabelSet, ParseError> {
    let mut set = BlockLabelSet::empty(grid);
    let mut prev_end: Option<(usize, usize)> = None;
    let mut offset = 0;
    for ((lo, hi), token) in items(text, grid, false)?.into_iter().zip(text.split(',')) {
        if let Some((end, _)) = prev_end {
            if lo <= end + 1 {
                return Err(ParseError {
                    offset,
                    kind: ParseErrorKind::NonCanonical,
                });
            }
        }
        prev_end = Some((hi, offset));
        for i in lo..=hi {
            set.changed.insert(i);
        }
        offset += token.len() + 1;
    }
    Ok(set)
}

/// Splits and validates items, returning inclusive `(lo, hi)` ranges.
fn items(text: &str, grid: GridSpec, tolerant: bool) -> Result<Vec<(usize, usize)>, ParseError> {
    let mut out = Vec::new();
    if text.is_empty() || (tolerant && text.trim().is_empty()) {
        return Ok(out);
    }
    let mut offset = 0;
    for token in text.split(',') {
        let (body, lead) = if tolerant {
            let lead = token.len() - token.trim_start().len();
            (token.trim(), lead)
        } else {
            (token, 0)
        };
        out.push(item(body, offset + lead, grid)?);
        offset += token.len() + 1;
    }
    Ok(out)
}

fn item(body: &str, offset: usize, grid: GridSpec) -> Result<(usize, usize), ParseError> {
    let err = |kind, at: usize| ParseError { offset: offset + at, kind };
    if body.is_empty() {
        return Err(err(ParseErrorKind::Malformed, 0));
    }
    if let Some(rest) = body.strip_prefix('-') {
        return if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
            Err(err(ParseErrorKind::NegativeIndex, 0))
        } else {
            Err(err(ParseErrorKind::Malformed, 0))
        };
    }
    let count = grid.block_count();
    match body.split_once('-') {
        None => {
            let n = number(body).ok_or_else(|| err(ParseErrorKind::Malformed, 0))?;
            let n = in_range(n, count).map_err(|k| err(k, 0))?;
            Ok((n, n))
        }
        Some((a, b)) => {
            let second = a.len() + 1;
            let lo = number(a).ok_or_else(|| err(ParseErrorKind::Malformed, 0))?;
            if b.starts_with('-') {
                return Err(err(ParseErrorKind::NegativeIndex, second));
            }
            let hi = number(b).ok_or_else(|| err(ParseErrorKind::Malformed, second))?;
            if lo >= hi {
                return Err(err(ParseErrorKind::ReversedRange, 0));
            }
            let lo = in_range(lo, count).map_err(|k| err(k, 0))?;
            let hi = in_range(hi, count).map_err(|k| err(k, second))?;
            Ok((lo, hi))
        }
    }
}

fn number(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    // saturate: anything too long for u64 is out of range anyway
    Some(s.parse::<u64>().unwrap_or(u64::MAX))
}

fn in_range(n: u64, count: usize) -> Result<usize, ParseErrorKind> {
    if n >= count as u64 {
        Err(ParseErrorKind::OutOfRange { index: n, count })
    } else {
        Ok(n as usize)
    }
}
