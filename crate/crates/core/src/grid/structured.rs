//! `<think>…</think><answer>…</answer>` envelopes.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredOutput {
    pub think: String,
    pub answer: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("missing <{0}> block")]
    Missing(&'static str),
    #[error("duplicate <{0}> block")]
    Duplicate(&'static str),
    #[error("unclosed <{0}> tag")]
    Unclosed(&'static str),
    #[error("<answer> appears before <think>")]
    AnswerBeforeThink,
    #[error("tags overlap or nest")]
    Overlapping,
    #[error("unexpected text outside tags at byte {0}")]
    StrayText(usize),
}

const THINK: (&str, &str, &str) = ("think", "<think>", "</think>");
const ANSWER: (&str, &str, &str) = ("answer", "<answer>", "</answer>");

pub fn render_structured(think: &str, answer: &str) -> String {
    format!("<think>{think}</think><answer>{answer}</answer>")
}

/// Locates the single think block followed by the single answer block.
/// Only whitespace may appear outside the two blocks.
pub fn extract_structured(raw: &str) -> Result<StructuredOutput, FormatError> {
    let think = locate(raw, THINK)?;
    let answer = locate(raw, ANSWER)?;
    let (t_open, t_close) = think.ok_or(FormatError::Missing(THINK.0))?;
    let (a_open, a_close) = answer.ok_or(FormatError::Missing(ANSWER.0))?;
    if a_open < t_open {
        return Err(FormatError::AnswerBeforeThink);
    }
    if a_open < t_close + THINK.2.len() {
        return Err(FormatError::Overlapping);
    }
    let gaps = [
        (0, t_open),
        (t_close + THINK.2.len(), a_open),
        (a_close + ANSWER.2.len(), raw.len()),
    ];
    for (from, to) in gaps {
        if let Some(pos) = raw[from..to].find(|c: char| !c.is_whitespace()) {
            return Err(FormatError::StrayText(from + pos));
        }
    }
    Ok(StructuredOutput {
        think: raw[t_open + THINK.1.len()..t_close].to_string(),
        answer: raw[a_open + ANSWER.1.len()..a_close].to_string(),
        raw: raw.to_string(),
    })
}

/// Returns byte offsets of the opening and closing tag, if present once.
fn locate(raw: &str, (name, open, close): (&'static str, &str, &str)) -> Result<Option<(usize, usize)>, FormatError> {
    let opens: Vec<usize> = raw.match_indices(open).map(|(i, _)| i).collect();
    let closes: Vec<usize> = raw.match_indices(close).map(|(i, _)| i).collect();
    if opens.len() > 1 || closes.len() > 1 {
        return Err(FormatError::Duplicate(name));
    }
    match (opens.first(), closes.first()) {
        (None, None) => Ok(None),
        (Some(_), None) | (None, Some(_)) => Err(FormatError::Unclosed(name)),
        (Some(&o), Some(&c)) if c < o => Err(FormatError::Unclosed(name)),
        (Some(&o), Some(&c)) => Ok(Some((o, c))),
    }
}
