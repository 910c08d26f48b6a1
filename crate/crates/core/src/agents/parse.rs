//! Output grammars of each agent role.
//!
//! Plan, verdict and score parsers return a typed [`ParseError`] that
//! triggers a re-ask. Target parsers never fail: unparseable output becomes
//! an empty, flagged label set.

use thiserror::Error;

use crate::domain::{normalize_label, EmotionLabel, LabelSet, LabelSpace};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("missing `Total steps: N` header")]
    MissingHeader,
    #[error("plan declares zero steps")]
    ZeroSteps,
    #[error("plan declares {declared} steps but lists {found}")]
    StepCount { declared: usize, found: usize },
    #[error("malformed plan step: {0}")]
    BadStep(String),
    #[error("verdict must be `[True]` or `[False]` followed by `[suggestion: ...]`")]
    Verdict,
    #[error("expected a number in [0,1]: {0}")]
    Score(String),
    #[error("empty {0}")]
    Empty(&'static str),
}

/// Trimmed free text; an empty reply is a grammar violation.
pub fn parse_free_text(text: &str, what: &'static str) -> Result<String, ParseError> {
    let t = text.trim();
    if t.is_empty() {
        Err(ParseError::Empty(what))
    } else {
        Ok(t.to_string())
    }
}

/// Trim whitespace and `*`/`#` markup from both ends.
fn clean_line(line: &str) -> String {
    line.trim()
        .trim_matches(|c| c == '*' || c == '#')
        .trim()
        .to_string()
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    if s.len() >= prefix.len() && s.is_char_boundary(prefix.len()) && s[..prefix.len()].eq_ignore_ascii_case(prefix) {
        Some(&s[prefix.len()..])
    } else {
        None
    }
}

fn parse_count(s: &str) -> Option<usize> {
    s.trim()
        .trim_matches(|c: char| c == '[' || c == ']' || c == '*' || c.is_whitespace())
        .parse()
        .ok()
}

/// `Step k: description` → `(k, description)`.
fn step_line(line: &str) -> Option<(usize, &str)> {
    let rest = strip_prefix_ci(line, "step")?;
    let (num, desc) = rest.split_once(':')?;
    let k = num.trim().trim_matches('*').trim().parse().ok()?;
    Some((k, desc.trim().trim_start_matches('*').trim()))
}

/// Parse a Planner reply into ordered sub-goal descriptions.
///
/// Lines that are neither the header nor a `Step k:` line continue the
/// preceding step's description.
pub fn parse_plan(text: &str) -> Result<Vec<String>, ParseError> {
    let mut lines = text.lines().map(clean_line).filter(|l| !l.is_empty());
    let header = lines.next().ok_or(ParseError::MissingHeader)?;
    let declared = strip_prefix_ci(&header, "total steps:")
        .and_then(parse_count)
        .ok_or(ParseError::MissingHeader)?;
    if declared == 0 {
        return Err(ParseError::ZeroSteps);
    }
    let mut steps: Vec<String> = Vec::new();
    for line in lines {
        match step_line(&line) {
            Some((k, desc)) => {
                if k != steps.len() + 1 {
                    return Err(ParseError::BadStep(format!("expected step {}, found step {k}", steps.len() + 1)));
                }
                if desc.is_empty() {
                    return Err(ParseError::BadStep(format!("step {k} has no description")));
                }
                steps.push(desc.to_string());
            }
            None => match steps.last_mut() {
                Some(last) => {
                    last.push(' ');
                    last.push_str(&line);
                }
                None => return Err(ParseError::BadStep(format!("unexpected line before step 1: {line:?}"))),
            },
        }
    }
    if steps.len() != declared {
        return Err(ParseError::StepCount {
            declared,
            found: steps.len(),
        });
    }
    Ok(steps)
}

/// Parsed Critic output. `None` suggestion means approval.
pub fn parse_verdict(text: &str) -> Result<Option<String>, ParseError> {
    let t = text.trim();
    if t == "[True]" {
        return Ok(None);
    }
    let rest = t.strip_prefix("[False]").ok_or(ParseError::Verdict)?.trim_start();
    let body = rest.strip_prefix("[suggestion:").ok_or(ParseError::Verdict)?;
    let end = body.rfind(']').ok_or(ParseError::Verdict)?;
    if !body[end + 1..].trim().is_empty() {
        return Err(ParseError::Verdict);
    }
    let suggestion = body[..end].trim();
    if suggestion.is_empty() {
        return Err(ParseError::Verdict);
    }
    Ok(Some(suggestion.to_string()))
}

/// First decimal number in `s`.
fn first_number(s: &str) -> Option<f64> {
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() || (bytes[i] == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            return s[start..i].trim_end_matches('.').parse().ok();
        }
        i += 1;
    }
    None
}

fn unit(value: Option<f64>, what: &str) -> Result<f64, ParseError> {
    match value {
        Some(v) if (0.0..=1.0).contains(&v) => Ok(v),
        Some(v) => Err(ParseError::Score(format!("{what} {v} outside [0,1]"))),
        None => Err(ParseError::Score(format!("no {what} found"))),
    }
}

/// A single `[0,1]` score such as `Plausibility: 0.8` or a bare `0.8`.
pub fn parse_unit_score(text: &str) -> Result<f64, ParseError> {
    unit(first_number(text), "score")
}

/// `(emotional risk, safety risk)` from the two-line risk rubric.
pub fn parse_risk(text: &str) -> Result<(f64, f64), ParseError> {
    let find = |key: &str| {
        text.lines()
            .find(|l| l.to_lowercase().contains(key))
            .and_then(|l| l.split_once(':').map(|(_, v)| v).or(Some(l)))
            .and_then(first_number)
    };
    Ok((unit(find("emotional"), "emotional risk")?, unit(find("safety"), "safety risk")?))
}

/// Outcome of reading a Target reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetParse {
    pub labels: LabelSet,
    pub parsed: bool,
    /// Listed tokens that are not in the label space.
    pub dropped: usize,
}

impl TargetParse {
    fn failure(dropped: usize) -> Self {
        Self {
            labels: LabelSet::new(),
            parsed: false,
            dropped,
        }
    }

    fn ok(labels: LabelSet, dropped: usize) -> Self {
        Self {
            labels,
            parsed: true,
            dropped,
        }
    }
}

fn squash(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn match_spans(haystack: &str, needle: &str) -> Vec<(usize, usize)> {
    let boundary = |c: Option<char>| c.is_none_or(|c| !c.is_alphanumeric());
    haystack
        .match_indices(needle)
        .filter(|(i, _)| {
            boundary(haystack[..*i].chars().next_back()) && boundary(haystack[i + needle.len()..].chars().next())
        })
        .map(|(i, m)| (i, i + m.len()))
        .collect()
}

/// Labels occurring as whole words in `text`, in label-space order. A label
/// whose every occurrence sits inside a longer matched label is ignored.
pub fn labels_in_text(text: &str, space: &LabelSpace) -> Vec<EmotionLabel> {
    let hay = squash(text);
    let found: Vec<(&EmotionLabel, Vec<(usize, usize)>)> = space
        .labels()
        .iter()
        .map(|l| (l, match_spans(&hay, l.as_str())))
        .filter(|(_, spans)| !spans.is_empty())
        .collect();
    found
        .iter()
        .filter(|(label, spans)| {
            spans.iter().any(|&(s, e)| {
                !found.iter().any(|(other, others)| {
                    other.as_str().len() > label.as_str().len()
                        && others.iter().any(|&(os, oe)| os <= s && e <= oe)
                })
            })
        })
        .map(|(l, _)| (*l).clone())
        .collect()
}

pub fn parse_target_single(text: &str, space: &LabelSpace) -> TargetParse {
    if let Some(label) = space.resolve(text) {
        return TargetParse::ok(LabelSet::from([label.clone()]), 0);
    }
    let hits = labels_in_text(text, space);
    if hits.len() == 1 {
        TargetParse::ok(hits.into_iter().collect(), 0)
    } else {
        TargetParse::failure(0)
    }
}

/// Text following an `**Emotions**` / `Emotions:` marker, if present.
fn emotions_field(text: &str) -> Option<String> {
    // ASCII lowercasing keeps byte offsets valid for `text`.
    let lower = text.to_ascii_lowercase();
    let start = match lower.find("**emotions**") {
        Some(i) => i + "**emotions**".len(),
        None => {
            let mut offset = 0;
            let mut hit = None;
            for line in lower.split_inclusive('\n') {
                let indent = line.len() - line.trim_start().len();
                if line.trim_start().starts_with("emotions:") {
                    hit = Some(offset + indent + "emotions".len());
                    break;
                }
                offset += line.len();
            }
            hit?
        }
    };
    let after = text[start..].trim_start().trim_start_matches(':').trim_start();
    let field = if let Some(rest) = after.strip_prefix('[') {
        rest.split(']').next().unwrap_or("")
    } else {
        after.lines().next().unwrap_or("")
    };
    Some(field.to_string())
}

pub fn parse_target_multi(text: &str, space: &LabelSpace) -> TargetParse {
    match emotions_field(text) {
        Some(field) => {
            let mut labels = LabelSet::new();
            let mut dropped = 0;
            for token in field.split(',') {
                let Ok(norm) = normalize_label(token) else { continue };
                match space.labels().iter().find(|l| **l == norm) {
                    Some(l) => {
                        labels.insert(l.clone());
                    }
                    None => dropped += 1,
                }
            }
            if labels.is_empty() {
                TargetParse::failure(dropped)
            } else {
                TargetParse::ok(labels, dropped)
            }
        }
        None => {
            let labels: LabelSet = labels_in_text(text, space).into_iter().collect();
            if labels.is_empty() {
                TargetParse::failure(0)
            } else {
                TargetParse::ok(labels, 0)
            }
        }
    }
}
