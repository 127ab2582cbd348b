//! The strict simulator output schema and its parser.
//!
//! Every simulator reply must be a JSON object with three fields:
//! `relevant_medical_history`, `style_transferred_medical_history`, and
//! `response`. The response text wraps each style-transferred phrase in
//! `<\s> ... </\s>` markers followed by the `[X.Y]` index of the source
//! fact. The parser classifies violations instead of panicking so that
//! malformed model output becomes auditable data.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::profilegen::FactIndex;

/// One validated simulator turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatorTurn {
    pub relevant_medical_history: Vec<String>,
    pub style_transferred_medical_history: Vec<String>,
    pub response: String,
}

/// Classified schema violations.
#[derive(Debug, Clone, thiserror::Error)]
pub enum TurnParseError {
    /// The payload could not be read as a JSON object at all. The raw
    /// text is retained for audit.
    #[error("unparseable simulator payload: {message}")]
    Unparseable { message: String, raw: String },
    /// A required field is absent, null, or of the wrong type.
    #[error("missing or ill-typed field {field:?}")]
    MissingField { field: &'static str, raw: String },
    /// The response cites indices that do not appear in
    /// `relevant_medical_history`.
    #[error("response cites indices missing from relevant_medical_history: {indices:?}")]
    DanglingIndex { indices: Vec<String> },
    /// Span markers are unbalanced, nested, or lack their index tag.
    #[error("malformed span structure: {message}")]
    MalformedSpan { message: String },
}

/// A `[X.Y]` tag found in the response, with its byte offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagRef {
    pub index: FactIndex,
    pub offset: usize,
}

/// A `<\s> ... </\s>` span with the tag that follows it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanRef {
    /// Byte range of the span contents (between the markers).
    pub content: (usize, usize),
    pub text: String,
    pub tag: FactIndex,
}

const OPEN: &str = "<\\s>";
const CLOSE: &str = "</\\s>";

/// Extracts every `[X.Y]` tag with its byte offset.
pub fn extract_tags(text: &str) -> Vec<TagRef> {
    let mut tags = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            if let Some(close) = text[i..].find(']') {
                let inner = &text[i + 1..i + close];
                if let Ok(index) = inner.parse::<FactIndex>() {
                    tags.push(TagRef { index, offset: i });
                }
                i += close + 1;
                continue;
            }
        }
        i += 1;
    }
    tags
}

/// Extracts well-formed spans; errors on unbalanced or nested markers and
/// on spans not followed by an index tag.
pub fn extract_spans(text: &str) -> Result<Vec<SpanRef>, TurnParseError> {
    let mut spans = Vec::new();
    let mut cursor = 0usize;
    loop {
        let Some(open_rel) = text[cursor..].find(OPEN) else {
            if let Some(stray) = text[cursor..].find(CLOSE) {
                return Err(TurnParseError::MalformedSpan {
                    message: format!("closing marker without opener at byte {}", cursor + stray),
                });
            }
            break;
        };
        let open_at = cursor + open_rel;
        let content_start = open_at + OPEN.len();
        let Some(close_rel) = text[content_start..].find(CLOSE) else {
            return Err(TurnParseError::MalformedSpan {
                message: format!("unclosed span opened at byte {open_at}"),
            });
        };
        let content_end = content_start + close_rel;
        let inner = &text[content_start..content_end];
        if inner.contains(OPEN) {
            return Err(TurnParseError::MalformedSpan {
                message: format!("nested span opened inside span at byte {open_at}"),
            });
        }
        // The [X.Y] tag must follow the closing marker (whitespace allowed).
        let after = content_end + CLOSE.len();
        let rest = text[after..].trim_start();
        let tag = rest
            .strip_prefix('[')
            .and_then(|r| r.split_once(']'))
            .and_then(|(inner, _)| inner.parse::<FactIndex>().ok());
        let Some(tag) = tag else {
            return Err(TurnParseError::MalformedSpan {
                message: format!("span ending at byte {content_end} is not followed by an [X.Y] tag"),
            });
        };
        spans.push(SpanRef {
            content: (content_start, content_end),
            text: inner.to_string(),
            tag,
        });
        cursor = after;
    }
    Ok(spans)
}

/// Leading `[X.Y]` index of a history entry like `"[3.2] talked to
/// someone"`, if present.
pub fn entry_index(entry: &str) -> Option<FactIndex> {
    let trimmed = entry.trim_start();
    let rest = trimmed.strip_prefix('[')?;
    let (inner, _) = rest.split_once(']')?;
    inner.parse().ok()
}

impl SimulatorTurn {
    /// Indices declared in `relevant_medical_history`.
    pub fn relevant_indices(&self) -> BTreeSet<FactIndex> {
        self.relevant_medical_history
            .iter()
            .filter_map(|e| entry_index(e))
            .collect()
    }

    /// Tags cited anywhere in the response.
    pub fn response_tags(&self) -> Vec<TagRef> {
        extract_tags(&self.response)
    }

    /// Validated spans of the response.
    pub fn spans(&self) -> Result<Vec<SpanRef>, TurnParseError> {
        extract_spans(&self.response)
    }

    /// Canonical serialized form (stable field order).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("turn serializes")
    }
}

/// Pulls the first JSON object out of a raw model reply, tolerating
/// markdown fences and surrounding prose.
fn extract_json_object(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

/// Parses and validates one simulator reply.
pub fn parse_simulator_turn(raw: &str) -> Result<SimulatorTurn, TurnParseError> {
    let object_text =
        extract_json_object(raw).ok_or_else(|| TurnParseError::Unparseable {
            message: "no JSON object found".to_string(),
            raw: raw.to_string(),
        })?;
    let value: serde_json::Value =
        serde_json::from_str(object_text).map_err(|e| TurnParseError::Unparseable {
            message: e.to_string(),
            raw: raw.to_string(),
        })?;
    let obj = value.as_object().ok_or_else(|| TurnParseError::Unparseable {
        message: "payload is not a JSON object".to_string(),
        raw: raw.to_string(),
    })?;

    let string_list = |field: &'static str| -> Result<Vec<String>, TurnParseError> {
        let entries = obj
            .get(field)
            .and_then(|v| v.as_array())
            .ok_or(TurnParseError::MissingField {
                field,
                raw: raw.to_string(),
            })?;
        entries
            .iter()
            .map(|v| {
                v.as_str().map(str::to_string).ok_or(TurnParseError::MissingField {
                    field,
                    raw: raw.to_string(),
                })
            })
            .collect()
    };

    let relevant = string_list("relevant_medical_history")?;
    let styled = string_list("style_transferred_medical_history")?;
    let response = obj
        .get("response")
        .and_then(|v| v.as_str())
        .ok_or(TurnParseError::MissingField {
            field: "response",
            raw: raw.to_string(),
        })?
        .to_string();

    let turn = SimulatorTurn {
        relevant_medical_history: relevant,
        style_transferred_medical_history: styled,
        response,
    };

    turn.spans()?;
    let declared = turn.relevant_indices();
    let dangling: Vec<String> = turn
        .response_tags()
        .iter()
        .filter(|t| !declared.contains(&t.index))
        .map(|t| t.index.to_string())
        .collect();
    if !dangling.is_empty() {
        return Err(TurnParseError::DanglingIndex { indices: dangling });
    }
    Ok(turn)
}
