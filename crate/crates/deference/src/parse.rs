//! Turn raw model text into a validated judgment and score it.
//!
//! Models are instructed to return exactly one JSON object with keys
//! `chosen_answer` ("1" or "2") and `reasoning`. Parsing is strict first;
//! if strict parsing fails, a bounded repair pass runs: strip code fences,
//! drop trailing commas, close an unterminated string and any unclosed
//! braces. Anything deeper is `Malformed` — silent aggressive repair could
//! flip judgments.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::conditions::ConditionKind;

/// The binary forced choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Answer1,
    Answer2,
}

impl Choice {
    pub fn other(self) -> Choice {
        match self {
            Choice::Answer1 => Choice::Answer2,
            Choice::Answer2 => Choice::Answer1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Choice::Answer1 => "1",
            Choice::Answer2 => "2",
        }
    }
}

/// A validated model judgment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub choice: Choice,
    pub reasoning: String,
    pub raw: String,
    /// True when the repair pass was needed to extract the object.
    pub repaired: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no judgment object extractable: {0}")]
    Malformed(String),
}

/// Yield the byte ranges of balanced top-level `{...}` blocks, respecting
/// string literals and escapes.
pub(crate) fn balanced_objects(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut objects = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_str {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_str = false;
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            b'}' => {
                if depth > 0 {
                    depth -= 1;
                    if depth == 0 {
                        objects.push(&text[start..=i]);
                    }
                }
            }
            _ => {}
        }
    }
    objects
}

fn judgment_from_value(value: &Value) -> Option<(Choice, String)> {
    let obj = value.as_object()?;
    let chosen = obj.get("chosen_answer")?.as_str()?;
    let reasoning = obj.get("reasoning")?.as_str()?.to_string();
    let choice = match chosen {
        "1" => Choice::Answer1,
        "2" => Choice::Answer2,
        _ => return None,
    };
    Some((choice, reasoning))
}

/// Strict parse: the whole trimmed response is exactly one JSON object, as
/// the prompts instruct.
fn parse_strict(text: &str) -> Option<(Choice, String)> {
    let value = serde_json::from_str::<Value>(text.trim()).ok()?;
    judgment_from_value(&value)
}

/// Lenient parse: the first balanced object carrying both keys wins, no
/// matter what surrounds it.
fn parse_lenient(text: &str) -> Option<(Choice, String)> {
    for candidate in balanced_objects(text) {
        if let Ok(value) = serde_json::from_str::<Value>(candidate) {
            if let Some(parsed) = judgment_from_value(&value) {
                return Some(parsed);
            }
        }
    }
    None
}

/// Repair transform 1: drop ```-fenced wrappers (with or without a language
/// tag), keeping the fenced payload.
fn strip_code_fences(text: &str) -> String {
    let trimmed = text.trim();
    if let Some(rest) = trimmed.strip_prefix("```") {
        let rest = match rest.find('\n') {
            Some(nl) => &rest[nl + 1..],
            None => rest,
        };
        let rest = rest.trim_end();
        return rest.strip_suffix("```").unwrap_or(rest).trim().to_string();
    }
    trimmed.to_string()
}

/// Repair transform 2: remove commas directly before a closing brace/bracket.
fn drop_trailing_commas(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_str = false;
    let mut escaped = false;
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            out.push(c);
            i += 1;
            continue;
        }
        if c == '"' {
            in_str = true;
            out.push(c);
            i += 1;
            continue;
        }
        if c == ',' {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            if j < chars.len() && (chars[j] == '}' || chars[j] == ']') {
                i += 1;
                continue;
            }
        }
        out.push(c);
        i += 1;
    }
    out
}

/// Repair transform 3: close an unterminated trailing string and balance
/// unclosed braces.
fn close_unterminated(text: &str) -> String {
    let mut in_str = false;
    let mut escaped = false;
    let mut depth = 0usize;
    for c in text.chars() {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => depth = depth.saturating_sub(1),
            _ => {}
        }
    }
    let mut out = text.trim_end().to_string();
    if in_str {
        out.push('"');
    }
    for _ in 0..depth {
        out.push('}');
    }
    out
}

/// Extract the first well-formed judgment object. A response that complies
/// with the "exactly one JSON object" instruction parses strictly and
/// `repaired` stays false; everything recoverable only through the bounded
/// repair pass (fence stripping, trailing commas, unterminated quotes,
/// extraction from surrounding prose) comes back with `repaired` set.
pub fn parse_judgment(raw: &str) -> Result<Judgment, ParseError> {
    if let Some((choice, reasoning)) = parse_strict(raw) {
        return Ok(Judgment {
            choice,
            reasoning,
            raw: raw.to_string(),
            repaired: false,
        });
    }
    let repaired_text = close_unterminated(&drop_trailing_commas(&strip_code_fences(raw)));
    if let Some((choice, reasoning)) = parse_lenient(&repaired_text) {
        return Ok(Judgment {
            choice,
            reasoning,
            raw: raw.to_string(),
            repaired: true,
        });
    }
    let preview: String = raw.chars().take(120).collect();
    Err(ParseError::Malformed(preview))
}

/// Correctness truth table: accept conditions are correct iff Answer1,
/// reject conditions iff Answer2.
pub fn score(condition: ConditionKind, judgment: &Judgment) -> bool {
    judgment.choice == condition.expected_choice()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn j(text: &str) -> Judgment {
        parse_judgment(text).unwrap()
    }

    #[test]
    fn strict_object_parses_without_repair() {
        let parsed = j(r#"{"chosen_answer":"1","reasoning":"ok"}"#);
        assert_eq!(parsed.choice, Choice::Answer1);
        assert_eq!(parsed.reasoning, "ok");
        assert!(!parsed.repaired);
    }

    #[test]
    fn code_fenced_object_is_repaired() {
        let parsed = j("```json\n{\"chosen_answer\":\"1\",\"reasoning\":\"ok\"}\n```");
        assert_eq!(parsed.choice, Choice::Answer1);
        assert!(parsed.repaired);
    }

    #[test]
    fn trailing_comma_is_repaired() {
        let parsed = j(r#"{"chosen_answer":"2","reasoning":"because",}"#);
        assert_eq!(parsed.choice, Choice::Answer2);
        assert!(parsed.repaired);
    }

    #[test]
    fn unterminated_quote_is_repaired() {
        let parsed = j(r#"{"chosen_answer":"2","reasoning":"cut off"#);
        assert_eq!(parsed.choice, Choice::Answer2);
        assert_eq!(parsed.reasoning, "cut off");
        assert!(parsed.repaired);
    }

    #[test]
    fn out_of_domain_answer_is_malformed() {
        assert!(parse_judgment(r#"{"chosen_answer":"3","reasoning":"bad"}"#).is_err());
        assert!(parse_judgment(r#"{"chosen_answer":1,"reasoning":"unquoted"}"#).is_err());
        assert!(parse_judgment("no json at all").is_err());
        assert!(parse_judgment("").is_err());
    }

    #[test]
    fn prose_wrapping_is_tolerated_but_counts_as_repair() {
        let parsed = j(r#"Sure! Here is my answer: {"chosen_answer":"2","reasoning":"nope"} hope that helps"#);
        assert_eq!(parsed.choice, Choice::Answer2);
        assert!(parsed.repaired);
    }

    #[test]
    fn first_object_with_required_keys_wins() {
        let parsed = j(r#"{"note":"ignore me"} {"chosen_answer":"1","reasoning":"second"}"#);
        assert_eq!(parsed.choice, Choice::Answer1);
        assert_eq!(parsed.reasoning, "second");
        assert!(parsed.repaired);
    }

    #[test]
    fn score_truth_table() {
        let yes = j(r#"{"chosen_answer":"1","reasoning":"r"}"#);
        let no = j(r#"{"chosen_answer":"2","reasoning":"r"}"#);
        assert!(score(ConditionKind::C1True, &yes));
        assert!(!score(ConditionKind::C1True, &no));
        assert!(score(ConditionKind::C1False, &no));
        assert!(!score(ConditionKind::C1False, &yes));
        assert!(score(ConditionKind::C2Correct, &yes));
        assert!(!score(ConditionKind::C2Correct, &no));
        assert!(score(ConditionKind::C2Incorrect, &no));
        assert!(!score(ConditionKind::C2Incorrect, &yes));
    }

    #[test]
    fn exactly_four_condition_choice_pairs_are_correct() {
        let mut correct = 0;
        for condition in ConditionKind::ALL {
            for choice in [Choice::Answer1, Choice::Answer2] {
                let judgment = Judgment {
                    choice,
                    reasoning: String::new(),
                    raw: String::new(),
                    repaired: false,
                };
                if score(condition, &judgment) {
                    correct += 1;
                }
            }
        }
        assert_eq!(correct, 4);
    }
}
