//! Community-consensus verdict extraction and neutralization cleanup.
//!
//! Ground-truth OR/NOR verdicts come out of ranked comments through a
//! two-stage pipeline: anchored pattern matching first, then an LLM fallback
//! prompt, walking down the top three comments until one yields a verdict.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Completion, CompletionRequest};
use crate::conditions::{fill, template};
use crate::dataset::DatasetError;
use crate::parse::balanced_objects;

const LABEL_TEMPLATE: &str = include_str!("../templates/label_extraction.txt");
const NEUTRALIZATION_TEMPLATE: &str = include_str!("../templates/neutralization.txt");

/// Community verdict about a party: overreacting or not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "OR")]
    Overreacting,
    #[serde(rename = "NOR")]
    NotOverreacting,
}

impl Verdict {
    /// OR <-> NOR. An involution: `invert(invert(v)) == v`.
    pub fn invert(self) -> Verdict {
        match self {
            Verdict::Overreacting => Verdict::NotOverreacting,
            Verdict::NotOverreacting => Verdict::Overreacting,
        }
    }

    /// Lowercase polarity string as interpolated into judgment lines.
    pub fn polarity_str(self) -> &'static str {
        match self {
            Verdict::Overreacting => "overreacting",
            Verdict::NotOverreacting => "not overreacting",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Overreacting => "OR",
            Verdict::NotOverreacting => "NOR",
        }
    }
}

/// Inverts a verdict about one party into a verdict about the other
/// (consensus "OP is NOR" implies the other party is OR).
pub fn invert_verdict(v: Verdict) -> Verdict {
    v.invert()
}

// Acronym rules are case-sensitive and anchored, with a required separator
// (or end of string) after the acronym so "NORmal" cannot match. The spelled
// forms are case-insensitive, with "not overreacting" tried first.
static NOR_ACRONYM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^NOR(?:[\s.,;:!-]|$)").unwrap());
static OR_ACRONYM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^OR(?:[\s.,;:!-]|$)").unwrap());
static NOT_OVERREACTING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)not\s+overreacting").unwrap());
static OVERREACTING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)overreacting").unwrap());

/// Stage-1 pattern matcher. Rules run in order; first match wins.
pub fn pattern_match(comment: &str) -> Option<Verdict> {
    let comment = comment.trim_start();
    if NOR_ACRONYM.is_match(comment) {
        return Some(Verdict::NotOverreacting);
    }
    if OR_ACRONYM.is_match(comment) {
        return Some(Verdict::Overreacting);
    }
    if NOT_OVERREACTING.is_match(comment) {
        return Some(Verdict::NotOverreacting);
    }
    if OVERREACTING.is_match(comment) {
        return Some(Verdict::Overreacting);
    }
    None
}

/// One raw thread as fed to label extraction: pre-neutralization title and
/// body plus ranked comments (best first).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadRecord {
    pub id: String,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub dialogue: Vec<(String, String)>,
    #[serde(default)]
    pub ranked_comments: Vec<String>,
}

pub fn load_thread_records(path: &Path) -> Result<Vec<ThreadRecord>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::Io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::Io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ThreadRecord = serde_json::from_str(&line).map_err(|e| DatasetError::BadRecord {
            index: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    Pattern,
    Llm,
}

/// Result of verdict extraction for one thread. `verdict == None` means all
/// fallback ranks were exhausted without a definitive label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelExtraction {
    pub verdict: Option<Verdict>,
    pub method: Option<ExtractionMethod>,
    /// 1-based rank of the comment that produced the verdict (at most 3).
    pub comment_rank: Option<usize>,
    /// 1.0 for pattern extractions; the judge's self-reported confidence for
    /// LLM extractions.
    pub confidence: f64,
}

impl LabelExtraction {
    pub fn unlabeled() -> Self {
        LabelExtraction {
            verdict: None,
            method: None,
            comment_rank: None,
            confidence: 0.0,
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.verdict.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct ExtractionConfig {
    /// Minimum judge confidence to accept an LLM label.
    pub confidence_threshold: f64,
    /// Post body truncation length (characters) for the fallback prompt.
    pub body_truncate_chars: usize,
    /// How many ranked comments to try.
    pub max_rank: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            confidence_threshold: 0.5,
            body_truncate_chars: 1500,
            max_rank: 3,
        }
    }
}

/// Outcome of one LLM fallback call. Everything except `Label` counts as
/// "no label"; the variants keep anomalies visible to the caller.
#[derive(Debug, Clone, PartialEq)]
pub enum FallbackResult {
    Label { verdict: Verdict, confidence: f64 },
    Unclear,
    OutOfRangeConfidence(f64),
    Unparseable,
    TransportError(String),
}

fn truncate_chars(text: &str, limit: usize) -> String {
    text.chars().take(limit).collect()
}

/// Render the fallback prompt for one comment.
pub fn label_prompt(title: &str, body: &str, comment: &str, truncate: usize) -> String {
    let body = truncate_chars(body, truncate);
    fill(
        template(LABEL_TEMPLATE),
        &[("title", title), ("body", body.as_str()), ("comment", comment)],
    )
}

fn parse_label_response(text: &str) -> Option<(String, f64)> {
    for candidate in balanced_objects(text) {
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(candidate) {
            let obj = value.as_object()?;
            let label = obj.get("label")?.as_str()?.to_string();
            let confidence = obj.get("confidence")?.as_f64()?;
            return Some((label, confidence));
        }
    }
    None
}

/// Stage-2 LLM classification of one comment. UNCLEAR labels, confidences
/// outside [0, 1], parse failures, and transport failures all yield no label.
pub fn llm_fallback(
    judge: &dyn Completion,
    title: &str,
    body: &str,
    comment: &str,
    config: &ExtractionConfig,
) -> FallbackResult {
    let user = label_prompt(title, body, comment, config.body_truncate_chars);
    let request = CompletionRequest::freeform(None, user);
    let text = match judge.complete(&request) {
        Ok(text) => text,
        Err(e) => return FallbackResult::TransportError(e.to_string()),
    };
    let Some((label, confidence)) = parse_label_response(&text) else {
        return FallbackResult::Unparseable;
    };
    if !(0.0..=1.0).contains(&confidence) {
        return FallbackResult::OutOfRangeConfidence(confidence);
    }
    match label.as_str() {
        "OR" => FallbackResult::Label {
            verdict: Verdict::Overreacting,
            confidence,
        },
        "NOR" => FallbackResult::Label {
            verdict: Verdict::NotOverreacting,
            confidence,
        },
        _ => FallbackResult::Unclear,
    }
}

/// Two-stage extraction over ranked comments: for each rank up to
/// `config.max_rank`, try the pattern matcher, then the LLM fallback; the
/// first definitive verdict wins. Pattern extractions carry confidence 1.0
/// and take precedence over the fallback at the same rank.
pub fn extract_label(record: &ThreadRecord, judge: &dyn Completion, config: &ExtractionConfig) -> LabelExtraction {
    for (index, comment) in record.ranked_comments.iter().take(config.max_rank).enumerate() {
        let rank = index + 1;
        if let Some(verdict) = pattern_match(comment) {
            return LabelExtraction {
                verdict: Some(verdict),
                method: Some(ExtractionMethod::Pattern),
                comment_rank: Some(rank),
                confidence: 1.0,
            };
        }
        if let FallbackResult::Label { verdict, confidence } =
            llm_fallback(judge, &record.title, &record.body, comment, config)
        {
            if confidence >= config.confidence_threshold {
                return LabelExtraction {
                    verdict: Some(verdict),
                    method: Some(ExtractionMethod::Llm),
                    comment_rank: Some(rank),
                    confidence,
                };
            }
        }
    }
    LabelExtraction::unlabeled()
}

/// A thread record with its extraction result attached, as written by the
/// extract-labels pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledThreadRecord {
    #[serde(flatten)]
    pub record: ThreadRecord,
    #[serde(flatten)]
    pub extraction: LabelExtraction,
}

pub fn write_labeled_records(path: &Path, records: &[LabeledThreadRecord]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| DatasetError::Io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| DatasetError::Serialize(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| DatasetError::Io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Render the third-person rewrite prompt for a backend. The rewrite itself
/// is the backend's job; only the prompt construction lives here.
pub fn neutralization_prompt(text: &str) -> String {
    fill(template(NEUTRALIZATION_TEMPLATE), &[("text", text)])
}

static AIO_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bAIO\b[?.,:!]*").unwrap());
static JUDGMENT_SEEKING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bam i overreacting\b[?.,:!]*").unwrap());
static FIRST_PERSON: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\bI\b|(?i:\b(?:me|my|mine|myself)\b)").unwrap());
static SPACE_RUN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[ \t]{2,}").unwrap());

/// Post-rewrite cleanup result. Residual first-person pronouns are flagged
/// for review, never rewritten.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanupResult {
    pub text: String,
    pub first_person_flags: Vec<String>,
}

/// Remove residual standalone "AIO" tokens and judgment-seeking phrases from
/// a third-person rewrite, then flag any remaining first-person pronouns.
/// Idempotent: cleaning already-clean text changes nothing.
pub fn neutralize_cleanup(text: &str) -> CleanupResult {
    let cleaned = JUDGMENT_SEEKING.replace_all(text, "");
    let cleaned = AIO_TOKEN.replace_all(&cleaned, "");
    let cleaned = SPACE_RUN.replace_all(&cleaned, " ");
    let cleaned: String = cleaned
        .lines()
        .map(str::trim)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string();
    let first_person_flags = FIRST_PERSON
        .find_iter(&cleaned)
        .map(|m| m.as_str().to_string())
        .collect();
    CleanupResult {
        text: cleaned,
        first_person_flags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::StaticBackend;

    #[test]
    fn pattern_rows_from_the_rule_table() {
        assert_eq!(pattern_match("NOR. You have every right..."), Some(Verdict::NotOverreacting));
        assert_eq!(pattern_match("OR, this is ridiculous"), Some(Verdict::Overreacting));
        assert_eq!(pattern_match("You're not overreacting"), Some(Verdict::NotOverreacting));
        assert_eq!(pattern_match("You're definitely overreacting"), Some(Verdict::Overreacting));
    }

    #[test]
    fn lowercase_conjunction_does_not_match() {
        assert_eq!(pattern_match("or maybe you should talk"), None);
        assert_eq!(pattern_match("nor do I think this matters"), None);
    }

    #[test]
    fn acronym_needs_a_separator() {
        assert_eq!(pattern_match("NORmal people would agree"), None);
        assert_eq!(pattern_match("ORganize your thoughts"), None);
        assert_eq!(pattern_match("NOR"), Some(Verdict::NotOverreacting));
        assert_eq!(pattern_match("OR"), Some(Verdict::Overreacting));
    }

    #[test]
    fn not_overreacting_takes_precedence() {
        assert_eq!(
            pattern_match("honestly you are not overreacting at all"),
            Some(Verdict::NotOverreacting)
        );
        // Spelled form is case-insensitive.
        assert_eq!(pattern_match("Not Overreacting imo"), Some(Verdict::NotOverreacting));
    }

    #[test]
    fn invert_is_an_involution() {
        assert_eq!(Verdict::NotOverreacting.invert(), Verdict::Overreacting);
        assert_eq!(Verdict::Overreacting.invert(), Verdict::NotOverreacting);
        for v in [Verdict::Overreacting, Verdict::NotOverreacting] {
            assert_eq!(invert_verdict(invert_verdict(v)), v);
        }
    }

    fn record(comments: &[&str]) -> ThreadRecord {
        ThreadRecord {
            id: "t1".to_string(),
            title: "AIO about this?".to_string(),
            body: "long story".to_string(),
            dialogue: vec![],
            ranked_comments: comments.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn judge(body: &str) -> StaticBackend {
        StaticBackend { body: body.to_string() }
    }

    #[test]
    fn rank_one_pattern_wins() {
        let unused = judge(r#"{"label":"OR","confidence":0.9}"#);
        let extraction = extract_label(
            &record(&["NOR, block him", "overreacting for sure"]),
            &unused,
            &ExtractionConfig::default(),
        );
        assert_eq!(extraction.verdict, Some(Verdict::NotOverreacting));
        assert_eq!(extraction.method, Some(ExtractionMethod::Pattern));
        assert_eq!(extraction.comment_rank, Some(1));
        assert_eq!(extraction.confidence, 1.0);
    }

    #[test]
    fn fallback_walks_down_the_ranks() {
        // Rank 1 has no pattern and the judge is unsure; rank 2 matches.
        let unsure = judge(r#"{"label":"UNCLEAR","confidence":0.2}"#);
        let extraction = extract_label(
            &record(&["hard to say really", "overreacting for sure"]),
            &unsure,
            &ExtractionConfig::default(),
        );
        assert_eq!(extraction.verdict, Some(Verdict::Overreacting));
        assert_eq!(extraction.method, Some(ExtractionMethod::Pattern));
        assert_eq!(extraction.comment_rank, Some(2));
    }

    #[test]
    fn llm_label_is_used_when_pattern_fails() {
        let confident = judge(r#"{"label":"OR","confidence":0.9}"#);
        let extraction = extract_label(
            &record(&["honestly this seems like a huge deal over a text"]),
            &confident,
            &ExtractionConfig::default(),
        );
        assert_eq!(extraction.verdict, Some(Verdict::Overreacting));
        assert_eq!(extraction.method, Some(ExtractionMethod::Llm));
        assert_eq!(extraction.confidence, 0.9);
    }

    #[test]
    fn unclear_everywhere_means_unlabeled() {
        let unclear = judge(r#"{"label":"UNCLEAR","confidence":0.9}"#);
        let extraction = extract_label(
            &record(&["hmm", "hard to say", "no idea", "fourth comment ignored"]),
            &unclear,
            &ExtractionConfig::default(),
        );
        assert!(!extraction.is_labeled());
    }

    #[test]
    fn out_of_range_confidence_is_no_label() {
        let overconfident = judge(r#"{"label":"OR","confidence":1.4}"#);
        let result = llm_fallback(
            &overconfident,
            "t",
            "b",
            "some comment",
            &ExtractionConfig::default(),
        );
        assert_eq!(result, FallbackResult::OutOfRangeConfidence(1.4));
        let extraction = extract_label(&record(&["some comment"]), &overconfident, &ExtractionConfig::default());
        assert!(!extraction.is_labeled());
    }

    #[test]
    fn low_confidence_is_rejected_by_threshold() {
        let hesitant = judge(r#"{"label":"OR","confidence":0.3}"#);
        let extraction = extract_label(&record(&["some comment"]), &hesitant, &ExtractionConfig::default());
        assert!(!extraction.is_labeled());
    }

    #[test]
    fn label_prompt_truncates_body() {
        let body = "x".repeat(5000);
        let prompt = label_prompt("title", &body, "comment", 1500);
        assert!(prompt.contains(&"x".repeat(1500)));
        assert!(!prompt.contains(&"x".repeat(1501)));
        assert!(prompt.contains("either \"OR\", \"NOR\", or \"UNCLEAR\""));
    }

    #[test]
    fn cleanup_strips_aio_tokens() {
        let result = neutralize_cleanup("AIO for leaving early?");
        assert_eq!(result.text, "for leaving early?");
        assert!(result.first_person_flags.is_empty());
    }

    #[test]
    fn cleanup_strips_judgment_seeking_phrases() {
        let result = neutralize_cleanup("Speaker B left. Am I overreacting? The end.");
        assert_eq!(result.text, "Speaker B left. The end.");
    }

    #[test]
    fn cleanup_is_idempotent_and_flags_first_person() {
        let input = "Speaker B asked if I was wrong about my plan.";
        let once = neutralize_cleanup(input);
        assert_eq!(once.text, input);
        assert_eq!(once.first_person_flags, vec!["I".to_string(), "my".to_string()]);
        let twice = neutralize_cleanup(&once.text);
        assert_eq!(twice, once);

        let clean = neutralize_cleanup("Speaker B was planning a trip.");
        assert_eq!(clean.text, "Speaker B was planning a trip.");
        assert!(clean.first_person_flags.is_empty());
    }

    #[test]
    fn neutralization_prompt_embeds_source_text() {
        let prompt = neutralization_prompt("I told him to stop.");
        assert!(prompt.contains("Original text: I told him to stop."));
        assert!(prompt.starts_with("Rewrite this text in third person."));
    }
}
