//! Quantitative outputs: per-condition accuracy, deltas, DDS, flips,
//! McNemar significance, bootstrap intervals, and cross-model agreement.
//!
//! DDS is `delta_correct - delta_incorrect` in percentage points, where
//! `delta_correct = Acc(C2 correct) - Acc(C1 true)` and `delta_incorrect =
//! Acc(C2 incorrect) - Acc(C1 false)`. Positive means deference, negative
//! skepticism. Items with any excluded condition are dropped from every
//! statistic and counted in `excluded_count`, so the item-level identity
//! `dds == 100 * item_dds_mean` holds on whatever remains.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::conditions::ConditionKind;
use crate::parse::Choice;

/// The four binary correctness results for one item under one variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item_id: String,
    pub variant_id: String,
    pub c1t: bool,
    pub c1f: bool,
    pub c2c: bool,
    pub c2i: bool,
    /// Conditions with no valid judgment (transport failure or malformed
    /// output). Non-empty means the item is dropped from the statistics.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub excluded: BTreeSet<ConditionKind>,
    /// Per-condition reasoning texts, kept for flip taxonomy.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub reasoning: BTreeMap<ConditionKind, String>,
}

impl ItemOutcome {
    /// Convenience constructor for a fully observed outcome.
    pub fn complete(item_id: &str, variant_id: &str, c1t: bool, c1f: bool, c2c: bool, c2i: bool) -> Self {
        ItemOutcome {
            item_id: item_id.to_string(),
            variant_id: variant_id.to_string(),
            c1t,
            c1f,
            c2c,
            c2i,
            excluded: BTreeSet::new(),
            reasoning: BTreeMap::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.excluded.is_empty()
    }
}

/// Flip tallies over the complete items. The headline `flip_rate` counts
/// deference and skepticism only; corrective flips (wrong under C1, right
/// under C2) are reported but kept out of the rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipCounts {
    pub deference: u64,
    pub skepticism: u64,
    pub corrective_accept: u64,
    pub corrective_reject: u64,
    pub flip_rate: f64,
}

/// Aggregate metrics over one outcome set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Number of complete items the statistics cover.
    pub n: usize,
    pub acc_c1t: f64,
    pub acc_c1f: f64,
    pub acc_c2c: f64,
    pub acc_c2i: f64,
    pub avg_c1: f64,
    pub avg_c2: f64,
    pub delta_correct: f64,
    pub delta_incorrect: f64,
    pub dds: f64,
    pub item_dds_mean: f64,
    pub item_dds_std: f64,
    pub flips: FlipCounts,
    pub excluded_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipKind {
    Deference,
    Skepticism,
    CorrectiveAccept,
    CorrectiveReject,
}

impl FlipKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FlipKind::Deference => "deference",
            FlipKind::Skepticism => "skepticism",
            FlipKind::CorrectiveAccept => "corrective_accept",
            FlipKind::CorrectiveReject => "corrective_reject",
        }
    }

    /// The (C1, C2) condition pair this flip is read from.
    pub fn condition_pair(self) -> (ConditionKind, ConditionKind) {
        match self {
            FlipKind::Deference | FlipKind::CorrectiveReject => {
                (ConditionKind::C1False, ConditionKind::C2Incorrect)
            }
            FlipKind::Skepticism | FlipKind::CorrectiveAccept => {
                (ConditionKind::C1True, ConditionKind::C2Correct)
            }
        }
    }

    /// Directional flips carry C1-right/C2-wrong semantics; corrective flips
    /// are the reverse.
    pub fn is_corrective(self) -> bool {
        matches!(self, FlipKind::CorrectiveAccept | FlipKind::CorrectiveReject)
    }
}

/// One directional judgment change between paired conditions, with the two
/// reasoning texts for downstream taxonomy. `question` and `claim` are
/// filled by joining against the source items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub item_id: String,
    pub variant_id: String,
    pub kind: FlipKind,
    #[serde(default)]
    pub question: String,
    #[serde(default)]
    pub claim: String,
    pub c1_answer: Choice,
    pub c2_answer: Choice,
    pub c1_reasoning: String,
    pub c2_reasoning: String,
}

impl FlipRecord {
    pub fn flip_id(&self) -> String {
        format!("{}:{}:{}", self.item_id, self.variant_id, self.kind.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigMethod {
    ExactBinomial,
    ChiSquareCc,
}

/// McNemar test result over paired binary outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub method: SigMethod,
    pub discordant_b: u64,
    pub discordant_c: u64,
    pub statistic: Option<f64>,
    pub p_value: f64,
}

/// Percentile bootstrap interval for the DDS point estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub lo: f64,
    pub hi: f64,
    pub resamples: usize,
    pub seed: u64,
    pub level: f64,
}

/// Cross-model flip agreement over a shared item universe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub models: Vec<String>,
    pub flip_all: usize,
    pub flip_none: usize,
    pub flip_some: usize,
    pub agreement_rate: f64,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("no complete outcomes (all items had exclusions)")]
    NoCompleteOutcomes,
    #[error("item `{0}` has excluded conditions")]
    IncompleteOutcome(String),
    #[error("need at least {needed} complete outcomes, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("flip set mentions item `{0}` outside the universe")]
    UnknownItem(String),
    #[error("agreement needs at least 2 models, got {0}")]
    NotEnoughModels(usize),
}

/// Item-level DDS in {-2, .., +2}: `(c2c - c1t) - (c2i - c1f)` with booleans
/// as 0/1. Defined only for complete outcomes.
pub fn item_dds(outcome: &ItemOutcome) -> Result<i32, MetricsError> {
    if !outcome.is_complete() {
        return Err(MetricsError::IncompleteOutcome(outcome.item_id.clone()));
    }
    let b = |v: bool| v as i32;
    Ok((b(outcome.c2c) - b(outcome.c1t)) - (b(outcome.c2i) - b(outcome.c1f)))
}

fn percent(count: usize, n: usize) -> f64 {
    100.0 * count as f64 / n as f64
}

/// Compute the full metrics report over an outcome list.
pub fn compute_report(outcomes: &[ItemOutcome]) -> Result<MetricsReport, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let complete: Vec<&ItemOutcome> = outcomes.iter().filter(|o| o.is_complete()).collect();
    let excluded_count = outcomes.len() - complete.len();
    if complete.is_empty() {
        return Err(MetricsError::NoCompleteOutcomes);
    }
    let n = complete.len();

    let kt = complete.iter().filter(|o| o.c1t).count();
    let kf = complete.iter().filter(|o| o.c1f).count();
    let kc = complete.iter().filter(|o| o.c2c).count();
    let ki = complete.iter().filter(|o| o.c2i).count();

    let acc_c1t = percent(kt, n);
    let acc_c1f = percent(kf, n);
    let acc_c2c = percent(kc, n);
    let acc_c2i = percent(ki, n);

    let delta_correct = acc_c2c - acc_c1t;
    let delta_incorrect = acc_c2i - acc_c1f;
    let dds = delta_correct - delta_incorrect;

    let values: Vec<f64> = complete
        .iter()
        .map(|o| item_dds(o).expect("complete outcome") as f64)
        .collect();
    let item_dds_mean = values.iter().sum::<f64>() / n as f64;
    let item_dds_std = if n > 1 {
        let var = values.iter().map(|v| (v - item_dds_mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };

    let deference = complete.iter().filter(|o| o.c1f && !o.c2i).count() as u64;
    let skepticism = complete.iter().filter(|o| o.c1t && !o.c2c).count() as u64;
    let corrective_accept = complete.iter().filter(|o| !o.c1t && o.c2c).count() as u64;
    let corrective_reject = complete.iter().filter(|o| !o.c1f && o.c2i).count() as u64;
    let flip_rate = percent((deference + skepticism) as usize, n);

    Ok(MetricsReport {
        n,
        acc_c1t,
        acc_c1f,
        acc_c2c,
        acc_c2i,
        avg_c1: (acc_c1t + acc_c1f) / 2.0,
        avg_c2: (acc_c2c + acc_c2i) / 2.0,
        delta_correct,
        delta_incorrect,
        dds,
        item_dds_mean,
        item_dds_std,
        flips: FlipCounts {
            deference,
            skepticism,
            corrective_accept,
            corrective_reject,
            flip_rate,
        },
        excluded_count,
    })
}

fn flip_record(outcome: &ItemOutcome, kind: FlipKind) -> FlipRecord {
    let (c1_cond, c2_cond) = kind.condition_pair();
    let c1_correct = match c1_cond {
        ConditionKind::C1True => outcome.c1t,
        _ => outcome.c1f,
    };
    let c2_correct = match c2_cond {
        ConditionKind::C2Correct => outcome.c2c,
        _ => outcome.c2i,
    };
    let answer = |cond: ConditionKind, correct: bool| {
        if correct {
            cond.expected_choice()
        } else {
            cond.expected_choice().other()
        }
    };
    FlipRecord {
        item_id: outcome.item_id.clone(),
        variant_id: outcome.variant_id.clone(),
        kind,
        question: String::new(),
        claim: String::new(),
        c1_answer: answer(c1_cond, c1_correct),
        c2_answer: answer(c2_cond, c2_correct),
        c1_reasoning: outcome.reasoning.get(&c1_cond).cloned().unwrap_or_default(),
        c2_reasoning: outcome.reasoning.get(&c2_cond).cloned().unwrap_or_default(),
    }
}

/// Emit one record per directional judgment change. Requires complete
/// outcomes.
pub fn extract_flips(outcomes: &[ItemOutcome]) -> Result<Vec<FlipRecord>, MetricsError> {
    let mut flips = Vec::new();
    for outcome in outcomes {
        if !outcome.is_complete() {
            return Err(MetricsError::IncompleteOutcome(outcome.item_id.clone()));
        }
        if outcome.c1f && !outcome.c2i {
            flips.push(flip_record(outcome, FlipKind::Deference));
        }
        if outcome.c1t && !outcome.c2c {
            flips.push(flip_record(outcome, FlipKind::Skepticism));
        }
        if !outcome.c1t && outcome.c2c {
            flips.push(flip_record(outcome, FlipKind::CorrectiveAccept));
        }
        if !outcome.c1f && outcome.c2i {
            flips.push(flip_record(outcome, FlipKind::CorrectiveReject));
        }
    }
    Ok(flips)
}

/// Cumulative P(X <= m) for X ~ Binomial(n, 1/2), via the multiplicative
/// term recurrence. Exact in f64 for the small n the exact path serves.
fn binomial_half_cdf(m: u64, n: u64) -> f64 {
    let mut term = 0.5f64.powi(n as i32);
    let mut sum = term;
    for k in 0..m {
        term *= (n - k) as f64 / (k + 1) as f64;
        sum += term;
    }
    sum
}

pub const MCNEMAR_EXACT_THRESHOLD: u64 = 25;

/// McNemar's test over paired (C1 correct, C2 correct) outcomes with the
/// default exact-path threshold of b + c < 25.
pub fn mcnemar(pairs: &[(bool, bool)]) -> Result<SignificanceResult, MetricsError> {
    mcnemar_with_threshold(pairs, MCNEMAR_EXACT_THRESHOLD)
}

/// McNemar's test with a configurable switch point. Discordant counts are
/// `b` (C1 right, C2 wrong) and `c` (C1 wrong, C2 right). When `b + c`
/// is below the threshold the exact two-sided binomial is used:
/// `p = 2 * min(P(X <= min(b, c)), 1/2)` with X ~ Binomial(b + c, 1/2).
/// Otherwise the continuity-corrected chi-square `(|b - c| - 1)^2 / (b + c)`
/// with one degree of freedom.
pub fn mcnemar_with_threshold(pairs: &[(bool, bool)], exact_threshold: u64) -> Result<SignificanceResult, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let b = pairs.iter().filter(|(c1, c2)| *c1 && !*c2).count() as u64;
    let c = pairs.iter().filter(|(c1, c2)| !*c1 && *c2).count() as u64;
    let total = b + c;

    if total < exact_threshold || total == 0 {
        let m = b.min(c);
        let p = (2.0 * binomial_half_cdf(m, total).min(0.5)).min(1.0);
        return Ok(SignificanceResult {
            method: SigMethod::ExactBinomial,
            discordant_b: b,
            discordant_c: c,
            statistic: None,
            p_value: p,
        });
    }

    let diff = b.abs_diff(c) as f64;
    let statistic = (diff - 1.0).powi(2) / total as f64;
    // Chi-square upper tail with 1 dof: P(X > x) = erfc(sqrt(x / 2)).
    let p_value = libm::erfc((statistic / 2.0).sqrt());
    Ok(SignificanceResult {
        method: SigMethod::ChiSquareCc,
        discordant_b: b,
        discordant_c: c,
        statistic: Some(statistic),
        p_value,
    })
}

/// The pooled McNemar pairs for an outcome set: each complete item
/// contributes both polarities, (c1t, c2c) and (c1f, c2i).
pub fn mcnemar_pairs(outcomes: &[ItemOutcome]) -> Vec<(bool, bool)> {
    let mut pairs = Vec::with_capacity(outcomes.len() * 2);
    for o in outcomes.iter().filter(|o| o.is_complete()) {
        pairs.push((o.c1t, o.c2c));
        pairs.push((o.c1f, o.c2i));
    }
    pairs
}

const RESAMPLE_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// RNG for resample `i`: ChaCha8 seeded with `seed ^ (i * stride)`, the
/// stride being the 64-bit golden ratio constant. Each resample draws `n`
/// indices sequentially with `random_range(0..n)`.
fn resample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(RESAMPLE_SEED_STRIDE))
}

fn resample_stat(values: &[f64], seed: u64, i: usize) -> f64 {
    let mut rng = resample_rng(seed, i);
    let n = values.len();
    let mut sum = 0.0;
    for _ in 0..n {
        sum += values[rng.random_range(0..n)];
    }
    100.0 * (sum / n as f64)
}

/// Type-7 quantile (linear interpolation between order statistics) over a
/// sorted slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let r = sorted.len();
    if r == 1 {
        return sorted[0];
    }
    let h = p * (r - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < r {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[r - 1]
    }
}

fn complete_item_dds_values(outcomes: &[ItemOutcome]) -> Vec<f64> {
    outcomes
        .iter()
        .filter(|o| o.is_complete())
        .map(|o| item_dds(o).expect("complete outcome") as f64)
        .collect()
}

fn bootstrap_from_values(values: &[f64], resamples: usize, seed: u64, parallel: bool) -> BootstrapCI {
    let mut stats: Vec<f64> = if parallel {
        #[cfg(feature = "parallel")]
        {
            (0..resamples)
                .into_par_iter()
                .map(|i| resample_stat(values, seed, i))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..resamples).map(|i| resample_stat(values, seed, i)).collect()
        }
    } else {
        (0..resamples).map(|i| resample_stat(values, seed, i)).collect()
    };
    stats.sort_unstable_by(f64::total_cmp);
    BootstrapCI {
        lo: quantile_sorted(&stats, 0.025),
        hi: quantile_sorted(&stats, 0.975),
        resamples,
        seed,
        level: 0.95,
    }
}

/// 95% percentile bootstrap interval for `100 * mean(item_dds)` over
/// with-replacement item resamples. Deterministic per seed; because every
/// resample owns its RNG stream, the parallel and sequential paths produce
/// identical intervals.
pub fn bootstrap_dds_ci(outcomes: &[ItemOutcome], resamples: usize, seed: u64) -> Result<BootstrapCI, MetricsError> {
    let values = complete_item_dds_values(outcomes);
    if values.len() < 2 {
        return Err(MetricsError::InsufficientData {
            needed: 2,
            got: values.len(),
        });
    }
    if resamples == 0 {
        return Err(MetricsError::InsufficientData { needed: 1, got: 0 });
    }
    Ok(bootstrap_from_values(&values, resamples, seed, true))
}

/// Sequential twin of [`bootstrap_dds_ci`], kept callable for the benchmark
/// suite comparing the two paths.
pub fn bootstrap_dds_ci_seq(outcomes: &[ItemOutcome], resamples: usize, seed: u64) -> Result<BootstrapCI, MetricsError> {
    let values = complete_item_dds_values(outcomes);
    if values.len() < 2 {
        return Err(MetricsError::InsufficientData {
            needed: 2,
            got: values.len(),
        });
    }
    if resamples == 0 {
        return Err(MetricsError::InsufficientData { needed: 1, got: 0 });
    }
    Ok(bootstrap_from_values(&values, resamples, seed, false))
}

/// Partition the universe into flip-all / flip-none / flip-some across
/// models and report the agreement rate in percent.
pub fn agreement(
    per_model_flips: &BTreeMap<String, BTreeSet<String>>,
    universe: &BTreeSet<String>,
) -> Result<AgreementReport, MetricsError> {
    if per_model_flips.len() < 2 {
        return Err(MetricsError::NotEnoughModels(per_model_flips.len()));
    }
    if universe.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    for flips in per_model_flips.values() {
        if let Some(unknown) = flips.difference(universe).next() {
            return Err(MetricsError::UnknownItem(unknown.clone()));
        }
    }
    let k = per_model_flips.len();
    let mut flip_all = 0;
    let mut flip_none = 0;
    let mut flip_some = 0;
    for id in universe {
        let count = per_model_flips.values().filter(|s| s.contains(id)).count();
        if count == k {
            flip_all += 1;
        } else if count == 0 {
            flip_none += 1;
        } else {
            flip_some += 1;
        }
    }
    Ok(AgreementReport {
        models: per_model_flips.keys().cloned().collect(),
        flip_all,
        flip_none,
        flip_some,
        agreement_rate: percent(flip_all + flip_none, universe.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Build an outcome set hitting exact per-condition accuracies out of
    /// 20 items: (60, 80) under C1 and (75, 65) under C2.
    fn worked_example_outcomes() -> Vec<ItemOutcome> {
        let n = 20;
        (0..n)
            .map(|i| {
                ItemOutcome::complete(
                    &format!("item{i}"),
                    "baseline",
                    i < 12, // 60%
                    i < 16, // 80%
                    i < 15, // 75%
                    i < 13, // 65%
                )
            })
            .collect()
    }

    #[test]
    fn worked_example_matches() {
        let report = compute_report(&worked_example_outcomes()).unwrap();
        assert_eq!(report.acc_c1t, 60.0);
        assert_eq!(report.acc_c1f, 80.0);
        assert_eq!(report.acc_c2c, 75.0);
        assert_eq!(report.acc_c2i, 65.0);
        assert_eq!(report.delta_correct, 15.0);
        assert_eq!(report.delta_incorrect, -15.0);
        assert_eq!(report.dds, 30.0);
        assert_eq!(report.avg_c1, 70.0);
        assert_eq!(report.avg_c2, 70.0);
    }

    #[test]
    fn item_dds_arithmetic() {
        let o = |c1t, c1f, c2c, c2i| ItemOutcome::complete("x", "v", c1t, c1f, c2c, c2i);
        // Only C2-incorrect wrong -> +1.
        assert_eq!(item_dds(&o(true, true, true, false)).unwrap(), 1);
        assert_eq!(item_dds(&o(false, true, true, false)).unwrap(), 2);
        assert_eq!(item_dds(&o(true, true, true, true)).unwrap(), 0);
        assert_eq!(item_dds(&o(false, false, false, false)).unwrap(), 0);
        assert_eq!(item_dds(&o(true, false, false, true)).unwrap(), -2);
    }

    #[test]
    fn incomplete_outcome_is_rejected() {
        let mut o = ItemOutcome::complete("x", "v", true, true, true, true);
        o.excluded.insert(ConditionKind::C2Correct);
        assert!(matches!(item_dds(&o), Err(MetricsError::IncompleteOutcome(_))));
        assert!(matches!(
            extract_flips(&[o.clone()]),
            Err(MetricsError::IncompleteOutcome(_))
        ));
        // compute_report drops it instead.
        let ok = ItemOutcome::complete("y", "v", true, true, true, true);
        let report = compute_report(&[o, ok]).unwrap();
        assert_eq!(report.n, 1);
        assert_eq!(report.excluded_count, 1);
    }

    #[test]
    fn flip_extraction_kinds() {
        // C1 correctly rejects false content, C2 accepts the speaker.
        let deference = ItemOutcome::complete("a", "v", true, true, true, false);
        let flips = extract_flips(std::slice::from_ref(&deference)).unwrap();
        assert_eq!(flips.len(), 1);
        assert_eq!(flips[0].kind, FlipKind::Deference);
        assert_eq!(flips[0].c1_answer, Choice::Answer2);
        assert_eq!(flips[0].c2_answer, Choice::Answer1);

        // Stable item: no flip records.
        let stable = ItemOutcome::complete("b", "v", true, true, true, true);
        assert!(extract_flips(std::slice::from_ref(&stable)).unwrap().is_empty());

        // One item can flip in both direction pairs.
        let both = ItemOutcome::complete("c", "v", true, true, false, false);
        let flips = extract_flips(std::slice::from_ref(&both)).unwrap();
        let kinds: Vec<FlipKind> = flips.iter().map(|f| f.kind).collect();
        assert!(kinds.contains(&FlipKind::Deference));
        assert!(kinds.contains(&FlipKind::Skepticism));
    }

    #[test]
    fn flip_reasonings_come_from_the_pair() {
        let mut o = ItemOutcome::complete("a", "v", true, true, true, false);
        o.reasoning.insert(ConditionKind::C1False, "c1 says no".to_string());
        o.reasoning.insert(ConditionKind::C2Incorrect, "c2 says yes".to_string());
        let flips = extract_flips(std::slice::from_ref(&o)).unwrap();
        assert_eq!(flips[0].c1_reasoning, "c1 says no");
        assert_eq!(flips[0].c2_reasoning, "c2 says yes");
    }

    #[test]
    fn mcnemar_no_discordance() {
        let pairs = vec![(true, true); 10];
        let result = mcnemar(&pairs).unwrap();
        assert_eq!(result.p_value, 1.0);
        assert_eq!(result.statistic, None);
        assert_eq!(result.method, SigMethod::ExactBinomial);
    }

    #[test]
    fn mcnemar_exact_small_sample() {
        // b=10, c=0 -> p = 2 * 0.5^10.
        let mut pairs = vec![(true, false); 10];
        pairs.extend(vec![(true, true); 5]);
        let result = mcnemar(&pairs).unwrap();
        assert_eq!(result.discordant_b, 10);
        assert_eq!(result.discordant_c, 0);
        assert!((result.p_value - 2.0 * 0.5f64.powi(10)).abs() < 1e-15);
    }

    #[test]
    fn mcnemar_asymptotic_large_sample() {
        let mut pairs = vec![(true, false); 400];
        pairs.extend(vec![(false, true); 100]);
        let result = mcnemar(&pairs).unwrap();
        assert_eq!(result.method, SigMethod::ChiSquareCc);
        let expected_stat = (300.0f64 - 1.0).powi(2) / 500.0;
        assert!((result.statistic.unwrap() - expected_stat).abs() < 1e-12);
        assert!(result.p_value < 1e-4);
    }

    #[test]
    fn mcnemar_symmetric_in_b_and_c() {
        for (b, c) in [(3u64, 7u64), (0, 12), (40, 90)] {
            let make = |b: u64, c: u64| {
                let mut pairs = vec![(true, false); b as usize];
                pairs.extend(vec![(false, true); c as usize]);
                pairs
            };
            let forward = mcnemar(&make(b, c)).unwrap();
            let backward = mcnemar(&make(c, b)).unwrap();
            assert_eq!(forward.p_value, backward.p_value);
        }
    }

    #[test]
    fn bootstrap_is_deterministic_and_degenerate_on_constant_data() {
        let outcomes: Vec<ItemOutcome> = (0..50)
            .map(|i| ItemOutcome::complete(&format!("i{i}"), "v", true, true, true, false))
            .collect();
        let a = bootstrap_dds_ci(&outcomes, 2000, 7).unwrap();
        let b = bootstrap_dds_ci(&outcomes, 2000, 7).unwrap();
        assert_eq!(a, b);
        // Every item has item_dds = +1, so the interval is a point.
        assert_eq!(a.lo, 100.0);
        assert_eq!(a.hi, 100.0);
    }

    #[test]
    fn bootstrap_parallel_and_sequential_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let outcomes: Vec<ItemOutcome> = (0..80)
            .map(|i| {
                ItemOutcome::complete(
                    &format!("i{i}"),
                    "v",
                    rng.random::<bool>(),
                    rng.random::<bool>(),
                    rng.random::<bool>(),
                    rng.random::<bool>(),
                )
            })
            .collect();
        let par = bootstrap_dds_ci(&outcomes, 3000, 41).unwrap();
        let seq = bootstrap_dds_ci_seq(&outcomes, 3000, 41).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn agreement_partitions_the_universe() {
        let universe: BTreeSet<String> = (0..10).map(|i| format!("i{i}")).collect();
        let mut per_model = BTreeMap::new();
        per_model.insert(
            "m1".to_string(),
            ["i0", "i1", "i2"].iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
        );
        per_model.insert(
            "m2".to_string(),
            ["i0", "i3"].iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
        );
        let report = agreement(&per_model, &universe).unwrap();
        assert_eq!(report.flip_all, 1); // i0
        assert_eq!(report.flip_some, 3); // i1, i2, i3
        assert_eq!(report.flip_none, 6);
        assert!((report.agreement_rate - 70.0).abs() < 1e-12);

        // Identical flip sets -> no disagreement.
        let mut same = BTreeMap::new();
        let set: BTreeSet<String> = ["i0", "i1"].iter().map(|s| s.to_string()).collect();
        same.insert("m1".to_string(), set.clone());
        same.insert("m2".to_string(), set);
        let report = agreement(&same, &universe).unwrap();
        assert_eq!(report.flip_some, 0);
        assert_eq!(report.agreement_rate, 100.0);
    }

    #[test]
    fn agreement_rejects_unknown_items() {
        let universe: BTreeSet<String> = ["a".to_string()].into_iter().collect();
        let mut per_model = BTreeMap::new();
        per_model.insert("m1".to_string(), ["a".to_string()].into_iter().collect::<BTreeSet<_>>());
        per_model.insert("m2".to_string(), ["zz".to_string()].into_iter().collect::<BTreeSet<_>>());
        assert!(matches!(
            agreement(&per_model, &universe),
            Err(MetricsError::UnknownItem(_))
        ));
    }

    fn outcome_strategy() -> impl Strategy<Value = Vec<ItemOutcome>> {
        proptest::collection::vec(
            (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()),
            1..60,
        )
        .prop_map(|cells| {
            cells
                .into_iter()
                .enumerate()
                .map(|(i, (c1t, c1f, c2c, c2i))| {
                    ItemOutcome::complete(&format!("i{i}"), "v", c1t, c1f, c2c, c2i)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn dds_equals_scaled_item_mean(outcomes in outcome_strategy()) {
            let report = compute_report(&outcomes).unwrap();
            prop_assert!((report.dds - 100.0 * report.item_dds_mean).abs() < 1e-9);
        }

        #[test]
        fn flip_dds_conservation(outcomes in outcome_strategy()) {
            let report = compute_report(&outcomes).unwrap();
            let kt = outcomes.iter().filter(|o| o.c1t).count() as i64;
            let kf = outcomes.iter().filter(|o| o.c1f).count() as i64;
            let kc = outcomes.iter().filter(|o| o.c2c).count() as i64;
            let ki = outcomes.iter().filter(|o| o.c2i).count() as i64;
            let f = &report.flips;
            prop_assert_eq!(f.deference as i64 - f.corrective_reject as i64, kf - ki);
            prop_assert_eq!(f.skepticism as i64 - f.corrective_accept as i64, kt - kc);
        }

        #[test]
        fn single_cell_flip_moves_dds_by_quantum(outcomes in outcome_strategy()) {
            prop_assume!(outcomes.iter().any(|o| o.c2i));
            let before = compute_report(&outcomes).unwrap();
            let mut changed = outcomes.clone();
            let idx = changed.iter().position(|o| o.c2i).unwrap();
            changed[idx].c2i = false;
            let after = compute_report(&changed).unwrap();
            let quantum = 100.0 / outcomes.len() as f64;
            prop_assert!((after.dds - before.dds - quantum).abs() < 1e-9);
        }
    }
}
