//! Report serialization: per-group metric documents, the main results CSV,
//! the model x domain DDS heatmap matrix, flip tables, and taxonomy
//! distribution tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditions::Mitigation;
use crate::metrics::{
    compute_report, mcnemar, mcnemar_pairs, FlipRecord, MetricsError, MetricsReport, SignificanceResult,
};
use crate::runner::{OutcomeGroup, RunnerError};
use crate::taxonomy::Distribution;

/// Metrics plus significance for one (model, dataset, variant, mitigation)
/// slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainReport {
    pub model: String,
    pub dataset: String,
    pub variant_id: String,
    pub mitigation: Option<Mitigation>,
    pub metrics: MetricsReport,
    pub significance: SignificanceResult,
    pub malformed: usize,
}

/// Cross-domain aggregate for one (model, variant, mitigation): pooled
/// item-weighted metrics plus the macro average of per-domain DDS. Both are
/// emitted because they answer different questions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rollup {
    pub model: String,
    pub variant_id: String,
    pub mitigation: Option<Mitigation>,
    pub domains: usize,
    pub pooled: MetricsReport,
    pub pooled_significance: SignificanceResult,
    pub macro_dds: f64,
}

/// Build one report per outcome group. Groups whose outcomes are all
/// excluded are skipped.
pub fn build_domain_reports(groups: &[OutcomeGroup]) -> Result<Vec<DomainReport>, MetricsError> {
    let mut reports = Vec::new();
    for group in groups {
        let metrics = match compute_report(&group.outcomes) {
            Ok(m) => m,
            Err(MetricsError::NoCompleteOutcomes) | Err(MetricsError::EmptyInput) => continue,
            Err(e) => return Err(e),
        };
        let significance = mcnemar(&mcnemar_pairs(&group.outcomes))?;
        reports.push(DomainReport {
            model: group.model.clone(),
            dataset: group.dataset.clone(),
            variant_id: group.variant_id.clone(),
            mitigation: group.mitigation,
            metrics,
            significance,
            malformed: group.malformed,
        });
    }
    Ok(reports)
}

/// Pool outcomes across datasets per (model, variant, mitigation) and attach
/// the macro average over the already-built domain reports.
pub fn build_rollups(groups: &[OutcomeGroup], domain_reports: &[DomainReport]) -> Result<Vec<Rollup>, MetricsError> {
    type SliceId = (String, String, Option<Mitigation>);
    let mut pooled: BTreeMap<SliceId, Vec<crate::metrics::ItemOutcome>> = BTreeMap::new();
    for group in groups {
        pooled
            .entry((group.model.clone(), group.variant_id.clone(), group.mitigation))
            .or_default()
            .extend(group.outcomes.iter().cloned());
    }
    let mut rollups = Vec::new();
    for ((model, variant_id, mitigation), outcomes) in pooled {
        let report = match compute_report(&outcomes) {
            Ok(r) => r,
            Err(MetricsError::NoCompleteOutcomes) | Err(MetricsError::EmptyInput) => continue,
            Err(e) => return Err(e),
        };
        let significance = mcnemar(&mcnemar_pairs(&outcomes))?;
        let domain_dds: Vec<f64> = domain_reports
            .iter()
            .filter(|r| r.model == model && r.variant_id == variant_id && r.mitigation == mitigation)
            .map(|r| r.metrics.dds)
            .collect();
        let macro_dds = if domain_dds.is_empty() {
            report.dds
        } else {
            domain_dds.iter().sum::<f64>() / domain_dds.len() as f64
        };
        rollups.push(Rollup {
            model,
            variant_id,
            mitigation,
            domains: domain_dds.len(),
            pooled: report,
            pooled_significance: significance,
            macro_dds,
        });
    }
    Ok(rollups)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RunnerError + '_ {
    move |e| RunnerError::Io(path.display().to_string(), e)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> RunnerError + '_ {
    move |e| RunnerError::Serialize(format!("{}: {e}", path.display()))
}

fn mitigation_str(mitigation: Option<Mitigation>) -> &'static str {
    mitigation.map(Mitigation::as_str).unwrap_or("none")
}

/// Main results table, one row per report slice.
pub fn write_main_csv(path: &Path, reports: &[DomainReport]) -> Result<(), RunnerError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record([
        "model",
        "dataset",
        "variant",
        "mitigation",
        "n",
        "acc_c1_true",
        "acc_c1_false",
        "c1_avg",
        "acc_c2_correct",
        "acc_c2_incorrect",
        "c2_avg",
        "delta_correct",
        "delta_incorrect",
        "dds",
        "p_value",
        "deference",
        "skepticism",
        "corrective_accept",
        "corrective_reject",
        "flip_rate",
        "excluded",
        "malformed",
    ])
    .map_err(csv_err(path))?;
    for r in reports {
        let m = &r.metrics;
        w.write_record([
            r.model.clone(),
            r.dataset.clone(),
            r.variant_id.clone(),
            mitigation_str(r.mitigation).to_string(),
            m.n.to_string(),
            format!("{:.1}", m.acc_c1t),
            format!("{:.1}", m.acc_c1f),
            format!("{:.1}", m.avg_c1),
            format!("{:.1}", m.acc_c2c),
            format!("{:.1}", m.acc_c2i),
            format!("{:.1}", m.avg_c2),
            format!("{:.1}", m.delta_correct),
            format!("{:.1}", m.delta_incorrect),
            format!("{:.1}", m.dds),
            format!("{:.6}", r.significance.p_value),
            m.flips.deference.to_string(),
            m.flips.skepticism.to_string(),
            m.flips.corrective_accept.to_string(),
            m.flips.corrective_reject.to_string(),
            format!("{:.1}", m.flips.flip_rate),
            m.excluded_count.to_string(),
            r.malformed.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Model x dataset DDS matrix for the baseline unmitigated slice.
pub fn write_heatmap_csv(path: &Path, reports: &[DomainReport]) -> Result<(), RunnerError> {
    let slice: Vec<&DomainReport> = reports
        .iter()
        .filter(|r| r.mitigation.is_none() && r.variant_id == "baseline")
        .collect();
    let mut models: Vec<String> = slice.iter().map(|r| r.model.clone()).collect();
    models.sort();
    models.dedup();
    let mut datasets: Vec<String> = slice.iter().map(|r| r.dataset.clone()).collect();
    datasets.sort();
    datasets.dedup();

    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["model".to_string()];
    header.extend(datasets.iter().cloned());
    w.write_record(&header).map_err(csv_err(path))?;
    for model in &models {
        let mut row = vec![model.clone()];
        for dataset in &datasets {
            let value = slice
                .iter()
                .find(|r| &r.model == model && &r.dataset == dataset)
                .map(|r| format!("{:.1}", r.metrics.dds))
                .unwrap_or_default();
            row.push(value);
        }
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Flip records table for downstream inspection.
pub fn write_flips_csv(path: &Path, flips: &[FlipRecord]) -> Result<(), RunnerError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["flip_id", "item_id", "variant", "kind", "c1_answer", "c2_answer"])
        .map_err(csv_err(path))?;
    for f in flips {
        w.write_record([
            f.flip_id(),
            f.item_id.clone(),
            f.variant_id.clone(),
            f.kind.as_str().to_string(),
            f.c1_answer.as_str().to_string(),
            f.c2_answer.as_str().to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Taxonomy distribution tables: one row per code, then one per category.
pub fn write_distribution_csv(path: &Path, dist: &Distribution) -> Result<(), RunnerError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record([
        "code",
        "failure_type",
        "category",
        "count",
        "pct",
        "deference_n",
        "deference_pct",
        "skepticism_n",
        "skepticism_pct",
        "direction_ratio",
    ])
    .map_err(csv_err(path))?;
    for row in &dist.codes {
        w.write_record([
            row.code.as_str().to_string(),
            row.label.clone(),
            row.category.label().to_string(),
            row.total.to_string(),
            format!("{:.1}", row.pct),
            row.deference.to_string(),
            format!("{:.1}", row.deference_pct),
            row.skepticism.to_string(),
            format!("{:.1}", row.skepticism_pct),
            row.direction_ratio.map(|r| format!("{r:.1}")).unwrap_or_default(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Pretty-printed JSON document writer used for all structured outputs.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunnerError> {
    let file = File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)
        .map_err(|e| RunnerError::Serialize(e.to_string()))?;
    Ok(())
}
