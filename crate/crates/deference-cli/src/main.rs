//! Command-line front end: ingest, split, expand, run, score, flips, judge,
//! agree, report, extract-labels, probe.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use deference::backend::Backend;
use deference::conditions::ablation_variants;
use deference::consensus::{self, ExtractionConfig, LabeledThreadRecord};
use deference::dataset::{self};
use deference::metrics::{self, FlipRecord, ItemOutcome};
use deference::report::{self, DomainReport};
use deference::runner::{self, OutcomeGroup, RunConfig, RunOptions, Store};
use deference::taxonomy::{self, FlipClassification};

#[derive(Parser)]
#[command(name = "deference", version, about = "Paired-condition judgment-shift evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset file and report its composition.
    Ingest {
        /// Line-delimited dataset file.
        path: PathBuf,
        /// Treat the file as a thread file instead of a unified item file.
        #[arg(long)]
        threads: bool,
    },
    /// Draw a deterministic stratified train/eval split.
    Split {
        path: PathBuf,
        /// Eval set size.
        #[arg(long)]
        n: usize,
        /// Metadata key to stratify on.
        #[arg(long)]
        strata_key: Option<String>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Where to write the split manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a run config into cells and print the counts.
    Expand {
        config: PathBuf,
        /// Optionally write the full cell manifest (key + digest per line).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Dispatch all pending cells of a run config.
    Run {
        config: PathBuf,
        /// Stop after this many newly completed cells.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score stored responses into per-item outcomes.
    Score {
        config: PathBuf,
    },
    /// Extract judgment flips from scored outcomes.
    Flips {
        config: PathBuf,
        /// Restrict to one model name.
        #[arg(long)]
        model: Option<String>,
    },
    /// Classify extracted flips with a judge backend.
    Judge {
        config: PathBuf,
        /// Flips file produced by the flips subcommand.
        #[arg(long)]
        flips: PathBuf,
        /// Judge model name (must exist in the config's model list).
        #[arg(long)]
        judge_model: String,
    },
    /// Cross-model flip agreement over a shared item universe.
    Agree {
        /// Flip files, one per model, named <model>=<path>.
        #[arg(long = "flips", required = true)]
        flips: Vec<String>,
        /// Outcomes file defining the item universe.
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit metric reports: per-domain CSV, roll-ups, heatmap matrix.
    Report {
        config: PathBuf,
    },
    /// Run consensus label extraction over a thread file.
    ExtractLabels {
        config: PathBuf,
        /// Thread records file ({id, title, body, dialogue, ranked_comments}).
        #[arg(long)]
        threads: PathBuf,
        /// Judge model name for the LLM fallback.
        #[arg(long)]
        judge_model: String,
        #[arg(long)]
        out: PathBuf,
        /// Minimum fallback confidence to accept a label.
        #[arg(long, default_value_t = 0.5)]
        confidence_threshold: f64,
    },
    /// Health-check every backend in a run config.
    Probe {
        config: PathBuf,
    },
    /// Print the fixed speaker-label ablation matrix as JSON.
    Variants,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest { path, threads } => ingest(&path, threads),
        Command::Split {
            path,
            n,
            strata_key,
            seed,
            out,
        } => split(&path, n, strata_key.as_deref(), seed, &out),
        Command::Expand { config, manifest } => expand(&config, manifest.as_deref()),
        Command::Run { config, limit } => run(&config, limit),
        Command::Score { config } => score(&config),
        Command::Flips { config, model } => flips(&config, model.as_deref()),
        Command::Judge {
            config,
            flips,
            judge_model,
        } => judge(&config, &flips, &judge_model),
        Command::Agree { flips, outcomes, out } => agree(&flips, &outcomes, &out),
        Command::Report { config } => report_cmd(&config),
        Command::ExtractLabels {
            config,
            threads,
            judge_model,
            out,
            confidence_threshold,
        } => extract_labels(&config, &threads, &judge_model, &out, confidence_threshold),
        Command::Probe { config } => probe(&config),
        Command::Variants => {
            println!("{}", serde_json::to_string_pretty(&ablation_variants())?);
            Ok(())
        }
    }
}

fn ingest(path: &Path, threads: bool) -> Result<()> {
    if threads {
        let loaded = dataset::load_threads(path)?;
        let labeled = loaded.iter().filter(|t| t.op_verdict.is_some()).count();
        println!("ok: {} threads ({} with verdicts)", loaded.len(), labeled);
    } else {
        let items = dataset::load_items(path)?;
        let mut by_domain: BTreeMap<&str, usize> = BTreeMap::new();
        for item in &items {
            *by_domain.entry(item.domain.as_str()).or_default() += 1;
        }
        println!("ok: {} items", items.len());
        for (domain, count) in by_domain {
            println!("  {domain}: {count}");
        }
    }
    Ok(())
}

fn split(path: &Path, n: usize, strata_key: Option<&str>, seed: u64, out: &Path) -> Result<()> {
    let items = dataset::load_items(path)?;
    let split = dataset::stratified_sample(&items, strata_key, n, seed)?;
    if !dataset::verify_no_leakage(&split) {
        bail!("split leaks ids between train and eval");
    }
    split.save(out)?;
    println!(
        "eval {} / train {} (seed {seed}, strata {:?}) -> {}",
        split.eval_ids.len(),
        split.train_ids.len(),
        split.strata_key,
        out.display()
    );
    Ok(())
}

fn expand(config_path: &Path, manifest: Option<&Path>) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let cells = runner::expand(&config)?;
    let mut by_condition: BTreeMap<&str, usize> = BTreeMap::new();
    for (key, _) in &cells {
        *by_condition.entry(key.condition.as_str()).or_default() += 1;
    }
    println!("{} cells", cells.len());
    for (condition, count) in by_condition {
        println!("  {condition}: {count}");
    }
    if let Some(path) = manifest {
        let file = File::create(path).with_context(|| path.display().to_string())?;
        let mut w = BufWriter::new(file);
        for (key, prompt) in &cells {
            writeln!(
                w,
                "{}",
                serde_json::json!({ "key": key, "digest": prompt.content_digest })
            )?;
        }
        println!("manifest -> {}", path.display());
    }
    Ok(())
}

fn run(config_path: &Path, limit: Option<usize>) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let summary = runner::run(&config, RunOptions { cell_limit: limit })?;
    println!(
        "total {} | already complete {} | dispatched {} | completed {} | excluded {}",
        summary.total_cells, summary.already_complete, summary.dispatched, summary.completed, summary.excluded
    );
    Ok(())
}

fn outcomes_path(config: &RunConfig) -> PathBuf {
    config.output_dir.join("outcomes.jsonl")
}

fn score(config_path: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let store = Store::open(&config.output_dir.join("store"))?;
    let scored = runner::score_store(&store)?;
    let path = outcomes_path(&config);
    let file = File::create(&path).with_context(|| path.display().to_string())?;
    let mut w = BufWriter::new(file);
    for group in &scored.groups {
        writeln!(w, "{}", serde_json::to_string(group)?)?;
        let excluded: usize = group.outcomes.iter().filter(|o| !o.is_complete()).count();
        println!(
            "{} / {} / {} / {}: {} outcomes ({} with exclusions, {} malformed)",
            group.model,
            group.dataset,
            group.variant_id,
            group.mitigation.map(|m| m.as_str()).unwrap_or("none"),
            group.outcomes.len(),
            excluded,
            group.malformed
        );
    }
    if !scored.quarantine.is_empty() {
        let qpath = config.output_dir.join("quarantine.jsonl");
        runner::write_quarantine(&qpath, &scored.quarantine)?;
        println!("{} malformed responses -> {}", scored.quarantine.len(), qpath.display());
    }
    println!("outcomes -> {}", path.display());
    Ok(())
}

fn load_groups(config: &RunConfig) -> Result<Vec<OutcomeGroup>> {
    let path = outcomes_path(config);
    let file = File::open(&path).with_context(|| format!("{} (run `score` first)", path.display()))?;
    let mut groups = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        groups.push(serde_json::from_str(&line)?);
    }
    Ok(groups)
}

fn items_by_id(config: &RunConfig) -> Result<BTreeMap<String, deference::dataset::UnifiedItem>> {
    let mut map = BTreeMap::new();
    for dataset_ref in &config.datasets {
        if let Ok(items) = dataset::load_items(&dataset_ref.path) {
            for item in items {
                map.insert(item.id.clone(), item);
            }
        }
    }
    Ok(map)
}

fn flips_path(config: &RunConfig) -> PathBuf {
    config.output_dir.join("flips.jsonl")
}

fn flips(config_path: &Path, model: Option<&str>) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let groups = load_groups(&config)?;
    let items = items_by_id(&config)?;

    let mut all = Vec::new();
    for group in groups
        .iter()
        .filter(|g| model.is_none_or(|m| g.model == m) && g.mitigation.is_none())
    {
        let complete: Vec<ItemOutcome> = group.outcomes.iter().filter(|o| o.is_complete()).cloned().collect();
        let mut flips = metrics::extract_flips(&complete)?;
        for flip in &mut flips {
            if let Some(item) = items.get(&flip.item_id) {
                flip.question = item.question.clone();
                flip.claim = if flip.kind.condition_pair().0 == deference::conditions::ConditionKind::C1True {
                    item.correct_answer.clone()
                } else {
                    item.incorrect_answer.clone()
                };
            }
        }
        println!("{} / {} / {}: {} flips", group.model, group.dataset, group.variant_id, flips.len());
        all.extend(flips.into_iter().map(|f| (group.model.clone(), f)));
    }

    let path = flips_path(&config);
    let file = File::create(&path).with_context(|| path.display().to_string())?;
    let mut w = BufWriter::new(file);
    for (model, flip) in &all {
        writeln!(w, "{}", serde_json::json!({ "model": model, "flip": flip }))?;
    }
    println!("{} flips -> {}", all.len(), path.display());

    let csv_path = config.output_dir.join("flips.csv");
    report::write_flips_csv(&csv_path, &all.iter().map(|(_, f)| f.clone()).collect::<Vec<_>>())?;
    Ok(())
}

fn load_flips(path: &Path) -> Result<Vec<(String, FlipRecord)>> {
    let file = File::open(path).with_context(|| path.display().to_string())?;
    let mut flips = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)?;
        let model = value
            .get("model")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        let flip: FlipRecord = serde_json::from_value(value.get("flip").cloned().unwrap_or(value))?;
        flips.push((model, flip));
    }
    Ok(flips)
}

fn backend_for(config: &RunConfig, name: &str) -> Result<Backend> {
    let entry = config
        .models
        .iter()
        .find(|m| m.name == name)
        .with_context(|| format!("model `{name}` not in config"))?;
    Ok(Backend::from_spec(&entry.backend)?)
}

fn judge(config_path: &Path, flips_file: &Path, judge_model: &str) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let judge = backend_for(&config, judge_model)?;
    let flips = load_flips(flips_file)?;
    let codebook = taxonomy::default_codebook();

    let mut classifications: Vec<FlipClassification> = Vec::new();
    let mut transport_exclusions = 0usize;
    let mut skipped_corrective = 0usize;
    for (_, flip) in &flips {
        if flip.kind.is_corrective() {
            skipped_corrective += 1;
            continue;
        }
        match taxonomy::classify_flip(&judge, flip, codebook) {
            Ok(classification) => classifications.push(classification),
            Err(taxonomy::TaxonomyError::Backend(_)) => transport_exclusions += 1,
            Err(e) => return Err(e.into()),
        }
    }

    let path = config.output_dir.join("classifications.jsonl");
    let file = File::create(&path).with_context(|| path.display().to_string())?;
    let mut w = BufWriter::new(file);
    for c in &classifications {
        writeln!(w, "{}", serde_json::to_string(c)?)?;
    }
    println!(
        "{} classified, {} transport exclusions, {} corrective skipped -> {}",
        classifications.len(),
        transport_exclusions,
        skipped_corrective,
        path.display()
    );

    if !classifications.is_empty() {
        let dist = taxonomy::distribution(&classifications)?;
        report::write_distribution_csv(&config.output_dir.join("taxonomy.csv"), &dist)?;
        report::write_json(&config.output_dir.join("taxonomy.json"), &dist)?;
    }
    Ok(())
}

fn agree(flip_args: &[String], outcomes: &Path, out: &Path) -> Result<()> {
    let mut per_model: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for arg in flip_args {
        let Some((model, path)) = arg.split_once('=') else {
            bail!("--flips expects <model>=<path>, got `{arg}`");
        };
        let flips = load_flips(Path::new(path))?;
        let set = per_model.entry(model.to_string()).or_default();
        for (_, flip) in flips {
            if !flip.kind.is_corrective() {
                set.insert(flip.item_id);
            }
        }
    }

    let file = File::open(outcomes).with_context(|| outcomes.display().to_string())?;
    let mut universe = BTreeSet::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let group: OutcomeGroup = serde_json::from_str(&line)?;
        for outcome in group.outcomes {
            universe.insert(outcome.item_id);
        }
    }

    let report = metrics::agreement(&per_model, &universe)?;
    report::write_json(out, &report)?;
    println!(
        "universe {} | all {} | none {} | some {} | agreement {:.1}%",
        universe.len(),
        report.flip_all,
        report.flip_none,
        report.flip_some,
        report.agreement_rate
    );
    Ok(())
}

fn report_cmd(config_path: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let groups = load_groups(&config)?;
    let reports: Vec<DomainReport> = report::build_domain_reports(&groups)?;
    let rollups = report::build_rollups(&groups, &reports)?;

    let dir = config.output_dir.join("reports");
    fs::create_dir_all(&dir)?;
    report::write_main_csv(&dir.join("main_results.csv"), &reports)?;
    report::write_heatmap_csv(&dir.join("dds_heatmap.csv"), &reports)?;
    report::write_json(&dir.join("domain_reports.json"), &reports)?;
    report::write_json(&dir.join("rollups.json"), &rollups)?;

    for rollup in &rollups {
        println!(
            "{} [{} / {}] pooled DDS {:+.1} (macro {:+.1}, n={}, p={:.2e})",
            rollup.model,
            rollup.variant_id,
            rollup.mitigation.map(|m| m.as_str()).unwrap_or("none"),
            rollup.pooled.dds,
            rollup.macro_dds,
            rollup.pooled.n,
            rollup.pooled_significance.p_value
        );
    }
    println!("reports -> {}", dir.display());
    Ok(())
}

fn extract_labels(
    config_path: &Path,
    threads: &Path,
    judge_model: &str,
    out: &Path,
    confidence_threshold: f64,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let judge = backend_for(&config, judge_model)?;
    let records = consensus::load_thread_records(threads)?;
    let extraction_config = ExtractionConfig {
        confidence_threshold,
        ..ExtractionConfig::default()
    };

    let mut labeled = Vec::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for record in records {
        let extraction = consensus::extract_label(&record, &judge, &extraction_config);
        let bucket = match (&extraction.verdict, &extraction.method) {
            (Some(_), Some(consensus::ExtractionMethod::Pattern)) => "pattern",
            (Some(_), Some(consensus::ExtractionMethod::Llm)) => "llm",
            _ => "unlabeled",
        };
        *counts.entry(bucket).or_default() += 1;
        labeled.push(LabeledThreadRecord { record, extraction });
    }
    consensus::write_labeled_records(out, &labeled)?;
    println!(
        "{} threads -> {} (pattern {}, llm {}, unlabeled {})",
        labeled.len(),
        out.display(),
        counts.get("pattern").unwrap_or(&0),
        counts.get("llm").unwrap_or(&0),
        counts.get("unlabeled").unwrap_or(&0)
    );
    Ok(())
}

fn probe(config_path: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let mut failures = 0;
    for entry in &config.models {
        let backend = Backend::from_spec(&entry.backend)?;
        match backend.probe() {
            Ok(report) => println!(
                "{}: healthy={} latency={}ms structured_output={} ({})",
                entry.name, report.healthy, report.latency_ms, report.structured_output_ok, report.detail
            ),
            Err(e) => {
                failures += 1;
                println!("{}: UNHEALTHY ({e})", entry.name);
            }
        }
    }
    if failures > 0 {
        bail!("{failures} backend(s) unhealthy");
    }
    Ok(())
}
