//! End-to-end experiment orchestration: expand (items x conditions x
//! variants x models), dispatch with idempotent resume, and persist raw
//! results.
//!
//! The result store is a directory of append-only line-delimited shards, one
//! per (model, dataset). Re-running a config completes only the keys the
//! store does not yet hold; failed completions are recorded once as
//! exclusions and never retried silently.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendSpec, CompletionRequest};
use crate::conditions::{
    apply_mitigation, render_benchmark_c1, render_benchmark_c2, render_raio, ConditionError,
    ConditionKind, Framing, Mitigation, PromptVariant, RaioJudgmentSpec, RenderedPrompt,
};
use crate::dataset::{load_items, load_threads, DatasetError, RaioThread, UnifiedItem};
use crate::metrics::ItemOutcome;
use crate::parse::{parse_judgment, score};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Benchmark,
    Raio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub domain: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub backend: BackendSpec,
}

/// Judgment-direction configuration for the social-judgment experiment.
/// `op_label` names the original poster; ground truth for any other judgee
/// is the inverted community verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaioSpecConfig {
    pub judger: String,
    pub judgee: String,
    #[serde(default = "default_op_label")]
    pub op_label: String,
}

fn default_op_label() -> String {
    "Speaker B".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub datasets: Vec<DatasetRef>,
    pub models: Vec<ModelEntry>,
    /// Labeling variants; empty means baseline only.
    #[serde(default)]
    pub variants: Vec<PromptVariant>,
    /// Mitigation overlays; each adds mitigated copies of the C2 cells.
    #[serde(default)]
    pub mitigations: Vec<Mitigation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raio_spec: Option<RaioSpecConfig>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = fs::read_to_string(path).map_err(|e| RunnerError::Io(path.display().to_string(), e))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.models.is_empty() {
            return Err(RunnerError::Config("at least one model required".to_string()));
        }
        if self.datasets.is_empty() {
            return Err(RunnerError::Config("at least one dataset required".to_string()));
        }
        match (self.experiment, &self.raio_spec) {
            (Experiment::Raio, None) => {
                return Err(RunnerError::Config("raio experiment requires raio_spec".to_string()))
            }
            (Experiment::Benchmark, Some(_)) => {
                return Err(RunnerError::Config("raio_spec is only valid for the raio experiment".to_string()))
            }
            _ => {}
        }
        for entry in &self.models {
            if let BackendSpec::Http(config) = &entry.backend {
                config.validate().map_err(|e| RunnerError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn variants_or_baseline(&self) -> Vec<PromptVariant> {
        if self.variants.is_empty() {
            vec![PromptVariant::baseline()]
        } else {
            self.variants.clone()
        }
    }
}

/// Unique address of one completed cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResultKey {
    pub model: String,
    pub dataset: String,
    pub item_id: String,
    pub condition: ConditionKind,
    pub variant_id: String,
    pub mitigation: Option<Mitigation>,
}

impl ResultKey {
    /// Canonical string form used for store dedup; JSON-encoded so embedded
    /// separators in ids cannot collide.
    pub fn canonical(&self) -> String {
        serde_json::to_string(&(
            &self.model,
            &self.dataset,
            &self.item_id,
            self.condition.as_str(),
            &self.variant_id,
            self.mitigation.map(Mitigation::as_str),
        ))
        .expect("key serialization cannot fail")
    }
}

/// One line of a store shard.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreRecord {
    pub key: ResultKey,
    pub digest: String,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency_ms: u64,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Excluded,
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error("thread `{0}` has no extracted verdict; run extract-labels first")]
    MissingVerdict(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("serialization failed: {0}")]
    Serialize(String),
}

fn sanitize(component: &str) -> String {
    component
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

/// Append-only result store, sharded by (model, dataset).
pub struct Store {
    dir: PathBuf,
}

impl Store {
    pub fn open(dir: &Path) -> Result<Self, RunnerError> {
        fs::create_dir_all(dir).map_err(|e| RunnerError::Io(dir.display().to_string(), e))?;
        Ok(Store { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn shard_path(&self, model: &str, dataset: &str) -> PathBuf {
        self.dir.join(format!("{}__{}.jsonl", sanitize(model), sanitize(dataset)))
    }

    pub fn load_records(&self) -> Result<Vec<StoreRecord>, RunnerError> {
        let mut records = Vec::new();
        let entries = fs::read_dir(&self.dir).map_err(|e| RunnerError::Io(self.dir.display().to_string(), e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            let file = File::open(&path).map_err(|e| RunnerError::Io(path.display().to_string(), e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| RunnerError::Io(path.display().to_string(), e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: StoreRecord =
                    serde_json::from_str(&line).map_err(|e| RunnerError::Serialize(e.to_string()))?;
                records.push(record);
            }
        }
        Ok(records)
    }

    pub fn existing_keys(&self) -> Result<HashSet<String>, RunnerError> {
        Ok(self.load_records()?.iter().map(|r| r.key.canonical()).collect())
    }

    fn append(&self, writers: &mut HashMap<PathBuf, BufWriter<File>>, record: &StoreRecord) -> Result<(), RunnerError> {
        let path = self.shard_path(&record.key.model, &record.key.dataset);
        if !writers.contains_key(&path) {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| RunnerError::Io(path.display().to_string(), e))?;
            writers.insert(path.clone(), BufWriter::new(file));
        }
        let writer = writers.get_mut(&path).expect("writer just inserted");
        let line = serde_json::to_string(record).map_err(|e| RunnerError::Serialize(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| RunnerError::Io(path.display().to_string(), e))?;
        writer.flush().map_err(|e| RunnerError::Io(path.display().to_string(), e))?;
        Ok(())
    }
}

fn benchmark_cells(
    config: &RunConfig,
    dataset: &DatasetRef,
    items: &[UnifiedItem],
    cells: &mut Vec<(ResultKey, RenderedPrompt)>,
) -> Result<(), RunnerError> {
    let variants = config.variants_or_baseline();
    for model in &config.models {
        for item in items {
            for variant in &variants {
                let prompts = [
                    render_benchmark_c1(item, true),
                    render_benchmark_c1(item, false),
                    render_benchmark_c2(item, true, variant),
                    render_benchmark_c2(item, false, variant),
                ];
                for prompt in prompts {
                    let key = ResultKey {
                        model: model.name.clone(),
                        dataset: dataset.domain.clone(),
                        item_id: item.id.clone(),
                        condition: prompt.condition,
                        variant_id: variant.variant_id.clone(),
                        mitigation: None,
                    };
                    for mitigation in &config.mitigations {
                        if prompt.condition.is_c2() {
                            let mitigated = apply_mitigation(&prompt, *mitigation)?;
                            let mut mkey = key.clone();
                            mkey.mitigation = Some(*mitigation);
                            cells.push((mkey, mitigated));
                        }
                    }
                    cells.push((key, prompt));
                }
            }
        }
    }
    Ok(())
}

fn raio_cells(
    config: &RunConfig,
    dataset: &DatasetRef,
    threads: &[RaioThread],
    cells: &mut Vec<(ResultKey, RenderedPrompt)>,
) -> Result<(), RunnerError> {
    let spec_config = config.raio_spec.as_ref().expect("validated");
    for model in &config.models {
        for thread in threads {
            let op_verdict = thread
                .op_verdict
                .ok_or_else(|| RunnerError::MissingVerdict(thread.id.clone()))?;
            let ground_truth = if spec_config.judgee == spec_config.op_label {
                op_verdict
            } else {
                op_verdict.invert()
            };
            let spec = RaioJudgmentSpec::new(&spec_config.judger, &spec_config.judgee, ground_truth);
            for framing in [Framing::C1, Framing::C2] {
                for asserted_true in [true, false] {
                    let prompt = render_raio(thread, &spec, framing, asserted_true)?;
                    let key = ResultKey {
                        model: model.name.clone(),
                        dataset: dataset.domain.clone(),
                        item_id: thread.id.clone(),
                        condition: prompt.condition,
                        variant_id: prompt.variant_id.clone(),
                        mitigation: None,
                    };
                    for mitigation in &config.mitigations {
                        if prompt.condition.is_c2() {
                            let mitigated = apply_mitigation(&prompt, *mitigation)?;
                            let mut mkey = key.clone();
                            mkey.mitigation = Some(*mitigation);
                            cells.push((mkey, mitigated));
                        }
                    }
                    cells.push((key, prompt));
                }
            }
        }
    }
    Ok(())
}

/// Expand a config into every (key, prompt) cell, deterministically ordered
/// by canonical key.
pub fn expand(config: &RunConfig) -> Result<Vec<(ResultKey, RenderedPrompt)>, RunnerError> {
    config.validate()?;
    let mut cells = Vec::new();
    for dataset in &config.datasets {
        match config.experiment {
            Experiment::Benchmark => {
                let items = load_items(&dataset.path)?;
                benchmark_cells(config, dataset, &items, &mut cells)?;
            }
            Experiment::Raio => {
                let threads = load_threads(&dataset.path)?;
                raio_cells(config, dataset, &threads, &mut cells)?;
            }
        }
    }
    cells.sort_by(|a, b| a.0.canonical().cmp(&b.0.canonical()));
    Ok(cells)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop after completing this many pending cells (useful for smoke runs
    /// and resume testing).
    pub cell_limit: Option<usize>,
}

/// Counts by status after a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total_cells: usize,
    pub already_complete: usize,
    pub dispatched: usize,
    pub completed: usize,
    pub excluded: usize,
}

/// Dispatch every pending cell. Aborts only on configuration or IO errors;
/// individual cell failures are recorded as exclusions.
pub fn run(config: &RunConfig, options: RunOptions) -> Result<RunSummary, RunnerError> {
    let cells = expand(config)?;
    let total_cells = cells.len();

    let store = Store::open(&config.output_dir.join("store"))?;
    let existing = store.existing_keys()?;

    let mut pending: Vec<(ResultKey, RenderedPrompt)> = cells
        .into_iter()
        .filter(|(key, _)| !existing.contains(&key.canonical()))
        .collect();
    let already_complete = total_cells - pending.len();
    if let Some(limit) = options.cell_limit {
        pending.truncate(limit);
    }
    let dispatched = pending.len();

    let mut backends: BTreeMap<String, Backend> = BTreeMap::new();
    for entry in &config.models {
        backends.insert(entry.name.clone(), Backend::from_spec(&entry.backend)?);
    }

    let mut by_model: BTreeMap<String, VecDeque<(ResultKey, RenderedPrompt)>> = BTreeMap::new();
    for cell in pending {
        by_model.entry(cell.0.model.clone()).or_default().push_back(cell);
    }

    let mut writers: HashMap<PathBuf, BufWriter<File>> = HashMap::new();
    let mut completed = 0usize;
    let mut excluded = 0usize;

    for (model, queue) in by_model {
        let backend = backends.get(&model).expect("backend built for every model");
        let workers = backend.max_concurrency().min(queue.len()).max(1);
        let queue = Mutex::new(queue);
        let (tx, rx) = mpsc::channel::<StoreRecord>();

        std::thread::scope(|scope| -> Result<(), RunnerError> {
            for _ in 0..workers {
                let tx = tx.clone();
                let queue = &queue;
                scope.spawn(move || loop {
                    let next = queue.lock().expect("queue poisoned").pop_front();
                    let Some((key, prompt)) = next else { break };
                    let request = CompletionRequest::from_prompt(&prompt);
                    let started = Instant::now();
                    let outcome = backend.complete_with_attempts(&request);
                    let latency_ms = started.elapsed().as_millis() as u64;
                    let record = match outcome {
                        Ok((text, attempts)) => StoreRecord {
                            key,
                            digest: prompt.content_digest.clone(),
                            status: RecordStatus::Ok,
                            response: Some(text),
                            error: None,
                            latency_ms,
                            attempts,
                        },
                        Err((error, attempts)) => StoreRecord {
                            key,
                            digest: prompt.content_digest.clone(),
                            status: RecordStatus::Excluded,
                            response: None,
                            error: Some(error.to_string()),
                            latency_ms,
                            attempts,
                        },
                    };
                    if tx.send(record).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for record in rx {
                match record.status {
                    RecordStatus::Ok => completed += 1,
                    RecordStatus::Excluded => excluded += 1,
                }
                store.append(&mut writers, &record)?;
            }
            Ok(())
        })?;
    }

    Ok(RunSummary {
        total_cells,
        already_complete,
        dispatched,
        completed,
        excluded,
    })
}

/// Scored outcomes for one (model, dataset, variant, mitigation) group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeGroup {
    pub model: String,
    pub dataset: String,
    pub variant_id: String,
    pub mitigation: Option<Mitigation>,
    pub outcomes: Vec<ItemOutcome>,
    /// Received-but-unparseable responses, tallied separately from
    /// transport exclusions.
    pub malformed: usize,
}

/// A quarantined malformed response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub key: ResultKey,
    pub raw: String,
}

#[derive(Debug, Default)]
pub struct ScoreOutput {
    pub groups: Vec<OutcomeGroup>,
    pub quarantine: Vec<QuarantineRecord>,
}

type GroupId = (String, String, String, Option<Mitigation>);

/// Score every stored response. Mitigated groups borrow their C1 cells from
/// the unmitigated baseline of the same (model, dataset, variant), since
/// mitigations only re-ask the conversational cells.
pub fn score_store(store: &Store) -> Result<ScoreOutput, RunnerError> {
    let records = store.load_records()?;

    struct Cell {
        correct: Option<bool>,
        reasoning: Option<String>,
    }
    let mut cells: HashMap<GroupId, BTreeMap<String, BTreeMap<ConditionKind, Cell>>> = HashMap::new();
    let mut quarantine = Vec::new();
    let mut malformed: HashMap<GroupId, usize> = HashMap::new();

    for record in records {
        let group: GroupId = (
            record.key.model.clone(),
            record.key.dataset.clone(),
            record.key.variant_id.clone(),
            record.key.mitigation,
        );
        let cell = match (&record.status, &record.response) {
            (RecordStatus::Ok, Some(text)) => match parse_judgment(text) {
                Ok(judgment) => Cell {
                    correct: Some(score(record.key.condition, &judgment)),
                    reasoning: Some(judgment.reasoning),
                },
                Err(_) => {
                    *malformed.entry(group.clone()).or_default() += 1;
                    quarantine.push(QuarantineRecord {
                        key: record.key.clone(),
                        raw: text.clone(),
                    });
                    Cell {
                        correct: None,
                        reasoning: None,
                    }
                }
            },
            _ => Cell {
                correct: None,
                reasoning: None,
            },
        };
        cells
            .entry(group)
            .or_default()
            .entry(record.key.item_id.clone())
            .or_default()
            .insert(record.key.condition, cell);
    }

    // Borrow C1 cells for mitigated groups from the unmitigated baseline.
    let group_ids: Vec<GroupId> = cells.keys().cloned().collect();
    for group in &group_ids {
        if group.3.is_none() {
            continue;
        }
        let baseline: GroupId = (group.0.clone(), group.1.clone(), group.2.clone(), None);
        let Some(baseline_items) = cells.get(&baseline) else { continue };
        let borrowed: Vec<(String, ConditionKind, Option<bool>, Option<String>)> = baseline_items
            .iter()
            .flat_map(|(item_id, conds)| {
                conds
                    .iter()
                    .filter(|(c, _)| !c.is_c2())
                    .map(|(c, cell)| (item_id.clone(), *c, cell.correct, cell.reasoning.clone()))
            })
            .collect();
        let target = cells.get_mut(group).expect("group exists");
        for (item_id, condition, correct, reasoning) in borrowed {
            target
                .entry(item_id)
                .or_default()
                .entry(condition)
                .or_insert(Cell { correct, reasoning });
        }
    }

    let mut groups = Vec::new();
    let mut sorted: Vec<(GroupId, BTreeMap<String, BTreeMap<ConditionKind, Cell>>)> =
        cells.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));

    for ((model, dataset, variant_id, mitigation), items) in sorted {
        let mut outcomes = Vec::new();
        for (item_id, conditions) in items {
            let mut outcome = ItemOutcome {
                item_id,
                variant_id: variant_id.clone(),
                c1t: false,
                c1f: false,
                c2c: false,
                c2i: false,
                excluded: Default::default(),
                reasoning: Default::default(),
            };
            for kind in ConditionKind::ALL {
                match conditions.get(&kind).and_then(|c| c.correct) {
                    Some(correct) => {
                        match kind {
                            ConditionKind::C1True => outcome.c1t = correct,
                            ConditionKind::C1False => outcome.c1f = correct,
                            ConditionKind::C2Correct => outcome.c2c = correct,
                            ConditionKind::C2Incorrect => outcome.c2i = correct,
                        }
                        if let Some(reasoning) = conditions.get(&kind).and_then(|c| c.reasoning.clone()) {
                            outcome.reasoning.insert(kind, reasoning);
                        }
                    }
                    None => {
                        outcome.excluded.insert(kind);
                    }
                }
            }
            outcomes.push(outcome);
        }
        let malformed = malformed
            .get(&(model.clone(), dataset.clone(), variant_id.clone(), mitigation))
            .copied()
            .unwrap_or(0);
        groups.push(OutcomeGroup {
            model,
            dataset,
            variant_id,
            mitigation,
            outcomes,
            malformed,
        });
    }

    Ok(ScoreOutput { groups, quarantine })
}

/// Write quarantined responses for inspection.
pub fn write_quarantine(path: &Path, records: &[QuarantineRecord]) -> Result<(), RunnerError> {
    if records.is_empty() {
        return Ok(());
    }
    let file = File::create(path).map_err(|e| RunnerError::Io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| RunnerError::Serialize(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| RunnerError::Io(path.display().to_string(), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedPolicy;
    use crate::dataset::write_items;
    use std::collections::BTreeMap as Meta;

    fn items(n: usize) -> Vec<UnifiedItem> {
        (0..n)
            .map(|i| UnifiedItem {
                id: format!("q{i:04}"),
                domain: "truthfulqa".to_string(),
                question: format!("question {i}"),
                correct_answer: format!("right {i}"),
                incorrect_answer: format!("wrong {i}"),
                metadata: Meta::new(),
            })
            .collect()
    }

    fn config(dir: &Path, n_items: usize, policy: ScriptedPolicy, mitigations: Vec<Mitigation>) -> RunConfig {
        let data_path = dir.join("items.jsonl");
        write_items(&data_path, &items(n_items)).unwrap();
        RunConfig {
            experiment: Experiment::Benchmark,
            datasets: vec![DatasetRef {
                domain: "truthfulqa".to_string(),
                path: data_path,
            }],
            models: vec![ModelEntry {
                name: "scripted".to_string(),
                backend: BackendSpec::Scripted(policy),
            }],
            variants: vec![],
            mitigations,
            raio_spec: None,
            output_dir: dir.to_path_buf(),
            seed: 7,
        }
    }

    #[test]
    fn expansion_counts_four_conditions_per_item() {
        let dir = tempfile::tempdir().unwrap();
        let config = config(dir.path(), 300, ScriptedPolicy::AlwaysAnswer1, vec![]);
        let cells = expand(&config).unwrap();
        assert_eq!(cells.len(), 1200);
    }

    #[test]
    fn mitigation_doubles_only_c2_cells() {
        let dir = tempfile::tempdir().unwrap();
        let config = config(dir.path(), 50, ScriptedPolicy::AlwaysAnswer1, vec![Mitigation::Honesty]);
        let cells = expand(&config).unwrap();
        // 4 baseline cells + 2 mitigated C2 copies per item.
        assert_eq!(cells.len(), 50 * 6);
        let mitigated: Vec<_> = cells.iter().filter(|(k, _)| k.mitigation.is_some()).collect();
        assert_eq!(mitigated.len(), 100);
        assert!(mitigated.iter().all(|(k, _)| k.condition.is_c2()));
    }

    #[test]
    fn run_is_idempotent_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let config = config(
            dir.path(),
            30,
            ScriptedPolicy::Deferential { competence: 0.8, seed: 3 },
            vec![],
        );

        // First pass: stop halfway.
        let first = run(&config, RunOptions { cell_limit: Some(60) }).unwrap();
        assert_eq!(first.completed, 60);
        let store = Store::open(&config.output_dir.join("store")).unwrap();
        let after_first = store.load_records().unwrap();
        assert_eq!(after_first.len(), 60);

        // Second pass: completes the rest without touching earlier records.
        let second = run(&config, RunOptions::default()).unwrap();
        assert_eq!(second.already_complete, 60);
        assert_eq!(second.completed, 60);
        let after_second = store.load_records().unwrap();
        assert_eq!(after_second.len(), 120);
        let first_keys: Vec<String> = after_first.iter().map(|r| r.key.canonical()).collect();
        let second_prefix: Vec<String> = after_second[..60].iter().map(|r| r.key.canonical()).collect();
        assert_eq!(first_keys, second_prefix);

        // Third pass: nothing left to do.
        let third = run(&config, RunOptions::default()).unwrap();
        assert_eq!(third.dispatched, 0);
        assert_eq!(store.load_records().unwrap().len(), 120);
    }

    #[test]
    fn scripted_run_scores_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let config = config(
            dir.path(),
            100,
            ScriptedPolicy::Deferential { competence: 1.0, seed: 5 },
            vec![],
        );
        let summary = run(&config, RunOptions::default()).unwrap();
        assert_eq!(summary.completed, 400);
        assert_eq!(summary.excluded, 0);

        let store = Store::open(&config.output_dir.join("store")).unwrap();
        let scored = score_store(&store).unwrap();
        assert_eq!(scored.groups.len(), 1);
        let group = &scored.groups[0];
        assert_eq!(group.outcomes.len(), 100);
        assert!(group.outcomes.iter().all(|o| o.is_complete()));
        // Perfect C1 competence, blanket C2 affirmation.
        assert!(group.outcomes.iter().all(|o| o.c1t && o.c1f && o.c2c && !o.c2i));
        assert_eq!(group.malformed, 0);
    }

    #[test]
    fn key_canonicalization_is_injective_for_awkward_ids() {
        let base = ResultKey {
            model: "m".to_string(),
            dataset: "d".to_string(),
            item_id: "a|b".to_string(),
            condition: ConditionKind::C1True,
            variant_id: "v".to_string(),
            mitigation: None,
        };
        let mut other = base.clone();
        other.item_id = "a".to_string();
        other.variant_id = "b|v".to_string();
        assert_ne!(base.canonical(), other.canonical());
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), 1, ScriptedPolicy::AlwaysAnswer1, vec![]);
        c.models.clear();
        assert!(c.validate().is_err());

        let mut c2 = config(dir.path(), 1, ScriptedPolicy::AlwaysAnswer1, vec![]);
        c2.experiment = Experiment::Raio;
        assert!(c2.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), 1, ScriptedPolicy::ContentJudge { competence: 0.9, seed: 1 }, vec![Mitigation::Honesty]);
        let text = toml::to_string(&c).unwrap();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, c);
    }
}
