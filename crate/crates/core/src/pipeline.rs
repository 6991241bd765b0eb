//! Pipeline stages behind the command-line interface.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::check::{CheckJob, CheckVerdict, CheckerPool, ErrorClass, VerdictStatus};
use crate::config::{Backend, ConfigError, RunConfig};
use crate::corpus::{self, Corpus, CorpusError, DefinitionRecord, Split, SplitAssignment};
use crate::embed::{sha256_hex, EmbedError};
use crate::generate::{
    Candidate, FinishReason, GenError, GenerationClient, GenerationRequest, Generator, GeneratorConfig,
    MockGenerator, RemoteGenConfig, RemoteGenerator,
};
use crate::lang::LexTokenizer;
use crate::metrics::{self, ExampleOutcome, MetricsError, RunHeader, RunReport, SampleOutcome};
use crate::premsel::{self, BaseEncoder, PremiseMode, PremiseModel, PremiseSelector, PremselError, RankingMetrics};
use crate::prompt::{self, PromptBundle, PromptError, PromptSettings, PromptTemplate};
use crate::retrieve::{self, RetrievalIndex, RetrieveError};

pub const GENERATION_LOG: &str = "generations.jsonl";
pub const VERDICT_LOG: &str = "verdicts.jsonl";
pub const REPORT_FILE: &str = "report.jsonl";
pub const BUNDLE_FILE: &str = "bundles.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{} validation problem(s):\n{}", .0.len(), .0.join("\n"))]
    Validation(Vec<String>),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Premises(#[from] PremselError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// 2 for bad input, 3 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) | PipelineError::Corpus(_) | PipelineError::Validation(_) => 2,
            _ => 3,
        }
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Corpus with its split assignment.
pub struct Workspace {
    pub config: RunConfig,
    pub corpus: Corpus,
    pub splits: SplitAssignment,
}

impl Workspace {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let corpus = corpus::load_corpus(&config.corpus)?;
        let splits = if config.splits.from_labels {
            let mut s = SplitAssignment::from_records(&corpus)?;
            s.cross_projects.extend(config.splits.cross_projects.iter().cloned());
            s
        } else {
            corpus::make_splits(&corpus.graph, &config.splits.cross_projects, config.splits.fractions, config.splits.seed)?
        };
        Ok(Workspace { config: config.clone(), corpus, splits })
    }

    pub fn records_in(&self, split: Split) -> Vec<&DefinitionRecord> {
        self.corpus.records.iter().filter(|r| self.splits.split_of(&r.file) == Some(split)).collect()
    }

    /// Synthesis targets, ordered by id.
    pub fn evaluation_records(&self) -> Vec<&DefinitionRecord> {
        let wanted: BTreeSet<Split> = self.config.splits.evaluate.iter().copied().collect();
        let mut recs: Vec<&DefinitionRecord> = self
            .corpus
            .records
            .iter()
            .filter(|r| self.splits.split_of(&r.file).is_some_and(|s| wanted.contains(&s)))
            .collect();
        recs.sort_by(|a, b| a.id.cmp(&b.id));
        recs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub records: usize,
    pub files: usize,
    pub split_sizes: BTreeMap<Split, usize>,
    pub violations: Vec<String>,
    pub clones: Vec<(String, String)>,
}

pub fn validate(config: &RunConfig) -> Result<ValidationReport> {
    let ws = Workspace::load(config)?;
    let mut violations: Vec<String> = ws.splits.violations(&ws.corpus.graph).iter().map(ToString::to_string).collect();
    if let Some(script) = &config.checker.stub_script {
        if !script.exists() {
            violations.push(format!("stub script `{}` does not exist", script.display()));
        }
    }
    if let Some(t) = &config.prompt.template {
        if !t.exists() {
            violations.push(format!("prompt template `{}` does not exist", t.display()));
        }
    }
    let mut split_sizes = BTreeMap::new();
    for rec in &ws.corpus.records {
        if let Some(s) = ws.splits.split_of(&rec.file) {
            *split_sizes.entry(s).or_insert(0) += 1;
        }
    }
    Ok(ValidationReport {
        records: ws.corpus.records.len(),
        files: ws.corpus.graph.len(),
        split_sizes,
        violations,
        clones: corpus::clone_report(&ws.corpus.records, &ws.splits),
    })
}

/// Writes the corpus with every record labelled by its split.
pub fn write_split_corpus(config: &RunConfig, out: &Path) -> Result<BTreeMap<Split, usize>> {
    let ws = Workspace::load(config)?;
    let violations = ws.splits.violations(&ws.corpus.graph);
    if !violations.is_empty() {
        return Err(PipelineError::Validation(violations.iter().map(ToString::to_string).collect()));
    }
    let mut labelled = ws.corpus.clone();
    let mut sizes = BTreeMap::new();
    for rec in &mut labelled.records {
        rec.split = ws.splits.split_of(&rec.file);
        if let Some(s) = rec.split {
            *sizes.entry(s).or_insert(0) += 1;
        }
    }
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    corpus::save_corpus(&labelled, out)?;
    Ok(sizes)
}

fn index_path(config: &RunConfig) -> PathBuf {
    config.retrieval.index_path.clone().unwrap_or_else(|| config.output_dir.join("index.bin"))
}

pub fn build_index(config: &RunConfig) -> Result<usize> {
    let ws = Workspace::load(config)?;
    let provider = config.retrieval.provider.build()?;
    let path = index_path(config);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let index = RetrievalIndex::load_or_build(&path, &ws.corpus.records, provider, &LexTokenizer)?;
    Ok(index.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub examples: usize,
    pub insufficient: Vec<String>,
    pub epochs: usize,
    pub final_loss: f64,
    pub model_path: PathBuf,
    pub loss_csv: PathBuf,
}

pub fn train_premises(config: &RunConfig) -> Result<TrainSummary> {
    let ws = Workspace::load(config)?;
    let train = ws.records_in(Split::Train);
    if train.is_empty() {
        return Err(PipelineError::Runtime("the training split is empty".into()));
    }
    let pairs = premsel::build_training_pairs(train.iter().copied(), config.premises.training.seed);
    if pairs.examples.is_empty() {
        return Err(PipelineError::Runtime("no training record has ideal premises".into()));
    }
    let texts = premsel::premise_texts(&ws.corpus.records);
    let base = config.premises.base.build()?;
    let mut encoder = BaseEncoder::new(base.as_ref());
    let mut model = PremiseModel::new(base.dimension(), config.premises.head_dimension, config.seed);
    let trace = premsel::train(&mut model, &pairs.examples, &texts, &mut encoder, &config.premises.training)?;
    if let Some(dir) = config.premises.model_path.parent() {
        fs::create_dir_all(dir)?;
    }
    model.save(&config.premises.model_path)?;
    fs::create_dir_all(&config.output_dir)?;
    let loss_csv = config.output_dir.join("premise_loss.csv");
    premsel::write_loss_csv(&trace, File::create(&loss_csv)?)?;
    Ok(TrainSummary {
        examples: pairs.examples.len(),
        insufficient: pairs.insufficient,
        epochs: trace.len(),
        final_loss: *trace.last().unwrap(),
        model_path: config.premises.model_path.clone(),
        loss_csv,
    })
}

pub fn eval_premises(config: &RunConfig) -> Result<RankingMetrics> {
    let ws = Workspace::load(config)?;
    let model = PremiseModel::load(&config.premises.model_path)?;
    let base = config.premises.base.build()?;
    let mut encoder = BaseEncoder::new(base.as_ref());
    let texts = premsel::premise_texts(&ws.corpus.records);
    let mut rankings = Vec::new();
    let mut truth = BTreeMap::new();
    for rec in ws.evaluation_records().into_iter().filter(|r| !r.ideal_premises.is_empty()) {
        rankings.push(premsel::rank_premises(&model, &mut encoder, &rec.id, &rec.goal_type, &rec.in_scope, &texts)?);
        truth.insert(rec.id.clone(), rec.ideal_premises.iter().cloned().collect());
    }
    let m = premsel::evaluate_ranking(&rankings, &truth)?;
    fs::create_dir_all(&config.output_dir)?;
    fs::write(
        config.output_dir.join("premise_eval.json"),
        serde_json::to_string_pretty(&m).map_err(std::io::Error::other)? + "\n",
    )?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationEntry {
    pub example_id: String,
    pub attempts: u32,
    pub bundle: PromptBundle,
    pub candidates: Vec<Candidate>,
}

/// Parses a JSON-lines log, skipping lines that do not parse (for example a
/// line cut short by an interrupted write).
fn read_log<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let Ok(file) = File::open(path) else { return Ok(Vec::new()) };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => out.push(v),
            Err(e) => log::warn!("{}:{}: skipping unreadable entry: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

fn append_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Ok(());
    }
    let mut f = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    for item in items {
        writeln!(f, "{}", serde_json::to_string(item).map_err(std::io::Error::other)?)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Generate at most this many new examples in this invocation.
    pub limit: Option<usize>,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub total: usize,
    pub completed: usize,
    pub generated_now: usize,
    pub checked_now: usize,
    pub checker_restarts: u32,
    pub report: PathBuf,
}

fn generation_client(config: &RunConfig, ws: &Workspace) -> Result<Box<dyn GenerationClient>> {
    Ok(match config.generation.backend {
        Backend::Mock => Box::new(MockGenerator {
            seed: config.generation.mock.seed,
            default_mode: config.generation.mock.mode,
            schedule: config.generation.mock.schedule.clone(),
            ground_truth: ws.corpus.records.iter().map(|r| (r.id.clone(), r.body.clone())).collect(),
        }),
        Backend::Remote => Box::new(RemoteGenerator::new(RemoteGenConfig::from_env()?)),
    })
}

fn load_template(config: &RunConfig) -> Result<PromptTemplate> {
    let mut t = match &config.prompt.template {
        Some(p) => PromptTemplate::parse(&fs::read_to_string(p)?)?,
        None => PromptTemplate::default(),
    };
    if let Some(sep) = &config.prompt.separator {
        t = t.with_separator(sep.clone());
    }
    Ok(t)
}

/// Builds prompts and generates candidates for `pending`, appending each
/// finished example to the generation log.
fn generate_pending(ws: &Workspace, pending: &[&DefinitionRecord], log_path: &Path) -> Result<usize> {
    let config = &ws.config;
    let provider = config.retrieval.provider.build()?;
    let index = match &config.retrieval.index_path {
        Some(p) => RetrievalIndex::load_or_build(p, &ws.corpus.records, provider, &LexTokenizer)?,
        None => retrieve::build_index(&ws.corpus.records, provider, &LexTokenizer)?,
    };
    let model = match config.premises.mode {
        PremiseMode::Model => Some(PremiseModel::load(&config.premises.model_path).map_err(|e| {
            PipelineError::Runtime(format!("premise model `{}`: {e}", config.premises.model_path.display()))
        })?),
        _ => None,
    };
    let base = config.premises.base.build()?;
    let texts = premsel::premise_texts(&ws.corpus.records);
    let template = load_template(config)?;
    let budget = config.prompt.profile.budget();
    let settings = PromptSettings {
        budget,
        format: config.prompt.format,
        ablations: &config.prompt.ablations,
        template: &template,
        tokenizer: &LexTokenizer,
    };
    let client = generation_client(config, ws)?;
    let generator = Generator::new(
        client.as_ref(),
        GeneratorConfig {
            max_in_flight: config.generation.max_in_flight.max(1),
            requests_per_minute: config.generation.requests_per_minute,
            token_cap: config.generation.token_cap,
            ..GeneratorConfig::default()
        },
    )
    .with_transcript(&config.output_dir.join("transcript.jsonl"))?;

    let queue = Mutex::new(pending.iter().copied().collect::<VecDeque<_>>());
    let writer = Mutex::new(());
    let failure: Mutex<Option<PipelineError>> = Mutex::new(None);
    let done = Mutex::new(0usize);
    thread::scope(|s| {
        for _ in 0..config.generation.max_in_flight.max(1).min(pending.len().max(1)) {
            s.spawn(|| {
                let mut selector = model.as_ref().map(|m| PremiseSelector {
                    model: m,
                    encoder: BaseEncoder::new(base.as_ref()),
                    texts: &texts,
                    top_k: config.premises.top_k,
                });
                loop {
                    if failure.lock().unwrap().is_some() {
                        break;
                    }
                    let Some(rec) = queue.lock().unwrap().pop_front() else { break };
                    let mut step = || -> Result<GenerationEntry> {
                        let eligible =
                            retrieve::eligible(config.retrieval.strategy, &ws.splits, &ws.corpus.graph, &rec.id, &ws.corpus.records)?;
                        let hits = index.retrieve_related(&rec.goal_type, &eligible, budget.related_tokens)?;
                        let premises = premsel::premise_source(config.premises.mode, rec, selector.as_mut())?;
                        let bundle = prompt::assemble(rec, &hits, &premises, &settings);
                        let request = GenerationRequest {
                            prompt_text: bundle.text.clone(),
                            sample_count: config.generation.k,
                            temperature: config.generation.temperature,
                            max_tokens: budget.generation_tokens,
                            stop_sequences: config.generation.stop.clone(),
                            model_id: config.generation.model_id.clone(),
                        };
                        let out = generator.generate(&rec.id, &request)?;
                        Ok(GenerationEntry { example_id: rec.id.clone(), attempts: out.attempts, bundle, candidates: out.candidates })
                    };
                    match step() {
                        Ok(entry) => {
                            let _guard = writer.lock().unwrap();
                            if let Err(e) = append_lines(log_path, &[entry]) {
                                failure.lock().unwrap().get_or_insert(e);
                                break;
                            }
                            *done.lock().unwrap() += 1;
                        }
                        Err(e) => {
                            failure.lock().unwrap().get_or_insert(e);
                            break;
                        }
                    }
                }
            });
        }
    });
    match failure.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(done.into_inner().unwrap()),
    }
}

fn generation_failed_verdict(c: &Candidate) -> CheckVerdict {
    CheckVerdict {
        example_id: c.example_id.clone(),
        sample_index: c.sample_index,
        status: VerdictStatus::Failed,
        errors: Vec::new(),
        wall_ms: 0,
    }
}

/// Runs the full pipeline, resuming from any logs already in the output
/// directory.
pub fn run(config: &RunConfig, options: RunOptions) -> Result<RunSummary> {
    let ws = Workspace::load(config)?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let gen_log = out.join(GENERATION_LOG);
    let verdict_log = out.join(VERDICT_LOG);
    let eval = ws.evaluation_records();
    let eval_ids: BTreeSet<&str> = eval.iter().map(|r| r.id.as_str()).collect();

    let mut generated: BTreeMap<String, GenerationEntry> = BTreeMap::new();
    for e in read_log::<GenerationEntry>(&gen_log)? {
        if eval_ids.contains(e.example_id.as_str()) {
            generated.entry(e.example_id.clone()).or_insert(e);
        }
    }
    let pending: Vec<&DefinitionRecord> = eval
        .iter()
        .copied()
        .filter(|r| !generated.contains_key(&r.id))
        .take(options.limit.unwrap_or(usize::MAX))
        .collect();
    let mut generation_error = None;
    let generated_now = if pending.is_empty() {
        0
    } else {
        match generate_pending(&ws, &pending, &gen_log) {
            Ok(n) => n,
            Err(e) => {
                generation_error = Some(e);
                0
            }
        }
    };
    generated.clear();
    for e in read_log::<GenerationEntry>(&gen_log)? {
        if eval_ids.contains(e.example_id.as_str()) {
            generated.entry(e.example_id.clone()).or_insert(e);
        }
    }

    let mut verdicts: HashMap<(String, usize), CheckVerdict> = HashMap::new();
    for v in read_log::<CheckVerdict>(&verdict_log)? {
        verdicts.entry((v.example_id.clone(), v.sample_index)).or_insert(v);
    }
    let by_id = ws.corpus.by_id();
    let mut jobs = Vec::new();
    let mut direct = Vec::new();
    for entry in generated.values() {
        let rec = by_id[entry.example_id.as_str()];
        for c in &entry.candidates {
            if verdicts.contains_key(&(c.example_id.clone(), c.sample_index)) {
                continue;
            }
            if c.finish_reason == FinishReason::Error {
                direct.push(generation_failed_verdict(c));
            } else {
                jobs.push(CheckJob {
                    example_id: c.example_id.clone(),
                    sample_index: c.sample_index,
                    file: rec.file.clone(),
                    defn_id: rec.id.clone(),
                    source: c.text.clone(),
                });
            }
        }
    }
    let mut checker_restarts = 0;
    let checked_now = jobs.len();
    if !jobs.is_empty() {
        let workers = options.workers.unwrap_or(config.checker.workers).max(1);
        let pool = CheckerPool::new(config.checker.settings()?, workers);
        let report = pool.run(&jobs);
        checker_restarts = report.restarts;
        for i in &report.incidents {
            log::warn!("checker incident on {}#{}: {}", i.example_id, i.sample_index, i.detail);
        }
        direct.extend(report.verdicts);
    }
    append_lines(&verdict_log, &direct)?;
    for v in direct {
        verdicts.entry((v.example_id.clone(), v.sample_index)).or_insert(v);
    }

    let mut outcomes = Vec::new();
    let mut bundles = Vec::new();
    for entry in generated.values() {
        let rec = by_id[entry.example_id.as_str()];
        let samples: Option<Vec<SampleOutcome>> = entry
            .candidates
            .iter()
            .map(|c| {
                verdicts.get(&(c.example_id.clone(), c.sample_index)).map(|v| SampleOutcome {
                    sample_index: c.sample_index,
                    text: c.text.clone(),
                    finish_reason: c.finish_reason,
                    verdict: v.clone(),
                })
            })
            .collect();
        let Some(samples) = samples else { continue };
        outcomes.push(ExampleOutcome {
            example_id: rec.id.clone(),
            class: rec.class,
            ground_truth: rec.body.clone(),
            samples,
        });
        bundles.push(json!({"example_id": entry.example_id, "bundle": entry.bundle}));
    }
    let completed = outcomes.len();
    let header = RunHeader {
        run_id: config.run_id.clone(),
        model_id: config.generation.model_id.clone(),
        prompt_format: config.prompt.format,
        ablations: config.prompt.ablations.clone(),
        retrieval_strategy: config.retrieval.strategy,
        premise_mode: config.premises.mode,
        samples_per_example: config.generation.k,
    };
    let report = RunReport::new(header, outcomes)?;
    let report_path = out.join(REPORT_FILE);
    let mut w = BufWriter::new(File::create(&report_path)?);
    report.write(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(out.join(BUNDLE_FILE))?);
    for b in &bundles {
        writeln!(w, "{b}")?;
    }
    w.flush()?;
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": config.content_hash(),
        "corpus_hash": sha256_hex(&fs::read(&config.corpus)?),
        "examples": eval.len(),
        "completed": completed,
        "samples_per_example": config.generation.k,
    });
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)? + "\n")?;
    if let Some(e) = generation_error {
        return Err(e);
    }
    Ok(RunSummary { total: eval.len(), completed, generated_now, checked_now, checker_restarts, report: report_path })
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    Ok(RunReport::read(BufReader::new(File::open(path)?))?)
}

pub fn read_bundles(path: &Path) -> Result<BTreeMap<String, PromptBundle>> {
    #[derive(Deserialize)]
    struct Line {
        example_id: String,
        bundle: PromptBundle,
    }
    Ok(read_log::<Line>(path)?.into_iter().map(|l| (l.example_id, l.bundle)).collect())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| PipelineError::Io(std::io::Error::other(e)))
}

fn csv_row<I, T>(w: &mut csv::Writer<File>, row: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    w.write_record(row).map_err(|e| PipelineError::Io(std::io::Error::other(e)))
}

fn signature_label(sig: &[String]) -> String {
    if sig.is_empty() {
        "none".into()
    } else {
        sig.join("+")
    }
}

/// Scores one or more reports, writing CSV tables and `summary.json` to
/// `out_dir`. Prompt bundles are read from `bundles.jsonl` beside each report
/// when present.
pub fn score(reports: &[PathBuf], ks: &[usize], out_dir: &Path) -> Result<serde_json::Value> {
    if reports.is_empty() {
        return Err(MetricsError::NoReports.into());
    }
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 {
        return Err(MetricsError::InvalidK.into());
    }
    let kmax = *ks.last().unwrap();
    let loaded: Vec<RunReport> = reports.iter().map(|p| read_report(p)).collect::<Result<_>>()?;
    let refs: Vec<&RunReport> = loaded.iter().collect();
    fs::create_dir_all(out_dir)?;

    let mut vk = csv_writer(&out_dir.join("verify_at_k.csv"))?;
    csv_row(&mut vk, ["run_id", "k", "percent", "solved", "total", "shortfall"])?;
    let mut cb = csv_writer(&out_dir.join("class_breakdown.csv"))?;
    csv_row(&mut cb, ["run_id", "k", "class", "solved", "total", "percent"])?;
    let mut er = csv_writer(&out_dir.join("errors.csv"))?;
    csv_row(&mut er, ["run_id", "class", "count", "percent"])?;
    let mut ed = csv_writer(&out_dir.join("edit_distance.csv"))?;
    csv_row(&mut ed, ["run_id", "example_id", "distance"])?;
    let mut ov = csv_writer(&out_dir.join("identifier_overlap.csv"))?;
    csv_row(&mut ov, ["run_id", "example_id", "solved", "context", "related", "premises"])?;

    let mut runs = Vec::new();
    for (report, path) in loaded.iter().zip(reports) {
        let id = &report.header.run_id;
        let mut vks = Vec::new();
        for &k in &ks {
            let v = metrics::verify_at_k(report, k)?;
            csv_row(&mut vk, [id.clone(), k.to_string(), v.percent.to_string(), v.solved.to_string(), v.total.to_string(), v.shortfall.to_string()])?;
            for (class, s) in metrics::class_breakdown(report, k) {
                csv_row(&mut cb, [id.clone(), k.to_string(), class.to_string(), s.solved.to_string(), s.total.to_string(), s.percent.to_string()])?;
            }
            vks.push(v);
        }
        let errors = metrics::error_distribution(report);
        for c in ErrorClass::ALL {
            let (n, p) = errors.classes[&c];
            csv_row(&mut er, [id.clone(), c.as_str().to_string(), n.to_string(), p.to_string()])?;
        }
        let edits = metrics::min_edit_distance(report)?;
        for (ex, d) in &edits.per_example {
            if let Some(d) = d {
                csv_row(&mut ed, [id.clone(), ex.clone(), d.to_string()])?;
            }
        }
        let bundle_path = path.parent().unwrap_or(Path::new(".")).join(BUNDLE_FILE);
        let overlap = if bundle_path.exists() {
            let bundles = read_bundles(&bundle_path)?;
            let t = metrics::identifier_overlap(report, &bundles, kmax)?;
            for r in &t.rows {
                let cell = |c| r.overlap[&c].to_string();
                csv_row(
                    &mut ov,
                    [
                        id.clone(),
                        r.example_id.clone(),
                        r.solved.to_string(),
                        cell(prompt::Component::Context),
                        cell(prompt::Component::Related),
                        cell(prompt::Component::Premises),
                    ],
                )?;
            }
            Some(t.summary)
        } else {
            None
        };
        runs.push(json!({
            "run_id": id,
            "verify_at_k": vks,
            "class_breakdown": metrics::class_breakdown(report, kmax),
            "errors": errors,
            "edit_distance": edits.summary,
            "identifier_overlap": overlap,
        }));
    }
    for w in [&mut vk, &mut cb, &mut er, &mut ed, &mut ov] {
        w.flush()?;
    }

    let mut nk = Vec::new();
    let mut exclusive = Vec::new();
    let mut nk_csv = csv_writer(&out_dir.join("verify_at_nk.csv"))?;
    csv_row(&mut nk_csv, ["k", "percent", "reports"])?;
    let mut ex_csv = csv_writer(&out_dir.join("exclusive_solves.csv"))?;
    csv_row(&mut ex_csv, ["k", "solved_by", "count"])?;
    for &k in &ks {
        let p = metrics::verify_at_nk(&refs, k)?;
        csv_row(&mut nk_csv, [k.to_string(), p.to_string(), refs.len().to_string()])?;
        nk.push(json!({"k": k, "percent": p}));
        let sig = metrics::exclusive_solves(&refs, k)?;
        for (s, n) in &sig {
            csv_row(&mut ex_csv, [k.to_string(), signature_label(s), n.to_string()])?;
        }
        let counts: BTreeMap<String, usize> = sig.into_iter().map(|(s, n)| (signature_label(&s), n)).collect();
        exclusive.push(json!({"k": k, "counts": counts}));
    }
    nk_csv.flush()?;
    ex_csv.flush()?;
    let summary = json!({ "runs": runs, "verify_at_nk": nk, "exclusive_solves": exclusive });
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary).map_err(std::io::Error::other)? + "\n")?;
    Ok(summary)
}
