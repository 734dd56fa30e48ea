//! Three-stage conversation runner with a resumable, index-ordered record sink.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{classify, TransitionLabel};
use crate::backend::{
    Backend, BackendConfig, BackendError, ChatMessage, Role, StageContext,
};
pub use crate::backend::StageTemperatures;
use crate::datasets::{
    dataset_sha256, load_commonsenseqa, load_gsm8k, synthetic_questions, DatasetError,
    GoldAnswer, Question, SamplingPlan,
};
use crate::extract::{
    extract_boxed, extract_decision, extract_letter, sentence_spans, AnswerKind, Decision,
    ExtractedAnswer, ExtractedDecision,
};
use crate::prompts::{
    AnswerFormat, CaseConfig, Linter, PromptClass, PromptError, PromptRegistry, PromptSetId,
    Stage,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("prompt template error: {0}")]
    Prompt(#[from] PromptError),
    #[error("invalid backend configuration: {0}")]
    Backend(#[from] BackendError),
    #[error("backend error at stage {stage} on question {id}: {source}")]
    StageFailure {
        stage: u64,
        id: String,
        #[source]
        source: BackendError,
    },
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record file {} is corrupt at line {line}: {message}", path.display())]
    CorruptRecords {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("frozen stage-1 records do not cover question index {0}")]
    FrozenGap(usize),
    #[error("existing output does not match this configuration: {0}")]
    ResumeMismatch(String),
}

/// Where a run's questions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    CommonsenseQa {
        path: PathBuf,
        #[serde(default)]
        first_n: Option<usize>,
    },
    Gsm8k {
        path: PathBuf,
        #[serde(default)]
        first_n: Option<usize>,
    },
    Synthetic { count: usize, k: usize, seed: u64 },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Vec<Question>, DatasetError> {
        let plan = |first_n: &Option<usize>| match first_n {
            Some(n) => SamplingPlan::FirstN(*n),
            None => SamplingPlan::All,
        };
        match self {
            DatasetSource::CommonsenseQa { path, first_n } => {
                load_commonsenseqa(path, plan(first_n))
            }
            DatasetSource::Gsm8k { path, first_n } => load_gsm8k(path, plan(first_n)),
            DatasetSource::Synthetic { count, k, seed } => synthetic_questions(*count, *k, *seed),
        }
    }

    pub fn answer_format(&self) -> AnswerFormat {
        match self {
            DatasetSource::Gsm8k { .. } => AnswerFormat::Boxed,
            _ => AnswerFormat::Letter,
        }
    }

    /// Stable identity string for run metadata: the file hash, or the
    /// generation parameters when there is no file.
    pub fn fingerprint(&self) -> Result<String, DatasetError> {
        match self {
            DatasetSource::CommonsenseQa { path, .. } | DatasetSource::Gsm8k { path, .. } => {
                Ok(format!("sha256:{}", dataset_sha256(path)?))
            }
            DatasetSource::Synthetic { count, k, seed } => {
                Ok(format!("synthetic:count={count},k={k},seed={seed}"))
            }
        }
    }
}

fn default_parallelism() -> usize {
    1
}

/// Everything one run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub backend: BackendConfig,
    pub set: PromptSetId,
    pub case: CaseConfig,
    pub temps: StageTemperatures,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub frozen_stage1: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub save_transcripts: bool,
    #[serde(default)]
    pub system_prompt: Option<String>,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
}

/// Full in-memory result of one question's conversation.
#[derive(Debug, Clone)]
pub struct Transcript {
    pub index: usize,
    pub question_id: String,
    pub messages: Vec<ChatMessage>,
    pub a_initial: ExtractedAnswer,
    pub r1_present: bool,
    pub decision: ExtractedDecision,
    pub r2_present: bool,
    pub a_final: Option<ExtractedAnswer>,
    pub stage_ms: [u128; 3],
}

/// One serialized line of a run's record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub index: usize,
    pub id: String,
    pub a_initial: AnswerKind,
    pub decision: Decision,
    pub a_final: AnswerKind,
    pub gold: GoldAnswer,
    pub transition: Option<TransitionLabel>,
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texts: Option<Vec<String>>,
}

/// What `run_all` returns: transcripts for newly executed questions,
/// records for the whole plan, and how many completions the backend served.
#[derive(Debug)]
pub struct RunOutput {
    pub transcripts: Vec<Transcript>,
    pub records: Vec<RunRecord>,
    pub backend_calls: u64,
}

/// Sidecar metadata written next to the record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: serde_json::Value,
    pub dataset: String,
    pub backend: String,
    pub plan_len: usize,
    pub reproducible: bool,
}

pub fn meta_path(output: &Path) -> PathBuf {
    output.with_extension("meta.json")
}

/// Config echo used for resume compatibility: everything but the
/// parallelism cap, which never affects results.
fn comparable_config(config: &RunConfig) -> serde_json::Value {
    let mut value = serde_json::to_value(config).expect("configs serialize");
    value
        .as_object_mut()
        .expect("configs serialize to objects")
        .remove("parallelism");
    value
}

struct RunEnv {
    backend: Backend,
    registry: PromptRegistry,
    class: PromptClass,
    format: AnswerFormat,
    config: RunConfig,
    frozen: BTreeMap<usize, String>,
}

impl RunEnv {
    fn prepare(config: &RunConfig) -> Result<Self, PipelineError> {
        if config.parallelism == 0 {
            return Err(PipelineError::Config(
                "parallelism must be at least 1".to_string(),
            ));
        }
        config.temps.validate()?;
        let backend = Backend::new(config.backend.clone())?;
        let registry = match &config.prompts_dir {
            Some(dir) => PromptRegistry::from_dir(dir)?,
            None => PromptRegistry::builtin(),
        };
        let linter = match &config.prompts_dir {
            Some(dir) => Linter::from_dir(dir)?,
            None => Linter::builtin(),
        };
        let format = config.dataset.answer_format();
        for stage in [Stage::Initial, Stage::Verify, Stage::Finalize] {
            registry.template(config.set, config.case, stage, format)?;
        }
        let verify = registry.template(config.set, config.case, Stage::Verify, format)?;
        let finalize = registry.template(config.set, config.case, Stage::Finalize, format)?;
        let class = linter
            .lint(verify)
            .classification
            .max(linter.lint(finalize).classification);

        let frozen = match &config.frozen_stage1 {
            None => BTreeMap::new(),
            Some(path) => {
                let mut map = BTreeMap::new();
                for record in read_records(path)? {
                    let text = record
                        .texts
                        .as_ref()
                        .and_then(|t| t.first())
                        .ok_or_else(|| {
                            PipelineError::Config(format!(
                                "frozen stage-1 source {} has no saved texts for index {}; \
                                 produce it with transcript saving enabled",
                                path.display(),
                                record.index
                            ))
                        })?;
                    map.insert(record.index, text.clone());
                }
                map
            }
        };

        Ok(Self {
            backend,
            registry,
            class,
            format,
            config: config.clone(),
            frozen,
        })
    }

    fn extract_answer(&self, text: &str) -> ExtractedAnswer {
        match self.format {
            AnswerFormat::Letter => extract_letter(text),
            AnswerFormat::Boxed => extract_boxed(text),
        }
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        question: &Question,
        stage: Stage,
    ) -> Result<String, PipelineError> {
        let ctx = StageContext {
            question,
            stage,
            case: self.config.case,
            prompt_class: self.class,
            temps: self.config.temps,
        };
        self.backend
            .complete(messages, self.config.temps.for_stage(stage), Some(&ctx))
            .map_err(|source| PipelineError::StageFailure {
                stage: stage.index(),
                id: question.id.clone(),
                source,
            })
    }

    fn run_question(&self, question: &Question) -> Result<Transcript, PipelineError> {
        let config = &self.config;
        let mut messages = Vec::new();
        if let Some(system) = &config.system_prompt {
            messages.push(ChatMessage::system(system.clone()));
        }
        let mut stage_ms = [0u128; 3];

        let initial_prompt =
            self.registry
                .render(config.set, config.case, Stage::Initial, question)?;
        messages.push(ChatMessage::user(initial_prompt));
        let text1 = if config.frozen_stage1.is_some() {
            self.frozen
                .get(&question.index)
                .cloned()
                .ok_or(PipelineError::FrozenGap(question.index))?
        } else {
            let started = Instant::now();
            let text = self.complete(&messages, question, Stage::Initial)?;
            stage_ms[0] = started.elapsed().as_millis();
            text
        };
        messages.push(ChatMessage::assistant(text1.clone()));
        let a_initial = self.extract_answer(&text1);
        let r1_present = has_text_beyond_answer_line(&text1, a_initial.span);

        let verify_prompt = self
            .registry
            .render(config.set, config.case, Stage::Verify, question)?;
        messages.push(ChatMessage::user(verify_prompt));
        let started = Instant::now();
        let text2 = self.complete(&messages, question, Stage::Verify)?;
        stage_ms[1] = started.elapsed().as_millis();
        messages.push(ChatMessage::assistant(text2.clone()));
        let decision = extract_decision(&text2, config.case.order);
        let r2_present = has_rationale_sentences(&text2, &decision);

        let finalize_prompt =
            self.registry
                .render(config.set, config.case, Stage::Finalize, question)?;
        messages.push(ChatMessage::user(finalize_prompt));
        let started = Instant::now();
        let text3 = self.complete(&messages, question, Stage::Finalize)?;
        stage_ms[2] = started.elapsed().as_millis();
        messages.push(ChatMessage::assistant(text3.clone()));
        let a_final = self.extract_answer(&text3);

        Ok(Transcript {
            index: question.index,
            question_id: question.id.clone(),
            messages,
            a_initial,
            r1_present,
            decision,
            r2_present,
            a_final: Some(a_final),
            stage_ms,
        })
    }

    fn record_from(&self, transcript: &Transcript, question: &Question) -> RunRecord {
        let a_final = transcript
            .a_final
            .as_ref()
            .map(|e| e.kind.clone())
            .unwrap_or(AnswerKind::None);
        let a_initial = transcript.a_initial.kind.clone();
        let (transition, error) = match classify(&question.gold, &a_initial, &a_final) {
            Ok(label) => (Some(label), None),
            Err(_) => {
                let miss = if a_initial == AnswerKind::None {
                    "extraction_miss:a_initial"
                } else if a_final == AnswerKind::None {
                    "extraction_miss:a_final"
                } else {
                    "extraction_miss:kind_mismatch"
                };
                (None, Some(miss.to_string()))
            }
        };
        let texts = if self.config.save_transcripts {
            Some(
                transcript
                    .messages
                    .iter()
                    .filter(|m| m.role == Role::Assistant)
                    .map(|m| m.content.clone())
                    .collect(),
            )
        } else {
            None
        };
        RunRecord {
            index: transcript.index,
            id: transcript.question_id.clone(),
            a_initial,
            decision: transcript.decision.decision,
            a_final,
            gold: question.gold.clone(),
            transition,
            error,
            texts,
        }
    }

    fn failure_record(&self, question: &Question, stage: u64, source: &BackendError) -> RunRecord {
        let class = match source {
            BackendError::InvalidParams(_) => "invalid_params",
            BackendError::SimulationContextMissing { .. } => "context_missing",
            BackendError::Http { .. } => "http",
            BackendError::RateLimited { .. } => "rate_limited",
            BackendError::Transport(_) => "transport",
            BackendError::MalformedResponse(_) => "malformed_response",
            BackendError::MissingToken(_) => "missing_token",
        };
        RunRecord {
            index: question.index,
            id: question.id.clone(),
            a_initial: AnswerKind::None,
            decision: Decision::Unclear,
            a_final: AnswerKind::None,
            gold: question.gold.clone(),
            transition: None,
            error: Some(format!("backend_stage{stage}:{class}")),
            texts: None,
        }
    }
}

/// True when the response holds anything besides the line carrying the answer.
fn has_text_beyond_answer_line(text: &str, span: Option<(usize, usize)>) -> bool {
    let Some((start, _)) = span else {
        return !text.trim().is_empty();
    };
    let mut offset = 0;
    let mut rest_is_blank = true;
    for line in text.split_inclusive('\n') {
        let covers_answer = (offset..offset + line.len()).contains(&start);
        if !covers_answer && !line.trim().is_empty() {
            rest_is_blank = false;
        }
        offset += line.len();
    }
    !rest_is_blank
}

/// True when the verify text says more than its decision sentence.
fn has_rationale_sentences(text: &str, decision: &ExtractedDecision) -> bool {
    let sentences = sentence_spans(text);
    match decision.span {
        Some((start, _)) => sentences
            .iter()
            .any(|&(s, e)| !(s..e).contains(&start) && !text[s..e].trim().is_empty()),
        None => !text.trim().is_empty(),
    }
}

/// Runs the full three-stage conversation for one question.
pub fn run_question(config: &RunConfig, question: &Question) -> Result<Transcript, PipelineError> {
    let env = RunEnv::prepare(config)?;
    env.run_question(question)
}

/// Parses a record file written by `run_all`.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, PipelineError> {
    let file = File::open(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord =
            serde_json::from_str(&line).map_err(|e| PipelineError::CorruptRecords {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

/// Appends records in ascending index order, fsyncing line by line so an
/// interrupted run leaves a clean prefix behind.
struct RecordSink {
    file: Option<File>,
    path: Option<PathBuf>,
    expected: Vec<usize>,
    cursor: usize,
    pending: BTreeMap<usize, String>,
}

impl RecordSink {
    fn new(output: Option<&Path>, expected: Vec<usize>) -> Result<Self, PipelineError> {
        let (file, path) = match output {
            None => (None, None),
            Some(p) => {
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|source| PipelineError::Io {
                        path: p.to_path_buf(),
                        source,
                    })?;
                (Some(file), Some(p.to_path_buf()))
            }
        };
        Ok(Self {
            file,
            path,
            expected,
            cursor: 0,
            pending: BTreeMap::new(),
        })
    }

    fn push(&mut self, index: usize, line: String) -> Result<(), PipelineError> {
        self.pending.insert(index, line);
        while self.cursor < self.expected.len() {
            let next = self.expected[self.cursor];
            let Some(line) = self.pending.remove(&next) else { break };
            if let (Some(file), Some(path)) = (self.file.as_mut(), self.path.as_ref()) {
                let io_err = |source: std::io::Error| PipelineError::Io {
                    path: path.clone(),
                    source,
                };
                file.write_all(line.as_bytes()).map_err(io_err)?;
                file.write_all(b"\n").map_err(io_err)?;
                file.sync_data().map_err(io_err)?;
            }
            self.cursor += 1;
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.cursor == self.expected.len() && self.pending.is_empty()
    }
}

fn prepare_resume(
    config: &RunConfig,
    meta: &RunMeta,
) -> Result<Vec<RunRecord>, PipelineError> {
    let Some(output) = &config.output else {
        return Ok(Vec::new());
    };
    if !output.exists() {
        return Ok(Vec::new());
    }
    let existing = read_records(output)?;
    if existing.is_empty() {
        return Ok(existing);
    }
    let meta_file = meta_path(output);
    if !meta_file.exists() {
        return Err(PipelineError::ResumeMismatch(format!(
            "{} has records but no metadata sidecar",
            output.display()
        )));
    }
    let raw = std::fs::read_to_string(&meta_file).map_err(|source| PipelineError::Io {
        path: meta_file.clone(),
        source,
    })?;
    let stored: RunMeta =
        serde_json::from_str(&raw).map_err(|e| PipelineError::CorruptRecords {
            path: meta_file.clone(),
            line: 1,
            message: e.to_string(),
        })?;
    if stored != *meta {
        return Err(PipelineError::ResumeMismatch(format!(
            "metadata in {} was written by a different configuration",
            meta_file.display()
        )));
    }
    Ok(existing)
}

/// Executes the plan with at most `parallelism` questions in flight,
/// skipping indices already present in the output file.
pub fn run_all(config: &RunConfig) -> Result<RunOutput, PipelineError> {
    let env = RunEnv::prepare(config)?;
    let questions = config.dataset.load()?;
    if questions.is_empty() {
        return Err(PipelineError::Config("the dataset plan is empty".to_string()));
    }
    if config.frozen_stage1.is_some() {
        for q in &questions {
            if !env.frozen.contains_key(&q.index) {
                return Err(PipelineError::FrozenGap(q.index));
            }
        }
    }

    let meta = RunMeta {
        config: comparable_config(config),
        dataset: config.dataset.fingerprint()?,
        backend: env.backend.kind().to_string(),
        plan_len: questions.len(),
        reproducible: env.backend.kind() == "simulated",
    };
    let existing = prepare_resume(config, &meta)?;
    let plan_indices: BTreeSet<usize> = questions.iter().map(|q| q.index).collect();
    let mut records: BTreeMap<usize, RunRecord> = BTreeMap::new();
    for record in existing {
        if !plan_indices.contains(&record.index) {
            return Err(PipelineError::ResumeMismatch(format!(
                "existing record index {} is outside the current plan",
                record.index
            )));
        }
        records.insert(record.index, record);
    }

    if let Some(output) = &config.output {
        let meta_file = meta_path(output);
        let body = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        std::fs::write(&meta_file, body).map_err(|source| PipelineError::Io {
            path: meta_file,
            source,
        })?;
    }

    let todo: Vec<&Question> = questions
        .iter()
        .filter(|q| !records.contains_key(&q.index))
        .collect();
    let expected: Vec<usize> = todo.iter().map(|q| q.index).collect();
    let mut sink = RecordSink::new(config.output.as_deref(), expected)?;

    let mut transcripts: BTreeMap<usize, Transcript> = BTreeMap::new();
    let next = AtomicUsize::new(0);
    let workers = config.parallelism.min(todo.len().max(1));
    let (tx, rx) = mpsc::channel::<Result<(usize, Option<Transcript>, RunRecord), PipelineError>>();

    std::thread::scope(|scope| -> Result<(), PipelineError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let todo = &todo;
            let env = &env;
            scope.spawn(move || loop {
                let slot = next.fetch_add(1, Ordering::Relaxed);
                if slot >= todo.len() {
                    break;
                }
                let question = todo[slot];
                let message = match env.run_question(question) {
                    Ok(transcript) => {
                        let record = env.record_from(&transcript, question);
                        Ok((question.index, Some(transcript), record))
                    }
                    Err(PipelineError::StageFailure { stage, source, .. }) => {
                        Ok((question.index, None, env.failure_record(question, stage, &source)))
                    }
                    Err(other) => Err(other),
                };
                if tx.send(message).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        for message in rx {
            let (index, transcript, record) = message?;
            let line = serde_json::to_string(&record).expect("records serialize");
            sink.push(index, line)?;
            if let Some(transcript) = transcript {
                transcripts.insert(index, transcript);
            }
            records.insert(index, record);
        }
        Ok(())
    })?;

    debug_assert!(sink.finished(), "the sink must drain every planned record");

    Ok(RunOutput {
        transcripts: transcripts.into_values().collect(),
        records: records.into_values().collect(),
        backend_calls: env.backend.call_count(),
    })
}
