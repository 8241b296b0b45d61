//! The seven-stage corpus build with per-stage checkpoints.
//!
//! Each stage reads its predecessor's output file from the output directory,
//! writes its own output and manifest atomically, and only then records
//! itself in `checkpoint.json`. A crash therefore leaves at worst an
//! unreferenced output file that the next run overwrites.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus_model::{
    read_records, write_json_document, write_records, Clock, CorpusRecord, Explanation, GenerationParams, IdGen,
    Lineage, RecordError, Scenario, StageManifest, StageName, Story, TherapyStyle, TEMP_PREFIX,
};
use crate::curation::{filter_sensitive, CurationError, Lexicon};
use crate::llm_gateway::{
    generate_batch, ChatBackend, ChatRequest, ChatResponse, GatewayError, MockBackend, ModelEndpoint, RetryPolicy,
};
use crate::prompt_kit::{self, split_enumerated, PromptError, PromptKit};
use crate::suffix_dedup::{dedup, ConcatCorpus, DedupConfig, DedupError, DedupMode, DedupReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} needs {missing} to be completed first")]
    Sequencing { stage: StageName, missing: StageName },
    #[error("checkpoint was written for config {found}, current config is {expected}; rerun without --resume to start over")]
    StaleCheckpoint { expected: String, found: String },
    #[error("output directory {0} is in use by another run")]
    Locked(PathBuf),
    #[error("stage {stage}: every request failed; first error: {source}")]
    Generation {
        stage: StageName,
        #[source]
        source: GatewayError,
    },
    #[error("stage {stage}: {source}")]
    Prompt {
        stage: StageName,
        #[source]
        source: PromptError,
    },
    #[error("stage {stage}: {source}")]
    Dedup {
        stage: StageName,
        #[source]
        source: DedupError,
    },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Curation(#[from] CurationError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrainstormMode {
    /// One completion per scenario returning an enumerated list.
    #[default]
    Enumerated,
    /// One completion per story.
    PerCall,
}

/// Model pool and sampling parameters of one generation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStage {
    /// Endpoint `model_id`s, used round-robin.
    pub pool: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<GenerationParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagesConfig {
    pub brainstorm: GenerationStage,
    pub rewrite: GenerationStage,
    pub respond: GenerationStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDedup {
    pub threshold: usize,
    pub mode: DedupMode,
}

impl StageDedup {
    fn config(self) -> DedupConfig {
        DedupConfig::new(self.threshold, self.mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupStages {
    pub stories: StageDedup,
    pub explanations: StageDedup,
    pub pairs: StageDedup,
}

impl Default for DedupStages {
    fn default() -> Self {
        Self {
            stories: StageDedup {
                threshold: 75,
                mode: DedupMode::DropDocuments,
            },
            explanations: StageDedup {
                threshold: 75,
                mode: DedupMode::ExciseSpans,
            },
            pairs: StageDedup {
                threshold: 100,
                mode: DedupMode::ExciseSpans,
            },
        }
    }
}

/// Declarative description of a corpus build. Relative paths are resolved
/// against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub scenario_path: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_stories")]
    pub stories_per_scenario: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub brainstorm_mode: BrainstormMode,
    #[serde(default)]
    pub retry: RetryPolicy,
    pub endpoints: Vec<ModelEndpoint>,
    pub stages: StagesConfig,
    #[serde(default)]
    pub dedup: DedupStages,
    /// Settings of the mock backend, used when running with `--mock`.
    #[serde(default)]
    pub mock: MockSettings,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSettings {
    pub latency_ms: Option<(u64, u64)>,
    pub duplicate_every: Option<usize>,
}

fn default_stories() -> usize {
    20
}

fn default_in_flight() -> usize {
    8
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut config: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(format!("invalid config: {e}")))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut config.scenario_path);
        resolve(&mut config.output_dir);
        if let Some(p) = config.lexicon_path.as_mut() {
            resolve(p);
        }
        if let Some(p) = config.templates_dir.as_mut() {
            resolve(p);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.stories_per_scenario == 0 {
            return err("stories_per_scenario must be at least 1".into());
        }
        if self.max_in_flight == 0 {
            return err("max_in_flight must be at least 1".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for e in &self.endpoints {
            if !ids.insert(e.model_id.as_str()) {
                return err(format!("endpoint model_id `{}` is declared twice", e.model_id));
            }
        }
        for (name, stage) in [
            ("brainstorm", &self.stages.brainstorm),
            ("rewrite", &self.stages.rewrite),
            ("respond", &self.stages.respond),
        ] {
            if stage.pool.is_empty() {
                return err(format!("stages.{name}.pool must not be empty"));
            }
            for id in &stage.pool {
                if !ids.contains(id.as_str()) {
                    return err(format!("stages.{name}.pool references unknown model `{id}`"));
                }
            }
            if let Some(p) = &stage.params {
                p.validate().map_err(|m| PipelineError::Config(format!("stages.{name}.params: {m}")))?;
            }
        }
        for (name, d) in [
            ("stories", self.dedup.stories),
            ("explanations", self.dedup.explanations),
            ("pairs", self.dedup.pairs),
        ] {
            d.config()
                .validate()
                .map_err(|e| PipelineError::Config(format!("dedup.{name}: {e}")))?;
        }
        Ok(())
    }

    fn pool(&self, stage: &GenerationStage) -> Vec<ModelEndpoint> {
        stage
            .pool
            .iter()
            .map(|id| self.endpoints.iter().find(|e| &e.model_id == id).expect("validated").clone())
            .collect()
    }

    /// Output file of `stage`, relative to the output directory.
    pub fn stage_file(stage: StageName) -> &'static str {
        match stage {
            StageName::Brainstorm => "stories.raw.jsonl",
            StageName::DedupStories => "stories.jsonl",
            StageName::Rewrite => "explanations.raw.jsonl",
            StageName::DedupExplanations => "explanations.jsonl",
            StageName::Respond => "pairs.raw.jsonl",
            StageName::DedupPairs => "pairs.jsonl",
            StageName::Filter => "corpus.jsonl",
        }
    }

    pub fn stage_path(&self, stage: StageName) -> PathBuf {
        self.output_dir.join(Self::stage_file(stage))
    }

    pub fn manifest_path(&self, stage: StageName) -> PathBuf {
        self.output_dir.join("manifests").join(format!("{stage}.json"))
    }

    /// Records removed by the sensitive-term filter.
    pub fn filtered_path(&self) -> PathBuf {
        self.output_dir.join("filtered.jsonl")
    }

    /// Hash of everything that affects the corpus content. Paths, concurrency
    /// and retry settings are excluded; input files are hashed by content.
    pub fn config_hash(&self, mock: bool) -> Result<String, PipelineError> {
        let file_hash = |p: &Path| -> Result<String, PipelineError> {
            let bytes = std::fs::read(p)
                .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", p.display())))?;
            Ok(hex(&Sha256::digest(&bytes)))
        };
        let templates = self.prompt_kit()?;
        let semantic = serde_json::json!({
            "scenarios": file_hash(&self.scenario_path)?,
            "lexicon": self.lexicon_path.as_deref().map(file_hash).transpose()?,
            "templates": [templates.brainstorm, templates.rewrite, templates.respond, templates.styles],
            "stories_per_scenario": self.stories_per_scenario,
            "seed": self.seed,
            "brainstorm_mode": self.brainstorm_mode,
            "endpoints": self.endpoints.iter().map(|e| (&e.model_id, &e.base_url)).collect::<Vec<_>>(),
            "stages": self.stages,
            "dedup": self.dedup,
            "mock_duplicate_every": if mock { self.mock.duplicate_every } else { None },
        });
        Ok(hex(&Sha256::digest(semantic.to_string().as_bytes())))
    }

    pub fn prompt_kit(&self) -> Result<PromptKit, PipelineError> {
        match &self.templates_dir {
            Some(dir) => PromptKit::load_dir(dir).map_err(|e| PipelineError::Config(e.to_string())),
            None => Ok(PromptKit::builtin()),
        }
    }

    pub fn lexicon(&self) -> Result<Lexicon, PipelineError> {
        Ok(match &self.lexicon_path {
            Some(p) => Lexicon::from_file(p)?,
            None => Lexicon::disabled(),
        })
    }

    /// The mock backend this config describes, seeded with `seed`.
    pub fn mock_backend(&self) -> MockBackend {
        MockBackend {
            seed: self.seed,
            latency_ms: self.mock.latency_ms,
            duplicate_every: self.mock.duplicate_every,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Which stages are done, for which config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub completed: Vec<StageName>,
    /// Output file of each completed stage, relative to the output directory.
    pub outputs: BTreeMap<StageName, String>,
}

impl Checkpoint {
    pub fn new(config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            completed: Vec::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn is_done(&self, stage: StageName) -> bool {
        self.completed.contains(&stage)
    }

    pub fn load(output_dir: &Path) -> Result<Option<Self>, PipelineError> {
        let path = output_dir.join(CHECKPOINT_FILE);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(RecordError::Io { path, source }.into()),
        };
        let checkpoint: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("corrupt checkpoint {}: {e}", path.display())))?;
        if checkpoint.completed.iter().enumerate().any(|(i, s)| s.index() != i) {
            return Err(PipelineError::Config(format!(
                "checkpoint {} lists stages out of order",
                path.display()
            )));
        }
        Ok(Some(checkpoint))
    }

    fn save(&self, output_dir: &Path) -> Result<(), PipelineError> {
        write_json_document(self, &output_dir.join(CHECKPOINT_FILE))?;
        Ok(())
    }
}

/// Exclusive hold on an output directory, released when dropped or when the
/// process dies.
pub struct OutputLock {
    _file: File,
}

impl OutputLock {
    pub fn acquire(output_dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(output_dir.join("manifests")).map_err(|source| RecordError::Io {
            path: output_dir.to_path_buf(),
            source,
        })?;
        let path = output_dir.join(LOCK_FILE);
        let file = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|source| RecordError::Io { path: path.clone(), source })?;
        match file.try_lock() {
            Ok(()) => {
                remove_stale_temp_files(output_dir)?;
                Ok(Self { _file: file })
            }
            Err(std::fs::TryLockError::WouldBlock) => Err(PipelineError::Locked(output_dir.to_path_buf())),
            Err(std::fs::TryLockError::Error(source)) => Err(RecordError::Io { path, source }.into()),
        }
    }
}

/// Deletes partial writes left by a process killed mid-write. Only safe while
/// the output lock is held.
fn remove_stale_temp_files(output_dir: &Path) -> Result<(), PipelineError> {
    for dir in [output_dir.to_path_buf(), output_dir.join("manifests")] {
        let io = |source| RecordError::Io { path: dir.clone(), source };
        for entry in std::fs::read_dir(&dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.is_file() && path.file_name().is_some_and(|n| n.to_string_lossy().starts_with(TEMP_PREFIX)) {
                log::warn!("removing partial write {}", path.display());
                std::fs::remove_file(&path).map_err(|source| RecordError::Io { path: path.clone(), source })?;
            }
        }
    }
    Ok(())
}

/// Splits `n` items into four contiguous blocks whose sizes differ by at most
/// one, larger blocks first.
pub fn style_bins(n: usize) -> [usize; 4] {
    let (q, r) = (n / 4, n % 4);
    std::array::from_fn(|b| q + usize::from(b < r))
}

/// Assigns CBT, DBT, PCT and RT to consecutive quarters of `stories`.
pub fn assign_styles(stories: &[Story]) -> Vec<(Story, TherapyStyle)> {
    let bins = style_bins(stories.len());
    let mut out = Vec::with_capacity(stories.len());
    let mut iter = stories.iter();
    for (size, style) in bins.into_iter().zip(TherapyStyle::ALL) {
        out.extend(iter.by_ref().take(size).map(|s| (s.clone(), style)));
    }
    out
}

/// Everything a stage needs besides the config.
pub struct RunContext<'a> {
    pub config: &'a PipelineConfig,
    pub backend: &'a dyn ChatBackend,
    pub clock: Clock,
    pub config_hash: String,
}

impl<'a> RunContext<'a> {
    pub fn new(config: &'a PipelineConfig, backend: &'a dyn ChatBackend, clock: Clock, mock: bool) -> Result<Self, PipelineError> {
        Ok(Self {
            config,
            backend,
            clock,
            config_hash: config.config_hash(mock)?,
        })
    }

    fn ids(&self, namespace: &str) -> IdGen {
        IdGen::new(self.clock, self.config.seed, namespace)
    }

    fn manifest(&self, stage: StageName, started_at: String, counts: (usize, usize, usize), dedup: Option<DedupReport>) -> StageManifest {
        StageManifest {
            stage_name: stage,
            input_count: counts.0,
            output_count: counts.1,
            removed_count: counts.2,
            config_hash: self.config_hash.clone(),
            started_at,
            finished_at: self.clock.timestamp(),
            dedup,
        }
    }
}

/// How a `run` invocation treats an existing checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Ignore any checkpoint and run every stage.
    Fresh,
    /// Skip stages the checkpoint lists as complete.
    Resume,
    /// Run a single stage (a no-op if already complete).
    Single(StageName),
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifests: Vec<StageManifest>,
    pub corpus_path: PathBuf,
}

/// Runs the pipeline under the output-directory lock.
pub fn run(ctx: &RunContext<'_>, mode: RunMode) -> Result<RunSummary, PipelineError> {
    let out = &ctx.config.output_dir;
    let _lock = OutputLock::acquire(out)?;
    let mut checkpoint = match mode {
        RunMode::Fresh => {
            let fresh = Checkpoint::new(&ctx.config_hash);
            fresh.save(out)?;
            fresh
        }
        RunMode::Resume | RunMode::Single(_) => match Checkpoint::load(out)? {
            Some(c) if c.config_hash != ctx.config_hash => {
                return Err(PipelineError::StaleCheckpoint {
                    expected: ctx.config_hash.clone(),
                    found: c.config_hash,
                })
            }
            Some(c) => c,
            None => Checkpoint::new(&ctx.config_hash),
        },
    };
    let stages: Vec<StageName> = match mode {
        RunMode::Single(stage) => vec![stage],
        _ => StageName::ALL.to_vec(),
    };
    let mut manifests = Vec::new();
    for stage in stages {
        manifests.push(run_stage(stage, ctx, &mut checkpoint)?);
    }
    Ok(RunSummary {
        manifests,
        corpus_path: ctx.config.stage_path(StageName::Filter),
    })
}

/// Runs one stage and records it in the checkpoint. A stage the checkpoint
/// already lists is not re-run; its stored manifest is returned.
pub fn run_stage(stage: StageName, ctx: &RunContext<'_>, checkpoint: &mut Checkpoint) -> Result<StageManifest, PipelineError> {
    let config = ctx.config;
    if checkpoint.is_done(stage) {
        log::info!("{stage}: already complete, skipping");
        return read_manifest(&config.manifest_path(stage));
    }
    if let Some(previous) = stage.previous() {
        if !checkpoint.is_done(previous) {
            return Err(PipelineError::Sequencing { stage, missing: previous });
        }
    }
    log::info!("{stage}: starting");
    let manifest = match stage {
        StageName::Brainstorm => brainstorm(ctx)?,
        StageName::DedupStories => dedup_stories(ctx)?,
        StageName::Rewrite => rewrite(ctx)?,
        StageName::DedupExplanations => dedup_explanations(ctx)?,
        StageName::Respond => respond(ctx)?,
        StageName::DedupPairs => dedup_pairs(ctx)?,
        StageName::Filter => filter(ctx)?,
    };
    write_json_document(&manifest, &config.manifest_path(stage))?;
    checkpoint.completed.push(stage);
    checkpoint
        .outputs
        .insert(stage, PipelineConfig::stage_file(stage).to_string());
    checkpoint.save(&config.output_dir)?;
    log::info!(
        "{stage}: input {} output {} removed {}",
        manifest.input_count,
        manifest.output_count,
        manifest.removed_count
    );
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<StageManifest, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("corrupt manifest {}: {e}", path.display())))
}

/// Sends the requests and fails only if there were requests and none
/// succeeded.
fn generate_all(
    ctx: &RunContext<'_>,
    stage: StageName,
    pool: &[ModelEndpoint],
    requests: &[ChatRequest],
) -> Result<Vec<Result<ChatResponse, GatewayError>>, PipelineError> {
    let results = generate_batch(ctx.backend, pool, requests, ctx.config.max_in_flight, &ctx.config.retry);
    if !results.is_empty() && results.iter().all(Result::is_err) {
        let first = results.into_iter().find_map(Result::err).expect("non-empty");
        return Err(PipelineError::Generation { stage, source: first });
    }
    for (i, r) in results.iter().enumerate() {
        if let Err(e) = r {
            log::warn!("{stage}: request {i} failed: {e}");
        }
    }
    Ok(results)
}

fn with_params(mut request: ChatRequest, params: &Option<GenerationParams>) -> ChatRequest {
    if let Some(p) = params {
        request.params = p.clone();
    }
    request
}

fn brainstorm(ctx: &RunContext<'_>) -> Result<StageManifest, PipelineError> {
    let stage = StageName::Brainstorm;
    let config = ctx.config;
    let started_at = ctx.clock.timestamp();
    let scenarios: Vec<Scenario> = read_records(&config.scenario_path)?;
    let kit = config.prompt_kit()?;
    let k = config.stories_per_scenario;
    let prompt_err = |source| PipelineError::Prompt { stage, source };

    // (scenario index, request)
    let mut requests = Vec::new();
    let mut owners = Vec::new();
    for (si, scenario) in scenarios.iter().enumerate() {
        match config.brainstorm_mode {
            BrainstormMode::Enumerated => {
                let r = kit.render_brainstorm(scenario, k).map_err(prompt_err)?;
                requests.push(with_params(r, &config.stages.brainstorm.params));
                owners.push(si);
            }
            BrainstormMode::PerCall => {
                for j in 0..k {
                    let mut r = with_params(kit.render_brainstorm(scenario, 1).map_err(prompt_err)?, &config.stages.brainstorm.params);
                    // Distinguishes otherwise identical calls.
                    let base = r.params.seed.unwrap_or(config.seed);
                    r.params.seed = Some(base.wrapping_add((si * k + j) as u64));
                    requests.push(r);
                    owners.push(si);
                }
            }
        }
    }
    let pool = config.pool(&config.stages.brainstorm);
    let results = generate_all(ctx, stage, &pool, &requests)?;

    let mut ids = ctx.ids("story");
    let created_at = ctx.clock.timestamp();
    let mut stories = Vec::new();
    let mut produced = vec![false; scenarios.len()];
    for ((request, result), &si) in requests.iter().zip(results).zip(&owners) {
        let Ok(response) = result else { continue };
        let expected = request.expected_items.unwrap_or(1);
        let items = match split_enumerated(&response.text, expected) {
            Ok(e) => e.items,
            Err(_) if config.brainstorm_mode == BrainstormMode::PerCall && !response.text.trim().is_empty() => {
                vec![response.text.trim().to_string()]
            }
            Err(e) => {
                log::warn!("{stage}: scenario {}: {e}", scenarios[si].id);
                continue;
            }
        };
        produced[si] |= !items.is_empty();
        for text in items {
            stories.push(Story {
                id: ids.next_id(),
                scenario_id: scenarios[si].id.clone(),
                text,
                model_id: response.model_id.clone(),
                params: request.params.clone(),
                created_at: created_at.clone(),
            });
        }
    }
    write_records(&stories, &config.stage_path(stage))?;
    let failed = produced.iter().filter(|p| !**p).count();
    Ok(ctx.manifest(stage, started_at, (scenarios.len(), stories.len(), failed), None))
}

/// Deduplicates `texts` and returns, per input, the surviving text (or
/// `None` if the document was removed).
fn dedup_texts(stage: StageName, ids: &[&str], texts: &[&str], config: DedupConfig) -> Result<(Vec<Option<String>>, DedupReport), PipelineError> {
    let err = |source| PipelineError::Dedup { stage, source };
    let corpus = ConcatCorpus::new(ids.iter().zip(texts).map(|(id, t)| (id.to_string(), t.as_bytes()))).map_err(err)?;
    let (kept, report) = dedup(&corpus, &config).map_err(err)?;
    let mut out = vec![None; texts.len()];
    for doc in kept {
        out[doc.index] = Some(String::from_utf8_lossy(&doc.bytes).into_owned());
    }
    Ok((out, report))
}

fn dedup_stories(ctx: &RunContext<'_>) -> Result<StageManifest, PipelineError> {
    let stage = StageName::DedupStories;
    let config = ctx.config;
    let started_at = ctx.clock.timestamp();
    let stories: Vec<Story> = read_records(&config.stage_path(StageName::Brainstorm))?;
    let ids: Vec<&str> = stories.iter().map(|s| s.id.as_str()).collect();
    let texts: Vec<&str> = stories.iter().map(|s| s.text.as_str()).collect();
    let (survivors, report) = dedup_texts(stage, &ids, &texts, config.dedup.stories.config())?;
    let kept: Vec<Story> = stories
        .iter()
        .zip(survivors)
        .filter_map(|(s, t)| t.map(|text| Story { text, ..s.clone() }))
        .collect();
    write_records(&kept, &config.stage_path(stage))?;
    Ok(ctx.manifest(stage, started_at, (stories.len(), kept.len(), stories.len() - kept.len()), Some(report)))
}

fn rewrite(ctx: &RunContext<'_>) -> Result<StageManifest, PipelineError> {
    let stage = StageName::Rewrite;
    let config = ctx.config;
    let started_at = ctx.clock.timestamp();
    let stories: Vec<Story> = read_records(&config.stage_path(StageName::DedupStories))?;
    let kit = config.prompt_kit()?;
    let assigned = assign_styles(&stories);
    let requests = assigned
        .iter()
        .map(|(story, style)| {
            kit.render_rewrite(story, *style)
                .map(|r| with_params(r, &config.stages.rewrite.params))
                .map_err(|source| PipelineError::Prompt { stage, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pool = config.pool(&config.stages.rewrite);
    let results = generate_all(ctx, stage, &pool, &requests)?;
    let mut ids = ctx.ids("explanation");
    let mut explanations = Vec::new();
    for (((story, style), request), result) in assigned.iter().zip(&requests).zip(results) {
        let Ok(response) = result else { continue };
        let text = response.text.trim();
        if text.is_empty() {
            log::warn!("{stage}: empty rewrite for story {}", story.id);
            continue;
        }
        explanations.push(Explanation {
            id: ids.next_id(),
            story_id: story.id.clone(),
            style: *style,
            text: text.to_string(),
            model_id: response.model_id,
            params: request.params.clone(),
        });
    }
    write_records(&explanations, &config.stage_path(stage))?;
    Ok(ctx.manifest(
        stage,
        started_at,
        (stories.len(), explanations.len(), stories.len() - explanations.len()),
        None,
    ))
}

fn dedup_explanations(ctx: &RunContext<'_>) -> Result<StageManifest, PipelineError> {
    let stage = StageName::DedupExplanations;
    let config = ctx.config;
    let started_at = ctx.clock.timestamp();
    let explanations: Vec<Explanation> = read_records(&config.stage_path(StageName::Rewrite))?;
    let ids: Vec<&str> = explanations.iter().map(|e| e.id.as_str()).collect();
    let texts: Vec<&str> = explanations.iter().map(|e| e.text.as_str()).collect();
    let (survivors, report) = dedup_texts(stage, &ids, &texts, config.dedup.explanations.config())?;
    let kept: Vec<Explanation> = explanations
        .iter()
        .zip(survivors)
        .filter_map(|(e, t)| t.map(|text| Explanation { text, ..e.clone() }))
        .collect();
    write_records(&kept, &config.stage_path(stage))?;
    Ok(ctx.manifest(
        stage,
        started_at,
        (explanations.len(), kept.len(), explanations.len() - kept.len()),
        Some(report),
    ))
}

fn respond(ctx: &RunContext<'_>) -> Result<StageManifest, PipelineError> {
    let stage = StageName::Respond;
    let config = ctx.config;
    let started_at = ctx.clock.timestamp();
    let explanations: Vec<Explanation> = read_records(&config.stage_path(StageName::DedupExplanations))?;
    let stories: Vec<Story> = read_records(&config.stage_path(StageName::DedupStories))?;
    let by_id: HashMap<&str, &Story> = stories.iter().map(|s| (s.id.as_str(), s)).collect();
    let kit = config.prompt_kit()?;
    let requests = explanations
        .iter()
        .map(|e| {
            kit.render_respond(e)
                .map(|r| with_params(r, &config.stages.respond.params))
                .map_err(|source| PipelineError::Prompt { stage, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pool = config.pool(&config.stages.respond);
    let results = generate_all(ctx, stage, &pool, &requests)?;
    let mut ids = ctx.ids("pair");
    let mut pairs = Vec::new();
    for ((explanation, request), result) in explanations.iter().zip(&requests).zip(results) {
        let Ok(response) = result else { continue };
        let text = response.text.trim();
        if text.is_empty() {
            continue;
        }
        let story = by_id.get(explanation.story_id.as_str()).ok_or_else(|| {
            PipelineError::Config(format!(
                "explanation {} refers to unknown story {}",
                explanation.id, explanation.story_id
            ))
        })?;
        pairs.push(CorpusRecord {
            id: ids.next_id(),
            explanation: explanation.clone(),
            response_text: text.to_string(),
            response_model_id: response.model_id,
            response_params: request.params.clone(),
            filtered: false,
            lineage: Lineage {
                scenario_id: story.scenario_id.clone(),
                story_model_id: story.model_id.clone(),
                story_params: story.params.clone(),
            },
        });
    }
    write_records(&pairs, &config.stage_path(stage))?;
    Ok(ctx.manifest(
        stage,
        started_at,
        (explanations.len(), pairs.len(), explanations.len() - pairs.len()),
        None,
    ))
}

/// Explanation and response of each pair are deduplicated as separate
/// documents in one corpus; a pair survives only if both parts do.
fn dedup_pairs(ctx: &RunContext<'_>) -> Result<StageManifest, PipelineError> {
    let stage = StageName::DedupPairs;
    let config = ctx.config;
    let started_at = ctx.clock.timestamp();
    let pairs: Vec<CorpusRecord> = read_records(&config.stage_path(StageName::Respond))?;
    let doc_ids: Vec<String> = pairs
        .iter()
        .flat_map(|p| [format!("{}:explanation", p.id), format!("{}:response", p.id)])
        .collect();
    let ids: Vec<&str> = doc_ids.iter().map(String::as_str).collect();
    let texts: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.explanation.text.as_str(), p.response_text.as_str()])
        .collect();
    let (survivors, report) = dedup_texts(stage, &ids, &texts, config.dedup.pairs.config())?;
    let mut survivors = survivors.into_iter();
    let mut kept = Vec::new();
    for pair in &pairs {
        let (e, r) = (survivors.next().flatten(), survivors.next().flatten());
        if let (Some(e), Some(r)) = (e, r) {
            let mut pair = pair.clone();
            pair.explanation.text = e;
            pair.response_text = r;
            kept.push(pair);
        }
    }
    write_records(&kept, &config.stage_path(stage))?;
    Ok(ctx.manifest(stage, started_at, (pairs.len(), kept.len(), pairs.len() - kept.len()), Some(report)))
}

fn filter(ctx: &RunContext<'_>) -> Result<StageManifest, PipelineError> {
    let stage = StageName::Filter;
    let config = ctx.config;
    let pairs: Vec<CorpusRecord> = read_records(&config.stage_path(StageName::DedupPairs))?;
    let lexicon = config.lexicon()?;
    let outcome = filter_sensitive(pairs, &lexicon, &ctx.config_hash, &ctx.clock);
    write_records(&outcome.removed, &config.filtered_path())?;
    write_records(&outcome.kept, &config.stage_path(stage))?;
    Ok(outcome.manifest)
}

/// Default sampling parameters per generation stage.
pub fn default_params() -> [(StageName, GenerationParams); 3] {
    [
        (StageName::Brainstorm, prompt_kit::brainstorm_defaults()),
        (StageName::Rewrite, prompt_kit::rewrite_defaults()),
        (StageName::Respond, prompt_kit::respond_defaults()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_are_balanced_blocks() {
        assert_eq!(style_bins(8), [2, 2, 2, 2]);
        assert_eq!(style_bins(114_657), [28_665, 28_664, 28_664, 28_664]);
        assert_eq!(style_bins(0), [0, 0, 0, 0]);
        assert_eq!(style_bins(3), [1, 1, 1, 0]);
        for n in 0..200 {
            let b = style_bins(n);
            assert_eq!(b.iter().sum::<usize>(), n);
            assert!(b.iter().max().unwrap() - b.iter().min().unwrap() <= 1);
        }
    }

    fn story(i: usize) -> Story {
        Story {
            id: format!("s{i}"),
            scenario_id: "sc".into(),
            text: format!("story {i}"),
            model_id: "m".into(),
            params: GenerationParams::new(1.0, 0.5, 10),
            created_at: "2024-01-01T00:00:00.000Z".into(),
        }
    }

    #[test]
    fn styles_in_order() {
        let stories: Vec<Story> = (0..8).map(story).collect();
        let styles: Vec<&str> = assign_styles(&stories).iter().map(|(_, s)| s.as_str()).collect();
        assert_eq!(styles, ["CBT", "CBT", "DBT", "DBT", "PCT", "PCT", "RT", "RT"]);
        let ids: Vec<String> = assign_styles(&stories).into_iter().map(|(s, _)| s.id).collect();
        assert_eq!(ids, (0..8).map(|i| format!("s{i}")).collect::<Vec<_>>());
        assert!(assign_styles(&[]).is_empty());
    }

    const MINIMAL: &str = r#"
        scenario_path = "scenarios.jsonl"
        output_dir = "out"
        [[endpoints]]
        model_id = "a"
        base_url = "mock://"
        [stages.brainstorm]
        pool = ["a"]
        [stages.rewrite]
        pool = ["a"]
        [stages.respond]
        pool = ["a"]
    "#;

    #[test]
    fn config_defaults_and_paths() {
        let c = PipelineConfig::from_toml(MINIMAL, Path::new("/cfg")).unwrap();
        assert_eq!(c.scenario_path, Path::new("/cfg/scenarios.jsonl"));
        assert_eq!(c.output_dir, Path::new("/cfg/out"));
        assert_eq!(c.stories_per_scenario, 20);
        assert_eq!(c.dedup, DedupStages::default());
        assert_eq!((c.dedup.stories.threshold, c.dedup.pairs.threshold), (75, 100));
        assert_eq!(c.dedup.stories.mode, DedupMode::DropDocuments);
        assert_eq!(c.retry, RetryPolicy::default());
    }

    #[test]
    fn config_validation() {
        let bad_pool = MINIMAL.replace("pool = [\"a\"]\n        [stages.respond]", "pool = [\"zz\"]\n        [stages.respond]");
        assert!(matches!(PipelineConfig::from_toml(&bad_pool, Path::new("")), Err(PipelineError::Config(m)) if m.contains("zz")));
        let low = format!("{MINIMAL}\n[dedup.stories]\nthreshold = 1\nmode = \"drop\"\n");
        assert!(PipelineConfig::from_toml(&low, Path::new("")).is_err());
        let modes = format!("{MINIMAL}\n[dedup.pairs]\nthreshold = 50\nmode = \"excise\"\n");
        assert_eq!(PipelineConfig::from_toml(&modes, Path::new("")).unwrap().dedup.pairs.threshold, 50);
        let zero = MINIMAL.replace("output_dir = \"out\"", "output_dir = \"out\"\nstories_per_scenario = 0");
        assert!(PipelineConfig::from_toml(&zero, Path::new("")).is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let held = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(OutputLock::acquire(dir.path()), Err(PipelineError::Locked(_))));
        drop(held);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn lock_sweeps_partial_writes() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("manifests")).unwrap();
        let orphans = [dir.path().join(".tmp-abc"), dir.path().join("manifests/.tmp-def")];
        for p in &orphans {
            std::fs::write(p, "partial").unwrap();
        }
        std::fs::write(dir.path().join("stories.jsonl"), "").unwrap();
        let _held = OutputLock::acquire(dir.path()).unwrap();
        assert!(orphans.iter().all(|p| !p.exists()));
        assert!(dir.path().join("stories.jsonl").exists());
    }
}
