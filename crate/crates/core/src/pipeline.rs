//! Stage orchestration over a run directory.
//!
//! Each stage reads the previous stage's artifacts from disk and writes its
//! own atomically, so any stage can be re-run or resumed. All randomness is
//! keyed by (master seed, artifact key): the parallelism level and resume
//! points never change any output byte.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

use crate::aspects::{self, AspectError, AspectId, AspectTree};
use crate::descriptions::{
    self, DescriptionError, DescriptionTranscript, Difficulty, SemanticGraph,
};
use crate::evaluation::{self, EvalError, JudgeMethod, JudgmentRecord, ScoreBook};
use crate::gateway::{BackendId, ExaminerPool, Gateway, GatewayError};
use crate::imaging::{self, ImagingError, ValidatedImage, Verdict};
use crate::numeric::Percent;
use crate::runstore::{stage_index, RunConfig, RunStore, StoreError};
use crate::seeds;
use crate::testcases::{
    self, CaseDraft, CaseProvenance, Letter, PositionMode, TestCase, TestcaseError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{missing}` has not run yet; run `{subcommand}` first")]
    PrerequisiteMissing { missing: String, subcommand: String },
    #[error("configuration conflicts with the initialized run: {0}")]
    ConfigConflict(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Aspects(#[from] AspectError),
    #[error(transparent)]
    Descriptions(#[from] DescriptionError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Testcases(#[from] TestcaseError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 prerequisite, 4 backend exhaustion,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        fn gateway_code(err: &GatewayError) -> Option<i32> {
            matches!(
                err,
                GatewayError::ExhaustedRetries { .. } | GatewayError::CredentialMissing { .. }
            )
            .then_some(4)
        }
        match self {
            PipelineError::PrerequisiteMissing { .. } => 3,
            PipelineError::ConfigConflict(_) => 2,
            PipelineError::Store(
                StoreError::InvalidConfig(_) | StoreError::DirectoryNonEmpty(_),
            ) => 2,
            PipelineError::Store(_) => 1,
            PipelineError::Gateway(g) => gateway_code(g).unwrap_or(1),
            PipelineError::Aspects(AspectError::Gateway(g)) => gateway_code(g).unwrap_or(1),
            PipelineError::Descriptions(DescriptionError::Gateway(g)) => {
                gateway_code(g).unwrap_or(1)
            }
            PipelineError::Imaging(ImagingError::Gateway(g)) => gateway_code(g).unwrap_or(1),
            PipelineError::Testcases(TestcaseError::Gateway(g)) => gateway_code(g).unwrap_or(1),
            PipelineError::Evaluation(EvalError::Gateway(g)) => gateway_code(g).unwrap_or(1),
            _ => 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Aspects,
    Descriptions,
    Images,
    Testcases,
    Responses,
    Reports,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Aspects,
        Stage::Descriptions,
        Stage::Images,
        Stage::Testcases,
        Stage::Responses,
        Stage::Reports,
    ];

    /// Manifest/artifact name.
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Aspects => "aspects",
            Stage::Descriptions => "descriptions",
            Stage::Images => "images",
            Stage::Testcases => "testcases",
            Stage::Responses => "responses",
            Stage::Reports => "reports",
        }
    }

    /// CLI subcommand that produces this stage.
    pub fn subcommand(&self) -> &'static str {
        match self {
            Stage::Aspects => "aspects",
            Stage::Descriptions => "describe",
            Stage::Images => "imagine",
            Stage::Testcases => "questions",
            Stage::Responses => "evaluate",
            Stage::Reports => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.iter().copied().find(|s| s.name() == name)
    }
}

/// Which response protocol(s) an evaluate invocation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Balanced layout, image attached: the benchmark proper.
    Standard,
    /// Balanced layout, image withheld: the answer-leakage probe.
    NoImage,
    /// All-A layout, image attached: the position-bias probe.
    AllA,
}

impl Protocol {
    pub fn file_stem(&self) -> &'static str {
        match self {
            Protocol::Standard => "standard",
            Protocol::NoImage => "no-image",
            Protocol::AllA => "all-a",
        }
    }

    pub fn layout(&self) -> PositionMode {
        match self {
            Protocol::Standard | Protocol::NoImage => PositionMode::Balanced,
            Protocol::AllA => PositionMode::AllA,
        }
    }

    pub fn withholds_image(&self) -> bool {
        matches!(self, Protocol::NoImage)
    }
}

/// Everything a stage invocation needs.
pub struct RunContext {
    pub store: RunStore,
    pub config: RunConfig,
    pub gateway: Arc<Gateway>,
    pub parallelism: usize,
    /// When set, the responses stage runs only this protocol.
    pub protocol_filter: Option<Protocol>,
}

impl RunContext {
    /// Initialize a fresh run directory and open a context over it.
    pub fn create(
        run_dir: impl Into<std::path::PathBuf>,
        config: RunConfig,
        parallelism: usize,
    ) -> Result<Self, PipelineError> {
        let store = RunStore::init(run_dir, &config)?;
        Self::assemble(store, config, parallelism)
    }

    /// Open an existing run directory.
    pub fn open(
        run_dir: impl Into<std::path::PathBuf>,
        parallelism: usize,
    ) -> Result<Self, PipelineError> {
        let store = RunStore::open(run_dir)?;
        let config = store.load_config()?;
        let manifest = store.load_manifest()?;
        if manifest.config_hash != config.hash() {
            return Err(PipelineError::ConfigConflict(
                "config.json no longer matches the hash recorded at init".into(),
            ));
        }
        Self::assemble(store, config, parallelism)
    }

    fn assemble(
        store: RunStore,
        config: RunConfig,
        parallelism: usize,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let gateway = build_gateway(&config, Some(store.root()))?;
        Ok(RunContext {
            store,
            config,
            gateway: Arc::new(gateway),
            parallelism: parallelism.max(1),
            protocol_filter: None,
        })
    }

    fn examiner_pool(&self) -> ExaminerPool {
        ExaminerPool::new(
            self.config.examiners.clone(),
            seeds::derive_u64(self.config.master_seed, "examiner-pool"),
        )
        .expect("config validated")
    }

    fn enabled_protocols(&self) -> Vec<Protocol> {
        let mut protocols = vec![Protocol::Standard];
        if self.config.switches.leakage_probe {
            protocols.push(Protocol::NoImage);
        }
        if self.config.switches.position_probe {
            protocols.push(Protocol::AllA);
        }
        protocols
    }
}

pub fn build_gateway(
    config: &RunConfig,
    run_dir: Option<&std::path::Path>,
) -> Result<Gateway, PipelineError> {
    let gateway = if config.switches.mock {
        Gateway::mock(
            config.backends.clone(),
            seeds::derive_u64(config.master_seed, "mock-gateway"),
        )
    } else {
        Gateway::live(config.backends.clone())
    };
    match run_dir {
        Some(root) => {
            let log_dir = root.join("logs");
            std::fs::create_dir_all(&log_dir).map_err(StoreError::Io)?;
            Ok(gateway
                .with_transcript(&log_dir.join("gateway.jsonl"))
                .map_err(StoreError::Io)?)
        }
        None => Ok(gateway),
    }
}

// ---------------------------------------------------------------------------
// Parallel helper
// ---------------------------------------------------------------------------

/// Order-preserving parallel map with bounded workers. Results land at
/// their item's index regardless of scheduling.
pub fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers <= 1 {
        return items.into_iter().map(f).collect();
    }
    let items: Vec<Mutex<Option<T>>> = items.into_iter().map(|i| Mutex::new(Some(i))).collect();
    let results: Vec<Mutex<Option<R>>> = (0..items.len()).map(|_| Mutex::new(None)).collect();
    let cursor = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = cursor.fetch_add(1, Ordering::Relaxed);
                if index >= items.len() {
                    break;
                }
                let item = items[index]
                    .lock()
                    .expect("item lock")
                    .take()
                    .expect("taken once");
                let result = f(item);
                *results[index].lock().expect("result lock") = Some(result);
            });
        }
    });
    results
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("result lock")
                .expect("worker filled slot")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Stage driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StageSummary {
    pub stage: &'static str,
    pub skipped: bool,
    pub detail: String,
}

impl std::fmt::Display for StageSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.skipped {
            write!(f, "[{}] already complete, skipped", self.stage)
        } else {
            write!(f, "[{}] {}", self.stage, self.detail)
        }
    }
}

/// Run one stage (skipping it when already complete), enforcing that every
/// earlier stage is complete and checksum-clean.
pub fn run_stage(ctx: &RunContext, stage: Stage) -> Result<StageSummary, PipelineError> {
    let manifest = ctx.store.load_manifest()?;
    // Name the nearest missing prerequisite: `questions` on a fresh run
    // reports `imagine`, the stage it directly consumes.
    let position = Stage::ALL
        .iter()
        .position(|s| *s == stage)
        .expect("stage is in ALL");
    for earlier in Stage::ALL[..position].iter().rev() {
        if !manifest.is_complete(earlier.name()) {
            return Err(PipelineError::PrerequisiteMissing {
                missing: earlier.name().to_string(),
                subcommand: earlier.subcommand().to_string(),
            });
        }
    }
    if manifest.is_complete(stage.name()) {
        return Ok(StageSummary {
            stage: stage.name(),
            skipped: true,
            detail: String::new(),
        });
    }
    // Verify checksums of everything this stage builds on.
    if let Some(next) = ctx.store.resume()? {
        if stage_index(&next).expect("known stage")
            < stage_index(stage.name()).expect("known stage")
        {
            return Err(PipelineError::PrerequisiteMissing {
                missing: next.clone(),
                subcommand: Stage::from_name(&next)
                    .expect("known stage")
                    .subcommand()
                    .to_string(),
            });
        }
    }
    let detail = match stage {
        Stage::Aspects => stage_aspects(ctx)?,
        Stage::Descriptions => stage_descriptions(ctx)?,
        Stage::Images => stage_images(ctx)?,
        Stage::Testcases => stage_testcases(ctx)?,
        Stage::Responses => stage_responses(ctx)?,
        Stage::Reports => stage_reports(ctx)?,
    };
    Ok(StageSummary {
        stage: stage.name(),
        skipped: false,
        detail,
    })
}

/// Run every incomplete stage in order.
pub fn run_all(ctx: &RunContext) -> Result<Vec<StageSummary>, PipelineError> {
    let mut summaries = Vec::new();
    for stage in Stage::ALL {
        summaries.push(run_stage(ctx, stage)?);
    }
    Ok(summaries)
}

// ---------------------------------------------------------------------------
// Stage: aspects
// ---------------------------------------------------------------------------

pub const ASPECTS_FILE: &str = "aspects.json";

fn stage_aspects(ctx: &RunContext) -> Result<String, PipelineError> {
    let pool = ctx.examiner_pool();
    let tree = aspects::build_tree(
        &ctx.gateway,
        &pool,
        &ctx.config.user_input,
        ctx.config.general_count,
        ctx.config.fine_count,
        ctx.config.parse_retry_budget,
    )?;
    ctx.store.write_json(ASPECTS_FILE, &tree)?;
    ctx.store
        .mark_complete("aspects", &[ASPECTS_FILE.to_string()])?;
    Ok(format!(
        "built {} general aspects with {} fine-grained aspects",
        tree.general.len(),
        tree.fine_total()
    ))
}

// ---------------------------------------------------------------------------
// Stage: descriptions
// ---------------------------------------------------------------------------

fn description_file(aspect_id: &AspectId, difficulty: Difficulty) -> String {
    format!("descriptions/{aspect_id}/{difficulty}.jsonl")
}

pub const TOPIC_WORDS_FILE: &str = "descriptions/topic_words.json";

#[derive(Debug, Serialize, Deserialize)]
struct TopicWordExport {
    aspect_id: AspectId,
    difficulty: Difficulty,
    iteration: u32,
    topic_word: String,
    keywords: Vec<String>,
}

fn stage_descriptions(ctx: &RunContext) -> Result<String, PipelineError> {
    let tree: AspectTree = ctx.store.read_json(ASPECTS_FILE)?;
    let pool = ctx.examiner_pool();
    let quota = ctx.config.descriptions_per_aspect;
    let retry_budget = ctx.config.parse_retry_budget;
    let keep_floor = ctx.config.keep_floor;

    struct StreamJob {
        aspect_id: AspectId,
        fine: crate::aspects::FineAspect,
        difficulty: Difficulty,
    }
    let mut jobs = Vec::new();
    for (aspect_id, _, fine) in tree.fine_aspects() {
        for &difficulty in &ctx.config.difficulties {
            jobs.push(StreamJob {
                aspect_id: aspect_id.clone(),
                fine: fine.clone(),
                difficulty,
            });
        }
    }

    let gateway = Arc::clone(&ctx.gateway);
    let results: Vec<Result<(String, Vec<DescriptionTranscript>), PipelineError>> =
        parallel_map(jobs, ctx.parallelism, |job| {
            let mut graph = SemanticGraph::new(keep_floor);
            let transcripts = descriptions::generate_descriptions(
                &gateway,
                &pool,
                &job.aspect_id,
                &job.fine,
                job.difficulty,
                &mut graph,
                quota,
                retry_budget,
            )?;
            Ok((
                description_file(&job.aspect_id, job.difficulty),
                transcripts,
            ))
        });

    let mut artifacts = Vec::new();
    let mut topic_words = Vec::new();
    let mut total = 0usize;
    for result in results {
        let (path, transcripts) = result?;
        total += transcripts.len();
        for t in &transcripts {
            topic_words.push(TopicWordExport {
                aspect_id: t.record.aspect_id.clone(),
                difficulty: t.record.difficulty,
                iteration: t.iteration,
                topic_word: t.record.topic_word.clone(),
                keywords: t.record.keywords.clone(),
            });
        }
        ctx.store.write_jsonl(&path, &transcripts)?;
        artifacts.push(path);
    }
    ctx.store.write_json(TOPIC_WORDS_FILE, &topic_words)?;
    artifacts.push(TOPIC_WORDS_FILE.to_string());
    ctx.store.mark_complete("descriptions", &artifacts)?;
    Ok(format!(
        "generated {total} descriptions across {} streams",
        artifacts.len() - 1
    ))
}

// ---------------------------------------------------------------------------
// Stage: images
// ---------------------------------------------------------------------------

fn image_file(aspect_id: &AspectId, difficulty: Difficulty, index: u32) -> String {
    format!("images/{aspect_id}/{difficulty}/{index:03}.png")
}

fn image_report_file(aspect_id: &AspectId, difficulty: Difficulty, index: u32) -> String {
    format!("images/{aspect_id}/{difficulty}/{index:03}.report.json")
}

pub const IMAGES_SUMMARY_FILE: &str = "images/summary.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct ImageSummaryRow {
    v: u32,
    aspect_id: AspectId,
    difficulty: Difficulty,
    index: u32,
    attempts: u32,
    verdict: Verdict,
    score: crate::numeric::Ratio,
    forced: bool,
    errors: usize,
}

fn load_all_transcripts(
    ctx: &RunContext,
    tree: &AspectTree,
) -> Result<Vec<DescriptionTranscript>, PipelineError> {
    let mut all = Vec::new();
    for (aspect_id, _, _) in tree.fine_aspects() {
        for &difficulty in &ctx.config.difficulties {
            let mut transcripts: Vec<DescriptionTranscript> = ctx
                .store
                .read_jsonl(&description_file(&aspect_id, difficulty))?;
            all.append(&mut transcripts);
        }
    }
    Ok(all)
}

fn stage_images(ctx: &RunContext) -> Result<String, PipelineError> {
    let tree: AspectTree = ctx.store.read_json(ASPECTS_FILE)?;
    let pool = ctx.examiner_pool();
    let transcripts = load_all_transcripts(ctx, &tree)?;

    let gateway = Arc::clone(&ctx.gateway);
    let thresholds = ctx.config.thresholds.clone();
    let max_attempts = ctx.config.max_image_attempts;
    let retry_budget = ctx.config.parse_retry_budget;
    let image_backend = ctx.config.image_backend.clone();

    let results: Vec<Result<(Vec<u8>, ValidatedImage), PipelineError>> =
        parallel_map(transcripts, ctx.parallelism, |transcript| {
            let record = transcript.record;
            let zeta = *thresholds
                .get(&record.difficulty)
                .expect("config validated");
            let path = image_file(&record.aspect_id, record.difficulty, record.index);
            let (bytes, validated) = imaging::validate_image(
                &gateway,
                &pool,
                &image_backend,
                &record,
                zeta,
                max_attempts,
                retry_budget,
                path,
            )?;
            Ok((bytes, validated))
        });

    let mut artifacts = Vec::new();
    let mut rows = Vec::new();
    let mut accepted = 0usize;
    let mut with_errors = 0usize;
    let mut forced = 0usize;
    for result in results {
        let (bytes, validated) = result?;
        let record = &validated.description;
        let png_path = image_file(&record.aspect_id, record.difficulty, record.index);
        let report_path = image_report_file(&record.aspect_id, record.difficulty, record.index);
        ctx.store.write_artifact(&png_path, &bytes)?;
        ctx.store.write_json(&report_path, &validated)?;
        match validated.report.verdict {
            Verdict::Accept => accepted += 1,
            Verdict::AcceptWithErrors => with_errors += 1,
            Verdict::Regenerate => unreachable!("stored images are never regenerate"),
        }
        if validated.forced {
            forced += 1;
        }
        rows.push(ImageSummaryRow {
            v: 1,
            aspect_id: record.aspect_id.clone(),
            difficulty: record.difficulty,
            index: record.index,
            attempts: validated.attempts,
            verdict: validated.report.verdict,
            score: validated.report.score,
            forced: validated.forced,
            errors: validated.report.errors.len(),
        });
        artifacts.push(png_path);
        artifacts.push(report_path);
    }
    rows.sort_by(|a, b| {
        (a.difficulty, &a.aspect_id, a.index).cmp(&(b.difficulty, &b.aspect_id, b.index))
    });
    ctx.store.write_jsonl(IMAGES_SUMMARY_FILE, &rows)?;
    artifacts.push(IMAGES_SUMMARY_FILE.to_string());
    artifacts.sort();
    ctx.store.mark_complete("images", &artifacts)?;
    Ok(format!(
        "validated {} images (accept {accepted}, accept-with-errors {with_errors}, forced-at-cap {forced})",
        rows.len()
    ))
}

// ---------------------------------------------------------------------------
// Stage: testcases
// ---------------------------------------------------------------------------

/// Candidate-facing case record: everything except the answer key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseFacing {
    pub v: u32,
    pub id: String,
    pub image_path: String,
    pub aspect_id: AspectId,
    pub aspect_name: String,
    pub difficulty: Difficulty,
    pub question: String,
    pub options: BTreeMap<Letter, String>,
}

/// Answer-key record, kept in a separate file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseAnswer {
    pub v: u32,
    pub id: String,
    pub reference: Letter,
    pub correct_text: String,
    pub provenance: CaseProvenance,
}

fn cases_file(slug: &str, difficulty: Difficulty, layout: PositionMode) -> String {
    match layout {
        PositionMode::Balanced => format!("testcases/{slug}/{difficulty}.jsonl"),
        PositionMode::AllA => format!("testcases/{slug}/{difficulty}.alla.jsonl"),
    }
}

fn answers_file(slug: &str, difficulty: Difficulty, layout: PositionMode) -> String {
    match layout {
        PositionMode::Balanced => format!("testcases/{slug}/{difficulty}.answers.jsonl"),
        PositionMode::AllA => format!("testcases/{slug}/{difficulty}.alla.answers.jsonl"),
    }
}

fn split_case(case: &TestCase) -> (CaseFacing, CaseAnswer) {
    (
        CaseFacing {
            v: 1,
            id: case.id.clone(),
            image_path: case.image_path.clone(),
            aspect_id: case.aspect_id.clone(),
            aspect_name: case.aspect_name.clone(),
            difficulty: case.difficulty,
            question: case.question.clone(),
            options: case.options.clone(),
        },
        CaseAnswer {
            v: 1,
            id: case.id.clone(),
            reference: case.reference,
            correct_text: case.options[&case.reference].clone(),
            provenance: case.provenance.clone(),
        },
    )
}

fn join_case(facing: CaseFacing, answer: &CaseAnswer) -> TestCase {
    TestCase {
        id: facing.id,
        image_path: facing.image_path,
        aspect_id: facing.aspect_id,
        aspect_name: facing.aspect_name,
        difficulty: facing.difficulty,
        question: facing.question,
        options: facing.options,
        reference: answer.reference,
        provenance: answer.provenance.clone(),
    }
}

fn stage_testcases(ctx: &RunContext) -> Result<String, PipelineError> {
    let tree: AspectTree = ctx.store.read_json(ASPECTS_FILE)?;
    let pool = ctx.examiner_pool();
    let aspect_names: BTreeMap<AspectId, String> = tree
        .fine_aspects()
        .into_iter()
        .map(|(id, _, fine)| (id, fine.name.clone()))
        .collect();

    // Canonical case order: difficulty, then aspect, then index.
    let mut keys = Vec::new();
    for &difficulty in &ctx.config.difficulties {
        for (aspect_id, _, _) in tree.fine_aspects() {
            for index in 0..ctx.config.descriptions_per_aspect {
                keys.push((aspect_id.clone(), difficulty, index));
            }
        }
    }

    let gateway = Arc::clone(&ctx.gateway);
    let adjust = ctx.config.switches.adjust_options;
    let master_seed = ctx.config.master_seed;
    let retry_budget = ctx.config.parse_retry_budget;
    let store = &ctx.store;
    let names = &aspect_names;

    let results: Vec<Result<CaseDraft, PipelineError>> =
        parallel_map(keys, ctx.parallelism, |(aspect_id, difficulty, index)| {
            let validated: ValidatedImage =
                store.read_json(&image_report_file(&aspect_id, difficulty, index))?;
            let case_key = format!("{aspect_id}:{difficulty}:{index:03}");
            let aspect_name = names
                .get(&aspect_id)
                .expect("aspect ids come from the tree")
                .as_str();

            let examiner = pool.pick(seeds::derive_u64(
                pool.rng_seed,
                &format!("question/{case_key}"),
            ));
            let draft = testcases::generate_question(
                &gateway,
                examiner,
                &validated,
                aspect_name,
                retry_budget,
            )?;

            let adjusted = if adjust {
                let adjuster = pool.pick(seeds::derive_u64(
                    pool.rng_seed,
                    &format!("adjust/{case_key}"),
                ));
                testcases::adjust_options(&gateway, adjuster, &draft, master_seed, &case_key)?
            } else {
                testcases::AdjustedOptionSet::unchanged(&draft)
            };
            Ok(CaseDraft::from_adjusted(
                case_key,
                &validated,
                aspect_name,
                &draft,
                &adjusted,
            ))
        });
    let mut drafts = Vec::with_capacity(results.len());
    for result in results {
        drafts.push(result?);
    }

    let slug = ctx.config.user_input.slug();
    let mut artifacts = Vec::new();
    let mut adjusted_count = 0usize;
    let mut fallback_count = 0usize;
    let mut total = 0usize;
    for layout in [PositionMode::Balanced, PositionMode::AllA] {
        let cases = testcases::assign_positions(drafts.clone(), layout, master_seed);
        if layout == PositionMode::Balanced {
            total = cases.len();
            adjusted_count = cases.iter().filter(|c| c.provenance.adjusted).count();
            fallback_count = cases
                .iter()
                .filter(|c| c.provenance.adjustment_fallback)
                .count();
        }
        for &difficulty in &ctx.config.difficulties {
            let slice: Vec<&TestCase> = cases
                .iter()
                .filter(|c| c.difficulty == difficulty)
                .collect();
            let mut facing = Vec::with_capacity(slice.len());
            let mut answers = Vec::with_capacity(slice.len());
            for case in slice {
                let (f, a) = split_case(case);
                facing.push(f);
                answers.push(a);
            }
            let cases_path = cases_file(&slug, difficulty, layout);
            let answers_path = answers_file(&slug, difficulty, layout);
            ctx.store.write_jsonl(&cases_path, &facing)?;
            ctx.store.write_jsonl(&answers_path, &answers)?;
            artifacts.push(cases_path);
            artifacts.push(answers_path);
        }
    }
    ctx.store.mark_complete("testcases", &artifacts)?;
    Ok(format!(
        "emitted {total} test cases (adjusted {adjusted_count}, adjustment-fallback {fallback_count})"
    ))
}

/// Load the positioned cases for one layout, joined with their answer keys,
/// in canonical order.
pub fn load_cases(
    store: &RunStore,
    config: &RunConfig,
    layout: PositionMode,
) -> Result<Vec<TestCase>, PipelineError> {
    let slug = config.user_input.slug();
    let mut cases = Vec::new();
    for &difficulty in &config.difficulties {
        let facing: Vec<CaseFacing> = store.read_jsonl(&cases_file(&slug, difficulty, layout))?;
        let answers: Vec<CaseAnswer> =
            store.read_jsonl(&answers_file(&slug, difficulty, layout))?;
        let by_id: BTreeMap<&str, &CaseAnswer> =
            answers.iter().map(|a| (a.id.as_str(), a)).collect();
        for f in facing {
            let answer = by_id
                .get(f.id.as_str())
                .ok_or_else(|| StoreError::MissingArtifact {
                    stage: "testcases".into(),
                    path: format!("answer record for case {}", f.id),
                })?;
            cases.push(join_case(f, answer));
        }
    }
    Ok(cases)
}

// ---------------------------------------------------------------------------
// Stage: responses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub v: u32,
    pub case_id: String,
    pub aspect_id: AspectId,
    pub difficulty: Difficulty,
    pub layout: PositionMode,
    pub image_withheld: bool,
    pub raw_text: String,
    pub parsed: Option<Letter>,
    pub correct: bool,
    pub method: JudgeMethod,
    pub judge_flagged: bool,
    pub generator_examiner: BackendId,
}

fn responses_file(candidate: &BackendId, protocol: Protocol) -> String {
    format!(
        "responses/{}/{}.jsonl",
        aspects::slugify(candidate.as_str()),
        protocol.file_stem()
    )
}

fn stage_responses(ctx: &RunContext) -> Result<String, PipelineError> {
    let enabled = ctx.enabled_protocols();
    let to_run: Vec<Protocol> = match ctx.protocol_filter {
        Some(protocol) => vec![protocol],
        None => enabled.clone(),
    };

    let judge_backend = ctx.config.judge_backend.clone();
    let judge_always = ctx.config.switches.judge_always;
    let retry_budget = ctx.config.parse_retry_budget;
    let gateway = Arc::clone(&ctx.gateway);

    let mut written = 0usize;
    for protocol in &to_run {
        let cases = load_cases(&ctx.store, &ctx.config, protocol.layout())?;
        for candidate in &ctx.config.candidates {
            let store = &ctx.store;
            let results: Vec<Result<ResponseRecord, PipelineError>> =
                parallel_map(cases.clone(), ctx.parallelism, |case| {
                    let image = if protocol.withholds_image() {
                        None
                    } else {
                        Some(std::fs::read(store.path(&case.image_path)).map_err(StoreError::Io)?)
                    };
                    let response = evaluation::ask_candidate(
                        &gateway,
                        candidate,
                        &case,
                        image,
                        protocol.withholds_image(),
                    )?;
                    let judgment = evaluation::judge(
                        &gateway,
                        &judge_backend,
                        &case,
                        &response,
                        judge_always,
                        retry_budget,
                    )?;
                    Ok(ResponseRecord {
                        v: 1,
                        case_id: case.id.clone(),
                        aspect_id: case.aspect_id.clone(),
                        difficulty: case.difficulty,
                        layout: protocol.layout(),
                        image_withheld: protocol.withholds_image(),
                        raw_text: response.raw_text,
                        parsed: response.parsed,
                        correct: judgment.correct,
                        method: judgment.method,
                        judge_flagged: judgment.judge_flagged,
                        generator_examiner: case.provenance.generator_examiner.clone(),
                    })
                });
            let mut records = Vec::with_capacity(results.len());
            for result in results {
                records.push(result?);
            }
            ctx.store
                .write_jsonl(&responses_file(candidate, *protocol), &records)?;
            written += records.len();
        }
    }

    // The stage is complete once every enabled protocol has a response file
    // for every candidate.
    let mut artifacts = Vec::new();
    let mut all_present = true;
    for protocol in &enabled {
        for candidate in &ctx.config.candidates {
            let path = responses_file(candidate, *protocol);
            if ctx.store.path(&path).is_file() {
                artifacts.push(path);
            } else {
                all_present = false;
            }
        }
    }
    if all_present {
        ctx.store.mark_complete("responses", &artifacts)?;
    }
    Ok(format!(
        "recorded {written} responses over {} protocol(s) x {} candidate(s){}",
        to_run.len(),
        ctx.config.candidates.len(),
        if all_present {
            ""
        } else {
            " (stage incomplete: other protocols pending)"
        }
    ))
}

// ---------------------------------------------------------------------------
// Stage: reports
// ---------------------------------------------------------------------------

pub const REPORT_FILES: [&str; 7] = [
    "reports/accuracy_by_model.json",
    "reports/user_input_accuracy.json",
    "reports/model_average.json",
    "reports/deviation_rate.json",
    "reports/examiner_variance.json",
    "reports/ranking_matrix.json",
    "reports/leakage_comparison.json",
];

pub const SUMMARY_FILE: &str = "reports/summary.txt";

/// Load every response file into a score book.
pub fn load_score_book(store: &RunStore, config: &RunConfig) -> Result<ScoreBook, PipelineError> {
    let mut book = ScoreBook::new();
    let protocols = [Protocol::Standard, Protocol::NoImage, Protocol::AllA];
    for candidate in &config.candidates {
        for protocol in protocols {
            let path = responses_file(candidate, protocol);
            if !store.path(&path).is_file() {
                continue;
            }
            let records: Vec<ResponseRecord> = store.read_jsonl(&path)?;
            for r in records {
                book.add(JudgmentRecord {
                    candidate: candidate.clone(),
                    user_input: config.user_input.name.clone(),
                    difficulty: r.difficulty,
                    aspect_id: r.aspect_id,
                    case_id: r.case_id,
                    examiner: r.generator_examiner,
                    layout: r.layout,
                    image_withheld: r.image_withheld,
                    correct: r.correct,
                    method: r.method,
                })?;
            }
        }
    }
    Ok(book)
}

#[derive(Debug, Serialize)]
struct DeviationRow {
    candidate: BackendId,
    all_a_accuracy: Option<Percent>,
    balanced_accuracy: Option<Percent>,
    deviation_rate: Option<f64>,
    note: Option<String>,
}

#[derive(Debug, Serialize)]
struct VarianceRow {
    candidate: BackendId,
    per_examiner: BTreeMap<String, Percent>,
    variance: Option<f64>,
    note: Option<String>,
}

#[derive(Debug, Serialize)]
struct LeakageRow {
    candidate: BackendId,
    difficulty: Option<Difficulty>,
    with_image: Option<Percent>,
    without_image: Option<Percent>,
}

fn stage_reports(ctx: &RunContext) -> Result<String, PipelineError> {
    let book = load_score_book(&ctx.store, &ctx.config)?;
    let candidates = book.candidates();

    // Table: per-model accuracy for this run's user input.
    #[derive(Serialize)]
    struct ModelAccuracyRow {
        candidate: BackendId,
        cells: BTreeMap<String, Percent>,
        average: Percent,
    }
    let mut model_rows = Vec::new();
    for candidate in &candidates {
        let mut cells = BTreeMap::new();
        let mut values = Vec::new();
        for difficulty in book.difficulties() {
            if let Some(value) = book.cell(candidate, &ctx.config.user_input.name, difficulty) {
                cells.insert(difficulty.to_string(), value);
                values.push(value);
            }
        }
        if values.is_empty() {
            continue;
        }
        model_rows.push(ModelAccuracyRow {
            candidate: candidate.clone(),
            average: Percent::mean(&values).expect("non-empty"),
            cells,
        });
    }
    ctx.store.write_json(REPORT_FILES[0], &model_rows)?;

    ctx.store
        .write_json(REPORT_FILES[1], &book.aggregate_user_input_table()?)?;
    ctx.store
        .write_json(REPORT_FILES[2], &book.aggregate_model_table()?)?;

    // Deviation rate: all-A versus balanced, image shown.
    let mut deviation_rows = Vec::new();
    for candidate in &candidates {
        let s_a = book
            .accuracy_where(|r| {
                &r.candidate == candidate && r.layout == PositionMode::AllA && !r.image_withheld
            })
            .ok();
        let s_u = book
            .accuracy_where(|r| {
                &r.candidate == candidate && r.layout == PositionMode::Balanced && !r.image_withheld
            })
            .ok();
        let (deviation, note) = match (s_a, s_u) {
            (Some(a), Some(u)) => match evaluation::deviation_rate(a.as_f64(), u.as_f64()) {
                Ok(rate) => (Some(rate), None),
                Err(_) => (None, Some("zero baseline".to_string())),
            },
            _ => (None, Some("position probe responses missing".to_string())),
        };
        deviation_rows.push(DeviationRow {
            candidate: candidate.clone(),
            all_a_accuracy: s_a,
            balanced_accuracy: s_u,
            deviation_rate: deviation,
            note,
        });
    }
    ctx.store.write_json(REPORT_FILES[3], &deviation_rows)?;

    // Examiner variance over the standard protocol, partitioned by the
    // examiner that generated each case.
    let examiners: Vec<BackendId> = ctx.config.examiners.clone();
    let mut variance_rows = Vec::new();
    for candidate in &candidates {
        let mut per_examiner = BTreeMap::new();
        let mut scores = Vec::new();
        for examiner in &examiners {
            if let Ok(score) = book.accuracy_where(|r| {
                &r.candidate == candidate
                    && r.layout == PositionMode::Balanced
                    && !r.image_withheld
                    && &r.examiner == examiner
            }) {
                per_examiner.insert(examiner.to_string(), score);
                scores.push(score.as_f64() / 100.0);
            }
        }
        let (variance, note) = match evaluation::examiner_variance(&scores) {
            Ok(v) => (Some(v), None),
            Err(_) => (
                None,
                Some("needs at least two examiner partitions".to_string()),
            ),
        };
        variance_rows.push(VarianceRow {
            candidate: candidate.clone(),
            per_examiner,
            variance,
            note,
        });
    }
    ctx.store.write_json(REPORT_FILES[4], &variance_rows)?;

    ctx.store
        .write_json(REPORT_FILES[5], &book.ranking_matrix()?)?;

    // Leakage: with versus without image on the balanced layout.
    let mut leakage_rows = Vec::new();
    for candidate in &candidates {
        for difficulty in book.difficulties() {
            leakage_rows.push(LeakageRow {
                candidate: candidate.clone(),
                difficulty: Some(difficulty),
                with_image: book
                    .accuracy_where(|r| {
                        &r.candidate == candidate
                            && r.difficulty == difficulty
                            && r.layout == PositionMode::Balanced
                            && !r.image_withheld
                    })
                    .ok(),
                without_image: book
                    .accuracy_where(|r| {
                        &r.candidate == candidate
                            && r.difficulty == difficulty
                            && r.layout == PositionMode::Balanced
                            && r.image_withheld
                    })
                    .ok(),
            });
        }
        leakage_rows.push(LeakageRow {
            candidate: candidate.clone(),
            difficulty: None,
            with_image: book
                .accuracy_where(|r| {
                    &r.candidate == candidate
                        && r.layout == PositionMode::Balanced
                        && !r.image_withheld
                })
                .ok(),
            without_image: book
                .accuracy_where(|r| {
                    &r.candidate == candidate
                        && r.layout == PositionMode::Balanced
                        && r.image_withheld
                })
                .ok(),
        });
    }
    ctx.store.write_json(REPORT_FILES[6], &leakage_rows)?;

    // Human-readable summary. Candidate-facing exports never include the
    // answer key; accuracies are aggregates and safe to print.
    let mut summary = String::new();
    summary.push_str(&format!("user input: {}\n", ctx.config.user_input.name));
    summary.push_str(&format!("candidates: {}\n", candidates.len()));
    for row in &model_rows {
        summary.push_str(&format!("  {}: average {}\n", row.candidate, row.average));
    }
    summary.push_str("tables: ");
    summary.push_str(&REPORT_FILES.join(", "));
    summary.push('\n');
    ctx.store.write_artifact(SUMMARY_FILE, summary.as_bytes())?;

    let mut artifacts: Vec<String> = REPORT_FILES.iter().map(|s| s.to_string()).collect();
    artifacts.push(SUMMARY_FILE.to_string());
    ctx.store.mark_complete("reports", &artifacts)?;
    Ok(format!("wrote {} report tables", REPORT_FILES.len()))
}
