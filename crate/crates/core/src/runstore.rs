//! Run configuration, artifact persistence, checkpointing, and resume.
//!
//! A run directory is the unit of work: `config.json` pins every parameter
//! (the config hash guards against drift), `manifest.json` tracks stage
//! completion with per-artifact checksums, and all artifact writes go
//! through temp-file-plus-rename.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::aspects::UserInput;
use crate::descriptions::Difficulty;
use crate::gateway::{BackendConfig, BackendId, BackendKind, MockProfile};
use crate::numeric::Ratio;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run directory {0} already exists and is not empty")]
    DirectoryNonEmpty(PathBuf),
    #[error("manifest unreadable: {0}")]
    ManifestUnreadable(String),
    #[error("checksum mismatch for artifact {path}")]
    ChecksumMismatch { path: String },
    #[error("artifact {path} missing for completed stage {stage}")]
    MissingArtifact { stage: String, path: String },
    #[error("unknown stage {0}")]
    UnknownStage(String),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Stage switches for the exploratory protocols and ablations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    /// Error-driven option adjustment (off reproduces the pre-adjustment
    /// ablation).
    pub adjust_options: bool,
    /// Evaluate candidates a second time without image payloads.
    pub leakage_probe: bool,
    /// Evaluate candidates a third time on the all-A position layout.
    pub position_probe: bool,
    /// Send every response to the judge, even parseable ones.
    pub judge_always: bool,
    /// Serve every backend from the seeded deterministic mock.
    pub mock: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Switches {
            adjust_options: true,
            leakage_probe: true,
            position_probe: true,
            judge_always: false,
            mock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub user_input: UserInput,
    /// Number of general aspects (n).
    pub general_count: u32,
    /// Fine-grained aspects per general aspect (m).
    pub fine_count: u32,
    /// Descriptions (and images) per fine aspect per difficulty (omega).
    pub descriptions_per_aspect: u32,
    pub difficulties: Vec<Difficulty>,
    /// Alignment threshold per difficulty.
    pub thresholds: BTreeMap<Difficulty, Ratio>,
    pub max_image_attempts: u32,
    pub parse_retry_budget: u32,
    /// The semantic graph never shrinks below this many nodes.
    pub keep_floor: usize,
    pub examiners: Vec<BackendId>,
    pub candidates: Vec<BackendId>,
    pub image_backend: BackendId,
    pub judge_backend: BackendId,
    pub backends: Vec<BackendConfig>,
    pub master_seed: u64,
    pub switches: Switches,
}

impl RunConfig {
    /// The stock configuration: n=4, m=6, omega=10, all three difficulties,
    /// threshold 1 for easy and 0.8 for medium/hard, everything served by
    /// the mock.
    pub fn default_mock(user_input: UserInput, master_seed: u64) -> Self {
        let mut thresholds = BTreeMap::new();
        thresholds.insert(Difficulty::Easy, "1".parse().expect("static ratio"));
        thresholds.insert(Difficulty::Medium, "0.8".parse().expect("static ratio"));
        thresholds.insert(Difficulty::Hard, "0.8".parse().expect("static ratio"));
        let backends = vec![
            BackendConfig::mock("examiner-alpha", BackendKind::ChatVision),
            BackendConfig::mock("examiner-beta", BackendKind::ChatVision),
            BackendConfig::mock("examiner-gamma", BackendKind::ChatVision),
            BackendConfig::mock("painter", BackendKind::TextToImage),
            BackendConfig::mock("cand-uniform", BackendKind::ChatVision),
            BackendConfig::mock("cand-first", BackendKind::ChatVision)
                .with_profile(MockProfile::AlwaysA),
            BackendConfig::mock("cand-noisy", BackendKind::ChatVision)
                .with_profile(MockProfile::Noisy),
        ];
        RunConfig {
            user_input,
            general_count: 4,
            fine_count: 6,
            descriptions_per_aspect: 10,
            difficulties: vec![Difficulty::Easy, Difficulty::Medium, Difficulty::Hard],
            thresholds,
            max_image_attempts: 3,
            parse_retry_budget: 3,
            keep_floor: crate::descriptions::DEFAULT_KEEP_FLOOR,
            examiners: vec![
                "examiner-alpha".into(),
                "examiner-beta".into(),
                "examiner-gamma".into(),
            ],
            candidates: vec![
                "cand-uniform".into(),
                "cand-first".into(),
                "cand-noisy".into(),
            ],
            image_backend: "painter".into(),
            judge_backend: "examiner-alpha".into(),
            backends,
            master_seed,
            switches: Switches {
                mock: true,
                ..Switches::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let fail = |msg: String| Err(StoreError::InvalidConfig(msg));
        if self.general_count == 0 || self.fine_count == 0 || self.descriptions_per_aspect == 0 {
            return fail(
                "general_count, fine_count, and descriptions_per_aspect must all be at least 1"
                    .into(),
            );
        }
        if self.user_input.demand.trim().is_empty() {
            return fail("user input demand text must not be empty".into());
        }
        if self.difficulties.is_empty() {
            return fail("at least one difficulty is required".into());
        }
        if self.max_image_attempts == 0 {
            return fail("max_image_attempts must be at least 1".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for backend in &self.backends {
            if !ids.insert(backend.id.clone()) {
                return fail(format!("duplicate backend id {}", backend.id));
            }
        }
        let known = |id: &BackendId| self.backends.iter().find(|b| &b.id == id);
        for difficulty in &self.difficulties {
            let Some(zeta) = self.thresholds.get(difficulty) else {
                return fail(format!(
                    "no threshold configured for difficulty {difficulty}"
                ));
            };
            let zero = Ratio::new(0, 1).expect("static");
            if *zeta <= zero || *zeta > Ratio::ONE {
                return fail(format!("threshold for {difficulty} must lie in (0, 1]"));
            }
        }
        if self.examiners.is_empty() {
            return fail("examiner pool must not be empty".into());
        }
        let mut pool_seen = std::collections::BTreeSet::new();
        for examiner in &self.examiners {
            if !pool_seen.insert(examiner.clone()) {
                return fail(format!("duplicate examiner {examiner}"));
            }
            match known(examiner) {
                Some(b) if b.kind == BackendKind::ChatVision => {}
                Some(_) => {
                    return fail(format!("examiner {examiner} is not a chat-vision backend"))
                }
                None => return fail(format!("examiner {examiner} is not a configured backend")),
            }
        }
        if self.candidates.is_empty() {
            return fail("at least one candidate is required".into());
        }
        for candidate in &self.candidates {
            match known(candidate) {
                Some(b) if b.kind == BackendKind::ChatVision => {}
                Some(_) => {
                    return fail(format!(
                        "candidate {candidate} is not a chat-vision backend"
                    ))
                }
                None => return fail(format!("candidate {candidate} is not a configured backend")),
            }
        }
        match known(&self.image_backend) {
            Some(b) if b.kind == BackendKind::TextToImage => {}
            Some(_) => {
                return fail(format!(
                    "image backend {} is not text-to-image",
                    self.image_backend
                ))
            }
            None => {
                return fail(format!(
                    "image backend {} is not configured",
                    self.image_backend
                ))
            }
        }
        match known(&self.judge_backend) {
            Some(b) if b.kind == BackendKind::ChatVision => {}
            Some(_) => {
                return fail(format!(
                    "judge backend {} is not chat-vision",
                    self.judge_backend
                ))
            }
            None => {
                return fail(format!(
                    "judge backend {} is not configured",
                    self.judge_backend
                ))
            }
        }
        Ok(())
    }

    /// Test cases a complete run will emit: n x m x omega x |difficulties|.
    pub fn expected_cases(&self) -> u64 {
        u64::from(self.general_count)
            * u64::from(self.fine_count)
            * u64::from(self.descriptions_per_aspect)
            * self.difficulties.len() as u64
    }

    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&canonical))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Stages and manifest
// ---------------------------------------------------------------------------

/// Pipeline stages in dependency order, keyed by the artifact they produce.
pub const STAGES: [&str; 6] = [
    "aspects",
    "descriptions",
    "images",
    "testcases",
    "responses",
    "reports",
];

pub fn stage_index(stage: &str) -> Option<usize> {
    STAGES.iter().position(|s| *s == stage)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub complete: bool,
    pub completed_ms: u64,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    /// Volume the config predicts: test cases a full run will emit.
    pub expected_cases: u64,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    fn new(config: &RunConfig) -> Self {
        let now = now_ms();
        let mut stages = BTreeMap::new();
        for stage in STAGES {
            stages.insert(stage.to_string(), StageRecord::default());
        }
        RunManifest {
            schema_version: 1,
            config_hash: config.hash(),
            expected_cases: config.expected_cases(),
            created_ms: now,
            updated_ms: now,
            stages,
        }
    }

    pub fn stage(&self, stage: &str) -> Option<&StageRecord> {
        self.stages.get(stage)
    }

    pub fn is_complete(&self, stage: &str) -> bool {
        self.stages.get(stage).is_some_and(|s| s.complete)
    }
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------
// The store
// ---------------------------------------------------------------------------

pub struct RunStore {
    root: PathBuf,
}

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

impl RunStore {
    /// Create the canonical layout in an empty (or absent) directory and
    /// persist the config and a fresh manifest.
    pub fn init(root: impl Into<PathBuf>, config: &RunConfig) -> Result<Self, StoreError> {
        config.validate()?;
        let root = root.into();
        if root.exists() && fs::read_dir(&root)?.next().is_some() {
            return Err(StoreError::DirectoryNonEmpty(root));
        }
        fs::create_dir_all(&root)?;
        for dir in [
            "descriptions",
            "images",
            "testcases",
            "responses",
            "reports",
            "logs",
        ] {
            fs::create_dir_all(root.join(dir))?;
        }
        let store = RunStore { root };
        store.write_json(CONFIG_FILE, config)?;
        store.write_json(MANIFEST_FILE, &RunManifest::new(config))?;
        Ok(store)
    }

    /// Open an existing run directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        if !root.join(MANIFEST_FILE).is_file() {
            return Err(StoreError::ManifestUnreadable(format!(
                "{} has no {MANIFEST_FILE}",
                root.display()
            )));
        }
        Ok(RunStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn load_config(&self) -> Result<RunConfig, StoreError> {
        let bytes = fs::read(self.path(CONFIG_FILE))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn load_manifest(&self) -> Result<RunManifest, StoreError> {
        let bytes = fs::read(self.path(MANIFEST_FILE))
            .map_err(|e| StoreError::ManifestUnreadable(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::ManifestUnreadable(e.to_string()))
    }

    fn save_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        self.write_json(MANIFEST_FILE, manifest)
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn write_artifact(&self, relative: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let target = self.path(relative);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = target.with_extension("tmp-write");
        {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(bytes)?;
            file.sync_all()?;
        }
        fs::rename(&tmp, &target)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, relative: &str, value: &T) -> Result<(), StoreError> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_artifact(relative, &bytes)
    }

    /// One JSON object per line.
    pub fn write_jsonl<T: Serialize>(
        &self,
        relative: &str,
        records: &[T],
    ) -> Result<(), StoreError> {
        let mut out = Vec::new();
        for record in records {
            serde_json::to_writer(&mut out, record)?;
            out.push(b'\n');
        }
        self.write_artifact(relative, &out)
    }

    pub fn read_jsonl<T: for<'de> Deserialize<'de>>(
        &self,
        relative: &str,
    ) -> Result<Vec<T>, StoreError> {
        let text = fs::read_to_string(self.path(relative))?;
        let mut records = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line)?);
        }
        Ok(records)
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, relative: &str) -> Result<T, StoreError> {
        let bytes = fs::read(self.path(relative))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Record a stage complete with checksums over its artifacts.
    pub fn mark_complete(&self, stage: &str, artifact_paths: &[String]) -> Result<(), StoreError> {
        let mut manifest = self.load_manifest()?;
        if !manifest.stages.contains_key(stage) {
            return Err(StoreError::UnknownStage(stage.to_string()));
        }
        let mut artifacts = Vec::with_capacity(artifact_paths.len());
        for path in artifact_paths {
            let bytes = fs::read(self.path(path))?;
            artifacts.push(ArtifactRecord {
                path: path.clone(),
                sha256: sha256_hex(&bytes),
            });
        }
        let record = manifest.stages.get_mut(stage).expect("checked");
        record.complete = true;
        record.completed_ms = now_ms();
        record.artifacts = artifacts;
        manifest.updated_ms = now_ms();
        self.save_manifest(&manifest)
    }

    /// Delete a stage's completion marker (its artifacts stay on disk).
    pub fn clear_stage(&self, stage: &str) -> Result<(), StoreError> {
        let mut manifest = self.load_manifest()?;
        let record = manifest
            .stages
            .get_mut(stage)
            .ok_or_else(|| StoreError::UnknownStage(stage.to_string()))?;
        *record = StageRecord::default();
        manifest.updated_ms = now_ms();
        self.save_manifest(&manifest)
    }

    /// Verify every completed stage's artifacts, then name the earliest
    /// incomplete stage; `None` means the run is fully complete.
    pub fn resume(&self) -> Result<Option<String>, StoreError> {
        let manifest = self.load_manifest()?;
        for stage in STAGES {
            let record = manifest.stages.get(stage).ok_or_else(|| {
                StoreError::ManifestUnreadable(format!("manifest lacks stage {stage}"))
            })?;
            if !record.complete {
                return Ok(Some(stage.to_string()));
            }
            for artifact in &record.artifacts {
                let path = self.path(&artifact.path);
                let bytes = fs::read(&path).map_err(|_| StoreError::MissingArtifact {
                    stage: stage.to_string(),
                    path: artifact.path.clone(),
                })?;
                if sha256_hex(&bytes) != artifact.sha256 {
                    return Err(StoreError::ChecksumMismatch {
                        path: artifact.path.clone(),
                    });
                }
            }
        }
        Ok(None)
    }
}
