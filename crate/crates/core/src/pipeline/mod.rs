//! File-driven stage runner: configuration, artifact layout, run records,
//! and the commands behind the command-line tool.
//!
//! Every stage reads its inputs from disk and writes its outputs to disk,
//! so stages can run in separate processes. Each run leaves a
//! [`RunManifest`] under `<reports_dir>/runs/`, also when it fails.

mod commands;

use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::GridSpec;
use crate::grpo::{GrpoConfig, GrpoError};
use crate::loss::{LossConfig, LossError};
use crate::mgd::{DecoderTrainConfig, MgdConfig, MgdError};
use crate::pnm::PnmError;
use crate::policy::{PolicyConfig, PolicyError, SftConfig};
use crate::reward::{RewardConfig, RewardConfigError};
use crate::scene::{GenConfig, SceneError};
use crate::tensor::CheckpointError;

pub use commands::*;

/// Exit statuses of the command-line tool.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const MISSING: i32 = 4;
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {field}: {msg}")]
    Config { field: String, msg: String },
    #[error("{path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("missing artifact {path} ({hint})")]
    Missing { path: String, hint: String },
    #[error("{0}")]
    Stage(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Schema { .. } => exit::CONFIG,
            Self::Io { .. } => exit::IO,
            Self::Missing { .. } => exit::MISSING,
            Self::Stage(_) => exit::FAILURE,
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl ToString) -> Self {
        Self::Config {
            field: field.into(),
            msg: msg.to_string(),
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(io::Error) -> Self + '_ {
        move |source| Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<PnmError> for PipelineError {
    fn from(e: PnmError) -> Self {
        match e {
            PnmError::Io { path, source } => Self::Io { path, source },
            other => Self::Schema {
                path: "raster".into(),
                msg: other.to_string(),
            },
        }
    }
}

impl From<SceneError> for PipelineError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Config { field, msg } => Self::config(format!("gen.{field}"), msg),
            SceneError::Io { path, source } => Self::Io { path, source },
            SceneError::Raster(r) => r.into(),
            SceneError::Grid(g) => Self::config("grid", g),
            SceneError::Manifest { path, msg } => Self::Schema { path, msg },
        }
    }
}

impl From<CheckpointError> for PipelineError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { path, source } => Self::Io { path, source },
            other => Self::Schema {
                path: "checkpoint".into(),
                msg: other.to_string(),
            },
        }
    }
}

impl From<PolicyError> for PipelineError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Config(msg) => Self::config("policy", msg),
            PolicyError::Checkpoint(c) => c.into(),
            other => Self::Stage(other.to_string()),
        }
    }
}

impl From<GrpoError> for PipelineError {
    fn from(e: GrpoError) -> Self {
        match e {
            GrpoError::Config { field, msg } => Self::config(format!("grpo.{field}"), msg),
            GrpoError::Policy(p) => p.into(),
            GrpoError::Log(source) => Self::Io {
                path: "grpo log".into(),
                source,
            },
            other => Self::Stage(other.to_string()),
        }
    }
}

impl From<MgdError> for PipelineError {
    fn from(e: MgdError) -> Self {
        match e {
            MgdError::Config { field, msg } => Self::config(format!("mgd.{field}"), msg),
            MgdError::Checkpoint(c) => c.into(),
            MgdError::Loss(l) => l.into(),
            other => Self::Stage(other.to_string()),
        }
    }
}

impl From<LossError> for PipelineError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Config(msg) => Self::config("loss", msg),
            other => Self::Stage(other.to_string()),
        }
    }
}

impl From<RewardConfigError> for PipelineError {
    fn from(e: RewardConfigError) -> Self {
        Self::config("reward", e)
    }
}

impl From<crate::grid::GridError> for PipelineError {
    fn from(e: crate::grid::GridError) -> Self {
        Self::Stage(e.to_string())
    }
}

impl From<crate::metrics::MetricsError> for PipelineError {
    fn from(e: crate::metrics::MetricsError) -> Self {
        Self::Stage(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoints_dir: PathBuf,
    pub reports_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            checkpoints_dir: "checkpoints".into(),
            reports_dir: "reports".into(),
        }
    }
}

/// Settings of every stage. The top-level `seed` replaces the seed of
/// every sub-configuration when the config is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    /// A block is labelled changed when its changed-pixel fraction exceeds this.
    pub tau: f64,
    pub gen: GenConfig,
    pub reward: RewardConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub mgd: MgdConfig,
    pub decoder: DecoderTrainConfig,
    pub loss: LossConfig,
    pub paths: Paths,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            tau: 0.0,
            gen: GenConfig::default(),
            reward: RewardConfig::default(),
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            mgd: MgdConfig::default(),
            decoder: DecoderTrainConfig::default(),
            loss: LossConfig::default(),
            paths: Paths::default(),
            seed: 0,
        }
    }
}

fn normalized(p: &Path) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir if out.last().is_some_and(|l| l != "..") => {
                out.pop();
            }
            other => out.push(other.as_os_str().to_string_lossy().into_owned()),
        }
    }
    out
}

impl PipelineConfig {
    /// Parses JSON, resolves seeds, and validates.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| PipelineError::Schema {
            path: origin.into(),
            msg: e.to_string(),
        })?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(PipelineError::io(path))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Copies the top-level seed into every stage.
    pub fn resolved(mut self) -> Self {
        let s = self.seed;
        self.gen.seed = s;
        self.policy.init_seed = s;
        self.sft.seed = s;
        self.grpo.seed = s;
        self.mgd.init_seed = s;
        self.decoder.seed = s;
        self
    }

    /// Replaces the grid's rows and columns, keeping the image size.
    pub fn with_grid(mut self, rows: usize, cols: usize) -> Result<Self> {
        self.grid = GridSpec::new(rows, cols, self.grid.image_h(), self.grid.image_w())
            .map_err(|e| PipelineError::config("grid", e))?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(PipelineError::config("tau", format!("{} is outside [0, 1)", self.tau)));
        }
        self.gen.validate()?;
        let (h, w) = (self.grid.image_h(), self.grid.image_w());
        if (self.gen.h, self.gen.w) != (h, w) {
            return Err(PipelineError::config(
                "gen.h",
                format!("scenes are {}x{} but the grid covers {h}x{w}", self.gen.h, self.gen.w),
            ));
        }
        if (self.mgd.h, self.mgd.w) != (h, w) {
            return Err(PipelineError::config(
                "mgd.h",
                format!("decoder input is {}x{} but the grid covers {h}x{w}", self.mgd.h, self.mgd.w),
            ));
        }
        self.reward.validate()?;
        self.policy.validate()?;
        self.sft.validate().map_err(|e| PipelineError::config("sft", e))?;
        self.grpo.validate()?;
        self.mgd.validate()?;
        self.decoder.validate().map_err(|e| match e {
            MgdError::Config { field, msg } => PipelineError::config(field, msg),
            other => other.into(),
        })?;
        self.loss.validate()?;
        let named = [
            ("paths.data_dir", &self.paths.data_dir),
            ("paths.checkpoints_dir", &self.paths.checkpoints_dir),
            ("paths.reports_dir", &self.paths.reports_dir),
        ];
        for (i, (field, a)) in named.iter().enumerate() {
            if a.as_os_str().is_empty() {
                return Err(PipelineError::config(*field, "must not be empty"));
            }
            for (other, b) in &named[i + 1..] {
                if normalized(a) == normalized(b) {
                    return Err(PipelineError::config(*field, format!("same directory as {other}")));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form: keys sorted, no whitespace.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
    }

    pub fn train_dir(&self) -> PathBuf {
        self.paths.data_dir.join("train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.paths.data_dir.join("test")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.paths.checkpoints_dir.join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.paths.reports_dir.join(name)
    }
}

/// Serializes with object keys in sorted order at every depth.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(PipelineError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<Artifact>,
    pub wall_time_s: f64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub exit_code: i32,
}

/// Inputs and outputs a command reports while it runs.
#[derive(Debug, Default)]
pub struct RunLog {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl RunLog {
    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }
}

pub fn run_manifest_path(cfg: &PipelineConfig, command: &str) -> PathBuf {
    cfg.paths.reports_dir.join("runs").join(format!("{command}.json"))
}

/// Runs `body`, then records a [`RunManifest`] for it whether it succeeded
/// or not. A failure to write the record does not mask the command's own
/// error.
pub fn record_run<T>(
    cfg: &PipelineConfig,
    command: &str,
    body: impl FnOnce(&mut RunLog) -> Result<T>,
) -> Result<T> {
    let start = Instant::now();
    let mut log = RunLog::default();
    let result = body(&mut log);
    let mut outputs = Vec::new();
    let mut checksum_err = None;
    if result.is_ok() {
        for p in &log.outputs {
            match sha256_file(p) {
                Ok(sha256) => outputs.push(Artifact {
                    path: p.display().to_string(),
                    sha256,
                }),
                Err(e) => checksum_err = Some(e),
            }
        }
    }
    let result = match (result, checksum_err) {
        (Ok(_), Some(e)) => Err(e),
        (r, _) => r,
    };
    let manifest = RunManifest {
        command: command.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs: log.inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
        status: if result.is_ok() { RunStatus::Ok } else { RunStatus::Error },
        error: result.as_ref().err().map(|e| e.to_string()),
        exit_code: result.as_ref().map_or_else(PipelineError::exit_code, |_| exit::OK),
    };
    let path = run_manifest_path(cfg, command);
    let written = path
        .parent()
        .map_or(Ok(()), fs::create_dir_all)
        .and_then(|_| fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"));
    match (result, written) {
        (Ok(v), Ok(())) => Ok(v),
        (Ok(_), Err(source)) => Err(PipelineError::Io {
            path: path.display().to_string(),
            source,
        }),
        (Err(e), _) => Err(e),
    }
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    fs::write(path, text).map_err(PipelineError::io(path))
}
