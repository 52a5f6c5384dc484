//! Configuration-driven experiment runner: one TOML file in, a complete
//! artifact tree out.
//!
//! [`run_experiment`] wires the other modules into a fixed pipeline:
//!
//! 1. `gen_data` — synthesize the concept dataset (shared by all trials).
//! 2. `train` — train the dense baseline, checkpointing every epoch.
//! 3. `dissect_r00` — dissect the dense baseline.
//! 4. per pruning round `r`: `prune_rNN` derives the next mask from the
//!    previous round's weights, `replay_rNN` retrains under it (rewind +
//!    replay, or fine-tune), `dissect_rNN` dissects the result, and
//!    `consistency_rNN` compares its report with the baseline's.
//! 5. `report` — aggregate CSV tables and SVG figures per trial.
//!
//! Stages 2–5 run once per *trial*: each entry in
//! [`ExperimentConfig::trials`] is a model-initialization seed, and every
//! trial is measured independently against the same dataset and schedule.
//!
//! ## Caching and resumption
//!
//! Every completed stage records two things in `state.json`: a hash of its
//! inputs (the config sections it depends on plus the content hashes of every
//! artifact it read) and the hash of every file it wrote. On a later run a
//! stage is skipped only when its input hash still matches *and* all of its
//! recorded outputs verify on disk; a deleted or corrupted artifact therefore
//! re-executes exactly the stages needed to rebuild it, and a config edit
//! under the same output directory is refused outright. Because every stage
//! is deterministic, an interrupted-then-resumed run converges to the same
//! bytes as an uninterrupted one.

use crate::concept_data::{
    classification_data, ClassificationData, ConceptDataset, DataError, MicroBrodenSpec,
};
use crate::dissector::{dissect_network, DissectError, DissectionConfig, DissectionReport};
use crate::metrics::{consistency, emit_curves, summarize, ConsistencyReport, MetricsError, RoundMetrics};
use crate::model::{Model, ModelError, ModelSpec};
use crate::pruner::{prune_round, replay, PruneConfig, PruneError, PruneScope, PruningMask};
use crate::tensor::{NamedTensorSet, TensorError};
use crate::trainer::{
    finetune_standard, train, CheckpointSeries, Recording, TrainError, TrainOptions,
    TrainingSchedule,
};
use crate::util::{sha256_file, write_atomic, ContentHasher};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Config layout understood by this build.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// `state.json` layout understood by this build.
pub const STATE_FORMAT_VERSION: u32 = 1;

const EVAL_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Complete description of one experiment. Everything an output tree contains
/// is a pure function of this struct; the resolved form (defaults filled in)
/// is written to `config.resolved.toml` so every run is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must equal [`CONFIG_SCHEMA_VERSION`].
    pub schema_version: u32,
    /// Model-initialization seed of each trial. Trials share the dataset,
    /// schedule, and dissection settings; only the initial weights differ.
    pub trials: Vec<u64>,
    pub data: MicroBrodenSpec,
    pub model: ModelSection,
    pub schedule: TrainingSchedule,
    pub prune: PruneSection,
    pub dissection: DissectionConfig,
}

/// Architecture knobs. Input size and class count are not listed here: they
/// follow from the dataset (3×`image_size`² inputs, `colors × shapes`
/// classes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
}

/// How each pruned network is retrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Rewind survivors to the `rewind_epoch` snapshot and replay the
    /// original schedule under the mask.
    #[default]
    Rewind,
    /// Keep the current weights and fine-tune at the schedule's final
    /// learning rate.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    /// Fraction of the surviving weights removed each round.
    pub fraction_per_round: f64,
    pub scope: PruneScope,
    /// Number of prune → retrain rounds.
    pub rounds: u32,
    /// Epoch whose snapshot rewinding restores.
    pub rewind_epoch: usize,
    #[serde(default)]
    pub mode: ReplayMode,
    /// Stop each replay after this (absolute) epoch instead of running the
    /// schedule to its end; `None` replays in full.
    #[serde(default)]
    pub replay_end: Option<usize>,
    /// Fine-tune length under [`ReplayMode::Finetune`]. Defaults to the
    /// number of epochs a replay would run: schedule length minus rewind
    /// epoch.
    #[serde(default)]
    pub finetune_epochs: Option<usize>,
}

impl ExperimentConfig {
    /// The architecture this config trains: input shape and class count come
    /// from the dataset section.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input: (3, self.data.image_size, self.data.image_size),
            stem_width: self.model.stem_width,
            stage_widths: self.model.stage_widths.clone(),
            blocks_per_stage: self.model.blocks_per_stage.clone(),
            n_classes: self.data.colors.len() * self.data.shapes.len(),
        }
    }

    fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            fraction_per_round: self.prune.fraction_per_round,
            scope: self.prune.scope,
            rewind_epoch: self.prune.rewind_epoch,
        }
    }

    /// Epochs a [`ReplayMode::Finetune`] run trains for.
    pub fn resolved_finetune_epochs(&self) -> usize {
        self.prune
            .finetune_epochs
            .unwrap_or_else(|| self.schedule.epochs.saturating_sub(self.prune.rewind_epoch))
    }

    /// Every constraint violation in this config, each prefixed with the
    /// field path it concerns. Empty means the config is runnable.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            v.push(format!(
                "schema_version: this build understands version {CONFIG_SCHEMA_VERSION}, found {}",
                self.schema_version
            ));
        }
        if self.trials.is_empty() {
            v.push("trials: at least one trial seed is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.trials {
            if !seen.insert(s) {
                v.push(format!("trials: seed {s} is listed twice"));
            }
        }
        if let Err(e) = self.data.validate() {
            v.push(format!("data: {e}"));
        }
        if let Err(e) = self.model_spec().validate() {
            v.push(format!("model: {e}"));
        }
        if let Err(e) = self.schedule.validate() {
            v.push(format!("schedule: {e}"));
        }
        for &d in &self.schedule.decay_epochs {
            if d >= self.schedule.epochs {
                v.push(format!(
                    "schedule.decay_epochs: epoch {d} lies beyond the schedule's {} epochs and would never apply",
                    self.schedule.epochs
                ));
            }
        }
        if self.prune.rounds == 0 {
            v.push("prune.rounds: at least one pruning round is required".into());
        }
        if self.prune.rounds > 99 {
            v.push(format!(
                "prune.rounds: at most 99 rounds are supported, found {}",
                self.prune.rounds
            ));
        }
        if let Err(e) = self.prune_config().validate() {
            v.push(format!("prune.fraction_per_round: {e}"));
        }
        if self.prune.rewind_epoch > self.schedule.epochs {
            v.push(format!(
                "prune.rewind_epoch: {} is outside the schedule (0..={} epochs)",
                self.prune.rewind_epoch, self.schedule.epochs
            ));
        }
        if let Some(end) = self.prune.replay_end {
            if end < self.prune.rewind_epoch || end > self.schedule.epochs {
                v.push(format!(
                    "prune.replay_end: {end} must lie within rewind_epoch..=epochs ({}..={})",
                    self.prune.rewind_epoch, self.schedule.epochs
                ));
            }
        }
        if self.prune.mode == ReplayMode::Finetune && self.schedule.epochs == 0 {
            v.push(
                "prune.mode: fine-tuning takes its learning rate from the schedule's final epoch, \
                 which an empty schedule does not have"
                    .into(),
            );
        }
        if let Err(e) = self.dissection.validate() {
            v.push(format!("dissection: {e}"));
        }
        let sites = self.model_spec().activation_sites();
        for layer in &self.dissection.layers {
            if !sites.contains(layer) {
                v.push(format!(
                    "dissection.layers: {layer:?} is not an activation site of this model (available: {})",
                    sites.join(", ")
                ));
            }
        }
        v
    }
}

/// Parse and fully validate a TOML experiment config. Parse errors carry the
/// file location; constraint violations are collected into one error listing
/// every offending field.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, OrchestratorError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let config: ExperimentConfig =
        toml::from_str(&text).map_err(|e| OrchestratorError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let violations = config.violations();
    if !violations.is_empty() {
        return Err(OrchestratorError::Invalid(violations));
    }
    Ok(config)
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid experiment config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("config file {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error(
        "output directory {0} is not empty; resume to continue the run it holds, \
         or point the experiment at a fresh directory"
    )]
    OutputDirNotEmpty(PathBuf),
    #[error(
        "the config does not match the one recorded in {0}; \
         refusing to mix two experiments in one output directory"
    )]
    ConfigChanged(PathBuf),
    #[error("unknown stage {0:?}")]
    UnknownStage(String),
    #[error("state file {path}: {msg}")]
    State { path: PathBuf, msg: String },
    #[error("artifact {path}: {msg}")]
    Artifact { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Dissect(#[from] DissectError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl OrchestratorError {
    /// Process exit code for this failure: 1 for configuration problems
    /// (bad config, wrong directory, unknown stage), 2 for stage failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            OrchestratorError::Invalid(_)
            | OrchestratorError::Config { .. }
            | OrchestratorError::OutputDirNotEmpty(_)
            | OrchestratorError::ConfigChanged(_)
            | OrchestratorError::UnknownStage(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError {
    let path = path.to_path_buf();
    move |source| OrchestratorError::Io { path, source }
}

// ---------------------------------------------------------------------------
// Persistent state
// ---------------------------------------------------------------------------

/// One completed stage: what it depended on and what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash over the stage's config inputs and consumed artifact hashes.
    pub inputs: String,
    /// Output-root-relative path → sha256, one entry per file written.
    pub outputs: BTreeMap<String, String>,
}

/// Everything `state.json` holds. A stage appears here only after all of its
/// outputs were written and hashed; the file is rewritten atomically after
/// every stage, so a crash leaves a consistent (if shorter) record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentState {
    pub format_version: u32,
    pub stages: BTreeMap<String, StageRecord>,
}

impl ExperimentState {
    fn new() -> Self {
        Self {
            format_version: STATE_FORMAT_VERSION,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let state: Self = serde_json::from_str(&text).map_err(|e| OrchestratorError::State {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if state.format_version != STATE_FORMAT_VERSION {
            return Err(OrchestratorError::State {
                path: path.to_path_buf(),
                msg: format!("unsupported format version {}", state.format_version),
            });
        }
        Ok(state)
    }
}

// ---------------------------------------------------------------------------
// Stage plan
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    GenData,
    Train,
    /// Dissect the network of round `r`; 0 is the dense baseline.
    Dissect(u32),
    Prune(u32),
    Replay(u32),
    Consistency(u32),
    Report,
}

impl Phase {
    fn name(self) -> String {
        match self {
            Phase::GenData => "gen_data".into(),
            Phase::Train => "train".into(),
            Phase::Dissect(r) => format!("dissect_r{r:02}"),
            Phase::Prune(r) => format!("prune_r{r:02}"),
            Phase::Replay(r) => format!("replay_r{r:02}"),
            Phase::Consistency(r) => format!("consistency_r{r:02}"),
            Phase::Report => "report".into(),
        }
    }
}

fn phase_list(rounds: u32) -> Vec<Phase> {
    let mut v = vec![Phase::GenData, Phase::Train, Phase::Dissect(0)];
    for r in 1..=rounds {
        v.extend([
            Phase::Prune(r),
            Phase::Replay(r),
            Phase::Dissect(r),
            Phase::Consistency(r),
        ]);
    }
    v.push(Phase::Report);
    v
}

/// Names of the pipeline's stages for a `rounds`-round experiment, in
/// execution order. These are the values [`RunOptions::until`] accepts; the
/// per-trial stages run once per trial under each name.
pub fn stage_names(rounds: u32) -> Vec<String> {
    phase_list(rounds).into_iter().map(Phase::name).collect()
}

// ---------------------------------------------------------------------------
// Run options and outcome
// ---------------------------------------------------------------------------

/// Knobs for one [`run_experiment`] invocation.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue a run already present in the output directory, skipping each
    /// stage whose inputs still match and whose outputs verify. Without this,
    /// a non-empty output directory is refused.
    pub resume: bool,
    /// Stop (cleanly, resumably) once this many stages have *executed*;
    /// skipped stages do not count. `None` runs to the end.
    pub stage_limit: Option<usize>,
    /// Run only through the named stage (see [`stage_names`]), inclusive.
    pub until: Option<String>,
}

/// What a [`run_experiment`] call did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    /// Stages that actually ran.
    pub executed: usize,
    /// Stages skipped because their cached outputs verified.
    pub skipped: usize,
    /// Whether every requested stage is now complete (false only when a
    /// `stage_limit` stopped the run early).
    pub complete: bool,
}

// ---------------------------------------------------------------------------
// The pipeline
// ---------------------------------------------------------------------------

/// Run (or continue) the experiment `config` describes, writing every
/// artifact under `out_root`.
///
/// The output tree:
///
/// ```text
/// out_root/
///   config.resolved.toml       config with all defaults filled in
///   state.json                 stage cache (inputs + output hashes)
///   data/                      generated concept dataset
///   trial_<seed>/
///     baseline/checkpoints/    per-epoch training snapshots
///     baseline/eval.json       validation accuracy of the dense net
///     baseline/dissect/        report.json + iou_table.csv
///     rounds/round_NN/
///       mask/                  mask.bin + mask.json
///       model/tensors.bin      retrained weights
///       eval.json              validation accuracy
///       dissect/               report.json + iou_table.csv
///       consistency.json       unit-level comparison vs the baseline
///     report/                  summary.csv, consistency.csv, fig*.svg
/// ```
pub fn run_experiment(
    config: &ExperimentConfig,
    out_root: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome, OrchestratorError> {
    let violations = config.violations();
    if !violations.is_empty() {
        return Err(OrchestratorError::Invalid(violations));
    }
    let phases = phase_list(config.prune.rounds);
    let upto = match &opts.until {
        None => phases.len(),
        Some(name) => {
            phases
                .iter()
                .position(|p| p.name() == *name)
                .ok_or_else(|| OrchestratorError::UnknownStage(name.clone()))?
                + 1
        }
    };

    fs::create_dir_all(out_root).map_err(io_err(out_root))?;
    let dir_empty = fs::read_dir(out_root)
        .map_err(io_err(out_root))?
        .next()
        .is_none();
    if !dir_empty && !opts.resume {
        return Err(OrchestratorError::OutputDirNotEmpty(out_root.to_path_buf()));
    }

    // Pin the config to the directory: first run writes the resolved form,
    // later runs must match it exactly.
    let resolved_path = out_root.join("config.resolved.toml");
    if resolved_path.exists() {
        let text = fs::read_to_string(&resolved_path).map_err(io_err(&resolved_path))?;
        let recorded: ExperimentConfig =
            toml::from_str(&text).map_err(|e| OrchestratorError::Config {
                path: resolved_path.clone(),
                msg: e.to_string(),
            })?;
        if recorded != *config {
            return Err(OrchestratorError::ConfigChanged(resolved_path));
        }
    } else {
        let text = toml::to_string_pretty(config).map_err(|e| OrchestratorError::Config {
            path: resolved_path.clone(),
            msg: format!("cannot serialize config: {e}"),
        })?;
        write_atomic(&resolved_path, text.as_bytes()).map_err(io_err(&resolved_path))?;
    }

    let state_path = out_root.join("state.json");
    let state = if state_path.exists() {
        ExperimentState::load(&state_path)?
    } else {
        ExperimentState::new()
    };

    let mut pipeline = Pipeline {
        config,
        out: out_root.to_path_buf(),
        state,
        state_path,
        limit: opts.stage_limit,
        executed: 0,
        skipped: 0,
        stopped: false,
        dataset: None,
        class_data: None,
    };
    for phase in &phases[..upto] {
        pipeline.run_phase(*phase)?;
        if pipeline.stopped {
            break;
        }
    }
    Ok(RunOutcome {
        executed: pipeline.executed,
        skipped: pipeline.skipped,
        complete: !pipeline.stopped,
    })
}

struct Pipeline<'c> {
    config: &'c ExperimentConfig,
    out: PathBuf,
    state: ExperimentState,
    state_path: PathBuf,
    limit: Option<usize>,
    executed: usize,
    skipped: usize,
    /// Set when the stage limit is reached; no further stage runs.
    stopped: bool,
    dataset: Option<ConceptDataset>,
    class_data: Option<ClassificationData>,
}

impl<'c> Pipeline<'c> {
    fn trials(&self) -> &'c [u64] {
        &self.config.trials
    }

    fn run_phase(&mut self, phase: Phase) -> Result<(), OrchestratorError> {
        if let Phase::GenData = phase {
            return self.stage_gen_data();
        }
        for &s in self.trials() {
            if self.stopped {
                break;
            }
            match phase {
                Phase::GenData => unreachable!("handled above"),
                Phase::Train => self.stage_train(s)?,
                Phase::Dissect(r) => self.stage_dissect(s, r)?,
                Phase::Prune(r) => self.stage_prune(s, r)?,
                Phase::Replay(r) => self.stage_replay(s, r)?,
                Phase::Consistency(r) => self.stage_consistency(s, r)?,
                Phase::Report => self.stage_report(s)?,
            }
        }
        Ok(())
    }

    // -- caching core -------------------------------------------------------

    /// Execute `body` unless the stage's record is current: inputs unchanged
    /// and every recorded output verifying on disk. `body` returns the files
    /// it wrote; their hashes become the new record.
    fn run_stage<F>(&mut self, id: String, inputs: String, body: F) -> Result<(), OrchestratorError>
    where
        F: FnOnce(&mut Self) -> Result<Vec<PathBuf>, OrchestratorError>,
    {
        if self.stopped {
            return Ok(());
        }
        if let Some(record) = self.state.stages.get(&id) {
            if record.inputs == inputs {
                if self.outputs_verify(&id, record)? {
                    log::info!("stage {id}: cached");
                    self.skipped += 1;
                    return Ok(());
                }
            } else {
                log::info!("stage {id}: inputs changed; recomputing");
            }
        }
        if let Some(limit) = self.limit {
            if self.executed >= limit {
                log::info!("stage {id}: stopping before execution (stage limit {limit})");
                self.stopped = true;
                return Ok(());
            }
        }
        log::info!("stage {id}: running");
        let files = body(self)?;
        let mut outputs = BTreeMap::new();
        for file in files {
            let rel = self.rel(&file)?;
            let hash = file_hash(&file)?;
            outputs.insert(rel, hash);
        }
        self.state.stages.insert(id, StageRecord { inputs, outputs });
        self.save_state()?;
        self.executed += 1;
        Ok(())
    }

    /// Whether every output recorded for a stage still hashes to its
    /// recorded value.
    fn outputs_verify(&self, id: &str, record: &StageRecord) -> Result<bool, OrchestratorError> {
        for (rel, expected) in &record.outputs {
            let path = self.out.join(rel);
            if !path.is_file() {
                log::warn!("stage {id}: output {rel} is missing; recomputing");
                return Ok(false);
            }
            if &file_hash(&path)? != expected {
                log::warn!("stage {id}: output {rel} is stale or corrupted; recomputing");
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn save_state(&self) -> Result<(), OrchestratorError> {
        let bytes = serde_json::to_vec_pretty(&self.state)?;
        write_atomic(&self.state_path, &bytes).map_err(io_err(&self.state_path))
    }

    fn rel(&self, path: &Path) -> Result<String, OrchestratorError> {
        let rel = path.strip_prefix(&self.out).map_err(|_| OrchestratorError::Artifact {
            path: path.to_path_buf(),
            msg: "stage wrote a file outside the output directory".into(),
        })?;
        Ok(rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/"))
    }

    // -- shared data --------------------------------------------------------

    fn ensure_dataset(&mut self) -> Result<(), OrchestratorError> {
        if self.dataset.is_none() {
            let dir = self.out.join("data");
            self.dataset = Some(ConceptDataset::load(&dir)?);
        }
        Ok(())
    }

    fn dataset(&self) -> &ConceptDataset {
        self.dataset.as_ref().expect("dataset ensured before use")
    }

    fn ensure_class_data(&mut self) -> Result<(), OrchestratorError> {
        self.ensure_dataset()?;
        if self.class_data.is_none() {
            self.class_data = Some(classification_data(self.dataset())?);
        }
        Ok(())
    }

    // -- paths ---------------------------------------------------------------

    fn trial_dir(&self, s: u64) -> PathBuf {
        self.out.join(format!("trial_{s}"))
    }

    fn round_dir(&self, s: u64, r: u32) -> PathBuf {
        self.trial_dir(s).join("rounds").join(format!("round_{r:02}"))
    }

    /// Weights of the network produced by round `r`; round 0 is the dense
    /// baseline's final checkpoint.
    fn model_tensors_path(&self, s: u64, r: u32) -> PathBuf {
        if r == 0 {
            self.trial_dir(s)
                .join("baseline")
                .join("checkpoints")
                .join(format!("epoch_{}", self.config.schedule.epochs))
                .join("tensors.bin")
        } else {
            self.round_dir(s, r).join("model").join("tensors.bin")
        }
    }

    // -- stages ---------------------------------------------------------------

    fn stage_gen_data(&mut self) -> Result<(), OrchestratorError> {
        if self.stopped {
            return Ok(());
        }
        let inputs = InputsHash::new("gen_data")
            .text("data", &serde_json::to_string(&self.config.data)?)
            .finish();
        self.run_stage("gen_data".into(), inputs, |p| {
            let dir = p.out.join("data");
            clear_dir(&dir)?;
            let dataset = p.config.data.generate(&dir)?;
            log::info!(
                "generated {} images over {} concepts",
                dataset.images().len(),
                dataset.index().concepts().len()
            );
            p.dataset = Some(dataset);
            p.class_data = None;
            walk_files(&dir)
        })
    }

    fn stage_train(&mut self, s: u64) -> Result<(), OrchestratorError> {
        if self.stopped {
            return Ok(());
        }
        self.ensure_dataset()?;
        let spec = self.config.model_spec();
        let inputs = InputsHash::new("train")
            .text("dataset", self.dataset().content_hash())
            .text("model", &serde_json::to_string(&spec)?)
            .text("schedule", &serde_json::to_string(&self.config.schedule)?)
            .bytes("trial", &s.to_le_bytes())
            .finish();
        self.run_stage(format!("trial_{s}/train"), inputs, move |p| {
            p.ensure_class_data()?;
            let base = p.trial_dir(s).join("baseline");
            let ckpt = base.join("checkpoints");
            clear_dir(&ckpt)?;
            let eval_path = base.join("eval.json");
            remove_if_present(&eval_path)?;

            let mut model = Model::init(&spec, s)?;
            let data = p.class_data.as_ref().expect("ensured above");
            train(
                &mut model,
                &data.train,
                &p.config.schedule,
                TrainOptions {
                    recording: Recording::Disk(&ckpt),
                    ..TrainOptions::default()
                },
            )?;
            let accuracy = model.evaluate_accuracy(
                &data.val.inputs,
                &data.val.labels,
                p.config.schedule.batch_size,
            )?;
            log::info!("trial {s}: baseline validation accuracy {accuracy:.4}");
            write_eval(&eval_path, accuracy)?;

            let mut files = walk_files(&ckpt)?;
            files.push(eval_path);
            Ok(files)
        })
    }

    fn stage_dissect(&mut self, s: u64, r: u32) -> Result<(), OrchestratorError> {
        if self.stopped {
            return Ok(());
        }
        self.ensure_dataset()?;
        let spec = self.config.model_spec();
        let tensors_path = self.model_tensors_path(s, r);
        let mask_hash = if r > 0 {
            Some(file_hash(&self.round_dir(s, r).join("mask").join("mask.bin"))?)
        } else {
            None
        };
        let inputs = InputsHash::new("dissect")
            .file("tensors", &tensors_path)?
            .text("mask", mask_hash.as_deref().unwrap_or("none"))
            .text("dissection", &serde_json::to_string(&self.config.dissection)?)
            .text("dataset", self.dataset().content_hash())
            .finish();
        self.run_stage(format!("trial_{s}/dissect_r{r:02}"), inputs, move |p| {
            let out_dir = if r == 0 {
                p.trial_dir(s).join("baseline").join("dissect")
            } else {
                p.round_dir(s, r).join("dissect")
            };
            clear_dir(&out_dir)?;

            let bytes = fs::read(&tensors_path).map_err(io_err(&tensors_path))?;
            let model = Model::from_tensors(&spec, NamedTensorSet::from_bytes(&bytes)?)?;
            let mut dissection = dissect_network(&model, p.dataset(), &p.config.dissection)?;
            dissection.report.mask_hash = mask_hash;
            log::info!(
                "trial {s} round {r}: {} of {} units interpretable",
                dissection.report.interpretable_units().count(),
                dissection.report.units.len()
            );

            let report_path = out_dir.join("report.json");
            dissection.report.save(&report_path)?;
            let table_path = out_dir.join("iou_table.csv");
            dissection.write_iou_table(&table_path)?;
            Ok(vec![report_path, table_path])
        })
    }

    fn stage_prune(&mut self, s: u64, r: u32) -> Result<(), OrchestratorError> {
        if self.stopped {
            return Ok(());
        }
        let prev_tensors = self.model_tensors_path(s, r - 1);
        let parent_mask_dir = (r >= 2).then(|| self.round_dir(s, r - 1).join("mask"));
        let parent_label = match &parent_mask_dir {
            Some(dir) => file_hash(&dir.join("mask.bin"))?,
            None => "full".into(),
        };
        let prune = &self.config.prune;
        let inputs = InputsHash::new("prune")
            .file("tensors", &prev_tensors)?
            .text("parent", &parent_label)
            .bytes("fraction", &prune.fraction_per_round.to_le_bytes())
            .text("scope", &prune.scope.to_string())
            .bytes("round", &r.to_le_bytes())
            .finish();
        self.run_stage(format!("trial_{s}/prune_r{r:02}"), inputs, move |p| {
            let bytes = fs::read(&prev_tensors).map_err(io_err(&prev_tensors))?;
            let tensors = NamedTensorSet::from_bytes(&bytes)?;
            let parent = match &parent_mask_dir {
                Some(dir) => PruningMask::load(dir)?,
                None => PruningMask::full(&tensors),
            };
            let mask = prune_round(
                &tensors,
                &parent,
                p.config.prune.fraction_per_round,
                p.config.prune.scope,
            )?;
            log::info!(
                "trial {s} round {r}: {} of {} prunable weights remain ({:.4})",
                mask.kept(),
                mask.total(),
                mask.fraction_remaining()
            );
            let dir = p.round_dir(s, r).join("mask");
            clear_dir(&dir)?;
            mask.save(&dir)?;
            Ok(vec![dir.join("mask.bin"), dir.join("mask.json")])
        })
    }

    fn stage_replay(&mut self, s: u64, r: u32) -> Result<(), OrchestratorError> {
        if self.stopped {
            return Ok(());
        }
        self.ensure_dataset()?;
        let spec = self.config.model_spec();
        let mask_dir = self.round_dir(s, r).join("mask");
        let mut ih = InputsHash::new("replay")
            .file("mask", &mask_dir.join("mask.bin"))?
            .text("schedule", &serde_json::to_string(&self.config.schedule)?)
            .text("dataset", self.dataset().content_hash());
        match self.config.prune.mode {
            ReplayMode::Rewind => {
                let epoch_dir = self
                    .trial_dir(s)
                    .join("baseline")
                    .join("checkpoints")
                    .join(format!("epoch_{}", self.config.prune.rewind_epoch));
                for name in ["manifest.json", "tensors.bin", "optimizer.bin", "rng.bin"] {
                    ih = ih.file(name, &epoch_dir.join(name))?;
                }
                ih = ih
                    .text("mode", "rewind")
                    .text("end", &format!("{:?}", self.config.prune.replay_end));
            }
            ReplayMode::Finetune => {
                ih = ih
                    .file("tensors", &self.model_tensors_path(s, r - 1))?
                    .text("mode", "finetune")
                    .bytes("epochs", &self.config.resolved_finetune_epochs().to_le_bytes());
            }
        }
        let inputs = ih.finish();
        self.run_stage(format!("trial_{s}/replay_r{r:02}"), inputs, move |p| {
            p.ensure_class_data()?;
            let round = p.round_dir(s, r);
            let model_dir = round.join("model");
            clear_dir(&model_dir)?;
            let eval_path = round.join("eval.json");
            remove_if_present(&eval_path)?;

            let mask = PruningMask::load(&mask_dir)?;
            let data = p.class_data.as_ref().expect("ensured above");
            let model = match p.config.prune.mode {
                ReplayMode::Rewind => {
                    let ckpt = p.trial_dir(s).join("baseline").join("checkpoints");
                    let series = CheckpointSeries::open(&ckpt)?;
                    let (model, _) = replay(
                        &spec,
                        &series,
                        p.config.prune.rewind_epoch,
                        &mask,
                        &data.train,
                        &p.config.schedule,
                        p.config.prune.replay_end,
                        Recording::FinalOnly,
                    )?;
                    model
                }
                ReplayMode::Finetune => {
                    let prev = p.model_tensors_path(s, r - 1);
                    let bytes = fs::read(&prev).map_err(io_err(&prev))?;
                    let mut model = Model::from_tensors(&spec, NamedTensorSet::from_bytes(&bytes)?)?;
                    mask.apply(model.tensors_mut())?;
                    finetune_standard(
                        &mut model,
                        &data.train,
                        &p.config.schedule,
                        &mask,
                        p.config.resolved_finetune_epochs(),
                    )?;
                    model
                }
            };

            let tensors_path = model_dir.join("tensors.bin");
            write_atomic(&tensors_path, &model.tensors().to_bytes())
                .map_err(io_err(&tensors_path))?;
            let accuracy = model.evaluate_accuracy(
                &data.val.inputs,
                &data.val.labels,
                p.config.schedule.batch_size,
            )?;
            log::info!("trial {s} round {r}: validation accuracy {accuracy:.4}");
            write_eval(&eval_path, accuracy)?;
            Ok(vec![tensors_path, eval_path])
        })
    }

    fn stage_consistency(&mut self, s: u64, r: u32) -> Result<(), OrchestratorError> {
        if self.stopped {
            return Ok(());
        }
        let baseline_report = self
            .trial_dir(s)
            .join("baseline")
            .join("dissect")
            .join("report.json");
        let round = self.round_dir(s, r);
        let round_report = round.join("dissect").join("report.json");
        let inputs = InputsHash::new("consistency")
            .file("baseline", &baseline_report)?
            .file("pruned", &round_report)?
            .finish();
        self.run_stage(format!("trial_{s}/consistency_r{r:02}"), inputs, move |_p| {
            let original = DissectionReport::load(&baseline_report)?;
            let pruned = DissectionReport::load(&round_report)?;
            let report = consistency(&original, &pruned)?;
            log::info!(
                "trial {s} round {r}: {}/{} units still interpretable, {}/{} same concept",
                report.still_interpretable,
                report.original_interpretable,
                report.same_concept,
                report.still_interpretable
            );
            let path = round.join("consistency.json");
            write_atomic(&path, &serde_json::to_vec_pretty(&report)?).map_err(io_err(&path))?;
            Ok(vec![path])
        })
    }

    fn stage_report(&mut self, s: u64) -> Result<(), OrchestratorError> {
        if self.stopped {
            return Ok(());
        }
        self.ensure_dataset()?;
        let rounds = self.config.prune.rounds;
        let baseline = self.trial_dir(s).join("baseline");
        let mut ih = InputsHash::new("report")
            .text("dataset", self.dataset().content_hash())
            .file("eval0", &baseline.join("eval.json"))?
            .file("report0", &baseline.join("dissect").join("report.json"))?;
        for r in 1..=rounds {
            let round = self.round_dir(s, r);
            ih = ih
                .file(&format!("mask{r}"), &round.join("mask").join("mask.bin"))?
                .file(&format!("eval{r}"), &round.join("eval.json"))?
                .file(&format!("report{r}"), &round.join("dissect").join("report.json"))?
                .file(&format!("consistency{r}"), &round.join("consistency.json"))?;
        }
        let inputs = ih.finish();
        self.run_stage(format!("trial_{s}/report"), inputs, move |p| {
            let baseline_report =
                DissectionReport::load(&baseline.join("dissect").join("report.json"))?;
            let mut rows = vec![RoundMetrics {
                round: 0,
                fraction_remaining: 1.0,
                accuracy: read_eval(&baseline.join("eval.json"))?,
                summary: summarize(&baseline_report),
                consistency: None,
            }];
            for r in 1..=rounds {
                let round = p.round_dir(s, r);
                let mask = PruningMask::load(&round.join("mask"))?;
                let report = DissectionReport::load(&round.join("dissect").join("report.json"))?;
                let cons: ConsistencyReport = read_json(&round.join("consistency.json"))?;
                rows.push(RoundMetrics {
                    round: r,
                    fraction_remaining: mask.fraction_remaining(),
                    accuracy: read_eval(&round.join("eval.json"))?,
                    summary: summarize(&report),
                    consistency: Some(cons),
                });
            }
            let dir = p.trial_dir(s).join("report");
            clear_dir(&dir)?;
            emit_curves(&rows, p.dataset().index().categories(), &dir)?;
            log::info!("trial {s}: report covers {} rounds", rows.len());
            walk_files(&dir)
        })
    }
}

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

/// Labeled, length-prefixed hash accumulator for stage input fingerprints.
struct InputsHash(ContentHasher);

impl InputsHash {
    fn new(stage_kind: &str) -> Self {
        let mut h = ContentHasher::new();
        h.chunk(stage_kind.as_bytes());
        Self(h)
    }

    fn text(mut self, label: &str, value: &str) -> Self {
        self.0.chunk(label.as_bytes());
        self.0.chunk(value.as_bytes());
        self
    }

    fn bytes(mut self, label: &str, value: &[u8]) -> Self {
        self.0.chunk(label.as_bytes());
        self.0.chunk(value);
        self
    }

    /// Fold in the content hash of a consumed artifact.
    fn file(self, label: &str, path: &Path) -> Result<Self, OrchestratorError> {
        let hash = file_hash(path)?;
        Ok(self.text(label, &hash))
    }

    fn finish(self) -> String {
        self.0.finish()
    }
}

fn file_hash(path: &Path) -> Result<String, OrchestratorError> {
    sha256_file(path).map_err(|source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Remove a directory's contents (if any) and recreate it empty, so a
/// re-executed stage never leaves stale files behind.
fn clear_dir(dir: &Path) -> Result<(), OrchestratorError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn remove_if_present(path: &Path) -> Result<(), OrchestratorError> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(source) => Err(OrchestratorError::Io {
            path: path.to_path_buf(),
            source,
        }),
    }
}

/// Every file under `dir`, recursively, in sorted order.
fn walk_files(dir: &Path) -> Result<Vec<PathBuf>, OrchestratorError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(io_err(&d))? {
            let entry = entry.map_err(io_err(&d))?;
            let path = entry.path();
            if entry.file_type().map_err(io_err(&path))?.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, OrchestratorError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| OrchestratorError::Artifact {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalRecord {
    format_version: u32,
    split: String,
    accuracy: f64,
}

fn write_eval(path: &Path, accuracy: f64) -> Result<(), OrchestratorError> {
    let record = EvalRecord {
        format_version: EVAL_FORMAT_VERSION,
        split: "val".into(),
        accuracy,
    };
    write_atomic(path, &serde_json::to_vec_pretty(&record)?).map_err(io_err(path))
}

fn read_eval(path: &Path) -> Result<f64, OrchestratorError> {
    let record: EvalRecord = read_json(path)?;
    if record.format_version != EVAL_FORMAT_VERSION {
        return Err(OrchestratorError::Artifact {
            path: path.to_path_buf(),
            msg: format!("unsupported eval format version {}", record.format_version),
        });
    }
    Ok(record.accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn mini_config() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: 1,
            trials: vec![0],
            data: MicroBrodenSpec {
                image_size: 8,
                train_images: 12,
                val_images: 6,
                dissect_images: 6,
                colors: vec!["red".into(), "blue".into()],
                shapes: vec!["square".into(), "circle".into()],
                textures: vec!["blank".into()],
                seed: 5,
                noise: 0.02,
                object_min: 4,
                object_max: 6,
            },
            model: ModelSection {
                stem_width: 4,
                stage_widths: vec![4, 8],
                blocks_per_stage: vec![1, 1],
            },
            schedule: TrainingSchedule {
                epochs: 2,
                batch_size: 4,
                learning_rate: 0.05,
                decay_factor: 10.0,
                decay_epochs: vec![1],
                momentum: 0.9,
                weight_decay: 1e-4,
                seed: 7,
            },
            prune: PruneSection {
                fraction_per_round: 0.3,
                scope: PruneScope::Global,
                rounds: 2,
                rewind_epoch: 1,
                mode: ReplayMode::Rewind,
                replay_end: None,
                finetune_epochs: None,
            },
            dissection: DissectionConfig {
                quantile: 0.9,
                ..DissectionConfig::new(vec!["stage2.block0".into()])
            },
        }
    }

    /// Stages a full run of `config` executes: data generation plus, per
    /// trial, train, baseline dissect, four stages per round, and the report.
    fn expected_stages(config: &ExperimentConfig) -> usize {
        1 + config.trials.len() * (3 + 4 * config.prune.rounds as usize)
    }

    fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut map = BTreeMap::new();
        for file in walk_files(root).unwrap() {
            let rel = file
                .strip_prefix(root)
                .unwrap()
                .to_string_lossy()
                .into_owned();
            map.insert(rel, fs::read(&file).unwrap());
        }
        map
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config = mini_config();
        let text = toml::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn violations_name_every_offending_field() {
        let mut config = mini_config();
        config.schema_version = 9;
        config.trials = vec![1, 1];
        config.prune.rounds = 0;
        config.prune.rewind_epoch = 99;
        config.dissection.layers = vec!["nowhere".into()];
        let violations = config.violations();
        for needle in [
            "schema_version",
            "trials",
            "prune.rounds",
            "prune.rewind_epoch",
            "dissection.layers",
        ] {
            assert!(
                violations.iter().any(|v| v.starts_with(needle)),
                "missing a violation for {needle}: {violations:?}"
            );
        }
    }

    #[test]
    fn replay_window_is_validated() {
        let mut config = mini_config();
        config.prune.replay_end = Some(0); // before the rewind epoch
        assert!(config
            .violations()
            .iter()
            .any(|v| v.starts_with("prune.replay_end")));
        config.prune.replay_end = Some(2);
        assert!(config.violations().is_empty());
    }

    #[test]
    fn unknown_config_keys_are_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        let mut text = toml::to_string_pretty(&mini_config()).unwrap();
        text.push_str("\n[prune.extras]\nturbo = true\n");
        fs::write(&path, text).unwrap();
        let err = load_config(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown field"), "unexpected message: {msg}");
    }

    #[test]
    fn mini_experiment_produces_the_full_tree() {
        let config = mini_config();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let outcome = run_experiment(&config, &out, &RunOptions::default()).unwrap();
        assert!(outcome.complete);
        assert_eq!(outcome.executed, expected_stages(&config));
        assert_eq!(outcome.skipped, 0);

        let trial = out.join("trial_0");
        for rel in [
            "config.resolved.toml",
            "state.json",
            "data/index.csv",
            "data/concepts.csv",
        ] {
            assert!(out.join(rel).is_file(), "missing {rel}");
        }
        for rel in [
            "baseline/checkpoints/series.json",
            "baseline/eval.json",
            "baseline/dissect/report.json",
            "baseline/dissect/iou_table.csv",
            "rounds/round_01/mask/mask.bin",
            "rounds/round_01/mask/mask.json",
            "rounds/round_01/model/tensors.bin",
            "rounds/round_01/eval.json",
            "rounds/round_01/dissect/report.json",
            "rounds/round_01/consistency.json",
            "rounds/round_02/consistency.json",
            "report/summary.csv",
            "report/consistency.csv",
            "report/fig1_accuracy.svg",
            "report/fig2_interpretability.svg",
            "report/fig3_categories.svg",
            "report/fig4_consistency.svg",
        ] {
            assert!(trial.join(rel).is_file(), "missing trial_0/{rel}");
        }

        // One dissection per network, one consistency per round.
        let reports = walk_files(&out)
            .unwrap()
            .iter()
            .filter(|p| p.file_name().is_some_and(|n| n == "report.json"))
            .count();
        assert_eq!(reports, config.prune.rounds as usize + 1);

        // The baseline report carries no mask hash; each round's report names
        // exactly the mask it was trained under.
        let baseline =
            DissectionReport::load(&trial.join("baseline").join("dissect").join("report.json"))
                .unwrap();
        assert_eq!(baseline.mask_hash, None);
        let round1 = DissectionReport::load(
            &trial.join("rounds/round_01/dissect/report.json"),
        )
        .unwrap();
        assert_eq!(
            round1.mask_hash.as_deref(),
            Some(file_hash(&trial.join("rounds/round_01/mask/mask.bin")).unwrap().as_str())
        );

        // The summary table covers the baseline plus every round.
        let summary = fs::read_to_string(trial.join("report/summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 1 + 1 + config.prune.rounds as usize);
    }

    #[test]
    fn rerun_skips_every_stage() {
        let config = mini_config();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        run_experiment(&config, &out, &RunOptions::default()).unwrap();
        let before = tree_bytes(&out);

        let outcome = run_experiment(
            &config,
            &out,
            &RunOptions {
                resume: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert!(outcome.complete);
        assert_eq!(outcome.executed, 0);
        assert_eq!(outcome.skipped, expected_stages(&config));
        assert_eq!(tree_bytes(&out), before, "resume must not touch artifacts");
    }

    #[test]
    fn interrupted_then_resumed_matches_an_uninterrupted_run() {
        let config = mini_config();
        let dir = tempfile::tempdir().unwrap();

        let straight = dir.path().join("straight");
        run_experiment(&config, &straight, &RunOptions::default()).unwrap();

        let resumed = dir.path().join("resumed");
        let first = run_experiment(
            &config,
            &resumed,
            &RunOptions {
                stage_limit: Some(4),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert!(!first.complete);
        assert_eq!(first.executed, 4);

        let second = run_experiment(
            &config,
            &resumed,
            &RunOptions {
                resume: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert!(second.complete);
        assert_eq!(second.executed + second.skipped, expected_stages(&config));

        assert_eq!(tree_bytes(&straight), tree_bytes(&resumed));
    }

    #[test]
    fn nonempty_directory_without_resume_is_refused() {
        let config = mini_config();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        fs::create_dir_all(&out).unwrap();
        fs::write(out.join("stray.txt"), b"not mine").unwrap();
        let err = run_experiment(&config, &out, &RunOptions::default()).unwrap_err();
        assert!(matches!(err, OrchestratorError::OutputDirNotEmpty(_)));
    }

    #[test]
    fn changed_config_on_resume_is_refused() {
        let config = mini_config();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        run_experiment(
            &config,
            &out,
            &RunOptions {
                until: Some("gen_data".into()),
                ..RunOptions::default()
            },
        )
        .unwrap();

        let mut changed = config.clone();
        changed.schedule.learning_rate = 0.01;
        let err = run_experiment(
            &changed,
            &out,
            &RunOptions {
                resume: true,
                ..RunOptions::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, OrchestratorError::ConfigChanged(_)));
    }

    #[test]
    fn corrupted_artifact_reruns_only_its_stage() {
        let config = mini_config();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        run_experiment(&config, &out, &RunOptions::default()).unwrap();

        let mask_bin = out.join("trial_0/rounds/round_01/mask/mask.bin");
        let original = fs::read(&mask_bin).unwrap();
        fs::write(&mask_bin, b"garbage").unwrap();

        let outcome = run_experiment(
            &config,
            &out,
            &RunOptions {
                resume: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(outcome.executed, 1, "only the pruning stage should rerun");
        assert_eq!(outcome.skipped, expected_stages(&config) - 1);
        assert_eq!(fs::read(&mask_bin).unwrap(), original);
    }

    #[test]
    fn until_stops_after_the_requested_stage() {
        let config = mini_config();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let outcome = run_experiment(
            &config,
            &out,
            &RunOptions {
                until: Some("train".into()),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert!(outcome.complete);
        assert_eq!(outcome.executed, 2); // gen_data + train
        assert!(out.join("trial_0/baseline/eval.json").is_file());
        assert!(!out.join("trial_0/baseline/dissect").exists());

        let err = run_experiment(
            &config,
            &out,
            &RunOptions {
                resume: true,
                until: Some("launch_rockets".into()),
                ..RunOptions::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, OrchestratorError::UnknownStage(_)));
    }

    #[test]
    fn trials_are_measured_independently() {
        let mut config = mini_config();
        config.trials = vec![5, 6];
        config.prune.rounds = 1;
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let outcome = run_experiment(&config, &out, &RunOptions::default()).unwrap();
        assert_eq!(outcome.executed, expected_stages(&config));
        for trial in ["trial_5", "trial_6"] {
            assert!(out.join(trial).join("report/summary.csv").is_file());
        }
        // Different initializations, different weights.
        let a = fs::read(out.join("trial_5/baseline/checkpoints/epoch_0/tensors.bin")).unwrap();
        let b = fs::read(out.join("trial_6/baseline/checkpoints/epoch_0/tensors.bin")).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn stage_names_cover_every_round() {
        let names = stage_names(2);
        assert_eq!(
            names,
            [
                "gen_data",
                "train",
                "dissect_r00",
                "prune_r01",
                "replay_r01",
                "dissect_r01",
                "consistency_r01",
                "prune_r02",
                "replay_r02",
                "dissect_r02",
                "consistency_r02",
                "report",
            ]
        );
    }

    #[test]
    fn reference_configs_validate_cleanly() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["desk.toml", "mini.toml"] {
            let config = load_config(&root.join(name))
                .unwrap_or_else(|e| panic!("configs/{name} should validate: {e}"));
            assert!(config.violations().is_empty());
        }
    }
}
