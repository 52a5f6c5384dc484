//! SGD training with a step learning-rate schedule and bit-exact,
//! resumable checkpointing.
//!
//! Determinism is the point of this module. Batch order is a pure function of
//! `(seed, epoch)`, every floating-point reduction runs in a fixed order on
//! one thread, and a checkpoint captures the complete training state —
//! parameters, optimizer momentum, and RNG position — so that restoring
//! epoch `e` and training onward reproduces the original run bit for bit.
//!
//! On disk a checkpoint series is
//!
//! ```text
//! dir/
//!   series.json      format version, schedule, epochs, per-file hashes
//!   epoch_<e>/
//!     manifest.json  format version, epoch, architecture hash, rng state
//!     tensors.bin    all named tensors (parameters + BN running stats)
//!     optimizer.bin  momentum buffers, aligned with the tensor set
//!     rng.bin        ChaCha8 seed/stream/position
//! ```

use ndarray::{Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::concept_data::SplitTensors;
use crate::model::{softmax_cross_entropy, Model, ModelError};
use crate::pruner::{PruneError, PruningMask};
use crate::tensor::{NamedTensorSet, RngState, TensorError};
use crate::util::{sha256_hex, write_atomic, LeReader};

const SERIES_FORMAT_VERSION: u32 = 1;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSchedule {
    /// Total epochs `T`. Zero is legal and trains nothing.
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate.
    pub learning_rate: f64,
    /// Divide the learning rate by this at every decay epoch.
    pub decay_factor: f64,
    /// Epochs (0-based) at which the decay applies, strictly increasing.
    pub decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seed for batch shuffling and any stochastic training behavior.
    pub seed: u64,
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |msg: String| Err(TrainError::Schedule(msg));
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be positive, found {}", self.learning_rate));
        }
        if !(self.decay_factor >= 1.0 && self.decay_factor.is_finite()) {
            return err(format!("decay_factor must be >= 1, found {}", self.decay_factor));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!(
                "decay_epochs must be strictly increasing, found {:?}",
                self.decay_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum must be in [0, 1), found {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err(format!("weight_decay must be >= 0, found {}", self.weight_decay));
        }
        Ok(())
    }
}

/// The learning rate in force during `epoch`: the initial rate divided by
/// `decay_factor` once per decay epoch at or before it. Addressed by absolute
/// epoch so a rewound replay sees exactly the rates of the original run.
pub fn learning_rate_at(schedule: &TrainingSchedule, epoch: usize) -> Result<f64, TrainError> {
    if epoch >= schedule.epochs {
        return Err(TrainError::EpochRange {
            epoch,
            epochs: schedule.epochs,
        });
    }
    let mut lr = schedule.learning_rate;
    for &e in &schedule.decay_epochs {
        if epoch >= e {
            lr /= schedule.decay_factor;
        }
    }
    Ok(lr)
}

/// Deterministic batch order for one epoch: a Fisher-Yates shuffle driven by
/// a ChaCha8 stream derived from `(seed, epoch)` alone, so epoch `e` shuffles
/// identically whether reached by training from scratch or by resuming.
pub fn shuffle_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training schedule: {0}")]
    Schedule(String),
    #[error("epoch {epoch} outside schedule of {epochs} epochs")]
    EpochRange { epoch: usize, epochs: usize },
    #[error("epoch range {start}..{end} invalid for a schedule of {epochs} epochs")]
    BadRange {
        start: usize,
        end: usize,
        epochs: usize,
    },
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("optimizer state does not match the model: {0}")]
    StateMismatch(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("no snapshot for epoch {epoch}; series covers {available:?}")]
    MissingEpoch { epoch: usize, available: Vec<usize> },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prune(#[from] Box<PruneError>),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// SGD-with-momentum state: one velocity buffer per model tensor (zeros for
/// tensors the optimizer never updates, so indices align).
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub step: u64,
    velocity: NamedTensorSet,
}

const OPTIMIZER_MAGIC: &[u8; 4] = b"PDOP";

impl SgdState {
    pub fn new(tensors: &NamedTensorSet) -> Self {
        let mut velocity = NamedTensorSet::new();
        for t in tensors.iter() {
            velocity
                .push(t.name.clone(), t.kind, ArrayD::zeros(t.data.raw_dim()))
                .expect("names unique in source set");
        }
        Self { step: 0, velocity }
    }

    /// Confirm the buffers line up with `tensors` name-for-name.
    pub fn check_matches(&self, tensors: &NamedTensorSet) -> Result<(), TrainError> {
        if self.velocity.len() != tensors.len() {
            return Err(TrainError::StateMismatch(format!(
                "optimizer tracks {} tensors, model has {}",
                self.velocity.len(),
                tensors.len()
            )));
        }
        for (v, t) in self.velocity.iter().zip(tensors.iter()) {
            if v.name != t.name || v.data.shape() != t.data.shape() {
                return Err(TrainError::StateMismatch(format!(
                    "buffer {:?} {:?} vs tensor {:?} {:?}",
                    v.name,
                    v.data.shape(),
                    t.name,
                    t.data.shape()
                )));
            }
        }
        Ok(())
    }

    /// One SGD step: `v = momentum*v + (g + wd*w)`, `w -= lr*v`, applied to
    /// trainable tensors in set order.
    pub fn step(
        &mut self,
        tensors: &mut NamedTensorSet,
        grads: &[ArrayD<f32>],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        let (lr, mom, wd) = (lr as f32, momentum as f32, weight_decay as f32);
        for idx in 0..tensors.len() {
            if !tensors.get(idx).kind.trainable() {
                continue;
            }
            let w = tensors
                .get_mut(idx)
                .data
                .as_slice_mut()
                .expect("standard layout");
            let v = self
                .velocity
                .get_mut(idx)
                .data
                .as_slice_mut()
                .expect("standard layout");
            let g = grads[idx].as_slice().expect("standard layout");
            for i in 0..w.len() {
                let grad = g[i] + wd * w[i];
                v[i] = mom * v[i] + grad;
                w[i] -= lr * v[i];
            }
        }
        self.step += 1;
    }

    pub fn velocity(&self) -> &NamedTensorSet {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut NamedTensorSet {
        &mut self.velocity
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(OPTIMIZER_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.velocity.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = LeReader::new(bytes);
        let magic = r.take(4)?;
        if magic != OPTIMIZER_MAGIC {
            return Err(TensorError::Format("bad optimizer state magic".into()));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(TensorError::Format(format!(
                "unsupported optimizer format version {version}"
            )));
        }
        let step = r.u64()?;
        let velocity = NamedTensorSet::from_bytes(r.take(bytes.len() - 16)?)?;
        Ok(Self { step, velocity })
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Complete training state after some number of epochs: snapshot `e` is the
/// state once `e` epochs have run (so snapshot 0 is the initialization).
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub tensors: NamedTensorSet,
    pub optimizer: SgdState,
    pub rng: RngState,
}

impl Snapshot {
    fn capture(epoch: usize, model: &Model, optimizer: &SgdState, rng: &ChaCha8Rng) -> Self {
        Self {
            epoch,
            tensors: model.tensors().clone(),
            optimizer: optimizer.clone(),
            rng: RngState::capture(rng),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EpochManifest {
    format_version: u32,
    epoch: usize,
    spec_hash: String,
    rng: RngState,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesManifest {
    format_version: u32,
    spec_hash: String,
    schedule: TrainingSchedule,
    epochs: Vec<usize>,
    /// Relative path -> sha256, e.g. `"epoch_0/tensors.bin"`.
    files: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
enum SeriesStorage {
    Memory(Vec<Snapshot>),
    Disk {
        dir: PathBuf,
        manifest_files: BTreeMap<String, String>,
    },
}

/// An ordered collection of epoch snapshots, in memory or on disk.
#[derive(Debug, Clone)]
pub struct CheckpointSeries {
    spec_hash: String,
    schedule: TrainingSchedule,
    epochs: Vec<usize>,
    storage: SeriesStorage,
}

impl CheckpointSeries {
    /// Open an on-disk series, validating the manifest's format version and
    /// epoch contiguity. Snapshot payloads are verified lazily on read.
    pub fn open(dir: &Path) -> Result<Self, TrainError> {
        let path = dir.join("series.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: SeriesManifest = serde_json::from_str(&text)?;
        if manifest.format_version != SERIES_FORMAT_VERSION {
            return Err(TrainError::Checkpoint {
                path,
                msg: format!(
                    "format version {} unsupported (expected {SERIES_FORMAT_VERSION})",
                    manifest.format_version
                ),
            });
        }
        validate_epoch_list(&manifest.epochs).map_err(|msg| TrainError::Checkpoint {
            path: path.clone(),
            msg,
        })?;
        Ok(Self {
            spec_hash: manifest.spec_hash,
            schedule: manifest.schedule,
            epochs: manifest.epochs,
            storage: SeriesStorage::Disk {
                dir: dir.to_path_buf(),
                manifest_files: manifest.files,
            },
        })
    }

    pub fn epochs(&self) -> &[usize] {
        &self.epochs
    }

    pub fn final_epoch(&self) -> usize {
        *self.epochs.last().expect("series is never empty")
    }

    pub fn schedule(&self) -> &TrainingSchedule {
        &self.schedule
    }

    pub fn spec_hash(&self) -> &str {
        &self.spec_hash
    }

    /// Load one snapshot. Disk reads verify every payload hash against the
    /// series manifest and refuse mismatched format versions or epochs.
    pub fn snapshot(&self, epoch: usize) -> Result<Snapshot, TrainError> {
        if !self.epochs.contains(&epoch) {
            return Err(TrainError::MissingEpoch {
                epoch,
                available: self.epochs.clone(),
            });
        }
        match &self.storage {
            SeriesStorage::Memory(snaps) => Ok(snaps
                .iter()
                .find(|s| s.epoch == epoch)
                .expect("epoch list matches snapshots")
                .clone()),
            SeriesStorage::Disk {
                dir,
                manifest_files,
            } => {
                let sub = format!("epoch_{epoch}");
                let read = |name: &str| -> Result<Vec<u8>, TrainError> {
                    let rel = format!("{sub}/{name}");
                    let path = dir.join(&rel);
                    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                    let expected = manifest_files.get(&rel).ok_or_else(|| {
                        TrainError::Checkpoint {
                            path: path.clone(),
                            msg: "file is not listed in series.json".into(),
                        }
                    })?;
                    let actual = sha256_hex(&bytes);
                    if &actual != expected {
                        return Err(TrainError::Checkpoint {
                            path,
                            msg: format!(
                                "content hash mismatch: manifest {expected}, file {actual}"
                            ),
                        });
                    }
                    Ok(bytes)
                };

                let manifest_bytes = read("manifest.json")?;
                let manifest: EpochManifest = serde_json::from_slice(&manifest_bytes)?;
                let mpath = dir.join(&sub).join("manifest.json");
                if manifest.format_version != SERIES_FORMAT_VERSION {
                    return Err(TrainError::Checkpoint {
                        path: mpath,
                        msg: format!("format version {} unsupported", manifest.format_version),
                    });
                }
                if manifest.epoch != epoch {
                    return Err(TrainError::Checkpoint {
                        path: mpath,
                        msg: format!("manifest says epoch {}, directory says {epoch}", manifest.epoch),
                    });
                }
                if manifest.spec_hash != self.spec_hash {
                    return Err(TrainError::Checkpoint {
                        path: mpath,
                        msg: "architecture hash differs from series".into(),
                    });
                }
                let tensors = NamedTensorSet::from_bytes(&read("tensors.bin")?)?;
                let optimizer = SgdState::from_bytes(&read("optimizer.bin")?)?;
                let rng = RngState::from_bytes(&read("rng.bin")?)?;
                Ok(Snapshot {
                    epoch,
                    tensors,
                    optimizer,
                    rng,
                })
            }
        }
    }

    pub fn last(&self) -> Result<Snapshot, TrainError> {
        self.snapshot(self.final_epoch())
    }
}

fn validate_epoch_list(epochs: &[usize]) -> Result<(), String> {
    if epochs.is_empty() {
        return Err("series lists no epochs".into());
    }
    for w in epochs.windows(2) {
        if w[1] != w[0] + 1 {
            return Err(format!("epochs not contiguous: {epochs:?}"));
        }
    }
    Ok(())
}

/// Where the train loop puts its snapshots.
#[derive(Debug, Clone, Copy)]
pub enum Recording<'a> {
    /// Every epoch snapshot to `dir`, plus `series.json`.
    Disk(&'a Path),
    /// Every epoch snapshot held in memory.
    Memory,
    /// No snapshots; the caller keeps only the trained model.
    FinalOnly,
}

enum Recorder<'a> {
    FinalOnly,
    Memory(Vec<Snapshot>),
    Disk {
        dir: &'a Path,
        files: BTreeMap<String, String>,
        epochs: Vec<usize>,
    },
}

impl<'a> Recorder<'a> {
    fn new(recording: Recording<'a>) -> Self {
        match recording {
            Recording::FinalOnly => Recorder::FinalOnly,
            Recording::Memory => Recorder::Memory(Vec::new()),
            Recording::Disk(dir) => Recorder::Disk {
                dir,
                files: BTreeMap::new(),
                epochs: Vec::new(),
            },
        }
    }

    fn record(
        &mut self,
        snapshot: Snapshot,
        spec_hash: &str,
        schedule: &TrainingSchedule,
    ) -> Result<(), TrainError> {
        match self {
            Recorder::FinalOnly => Ok(()),
            Recorder::Memory(snaps) => {
                snaps.push(snapshot);
                Ok(())
            }
            Recorder::Disk { dir, files, epochs } => {
                let sub = format!("epoch_{}", snapshot.epoch);
                let subdir = dir.join(&sub);
                std::fs::create_dir_all(&subdir).map_err(io_err(&subdir))?;
                let manifest = EpochManifest {
                    format_version: SERIES_FORMAT_VERSION,
                    epoch: snapshot.epoch,
                    spec_hash: spec_hash.to_string(),
                    rng: snapshot.rng.clone(),
                };
                let payloads: [(&str, Vec<u8>); 4] = [
                    ("manifest.json", serde_json::to_vec_pretty(&manifest)?),
                    ("tensors.bin", snapshot.tensors.to_bytes()),
                    ("optimizer.bin", snapshot.optimizer.to_bytes()),
                    ("rng.bin", snapshot.rng.to_bytes()),
                ];
                for (name, bytes) in &payloads {
                    let path = subdir.join(name);
                    write_atomic(&path, bytes).map_err(io_err(&path))?;
                    files.insert(format!("{sub}/{name}"), sha256_hex(bytes));
                }
                epochs.push(snapshot.epoch);
                // Keep series.json current after every epoch so a crashed run
                // leaves a consistent (if shorter) series behind.
                let series = SeriesManifest {
                    format_version: SERIES_FORMAT_VERSION,
                    spec_hash: spec_hash.to_string(),
                    schedule: schedule.clone(),
                    epochs: epochs.clone(),
                    files: files.clone(),
                };
                let path = dir.join("series.json");
                write_atomic(&path, &serde_json::to_vec_pretty(&series)?).map_err(io_err(&path))?;
                Ok(())
            }
        }
    }

    fn finish(
        self,
        spec_hash: &str,
        schedule: &TrainingSchedule,
    ) -> Option<CheckpointSeries> {
        match self {
            Recorder::FinalOnly => None,
            Recorder::Memory(snaps) => {
                let epochs = snaps.iter().map(|s| s.epoch).collect();
                Some(CheckpointSeries {
                    spec_hash: spec_hash.to_string(),
                    schedule: schedule.clone(),
                    epochs,
                    storage: SeriesStorage::Memory(snaps),
                })
            }
            Recorder::Disk { dir, files, epochs } => Some(CheckpointSeries {
                spec_hash: spec_hash.to_string(),
                schedule: schedule.clone(),
                epochs,
                storage: SeriesStorage::Disk {
                    dir: dir.to_path_buf(),
                    manifest_files: files,
                },
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Options for [`train`]. The default trains the full schedule from epoch 0
/// with fresh optimizer state, keeping snapshots in memory.
pub struct TrainOptions<'a> {
    /// Keep these positions frozen at zero (gradients masked, weights
    /// re-zeroed after every step).
    pub mask: Option<&'a PruningMask>,
    /// First epoch to run. Nonzero means "resume": the model must hold the
    /// state after `start_epoch` epochs.
    pub start_epoch: usize,
    /// Stop after this epoch (exclusive); `None` runs to the schedule's end.
    /// Lets a replay be abbreviated to fewer epochs than the original run.
    pub end_epoch: Option<usize>,
    pub recording: Recording<'a>,
    /// Optimizer + RNG state restored from a snapshot; fresh when `None`.
    pub init_state: Option<(SgdState, RngState)>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            mask: None,
            start_epoch: 0,
            end_epoch: None,
            recording: Recording::Memory,
            init_state: None,
        }
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainRun {
    /// Recorded snapshots; `None` under [`Recording::FinalOnly`].
    pub series: Option<CheckpointSeries>,
    /// Learning rate used in each executed epoch, in order.
    pub lr_trace: Vec<f64>,
    /// Mean training loss of each executed epoch.
    pub loss_trace: Vec<f64>,
}

/// Train `model` on `data` under `schedule`, mutating it in place.
///
/// A snapshot is recorded for `start_epoch` (the state *before* the first
/// executed epoch) and after every epoch, so a full run records epochs
/// `0..=T` — contiguous, with snapshot `e` capturing the state after `e`
/// epochs. Restoring snapshot `e` and training from `start_epoch: e`
/// reproduces the original snapshots `e+1..=T` bit for bit.
pub fn train(
    model: &mut Model,
    data: &SplitTensors,
    schedule: &TrainingSchedule,
    opts: TrainOptions<'_>,
) -> Result<TrainRun, TrainError> {
    schedule.validate()?;
    let t_end = opts.end_epoch.unwrap_or(schedule.epochs);
    if opts.start_epoch > t_end || t_end > schedule.epochs {
        return Err(TrainError::BadRange {
            start: opts.start_epoch,
            end: t_end,
            epochs: schedule.epochs,
        });
    }
    if data.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }

    let resolved = opts
        .mask
        .map(|m| m.resolve(model.tensors()))
        .transpose()
        .map_err(Box::new)?;
    if let Some(r) = &resolved {
        r.check_weights_zeroed(model.tensors()).map_err(Box::new)?;
    }

    let spec_hash = model.spec().content_hash();
    let (mut sgd, mut rng) = match opts.init_state {
        Some((sgd, rng_state)) => {
            sgd.check_matches(model.tensors())?;
            let rng = rng_state.restore()?;
            (sgd, rng)
        }
        None => (
            SgdState::new(model.tensors()),
            ChaCha8Rng::seed_from_u64(schedule.seed),
        ),
    };

    let mut recorder = Recorder::new(opts.recording);
    recorder.record(
        Snapshot::capture(opts.start_epoch, model, &sgd, &rng),
        &spec_hash,
        schedule,
    )?;

    let n = data.len();
    let mut lr_trace = Vec::new();
    let mut loss_trace = Vec::new();
    for epoch in opts.start_epoch..t_end {
        let lr = learning_rate_at(schedule, epoch)?;
        lr_trace.push(lr);
        let order = shuffle_indices(n, schedule.seed, epoch as u64);
        let mut epoch_loss = 0.0f64;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let (x, y) = gather_batch(data, chunk);
            let (logits, cache) = model.forward_train(&x)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            epoch_loss += loss as f64;
            steps += 1;
            let mut grads = model.backward(&cache, &dlogits);
            if let Some(r) = &resolved {
                r.zero_arrays(&mut grads);
            }
            sgd.step(
                model.tensors_mut(),
                &grads,
                lr,
                schedule.momentum,
                schedule.weight_decay,
            );
            if let Some(r) = &resolved {
                r.zero_weights(model.tensors_mut());
            }
        }
        let mean_loss = epoch_loss / steps.max(1) as f64;
        loss_trace.push(mean_loss);
        log::info!("epoch {epoch}: lr {lr:.6}, mean loss {mean_loss:.4}");
        recorder.record(
            Snapshot::capture(epoch + 1, model, &sgd, &rng),
            &spec_hash,
            schedule,
        )?;
    }

    let _ = &mut rng; // rng is carried (and snapshotted) for future stochastic steps
    Ok(TrainRun {
        series: recorder.finish(&spec_hash, schedule),
        lr_trace,
        loss_trace,
    })
}

/// Post-pruning fine-tuning at a constant learning rate — the final rate of
/// the schedule — instead of rewind-and-replay. Fresh optimizer state; batch
/// orders continue the shuffle sequence past the schedule's last epoch so
/// fine-tune epochs never repeat a training epoch's order.
pub fn finetune_standard(
    model: &mut Model,
    data: &SplitTensors,
    schedule: &TrainingSchedule,
    mask: &PruningMask,
    epochs: usize,
) -> Result<TrainRun, TrainError> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if epochs == 0 {
        return Ok(TrainRun {
            series: None,
            lr_trace: vec![],
            loss_trace: vec![],
        });
    }
    if schedule.epochs == 0 {
        return Err(TrainError::Schedule(
            "cannot fine-tune at the final learning rate of an empty schedule".into(),
        ));
    }
    let lr = learning_rate_at(schedule, schedule.epochs - 1)?;

    let resolved = mask.resolve(model.tensors()).map_err(Box::new)?;
    resolved
        .check_weights_zeroed(model.tensors())
        .map_err(Box::new)?;
    let mut sgd = SgdState::new(model.tensors());
    let n = data.len();
    let mut lr_trace = Vec::new();
    let mut loss_trace = Vec::new();
    for k in 0..epochs {
        lr_trace.push(lr);
        let order = shuffle_indices(n, schedule.seed, (schedule.epochs + k) as u64);
        let mut epoch_loss = 0.0f64;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let (x, y) = gather_batch(data, chunk);
            let (logits, cache) = model.forward_train(&x)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch: k, step });
            }
            epoch_loss += loss as f64;
            steps += 1;
            let mut grads = model.backward(&cache, &dlogits);
            resolved.zero_arrays(&mut grads);
            sgd.step(
                model.tensors_mut(),
                &grads,
                lr,
                schedule.momentum,
                schedule.weight_decay,
            );
            resolved.zero_weights(model.tensors_mut());
        }
        let mean_loss = epoch_loss / steps.max(1) as f64;
        loss_trace.push(mean_loss);
        log::info!(
            "fine-tune epoch {}: lr {lr:.6}, mean loss {mean_loss:.4}",
            schedule.epochs + k
        );
    }
    Ok(TrainRun {
        series: None,
        lr_trace,
        loss_trace,
    })
}

fn gather_batch(data: &SplitTensors, indices: &[usize]) -> (Array4<f32>, Vec<u32>) {
    let shape = data.inputs.shape();
    let mut x = Array4::<f32>::zeros((indices.len(), shape[1], shape[2], shape[3]));
    let mut y = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        x.index_axis_mut(Axis(0), row)
            .assign(&data.inputs.index_axis(Axis(0), i));
        y.push(data.labels[i]);
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn schedule(epochs: usize) -> TrainingSchedule {
        TrainingSchedule {
            epochs,
            batch_size: 4,
            learning_rate: 0.05,
            decay_factor: 10.0,
            decay_epochs: vec![],
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 7,
        }
    }

    fn tiny_spec(classes: usize) -> ModelSpec {
        ModelSpec {
            input: (3, 8, 8),
            stem_width: 4,
            stage_widths: vec![4],
            blocks_per_stage: vec![1],
            n_classes: classes,
        }
    }

    /// A deterministic synthetic task: images whose dominant channel encodes
    /// the class.
    fn toy_data(n: usize, classes: usize) -> SplitTensors {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut inputs = Array4::<f32>::zeros((n, 3, 8, 8));
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for i in 0..n {
            let class = i % classes;
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let base = if c == class % 3 { 0.8 } else { -0.4 };
                        inputs[[i, c, y, x]] = base + rng.random_range(-0.2f32..0.2);
                    }
                }
            }
            labels.push(class as u32);
            ids.push(format!("toy_{i:03}"));
        }
        SplitTensors {
            inputs,
            labels,
            ids,
        }
    }

    #[test]
    fn learning_rate_schedule_steps_at_decay_epochs() {
        let schedule = TrainingSchedule {
            epochs: 182,
            batch_size: 128,
            learning_rate: 0.1,
            decay_factor: 10.0,
            decay_epochs: vec![91, 136],
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 1,
        };
        assert_eq!(learning_rate_at(&schedule, 0).unwrap(), 0.1);
        assert_eq!(learning_rate_at(&schedule, 90).unwrap(), 0.1);
        let lr91 = learning_rate_at(&schedule, 91).unwrap();
        assert!((lr91 - 0.01).abs() < 1e-12, "{lr91}");
        let lr140 = learning_rate_at(&schedule, 140).unwrap();
        assert!((lr140 - 0.001).abs() < 1e-12, "{lr140}");
        assert!(matches!(
            learning_rate_at(&schedule, 182),
            Err(TrainError::EpochRange { .. })
        ));
    }

    #[test]
    fn schedule_validation_rejects_bad_fields() {
        let mut s = schedule(5);
        s.batch_size = 0;
        assert!(s.validate().is_err());
        let mut s = schedule(5);
        s.momentum = 1.0;
        assert!(s.validate().is_err());
        let mut s = schedule(5);
        s.decay_epochs = vec![3, 3];
        assert!(s.validate().is_err());
        let mut s = schedule(5);
        s.learning_rate = 0.0;
        assert!(s.validate().is_err());
        assert!(schedule(0).validate().is_ok(), "zero epochs is legal");
    }

    #[test]
    fn shuffle_is_a_permutation_and_epoch_dependent() {
        let a = shuffle_indices(100, 5, 0);
        let b = shuffle_indices(100, 5, 1);
        let again = shuffle_indices(100, 5, 0);
        assert_eq!(a, again);
        assert_ne!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn zero_epoch_schedule_yields_initial_snapshot_only() {
        let spec = tiny_spec(3);
        let mut model = Model::init(&spec, 1).unwrap();
        let before = model.tensors().content_hash();
        let data = toy_data(8, 3);
        let run = train(&mut model, &data, &schedule(0), TrainOptions::default()).unwrap();
        assert_eq!(model.tensors().content_hash(), before, "model untouched");
        let series = run.series.unwrap();
        assert_eq!(series.epochs(), [0]);
        assert!(run.lr_trace.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let spec = tiny_spec(3);
        let data = toy_data(12, 3);
        let mut m1 = Model::init(&spec, 2).unwrap();
        let mut m2 = Model::init(&spec, 2).unwrap();
        train(&mut m1, &data, &schedule(3), TrainOptions::default()).unwrap();
        train(&mut m2, &data, &schedule(3), TrainOptions::default()).unwrap();
        assert_eq!(m1.tensors().content_hash(), m2.tensors().content_hash());
    }

    #[test]
    fn loss_decreases_on_learnable_task() {
        let spec = tiny_spec(3);
        let data = toy_data(24, 3);
        let mut model = Model::init(&spec, 2).unwrap();
        let run = train(&mut model, &data, &schedule(5), TrainOptions::default()).unwrap();
        assert_eq!(run.lr_trace.len(), 5);
        assert!(
            run.loss_trace.last().unwrap() < run.loss_trace.first().unwrap(),
            "loss trace {:?}",
            run.loss_trace
        );
    }

    #[test]
    fn lr_trace_matches_schedule_pointwise() {
        let spec = tiny_spec(3);
        let data = toy_data(8, 3);
        let mut sched = schedule(6);
        sched.decay_epochs = vec![2, 4];
        let mut model = Model::init(&spec, 2).unwrap();
        let run = train(&mut model, &data, &sched, TrainOptions::default()).unwrap();
        for (epoch, &lr) in run.lr_trace.iter().enumerate() {
            assert_eq!(lr, learning_rate_at(&sched, epoch).unwrap());
        }
    }

    #[test]
    fn resume_from_snapshot_reproduces_run_bit_exactly() {
        let spec = tiny_spec(3);
        let data = toy_data(12, 3);
        let sched = schedule(4);

        let mut full = Model::init(&spec, 9).unwrap();
        let full_run = train(&mut full, &data, &sched, TrainOptions::default()).unwrap();
        let series = full_run.series.unwrap();

        // Restore epoch 2 and retrain the remainder.
        let snap = series.snapshot(2).unwrap();
        let mut resumed = Model::from_tensors(&spec, snap.tensors.clone()).unwrap();
        let resumed_run = train(
            &mut resumed,
            &data,
            &sched,
            TrainOptions {
                start_epoch: 2,
                init_state: Some((snap.optimizer, snap.rng)),
                ..TrainOptions::default()
            },
        )
        .unwrap();

        assert_eq!(
            full.tensors().to_bytes(),
            resumed.tensors().to_bytes(),
            "final weights must be bit-identical"
        );
        // Intermediate snapshots agree too.
        let rseries = resumed_run.series.unwrap();
        for e in [2usize, 3, 4] {
            let a = series.snapshot(e).unwrap();
            let b = rseries.snapshot(e).unwrap();
            assert_eq!(a.tensors.to_bytes(), b.tensors.to_bytes(), "epoch {e}");
            assert_eq!(a.optimizer.to_bytes(), b.optimizer.to_bytes(), "epoch {e}");
            assert_eq!(a.rng, b.rng, "epoch {e}");
        }
    }

    #[test]
    fn disk_series_round_trips_bit_exactly() {
        let spec = tiny_spec(3);
        let data = toy_data(8, 3);
        let sched = schedule(2);
        let dir = tempfile::tempdir().unwrap();

        let mut m_disk = Model::init(&spec, 4).unwrap();
        let disk_run = train(
            &mut m_disk,
            &data,
            &sched,
            TrainOptions {
                recording: Recording::Disk(dir.path()),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let mut m_mem = Model::init(&spec, 4).unwrap();
        let mem_run = train(&mut m_mem, &data, &sched, TrainOptions::default()).unwrap();

        let disk = CheckpointSeries::open(dir.path()).unwrap();
        assert_eq!(disk.epochs(), [0, 1, 2]);
        assert_eq!(disk.schedule(), &sched);
        for e in 0..=2usize {
            let a = disk.snapshot(e).unwrap();
            let b = mem_run.series.as_ref().unwrap().snapshot(e).unwrap();
            assert_eq!(a.tensors.to_bytes(), b.tensors.to_bytes(), "epoch {e}");
            assert_eq!(a.optimizer.to_bytes(), b.optimizer.to_bytes());
            assert_eq!(a.rng, b.rng);
        }
        // The series handle returned by train() reads identically.
        let from_run = disk_run.series.unwrap();
        assert_eq!(
            from_run.snapshot(1).unwrap().tensors.to_bytes(),
            disk.snapshot(1).unwrap().tensors.to_bytes()
        );
    }

    #[test]
    fn corrupted_checkpoint_is_refused() {
        let spec = tiny_spec(3);
        let data = toy_data(8, 3);
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::init(&spec, 4).unwrap();
        train(
            &mut model,
            &data,
            &schedule(1),
            TrainOptions {
                recording: Recording::Disk(dir.path()),
                ..TrainOptions::default()
            },
        )
        .unwrap();

        // Flip one byte in a tensor payload.
        let victim = dir.path().join("epoch_1/tensors.bin");
        let mut bytes = std::fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        std::fs::write(&victim, bytes).unwrap();

        let series = CheckpointSeries::open(dir.path()).unwrap();
        assert!(series.snapshot(0).is_ok(), "untouched epoch loads");
        let err = series.snapshot(1).unwrap_err();
        assert!(
            err.to_string().contains("hash mismatch"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn mismatched_format_version_is_refused() {
        let spec = tiny_spec(3);
        let data = toy_data(8, 3);
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::init(&spec, 4).unwrap();
        train(
            &mut model,
            &data,
            &schedule(1),
            TrainOptions {
                recording: Recording::Disk(dir.path()),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let path = dir.path().join("series.json");
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&path, text).unwrap();
        let err = CheckpointSeries::open(dir.path()).unwrap_err();
        assert!(err.to_string().contains("format version"), "{err}");
    }

    #[test]
    fn divergence_is_detected() {
        let spec = tiny_spec(3);
        let data = toy_data(8, 3);
        let mut sched = schedule(2);
        sched.learning_rate = 1e30;
        let mut model = Model::init(&spec, 4).unwrap();
        let err = train(&mut model, &data, &sched, TrainOptions::default()).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
    }

    #[test]
    fn bad_epoch_range_is_rejected() {
        let spec = tiny_spec(3);
        let data = toy_data(8, 3);
        let mut model = Model::init(&spec, 4).unwrap();
        let err = train(
            &mut model,
            &data,
            &schedule(2),
            TrainOptions {
                start_epoch: 3,
                ..TrainOptions::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::BadRange { .. }));
        let err = train(
            &mut model,
            &data,
            &schedule(2),
            TrainOptions {
                end_epoch: Some(5),
                ..TrainOptions::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::BadRange { .. }));
    }

    #[test]
    fn missing_epoch_lookup_errors() {
        let spec = tiny_spec(3);
        let data = toy_data(8, 3);
        let mut model = Model::init(&spec, 4).unwrap();
        let run = train(&mut model, &data, &schedule(2), TrainOptions::default()).unwrap();
        let series = run.series.unwrap();
        assert!(matches!(
            series.snapshot(7),
            Err(TrainError::MissingEpoch { .. })
        ));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let spec = tiny_spec(3);
        let data = toy_data(8, 3);
        let mut model = Model::init(&spec, 4).unwrap();
        let run = train(&mut model, &data, &schedule(2), TrainOptions::default()).unwrap();
        let snap = run.series.unwrap().last().unwrap();
        assert_eq!(snap.optimizer.step, 2 * 2, "two epochs of two steps");
        let bytes = snap.optimizer.to_bytes();
        let back = SgdState::from_bytes(&bytes).unwrap();
        assert_eq!(back, snap.optimizer);
        // Momentum buffers are genuinely nonzero after training.
        assert!(back
            .velocity()
            .iter()
            .any(|t| t.data.iter().any(|&v| v != 0.0)));
    }
}
