//! Iterative magnitude pruning with rewinding.
//!
//! A [`PruningMask`] marks, for every prunable tensor (convolution and
//! fully-connected weights — never biases or normalization parameters),
//! which positions are still alive. Masks only ever shrink: each round keeps
//! a subset of what the previous round kept. Pruning removes the
//! lowest-magnitude surviving weights, ranked globally across all prunable
//! tensors or separately per tensor, with a total order that makes results
//! reproducible even in the presence of tied magnitudes: ties fall to the
//! earlier tensor, then the lower flat index.
//!
//! [`rewind`] restores an early-epoch training snapshot under a mask — the
//! surviving weights take their old values, pruned positions are zeroed in
//! both the weights and the optimizer's momentum — and [`replay`] then
//! retrains the masked network along the original schedule.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::concept_data::SplitTensors;
use crate::model::{Model, ModelError, ModelSpec};
use crate::tensor::{NamedTensorSet, RngState, TensorError};
use crate::trainer::{
    train, CheckpointSeries, Recording, SgdState, Snapshot, TrainError, TrainOptions,
    TrainRun, TrainingSchedule,
};
use crate::util::{sha256_hex, write_atomic, LeReader};

const MASK_MAGIC: &[u8; 4] = b"PDMK";
const MASK_FORMAT_VERSION: u32 = 1;

/// Whether a pruning round ranks weights across the whole network or within
/// each tensor separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    Global,
    PerLayer,
}

impl std::fmt::Display for PruneScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PruneScope::Global => "global",
            PruneScope::PerLayer => "per_layer",
        })
    }
}

impl std::str::FromStr for PruneScope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(PruneScope::Global),
            "per_layer" | "per-layer" => Ok(PruneScope::PerLayer),
            other => Err(format!("unknown prune scope {other:?} (global|per_layer)")),
        }
    }
}

/// Settings for one pruning experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of the *surviving* weights removed per round, in `[0, 1)`.
    pub fraction_per_round: f64,
    pub scope: PruneScope,
    /// Epoch whose snapshot the rewind restores.
    pub rewind_epoch: usize,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), PruneError> {
        validate_fraction(self.fraction_per_round)
    }
}

fn validate_fraction(fraction: f64) -> Result<(), PruneError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(PruneError::Fraction(fraction));
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("prune fraction must be in [0, 1), found {0}")]
    Fraction(f64),
    #[error("mask does not match the model's prunable tensors: {0}")]
    Mismatch(String),
    #[error("weight {index} of {tensor:?} is masked but holds {value}, not zero")]
    MaskedNonzero {
        tensor: String,
        index: usize,
        value: f32,
    },
    #[error("weight {index} of {tensor:?} is not finite ({value}); refusing to rank magnitudes")]
    NonFinite {
        tensor: String,
        index: usize,
        value: f32,
    },
    #[error("mask file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One tensor's worth of keep/drop flags, in the tensor's flat (row-major)
/// element order.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub keep: Vec<bool>,
}

impl MaskLayer {
    pub fn kept(&self) -> u64 {
        self.keep.iter().filter(|&&k| k).count() as u64
    }

    pub fn total(&self) -> u64 {
        self.keep.len() as u64
    }
}

/// Which weights survive after some number of pruning rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningMask {
    /// How many pruning rounds produced this mask (0 = dense).
    pub round: u32,
    /// Scope of the op that derived it (vacuous for the dense mask).
    pub scope: PruneScope,
    pub layers: Vec<MaskLayer>,
    /// Content hash of the mask this one was pruned from, if any.
    pub parent_hash: Option<String>,
}

/// Sidecar metadata stored next to the packed bitmap.
#[derive(Debug, Serialize, Deserialize)]
struct MaskMeta {
    format_version: u32,
    round: u32,
    scope: PruneScope,
    kept: u64,
    total: u64,
    fraction_remaining: f64,
    content_hash: String,
    parent_hash: Option<String>,
}

impl PruningMask {
    /// The dense mask: every position of every prunable tensor kept.
    pub fn full(tensors: &NamedTensorSet) -> Self {
        let layers = tensors
            .iter()
            .filter(|t| t.kind.prunable())
            .map(|t| MaskLayer {
                name: t.name.clone(),
                shape: t.data.shape().to_vec(),
                keep: vec![true; t.data.len()],
            })
            .collect();
        Self {
            round: 0,
            scope: PruneScope::Global,
            layers,
            parent_hash: None,
        }
    }

    pub fn kept(&self) -> u64 {
        self.layers.iter().map(MaskLayer::kept).sum()
    }

    pub fn total(&self) -> u64 {
        self.layers.iter().map(MaskLayer::total).sum()
    }

    pub fn fraction_remaining(&self) -> f64 {
        if self.total() == 0 {
            return 1.0;
        }
        self.kept() as f64 / self.total() as f64
    }

    /// True iff every position this mask keeps, `other` keeps too.
    pub fn is_subset_of(&self, other: &PruningMask) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && a.keep.len() == b.keep.len()
                    && a.keep.iter().zip(&b.keep).all(|(&x, &y)| !x || y)
            })
    }

    /// Pair each mask layer with its tensor index in `tensors`, verifying the
    /// mask covers exactly the prunable tensors, in order, shapes and all.
    pub fn resolve<'m>(&'m self, tensors: &NamedTensorSet) -> Result<ResolvedMask<'m>, PruneError> {
        let prunable: Vec<usize> = (0..tensors.len())
            .filter(|&i| tensors.get(i).kind.prunable())
            .collect();
        if prunable.len() != self.layers.len() {
            return Err(PruneError::Mismatch(format!(
                "mask has {} layers, model has {} prunable tensors",
                self.layers.len(),
                prunable.len()
            )));
        }
        let mut pairs = Vec::with_capacity(prunable.len());
        for (layer, &idx) in self.layers.iter().zip(&prunable) {
            let t = tensors.get(idx);
            if layer.name != t.name {
                return Err(PruneError::Mismatch(format!(
                    "mask layer {:?} vs tensor {:?}",
                    layer.name, t.name
                )));
            }
            if layer.shape != t.data.shape() {
                return Err(PruneError::Mismatch(format!(
                    "{:?}: mask shape {:?} vs tensor shape {:?}",
                    layer.name,
                    layer.shape,
                    t.data.shape()
                )));
            }
            pairs.push((idx, layer.keep.as_slice()));
        }
        Ok(ResolvedMask { pairs })
    }

    /// Zero the dropped positions of `tensors` in place.
    pub fn apply(&self, tensors: &mut NamedTensorSet) -> Result<(), PruneError> {
        // Resolution borrows self immutably while the zeroing needs the
        // tensor set mutably, so collect indices first.
        let pairs: Vec<usize> = self.resolve(tensors)?.pairs.iter().map(|p| p.0).collect();
        for (layer, idx) in self.layers.iter().zip(pairs) {
            let data = tensors
                .get_mut(idx)
                .data
                .as_slice_mut()
                .expect("standard layout");
            for (i, &keep) in layer.keep.iter().enumerate() {
                if !keep {
                    data[i] = 0.0;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&MASK_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.push(match self.scope {
            PruneScope::Global => 0,
            PruneScope::PerLayer => 1,
        });
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.name.len() as u32).to_le_bytes());
            out.extend_from_slice(layer.name.as_bytes());
            out.extend_from_slice(&(layer.shape.len() as u32).to_le_bytes());
            for &d in &layer.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(layer.keep.len() as u64).to_le_bytes());
            let mut byte = 0u8;
            for (i, &keep) in layer.keep.iter().enumerate() {
                if keep {
                    byte |= 1 << (i % 8);
                }
                if i % 8 == 7 {
                    out.push(byte);
                    byte = 0;
                }
            }
            if layer.keep.len() % 8 != 0 {
                out.push(byte);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = LeReader::new(bytes);
        if r.take(4)? != MASK_MAGIC {
            return Err(TensorError::Format("bad mask magic".into()));
        }
        let version = r.u32()?;
        if version != MASK_FORMAT_VERSION {
            return Err(TensorError::Format(format!(
                "unsupported mask format version {version}"
            )));
        }
        let round = r.u32()?;
        let scope = match r.take(1)?[0] {
            0 => PruneScope::Global,
            1 => PruneScope::PerLayer,
            code => {
                return Err(TensorError::Format(format!("unknown scope code {code}")));
            }
        };
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| TensorError::Format("mask layer name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n_bits = r.u64()? as usize;
            if shape.iter().product::<usize>() != n_bits {
                return Err(TensorError::Format(format!(
                    "mask layer {name:?}: shape {shape:?} does not hold {n_bits} flags"
                )));
            }
            let packed = r.take(n_bits.div_ceil(8))?;
            let mut keep = Vec::with_capacity(n_bits);
            for i in 0..n_bits {
                keep.push(packed[i / 8] & (1 << (i % 8)) != 0);
            }
            layers.push(MaskLayer { name, shape, keep });
        }
        r.expect_end()?;
        Ok(Self {
            round,
            scope,
            layers,
            parent_hash: None,
        })
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    /// Write `mask.bin` and `mask.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), PruneError> {
        let bytes = self.to_bytes();
        let meta = MaskMeta {
            format_version: MASK_FORMAT_VERSION,
            round: self.round,
            scope: self.scope,
            kept: self.kept(),
            total: self.total(),
            fraction_remaining: self.fraction_remaining(),
            content_hash: sha256_hex(&bytes),
            parent_hash: self.parent_hash.clone(),
        };
        let bin = dir.join("mask.bin");
        write_atomic(&bin, &bytes).map_err(|source| PruneError::Io { path: bin, source })?;
        let json = dir.join("mask.json");
        write_atomic(&json, &serde_json::to_vec_pretty(&meta)?)
            .map_err(|source| PruneError::Io { path: json, source })?;
        Ok(())
    }

    /// Load a mask saved by [`PruningMask::save`], verifying the bitmap's
    /// content hash against the sidecar.
    pub fn load(dir: &Path) -> Result<Self, PruneError> {
        let json = dir.join("mask.json");
        let text = std::fs::read_to_string(&json).map_err(|source| PruneError::Io {
            path: json.clone(),
            source,
        })?;
        let meta: MaskMeta = serde_json::from_str(&text)?;
        if meta.format_version != MASK_FORMAT_VERSION {
            return Err(PruneError::Format {
                path: json,
                msg: format!("unsupported format version {}", meta.format_version),
            });
        }
        let bin = dir.join("mask.bin");
        let bytes = std::fs::read(&bin).map_err(|source| PruneError::Io {
            path: bin.clone(),
            source,
        })?;
        let actual = sha256_hex(&bytes);
        if actual != meta.content_hash {
            return Err(PruneError::Format {
                path: bin,
                msg: format!(
                    "content hash mismatch: sidecar {}, file {actual}",
                    meta.content_hash
                ),
            });
        }
        let mut mask = Self::from_bytes(&bytes)?;
        mask.parent_hash = meta.parent_hash;
        if mask.round != meta.round || mask.kept() != meta.kept || mask.total() != meta.total {
            return Err(PruneError::Format {
                path: json,
                msg: "sidecar metadata disagrees with bitmap".into(),
            });
        }
        Ok(mask)
    }
}

/// A mask paired with tensor-set indices, ready to apply repeatedly.
pub struct ResolvedMask<'m> {
    /// `(tensor index, keep flags)` per prunable tensor, in set order.
    pairs: Vec<(usize, &'m [bool])>,
}

impl ResolvedMask<'_> {
    /// Verify every dropped position currently holds exactly zero.
    pub fn check_weights_zeroed(&self, tensors: &NamedTensorSet) -> Result<(), PruneError> {
        for &(idx, keep) in &self.pairs {
            let t = tensors.get(idx);
            let data = t.data.as_slice().expect("standard layout");
            for (i, &k) in keep.iter().enumerate() {
                if !k && data[i] != 0.0 {
                    return Err(PruneError::MaskedNonzero {
                        tensor: t.name.clone(),
                        index: i,
                        value: data[i],
                    });
                }
            }
        }
        Ok(())
    }

    /// Zero dropped positions in a per-tensor array list (e.g. gradients),
    /// indexed like the full tensor set.
    pub fn zero_arrays(&self, arrays: &mut [ArrayD<f32>]) {
        for &(idx, keep) in &self.pairs {
            let data = arrays[idx].as_slice_mut().expect("standard layout");
            for (i, &k) in keep.iter().enumerate() {
                if !k {
                    data[i] = 0.0;
                }
            }
        }
    }

    /// Zero dropped weight positions in place.
    pub fn zero_weights(&self, tensors: &mut NamedTensorSet) {
        for &(idx, keep) in &self.pairs {
            let data = tensors
                .get_mut(idx)
                .data
                .as_slice_mut()
                .expect("standard layout");
            for (i, &k) in keep.iter().enumerate() {
                if !k {
                    data[i] = 0.0;
                }
            }
        }
    }

    /// Zero the optimizer's momentum at dropped positions.
    pub fn zero_velocity(&self, optimizer: &mut SgdState) {
        for &(idx, keep) in &self.pairs {
            let data = optimizer
                .velocity_mut()
                .get_mut(idx)
                .data
                .as_slice_mut()
                .expect("standard layout");
            for (i, &k) in keep.iter().enumerate() {
                if !k {
                    data[i] = 0.0;
                }
            }
        }
    }
}

/// Strictly ordered ranking key: magnitude first, then tensor position, then
/// flat index. `f32::to_bits` on `|w|` is monotone in the value, so integer
/// comparison matches magnitude comparison while keeping ties exact.
type RankKey = (u32, u32, u64);

/// Collect the ranking keys of every kept position, layer by layer.
fn kept_keys(
    tensors: &NamedTensorSet,
    resolved: &ResolvedMask<'_>,
) -> Result<Vec<Vec<RankKey>>, PruneError> {
    let mut per_layer = Vec::with_capacity(resolved.pairs.len());
    for (li, &(idx, keep)) in resolved.pairs.iter().enumerate() {
        let t = tensors.get(idx);
        let data = t.data.as_slice().expect("standard layout");
        let mut keys = Vec::new();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                continue;
            }
            let w = data[i];
            if !w.is_finite() {
                return Err(PruneError::NonFinite {
                    tensor: t.name.clone(),
                    index: i,
                    value: w,
                });
            }
            keys.push((w.abs().to_bits(), li as u32, i as u64));
        }
        per_layer.push(keys);
    }
    Ok(per_layer)
}

/// Drop the smallest `n_remove` keys (total order, so the removed *set* is
/// unique even though `select_nth_unstable` leaves the halves unordered).
fn drop_lowest(mask: &mut [MaskLayer], mut keys: Vec<RankKey>, n_remove: usize) {
    if n_remove == 0 {
        return;
    }
    debug_assert!(n_remove <= keys.len());
    if n_remove < keys.len() {
        keys.select_nth_unstable(n_remove - 1);
    }
    for &(_, li, flat) in &keys[..n_remove] {
        mask[li as usize].keep[flat as usize] = false;
    }
}

fn derive_mask(
    tensors: &NamedTensorSet,
    parent: &PruningMask,
    scope: PruneScope,
    // Given this layer's (or, for Global, the whole pool's) kept count,
    // how many weights to remove.
    removal: impl Fn(u64) -> u64,
) -> Result<PruningMask, PruneError> {
    let resolved = parent.resolve(tensors)?;
    resolved.check_weights_zeroed(tensors)?;
    let per_layer = kept_keys(tensors, &resolved)?;
    let mut layers = parent.layers.clone();
    match scope {
        PruneScope::Global => {
            let pool: Vec<RankKey> = per_layer.into_iter().flatten().collect();
            let n_remove = removal(pool.len() as u64).min(pool.len() as u64) as usize;
            drop_lowest(&mut layers, pool, n_remove);
        }
        PruneScope::PerLayer => {
            for keys in per_layer {
                let n_remove = removal(keys.len() as u64).min(keys.len() as u64) as usize;
                drop_lowest(&mut layers, keys, n_remove);
            }
        }
    }
    Ok(PruningMask {
        round: parent.round + 1,
        scope,
        layers,
        parent_hash: Some(parent.content_hash()),
    })
}

/// One round of magnitude pruning: remove the `floor(fraction * kept)`
/// lowest-magnitude weights still alive under `parent` (per tensor when the
/// scope is [`PruneScope::PerLayer`]). The weights in `tensors` must already
/// be zero at every position `parent` drops.
pub fn magnitude_prune(
    tensors: &NamedTensorSet,
    parent: &PruningMask,
    fraction: f64,
    scope: PruneScope,
) -> Result<PruningMask, PruneError> {
    validate_fraction(fraction)?;
    derive_mask(tensors, parent, scope, |kept| {
        (fraction * kept as f64).floor() as u64
    })
}

/// Fraction of weights surviving after `rounds` rounds at `fraction` each.
pub fn sparsity_after_rounds(fraction: f64, rounds: u32) -> f64 {
    (1.0 - fraction).powi(rounds as i32)
}

/// One round of magnitude pruning that lands the surviving count exactly on
/// the compounded schedule: after round `r`, `round((1-fraction)^r * total)`
/// weights remain (per tensor under [`PruneScope::PerLayer`]). Removing a
/// floor of the remainder each round instead would drift a few weights low
/// over many rounds; anchoring each round to the closed form keeps the whole
/// trajectory within half a weight of it.
pub fn prune_round(
    tensors: &NamedTensorSet,
    parent: &PruningMask,
    fraction: f64,
    scope: PruneScope,
) -> Result<PruningMask, PruneError> {
    validate_fraction(fraction)?;
    let survival = sparsity_after_rounds(fraction, parent.round + 1);
    let target = move |total: u64| (survival * total as f64).round() as u64;
    match scope {
        PruneScope::Global => {
            let total = parent.total();
            let goal = target(total);
            derive_mask(tensors, parent, scope, move |kept| {
                kept.saturating_sub(goal)
            })
        }
        PruneScope::PerLayer => {
            // Per-layer kept counts come from the parent, not the pool size,
            // so precompute goal per layer by walking the parent's layers.
            let goals: Vec<u64> = parent.layers.iter().map(|l| target(l.total())).collect();
            let cell = std::cell::Cell::new(0usize);
            derive_mask(tensors, parent, scope, move |kept| {
                let i = cell.get();
                cell.set(i + 1);
                kept.saturating_sub(goals[i])
            })
        }
    }
}

/// A rewound training state: an early snapshot with the mask applied to both
/// the weights and the optimizer's momentum.
pub struct RewoundState {
    pub model: Model,
    pub optimizer: SgdState,
    pub rng: RngState,
    /// The snapshot's epoch — where the replay resumes.
    pub epoch: usize,
}

/// Restore `snapshot` and apply `mask`: surviving weights take their
/// snapshot values bit for bit, dropped positions are zeroed in the weights
/// and in the momentum buffers.
pub fn rewind(
    spec: &ModelSpec,
    snapshot: &Snapshot,
    mask: &PruningMask,
) -> Result<RewoundState, PruneError> {
    let mut model = Model::from_tensors(spec, snapshot.tensors.clone())?;
    let mut optimizer = snapshot.optimizer.clone();
    {
        let resolved = mask.resolve(model.tensors())?;
        resolved.zero_velocity(&mut optimizer);
    }
    mask.apply(model.tensors_mut())?;
    Ok(RewoundState {
        model,
        optimizer,
        rng: snapshot.rng.clone(),
        epoch: snapshot.epoch,
    })
}

/// Rewind to `rewind_epoch` of `baseline` under `mask` and retrain along the
/// original schedule. `end_epoch` abbreviates the replay; `None` runs to the
/// schedule's end. Returns the retrained model and the run's traces.
pub fn replay(
    spec: &ModelSpec,
    baseline: &CheckpointSeries,
    rewind_epoch: usize,
    mask: &PruningMask,
    data: &SplitTensors,
    schedule: &TrainingSchedule,
    end_epoch: Option<usize>,
    recording: Recording<'_>,
) -> Result<(Model, TrainRun), TrainError> {
    let snapshot = baseline.snapshot(rewind_epoch)?;
    let rewound = rewind(spec, &snapshot, mask).map_err(Box::new)?;
    let RewoundState {
        mut model,
        optimizer,
        rng,
        epoch,
    } = rewound;
    let run = train(
        &mut model,
        data,
        schedule,
        TrainOptions {
            mask: Some(mask),
            start_epoch: epoch,
            end_epoch,
            recording,
            init_state: Some((optimizer, rng)),
        },
    )?;
    Ok((model, run))
}

/// One completed round of iterative magnitude pruning.
pub struct ImpRound {
    pub mask: PruningMask,
    pub model: Model,
    pub run: TrainRun,
}

/// Run `rounds` rounds of prune→rewind→replay from a trained baseline.
/// Round `r`'s mask is derived from the weights at the end of round `r-1`'s
/// replay (round 1 prunes the baseline's final weights).
#[allow(clippy::too_many_arguments)]
pub fn iterate_prune(
    spec: &ModelSpec,
    baseline: &CheckpointSeries,
    data: &SplitTensors,
    schedule: &TrainingSchedule,
    config: &PruneConfig,
    rounds: u32,
    replay_end: Option<usize>,
) -> Result<Vec<ImpRound>, TrainError> {
    config.validate().map_err(Box::new)?;
    let final_snapshot = baseline.last()?;
    let mut current = Model::from_tensors(spec, final_snapshot.tensors)?;
    let mut mask = PruningMask::full(current.tensors());
    let mut out = Vec::with_capacity(rounds as usize);
    for _ in 0..rounds {
        mask = prune_round(
            current.tensors(),
            &mask,
            config.fraction_per_round,
            config.scope,
        )
        .map_err(Box::new)?;
        let (model, run) = replay(
            spec,
            baseline,
            config.rewind_epoch,
            &mask,
            data,
            schedule,
            replay_end,
            Recording::FinalOnly,
        )?;
        current = model.clone();
        out.push(ImpRound {
            mask: mask.clone(),
            model,
            run,
        });
    }
    Ok(out)
}
