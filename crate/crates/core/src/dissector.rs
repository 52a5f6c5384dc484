//! Unit-level interpretability measurement.
//!
//! Every channel of the chosen activation sites is treated as a detector and
//! scored against every labeled concept:
//!
//! 1. **Profile** — pool each unit's activation values over the dissection
//!    split (through a seeded reservoir when the pool exceeds a cap) and set
//!    a per-unit threshold at a high quantile, so the unit fires on a fixed
//!    small fraction of inputs.
//! 2. **Segment** — upsample each activation map to image resolution with
//!    corner-aligned bilinear interpolation and keep the pixels strictly
//!    above the unit's threshold.
//! 3. **Score** — accumulate intersection and union pixel counts between the
//!    unit's segmentation and each concept's label mask across the whole
//!    split (not per image), and rank concepts by the resulting IoU.
//!
//! A unit is *interpretable* when its best IoU strictly exceeds a fixed
//! threshold. Everything is deterministic: fixed traversal orders, seeded
//! sampling, and exact integer accumulators.

use ndarray::{s, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::concept_data::{image_to_input, Concept, ConceptDataset, DataError, Split};
use crate::model::{Model, ModelError};
use crate::util::write_atomic;

const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DissectError {
    #[error("activation sample is empty")]
    EmptySample,
    #[error("quantile must be in [0.5, 1), found {0}")]
    Quantile(f64),
    #[error("activation samples contain a non-finite value")]
    NonFiniteSample,
    #[error("invalid dissection settings: {0}")]
    Config(String),
    #[error("layer {0:?} is not an activation site of this model")]
    UnknownLayer(String),
    #[error("cannot resize a {sh}x{sw} map to {oh}x{ow}")]
    Resize {
        sh: usize,
        sw: usize,
        oh: usize,
        ow: usize,
    },
    #[error("image {id:?} is {h}x{w} but the model expects {eh}x{ew}")]
    ImageSize {
        id: String,
        h: usize,
        w: usize,
        eh: usize,
        ew: usize,
    },
    #[error("the dissection split has no images")]
    EmptySplit,
    #[error("cannot merge accumulators of different shapes: {0}")]
    MergeShape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Settings for one dissection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DissectionConfig {
    /// Activation sites to dissect, e.g. `"stage3.block1"`.
    pub layers: Vec<String>,
    /// Per-unit activation quantile that sets the firing threshold; 0.995
    /// makes a unit fire on 0.5% of its profiled values.
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    /// A unit counts as interpretable when its best IoU strictly exceeds
    /// this.
    #[serde(default = "default_iou_threshold")]
    pub iou_threshold: f64,
    /// Largest activation pool kept per unit; beyond it, reservoir sampling.
    #[serde(default = "default_sample_cap")]
    pub sample_cap: usize,
    #[serde(default)]
    pub reservoir_seed: u64,
    /// Images per forward pass.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_quantile() -> f64 {
    0.995
}

fn default_iou_threshold() -> f64 {
    0.05
}

fn default_sample_cap() -> usize {
    65_536
}

fn default_batch_size() -> usize {
    16
}

impl DissectionConfig {
    pub fn new(layers: Vec<String>) -> Self {
        Self {
            layers,
            quantile: default_quantile(),
            iou_threshold: default_iou_threshold(),
            sample_cap: default_sample_cap(),
            reservoir_seed: 0,
            batch_size: default_batch_size(),
        }
    }

    pub fn validate(&self) -> Result<(), DissectError> {
        if self.layers.is_empty() {
            return Err(DissectError::Config("no layers to dissect".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.layers {
            if !seen.insert(l) {
                return Err(DissectError::Config(format!("layer {l:?} listed twice")));
            }
        }
        if !(0.5..1.0).contains(&self.quantile) {
            return Err(DissectError::Quantile(self.quantile));
        }
        if !(0.0..1.0).contains(&self.iou_threshold) {
            return Err(DissectError::Config(format!(
                "iou_threshold must be in [0, 1), found {}",
                self.iou_threshold
            )));
        }
        if self.sample_cap < 16 {
            return Err(DissectError::Config(format!(
                "sample_cap must be at least 16, found {}",
                self.sample_cap
            )));
        }
        if self.batch_size == 0 {
            return Err(DissectError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Thresholds
// ---------------------------------------------------------------------------

/// The firing threshold for one unit: a value `T` such that the fraction of
/// profiled activations strictly above `T` is as close as possible to
/// `1 - quantile`.
///
/// With `n` samples and a target count `c = (1 - quantile) * n`:
/// * when `c` is (within 1e-6 of) an integer, `T` is the midpoint of the two
///   order statistics that bracket the top `c` values, so exactly `c`
///   distinct samples exceed it;
/// * otherwise `T` is the order statistic `floor(c)` positions from the top,
///   leaving `floor(c)` distinct samples above.
///
/// Either way, for samples without ties the count strictly above `T` lands
/// in `[floor(c), ceil(c)]`.
pub fn activation_threshold(samples: &[f32], quantile: f64) -> Result<f32, DissectError> {
    if samples.is_empty() {
        return Err(DissectError::EmptySample);
    }
    if !(0.5..1.0).contains(&quantile) {
        return Err(DissectError::Quantile(quantile));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(DissectError::NonFiniteSample);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len();
    let above = (1.0 - quantile) * n as f64;
    let nearest = above.round();
    if (above - nearest).abs() < 1e-6 {
        let c = nearest as usize;
        if c == 0 {
            // Nothing may exceed the threshold: sit on the maximum.
            return Ok(sorted[n - 1]);
        }
        let lower = sorted[n - c - 1];
        let upper = sorted[n - c];
        let mid = ((lower as f64 + upper as f64) / 2.0) as f32;
        // Adjacent floats can round the midpoint up onto `upper`, which
        // would silently drop one value from the exceeding set; fall back
        // to the lower statistic, above which exactly c values lie.
        Ok(if mid >= upper { lower } else { mid })
    } else {
        let c = above.floor() as usize;
        Ok(sorted[n - 1 - c])
    }
}

/// Fixed-capacity uniform sample of a stream (reservoir algorithm), seeded
/// so the retained subset is a pure function of `(seed, stream, order)`.
#[derive(Debug, Clone)]
pub struct Reservoir {
    cap: usize,
    seen: u64,
    values: Vec<f32>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    pub fn new(cap: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            cap,
            seen: 0,
            values: Vec::new(),
            rng,
        }
    }

    pub fn offer(&mut self, value: f32) {
        self.seen += 1;
        if self.values.len() < self.cap {
            self.values.push(value);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.cap {
                self.values[j as usize] = value;
            }
        }
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

// ---------------------------------------------------------------------------
// Resizing and segmentation
// ---------------------------------------------------------------------------

/// Corner-aligned bilinear resize: output corners map exactly onto input
/// corners, interior points interpolate between the four surrounding cells.
/// A source axis of length 1 broadcasts as constant. Resizing to the same
/// shape reproduces the input bit for bit.
pub fn upsample_bilinear(
    map: &Array2<f32>,
    oh: usize,
    ow: usize,
) -> Result<Array2<f32>, DissectError> {
    let (sh, sw) = map.dim();
    if sh == 0 || sw == 0 || oh == 0 || ow == 0 {
        return Err(DissectError::Resize { sh, sw, oh, ow });
    }
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if src == 1 || dst == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = pos.floor() as usize;
        let lo = lo.min(src - 2);
        (lo, lo + 1, pos - lo as f64)
    };
    Ok(Array2::from_shape_fn((oh, ow), |(i, j)| {
        let (y0, y1, fy) = coord(i, sh, oh);
        let (x0, x1, fx) = coord(j, sw, ow);
        let v = map[[y0, x0]] as f64 * (1.0 - fy) * (1.0 - fx)
            + map[[y0, x1]] as f64 * (1.0 - fy) * fx
            + map[[y1, x0]] as f64 * fy * (1.0 - fx)
            + map[[y1, x1]] as f64 * fy * fx;
        v as f32
    }))
}

/// Pixels strictly above the threshold.
pub fn segment_above(map: &Array2<f32>, threshold: f32) -> Array2<bool> {
    map.mapv(|v| v > threshold)
}

// ---------------------------------------------------------------------------
// IoU accumulation
// ---------------------------------------------------------------------------

/// Exact integer accumulators for dataset-aggregated IoU: per (unit, concept)
/// intersection pixels, per-unit segmentation pixels, per-concept label
/// pixels. The IoU of a pair is `inter / (seg + label - inter)` over the
/// whole dataset — image order and partitioning cannot change it.
#[derive(Debug, Clone, PartialEq)]
pub struct IouAccumulator {
    n_units: usize,
    n_concepts: usize,
    intersection: Vec<u64>,
    seg: Vec<u64>,
    label: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(n_units: usize, n_concepts: usize) -> Self {
        Self {
            n_units,
            n_concepts,
            intersection: vec![0; n_units * n_concepts],
            seg: vec![0; n_units],
            label: vec![0; n_concepts],
        }
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    /// Count one image's label mask for a concept (call once per image per
    /// concept, independent of units).
    pub fn add_label(&mut self, concept: usize, pixels: u64) {
        self.label[concept] += pixels;
    }

    /// Count one image's segmentation for a unit, plus its intersections
    /// with the given concept masks.
    pub fn add_unit_image(
        &mut self,
        unit: usize,
        seg: &Array2<bool>,
        labels: &[(usize, Array2<bool>)],
    ) {
        let seg_flat = seg.as_slice().expect("standard layout");
        self.seg[unit] += seg_flat.iter().filter(|&&b| b).count() as u64;
        for (concept, mask) in labels {
            let mask_flat = mask.as_slice().expect("standard layout");
            debug_assert_eq!(mask_flat.len(), seg_flat.len());
            let inter = seg_flat
                .iter()
                .zip(mask_flat)
                .filter(|&(&s, &l)| s && l)
                .count() as u64;
            self.intersection[unit * self.n_concepts + concept] += inter;
        }
    }

    /// Fold another accumulator's counts into this one (the two halves of a
    /// partitioned dataset sum to the whole).
    pub fn merge(&mut self, other: &IouAccumulator) -> Result<(), DissectError> {
        if self.n_units != other.n_units || self.n_concepts != other.n_concepts {
            return Err(DissectError::MergeShape(format!(
                "{}x{} vs {}x{}",
                self.n_units, self.n_concepts, other.n_units, other.n_concepts
            )));
        }
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.seg.iter_mut().zip(&other.seg) {
            *a += b;
        }
        for (a, b) in self.label.iter_mut().zip(&other.label) {
            *a += b;
        }
        Ok(())
    }

    /// `(intersection, union)` pixel counts for a pair.
    pub fn counts(&self, unit: usize, concept: usize) -> (u64, u64) {
        let inter = self.intersection[unit * self.n_concepts + concept];
        let union = self.seg[unit] + self.label[concept] - inter;
        (inter, union)
    }

    /// Dataset-aggregated IoU; 0 when both sides are empty everywhere.
    pub fn iou(&self, unit: usize, concept: usize) -> f64 {
        let (inter, union) = self.counts(unit, concept);
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Dataset-aggregated IoU of one (segmentation, label) mask stream, counting
/// the union per pixel. Pairs may come from images of different sizes.
pub fn dataset_iou(pairs: &[(Array2<bool>, Array2<bool>)]) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (seg, label) in pairs {
        debug_assert_eq!(seg.dim(), label.dim());
        for (&s, &l) in seg.iter().zip(label.iter()) {
            inter += (s && l) as u64;
            union += (s || l) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One unit's dissection outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitDissection {
    pub layer: String,
    pub channel: usize,
    pub threshold: f32,
    /// Concept with the highest IoU (ties fall to the lowest concept id).
    pub best_concept: u16,
    pub best_concept_name: String,
    pub best_category: String,
    pub best_iou: f64,
    pub interpretable: bool,
}

/// The full outcome of dissecting one network against one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissectionReport {
    pub format_version: u32,
    pub quantile: f64,
    pub iou_threshold: f64,
    pub layers: Vec<String>,
    /// Content hash of the dissected network's tensors.
    pub model_hash: String,
    /// Content hash of the dataset.
    pub dataset_hash: String,
    /// Content hash of the pruning mask the network was trained under, if
    /// any (absent for the dense baseline).
    pub mask_hash: Option<String>,
    /// One entry per unit, ordered by layer (as configured) then channel.
    pub units: Vec<UnitDissection>,
}

impl DissectionReport {
    pub fn interpretable_units(&self) -> impl Iterator<Item = &UnitDissection> {
        self.units.iter().filter(|u| u.interpretable)
    }

    pub fn save(&self, path: &Path) -> Result<(), DissectError> {
        let bytes = serde_json::to_vec_pretty(self)?;
        write_atomic(path, &bytes).map_err(|source| DissectError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DissectError> {
        let text = std::fs::read_to_string(path).map_err(|source| DissectError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let report: Self = serde_json::from_str(&text)?;
        if report.format_version != REPORT_FORMAT_VERSION {
            return Err(DissectError::Config(format!(
                "unsupported report format version {}",
                report.format_version
            )));
        }
        Ok(report)
    }
}

/// A report plus the raw counts it was computed from.
pub struct Dissection {
    pub report: DissectionReport,
    pub accumulator: IouAccumulator,
    concepts: Vec<Concept>,
}

impl Dissection {
    /// Write the full per-(unit, concept) IoU table as CSV.
    pub fn write_iou_table(&self, path: &Path) -> Result<(), DissectError> {
        let mut out = String::from(
            "layer,channel,concept_id,concept_name,category,intersection,union,iou\n",
        );
        for (g, unit) in self.report.units.iter().enumerate() {
            for (ci, concept) in self.concepts.iter().enumerate() {
                let (inter, union) = self.accumulator.counts(g, ci);
                let iou = self.accumulator.iou(g, ci);
                out.push_str(&format!(
                    "{},{},{},{},{},{inter},{union},{iou}\n",
                    unit.layer, unit.channel, concept.id, concept.name, concept.category
                ));
            }
        }
        write_atomic(path, out.as_bytes()).map_err(|source| DissectError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

// ---------------------------------------------------------------------------
// The two-pass dissection
// ---------------------------------------------------------------------------

fn batch_inputs(
    dataset: &ConceptDataset,
    indices: &[usize],
    expect: (usize, usize),
) -> Result<Array4<f32>, DissectError> {
    let (eh, ew) = expect;
    let mut x = Array4::<f32>::zeros((indices.len(), 3, eh, ew));
    for (row, &i) in indices.iter().enumerate() {
        let img = &dataset.images()[i];
        if img.height() != eh || img.width() != ew {
            return Err(DissectError::ImageSize {
                id: img.id.clone(),
                h: img.height(),
                w: img.width(),
                eh,
                ew,
            });
        }
        x.slice_mut(s![row, .., .., ..]).assign(&image_to_input(&img.pixels));
    }
    Ok(x)
}

/// Dissect `model` against the dataset's dissection split.
pub fn dissect_network(
    model: &Model,
    dataset: &ConceptDataset,
    config: &DissectionConfig,
) -> Result<Dissection, DissectError> {
    config.validate()?;
    let sites = model.spec().activation_sites();
    for layer in &config.layers {
        if !sites.contains(layer) {
            return Err(DissectError::UnknownLayer(layer.clone()));
        }
    }
    let indices = dataset.split_indices(Split::Dissect);
    if indices.is_empty() {
        return Err(DissectError::EmptySplit);
    }
    let (_, ih, iw) = model.spec().input;

    // Unit table: (layer, channel) in layer-config order.
    let mut unit_index: Vec<(String, usize)> = Vec::new();
    for layer in &config.layers {
        for ch in 0..model.site_channels(layer)? {
            unit_index.push((layer.clone(), ch));
        }
    }
    let n_units = unit_index.len();
    let concepts: Vec<Concept> = dataset.index().concepts().to_vec();
    let n_concepts = concepts.len();

    // Pass 1: pool each unit's activations and fix its threshold.
    let mut reservoirs: Vec<Reservoir> = (0..n_units)
        .map(|g| Reservoir::new(config.sample_cap, config.reservoir_seed, g as u64))
        .collect();
    for batch in indices.chunks(config.batch_size) {
        let x = batch_inputs(dataset, batch, (ih, iw))?;
        let (_, captured) = model.forward_eval(&x, &config.layers)?;
        let mut g = 0usize;
        for layer in &config.layers {
            let act = &captured[layer];
            let (b, c, h, w) = act.dim();
            for ch in 0..c {
                let reservoir = &mut reservoirs[g];
                g += 1;
                for row in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            reservoir.offer(act[[row, ch, y, xx]]);
                        }
                    }
                }
            }
        }
    }
    let mut thresholds = Vec::with_capacity(n_units);
    for reservoir in &reservoirs {
        thresholds.push(activation_threshold(reservoir.values(), config.quantile)?);
    }
    drop(reservoirs);
    log::info!(
        "thresholds fixed for {n_units} units over {} images; scoring overlaps",
        indices.len()
    );

    // Pass 2: segment every unit on every image and accumulate IoU counts.
    let mut acc = IouAccumulator::new(n_units, n_concepts);
    for batch in indices.chunks(config.batch_size) {
        let x = batch_inputs(dataset, batch, (ih, iw))?;
        let (_, captured) = model.forward_eval(&x, &config.layers)?;
        for (row, &img_idx) in batch.iter().enumerate() {
            let img = &dataset.images()[img_idx];
            // Label masks once per image; only concepts that actually
            // appear can intersect anything.
            let mut active: Vec<(usize, Array2<bool>)> = Vec::new();
            for (ci, concept) in concepts.iter().enumerate() {
                if !img.label_maps.contains_key(&concept.category) {
                    continue;
                }
                let mask = dataset.resolve_label_mask(&img.id, concept.id)?;
                let pixels = mask.iter().filter(|&&b| b).count() as u64;
                if pixels > 0 {
                    acc.add_label(ci, pixels);
                    active.push((ci, mask));
                }
            }
            let mut g = 0usize;
            for layer in &config.layers {
                let act = &captured[layer];
                let c = act.dim().1;
                for ch in 0..c {
                    let map = act.slice(s![row, ch, .., ..]).to_owned();
                    let up = upsample_bilinear(&map, ih, iw)?;
                    let seg = segment_above(&up, thresholds[g]);
                    acc.add_unit_image(g, &seg, &active);
                    g += 1;
                }
            }
        }
    }

    // Rank concepts per unit; ties fall to the lowest concept id because
    // iteration ascends and only a strictly greater IoU displaces the best.
    let mut units = Vec::with_capacity(n_units);
    for (g, (layer, channel)) in unit_index.iter().enumerate() {
        let mut best_ci = 0usize;
        let mut best_iou = f64::MIN;
        for ci in 0..n_concepts {
            let iou = acc.iou(g, ci);
            if iou > best_iou {
                best_iou = iou;
                best_ci = ci;
            }
        }
        let best = &concepts[best_ci];
        units.push(UnitDissection {
            layer: layer.clone(),
            channel: *channel,
            threshold: thresholds[g],
            best_concept: best.id,
            best_concept_name: best.name.clone(),
            best_category: best.category.clone(),
            best_iou,
            interpretable: best_iou > config.iou_threshold,
        });
    }

    let report = DissectionReport {
        format_version: REPORT_FORMAT_VERSION,
        quantile: config.quantile,
        iou_threshold: config.iou_threshold,
        layers: config.layers.clone(),
        model_hash: model.tensors().content_hash(),
        dataset_hash: dataset.content_hash().to_string(),
        mask_hash: None,
        units,
    };
    Ok(Dissection {
        report,
        accumulator: acc,
        concepts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept_data::MicroBrodenSpec;
    use crate::model::ModelSpec;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    // --- thresholds ------------------------------------------------------

    #[test]
    fn integer_target_threshold_is_the_bracketing_midpoint() {
        // 1..=1000 at quantile 0.995: exactly 5 values must exceed T, so T
        // sits halfway between the 995th and 996th order statistics.
        let mut values: Vec<f32> = (1..=1000).map(|v| v as f32).collect();
        values.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let t = activation_threshold(&values, 0.995).unwrap();
        assert_eq!(t, 995.5);
        let above = values.iter().filter(|&&v| v > t).count();
        assert_eq!(above, 5);
    }

    #[test]
    fn fractional_target_uses_the_order_statistic() {
        // n=200, quantile 0.9975 → target 0.5 above: T is the maximum, zero
        // values exceed it (bracket [0, 1]).
        let values: Vec<f32> = (1..=200).map(|v| v as f32).collect();
        let t = activation_threshold(&values, 0.9975).unwrap();
        assert_eq!(t, 200.0);
        assert_eq!(values.iter().filter(|&&v| v > t).count(), 0);

        // n=200, quantile 0.995 → target exactly 1: midpoint of 199 and 200.
        let t = activation_threshold(&values, 0.995).unwrap();
        assert_eq!(t, 199.5);
        assert_eq!(values.iter().filter(|&&v| v > t).count(), 1);
    }

    #[test]
    fn adjacent_float_midpoint_falls_back_without_losing_the_count() {
        let lower = 1.0f32;
        let upper = f32::from_bits(lower.to_bits() + 1);
        let values = vec![0.0, 0.5, lower, upper];
        // quantile 0.75 → target exactly 1 above.
        let t = activation_threshold(&values, 0.75).unwrap();
        let above = values.iter().filter(|&&v| v > t).count();
        assert_eq!(above, 1, "threshold {t}");
    }

    #[test]
    fn threshold_rejects_bad_input() {
        assert!(matches!(
            activation_threshold(&[], 0.995),
            Err(DissectError::EmptySample)
        ));
        assert!(matches!(
            activation_threshold(&[1.0], 0.3),
            Err(DissectError::Quantile(_))
        ));
        assert!(matches!(
            activation_threshold(&[1.0, f32::NAN], 0.995),
            Err(DissectError::NonFiniteSample)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        /// For any distinct sample and quantile, the count strictly above
        /// the threshold lies in [floor((1-q)n), ceil((1-q)n)].
        #[test]
        fn prop_exceedance_count_is_bracketed(
            raw in proptest::collection::btree_set(-1_000_000i64..1_000_000, 2..300),
            quantile in 0.5f64..0.999,
        ) {
            let values: Vec<f32> = raw.iter().map(|&v| v as f32 * 1e-3).collect();
            let n = values.len() as f64;
            let t = activation_threshold(&values, quantile).unwrap();
            let above = values.iter().filter(|&&v| v > t).count() as f64;
            let target = (1.0 - quantile) * n;
            prop_assert!(
                above >= target.floor() && above <= target.ceil(),
                "n={n}, q={quantile}, target={target}, above={above}, t={t}"
            );
        }
    }

    // --- reservoir ---------------------------------------------------------

    #[test]
    fn reservoir_below_capacity_keeps_everything_in_order() {
        let mut r = Reservoir::new(10, 0, 3);
        for v in 0..7 {
            r.offer(v as f32);
        }
        assert_eq!(r.seen(), 7);
        assert_eq!(r.values(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn reservoir_is_deterministic_per_stream() {
        let fill = |seed, stream| {
            let mut r = Reservoir::new(8, seed, stream);
            for v in 0..1000 {
                r.offer(v as f32);
            }
            r.values().to_vec()
        };
        assert_eq!(fill(5, 1), fill(5, 1));
        assert_ne!(fill(5, 1), fill(5, 2), "streams must differ");
        assert_ne!(fill(5, 1), fill(6, 1), "seeds must differ");
    }

    // --- resize ------------------------------------------------------------

    #[test]
    fn resize_to_same_shape_is_identity() {
        let map = Array2::from_shape_fn((5, 7), |(y, x)| (y * 13 + x) as f32 * 0.37 - 2.0);
        let out = upsample_bilinear(&map, 5, 7).unwrap();
        for (a, b) in map.iter().zip(out.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn two_by_two_upsample_matches_closed_form() {
        let map = ndarray::array![[1.0f32, 4.0], [7.0, 10.0]];
        let out = upsample_bilinear(&map, 4, 4).unwrap();
        // Corner-aligned: position (i, j) samples (i/3, j/3) of the source.
        for i in 0..4 {
            for j in 0..4 {
                let fy = i as f64 / 3.0;
                let fx = j as f64 / 3.0;
                let expected = 1.0 * (1.0 - fy) * (1.0 - fx)
                    + 4.0 * (1.0 - fy) * fx
                    + 7.0 * fy * (1.0 - fx)
                    + 10.0 * fy * fx;
                let got = out[[i, j]] as f64;
                assert!((got - expected).abs() < 1e-6, "({i},{j}): {got} vs {expected}");
            }
        }
        // Corners are exact.
        assert_eq!(out[[0, 0]], 1.0);
        assert_eq!(out[[0, 3]], 4.0);
        assert_eq!(out[[3, 0]], 7.0);
        assert_eq!(out[[3, 3]], 10.0);
    }

    #[test]
    fn degenerate_source_axes_broadcast() {
        let map = ndarray::array![[3.0f32, 9.0]]; // 1x2
        let out = upsample_bilinear(&map, 4, 4).unwrap();
        for i in 0..4 {
            assert_eq!(out[[i, 0]], 3.0);
            assert_eq!(out[[i, 3]], 9.0);
        }
        assert!(upsample_bilinear(&map, 0, 4).is_err());
    }

    // --- IoU accumulation ----------------------------------------------------

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |_| rng.random_bool(p))
    }

    #[test]
    fn accumulator_agrees_with_per_pixel_union_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pairs: Vec<(Array2<bool>, Array2<bool>)> = (0..12)
            .map(|_| (random_mask(&mut rng, 6, 6, 0.3), random_mask(&mut rng, 6, 6, 0.2)))
            .collect();
        let expected = dataset_iou(&pairs);
        let mut acc = IouAccumulator::new(1, 1);
        for (seg, label) in &pairs {
            acc.add_label(0, label.iter().filter(|&&b| b).count() as u64);
            acc.add_unit_image(0, seg, &[(0, label.clone())]);
        }
        assert_eq!(acc.iou(0, 0), expected);
    }

    #[test]
    fn split_and_merged_accumulation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let images: Vec<(Array2<bool>, Vec<(usize, Array2<bool>)>)> = (0..10)
            .map(|_| {
                let seg = random_mask(&mut rng, 5, 5, 0.4);
                let labels = (0..3)
                    .map(|c| (c, random_mask(&mut rng, 5, 5, 0.25)))
                    .collect();
                (seg, labels)
            })
            .collect();
        let feed = |acc: &mut IouAccumulator, subset: &[(Array2<bool>, Vec<(usize, Array2<bool>)>)]| {
            for (seg, labels) in subset {
                for (c, m) in labels {
                    acc.add_label(*c, m.iter().filter(|&&b| b).count() as u64);
                }
                acc.add_unit_image(0, seg, labels);
            }
        };
        let mut whole = IouAccumulator::new(1, 3);
        feed(&mut whole, &images);
        let mut left = IouAccumulator::new(1, 3);
        let mut right = IouAccumulator::new(1, 3);
        feed(&mut left, &images[..4]);
        feed(&mut right, &images[4..]);
        left.merge(&right).unwrap();
        assert_eq!(left, whole);
        let bad = IouAccumulator::new(2, 3);
        assert!(left.merge(&bad).is_err());
    }

    #[test]
    fn empty_union_scores_zero() {
        let acc = IouAccumulator::new(1, 1);
        assert_eq!(acc.iou(0, 0), 0.0);
        assert_eq!(dataset_iou(&[]), 0.0);
    }

    /// A strictly increasing nonlinear transform of the activations leaves
    /// every segmentation untouched when the threshold target is fractional
    /// (pure order statistic), so the IoU scores are bit-identical. Maps are
    /// kept at label resolution: interpolation happens before thresholding
    /// in the full pipeline and does not commute with nonlinear transforms.
    #[test]
    fn monotone_activation_transform_preserves_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let maps: Vec<Array2<f32>> = (0..3)
            .map(|_| Array2::from_shape_fn((7, 7), |_| rng.random_range(-2.0f32..2.0)))
            .collect();
        let labels: Vec<Array2<bool>> = (0..3)
            .map(|_| random_mask(&mut rng, 7, 7, 0.3))
            .collect();
        let transform = |v: f32| v * v * v + 3.0; // strictly increasing

        // Pooled count 147 at quantile 0.9 targets 14.7 above: fractional,
        // so the threshold is a pure order statistic and 14 pixels fire.
        let score = |maps: &[Array2<f32>]| -> f64 {
            let pooled: Vec<f32> = maps.iter().flat_map(|m| m.iter().copied()).collect();
            let t = activation_threshold(&pooled, 0.9).unwrap();
            let pairs: Vec<(Array2<bool>, Array2<bool>)> = maps
                .iter()
                .zip(&labels)
                .map(|(m, l)| (segment_above(m, t), l.clone()))
                .collect();
            dataset_iou(&pairs)
        };
        let raw = score(&maps);
        let transformed: Vec<Array2<f32>> =
            maps.iter().map(|m| m.mapv(transform)).collect();
        let cooked = score(&transformed);
        assert_eq!(raw.to_bits(), cooked.to_bits());
        assert!(raw > 0.0, "fixture should produce a nonzero score");
    }

    // --- end-to-end --------------------------------------------------------

    fn tiny_dataset(dir: &Path) -> ConceptDataset {
        let spec = MicroBrodenSpec {
            image_size: 16,
            train_images: 4,
            val_images: 2,
            dissect_images: 6,
            colors: vec!["red".into(), "green".into()],
            shapes: vec!["square".into(), "circle".into()],
            textures: vec!["stripes".into(), "blank".into()],
            seed: 5,
            noise: 0.05,
            object_min: 6,
            object_max: 10,
        };
        spec.generate(dir).unwrap();
        ConceptDataset::load(dir).unwrap()
    }

    fn tiny_model() -> (ModelSpec, Model) {
        let spec = ModelSpec {
            input: (3, 16, 16),
            stem_width: 4,
            stage_widths: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            n_classes: 4,
        };
        let model = Model::init(&spec, 77).unwrap();
        (spec, model)
    }

    #[test]
    fn dissection_is_deterministic_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(dir.path());
        let (_, model) = tiny_model();
        let config = DissectionConfig::new(vec!["stage1.block0".into(), "stage2.block0".into()]);

        let a = dissect_network(&model, &dataset, &config).unwrap();
        let b = dissect_network(&model, &dataset, &config).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.accumulator, b.accumulator);

        assert_eq!(a.report.units.len(), 4 + 8);
        // Ordered by (layer as configured, channel).
        for (g, u) in a.report.units.iter().enumerate() {
            if g < 4 {
                assert_eq!((u.layer.as_str(), u.channel), ("stage1.block0", g));
            } else {
                assert_eq!((u.layer.as_str(), u.channel), ("stage2.block0", g - 4));
            }
            assert!(u.threshold.is_finite());
            assert!((0.0..=1.0).contains(&u.best_iou));
            assert_eq!(u.interpretable, u.best_iou > 0.05);
            // Best concept metadata is self-consistent.
            let c = dataset.index().by_id(u.best_concept).unwrap();
            assert_eq!(c.name, u.best_concept_name);
            assert_eq!(c.category, u.best_category);
        }
        assert_eq!(a.report.model_hash, model.tensors().content_hash());
        assert_eq!(a.report.dataset_hash, dataset.content_hash());
    }

    #[test]
    fn report_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(dir.path());
        let (_, model) = tiny_model();
        let config = DissectionConfig::new(vec!["stage1.block0".into()]);
        let d = dissect_network(&model, &dataset, &config).unwrap();

        let path = dir.path().join("report.json");
        d.report.save(&path).unwrap();
        let loaded = DissectionReport::load(&path).unwrap();
        assert_eq!(loaded, d.report);

        let table = dir.path().join("iou_table.csv");
        d.write_iou_table(&table).unwrap();
        let text = std::fs::read_to_string(&table).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "layer,channel,concept_id,concept_name,category,intersection,union,iou"
        );
        assert_eq!(text.lines().count(), 1 + 4 * dataset.index().len());
    }

    #[test]
    fn a_dead_network_has_no_interpretable_units() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(dir.path());
        let (spec, mut model) = tiny_model();
        // Zero every tensor: all activations collapse to zero maps.
        for i in 0..model.tensors().len() {
            let t = model.tensors_mut().get_mut(i);
            t.data.fill(0.0);
        }
        let model = Model::from_tensors(&spec, model.tensors().clone()).unwrap();
        let config = DissectionConfig::new(vec!["stage1.block0".into(), "stage2.block0".into()]);
        let d = dissect_network(&model, &dataset, &config).unwrap();
        assert_eq!(d.report.interpretable_units().count(), 0);
        for u in &d.report.units {
            assert_eq!(u.threshold, 0.0);
            assert_eq!(u.best_iou, 0.0);
        }
    }

    #[test]
    fn unknown_layer_and_size_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(dir.path());
        let (_, model) = tiny_model();
        let config = DissectionConfig::new(vec!["stage7.block0".into()]);
        assert!(matches!(
            dissect_network(&model, &dataset, &config),
            Err(DissectError::UnknownLayer(_))
        ));

        // A model expecting a different input size refuses the images.
        let spec32 = ModelSpec {
            input: (3, 32, 32),
            stem_width: 4,
            stage_widths: vec![4],
            blocks_per_stage: vec![1],
            n_classes: 4,
        };
        let model32 = Model::init(&spec32, 1).unwrap();
        let config = DissectionConfig::new(vec!["stage1.block0".into()]);
        assert!(matches!(
            dissect_network(&model32, &dataset, &config),
            Err(DissectError::ImageSize { .. })
        ));
    }

    #[test]
    fn config_validation_catches_mistakes() {
        let mut c = DissectionConfig::new(vec![]);
        assert!(c.validate().is_err());
        c.layers = vec!["stem".into(), "stem".into()];
        assert!(c.validate().is_err());
        c.layers = vec!["stem".into()];
        c.quantile = 1.0;
        assert!(c.validate().is_err());
        c.quantile = 0.995;
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c.batch_size = 8;
        assert!(c.validate().is_ok());
    }
}
