//! A small residual CNN with a pure-Rust, single-threaded, deterministic
//! forward and backward implementation.
//!
//! The architecture is a classic three-stage residual stack: a 3x3 stem
//! convolution, `blocks_per_stage[i]` residual blocks per stage (each
//! conv3x3 -> BN -> ReLU -> conv3x3 -> BN plus a shortcut, then ReLU), with
//! the first block of every stage after the first downsampling by stride 2.
//! Channel- or stride-changing shortcuts use a projection (1x1 conv + BN).
//! A global average pool and a fully-connected layer produce class logits.
//!
//! Convolutions run as im2col + a single GEMM per layer, always on one
//! thread, so results are bit-for-bit reproducible across runs on the same
//! build. Named activation sites — `"stem"` and `"stage<i>.block<j>"`, each
//! taken after the trailing ReLU — can be captured without mutating any
//! state, which is what the dissector profiles.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix4, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::tensor::{NamedTensorSet, TensorError, TensorKind};

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

/// Architecture description. Everything about the network follows from this
/// plus the parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input as `(channels, height, width)`.
    pub input: (usize, usize, usize),
    /// Channels produced by the stem convolution.
    pub stem_width: usize,
    /// Output channels of each stage.
    pub stage_widths: Vec<usize>,
    /// Residual blocks per stage; same length as `stage_widths`.
    pub blocks_per_stage: Vec<usize>,
    /// Number of output classes.
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::Spec(msg));
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return err(format!("input dimensions must be positive, found {:?}", self.input));
        }
        if self.stem_width == 0 {
            return err("stem_width must be positive".into());
        }
        if self.stage_widths.is_empty() {
            return err("at least one stage is required".into());
        }
        if self.stage_widths.len() != self.blocks_per_stage.len() {
            return err(format!(
                "stage_widths has {} entries but blocks_per_stage has {}",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            ));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return err("stage widths must be positive".into());
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return err("every stage needs at least one block".into());
        }
        if self.n_classes < 2 {
            return err(format!("n_classes must be at least 2, found {}", self.n_classes));
        }
        // Spatial dims shrink by 2 per stage after the first; they must stay
        // positive all the way down.
        let down = 1usize << (self.stage_widths.len() - 1);
        if h / down == 0 || w / down == 0 {
            return err(format!(
                "input {h}x{w} too small for {} stages (needs at least {down}x{down})",
                self.stage_widths.len()
            ));
        }
        Ok(())
    }

    /// Names of activation sites in forward order: `stem`, then
    /// `stage<i>.block<j>` (1-based stage, 0-based block).
    pub fn activation_sites(&self) -> Vec<String> {
        let mut sites = vec!["stem".to_string()];
        for (i, &blocks) in self.blocks_per_stage.iter().enumerate() {
            for j in 0..blocks {
                sites.push(format!("stage{}.block{}", i + 1, j));
            }
        }
        sites
    }

    /// Stable identity hash of the architecture.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        crate::util::sha256_hex(json.as_bytes())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("unknown activation site {0:?}")]
    UnknownSite(String),
    #[error("input batch shape {found:?} does not match spec per-image shape {expected:?}")]
    InputShape {
        expected: (usize, usize, usize),
        found: Vec<usize>,
    },
    #[error("tensor set does not match spec: {0}")]
    TensorLayout(String),
    #[error("evaluation requires a non-empty batch")]
    EmptyEval,
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: u32, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---------------------------------------------------------------------------
// Layer plan
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Conv2d {
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvPlan {
    weight: usize,
    conv: Conv2d,
}

#[derive(Debug, Clone, Copy)]
struct BnPlan {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Debug, Clone)]
struct BlockPlan {
    site: String,
    conv1: ConvPlan,
    bn1: BnPlan,
    conv2: ConvPlan,
    bn2: BnPlan,
    /// Projection shortcut (1x1 conv + BN) when shape changes; identity
    /// otherwise.
    shortcut: Option<(ConvPlan, BnPlan)>,
}

#[derive(Debug, Clone)]
struct ModelPlan {
    stem_conv: ConvPlan,
    stem_bn: BnPlan,
    blocks: Vec<BlockPlan>,
    fc_weight: usize,
    fc_bias: usize,
}

/// Architecture + parameters. Cloning copies all parameters.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    tensors: NamedTensorSet,
    plan: ModelPlan,
}

/// Registration walk shared by init and validation: calls `register` for
/// every tensor in construction order and returns the plan wired to the
/// returned indices.
fn build_plan(
    spec: &ModelSpec,
    register: &mut dyn FnMut(&str, TensorKind, Vec<usize>) -> Result<usize, ModelError>,
) -> Result<ModelPlan, ModelError> {
    let conv = |name: &str,
                    c_in: usize,
                    c_out: usize,
                    k: usize,
                    stride: usize,
                    register: &mut dyn FnMut(&str, TensorKind, Vec<usize>) -> Result<usize, ModelError>|
     -> Result<ConvPlan, ModelError> {
        let weight = register(
            &format!("{name}.weight"),
            TensorKind::ConvWeight,
            vec![c_out, c_in, k, k],
        )?;
        Ok(ConvPlan {
            weight,
            conv: Conv2d {
                c_in,
                c_out,
                kh: k,
                kw: k,
                stride,
                pad: k / 2,
            },
        })
    };
    let bn = |name: &str,
                  channels: usize,
                  register: &mut dyn FnMut(&str, TensorKind, Vec<usize>) -> Result<usize, ModelError>|
     -> Result<BnPlan, ModelError> {
        Ok(BnPlan {
            gamma: register(&format!("{name}.gamma"), TensorKind::BnGamma, vec![channels])?,
            beta: register(&format!("{name}.beta"), TensorKind::BnBeta, vec![channels])?,
            running_mean: register(
                &format!("{name}.running_mean"),
                TensorKind::BnRunningMean,
                vec![channels],
            )?,
            running_var: register(
                &format!("{name}.running_var"),
                TensorKind::BnRunningVar,
                vec![channels],
            )?,
        })
    };

    let stem_conv = conv("stem.conv", spec.input.0, spec.stem_width, 3, 1, register)?;
    let stem_bn = bn("stem.bn", spec.stem_width, register)?;

    let mut blocks = Vec::new();
    let mut in_ch = spec.stem_width;
    for (i, (&width, &n_blocks)) in spec
        .stage_widths
        .iter()
        .zip(&spec.blocks_per_stage)
        .enumerate()
    {
        for j in 0..n_blocks {
            let stride = if i > 0 && j == 0 { 2 } else { 1 };
            let prefix = format!("stage{}.block{}", i + 1, j);
            let conv1 = conv(&format!("{prefix}.conv1"), in_ch, width, 3, stride, register)?;
            let bn1 = bn(&format!("{prefix}.bn1"), width, register)?;
            let conv2 = conv(&format!("{prefix}.conv2"), width, width, 3, 1, register)?;
            let bn2 = bn(&format!("{prefix}.bn2"), width, register)?;
            let shortcut = if stride != 1 || in_ch != width {
                let sc = conv(&format!("{prefix}.shortcut.conv"), in_ch, width, 1, stride, register)?;
                let sb = bn(&format!("{prefix}.shortcut.bn"), width, register)?;
                Some((sc, sb))
            } else {
                None
            };
            blocks.push(BlockPlan {
                site: prefix,
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            });
            in_ch = width;
        }
    }

    let fc_weight = register(
        "head.fc.weight",
        TensorKind::FcWeight,
        vec![spec.n_classes, in_ch],
    )?;
    let fc_bias = register("head.fc.bias", TensorKind::FcBias, vec![spec.n_classes])?;

    Ok(ModelPlan {
        stem_conv,
        stem_bn,
        blocks,
        fc_weight,
        fc_bias,
    })
}

impl Model {
    /// Fresh model with Kaiming-initialized convolutions drawn from a ChaCha8
    /// stream seeded with `seed`. The same `(spec, seed)` always produces the
    /// same parameters, bit for bit.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = NamedTensorSet::new();
        let plan = build_plan(spec, &mut |name, kind, shape| {
            let data = init_tensor(kind, &shape, &mut rng);
            Ok(tensors.push(name, kind, data)?)
        })?;
        Ok(Self {
            spec: spec.clone(),
            tensors,
            plan,
        })
    }

    /// Wrap an existing tensor set (a loaded checkpoint). The set must list
    /// exactly the tensors the spec implies, in order, with matching kinds
    /// and shapes.
    pub fn from_tensors(spec: &ModelSpec, tensors: NamedTensorSet) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut cursor = 0usize;
        let plan = build_plan(spec, &mut |name, kind, shape| {
            if cursor >= tensors.len() {
                return Err(ModelError::TensorLayout(format!(
                    "missing tensor {name:?} (set has only {} tensors)",
                    tensors.len()
                )));
            }
            let t = tensors.get(cursor);
            if t.name != name {
                return Err(ModelError::TensorLayout(format!(
                    "tensor {cursor} is {:?}, expected {name:?}",
                    t.name
                )));
            }
            if t.kind != kind {
                return Err(ModelError::TensorLayout(format!(
                    "tensor {name:?} has kind {:?}, expected {kind:?}",
                    t.kind
                )));
            }
            if t.data.shape() != shape.as_slice() {
                return Err(ModelError::TensorLayout(format!(
                    "tensor {name:?} has shape {:?}, expected {shape:?}",
                    t.data.shape()
                )));
            }
            cursor += 1;
            Ok(cursor - 1)
        })?;
        if cursor != tensors.len() {
            return Err(ModelError::TensorLayout(format!(
                "tensor set has {} extra tensors beyond the {cursor} the spec implies",
                tensors.len() - cursor
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            tensors,
            plan,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &NamedTensorSet {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut NamedTensorSet {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> NamedTensorSet {
        self.tensors
    }

    pub fn activation_sites(&self) -> Vec<String> {
        self.spec.activation_sites()
    }

    /// Channel count at a named activation site.
    pub fn site_channels(&self, site: &str) -> Result<usize, ModelError> {
        if site == "stem" {
            return Ok(self.spec.stem_width);
        }
        self.plan
            .blocks
            .iter()
            .find(|b| b.site == site)
            .map(|b| b.conv2.conv.c_out)
            .ok_or_else(|| ModelError::UnknownSite(site.to_string()))
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<(), ModelError> {
        let (c, h, w) = self.spec.input;
        let shape = x.shape();
        if shape[1] != c || shape[2] != h || shape[3] != w || shape[0] == 0 {
            return Err(ModelError::InputShape {
                expected: (c, h, w),
                found: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Inference-mode forward pass (running-statistics batch norm), returning
    /// logits and the activations of each requested site. Never mutates the
    /// model: captured activations are post-ReLU copies.
    pub fn forward_eval(
        &self,
        x: &Array4<f32>,
        capture: &[String],
    ) -> Result<(Array2<f32>, BTreeMap<String, Array4<f32>>), ModelError> {
        self.check_input(x)?;
        let sites = self.activation_sites();
        for site in capture {
            if !sites.contains(site) {
                return Err(ModelError::UnknownSite(site.clone()));
            }
        }
        let mut captured = BTreeMap::new();
        let mut grab = |site: &str, act: &Array4<f32>| {
            if capture.iter().any(|s| s == site) {
                captured.insert(site.to_string(), act.clone());
            }
        };

        let mut act = conv_forward(x, self.weight4(self.plan.stem_conv.weight), &self.plan.stem_conv.conv);
        self.bn_eval_inplace(&mut act, &self.plan.stem_bn);
        relu_inplace(&mut act);
        grab("stem", &act);

        for block in &self.plan.blocks {
            let shortcut = match &block.shortcut {
                None => act.clone(),
                Some((sc, sb)) => {
                    let mut s = conv_forward(&act, self.weight4(sc.weight), &sc.conv);
                    self.bn_eval_inplace(&mut s, sb);
                    s
                }
            };
            let mut main = conv_forward(&act, self.weight4(block.conv1.weight), &block.conv1.conv);
            self.bn_eval_inplace(&mut main, &block.bn1);
            relu_inplace(&mut main);
            let mut main = conv_forward(&main, self.weight4(block.conv2.weight), &block.conv2.conv);
            self.bn_eval_inplace(&mut main, &block.bn2);
            main += &shortcut;
            relu_inplace(&mut main);
            grab(&block.site, &main);
            act = main;
        }

        let pooled = global_avg_pool(&act);
        let logits = self.fc_forward(&pooled);
        Ok((logits, captured))
    }

    /// Training-mode forward pass: batch-statistics normalization, running
    /// statistics updated in place, and every intermediate needed by
    /// [`Model::backward`] cached.
    pub fn forward_train(&mut self, x: &Array4<f32>) -> Result<(Array2<f32>, TrainCache), ModelError> {
        self.check_input(x)?;
        let plan = self.plan.clone();

        let a = conv_forward(x, self.weight4(plan.stem_conv.weight), &plan.stem_conv.conv);
        let (mut y, stem_bn) = self.bn_train(&a, &plan.stem_bn);
        relu_inplace(&mut y);
        let stem = StemCache {
            x_in: x.clone(),
            conv_out: a,
            bn: stem_bn,
            y,
        };

        let mut act = stem.y.clone();
        let mut blocks = Vec::with_capacity(plan.blocks.len());
        for block in &plan.blocks {
            let x_in = act;
            let (short_out, short_cache) = match &block.shortcut {
                None => (x_in.clone(), None),
                Some((sc, sb)) => {
                    let s = conv_forward(&x_in, self.weight4(sc.weight), sc.conv_ref());
                    let (sn, scache) = self.bn_train(&s, sb);
                    (sn, Some((s, scache)))
                }
            };
            let a1 = conv_forward(&x_in, self.weight4(block.conv1.weight), &block.conv1.conv);
            let (mut r1, bn1) = self.bn_train(&a1, &block.bn1);
            relu_inplace(&mut r1);
            let a2 = conv_forward(&r1, self.weight4(block.conv2.weight), &block.conv2.conv);
            let (mut y, bn2) = self.bn_train(&a2, &block.bn2);
            y += &short_out;
            relu_inplace(&mut y);
            blocks.push(BlockCache {
                x_in,
                conv1_out: a1,
                bn1,
                relu1_out: r1,
                conv2_out: a2,
                bn2,
                shortcut: short_cache,
                y: y.clone(),
            });
            act = y;
        }

        let pooled = global_avg_pool(&act);
        let logits = self.fc_forward(&pooled);
        let cache = TrainCache {
            stem,
            blocks,
            pooled,
            spatial: (act.shape()[2], act.shape()[3]),
        };
        Ok((logits, cache))
    }

    /// Backpropagate `dlogits` through the cached forward pass, returning
    /// gradients aligned index-for-index with [`Model::tensors`] (zeros for
    /// running statistics, which the optimizer never touches).
    pub fn backward(&self, cache: &TrainCache, dlogits: &Array2<f32>) -> Vec<ArrayD<f32>> {
        let mut grads = self.tensors.zeros_like();
        let plan = &self.plan;

        // Head.
        let w = self.weight2(plan.fc_weight);
        let mut dw = Array2::<f32>::zeros(w.raw_dim());
        ndarray::linalg::general_mat_mul(1.0, &dlogits.t(), &cache.pooled, 0.0, &mut dw);
        grads[plan.fc_weight] = dw.into_dyn();
        grads[plan.fc_bias] = dlogits.sum_axis(Axis(0)).into_dyn();
        let mut dpooled = Array2::<f32>::zeros(cache.pooled.raw_dim());
        ndarray::linalg::general_mat_mul(1.0, dlogits, &w, 0.0, &mut dpooled);

        // Un-pool into the last spatial activation.
        let (sh, sw) = cache.spatial;
        let scale = 1.0 / (sh * sw) as f32;
        let (b, c) = (dpooled.shape()[0], dpooled.shape()[1]);
        let mut dact = Array4::<f32>::zeros((b, c, sh, sw));
        for bi in 0..b {
            for ci in 0..c {
                let g = dpooled[[bi, ci]] * scale;
                dact.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .fill(g);
            }
        }

        // Blocks, in reverse.
        for (block, bcache) in plan.blocks.iter().zip(&cache.blocks).rev() {
            // Through the post-add ReLU.
            let mut dz = dact;
            relu_backward_inplace(&mut dz, &bcache.y);

            // Shortcut branch.
            let dshort = match (&block.shortcut, &bcache.shortcut) {
                (None, None) => dz.clone(),
                (Some((sc, sb)), Some((s_conv_out, s_bn))) => {
                    let ds = self.bn_backward(&dz, s_conv_out, sb, s_bn, &mut grads);
                    let (dw, dx) =
                        conv_backward(&bcache.x_in, self.weight4(sc.weight), &ds, &sc.conv, true);
                    grads[sc.weight] = dw.into_dyn();
                    dx.expect("dx requested")
                }
                _ => unreachable!("plan and cache built together"),
            };

            // Main branch.
            let da2 = self.bn_backward(&dz, &bcache.conv2_out, &block.bn2, &bcache.bn2, &mut grads);
            let (dw2, dr1) = conv_backward(
                &bcache.relu1_out,
                self.weight4(block.conv2.weight),
                &da2,
                &block.conv2.conv,
                true,
            );
            grads[block.conv2.weight] = dw2.into_dyn();
            let mut dr1 = dr1.expect("dx requested");
            relu_backward_inplace(&mut dr1, &bcache.relu1_out);
            let da1 = self.bn_backward(&dr1, &bcache.conv1_out, &block.bn1, &bcache.bn1, &mut grads);
            let (dw1, dx_main) = conv_backward(
                &bcache.x_in,
                self.weight4(block.conv1.weight),
                &da1,
                &block.conv1.conv,
                true,
            );
            grads[block.conv1.weight] = dw1.into_dyn();

            dact = dx_main.expect("dx requested");
            dact += &dshort;
        }

        // Stem.
        let mut dz = dact;
        relu_backward_inplace(&mut dz, &cache.stem.y);
        let da = self.bn_backward(&dz, &cache.stem.conv_out, &plan.stem_bn, &cache.stem.bn, &mut grads);
        let (dw, _) = conv_backward(
            &cache.stem.x_in,
            self.weight4(plan.stem_conv.weight),
            &da,
            &plan.stem_conv.conv,
            false, // input gradient is never needed
        );
        grads[plan.stem_conv.weight] = dw.into_dyn();

        grads
    }

    /// Fraction of `labels` matched by the argmax of the logits, evaluated in
    /// inference mode over fixed-order batches. Ties in the argmax resolve to
    /// the lowest class index.
    pub fn evaluate_accuracy(
        &self,
        inputs: &Array4<f32>,
        labels: &[u32],
        batch_size: usize,
    ) -> Result<f64, ModelError> {
        if inputs.shape()[0] == 0 || labels.is_empty() {
            return Err(ModelError::EmptyEval);
        }
        if inputs.shape()[0] != labels.len() {
            return Err(ModelError::InputShape {
                expected: self.spec.input,
                found: inputs.shape().to_vec(),
            });
        }
        let batch_size = batch_size.max(1);
        let n = labels.len();
        let mut correct = 0usize;
        let mut start = 0usize;
        while start < n {
            let end = (start + batch_size).min(n);
            let batch = inputs.slice(ndarray::s![start..end, .., .., ..]).to_owned();
            let (logits, _) = self.forward_eval(&batch, &[])?;
            for (row, &label) in logits.axis_iter(Axis(0)).zip(&labels[start..end]) {
                let mut best = 0usize;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                if best as u32 == label {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(correct as f64 / n as f64)
    }

    fn weight4(&self, idx: usize) -> ndarray::ArrayView4<'_, f32> {
        self.tensors
            .get(idx)
            .data
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv weights are 4-d")
    }

    fn weight2(&self, idx: usize) -> ndarray::ArrayView2<'_, f32> {
        self.tensors
            .get(idx)
            .data
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("fc weight is 2-d")
    }

    fn vec1(&self, idx: usize) -> &[f32] {
        self.tensors.get(idx).data.as_slice().expect("1-d tensor")
    }

    fn fc_forward(&self, pooled: &Array2<f32>) -> Array2<f32> {
        let w = self.weight2(self.plan.fc_weight);
        let bias = self.vec1(self.plan.fc_bias);
        let mut out = Array2::<f32>::zeros((pooled.shape()[0], w.shape()[0]));
        ndarray::linalg::general_mat_mul(1.0, pooled, &w.t(), 0.0, &mut out);
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        out
    }

    fn bn_eval_inplace(&self, x: &mut Array4<f32>, bn: &BnPlan) {
        let gamma = self.vec1(bn.gamma);
        let beta = self.vec1(bn.beta);
        let rmean = self.vec1(bn.running_mean);
        let rvar = self.vec1(bn.running_var);
        let channels = x.shape()[1];
        for c in 0..channels {
            let scale = gamma[c] / (rvar[c] + BN_EPS).sqrt();
            let shift = beta[c] - rmean[c] * scale;
            for v in x.index_axis_mut(Axis(1), c).iter_mut() {
                *v = *v * scale + shift;
            }
        }
    }

    /// Batch-statistics normalization; updates running stats in place and
    /// returns the normalized output plus the cache backward needs.
    fn bn_train(&mut self, x: &Array4<f32>, bn: &BnPlan) -> (Array4<f32>, BnCache) {
        let channels = x.shape()[1];
        let n = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f32;
        let mut mean = Array1::<f32>::zeros(channels);
        let mut inv_std = Array1::<f32>::zeros(channels);
        let mut out = Array4::<f32>::zeros(x.raw_dim());
        for c in 0..channels {
            let xc = x.index_axis(Axis(1), c);
            let sum: f32 = xc.iter().sum();
            let m = sum / n;
            let varsum: f32 = xc.iter().map(|&v| (v - m) * (v - m)).sum();
            let var = varsum / n;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            mean[c] = m;
            inv_std[c] = istd;

            let gamma = self.vec1(bn.gamma)[c];
            let beta = self.vec1(bn.beta)[c];
            let scale = gamma * istd;
            let shift = beta - m * scale;
            for (o, &v) in out
                .index_axis_mut(Axis(1), c)
                .iter_mut()
                .zip(xc.iter())
            {
                *o = v * scale + shift;
            }

            // Running statistics: exponential moving average; the variance
            // estimate stored is the unbiased one.
            let unbiased = varsum / (n - 1.0).max(1.0);
            let rm = &mut self.tensors.get_mut(bn.running_mean).data;
            rm[[c]] = (1.0 - BN_MOMENTUM) * rm[[c]] + BN_MOMENTUM * m;
            let rv = &mut self.tensors.get_mut(bn.running_var).data;
            rv[[c]] = (1.0 - BN_MOMENTUM) * rv[[c]] + BN_MOMENTUM * unbiased;
        }
        (out, BnCache { mean, inv_std })
    }

    /// Backward through batch norm; accumulates `dgamma`/`dbeta` into `grads`
    /// and returns the input gradient.
    fn bn_backward(
        &self,
        dy: &Array4<f32>,
        x: &Array4<f32>,
        bn: &BnPlan,
        cache: &BnCache,
        grads: &mut [ArrayD<f32>],
    ) -> Array4<f32> {
        let channels = x.shape()[1];
        let n = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f32;
        let mut dx = Array4::<f32>::zeros(x.raw_dim());
        let gamma = self.vec1(bn.gamma);
        let mut dgamma = ArrayD::<f32>::zeros(IxDyn(&[channels]));
        let mut dbeta = ArrayD::<f32>::zeros(IxDyn(&[channels]));
        for c in 0..channels {
            let xc = x.index_axis(Axis(1), c);
            let dyc = dy.index_axis(Axis(1), c);
            let (m, istd) = (cache.mean[c], cache.inv_std[c]);
            // Fixed-order reductions.
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xhat = 0.0f32;
            for (&g, &v) in dyc.iter().zip(xc.iter()) {
                let xhat = (v - m) * istd;
                sum_dy += g;
                sum_dy_xhat += g * xhat;
            }
            dgamma[[c]] = sum_dy_xhat;
            dbeta[[c]] = sum_dy;
            let k = gamma[c] * istd / n;
            for ((o, &g), &v) in dx
                .index_axis_mut(Axis(1), c)
                .iter_mut()
                .zip(dyc.iter())
                .zip(xc.iter())
            {
                let xhat = (v - m) * istd;
                *o = k * (n * g - sum_dy - xhat * sum_dy_xhat);
            }
        }
        grads[bn.gamma] = dgamma;
        grads[bn.beta] = dbeta;
        dx
    }
}

impl ConvPlan {
    fn conv_ref(&self) -> &Conv2d {
        &self.conv
    }
}

fn init_tensor(kind: TensorKind, shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    match kind {
        TensorKind::ConvWeight => {
            // Kaiming-normal, fan-out mode: std = sqrt(2 / (c_out * kh * kw)).
            let fan_out = shape[0] * shape[2] * shape[3];
            let normal = Normal::new(0.0f32, (2.0 / fan_out as f32).sqrt()).expect("valid std");
            ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
        }
        TensorKind::FcWeight => {
            let normal = Normal::new(0.0f32, 0.01).expect("valid std");
            ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
        }
        TensorKind::BnGamma | TensorKind::BnRunningVar => ArrayD::ones(IxDyn(shape)),
        TensorKind::FcBias | TensorKind::BnBeta | TensorKind::BnRunningMean => {
            ArrayD::zeros(IxDyn(shape))
        }
    }
}

// ---------------------------------------------------------------------------
// Caches
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct BnCache {
    mean: Array1<f32>,
    inv_std: Array1<f32>,
}

#[derive(Debug, Clone)]
struct StemCache {
    x_in: Array4<f32>,
    conv_out: Array4<f32>,
    bn: BnCache,
    y: Array4<f32>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    x_in: Array4<f32>,
    conv1_out: Array4<f32>,
    bn1: BnCache,
    relu1_out: Array4<f32>,
    conv2_out: Array4<f32>,
    bn2: BnCache,
    /// `(projection conv output, its bn cache)` when the block projects.
    shortcut: Option<(Array4<f32>, BnCache)>,
    y: Array4<f32>,
}

/// Everything [`Model::backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct TrainCache {
    stem: StemCache,
    blocks: Vec<BlockCache>,
    pooled: Array2<f32>,
    spatial: (usize, usize),
}

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

fn relu_inplace(x: &mut Array4<f32>) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// `dz *= (y > 0)` where `y` is the ReLU *output*.
fn relu_backward_inplace(dz: &mut Array4<f32>, y: &Array4<f32>) {
    for (g, &v) in dz.iter_mut().zip(y.iter()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let scale = 1.0 / (h * w) as f32;
    let mut out = Array2::<f32>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let sum: f32 = x
                .index_axis(Axis(0), bi)
                .index_axis(Axis(0), ci)
                .iter()
                .sum();
            out[[bi, ci]] = sum * scale;
        }
    }
    out
}

/// Unfold `x` into the column matrix `[c_in*kh*kw, b*oh*ow]` for a GEMM-based
/// convolution. Out-of-bounds (padding) positions stay zero.
fn im2col(x: &Array4<f32>, conv: &Conv2d) -> Array2<f32> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = conv.out_dims(h, w);
    let k = c * conv.kh * conv.kw;
    let n = b * oh * ow;
    let mut col = Array2::<f32>::zeros((k, n));
    let xs = x.as_slice().expect("standard layout input");
    let cs = col.as_slice_mut().expect("standard layout col");
    let (stride, pad) = (conv.stride, conv.pad);
    for ci in 0..c {
        for ky in 0..conv.kh {
            for kx in 0..conv.kw {
                let row = (ci * conv.kh + ky) * conv.kw + kx;
                let row_base = row * n;
                for bi in 0..b {
                    let x_chan = ((bi * c + ci) * h) * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_chan + iy as usize * w;
                        let col_base = row_base + (bi * oh + oy) * ow;
                        if stride == 1 {
                            // ix = ox + kx - pad must lie in [0, w).
                            let lo = pad.saturating_sub(kx);
                            let hi = ow.min(w + pad - kx);
                            if lo < hi {
                                let src = (x_row + lo + kx) - pad;
                                cs[col_base + lo..col_base + hi]
                                    .copy_from_slice(&xs[src..src + (hi - lo)]);
                            }
                        } else {
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    cs[col_base + ox] = xs[x_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a column-matrix gradient back into input layout; the exact
/// adjoint of [`im2col`].
fn col2im(dcol: &Array2<f32>, conv: &Conv2d, b: usize, h: usize, w: usize) -> Array4<f32> {
    let c = conv.c_in;
    let (oh, ow) = conv.out_dims(h, w);
    let n = b * oh * ow;
    let mut dx = Array4::<f32>::zeros((b, c, h, w));
    let ds = dcol.as_slice().expect("standard layout col");
    let xs = dx.as_slice_mut().expect("standard layout output");
    let (stride, pad) = (conv.stride, conv.pad);
    for ci in 0..c {
        for ky in 0..conv.kh {
            for kx in 0..conv.kw {
                let row = (ci * conv.kh + ky) * conv.kw + kx;
                let row_base = row * n;
                for bi in 0..b {
                    let x_chan = ((bi * c + ci) * h) * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_chan + iy as usize * w;
                        let col_base = row_base + (bi * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                xs[x_row + ix as usize] += ds[col_base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward(x: &Array4<f32>, weight: ndarray::ArrayView4<'_, f32>, conv: &Conv2d) -> Array4<f32> {
    let (b, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = conv.out_dims(h, w);
    let k = conv.c_in * conv.kh * conv.kw;
    let n = b * oh * ow;
    let col = im2col(x, conv);
    let w2 = weight
        .into_shape_with_order((conv.c_out, k))
        .expect("contiguous weight");
    let mut out2 = Array2::<f32>::zeros((conv.c_out, n));
    ndarray::linalg::general_mat_mul(1.0, &w2, &col, 0.0, &mut out2);

    // [c_out, b*oh*ow] -> [b, c_out, oh, ow]
    let mut out = Array4::<f32>::zeros((b, conv.c_out, oh, ow));
    let plane = oh * ow;
    let src = out2.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for co in 0..conv.c_out {
        for bi in 0..b {
            let s = co * n + bi * plane;
            let d = (bi * conv.c_out + co) * plane;
            dst[d..d + plane].copy_from_slice(&src[s..s + plane]);
        }
    }
    out
}

/// Gradients of a convolution: `(dweight, dinput)`. `dinput` is computed only
/// when `need_dx` (the stem can skip it).
fn conv_backward(
    x: &Array4<f32>,
    weight: ndarray::ArrayView4<'_, f32>,
    dout: &Array4<f32>,
    conv: &Conv2d,
    need_dx: bool,
) -> (Array4<f32>, Option<Array4<f32>>) {
    let (b, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = conv.out_dims(h, w);
    let k = conv.c_in * conv.kh * conv.kw;
    let n = b * oh * ow;

    // [b, c_out, oh, ow] -> [c_out, b*oh*ow]
    let mut dout2 = Array2::<f32>::zeros((conv.c_out, n));
    {
        let plane = oh * ow;
        let src = dout.as_slice().expect("standard layout");
        let dst = dout2.as_slice_mut().expect("standard layout");
        for bi in 0..b {
            for co in 0..conv.c_out {
                let s = (bi * conv.c_out + co) * plane;
                let d = co * n + bi * plane;
                dst[d..d + plane].copy_from_slice(&src[s..s + plane]);
            }
        }
    }

    let col = im2col(x, conv);
    let mut dw2 = Array2::<f32>::zeros((conv.c_out, k));
    ndarray::linalg::general_mat_mul(1.0, &dout2, &col.t(), 0.0, &mut dw2);
    let dw = dw2
        .into_shape_with_order((conv.c_out, conv.c_in, conv.kh, conv.kw))
        .expect("contiguous gradient");

    let dx = if need_dx {
        let w2 = weight
            .into_shape_with_order((conv.c_out, k))
            .expect("contiguous weight");
        let mut dcol = Array2::<f32>::zeros((k, n));
        ndarray::linalg::general_mat_mul(1.0, &w2.t(), &dout2, 0.0, &mut dcol);
        Some(col2im(&dcol, conv, b, h, w))
    } else {
        None
    };
    (dw, dx)
}

/// Mean softmax cross-entropy over the batch, with the logit gradient.
/// Numerically stabilized by max subtraction.
pub fn softmax_cross_entropy(
    logits: &Array2<f32>,
    labels: &[u32],
) -> Result<(f32, Array2<f32>), ModelError> {
    let (b, classes) = (logits.shape()[0], logits.shape()[1]);
    if b == 0 || labels.len() != b {
        return Err(ModelError::EmptyEval);
    }
    let mut dlogits = Array2::<f32>::zeros((b, classes));
    let mut loss = 0.0f32;
    let inv_b = 1.0 / b as f32;
    for (i, &label) in labels.iter().enumerate() {
        if label as usize >= classes {
            return Err(ModelError::LabelRange { label, classes });
        }
        let row = logits.index_axis(Axis(0), i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for &v in row.iter() {
            sum += (v - max).exp();
        }
        let log_sum = sum.ln() + max;
        loss += log_sum - row[label as usize];
        for (k, g) in dlogits.index_axis_mut(Axis(0), i).iter_mut().enumerate() {
            let p = (row[k] - max).exp() / sum;
            *g = (p - if k as u32 == label { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Ok((loss * inv_b, dlogits))
}
