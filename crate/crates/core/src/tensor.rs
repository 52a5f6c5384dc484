//! Named f32 tensor storage with deterministic order and bit-exact binary IO.
//!
//! Model parameters, gradients, optimizer buffers, and checkpoints all move
//! through [`NamedTensorSet`]: an ordered collection of named n-dimensional
//! `f32` arrays. Order is the order of insertion (construction order of the
//! model), never a hash order, so every serialization and reduction over a set
//! is reproducible bit for bit.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{ContentHasher, LeReader};

/// What role a tensor plays in the network. Determines whether the trainer
/// updates it and whether the pruner may remove entries from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorKind {
    /// Convolution kernel, shape `[c_out, c_in, kh, kw]`. Trainable, prunable.
    ConvWeight,
    /// Fully-connected weight, shape `[out, in]`. Trainable, prunable.
    FcWeight,
    /// Fully-connected bias, shape `[out]`. Trainable, never pruned.
    FcBias,
    /// Batch-norm scale, shape `[c]`. Trainable, never pruned.
    BnGamma,
    /// Batch-norm shift, shape `[c]`. Trainable, never pruned.
    BnBeta,
    /// Batch-norm running mean, shape `[c]`. Updated by forward passes in
    /// training mode, not by the optimizer. Never pruned.
    BnRunningMean,
    /// Batch-norm running variance, like [`TensorKind::BnRunningMean`].
    BnRunningVar,
}

impl TensorKind {
    /// Updated by the optimizer.
    pub fn trainable(self) -> bool {
        !matches!(self, TensorKind::BnRunningMean | TensorKind::BnRunningVar)
    }

    /// Eligible for magnitude pruning. Only weight matrices/kernels are;
    /// biases and normalization parameters always survive.
    pub fn prunable(self) -> bool {
        matches!(self, TensorKind::ConvWeight | TensorKind::FcWeight)
    }

    fn code(self) -> u8 {
        match self {
            TensorKind::ConvWeight => 0,
            TensorKind::FcWeight => 1,
            TensorKind::FcBias => 2,
            TensorKind::BnGamma => 3,
            TensorKind::BnBeta => 4,
            TensorKind::BnRunningMean => 5,
            TensorKind::BnRunningVar => 6,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => TensorKind::ConvWeight,
            1 => TensorKind::FcWeight,
            2 => TensorKind::FcBias,
            3 => TensorKind::BnGamma,
            4 => TensorKind::BnBeta,
            5 => TensorKind::BnRunningMean,
            6 => TensorKind::BnRunningVar,
            _ => return None,
        })
    }
}

/// One named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: TensorKind,
    pub data: ArrayD<f32>,
}

/// An ordered set of named tensors with O(1) lookup by name.
///
/// Iteration order equals insertion order and is part of the contract: the
/// binary format, content hashes, and the pruner's tie-breaking all depend on
/// it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorSet {
    tensors: Vec<NamedTensor>,
    index: std::collections::BTreeMap<String, usize>,
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("no tensor named {0:?}")]
    UnknownName(String),
    #[error("tensor {name:?}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed tensor payload: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

const TENSORS_MAGIC: &[u8; 4] = b"PDTS";
const TENSORS_VERSION: u32 = 1;

impl NamedTensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        kind: TensorKind,
        data: ArrayD<f32>,
    ) -> Result<usize, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        let idx = self.tensors.len();
        self.index.insert(name.clone(), idx);
        self.tensors.push(NamedTensor { name, kind, data });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter()
    }

    pub fn get(&self, idx: usize) -> &NamedTensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut NamedTensor {
        &mut self.tensors[idx]
    }

    pub fn position(&self, name: &str) -> Result<usize, TensorError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownName(name.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Result<&NamedTensor, TensorError> {
        Ok(&self.tensors[self.position(name)?])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut NamedTensor, TensorError> {
        let idx = self.position(name)?;
        Ok(&mut self.tensors[idx])
    }

    /// Total number of scalar elements across all tensors.
    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Replace the data of an existing tensor; shape must match.
    pub fn assign(&mut self, name: &str, data: ArrayD<f32>) -> Result<(), TensorError> {
        let tensor = self.by_name_mut(name)?;
        if tensor.data.shape() != data.shape() {
            return Err(TensorError::ShapeMismatch {
                name: name.to_string(),
                expected: tensor.data.shape().to_vec(),
                found: data.shape().to_vec(),
            });
        }
        tensor.data = data;
        Ok(())
    }

    /// A `Vec` of zero-filled arrays shaped like every tensor in the set, in
    /// set order. Used for gradients and momentum buffers.
    pub fn zeros_like(&self) -> Vec<ArrayD<f32>> {
        self.tensors
            .iter()
            .map(|t| ArrayD::zeros(t.data.raw_dim()))
            .collect()
    }

    /// Serialize to the checkpoint tensor format (little-endian):
    ///
    /// ```text
    /// magic "PDTS" | u32 version | u32 count
    /// per tensor: u32 name_len | name utf-8 | u8 kind | u32 ndim
    ///             | u64 dims[ndim] | u64 elem_count | f32 data[elem_count]
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TENSORS_MAGIC);
        out.extend_from_slice(&TENSORS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for tensor in &self.tensors {
            out.extend_from_slice(&(tensor.name.len() as u32).to_le_bytes());
            out.extend_from_slice(tensor.name.as_bytes());
            out.push(tensor.kind.code());
            let shape = tensor.data.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &dim in shape {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            out.extend_from_slice(&(tensor.data.len() as u64).to_le_bytes());
            // `iter()` walks in logical (row-major) order regardless of the
            // underlying memory layout, so bytes are layout-independent.
            for &v in tensor.data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = LeReader::new(bytes);
        let magic = r.take(4)?;
        if magic != TENSORS_MAGIC {
            return Err(TensorError::Format(format!(
                "bad magic {:02x?}, expected {:02x?}",
                magic, TENSORS_MAGIC
            )));
        }
        let version = r.u32()?;
        if version != TENSORS_VERSION {
            return Err(TensorError::Format(format!(
                "unsupported tensor format version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut set = NamedTensorSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| TensorError::Format(format!("tensor name not utf-8: {e}")))?
                .to_string();
            let kind_code = r.take(1)?[0];
            let kind = TensorKind::from_code(kind_code).ok_or_else(|| {
                TensorError::Format(format!("unknown tensor kind code {kind_code}"))
            })?;
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let elem_count = r.u64()? as usize;
            let expected: usize = dims.iter().product();
            if elem_count != expected {
                return Err(TensorError::Format(format!(
                    "tensor {name:?}: dims {dims:?} imply {expected} elements, header says {elem_count}"
                )));
            }
            let data = r.f32_vec(elem_count)?;
            let array = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| TensorError::Format(format!("tensor {name:?}: {e}")))?;
            set.push(name, kind, array)?;
        }
        r.expect_end()?;
        Ok(set)
    }

    /// Content hash covering names, kinds, shapes, and exact data bits.
    pub fn content_hash(&self) -> String {
        let mut h = ContentHasher::new();
        h.chunk(&self.to_bytes());
        h.finish()
    }
}

/// Serializable state of a ChaCha8 generator: enough to reconstruct the
/// stream bit-exactly at the position it was captured.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, hex-encoded for JSON friendliness.
    pub seed_hex: String,
    /// Word position within the stream (128-bit, split to stay in u64 JSON).
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
    /// Stream id.
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        let seed = rng.get_seed();
        let word_pos = rng.get_word_pos();
        Self {
            seed_hex: seed.iter().map(|b| format!("{b:02x}")).collect(),
            word_pos_hi: (word_pos >> 64) as u64,
            word_pos_lo: word_pos as u64,
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> Result<rand_chacha::ChaCha8Rng, TensorError> {
        use rand::SeedableRng;
        if self.seed_hex.len() != 64 {
            return Err(TensorError::Format(format!(
                "rng seed must be 64 hex chars, found {}",
                self.seed_hex.len()
            )));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in seed.iter_mut().enumerate() {
            *chunk = u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|e| TensorError::Format(format!("rng seed not hex: {e}")))?;
        }
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        Ok(rng)
    }

    /// Binary form (`rng.bin`): magic, version, seed, word position, stream.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 + 32 + 16 + 8);
        out.extend_from_slice(b"PDRN");
        out.extend_from_slice(&1u32.to_le_bytes());
        for i in 0..32 {
            out.push(u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16).unwrap_or(0));
        }
        out.extend_from_slice(&self.word_pos_lo.to_le_bytes());
        out.extend_from_slice(&self.word_pos_hi.to_le_bytes());
        out.extend_from_slice(&self.stream.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = LeReader::new(bytes);
        let magic = r.take(4)?;
        if magic != b"PDRN" {
            return Err(TensorError::Format("bad rng state magic".into()));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(TensorError::Format(format!(
                "unsupported rng state version {version}"
            )));
        }
        let seed = r.take(32)?;
        let word_pos_lo = r.u64()?;
        let word_pos_hi = r.u64()?;
        let stream = r.u64()?;
        r.expect_end()?;
        Ok(Self {
            seed_hex: seed.iter().map(|b| format!("{b:02x}")).collect(),
            word_pos_hi,
            word_pos_lo,
            stream,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{RngCore, SeedableRng};

    fn sample_set() -> NamedTensorSet {
        let mut set = NamedTensorSet::new();
        set.push(
            "conv.weight",
            TensorKind::ConvWeight,
            array![[[[1.0f32, -2.5], [0.0, 3.25]]]].into_dyn(),
        )
        .unwrap();
        set.push(
            "bn.gamma",
            TensorKind::BnGamma,
            array![1.0f32, 0.5].into_dyn(),
        )
        .unwrap();
        set
    }

    #[test]
    fn round_trip_preserves_bits_and_order() {
        let set = sample_set();
        let bytes = set.to_bytes();
        let back = NamedTensorSet::from_bytes(&bytes).unwrap();
        assert_eq!(set, back);
        let names: Vec<_> = back.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["conv.weight", "bn.gamma"]);
        // Bit-exactness, including the sign of zero and exact payload bytes.
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn negative_zero_and_subnormals_survive() {
        let mut set = NamedTensorSet::new();
        let tricky = vec![-0.0f32, f32::MIN_POSITIVE / 2.0, 1e-45, -3.4e38];
        set.push(
            "w",
            TensorKind::FcWeight,
            ArrayD::from_shape_vec(IxDyn(&[4]), tricky.clone()).unwrap(),
        )
        .unwrap();
        let back = NamedTensorSet::from_bytes(&set.to_bytes()).unwrap();
        let got: Vec<f32> = back.by_name("w").unwrap().data.iter().copied().collect();
        for (a, b) in tricky.iter().zip(&got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut set = NamedTensorSet::new();
        set.push("w", TensorKind::FcWeight, ArrayD::zeros(IxDyn(&[1])))
            .unwrap();
        let err = set
            .push("w", TensorKind::FcWeight, ArrayD::zeros(IxDyn(&[1])))
            .unwrap_err();
        assert!(matches!(err, TensorError::DuplicateName(_)));
    }

    #[test]
    fn unknown_name_is_an_error() {
        let set = sample_set();
        assert!(matches!(
            set.by_name("nope"),
            Err(TensorError::UnknownName(_))
        ));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let bytes = sample_set().to_bytes();
        let err = NamedTensorSet::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, TensorError::Io(_) | TensorError::Format(_)));
    }

    #[test]
    fn content_hash_changes_with_single_bit() {
        let set = sample_set();
        let mut other = set.clone();
        let t = other.by_name_mut("bn.gamma").unwrap();
        t.data[[0]] = f32::from_bits(t.data[[0]].to_bits() ^ 1);
        assert_ne!(set.content_hash(), other.content_hash());
    }

    #[test]
    fn rng_state_round_trip_resumes_stream() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        rng.set_stream(3);
        for _ in 0..13 {
            rng.next_u32();
        }
        let state = RngState::capture(&rng);
        // Binary round trip.
        let state = RngState::from_bytes(&state.to_bytes()).unwrap();
        let mut restored = state.restore().unwrap();
        let expected: Vec<u64> = (0..8).map(|_| rng.next_u64()).collect();
        let got: Vec<u64> = (0..8).map(|_| restored.next_u64()).collect();
        assert_eq!(expected, got);
    }
}
