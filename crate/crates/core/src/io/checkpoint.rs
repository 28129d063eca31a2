//! Binary checkpoint format.
//!
//! ```text
//! "TLTC" | u32 version | u32 tensor count
//! per tensor: u16 name len, name, u8 dtype, u8 rank, u64 dims[rank], payload
//!   dtype 0: f32 values            dtype 2: f64 values
//!   dtype 1: u8 k, f32 q0, f32 Δ, packed indices
//!   dtype 3: u8 k, f64 q0, f64 Δ, packed indices
//! sections: [u8; 4] tag, u64 length, body; terminated by "END\0"
//!   CONF  model config as key=value text (required)
//!   OPTM  Adam config, step count and moments
//!   METR  training step and cost meter
//!   PRUN  pruning masks and schedule
//!   QMET  exact top grid value and zero index of quantized tensors
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::binary::{Reader, Writer};
use super::config::{model_config_from_text, model_config_to_text};
use crate::compress::{
    pack_indices, packed_len, unpack_indices, PruneScope, PruneState, QuantizedModel, QuantizedTensor,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{Adam, AdamConfig, CostMeter, TrainState};

pub const MAGIC: [u8; 4] = *b"TLTC";
pub const VERSION: u32 = 1;

const CONF: [u8; 4] = *b"CONF";
const OPTM: [u8; 4] = *b"OPTM";
const METR: [u8; 4] = *b"METR";
const PRUN: [u8; 4] = *b"PRUN";
const QMET: [u8; 4] = *b"QMET";
const END: [u8; 4] = *b"END\0";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorPayload<T> {
    Dense(Tensor<T>),
    Quantized(QuantizedTensor<T>),
}

impl<T: Scalar> TensorPayload<T> {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorPayload::Dense(t) => t.shape(),
            TensorPayload::Quantized(q) => q.shape(),
        }
    }

    pub fn to_dense(&self) -> Result<Tensor<T>> {
        match self {
            TensorPayload::Dense(t) => Ok(t.clone()),
            TensorPayload::Quantized(q) => q.dequantize(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord<T> {
    pub name: String,
    pub payload: TensorPayload<T>,
}

/// Training progress stored alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Progress {
    pub step: u64,
    pub meter: CostMeter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord<T>>,
    pub optimizer: Option<Adam<T>>,
    pub progress: Option<Progress>,
    pub prune: Option<PruneState>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &TransformerModel<T>) -> Self {
        Self {
            config: model.config().clone(),
            tensors: model
                .parameters()
                .iter()
                .map(|p| TensorRecord {
                    name: p.name.clone(),
                    payload: TensorPayload::Dense(
                        Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec()).expect("shape matches data"),
                    ),
                })
                .collect(),
            optimizer: None,
            progress: None,
            prune: None,
        }
    }

    pub fn from_quantized(model: &QuantizedModel<T>) -> Self {
        Self {
            config: model.config().clone(),
            tensors: model
                .parameter_names()
                .zip(model.tensors())
                .map(|(name, q)| TensorRecord {
                    name: name.to_string(),
                    payload: TensorPayload::Quantized(q.clone()),
                })
                .collect(),
            optimizer: None,
            progress: None,
            prune: None,
        }
    }

    pub fn with_train_state(mut self, state: &TrainState<T>) -> Self {
        self.optimizer = Some(state.optimizer.clone());
        self.progress = Some(Progress {
            step: state.step,
            meter: state.meter.clone(),
        });
        self
    }

    pub fn with_prune(mut self, prune: PruneState) -> Self {
        self.prune = Some(prune);
        self
    }

    /// The model described by this checkpoint; quantized tensors are
    /// dequantized.
    pub fn model(&self) -> Result<TransformerModel<T>> {
        let mut model = TransformerModel::new(self.config.clone())?;
        let values = self
            .tensors
            .iter()
            .map(|r| Ok((r.name.clone(), r.payload.to_dense()?)))
            .collect::<Result<Vec<_>>>()?;
        model.load_parameters(values)?;
        Ok(model)
    }

    /// Optimizer and meter, when both were saved.
    pub fn train_state(&self) -> Option<TrainState<T>> {
        let (optimizer, progress) = (self.optimizer.clone()?, self.progress.clone()?);
        Some(TrainState {
            optimizer,
            meter: progress.meter,
            step: progress.step,
        })
    }

    /// Checks every record against the parameters implied by `config`.
    pub fn validate(&self) -> Result<()> {
        let reference = TransformerModel::<T>::new(self.config.clone())
            .map_err(|e| Error::MalformedCheckpoint(format!("embedded config: {e}")))?;
        let params = reference.parameters();
        if params.len() != self.tensors.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "config implies {} tensors, file has {}",
                params.len(),
                self.tensors.len()
            )));
        }
        for (p, r) in params.iter().zip(&self.tensors) {
            if p.name != r.name || p.tensor.shape() != r.payload.shape() {
                return Err(Error::MalformedCheckpoint(format!(
                    "tensor {} {:?} does not match config parameter {} {:?}",
                    r.name,
                    r.payload.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        if let Some(opt) = &self.optimizer {
            let (m, _) = opt.moments();
            if m.len() != params.len() || m.iter().zip(params).any(|(m, p)| m.len() != p.tensor.numel()) {
                return Err(Error::MalformedCheckpoint(
                    "optimizer moments do not match the tensors".into(),
                ));
            }
        }
        if let Some(prune) = &self.prune {
            for (name, mask) in prune.masks() {
                match params.iter().find(|p| &p.name == name) {
                    Some(p) if p.tensor.numel() == mask.len() => {}
                    _ => {
                        return Err(Error::MalformedCheckpoint(format!(
                            "prune mask {name} matches no tensor"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.u32(count_u32(self.tensors.len(), "tensor count")?);
        for r in &self.tensors {
            w.name(&r.name)?;
            let shape = r.payload.shape();
            match &r.payload {
                TensorPayload::Dense(_) => w.u8(T::DTYPE_CODE),
                TensorPayload::Quantized(_) => w.u8(T::QUANT_DTYPE_CODE),
            }
            w.u8(u8::try_from(shape.len()).map_err(|_| Error::InvalidArgument("rank above 255".into()))?);
            shape.iter().for_each(|&d| w.u64(d as u64));
            match &r.payload {
                TensorPayload::Dense(t) => t.data().iter().for_each(|v| v.write_le(&mut w.buf)),
                TensorPayload::Quantized(q) => {
                    w.u8(q.bits() as u8);
                    q.q0().write_le(&mut w.buf);
                    q.delta().write_le(&mut w.buf);
                    w.bytes(q.packed());
                }
            }
        }
        section(&mut w, CONF, |s| {
            s.bytes(model_config_to_text(&self.config).as_bytes());
            Ok(())
        })?;
        if let Some(opt) = &self.optimizer {
            section(&mut w, OPTM, |s| {
                let c = opt.config;
                [c.beta1, c.beta2, c.eps, c.weight_decay]
                    .into_iter()
                    .for_each(|v| s.f64(v));
                s.u64(opt.steps());
                s.u8(T::DTYPE_CODE);
                let (m, v) = opt.moments();
                s.u32(count_u32(m.len(), "moment count")?);
                for (m, v) in m.iter().zip(v) {
                    s.u64(m.len() as u64);
                    m.iter().chain(v).for_each(|x| x.write_le(&mut s.buf));
                }
                Ok(())
            })?;
        }
        if let Some(p) = &self.progress {
            section(&mut w, METR, |s| {
                s.u64(p.step);
                s.u64(p.meter.flops_per_step());
                s.u64(p.meter.gradient_steps());
                s.f64(p.meter.wall_clock_seconds());
                s.u32(count_u32(p.meter.calibration().len(), "calibration count")?);
                p.meter.calibration().iter().for_each(|&x| s.f64(x));
                Ok(())
            })?;
        }
        if let Some(p) = &self.prune {
            section(&mut w, PRUN, |s| {
                s.f64(p.sparsity);
                s.u32(count_u32(p.schedule.len(), "schedule length")?);
                p.schedule.iter().for_each(|&x| s.f64(x));
                s.u8(p.reference_accuracy.is_some() as u8);
                s.f64(p.reference_accuracy.unwrap_or(0.0));
                s.u8(match p.scope {
                    PruneScope::Global => 0,
                    PruneScope::PerTensor => 1,
                });
                s.u32(count_u32(p.masks().len(), "mask count")?);
                for (name, mask) in p.masks() {
                    s.name(name)?;
                    s.u64(mask.len() as u64);
                    let bits: Vec<u32> = mask.iter().map(|&b| b as u32).collect();
                    s.bytes(&pack_indices(&bits, 1));
                }
                Ok(())
            })?;
        }
        let quantized: Vec<_> = self
            .tensors
            .iter()
            .filter_map(|r| match &r.payload {
                TensorPayload::Quantized(q) => Some((r.name.as_str(), q)),
                TensorPayload::Dense(_) => None,
            })
            .collect();
        if !quantized.is_empty() {
            section(&mut w, QMET, |s| {
                s.u32(count_u32(quantized.len(), "quantized count")?);
                for (name, q) in &quantized {
                    s.name(name)?;
                    q.q_top().write_le(&mut s.buf);
                    s.u8(q.zero_index().is_some() as u8);
                    s.u32(q.zero_index().unwrap_or(0));
                }
                Ok(())
            })?;
        }
        w.bytes(&END);
        w.u64(0);
        Ok(w.buf)
    }

    /// Parses and validates a checkpoint. Values stored at a different
    /// precision than `T` are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let count = r.u32("tensor count")? as usize;
        let mut raw = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            raw.push(read_tensor::<T>(&mut r)?);
        }
        let mut config = None;
        let mut optimizer = None;
        let mut progress = None;
        let mut prune = None;
        let mut qmeta: BTreeMap<String, (f64, Option<u32>)> = BTreeMap::new();
        loop {
            let tag: [u8; 4] = r.take(4, "section tag")?.try_into().expect("4 bytes");
            let len = r.len64("section length")?;
            let body = r.take(len, "section body")?;
            let mut s = Reader::new(body);
            match tag {
                END => break,
                CONF => {
                    let text = std::str::from_utf8(body)
                        .map_err(|_| Error::MalformedCheckpoint("config section is not UTF-8".into()))?;
                    config = Some(
                        model_config_from_text(text, Path::new("<checkpoint>"))
                            .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?,
                    );
                }
                OPTM => optimizer = Some(read_optimizer::<T>(&mut s)?),
                METR => {
                    let step = s.u64("meter")?;
                    let fps = s.u64("meter")?;
                    let steps = s.u64("meter")?;
                    let seconds = s.f64("meter")?;
                    let n = s.u32("meter")? as usize;
                    let calibration = (0..n).map(|_| s.f64("meter")).collect::<Result<_>>()?;
                    progress = Some(Progress {
                        step,
                        meter: CostMeter::from_parts(fps, steps, seconds, calibration),
                    });
                }
                PRUN => prune = Some(read_prune(&mut s)?),
                QMET => {
                    let n = s.u32("quantization metadata")?;
                    for _ in 0..n {
                        let name = s.name("quantization metadata")?;
                        let code =
                            raw.iter().find(|t| t.name == name).map(|t| t.dtype).ok_or_else(|| {
                                Error::MalformedCheckpoint(format!("metadata for unknown tensor {name}"))
                            })?;
                        let top = read_value(&mut s, code == 3, "quantization metadata")?;
                        let has_zero = s.u8("quantization metadata")? != 0;
                        let zero = s.u32("quantization metadata")?;
                        qmeta.insert(name, (top, has_zero.then_some(zero)));
                    }
                }
                other => {
                    return Err(Error::MalformedCheckpoint(format!(
                        "unknown section {:?}",
                        String::from_utf8_lossy(&other)
                    )))
                }
            }
            if !s.is_empty() && tag != CONF {
                return Err(Error::MalformedCheckpoint(format!(
                    "trailing bytes in section {:?}",
                    String::from_utf8_lossy(&tag)
                )));
            }
        }
        if !r.is_empty() {
            return Err(Error::MalformedCheckpoint("data after end marker".into()));
        }
        let config = config.ok_or_else(|| Error::MalformedCheckpoint("missing config section".into()))?;
        let tensors = raw
            .into_iter()
            .map(|t| {
                let meta = qmeta.get(&t.name).copied();
                t.finish(meta)
            })
            .collect::<Result<_>>()?;
        let ckpt = Self {
            config,
            tensors,
            optimizer,
            progress,
            prune,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

fn count_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u32")))
}

fn section(w: &mut Writer, tag: [u8; 4], body: impl FnOnce(&mut Writer) -> Result<()>) -> Result<()> {
    let mut s = Writer::default();
    body(&mut s)?;
    w.bytes(&tag);
    w.u64(s.buf.len() as u64);
    w.bytes(&s.buf);
    Ok(())
}

fn read_value(r: &mut Reader, wide: bool, what: &'static str) -> Result<f64> {
    if wide {
        r.f64(what)
    } else {
        Ok(r.f32(what)? as f64)
    }
}

/// Reads `n` values written at 32 or 64 bits into `T`, bit-exact when the
/// widths agree.
fn read_values<T: Scalar>(r: &mut Reader, n: usize, wide: bool, what: &'static str) -> Result<Vec<T>> {
    let width = if wide { 8 } else { 4 };
    let bytes = r.take(n.checked_mul(width).ok_or(Error::Truncated(what))?, what)?;
    Ok(if width == T::BYTES {
        bytes.chunks_exact(width).map(T::read_le).collect()
    } else if wide {
        bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8"))))
            .collect()
    } else {
        bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4")) as f64))
            .collect()
    })
}

struct RawTensor<T> {
    name: String,
    dtype: u8,
    shape: Vec<usize>,
    dense: Option<Vec<T>>,
    quant: Option<(u32, T, T, Vec<u8>)>,
}

impl<T: Scalar> RawTensor<T> {
    fn finish(self, meta: Option<(f64, Option<u32>)>) -> Result<TensorRecord<T>> {
        let payload = match (self.dense, self.quant) {
            (Some(d), _) => TensorPayload::Dense(Tensor::new(self.shape, d)?),
            (None, Some((bits, q0, delta, packed))) => {
                let (top, zero) = match meta {
                    Some((top, zero)) => (T::of(top), zero),
                    None => (q0 + delta * T::of(((1u64 << bits) - 1) as f64), None),
                };
                TensorPayload::Quantized(
                    QuantizedTensor::from_parts(self.shape, bits, q0, delta, top, zero, packed)
                        .map_err(|e| Error::MalformedCheckpoint(format!("tensor {}: {e}", self.name)))?,
                )
            }
            (None, None) => unreachable!("reader fills one payload"),
        };
        Ok(TensorRecord {
            name: self.name,
            payload,
        })
    }
}

fn read_tensor<T: Scalar>(r: &mut Reader) -> Result<RawTensor<T>> {
    let name = r.name("tensor name")?;
    let dtype = r.u8("tensor dtype")?;
    let rank = r.u8("tensor rank")? as usize;
    let shape = (0..rank)
        .map(|_| r.u64("tensor dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::MalformedCheckpoint(format!("tensor {name} is too large")))?;
    let mut t = RawTensor {
        name,
        dtype,
        shape,
        dense: None,
        quant: None,
    };
    match dtype {
        0 | 2 => t.dense = Some(read_values(r, numel, dtype == 2, "tensor payload")?),
        1 | 3 => {
            let bits = r.u8("quantized payload")? as u32;
            if !(1..=32).contains(&bits) {
                return Err(Error::MalformedCheckpoint(format!(
                    "tensor {} stores {bits}-bit indices",
                    t.name
                )));
            }
            let grid: Vec<T> = read_values(r, 2, dtype == 3, "quantized payload")?;
            if numel / 8 > r.remaining() {
                return Err(Error::Truncated("packed indices"));
            }
            let packed = r.take(packed_len(numel, bits), "packed indices")?.to_vec();
            t.quant = Some((bits, grid[0], grid[1], packed));
        }
        other => {
            return Err(Error::MalformedCheckpoint(format!(
                "tensor {} has unknown dtype {other}",
                t.name
            )));
        }
    }
    Ok(t)
}

fn read_optimizer<T: Scalar>(s: &mut Reader) -> Result<Adam<T>> {
    let config = AdamConfig {
        beta1: s.f64("optimizer")?,
        beta2: s.f64("optimizer")?,
        eps: s.f64("optimizer")?,
        weight_decay: s.f64("optimizer")?,
    };
    let steps = s.u64("optimizer")?;
    let wide = match s.u8("optimizer")? {
        0 => false,
        2 => true,
        other => return Err(Error::MalformedCheckpoint(format!("optimizer dtype {other}"))),
    };
    let n = s.u32("optimizer")? as usize;
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let len = s.u64("optimizer")? as usize;
        m.push(read_values(s, len, wide, "optimizer moments")?);
        v.push(read_values(s, len, wide, "optimizer moments")?);
    }
    Adam::from_state(config, steps, m, v)
}

fn read_prune(s: &mut Reader) -> Result<PruneState> {
    let sparsity = s.f64("prune state")?;
    let n = s.u32("prune state")? as usize;
    let schedule = (0..n).map(|_| s.f64("prune state")).collect::<Result<Vec<_>>>()?;
    let has_ref = s.u8("prune state")? != 0;
    let reference = s.f64("prune state")?;
    let scope = match s.u8("prune state")? {
        0 => PruneScope::Global,
        1 => PruneScope::PerTensor,
        other => return Err(Error::MalformedCheckpoint(format!("prune scope {other}"))),
    };
    let count = s.u32("prune state")?;
    let mut masks = BTreeMap::new();
    for _ in 0..count {
        let name = s.name("prune mask")?;
        let len = s.u64("prune mask")? as usize;
        if len / 8 > s.remaining() {
            return Err(Error::Truncated("prune mask"));
        }
        let bytes = s.take(packed_len(len, 1), "prune mask")?;
        let bits = unpack_indices(bytes, 1, len)?;
        masks.insert(name, bits.into_iter().map(|b| b != 0).collect());
    }
    let mut state = PruneState::from_masks(masks, sparsity, schedule, scope);
    state.reference_accuracy = has_ref.then_some(reference);
    Ok(state)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, checkpoint: &Checkpoint<T>) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
