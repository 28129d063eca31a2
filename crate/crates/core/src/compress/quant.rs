//! Uniform k-bit quantization onto a per-tensor grid.
//!
//! The grid spans `[min(W), max(W)]` with `2^k` points spaced
//! `Δ = (max − min) / (2^k − 1)`. Each weight maps to the index of its
//! nearest grid point (round half to even). Grid values are computed in
//! `f64` from the stored `q0` and `Δ`; the two range endpoints are stored
//! exactly so that they survive quantization unchanged.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAX_BITS: u32 = 32;

/// Quantization precision in bits per weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantizationSpec {
    bits: u32,
}

impl QuantizationSpec {
    pub fn new(bits: u32) -> Result<Self> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(Error::InvalidBits(bits));
        }
        Ok(Self { bits })
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    /// Index of the last grid point, `2^k − 1`.
    pub fn max_index(self) -> u32 {
        if self.bits == 32 {
            u32::MAX
        } else {
            (1u32 << self.bits) - 1
        }
    }
}

/// A tensor stored as packed k-bit grid indices plus grid parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor<T> {
    shape: Vec<usize>,
    spec: QuantizationSpec,
    q0: T,
    delta: T,
    /// Value of the last grid point; equals `max(W)` for min/max grids.
    q_top: T,
    /// Grid index that decodes to exactly zero, for zero-anchored grids.
    zero_index: Option<u32>,
    packed: Vec<u8>,
}

/// Bytes needed for `n` indices of `bits` bits.
pub fn packed_len(n: usize, bits: u32) -> usize {
    (n * bits as usize).div_ceil(8)
}

/// Packs indices LSB-first: index `j` occupies stream bits
/// `[j·bits, (j+1)·bits)`, and stream bit `b` is bit `b % 8` of byte `b / 8`.
pub fn pack_indices(indices: &[u32], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(indices.len(), bits)];
    let mut pos = 0usize;
    for &idx in indices {
        let mut v = idx as u64;
        let mut remaining = bits as usize;
        while remaining > 0 {
            let byte = pos / 8;
            let offset = pos % 8;
            let take = remaining.min(8 - offset);
            out[byte] |= ((v & ((1 << take) - 1)) as u8) << offset;
            v >>= take;
            pos += take;
            remaining -= take;
        }
    }
    out
}

/// Inverse of [`pack_indices`].
pub fn unpack_indices(packed: &[u8], bits: u32, n: usize) -> Result<Vec<u32>> {
    let expected = packed_len(n, bits);
    if packed.len() != expected {
        return Err(Error::CorruptPacked {
            expected,
            actual: packed.len(),
        });
    }
    let mut out = Vec::with_capacity(n);
    let mut pos = 0usize;
    for _ in 0..n {
        let mut v = 0u64;
        let mut filled = 0usize;
        while filled < bits as usize {
            let byte = pos / 8;
            let offset = pos % 8;
            let take = (bits as usize - filled).min(8 - offset);
            let chunk = (packed[byte] >> offset) as u64 & ((1 << take) - 1);
            v |= chunk << filled;
            filled += take;
            pos += take;
        }
        out.push(v as u32);
    }
    Ok(out)
}

/// Grid value of index `i`. Anchored indices decode exactly; all others are
/// `q0 + i·Δ` evaluated in `f64`.
fn grid_value(i: u32, n: u32, q0: f64, delta: f64, q_top: f64, zero: Option<u32>) -> f64 {
    if zero == Some(i) {
        0.0
    } else if i == n {
        q_top
    } else {
        q0 + i as f64 * delta
    }
}

struct Grid {
    n: u32,
    q0: f64,
    delta: f64,
    q_top: f64,
    zero: Option<u32>,
}

impl Grid {
    fn value(&self, i: u32) -> f64 {
        grid_value(i, self.n, self.q0, self.delta, self.q_top, self.zero)
    }

    /// Nearest grid index: rounds `(w − q0) / Δ` half-to-even, then
    /// confirms against the neighbouring grid values so the result is the
    /// true arg-min over the decoded grid (ties to the even index).
    fn index(&self, w: f64) -> u32 {
        if self.delta == 0.0 {
            return 0;
        }
        let r = ((w - self.q0) / self.delta).round_ties_even();
        let guess = r.clamp(0.0, self.n as f64) as u32;
        let mut best = guess;
        let mut best_d = (w - self.value(guess)).abs();
        for c in [guess.saturating_sub(1), guess.saturating_add(1).min(self.n)] {
            let d = (w - self.value(c)).abs();
            if d < best_d || (d == best_d && c % 2 == 0 && best % 2 == 1) {
                best = c;
                best_d = d;
            }
        }
        best
    }
}

impl<T: Scalar> QuantizedTensor<T> {
    /// Quantizes `w` on the grid spanning `[min(W), max(W)]`.
    pub fn quantize(w: &Tensor<T>, spec: QuantizationSpec) -> Result<Self> {
        let (lo, hi) = finite_range(w)?;
        let n = spec.max_index();
        let delta = T::of((hi.as_f64() - lo.as_f64()) / n as f64);
        Ok(Self::encode(w, spec, lo, delta, hi, None))
    }

    /// Quantizes `w` on a grid that contains exactly `0.0`: the range is
    /// widened to include zero and shifted by less than `Δ/2` so that one
    /// grid point lands on zero. Zeros in `w` stay exactly zero. Weights near
    /// the range ends may be clamped, so the error bound is `Δ` instead of
    /// `Δ/2` at the ends.
    pub fn quantize_zero_anchored(w: &Tensor<T>, spec: QuantizationSpec) -> Result<Self> {
        let (lo, hi) = finite_range(w)?;
        let (lo, hi) = (lo.as_f64().min(0.0), hi.as_f64().max(0.0));
        let n = spec.max_index();
        let delta = T::of((hi - lo) / n as f64);
        let d = delta.as_f64();
        if d == 0.0 {
            return Ok(Self::encode(w, spec, T::zero(), delta, T::zero(), Some(0)));
        }
        let z = (-lo / d).round_ties_even().clamp(0.0, n as f64) as u32;
        let q0 = T::of(-(z as f64) * d);
        let q_top = T::of(q0.as_f64() + n as f64 * d);
        Ok(Self::encode(w, spec, q0, delta, q_top, Some(z)))
    }

    fn encode(w: &Tensor<T>, spec: QuantizationSpec, q0: T, delta: T, q_top: T, zero: Option<u32>) -> Self {
        let grid = Grid {
            n: spec.max_index(),
            q0: q0.as_f64(),
            delta: delta.as_f64(),
            q_top: q_top.as_f64(),
            zero,
        };
        let indices: Vec<u32> = w.data().iter().map(|v| grid.index(v.as_f64())).collect();
        Self {
            shape: w.shape().to_vec(),
            spec,
            q0,
            delta,
            q_top,
            zero_index: zero,
            packed: pack_indices(&indices, spec.bits()),
        }
    }

    /// Reassembles a quantized tensor from stored parts, validating the
    /// packed length and index range.
    pub fn from_parts(
        shape: Vec<usize>,
        bits: u32,
        q0: T,
        delta: T,
        q_top: T,
        zero_index: Option<u32>,
        packed: Vec<u8>,
    ) -> Result<Self> {
        let spec = QuantizationSpec::new(bits)?;
        let n: usize = shape.iter().product();
        let expected = packed_len(n, bits);
        if packed.len() != expected {
            return Err(Error::CorruptPacked {
                expected,
                actual: packed.len(),
            });
        }
        if zero_index.is_some_and(|z| z > spec.max_index()) {
            return Err(Error::InvalidArgument(format!(
                "zero index out of range for {bits} bits"
            )));
        }
        Ok(Self {
            shape,
            spec,
            q0,
            delta,
            q_top,
            zero_index,
            packed,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bits(&self) -> u32 {
        self.spec.bits()
    }

    pub fn q0(&self) -> T {
        self.q0
    }

    pub fn delta(&self) -> T {
        self.delta
    }

    pub fn q_top(&self) -> T {
        self.q_top
    }

    pub fn zero_index(&self) -> Option<u32> {
        self.zero_index
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn indices(&self) -> Result<Vec<u32>> {
        unpack_indices(&self.packed, self.bits(), self.numel())
    }

    /// Value of grid point `i`.
    pub fn grid_value(&self, i: u32) -> f64 {
        grid_value(
            i,
            self.spec.max_index(),
            self.q0.as_f64(),
            self.delta.as_f64(),
            self.q_top.as_f64(),
            self.zero_index,
        )
    }

    pub fn dequantize(&self) -> Result<Tensor<T>> {
        let data = self.indices()?.into_iter().map(|i| T::of(self.grid_value(i))).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

fn finite_range<T: Scalar>(w: &Tensor<T>) -> Result<(T, T)> {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &v in w.data() {
        if !v.is_finite() {
            return Err(Error::InvalidArgument("cannot quantize non-finite weights".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

pub fn quantize_tensor<T: Scalar>(w: &Tensor<T>, bits: u32) -> Result<QuantizedTensor<T>> {
    QuantizedTensor::quantize(w, QuantizationSpec::new(bits)?)
}

pub fn dequantize<T: Scalar>(q: &QuantizedTensor<T>) -> Result<Tensor<T>> {
    q.dequantize()
}
