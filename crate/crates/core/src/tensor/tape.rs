//! Operation tape for reverse-mode differentiation.
//!
//! A [`Tape`] records every forward operation as a node holding its output
//! value plus whatever activations the backward rule needs. Nodes are appended
//! in evaluation order, so the tape is topologically sorted by construction
//! and [`Tape::backward`] simply walks it in reverse, visiting each node once.
//!
//! Leaves borrow parameter storage instead of copying it, which keeps
//! per-sequence forward passes cheap.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Target id marking a position that does not contribute to the loss.
pub const IGNORE_INDEX: u32 = u32::MAX;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: T,
    },
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Narrow {
        x: Var,
        start: usize,
        len: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        ignore: u32,
        probs: Vec<T>,
        norm: T,
    },
}

struct Node<'a, T: Scalar> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
///
/// A tape is single-use: after [`Tape::backward`] it is consumed, although
/// forward values remain readable.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf, borrowing its data. Gradients flow to it
    /// iff the tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Var {
        self.push_borrowed(t, t.requires_grad())
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, t: &'a Tensor<T>) -> Var {
        self.push_borrowed(t, false)
    }

    /// Registers an owned leaf value.
    pub fn input(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "input",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    fn push_borrowed(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// First element of a node's value; the loss for scalar nodes.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape nodes always hold consistent shapes")
    }

    /// Sum of `2·m·k·n` over every matrix product recorded so far.
    pub fn recorded_matmul_flops(&self) -> u64 {
        self.nodes
            .iter()
            .map(|node| match node.op {
                Op::MatMul { m, k, n, .. } => 2 * (m * k * n) as u64,
                Op::BatchMatMul { batch, m, k, n, .. } => 2 * (batch * m * k * n) as u64,
                _ => 0,
            })
            .sum()
    }

    /// Matrix product. `a` may carry leading batch dimensions which are
    /// flattened into rows: `[..., k] · [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = sa[..sa.len() - 1].iter().product();
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || Error::Shape {
            op: "bmm",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for bi in 0..batch {
                let ab = &va[bi * m * k..(bi + 1) * m * k];
                let bb = &vb[bi * k * n..(bi + 1) * k * n];
                let cb = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt(ab, bb, cb, m, k, n);
                } else {
                    gemm_nn(ab, bb, cb, m, k, n);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let op = Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.push(vec![batch, m, n], out, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Adds a bias vector broadcast over the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let vb = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(vb) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(sx.to_vec(), out, Op::AddBias { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor }, rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::one() + (v * inv_sqrt2).erf()))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), rg)
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let h = *sx.last().unwrap_or(&0);
        for p in [gamma, beta] {
            if self.shape(p) != [h] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).len() / h;
        let hn = T::of(h as f64);
        let mut xhat = vec![T::zero(); rows * h];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * h];
        {
            let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
            for r in 0..rows {
                let row = &vx[r * h..(r + 1) * h];
                let mean = row.iter().copied().sum::<T>() / hn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..h {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * h + j] = xh;
                    out[r * h + j] = xh * vg[j] + vb[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(sx, out, op, rg))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap_or(&1);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(x);
        self.push(sx, out, Op::Softmax(x), rg)
    }

    /// Gathers rows of a `[V, H]` table: output `[ids.len(), H]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids.is_empty() {
            return Err(Error::Shape {
                op: "embedding",
                lhs: st,
                rhs: vec![ids.len()],
            });
        }
        let (v, h) = (st[0], st[1]);
        let mut idx = Vec::with_capacity(ids.len());
        let mut out = Vec::with_capacity(ids.len() * h);
        let vt = self.value(table);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            idx.push(id);
            out.extend_from_slice(&vt[id * h..(id + 1) * h]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), h], out, Op::Embedding { table, ids: idx }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = perm.len() == sx.len()
            && perm
                .iter()
                .all(|&p| p < sx.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Shape {
                op: "permute",
                lhs: sx,
                rhs: perm.to_vec(),
            });
        }
        let (out, shape) = permute_data(self.value(x), &sx, perm);
        let rg = self.rg(x);
        let op = Op::Permute { x, perm: perm.to_vec() };
        Ok(self.push(shape, out, op, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Slices `len` entries starting at `start` along the last axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let w = *sx.last().unwrap_or(&0);
        if len == 0 || start + len > w {
            return Err(Error::Index {
                op: "narrow",
                index: start + len,
                size: w,
            });
        }
        let mut out = Vec::with_capacity(self.value(x).len() / w * len);
        for row in self.value(x).chunks_exact(w) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Narrow { x, start, len }, rg))
    }

    /// Gathers rows of a rank-2 node.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || rows.is_empty() {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: sx,
                rhs: vec![rows.len()],
            });
        }
        let (r, c) = (sx[0], sx[1]);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index {
                    op: "select_rows",
                    index: i,
                    size: r,
                });
            }
            out.extend_from_slice(&self.value(x)[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        let op = Op::SelectRows { x, rows: rows.to_vec() };
        Ok(self.push(vec![rows.len(), c], out, op, rg))
    }

    /// Inverted dropout with a mask drawn from `seed`. `p == 0` is the
    /// identity and records nothing.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Mean cross-entropy of `logits [n, V]` against `targets`, skipping
    /// positions equal to `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: u32) -> Result<Var> {
        let count = targets.iter().filter(|&&t| t != ignore).count();
        if count == 0 {
            return Err(Error::UndefinedMean("every target is ignored"));
        }
        self.cross_entropy_normalized(logits, targets, ignore, T::of(count as f64))
    }

    /// Summed cross-entropy divided by an externally supplied `norm`. Used
    /// when one loss is split over several tapes that must share a single
    /// normalizer.
    pub fn cross_entropy_normalized(&mut self, logits: Var, targets: &[u32], ignore: u32, norm: T) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: sl,
                rhs: vec![targets.len()],
            });
        }
        let v = sl[1];
        let mut probs = vec![T::zero(); targets.len() * v];
        let mut total = T::zero();
        let vl = self.value(logits);
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t as usize >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t as usize,
                    size: v,
                });
            }
            let row = &vl[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            let pr = &mut probs[r * v..(r + 1) * v];
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in pr.iter_mut() {
                *p /= z;
            }
            total += -(row[t as usize] - max - z.ln());
        }
        let loss = total / norm;
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            ignore,
            probs,
            norm,
        };
        Ok(self.push(vec![1], vec![loss], op, rg))
    }

    /// Back-propagates from a scalar `loss`, returning gradients for every
    /// leaf that requires them. The tape can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            // Saved activations are no longer needed.
            match &mut self.nodes[i].op {
                Op::LayerNorm { xhat, rstd, .. } => {
                    *xhat = Vec::new();
                    *rstd = Vec::new();
                }
                Op::CrossEntropy { probs, .. } => *probs = Vec::new(),
                Op::Dropout { mask, .. } => *mask = Vec::new(),
                _ => {}
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    gemm_nt(g, self.value(b), slot(grads, a, m * k), m, n, k);
                }
                if self.rg(b) {
                    gemm_tn(self.value(a), g, slot(grads, b, k * n), k, m, n);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.rg(a) {
                    let da = slot(grads, a, batch * m * k);
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &vb[bi * k * n..(bi + 1) * k * n];
                        let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            gemm_nn(gb, bb, dab, m, n, k);
                        } else {
                            gemm_nt(gb, bb, dab, m, n, k);
                        }
                    }
                }
                if self.rg(b) {
                    let db = slot(grads, b, batch * k * n);
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &va[bi * m * k..(bi + 1) * m * k];
                        let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            gemm_tn(gb, ab, dbb, n, m, k);
                        } else {
                            gemm_tn(ab, gb, dbb, k, m, n);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if self.rg(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if self.rg(bias) {
                    let n = self.value(bias).len();
                    let db = slot(grads, bias, n);
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let da = slot(grads, a, g.len());
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(self.value(b)) {
                        *d += gv * bv;
                    }
                }
                if self.rg(b) {
                    let db = slot(grads, b, g.len());
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(self.value(a)) {
                        *d += gv * av;
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if self.rg(x) {
                    for (d, &gv) in slot(grads, x, g.len()).iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
            }
            &Op::Gelu(x) => {
                if self.rg(x) {
                    let half = T::of(0.5);
                    let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = T::of(0.398_942_280_401_432_7);
                    let dx = slot(grads, x, g.len());
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(self.value(x)) {
                        let cdf = half * (T::one() + (xv * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * xv * xv).exp();
                        *d += gv * (cdf + xv * pdf);
                    }
                }
            }
            &Op::Tanh(x) => {
                if self.rg(x) {
                    let y = &node.value;
                    for ((d, &gv), &yv) in slot(grads, x, g.len()).iter_mut().zip(g).zip(y.iter()) {
                        *d += gv * (T::one() - yv * yv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let h = self.value(*gamma).len();
                let hn = T::of(h as f64);
                if self.rg(*beta) {
                    let db = slot(grads, *beta, h);
                    for row in g.chunks_exact(h) {
                        add_into(db, row);
                    }
                }
                if self.rg(*gamma) {
                    let dg = slot(grads, *gamma, h);
                    for (grow, xrow) in g.chunks_exact(h).zip(xhat.chunks_exact(h)) {
                        for j in 0..h {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let vg = self.value(*gamma);
                    let dx = slot(grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); h];
                    for (r, (grow, xrow)) in g.chunks_exact(h).zip(xhat.chunks_exact(h)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..h {
                            dxhat[j] = grow[j] * vg[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xrow[j];
                        }
                        mean_d /= hn;
                        mean_dx /= hn;
                        let drow = &mut dx[r * h..(r + 1) * h];
                        for j in 0..h {
                            drow[j] += rstd[r] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                if self.rg(x) {
                    let n = *node.shape.last().unwrap();
                    let y = &node.value;
                    let dx = slot(grads, x, g.len());
                    for ((drow, grow), yrow) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let h = self.shape(*table)[1];
                    let len = self.value(*table).len();
                    let dt = slot(grads, *table, len);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * h..(id + 1) * h], &g[r * h..(r + 1) * h]);
                    }
                }
            }
            &Op::Reshape(x) => {
                if self.rg(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
            }
            Op::Permute { x, perm } => {
                if self.rg(*x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (back, _) = permute_data(g, &node.shape, &inverse);
                    add_into(slot(grads, *x, g.len()), &back);
                }
            }
            &Op::Narrow { x, start, len } => {
                if self.rg(x) {
                    let w = *self.shape(x).last().unwrap();
                    let total = self.value(x).len();
                    let dx = slot(grads, x, total);
                    for (drow, grow) in dx.chunks_exact_mut(w).zip(g.chunks_exact(len)) {
                        add_into(&mut drow[start..start + len], grow);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if self.rg(*x) {
                    let c = self.shape(*x)[1];
                    let total = self.value(*x).len();
                    let dx = slot(grads, *x, total);
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.rg(*x) {
                    for ((d, &gv), &m) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            &Op::Sum(x) => {
                if self.rg(x) {
                    let n = self.value(x).len();
                    for d in slot(grads, x, n).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                norm,
            } => {
                if self.rg(*logits) {
                    let v = self.shape(*logits)[1];
                    let scale = g[0] / *norm;
                    let dl = slot(grads, *logits, targets.len() * v);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let pr = &probs[r * v..(r + 1) * v];
                        let drow = &mut dl[r * v..(r + 1) * v];
                        for j in 0..v {
                            drow[j] += scale * pr[j];
                        }
                        drow[t as usize] -= scale;
                    }
                }
            }
        }
    }
}

/// Returns the gradient buffer for `v`, allocating zeros on first touch.
fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for axis in (0..rank).rev() {
            counter[axis] += 1;
            offset += src_strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * out_shape[axis];
            counter[axis] = 0;
        }
    }
    (out, out_shape)
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Adds the gradient of `v` (if any) into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}
