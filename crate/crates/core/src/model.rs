//! Pre-norm Transformer encoder with a masked-LM head and a classification
//! head.
//!
//! Parameters live in a flat, ordered list of named tensors. The forward pass
//! binds every parameter to a tape leaf and records the computation, so the
//! same code path serves evaluation, training, and gradient checks.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var, IGNORE_INDEX};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Which encoder parameters are shared across layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ShareMode {
    #[default]
    None,
    AllLayers,
    AttentionOnly,
}

impl ShareMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ShareMode::None => "none",
            ShareMode::AllLayers => "all_layers",
            ShareMode::AttentionOnly => "attention_only",
        }
    }
}

impl FromStr for ShareMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ShareMode::None),
            "all_layers" | "all" => Ok(ShareMode::AllLayers),
            "attention_only" | "attention" => Ok(ShareMode::AttentionOnly),
            other => Err(Error::InvalidConfig(format!("unknown share mode `{other}`"))),
        }
    }
}

/// Coarse module taxonomy used for parameter accounting and per-module
/// compression error statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleGroup {
    Embedding,
    AttnInProj,
    AttnOutProj,
    FfnUp,
    FfnDown,
    LayerNorm,
    MlmHead,
    ClsHead,
    Bias,
}

impl ModuleGroup {
    pub const ALL: [ModuleGroup; 9] = [
        ModuleGroup::Embedding,
        ModuleGroup::AttnInProj,
        ModuleGroup::AttnOutProj,
        ModuleGroup::FfnUp,
        ModuleGroup::FfnDown,
        ModuleGroup::LayerNorm,
        ModuleGroup::MlmHead,
        ModuleGroup::ClsHead,
        ModuleGroup::Bias,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleGroup::Embedding => "embedding",
            ModuleGroup::AttnInProj => "attn_in_proj",
            ModuleGroup::AttnOutProj => "attn_out_proj",
            ModuleGroup::FfnUp => "ffn_up",
            ModuleGroup::FfnDown => "ffn_down",
            ModuleGroup::LayerNorm => "layer_norm",
            ModuleGroup::MlmHead => "mlm_head",
            ModuleGroup::ClsHead => "cls_head",
            ModuleGroup::Bias => "bias",
        }
    }
}

impl fmt::Display for ModuleGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModuleGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::UnknownGroup(s.to_string()))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub share_mode: ShareMode,
    pub num_classes: usize,
    /// Dropout probability applied in [`Mode::Train`].
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Config with conventional defaults: FFN of 4H, heads of width 16 (at
    /// most 4 heads), sequence length 64, two classes, dropout 0.1.
    pub fn new(num_layers: usize, hidden_size: usize, vocab_size: usize) -> Self {
        let num_heads = if hidden_size.is_multiple_of(4) && hidden_size >= 64 {
            4
        } else if hidden_size.is_multiple_of(2) && hidden_size >= 32 {
            2
        } else {
            1
        };
        Self {
            num_layers,
            hidden_size,
            num_heads,
            ffn_size: 4 * hidden_size,
            vocab_size,
            max_seq_len: 64,
            share_mode: ShareMode::None,
            num_classes: 2,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.hidden_size == 0 || self.num_heads == 0 || self.ffn_size == 0 {
            return bad("hidden_size, num_heads and ffn_size must be positive".into());
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            ));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.num_classes == 0 {
            return bad("vocab_size, max_seq_len and num_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Grid label, e.g. `L4-H128`.
    pub fn label(&self) -> String {
        format!("L{}-H{}", self.num_layers, self.hidden_size)
    }

    /// Whether `other` instantiates the same parameter names and shapes.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.num_layers == other.num_layers
            && self.hidden_size == other.hidden_size
            && self.num_heads == other.num_heads
            && self.ffn_size == other.ffn_size
            && self.vocab_size == other.vocab_size
            && self.max_seq_len == other.max_seq_len
            && self.share_mode == other.share_mode
            && self.num_classes == other.num_classes
    }
}

/// Forward-pass behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks derive from `seed`.
    Train {
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ModuleGroup,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    attn_ln: (usize, usize),
    in_proj: (usize, usize),
    out_proj: (usize, usize),
    ffn_ln: (usize, usize),
    up: (usize, usize),
    down: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    token: usize,
    position: usize,
    layers: Vec<LayerIds>,
    final_ln: (usize, usize),
    mlm_dense: (usize, usize),
    mlm_ln: (usize, usize),
    mlm_out_bias: usize,
    pooler: (usize, usize),
    classifier: (usize, usize),
}

/// A model instance: config plus its named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<T> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
    layout: Layout,
}

/// Loss and logits of a masked-LM forward pass.
#[derive(Clone, Debug)]
pub struct MlmOutput<T> {
    pub loss: T,
    /// `[batch·seq, vocab]`
    pub logits: Tensor<T>,
}

/// Per-parameter gradients aligned with [`TransformerModel::parameters`].
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, index: usize) -> Option<&[T]> {
        self.grads.get(index).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

struct ParamBuilder<T> {
    params: Vec<Parameter<T>>,
    seed: u64,
}

impl<T: Scalar> ParamBuilder<T> {
    fn add(&mut self, name: String, group: ModuleGroup, shape: &[usize], init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal => truncated_normal(n, name_seed(self.seed, &name)),
        };
        let tensor = Tensor::new(shape.to_vec(), data)
            .expect("parameter shapes are positive")
            .with_requires_grad(true);
        self.params.push(Parameter { name, group, tensor });
        self.params.len() - 1
    }

    fn linear(&mut self, prefix: &str, group: ModuleGroup, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.weight"), group, &[fan_in, fan_out], Init::Normal);
        let b = self.add(format!("{prefix}.bias"), ModuleGroup::Bias, &[fan_out], Init::Zeros);
        (w, b)
    }

    fn layer_norm(&mut self, prefix: &str, h: usize) -> (usize, usize) {
        let g = self.add(format!("{prefix}.weight"), ModuleGroup::LayerNorm, &[h], Init::Ones);
        let b = self.add(format!("{prefix}.bias"), ModuleGroup::LayerNorm, &[h], Init::Zeros);
        (g, b)
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal,
}

/// Stable per-parameter seed so that parameters with the same name get the
/// same initial values regardless of model depth.
fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn truncated_normal<T: Scalar>(n: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(&mut rng);
            if v.abs() <= 2.0 * INIT_STD {
                break T::of(v);
            }
        })
        .collect()
}

struct Encoded {
    hidden: Var,
    attention: Vec<Var>,
}

impl<T: Scalar> TransformerModel<T> {
    /// Builds and initializes a model: truncated-normal weights (std 0.02),
    /// zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (h, f, v) = (config.hidden_size, config.ffn_size, config.vocab_size);
        let mut b = ParamBuilder {
            params: Vec::new(),
            seed: config.seed,
        };
        let token = b.add(
            "embeddings.token.weight".into(),
            ModuleGroup::Embedding,
            &[v, h],
            Init::Normal,
        );
        let position = b.add(
            "embeddings.position.weight".into(),
            ModuleGroup::Embedding,
            &[config.max_seq_len, h],
            Init::Normal,
        );

        let attention = |b: &mut ParamBuilder<T>, p: &str| {
            (
                b.layer_norm(&format!("{p}.attn.layer_norm"), h),
                b.linear(&format!("{p}.attn.in_proj"), ModuleGroup::AttnInProj, h, 3 * h),
                b.linear(&format!("{p}.attn.out_proj"), ModuleGroup::AttnOutProj, h, h),
            )
        };
        let ffn = |b: &mut ParamBuilder<T>, p: &str| {
            (
                b.layer_norm(&format!("{p}.ffn.layer_norm"), h),
                b.linear(&format!("{p}.ffn.up"), ModuleGroup::FfnUp, h, f),
                b.linear(&format!("{p}.ffn.down"), ModuleGroup::FfnDown, f, h),
            )
        };

        let mut layers = Vec::with_capacity(config.num_layers);
        if config.num_layers > 0 {
            let shared_attn = match config.share_mode {
                ShareMode::None => None,
                _ => Some(attention(&mut b, "layer.shared")),
            };
            let shared_ffn = match config.share_mode {
                ShareMode::AllLayers => Some(ffn(&mut b, "layer.shared")),
                _ => None,
            };
            for i in 0..config.num_layers {
                let prefix = format!("layer.{i}");
                let (attn_ln, in_proj, out_proj) = match shared_attn {
                    Some(ids) => ids,
                    None => attention(&mut b, &prefix),
                };
                let (ffn_ln, up, down) = match shared_ffn {
                    Some(ids) => ids,
                    None => ffn(&mut b, &prefix),
                };
                layers.push(LayerIds {
                    attn_ln,
                    in_proj,
                    out_proj,
                    ffn_ln,
                    up,
                    down,
                });
            }
        }

        let final_ln = b.layer_norm("final_layer_norm", h);
        let mlm_dense = b.linear("mlm_head.dense", ModuleGroup::MlmHead, h, h);
        let mlm_ln = b.layer_norm("mlm_head.layer_norm", h);
        let mlm_out_bias = b.add("mlm_head.output.bias".into(), ModuleGroup::Bias, &[v], Init::Zeros);
        let pooler = b.linear("cls_head.pooler", ModuleGroup::ClsHead, h, h);
        let classifier = b.linear("cls_head.classifier", ModuleGroup::ClsHead, h, config.num_classes);

        Ok(Self {
            config,
            params: b.params,
            layout: Layout {
                token,
                position,
                layers,
                final_ln,
                mlm_dense,
                mlm_ln,
                mlm_out_bias,
                pooler,
                classifier,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Element count over parameters in `groups`. Shared and tied tensors
    /// are stored once and counted once.
    pub fn parameter_count(&self, groups: &[ModuleGroup]) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Like [`parameter_count`](Self::parameter_count) but takes group labels.
    pub fn parameter_count_by_label(&self, labels: &[&str]) -> Result<usize> {
        let groups = labels.iter().map(|l| l.parse()).collect::<Result<Vec<ModuleGroup>>>()?;
        Ok(self.parameter_count(&groups))
    }

    pub fn total_parameters(&self) -> usize {
        self.parameter_count(&ModuleGroup::ALL)
    }

    /// Element count of the encoder stack (everything under `layer.`).
    pub fn encoder_parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("layer."))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Storage cost in bits: Σ over tensors of `numel · bits + overhead`.
    pub fn memory_footprint(&self, bits_per_param: u64, overhead_per_tensor_bits: u64) -> u64 {
        self.params
            .iter()
            .map(|p| p.tensor.numel() as u64 * bits_per_param + overhead_per_tensor_bits)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Enables gradients only for parameters accepted by `trainable`.
    pub fn set_trainable(&mut self, trainable: impl Fn(&Parameter<T>) -> bool) {
        for i in 0..self.params.len() {
            let on = trainable(&self.params[i]);
            let t = &mut self.params[i].tensor;
            t.set_requires_grad(on);
            if !on {
                t.clear_grad();
            }
        }
    }

    /// Adds per-parameter gradients into each parameter's `grad`.
    pub fn accumulate(&mut self, grads: &ParamGrads<T>) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::ModelMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Binds every parameter to a leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.tensor)).collect()
    }

    fn check_tokens(&self, tokens: &[u32], batch: usize) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::InvalidArgument(format!(
                "{} tokens do not form {batch} equal sequences",
                tokens.len()
            )));
        }
        let seq = tokens.len() / batch;
        if seq > self.config.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Index {
                op: "tokens",
                index: bad as usize,
                size: self.config.vocab_size,
            });
        }
        Ok(seq)
    }

    fn encode<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        vars: &[Var],
        tokens: &[u32],
        batch: usize,
        mode: Mode,
    ) -> Result<Encoded> {
        let seq = self.check_tokens(tokens, batch)?;
        let cfg = &self.config;
        let (h, nh, dh) = (cfg.hidden_size, cfg.num_heads, cfg.head_dim());
        let l = &self.layout;
        let (p_drop, seed) = match mode {
            Mode::Eval => (0.0, 0),
            Mode::Train { seed } => (cfg.dropout, seed),
        };
        let mut site = 0u64;
        let mut drop = |tape: &mut Tape<'a, T>, x: Var| {
            site += 1;
            tape.dropout(x, p_drop, seed ^ site.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        };

        let tok = tape.embedding(vars[l.token], tokens)?;
        let pos_ids: Vec<u32> = (0..batch).flat_map(|_| 0..seq as u32).collect();
        let pos = tape.embedding(vars[l.position], &pos_ids)?;
        let mut x = tape.add(tok, pos)?;
        x = drop(tape, x);

        let split = |tape: &mut Tape<'a, T>, v: Var| -> Result<Var> {
            if nh == 1 {
                return tape.reshape(v, &[batch, seq, dh]);
            }
            let v = tape.reshape(v, &[batch, seq, nh, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            tape.reshape(v, &[batch * nh, seq, dh])
        };
        let scale = T::of(1.0 / (dh as f64).sqrt());

        let mut attention = Vec::with_capacity(l.layers.len());
        for layer in &l.layers {
            let a = tape.layer_norm(x, vars[layer.attn_ln.0], vars[layer.attn_ln.1], T::of(LAYER_NORM_EPS))?;
            let qkv = tape.matmul(a, vars[layer.in_proj.0])?;
            let qkv = tape.add_bias(qkv, vars[layer.in_proj.1])?;
            let q = tape.narrow(qkv, 0, h)?;
            let k = tape.narrow(qkv, h, h)?;
            let v = tape.narrow(qkv, 2 * h, h)?;
            let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax(scores);
            attention.push(probs);
            let ctx = tape.bmm(probs, v, false)?;
            let ctx = if nh == 1 {
                tape.reshape(ctx, &[batch * seq, h])?
            } else {
                let c = tape.reshape(ctx, &[batch, nh, seq, dh])?;
                let c = tape.permute(c, &[0, 2, 1, 3])?;
                tape.reshape(c, &[batch * seq, h])?
            };
            let o = tape.matmul(ctx, vars[layer.out_proj.0])?;
            let o = tape.add_bias(o, vars[layer.out_proj.1])?;
            let o = drop(tape, o);
            x = tape.add(x, o)?;

            let f = tape.layer_norm(x, vars[layer.ffn_ln.0], vars[layer.ffn_ln.1], T::of(LAYER_NORM_EPS))?;
            let f = tape.matmul(f, vars[layer.up.0])?;
            let f = tape.add_bias(f, vars[layer.up.1])?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, vars[layer.down.0])?;
            let f = tape.add_bias(f, vars[layer.down.1])?;
            let f = drop(tape, f);
            x = tape.add(x, f)?;
        }
        let hidden = tape.layer_norm(x, vars[l.final_ln.0], vars[l.final_ln.1], T::of(LAYER_NORM_EPS))?;
        Ok(Encoded { hidden, attention })
    }

    fn mlm_logits<'a>(&'a self, tape: &mut Tape<'a, T>, vars: &[Var], hidden: Var) -> Result<Var> {
        let l = &self.layout;
        let t = tape.matmul(hidden, vars[l.mlm_dense.0])?;
        let t = tape.add_bias(t, vars[l.mlm_dense.1])?;
        let t = tape.gelu(t);
        let t = tape.layer_norm(t, vars[l.mlm_ln.0], vars[l.mlm_ln.1], T::of(LAYER_NORM_EPS))?;
        // Output projection is tied to the token embedding.
        let emb_t = tape.transpose(vars[l.token])?;
        let logits = tape.matmul(t, emb_t)?;
        tape.add_bias(logits, vars[l.mlm_out_bias])
    }

    /// Records the masked-LM loss on `tape`. With `norm = None` the loss is
    /// the mean over masked positions; otherwise the masked sum divided by
    /// `norm`, which lets one batch be split across several tapes.
    #[allow(clippy::too_many_arguments)]
    pub fn record_mlm<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        vars: &[Var],
        tokens: &[u32],
        targets: &[u32],
        batch: usize,
        mode: Mode,
        norm: Option<T>,
    ) -> Result<(Var, Var)> {
        if targets.len() != tokens.len() {
            return Err(Error::Shape {
                op: "forward_mlm",
                lhs: vec![tokens.len()],
                rhs: vec![targets.len()],
            });
        }
        let enc = self.encode(tape, vars, tokens, batch, mode)?;
        let logits = self.mlm_logits(tape, vars, enc.hidden)?;
        let loss = match norm {
            None => tape.cross_entropy(logits, targets, IGNORE_INDEX)?,
            Some(n) => tape.cross_entropy_normalized(logits, targets, IGNORE_INDEX, n)?,
        };
        Ok((loss, logits))
    }

    /// Mean cross-entropy over masked positions, plus all-position logits.
    pub fn forward_mlm(&self, tokens: &[u32], targets: &[u32], batch: usize, mode: Mode) -> Result<MlmOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let (loss, logits) = self.record_mlm(&mut tape, &vars, tokens, targets, batch, mode, None)?;
        Ok(MlmOutput {
            loss: tape.scalar(loss),
            logits: tape.to_tensor(logits),
        })
    }

    /// Records classification logits `[batch, num_classes]` pooled from the
    /// first position through a tanh pooler.
    pub fn record_classify<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        vars: &[Var],
        tokens: &[u32],
        batch: usize,
        mode: Mode,
    ) -> Result<Var> {
        let enc = self.encode(tape, vars, tokens, batch, mode)?;
        let seq = tokens.len() / batch;
        let l = &self.layout;
        let rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let pooled = tape.select_rows(enc.hidden, &rows)?;
        let pooled = tape.matmul(pooled, vars[l.pooler.0])?;
        let pooled = tape.add_bias(pooled, vars[l.pooler.1])?;
        let pooled = tape.tanh(pooled);
        let pooled = match mode {
            Mode::Eval => pooled,
            Mode::Train { seed } => tape.dropout(pooled, self.config.dropout, seed ^ 0x5eed),
        };
        let logits = tape.matmul(pooled, vars[l.classifier.0])?;
        tape.add_bias(logits, vars[l.classifier.1])
    }

    pub fn forward_classify(&self, tokens: &[u32], batch: usize, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let logits = self.record_classify(&mut tape, &vars, tokens, batch, mode)?;
        Ok(tape.to_tensor(logits))
    }

    fn collect_grads(&self, tape: &mut Tape<'_, T>, vars: &[Var], loss: Var) -> Result<ParamGrads<T>> {
        let mut g = tape.backward(loss)?;
        Ok(ParamGrads {
            grads: vars.iter().map(|&v| g.take(v)).collect(),
        })
    }

    /// Masked-LM loss and parameter gradients. See [`record_mlm`](Self::record_mlm)
    /// for the meaning of `norm`.
    pub fn mlm_gradients(
        &self,
        tokens: &[u32],
        targets: &[u32],
        batch: usize,
        mode: Mode,
        norm: Option<T>,
    ) -> Result<(T, ParamGrads<T>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let (loss, _) = self.record_mlm(&mut tape, &vars, tokens, targets, batch, mode, norm)?;
        let value = tape.scalar(loss);
        Ok((value, self.collect_grads(&mut tape, &vars, loss)?))
    }

    /// Classification cross-entropy (summed, divided by `norm`) and gradients.
    pub fn classify_gradients(
        &self,
        tokens: &[u32],
        labels: &[u32],
        batch: usize,
        mode: Mode,
        norm: T,
    ) -> Result<(T, ParamGrads<T>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let logits = self.record_classify(&mut tape, &vars, tokens, batch, mode)?;
        let loss = tape.cross_entropy_normalized(logits, labels, IGNORE_INDEX, norm)?;
        let value = tape.scalar(loss);
        Ok((value, self.collect_grads(&mut tape, &vars, loss)?))
    }

    /// Attention probabilities `[batch·heads, seq, seq]` for every layer
    /// (evaluation mode).
    pub fn attention_maps(&self, tokens: &[u32], batch: usize) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let enc = self.encode(&mut tape, &vars, tokens, batch, Mode::Eval)?;
        Ok(enc.attention.iter().map(|&v| tape.to_tensor(v)).collect())
    }

    /// Matrix-product FLOPs actually recorded by one masked-LM forward pass
    /// over `batch` sequences of length `seq`.
    pub fn traced_forward_flops(&self, batch: usize, seq: usize) -> Result<u64> {
        let tokens = vec![0u32; batch * seq];
        let mut targets = vec![IGNORE_INDEX; batch * seq];
        targets[0] = 0;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        self.record_mlm(&mut tape, &vars, &tokens, &targets, batch, Mode::Eval, None)?;
        Ok(tape.recorded_matmul_flops())
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    group: p.group,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Replaces parameter values by name. Every parameter must be provided
    /// exactly once with a matching shape.
    pub fn load_parameters(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::ModelMismatch(format!(
                "{} tensors for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        let mut seen = vec![false; self.params.len()];
        for (name, t) in values {
            let i = self
                .parameter_index(&name)
                .ok_or_else(|| Error::ModelMismatch(format!("unknown parameter `{name}`")))?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::ModelMismatch(format!("duplicate parameter `{name}`")));
            }
            let p = &mut self.params[i].tensor;
            if p.shape() != t.shape() {
                return Err(Error::ModelMismatch(format!(
                    "`{name}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
