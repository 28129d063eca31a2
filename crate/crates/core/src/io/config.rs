//! Plain-text `key = value` configuration.
//!
//! One assignment per line; blank lines and lines starting with `#` are
//! ignored. Unknown or repeated keys are errors reported with their line.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::compress::{PruneScope, PRUNE_SCHEDULE};
use crate::data::{LabelRule, TokenScheme};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ShareMode};
use crate::train::{batch_lr_lookup, AdamConfig, Clock, FinetuneConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyValue {
    pub line: usize,
    pub key: String,
    pub value: String,
}

fn config_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<KeyValue>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((k, v)) = trimmed.split_once('=') else {
            return Err(config_error(
                path,
                line,
                format!("expected `key = value`, got `{trimmed}`"),
            ));
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(config_error(path, line, "empty key"));
        }
        if !seen.insert(key.clone()) {
            return Err(config_error(path, line, format!("duplicate key `{key}`")));
        }
        out.push(KeyValue {
            line,
            key,
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

fn value<V: FromStr>(kv: &KeyValue, path: &Path) -> Result<V>
where
    V::Err: Display,
{
    kv.value
        .parse()
        .map_err(|e| config_error(path, kv.line, format!("bad value `{}` for `{}`: {e}", kv.value, kv.key)))
}

fn list<V: FromStr>(kv: &KeyValue, path: &Path) -> Result<Vec<V>>
where
    V::Err: Display,
{
    kv.value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|e| config_error(path, kv.line, format!("bad list item `{s}` for `{}`: {e}", kv.key)))
        })
        .collect()
}

/// `none` or a number.
fn optional<V: FromStr>(kv: &KeyValue, path: &Path) -> Result<Option<V>>
where
    V::Err: Display,
{
    if kv.value == "none" {
        Ok(None)
    } else {
        value(kv, path).map(Some)
    }
}

/// Parses `LxH`, `L{L}-H{H}` style grid entries.
pub fn parse_grid_entry(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("grid entry `{s}` is not of the form LxH or L<l>-H<h>"));
    let t = s.trim();
    let (l, h) = if let Some(rest) = t.strip_prefix('L') {
        rest.split_once("-H").ok_or_else(bad)?
    } else {
        t.split_once('x').ok_or_else(bad)?
    };
    Ok((
        l.trim().parse().map_err(|_| bad())?,
        h.trim().parse().map_err(|_| bad())?,
    ))
}

pub fn model_config_to_text(c: &ModelConfig) -> String {
    format!(
        "num_layers={}\nhidden_size={}\nnum_heads={}\nffn_size={}\nvocab_size={}\nmax_seq_len={}\nshare_mode={}\nnum_classes={}\ndropout={}\nseed={}\n",
        c.num_layers,
        c.hidden_size,
        c.num_heads,
        c.ffn_size,
        c.vocab_size,
        c.max_seq_len,
        c.share_mode.as_str(),
        c.num_classes,
        c.dropout,
        c.seed
    )
}

pub fn model_config_from_text(text: &str, path: &Path) -> Result<ModelConfig> {
    let mut c = ModelConfig::new(0, 0, 0);
    let mut required: BTreeSet<&str> = [
        "num_layers",
        "hidden_size",
        "num_heads",
        "ffn_size",
        "vocab_size",
        "max_seq_len",
        "share_mode",
        "num_classes",
        "dropout",
        "seed",
    ]
    .into_iter()
    .collect();
    for kv in parse_key_values(text, path)? {
        match kv.key.as_str() {
            "num_layers" => c.num_layers = value(&kv, path)?,
            "hidden_size" => c.hidden_size = value(&kv, path)?,
            "num_heads" => c.num_heads = value(&kv, path)?,
            "ffn_size" => c.ffn_size = value(&kv, path)?,
            "vocab_size" => c.vocab_size = value(&kv, path)?,
            "max_seq_len" => c.max_seq_len = value(&kv, path)?,
            "share_mode" => c.share_mode = value(&kv, path)?,
            "num_classes" => c.num_classes = value(&kv, path)?,
            "dropout" => c.dropout = value(&kv, path)?,
            "seed" => c.seed = value(&kv, path)?,
            other => return Err(config_error(path, kv.line, format!("unknown key `{other}`"))),
        }
        required.remove(kv.key.as_str());
    }
    if let Some(missing) = required.first() {
        return Err(config_error(path, 0, format!("missing key `{missing}`")));
    }
    Ok(c)
}

/// Floating point precision of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidArgument(format!("unknown precision `{other}`"))),
        }
    }
}

/// Stop condition for pretraining.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Steps,
    Seconds(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamConfig {
    pub rule: LabelRule,
    pub size: usize,
    /// Content tokens per example (CLS excluded).
    pub seq_len: usize,
    pub finetune: FinetuneConfig,
}

/// Everything a CLI run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `(layers, hidden)` pairs.
    pub grid: Vec<(usize, usize)>,
    /// `None` picks the default head count for each hidden size.
    pub num_heads: Option<usize>,
    pub ffn_multiplier: usize,
    pub share_mode: ShareMode,
    pub dropout: f64,
    pub precision: Precision,
    /// `None` generates a synthetic corpus of `synthetic_bytes`.
    pub data_path: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub scheme: TokenScheme,
    pub vocab_cap: usize,
    pub subsample: f64,
    /// `peak_lr` is resolved from the batch-size table when `auto_lr`.
    pub train: TrainConfig,
    pub auto_lr: bool,
    pub budget: Budget,
    pub bits: Vec<u32>,
    pub sparsity: Vec<f64>,
    pub prune_scope: PruneScope,
    pub recovery_epochs: f64,
    pub downstream: DownstreamConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: vec![(2, 64)],
            num_heads: None,
            ffn_multiplier: 4,
            share_mode: ShareMode::None,
            dropout: 0.1,
            precision: Precision::F32,
            data_path: None,
            synthetic_bytes: 1 << 20,
            scheme: TokenScheme::Char,
            vocab_cap: 256,
            subsample: 1.0,
            train: TrainConfig {
                seq_len: 64,
                ..TrainConfig::default()
            },
            auto_lr: false,
            budget: Budget::Steps,
            bits: vec![4, 6, 8, 32],
            sparsity: std::iter::once(0.0).chain(PRUNE_SCHEDULE).collect(),
            prune_scope: PruneScope::Global,
            recovery_epochs: 1.0,
            downstream: DownstreamConfig {
                rule: LabelRule::MajorityToken,
                size: 2000,
                seq_len: 32,
                finetune: FinetuneConfig::default(),
            },
            output_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = Self::default();
        let mut micro_set = false;
        for kv in parse_key_values(text, path)? {
            let p = path;
            match kv.key.as_str() {
                "seed" => c.seed = value(&kv, p)?,
                "output.dir" => c.output_dir = PathBuf::from(&kv.value),
                "model.grid" => {
                    c.grid = list::<String>(&kv, p)?
                        .iter()
                        .map(|s| parse_grid_entry(s).map_err(|e| config_error(p, kv.line, e.to_string())))
                        .collect::<Result<_>>()?
                }
                "model.heads" => c.num_heads = if kv.value == "auto" { None } else { Some(value(&kv, p)?) },
                "model.ffn_multiplier" => c.ffn_multiplier = value(&kv, p)?,
                "model.share_mode" => c.share_mode = value(&kv, p)?,
                "model.dropout" => c.dropout = value(&kv, p)?,
                "model.precision" => c.precision = value(&kv, p)?,
                "data.path" => c.data_path = Some(PathBuf::from(&kv.value)),
                "data.synthetic_bytes" => c.synthetic_bytes = value(&kv, p)?,
                "data.scheme" => c.scheme = value(&kv, p)?,
                "data.vocab_cap" => c.vocab_cap = value(&kv, p)?,
                "data.subsample" => c.subsample = value(&kv, p)?,
                "train.peak_lr" => {
                    c.auto_lr = kv.value == "auto";
                    if !c.auto_lr {
                        c.train.peak_lr = value(&kv, p)?;
                    }
                }
                "train.batch_size" => c.train.batch_size = value(&kv, p)?,
                "train.micro_batch" => {
                    c.train.micro_batch = value(&kv, p)?;
                    micro_set = true;
                }
                "train.seq_len" => c.train.seq_len = value(&kv, p)?,
                "train.mask_rate" => c.train.mask_rate = value(&kv, p)?,
                "train.warmup_steps" => c.train.warmup_steps = value(&kv, p)?,
                "train.total_steps" => c.train.total_steps = value(&kv, p)?,
                "train.eval_interval" => c.train.eval_interval = value(&kv, p)?,
                "train.eval_batch" => c.train.eval_batch = value(&kv, p)?,
                "train.grad_clip" => c.train.grad_clip_norm = optional(&kv, p)?,
                "train.weight_decay" => c.train.adam.weight_decay = value(&kv, p)?,
                "budget.mode" => {
                    c.budget = match kv.value.as_str() {
                        "steps" => Budget::Steps,
                        "seconds" => Budget::Seconds(match c.budget {
                            Budget::Seconds(s) => s,
                            Budget::Steps => 60.0,
                        }),
                        other => return Err(config_error(p, kv.line, format!("unknown budget mode `{other}`"))),
                    }
                }
                "budget.seconds" => c.budget = Budget::Seconds(value(&kv, p)?),
                "budget.clock" => {
                    c.train.clock = match kv.value.as_str() {
                        "wall" => Clock::Wall,
                        "simulated" => Clock::Simulated {
                            flops_per_second: match c.train.clock {
                                Clock::Simulated { flops_per_second } => flops_per_second,
                                Clock::Wall => 1e9,
                            },
                        },
                        other => return Err(config_error(p, kv.line, format!("unknown clock `{other}`"))),
                    }
                }
                "budget.flops_per_second" => {
                    c.train.clock = Clock::Simulated {
                        flops_per_second: value(&kv, p)?,
                    }
                }
                "compress.bits" => c.bits = list(&kv, p)?,
                "compress.sparsity" => c.sparsity = list(&kv, p)?,
                "compress.scope" => c.prune_scope = value(&kv, p)?,
                "compress.recovery_epochs" => c.recovery_epochs = value(&kv, p)?,
                "downstream.rule" => c.downstream.rule = value(&kv, p)?,
                "downstream.size" => c.downstream.size = value(&kv, p)?,
                "downstream.seq_len" => c.downstream.seq_len = value(&kv, p)?,
                "downstream.lr" => c.downstream.finetune.lr = value(&kv, p)?,
                "downstream.batch_size" => c.downstream.finetune.batch_size = value(&kv, p)?,
                "downstream.epochs" => c.downstream.finetune.epochs = value(&kv, p)?,
                other => return Err(config_error(p, kv.line, format!("unknown key `{other}`"))),
            }
        }
        if !micro_set {
            c.train.micro_batch = c.train.batch_size;
        }
        if c.auto_lr {
            c.train.peak_lr = batch_lr_lookup(c.train.batch_size)?;
        }
        c.train.seed = c.seed;
        c.downstream.finetune.seed = c.seed;
        c.train.time_budget_seconds = match c.budget {
            Budget::Steps => None,
            Budget::Seconds(s) => Some(s),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.grid.is_empty() {
            return bad("model.grid is empty".into());
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad(format!("data.subsample {} outside (0, 1]", self.subsample));
        }
        if let Some(b) = self.bits.iter().find(|&&b| !(1..=32).contains(&b)) {
            return bad(format!("compress.bits entry {b} outside 1..=32"));
        }
        if let Some(s) = self.sparsity.iter().find(|&&s| !(0.0..1.0).contains(&s)) {
            return bad(format!("compress.sparsity entry {s} outside [0, 1)"));
        }
        self.train.validate()?;
        for c in self.model_configs(self.vocab_cap) {
            c.validate()?;
        }
        Ok(())
    }

    /// Model configs for every grid entry at the given vocabulary size.
    pub fn model_configs(&self, vocab_size: usize) -> Vec<ModelConfig> {
        self.grid
            .iter()
            .map(|&(l, h)| {
                let mut c = ModelConfig::new(l, h, vocab_size);
                if let Some(n) = self.num_heads {
                    c.num_heads = n;
                }
                c.ffn_size = self.ffn_multiplier * h;
                c.share_mode = self.share_mode;
                c.dropout = self.dropout;
                c.max_seq_len = self.train.seq_len.max(self.downstream.seq_len + 1);
                c.seed = self.seed;
                c
            })
            .collect()
    }

    /// Recovery settings for iterative pruning.
    pub fn recovery(&self) -> crate::compress::RecoveryConfig {
        crate::compress::RecoveryConfig {
            finetune: self.downstream.finetune.clone(),
            max_epochs: self.recovery_epochs,
            ..Default::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        self.train.adam
    }
}
