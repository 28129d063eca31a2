use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tltc_core::data::{synthetic_text, Corpus};
use tltc_core::io::{parse_grid_entry, ExperimentConfig};
use tltc_core::ModelConfig;

use crate::args::Common;

/// Caps the worker pool at `TLTC_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TLTC_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("TLTC_THREADS={v} is not a thread count"))?;
        if n == 0 {
            bail!("TLTC_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// Config from `--config` (or defaults) with command-line overrides.
pub fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.downstream.finetune.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if !common.grid.is_empty() {
        let wanted = common
            .grid
            .iter()
            .map(|g| parse_grid_entry(g))
            .collect::<tltc_core::Result<Vec<_>>>()?;
        if let Some(missing) = wanted.iter().find(|w| !cfg.grid.contains(w)) {
            bail!(
                "--grid entry L{}-H{} is not in the configured grid",
                missing.0,
                missing.1
            );
        }
        cfg.grid.retain(|g| wanted.contains(g));
    }
    Ok(cfg)
}

pub fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let corpus = match &cfg.data_path {
        Some(p) => Corpus::from_file(p, cfg.scheme, cfg.vocab_cap, cfg.seed)
            .with_context(|| format!("reading corpus {}", p.display()))?,
        None => {
            let text = synthetic_text(cfg.synthetic_bytes, cfg.seed);
            Corpus::from_text(&text, cfg.scheme, cfg.vocab_cap, cfg.seed, "synthetic")?
        }
    };
    Ok(if cfg.subsample < 1.0 {
        corpus.subsample(cfg.subsample, cfg.seed)?
    } else {
        corpus
    })
}

/// `L{L}-H{H}`, suffixed with the sharing mode when layers share weights.
pub fn model_label(c: &ModelConfig) -> String {
    match c.share_mode {
        tltc_core::ShareMode::None => c.label(),
        mode => format!("{}-{}", c.label(), mode.as_str()),
    }
}

pub fn file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
