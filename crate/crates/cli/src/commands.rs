use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tltc_core::analysis::{
    compression_error_stats, convergence_vs_compressibility, pareto_frontier, sweep_aggregate, CompressionPoint,
    LabeledCurve, MemoryMetric, MetricMode,
};
use tltc_core::compress::{compressed_memory_bits, nonzero_count, prune_sweep, QuantizedModel, FULL_PRECISION_BITS};
use tltc_core::data::{make_synthetic_classification, synthetic_text, ClassificationData, Corpus};
use tltc_core::io::{
    append_curve_csv, curve_plot, frontier_plot, load_checkpoint, read_curve_csv, read_points_csv, save_checkpoint,
    write_convergence_csv, write_curve_csv, write_error_stats_csv, write_frontier_csv, write_points_csv,
    write_sweep_csv, write_table_csv, Checkpoint, CurveAxis, ExperimentConfig, Precision,
};
use tltc_core::train::{accuracy, batch_lr_lookup, finetune_classifier, train_mlm_until, CurvePoint, TrainState};
use tltc_core::{ModelConfig, Scalar, ShareMode, TransformerModel};

use crate::args::{Command, Common, Memory, Metric};
use crate::setup::{file, load_config, load_corpus, model_label, output_dir};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { common, resume } => with_precision(&common, |cfg| match cfg.precision {
            Precision::F32 => train::<f32>(cfg, resume.as_deref()),
            Precision::F64 => train::<f64>(cfg, resume.as_deref()),
        }),
        Command::Compress {
            common,
            checkpoint,
            save_checkpoints,
        } => with_precision(&common, |cfg| match cfg.precision {
            Precision::F32 => compress::<f32>(cfg, &checkpoint, save_checkpoints),
            Precision::F64 => compress::<f64>(cfg, &checkpoint, save_checkpoints),
        }),
        Command::Analyze {
            out,
            original,
            compressed,
            curves,
            target_loss,
        } => analyze(&out, original.as_deref(), &compressed, &curves, target_loss),
        Command::Report {
            out,
            points,
            curves,
            metric,
            memory,
        } => report(&out, &points, &curves, metric, memory),
        Command::SweepBatch {
            common,
            batches,
            target_loss,
        } => with_precision(&common, |cfg| match cfg.precision {
            Precision::F32 => sweep_batch::<f32>(cfg, &batches, target_loss),
            Precision::F64 => sweep_batch::<f64>(cfg, &batches, target_loss),
        }),
        Command::SweepData { common, fractions } => with_precision(&common, |cfg| match cfg.precision {
            Precision::F32 => sweep_data::<f32>(cfg, &fractions),
            Precision::F64 => sweep_data::<f64>(cfg, &fractions),
        }),
        Command::ConvergenceStudy { common, fractions } => with_precision(&common, |cfg| match cfg.precision {
            Precision::F32 => convergence_study::<f32>(cfg, &fractions),
            Precision::F64 => convergence_study::<f64>(cfg, &fractions),
        }),
        Command::ShareStudy { common, modes } => {
            let modes = modes
                .iter()
                .map(|m| m.parse::<ShareMode>())
                .collect::<tltc_core::Result<Vec<_>>>()?;
            with_precision(&common, |cfg| match cfg.precision {
                Precision::F32 => share_study::<f32>(cfg, &modes),
                Precision::F64 => share_study::<f64>(cfg, &modes),
            })
        }
        Command::GenCorpus { out, bytes, seed } => {
            std::fs::write(&out, synthetic_text(bytes, seed)).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} ({bytes}+ bytes)", out.display());
            Ok(())
        }
    }
}

fn with_precision(common: &Common, f: impl FnOnce(&ExperimentConfig) -> Result<()>) -> Result<()> {
    f(&load_config(common)?)
}

fn downstream_data(cfg: &ExperimentConfig, vocab: usize) -> Result<ClassificationData> {
    let d = &cfg.downstream;
    Ok(make_synthetic_classification(
        d.size, d.seq_len, vocab, d.rule, cfg.seed,
    )?)
}

fn new_model<T: Scalar>(mc: ModelConfig) -> Result<TransformerModel<T>> {
    Ok(TransformerModel::new(mc)?)
}

/// Trains one model until step `stop`; returns the new curve rows.
fn pretrain<T: Scalar>(
    corpus: &Corpus,
    model: &mut TransformerModel<T>,
    state: &mut TrainState<T>,
    train: &tltc_core::train::TrainConfig,
    stop: u64,
) -> Result<Vec<CurvePoint>> {
    let label = model_label(model.config());
    eprintln!(
        "[{label}] training steps {}..{} ({} parameters)",
        state.step,
        stop.min(train.total_steps),
        model.total_parameters()
    );
    let curve = train_mlm_until(model, corpus, train, state, stop).with_context(|| format!("training {label}"))?;
    if let Some(last) = curve.last() {
        eprintln!(
            "[{label}] step {} val loss {:.4} ({:.1}s, {:.3e} FLOPs)",
            last.step, last.val_loss, last.seconds, last.flops
        );
    }
    Ok(curve)
}

fn save_trained<T: Scalar>(path: &Path, model: &TransformerModel<T>, state: &TrainState<T>) -> Result<()> {
    save_checkpoint(path, &Checkpoint::from_model(model).with_train_state(state))
        .with_context(|| format!("writing {}", path.display()))
}

fn train<T: Scalar>(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<()> {
    let out = output_dir(cfg)?;
    let corpus = load_corpus(cfg)?;
    if let Some(path) = resume {
        let ckpt: Checkpoint<T> = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        let mut model = ckpt.model()?;
        let Some(mut state) = ckpt.train_state() else {
            bail!("{} holds no optimizer state to resume from", path.display());
        };
        let label = model_label(model.config());
        let curve = pretrain(&corpus, &mut model, &mut state, &cfg.train, cfg.train.total_steps)?;
        append_curve_csv(file(&out, &format!("{label}.csv")), &curve)?;
        return save_trained(&file(&out, &format!("{label}.ckpt")), &model, &state);
    }
    for mc in cfg.model_configs(corpus.vocab_size()) {
        let label = model_label(&mc);
        let mut model = new_model::<T>(mc)?;
        let mut state = TrainState::new(&model, &cfg.train);
        let curve = pretrain(&corpus, &mut model, &mut state, &cfg.train, cfg.train.total_steps)?;
        write_curve_csv(file(&out, &format!("{label}.csv")), &curve)?;
        save_trained(&file(&out, &format!("{label}.ckpt")), &model, &state)?;
    }
    Ok(())
}

fn sparsity_tag(s: f64) -> String {
    format!("{s}")
}

fn compress<T: Scalar>(cfg: &ExperimentConfig, checkpoint: &Path, save: bool) -> Result<()> {
    let out = output_dir(cfg)?;
    let ckpt: Checkpoint<T> =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut model = ckpt.model()?;
    model.set_trainable(|_| true);
    let label = model_label(model.config());
    let data = downstream_data(cfg, model.config().vocab_size)?;
    let report = finetune_classifier(&mut model, &data, &cfg.downstream.finetune)?;
    eprintln!(
        "[{label}] finetuned: train acc {:.4}, val acc {:.4}",
        report.train_accuracy, report.val_accuracy
    );
    save_checkpoint(
        file(&out, &format!("{label}-finetuned.ckpt")),
        &Checkpoint::from_model(&model),
    )?;

    let mut points = Vec::new();
    for level in prune_sweep(&model, &cfg.sparsity, &data, &cfg.recovery())? {
        let nonzero = nonzero_count(&level.model, &level.prune);
        let recovery_epochs = level.recovery.iter().fold(0.0, |a, r| a + r.recovery_epochs);
        let recovered = level.recovery.iter().all(|r| r.recovered);
        for &bits in &cfg.bits {
            let (compressed, ckpt) = if bits >= FULL_PRECISION_BITS {
                (level.model.clone(), Checkpoint::from_model(&level.model))
            } else {
                let q = QuantizedModel::quantize(&level.model, bits, Some(&level.prune))?;
                (q.dequantized()?, Checkpoint::from_quantized(&q))
            };
            let acc = accuracy(&compressed, &data.validation)?;
            let name = format!("{label} k={bits} s={}", sparsity_tag(level.sparsity));
            eprintln!("[{name}] val acc {acc:.4}");
            let mut p = CompressionPoint::new(
                &name,
                compressed_memory_bits(&level.model, &level.prune, bits),
                nonzero as u64,
                acc,
            );
            p.metadata.insert("model".into(), label.clone());
            p.metadata.insert("bits".into(), bits.to_string());
            p.metadata.insert("sparsity".into(), sparsity_tag(level.sparsity));
            p.metadata.insert("recovery_epochs".into(), recovery_epochs.to_string());
            p.metadata.insert("recovered".into(), recovered.to_string());
            points.push(p);
            if save {
                let path = file(&out, &format!("{label}-k{bits}-s{}.ckpt", sparsity_tag(level.sparsity)));
                save_checkpoint(&path, &ckpt.with_prune(level.prune.clone()))?;
            }
        }
    }
    write_points_csv(file(&out, &format!("{label}-points.csv")), &points)?;
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn analyze(
    out: &Path,
    original: Option<&Path>,
    compressed: &[PathBuf],
    curves: &[PathBuf],
    target_loss: Option<f64>,
) -> Result<()> {
    if original.is_none() && curves.is_empty() {
        bail!("nothing to analyze: pass --original/--compressed or --curves/--target-loss");
    }
    std::fs::create_dir_all(out)?;
    if let Some(orig) = original {
        let base = load_checkpoint::<f64>(orig)?.model()?;
        for c in compressed {
            let other = load_checkpoint::<f64>(c)?.model()?;
            let stats = compression_error_stats(&base, &other).with_context(|| format!("comparing {}", c.display()))?;
            write_error_stats_csv(file(out, &format!("{}-error-stats.csv", stem(c))), &stats)?;
        }
    }
    if !curves.is_empty() {
        let target = target_loss.context("--target-loss is required with --curves")?;
        let labeled = curves
            .iter()
            .map(|p| {
                Ok(LabeledCurve {
                    label: stem(p),
                    points: read_curve_csv(p).with_context(|| format!("reading {}", p.display()))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_sweep_csv(file(out, "sweep.csv"), &sweep_aggregate(&labeled, target)?)?;
    }
    Ok(())
}

fn report(out: &Path, points: &[PathBuf], curves: &[PathBuf], metric: Metric, memory: Memory) -> Result<()> {
    if points.is_empty() && curves.is_empty() {
        bail!("nothing to report: pass --points and/or --curves");
    }
    std::fs::create_dir_all(out)?;
    if !points.is_empty() {
        let mut all = Vec::new();
        for p in points {
            all.extend(read_points_csv(p).with_context(|| format!("reading {}", p.display()))?);
        }
        let (mode, name) = match metric {
            Metric::Accuracy => (MetricMode::Maximize, "accuracy"),
            Metric::Perplexity => (MetricMode::Minimize, "perplexity"),
        };
        let mem = match memory {
            Memory::Bits => MemoryMetric::Bits,
            Memory::Nonzero => MemoryMetric::NonzeroParams,
        };
        let frontier = pareto_frontier(&all, mem, mode)?;
        write_frontier_csv(file(out, "frontier.csv"), &frontier)?;
        std::fs::write(file(out, "frontier.svg"), frontier_plot(&frontier, mem, name)?)?;
    }
    if !curves.is_empty() {
        let labeled = curves
            .iter()
            .map(|p| {
                Ok((
                    stem(p),
                    read_curve_csv(p).with_context(|| format!("reading {}", p.display()))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        for (axis, name) in [
            (CurveAxis::Steps, "loss_vs_steps.svg"),
            (CurveAxis::Seconds, "loss_vs_seconds.svg"),
            (CurveAxis::Flops, "loss_vs_flops.svg"),
        ] {
            std::fs::write(file(out, name), curve_plot(&labeled, axis)?)?;
        }
    }
    Ok(())
}

fn sweep_batch<T: Scalar>(cfg: &ExperimentConfig, batches: &[usize], target_loss: Option<f64>) -> Result<()> {
    let out = output_dir(cfg)?;
    let corpus = load_corpus(cfg)?;
    let mc = cfg.model_configs(corpus.vocab_size()).remove(0);
    let mut curves = Vec::new();
    for &batch in batches {
        let mut train = cfg.train.clone();
        train.batch_size = batch;
        if batch % train.micro_batch != 0 {
            train.micro_batch = batch;
        }
        train.peak_lr = batch_lr_lookup(batch).unwrap_or(cfg.train.peak_lr);
        let mut model = new_model::<T>(mc.clone())?;
        let mut state = TrainState::new(&model, &train);
        let label = format!("{}-B{batch}", model_label(&mc));
        let curve = pretrain(&corpus, &mut model, &mut state, &train, train.total_steps)?;
        write_curve_csv(file(&out, &format!("{label}.csv")), &curve)?;
        curves.push(LabeledCurve { label, points: curve });
    }
    let target = match target_loss {
        Some(t) => t,
        None => curves
            .iter()
            .filter_map(|c| c.points.last().map(|p| p.val_loss))
            .fold(f64::NEG_INFINITY, f64::max),
    };
    write_sweep_csv(file(&out, "batch-sweep.csv"), &sweep_aggregate(&curves, target)?)?;
    Ok(())
}

fn sweep_data<T: Scalar>(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<()> {
    let out = output_dir(cfg)?;
    let full = load_corpus(cfg)?;
    let mut rows = Vec::new();
    for &fraction in fractions {
        let corpus = full.subsample(fraction, cfg.seed)?;
        for mc in cfg.model_configs(full.vocab_size()) {
            let label = format!("{}-D{fraction}", model_label(&mc));
            let mut model = new_model::<T>(mc)?;
            let mut state = TrainState::new(&model, &cfg.train);
            let curve = pretrain(&corpus, &mut model, &mut state, &cfg.train, cfg.train.total_steps)?;
            write_curve_csv(file(&out, &format!("{label}.csv")), &curve)?;
            let last = curve.last().context("training produced no evaluation")?;
            rows.push(vec![
                label,
                fraction.to_string(),
                corpus.train().len().to_string(),
                last.step.to_string(),
                last.val_loss.to_string(),
                last.val_ppl.to_string(),
            ]);
        }
    }
    let header = [
        "label",
        "fraction",
        "train_tokens",
        "steps",
        "final_val_loss",
        "final_val_ppl",
    ];
    Ok(write_table_csv(file(&out, "data-sweep.csv"), &header, &rows)?)
}

fn convergence_study<T: Scalar>(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<()> {
    let out = output_dir(cfg)?;
    let corpus = load_corpus(cfg)?;
    let mc = cfg.model_configs(corpus.vocab_size()).remove(0);
    let label = model_label(&mc);
    let mut sorted = fractions.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.first().is_some_and(|&f| f <= 0.0) || sorted.last().is_some_and(|&f| f > 1.0) {
        bail!("checkpoint fractions must lie in (0, 1]");
    }
    let mut model = new_model::<T>(mc)?;
    let mut state = TrainState::new(&model, &cfg.train);
    let mut snapshots = Vec::new();
    let mut curve = Vec::new();
    for &f in &sorted {
        let stop = (f * cfg.train.total_steps as f64).round() as u64;
        curve.extend(pretrain(&corpus, &mut model, &mut state, &cfg.train, stop)?);
        save_trained(&file(&out, &format!("{label}-P{f}.ckpt")), &model, &state)?;
        snapshots.push((f, model.clone()));
    }
    write_curve_csv(file(&out, &format!("{label}.csv")), &curve)?;
    let data = downstream_data(cfg, model.config().vocab_size)?;
    let rows = convergence_vs_compressibility(&snapshots, &data, &cfg.bits, &cfg.downstream.finetune)?;
    write_convergence_csv(file(&out, "convergence.csv"), &rows)?;
    Ok(())
}

fn share_study<T: Scalar>(cfg: &ExperimentConfig, modes: &[ShareMode]) -> Result<()> {
    let out = output_dir(cfg)?;
    let corpus = load_corpus(cfg)?;
    let mut rows = Vec::new();
    for &mode in modes {
        for mut mc in cfg.model_configs(corpus.vocab_size()) {
            mc.share_mode = mode;
            let label = format!("{}-{}", mc.label(), mode.as_str());
            let mut model = new_model::<T>(mc.clone())?;
            let mut state = TrainState::new(&model, &cfg.train);
            let curve = pretrain(&corpus, &mut model, &mut state, &cfg.train, cfg.train.total_steps)?;
            write_curve_csv(file(&out, &format!("{label}.csv")), &curve)?;
            let last = curve.last().context("training produced no evaluation")?;
            rows.push(vec![
                label,
                mode.as_str().to_string(),
                mc.num_layers.to_string(),
                mc.hidden_size.to_string(),
                model.total_parameters().to_string(),
                model.encoder_parameter_count().to_string(),
                last.step.to_string(),
                last.val_loss.to_string(),
            ]);
        }
    }
    let header = [
        "label",
        "share_mode",
        "layers",
        "hidden",
        "total_params",
        "encoder_params",
        "steps",
        "final_val_loss",
    ];
    Ok(write_table_csv(file(&out, "share-study.csv"), &header, &rows)?)
}
