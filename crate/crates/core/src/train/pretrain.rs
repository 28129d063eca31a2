use rayon::prelude::*;

use super::flops::flops_per_step;
use super::meter::{Clock, CostMeter, StepTimer};
use super::optim::{clip_grad_norm, Adam, AdamConfig};
use super::schedule::lr_schedule;
use crate::data::{validation_batches, BatchSampler, Corpus, MlmBatch, DEFAULT_MASK_RATE};
use crate::error::{Error, Result};
use crate::model::{Mode, ParamGrads, TransformerModel};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    /// Sequences per gradient step.
    pub batch_size: usize,
    /// Sequences per accumulation chunk; must divide `batch_size`.
    pub micro_batch: usize,
    pub seq_len: usize,
    pub mask_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub time_budget_seconds: Option<f64>,
    pub adam: AdamConfig,
    pub grad_clip_norm: Option<f64>,
    pub eval_interval: u64,
    /// Sequences per validation forward pass.
    pub eval_batch: usize,
    pub eval_seed: u64,
    pub seed: u64,
    pub clock: Clock,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            batch_size: 16,
            micro_batch: 16,
            seq_len: 32,
            mask_rate: DEFAULT_MASK_RATE,
            warmup_steps: 10,
            total_steps: 200,
            time_budget_seconds: None,
            adam: AdamConfig::default(),
            grad_clip_norm: None,
            eval_interval: 50,
            eval_batch: 32,
            eval_seed: 0x00e7_a100,
            seed: 0,
            clock: Clock::Wall,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.micro_batch == 0 || !self.batch_size.is_multiple_of(self.micro_batch) {
            return bad(format!(
                "micro_batch {} must be positive and divide batch_size {}",
                self.micro_batch, self.batch_size
            ));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.seq_len == 0 || self.eval_interval == 0 || self.eval_batch == 0 {
            return bad("seq_len, eval_interval and eval_batch must be positive".into());
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} is not a valid learning rate", self.peak_lr));
        }
        if self.mask_rate <= 0.0 || self.mask_rate > 1.0 {
            return bad(format!("mask_rate {} outside (0, 1]", self.mask_rate));
        }
        Ok(())
    }

    pub fn accumulation_steps(&self) -> usize {
        self.batch_size / self.micro_batch
    }
}

/// Everything needed to continue a run: optimizer moments, step counter and
/// cost totals.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub optimizer: Adam<T>,
    pub meter: CostMeter,
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &TransformerModel<T>, cfg: &TrainConfig) -> Self {
        Self {
            optimizer: Adam::new(model.parameters(), cfg.adam),
            meter: CostMeter::new(flops_per_step(model.config(), cfg.batch_size, cfg.seq_len)),
            step: 0,
        }
    }
}

/// One row of the learning curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub flops: f64,
    pub seconds: f64,
    pub val_loss: f64,
    pub val_ppl: f64,
    pub lr: f64,
}

/// Computes per-unit gradients (one unit is typically one sequence) and adds
/// them into the model's `grad` buffers in unit order. Units run in parallel
/// in groups no larger than the thread pool, inside chunks of `chunk` units.
/// The summation order never depends on the chunking or thread count, so the
/// result is bit-identical for every chunk size.
pub fn accumulate_units<T, F>(model: &mut TransformerModel<T>, units: usize, chunk: usize, unit: F) -> Result<T>
where
    T: Scalar,
    F: Fn(&TransformerModel<T>, usize) -> Result<Option<(T, ParamGrads<T>)>> + Sync,
{
    let threads = rayon::current_num_threads().max(1);
    let mut total = T::zero();
    for start in (0..units).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(units);
        for group in (start..end).step_by(threads) {
            let frozen: &TransformerModel<T> = model;
            let results: Vec<_> = (group..(group + threads).min(end))
                .into_par_iter()
                .map(|i| unit(frozen, i))
                .collect();
            for r in results {
                if let Some((loss, grads)) = r? {
                    total += loss;
                    model.accumulate(&grads)?;
                }
            }
        }
    }
    Ok(total)
}

/// Seed for the dropout masks of sequence `index` at `step`.
fn dropout_seed(run_seed: u64, step: u64, index: usize) -> u64 {
    seed::derive(seed::derive(run_seed ^ 0xd20f, step), index as u64)
}

/// Mean masked cross-entropy over `batches` in evaluation mode.
pub fn evaluate_loss<T: Scalar>(model: &TransformerModel<T>, batches: &[MlmBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Empty("validation batches"));
    }
    let sums: Vec<f64> = batches
        .par_iter()
        .map(|b| {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let (loss, _) = model.record_mlm(
                &mut tape,
                &vars,
                &b.inputs,
                &b.targets,
                b.batch,
                Mode::Eval,
                Some(T::one()),
            )?;
            Ok(tape.scalar(loss).as_f64())
        })
        .collect::<Result<_>>()?;
    let count: usize = batches.iter().map(|b| b.masked).sum();
    if count == 0 {
        return Err(Error::UndefinedMean("no masked validation positions"));
    }
    Ok(sums.iter().sum::<f64>() / count as f64)
}

/// `exp` of the mean masked cross-entropy on the corpus's validation split
/// under a fixed masking seed.
pub fn evaluate_perplexity<T: Scalar>(model: &TransformerModel<T>, corpus: &Corpus, cfg: &TrainConfig) -> Result<f64> {
    let batches = validation_batches(corpus, cfg.seq_len, cfg.eval_batch, cfg.mask_rate, cfg.eval_seed)?;
    Ok(evaluate_loss(model, &batches)?.exp())
}

/// One gradient step on `batch`: accumulates gradients over sequences,
/// optionally clips, and applies Adam. Returns the training loss.
pub fn mlm_step<T: Scalar>(
    model: &mut TransformerModel<T>,
    state: &mut TrainState<T>,
    batch: &MlmBatch,
    cfg: &TrainConfig,
) -> Result<f64> {
    model.zero_grads();
    let norm = T::of(batch.masked.max(1) as f64);
    let step = state.step;
    let loss = accumulate_units(model, batch.batch, cfg.micro_batch, |m, i| {
        let (inputs, targets) = batch.rows(i..i + 1);
        let mode = Mode::Train {
            seed: dropout_seed(cfg.seed, step, i),
        };
        m.mlm_gradients(inputs, targets, 1, mode, Some(norm)).map(Some)
    })?;
    if let Some(max) = cfg.grad_clip_norm {
        clip_grad_norm(model.parameters_mut(), max);
    }
    let lr = lr_schedule(step + 1, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps);
    state.optimizer.step(model.parameters_mut(), lr)?;
    state.step += 1;
    Ok(loss.as_f64())
}

/// Pretrains `model` with masked-LM until `cfg.total_steps` (counted from
/// the state's step) or the time budget is spent. Validation loss is recorded
/// every `eval_interval` steps and at the final step.
///
/// If validation loss becomes non-finite, model and state are rolled back to
/// the last evaluated good point and [`Error::Diverged`] is returned.
pub fn train_mlm<T: Scalar>(
    model: &mut TransformerModel<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
) -> Result<Vec<CurvePoint>> {
    train_mlm_until(model, corpus, cfg, state, cfg.total_steps)
}

/// [`train_mlm`] that pauses once the state reaches step `stop` (evaluating
/// there). The learning-rate schedule still spans `cfg.total_steps`, so
/// resuming later continues the same run.
pub fn train_mlm_until<T: Scalar>(
    model: &mut TransformerModel<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    stop: u64,
) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    let end = stop.min(cfg.total_steps);
    if model.config().vocab_size < corpus.vocab_size() {
        return Err(Error::ModelMismatch(format!(
            "model vocabulary {} is smaller than the corpus vocabulary {}",
            model.config().vocab_size,
            corpus.vocab_size()
        )));
    }
    let fps = flops_per_step(model.config(), cfg.batch_size, cfg.seq_len);
    if state.meter.flops_per_step() != fps {
        state.meter = CostMeter::resumed(fps, state.meter.gradient_steps(), state.meter.wall_clock_seconds());
    }
    let mut curve = Vec::new();
    if state.step >= end {
        return Ok(curve);
    }
    let val = validation_batches(corpus, cfg.seq_len, cfg.eval_batch, cfg.mask_rate, cfg.eval_seed)?;
    let sampler = BatchSampler::new(corpus, cfg.batch_size, cfg.seq_len, cfg.mask_rate, cfg.seed);
    let mut good = (model.clone(), state.clone());
    let over_budget = |s: &TrainState<T>| {
        cfg.time_budget_seconds
            .is_some_and(|b| s.meter.wall_clock_seconds() >= b)
    };

    while state.step < end && !over_budget(state) {
        let timer = StepTimer::start(cfg.clock);
        let batch = sampler.batch_at(state.step)?;
        mlm_step(model, state, &batch, cfg)?;
        state.meter.record_step(timer.stop(fps));

        let step = state.step;
        if step.is_multiple_of(cfg.eval_interval) || step == end || over_budget(state) {
            let val_loss = evaluate_loss(model, &val)?;
            if !val_loss.is_finite() {
                *model = good.0;
                *state = good.1;
                return Err(Error::Diverged { step, loss: val_loss });
            }
            curve.push(CurvePoint {
                step,
                flops: state.meter.cumulative_flops(),
                seconds: state.meter.wall_clock_seconds(),
                val_loss,
                val_ppl: val_loss.exp(),
                lr: lr_schedule(step, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps),
            });
            good = (model.clone(), state.clone());
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_text, TokenScheme};
    use crate::model::ModelConfig;

    fn setup(layers: usize) -> (Corpus, TransformerModel<f64>) {
        let corpus = Corpus::from_text(&synthetic_text(40_000, 2), TokenScheme::Char, 64, 0, "t").unwrap();
        let mut mc = ModelConfig::new(layers, 16, corpus.vocab_size());
        mc.num_heads = 2;
        mc.ffn_size = 32;
        mc.max_seq_len = 16;
        (corpus, TransformerModel::new(mc).unwrap())
    }

    fn cfg(micro: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            micro_batch: micro,
            seq_len: 16,
            total_steps: 3,
            warmup_steps: 1,
            eval_interval: 2,
            clock: Clock::Simulated { flops_per_second: 1e9 },
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_returns_initial_model_and_empty_curve() {
        let (corpus, mut model) = setup(1);
        let before = model.clone();
        let c = TrainConfig {
            total_steps: 0,
            warmup_steps: 0,
            ..cfg(4)
        };
        let mut st = TrainState::new(&model, &c);
        assert!(train_mlm(&mut model, &corpus, &c, &mut st).unwrap().is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn micro_batching_is_bit_exact() {
        let (corpus, model) = setup(1);
        let mut outs = Vec::new();
        for micro in [4, 2, 1] {
            let mut m = model.clone();
            let c = cfg(micro);
            let mut st = TrainState::new(&m, &c);
            let curve = train_mlm(&mut m, &corpus, &c, &mut st).unwrap();
            outs.push((m, curve));
        }
        for o in &outs[1..] {
            assert_eq!(o.0, outs[0].0);
            assert_eq!(o.1, outs[0].1);
        }
    }

    #[test]
    fn curve_rows_and_meter_agree() {
        let (corpus, mut model) = setup(1);
        let c = cfg(2);
        let mut st = TrainState::new(&model, &c);
        let curve = train_mlm(&mut model, &corpus, &c, &mut st).unwrap();
        assert_eq!(curve.iter().map(|p| p.step).collect::<Vec<_>>(), vec![2, 3]);
        let fps = flops_per_step(model.config(), 4, 16);
        assert_eq!(curve[1].flops, 3.0 * fps as f64);
        assert_eq!(st.meter.cumulative_flops(), 3.0 * fps as f64);
        assert!((curve[1].val_ppl - curve[1].val_loss.exp()).abs() < 1e-12);
    }

    #[test]
    fn resuming_matches_an_uninterrupted_run() {
        let (corpus, model) = setup(1);
        let c = cfg(4);
        let mut a = model.clone();
        let mut sa = TrainState::new(&a, &c);
        train_mlm(&mut a, &corpus, &c, &mut sa).unwrap();

        let mut b = model.clone();
        let mut sb = TrainState::new(&b, &c);
        // interrupt after two steps via the time budget, keeping the schedule
        let budget = TrainConfig {
            time_budget_seconds: Some(2.0 * flops_per_step(b.config(), 4, 16) as f64 / 1e9),
            ..c.clone()
        };
        train_mlm(&mut b, &corpus, &budget, &mut sb).unwrap();
        assert_eq!(sb.step, 2);
        train_mlm(&mut b, &corpus, &c, &mut sb).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.meter.cumulative_flops(), sb.meter.cumulative_flops());
    }

    #[test]
    fn full_batch_gradient_equals_micro_batch_mean() {
        let (corpus, model) = setup(2);
        let b = crate::data::make_mlm_batch(&corpus, 4, 16, 0.3, 7).unwrap();
        let norm = b.masked as f64;
        let (_, full) = model
            .mlm_gradients(&b.inputs, &b.targets, 4, Mode::Eval, Some(norm))
            .unwrap();
        let mut summed: Vec<Vec<f64>> = (0..full.len())
            .map(|i| vec![0.0; full.get(i).map_or(0, <[f64]>::len)])
            .collect();
        for half in [0..2, 2..4] {
            let (x, y) = b.rows(half);
            let (_, g) = model.mlm_gradients(x, y, 2, Mode::Eval, Some(norm)).unwrap();
            for (i, s) in summed.iter_mut().enumerate() {
                if let Some(g) = g.get(i) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
        for (i, s) in summed.iter().enumerate() {
            if let Some(f) = full.get(i) {
                for (a, b) in s.iter().zip(f) {
                    assert!((a - b).abs() <= 1e-12, "param {i}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn untrained_perplexity_is_near_vocab_size() {
        let (corpus, model) = setup(1);
        let c = cfg(4);
        let ppl = evaluate_perplexity(&model, &corpus, &c).unwrap();
        let v = corpus.vocab_size() as f64;
        assert!((ppl - v).abs() / v < 0.1, "{ppl} vs {v}");
        assert_eq!(ppl, evaluate_perplexity(&model, &corpus, &c).unwrap());
    }

    #[test]
    fn rejects_bad_accumulation() {
        let (corpus, mut model) = setup(1);
        let c = cfg(3);
        let mut st = TrainState::new(&model, &c);
        assert!(train_mlm(&mut model, &corpus, &c, &mut st).is_err());
    }
}
