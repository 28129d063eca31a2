//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.
//!
//! `cargo test --test acceptance -- 3 11` runs only the listed criteria.

// Negated comparisons are deliberate: NaN must fail a check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tltc_core::analysis::{
    compression_error_stats, dominates, first_crossing, pareto_frontier, weight_differences, whole_model_error_stats,
    CompressionPoint, ErrorStats, LabeledCurve, MemoryMetric, MetricMode,
};
use tltc_core::compress::{
    is_prunable, iterative_prune_with_recovery, pack_indices, packed_len, prune_global, quantize_model,
    quantize_tensor, unpack_indices, PruneState, QuantizedModel, RecoveryConfig, PRUNE_SCHEDULE,
};
use tltc_core::data::{make_synthetic_classification, synthetic_text, BatchSampler, Corpus, LabelRule, TokenScheme};
use tltc_core::io::{load_checkpoint, save_checkpoint, Checkpoint};
use tltc_core::model::Parameter;
use tltc_core::train::{
    accuracy, batch_lr_lookup, finetune_classifier, flops_per_step, forward_flops, head_forward_flops, mlm_step,
    train_mlm, train_mlm_until, Clock, FinetuneConfig, TrainConfig, TrainState,
};
use tltc_core::{Error, Mode, ModelConfig, ModuleGroup, ShareMode, Tensor, TransformerModel, IGNORE_INDEX};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within(limit: Duration, start: Instant, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure!(took <= limit, "{what} took {took:.1?}, limit {limit:?}");
    Ok(())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// ---------------------------------------------------------------- 1

const QUANT_TENSORS: usize = 1000;
const QUANT_BITS: [u32; 6] = [1, 2, 4, 6, 8, 32];
/// Rounding slack on the half-step error bound, in units of the range
/// magnitude times machine epsilon.
const QUANT_SLACK_ULPS: f64 = 4.0;
const QUANT_TIME: Duration = Duration::from_secs(10);

/// Grid point `i` of a `bits`-bit min/max grid, endpoints exact.
fn grid_point(i: u64, n: u64, lo: f64, hi: f64) -> f64 {
    if i == n {
        hi
    } else {
        lo + i as f64 * ((hi - lo) / n as f64)
    }
}

/// Nearest grid index, ties to the even index. Linear scan for small grids;
/// for wide grids a binary search over the (monotone) full grid.
fn nearest_index(w: f64, lo: f64, hi: f64, bits: u32) -> u64 {
    let n = (1u64 << bits) - 1;
    if hi == lo {
        return 0;
    }
    let better = |c: u64, best: u64| {
        let (dc, db) = (
            (w - grid_point(c, n, lo, hi)).abs(),
            (w - grid_point(best, n, lo, hi)).abs(),
        );
        dc < db || (dc == db && c.is_multiple_of(2) && best % 2 == 1)
    };
    if bits <= 16 {
        return (1..=n).fold(0, |best, c| if better(c, best) { c } else { best });
    }
    let (mut a, mut b) = (0u64, n);
    while a < b {
        let mid = a + (b - a) / 2;
        if grid_point(mid, n, lo, hi) < w {
            a = mid + 1;
        } else {
            b = mid;
        }
    }
    let mut best = a;
    for c in [a.saturating_sub(1), (a + 1).min(n)] {
        if better(c, best) {
            best = c;
        }
    }
    best
}

fn random_tensor(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..=64);
    let scale = 10f64.powf(rng.random_range(-3.0..3.0));
    let offset = if rng.random_bool(0.3) {
        rng.random_range(-2.0..2.0) * scale
    } else {
        0.0
    };
    match rng.random_range(0..10) {
        0 => vec![offset; n],
        1 => (0..n).map(|_| (rng.random_range(-4i32..=4) as f64) * scale).collect(),
        _ => (0..n).map(|_| offset + scale * rng.random_range(-1.0..1.0)).collect(),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0usize;
    for t in 0..QUANT_TENSORS {
        let data = random_tensor(&mut rng);
        let w = ok(Tensor::<f64>::new([data.len()], data.clone()))?;
        let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for bits in QUANT_BITS {
            let q = ok(quantize_tensor(&w, bits))?;
            let idx = ok(q.indices())?;
            let deq = ok(q.dequantize())?;
            let n = (1u64 << bits) - 1;
            let delta = (hi - lo) / n as f64;
            let bound = delta / 2.0 + QUANT_SLACK_ULPS * f64::EPSILON * lo.abs().max(hi.abs());
            for (j, &v) in data.iter().enumerate() {
                let want = nearest_index(v, lo, hi, bits);
                ensure!(
                    idx[j] as u64 == want,
                    "tensor {t} k={bits} elem {j}: index {} vs oracle {want}",
                    idx[j]
                );
                let got = deq.data()[j];
                ensure!(
                    got == grid_point(want, n, lo, hi),
                    "tensor {t} k={bits} elem {j}: decoded {got}"
                );
                ensure!(
                    (got - v).abs() <= bound,
                    "tensor {t} k={bits}: error {} > {bound}",
                    (got - v).abs()
                );
                if v == lo || v == hi {
                    ensure!(got == v, "tensor {t} k={bits}: endpoint {v} became {got}");
                }
                checked += 1;
            }
        }
    }
    within(QUANT_TIME, start, "quantization check")?;
    Ok(format!("{checked} weights exact, {:.1?}", start.elapsed()))
}

// ---------------------------------------------------------------- 2

const WORKED_TOL: f64 = 1e-6;

fn criterion_2() -> Outcome {
    let w = ok(Tensor::<f64>::new([3], vec![0.0, 0.4, 1.0]))?;
    let q = ok(quantize_tensor(&w, 2))?;
    let idx = ok(q.indices())?;
    ensure!(idx == [0, 1, 3], "indices {idx:?}");
    let deq = ok(q.dequantize())?;
    for (got, want) in deq.data().iter().zip([0.0, 1.0 / 3.0, 1.0]) {
        ensure!((got - want).abs() <= WORKED_TOL, "value {got} vs {want}");
    }
    Ok(format!("indices {idx:?}, values {:?}", deq.data()))
}

// ---------------------------------------------------------------- 3

const PRUNE_MODELS: u64 = 100;
const PRUNE_TIME: Duration = Duration::from_secs(30);

fn random_model(rng: &mut ChaCha8Rng) -> TransformerModel<f64> {
    let mut c = ModelConfig::new(
        rng.random_range(0..=3),
        8 * rng.random_range(1..=3),
        rng.random_range(6..=30),
    );
    c.num_heads = 2;
    c.ffn_size = 4 * rng.random_range(1..=8);
    c.max_seq_len = rng.random_range(2..=12);
    c.seed = rng.random();
    let mut m = TransformerModel::new(c).expect("valid config");
    // Coarse rounding in some models forces magnitude ties across tensors.
    let coarse = rng.random_bool(0.5);
    for p in m.parameters_mut() {
        for v in p.tensor.data_mut() {
            let r: f64 = rng.random_range(-1.0..1.0);
            *v = if coarse { (r * 8.0).round() / 8.0 } else { r };
        }
    }
    m
}

/// Global smallest-magnitude selection by a full sort; ties by name then
/// flat index.
fn prune_oracle(params: &[Parameter<f64>], target: f64) -> BTreeSet<(String, usize)> {
    let mut all: Vec<(f64, &str, usize)> = params
        .iter()
        .filter(|p| is_prunable(p))
        .flat_map(|p| {
            p.tensor
                .data()
                .iter()
                .enumerate()
                .map(move |(i, v)| (v.abs(), p.name.as_str(), i))
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    let count = (target * all.len() as f64).round() as usize;
    all[..count].iter().map(|&(_, n, i)| (n.to_string(), i)).collect()
}

fn mask_set(state: &PruneState) -> BTreeSet<(String, usize)> {
    state
        .masks()
        .iter()
        .flat_map(|(n, m)| {
            m.iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(move |(i, _)| (n.clone(), i))
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut levels = 0;
    for k in 0..PRUNE_MODELS {
        let mut m = random_model(&mut rng);
        let original = m.parameters().to_vec();
        let mut state = PruneState::new(&m);
        let total = state.prunable_count();
        let mut previous = BTreeSet::new();
        for target in PRUNE_SCHEDULE {
            state = ok(prune_global(&mut m, target, &state))?;
            let got = mask_set(&state);
            ensure!(
                got == prune_oracle(&original, target),
                "model {k} at {target}: mask differs from oracle"
            );
            let realized = state.pruned_count() as f64;
            ensure!(
                (realized - target * total as f64).abs() <= 1.0,
                "model {k}: {realized} pruned of {total} at {target}"
            );
            ensure!(got.is_superset(&previous), "model {k}: mask shrank at {target}");
            for p in m.parameters().iter().filter(|p| is_prunable(p)) {
                let mask = state.mask(&p.name).expect("mask");
                ensure!(
                    p.tensor.data().iter().zip(mask).all(|(v, &b)| !b || *v == 0.0),
                    "pruned weight not zero"
                );
            }
            previous = got;
            levels += 1;
        }
    }
    within(PRUNE_TIME, start, "pruning check")?;
    Ok(format!(
        "{PRUNE_MODELS} models, {levels} pruning levels match, {:.1?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- 4

/// Step of the fourth-order central difference stencil.
const FD_STEP: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely against it.
const FD_FLOOR: f64 = 1e-7;
const FD_REL_TOL: f64 = 1e-4;
const FD_TIME: Duration = Duration::from_secs(120);

type LossFn<'a> = dyn Fn(&TransformerModel<f64>) -> tltc_core::Result<f64> + 'a;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut c = ModelConfig::new(2, 32, 50);
    c.max_seq_len = 16;
    c.seed = 4;
    let mut m = TransformerModel::<f64>::new(c).map_err(|e| e.to_string())?;
    // Move off the symmetric initialization so every path carries signal.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for p in m.parameters_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let (batch, seq) = (2usize, 16usize);
    let tokens: Vec<u32> = (0..batch * seq).map(|_| rng.random_range(0..50)).collect();
    let targets: Vec<u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| if i % 3 == 0 { (t + 7) % 50 } else { IGNORE_INDEX })
        .collect();
    let labels = [0u32, 1];
    let norm = batch as f64;

    let mlm = |m: &TransformerModel<f64>| m.forward_mlm(&tokens, &targets, batch, Mode::Eval).map(|o| o.loss);
    let cls = |m: &TransformerModel<f64>| {
        m.classify_gradients(&tokens, &labels, batch, Mode::Eval, norm)
            .map(|r| r.0)
    };
    let (_, g_mlm) = ok(m.mlm_gradients(&tokens, &targets, batch, Mode::Eval, None))?;
    let (_, g_cls) = ok(m.classify_gradients(&tokens, &labels, batch, Mode::Eval, norm))?;

    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    for pi in 0..m.parameters().len() {
        let group = m.parameters()[pi].group;
        let numel = m.parameters()[pi].tensor.numel();
        // Parameters the loss never reaches have no gradient; they must
        // still show a zero finite difference.
        let (grads, loss): (_, &LossFn) = if group == ModuleGroup::ClsHead {
            (&g_cls, &cls)
        } else {
            (&g_mlm, &mlm)
        };
        let analytic = grads.get(pi).map_or_else(|| vec![0.0; numel], <[f64]>::to_vec);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = m.parameters()[pi].tensor.data()[j];
            let mut at = |x: f64| {
                m.parameters_mut()[pi].tensor.data_mut()[j] = x;
                ok(loss(&m))
            };
            let (p1, m1) = (at(orig + FD_STEP)?, at(orig - FD_STEP)?);
            let (p2, m2) = (at(orig + 2.0 * FD_STEP)?, at(orig - 2.0 * FD_STEP)?);
            m.parameters_mut()[pi].tensor.data_mut()[j] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP);
            let e = rel_err(a, numeric);
            if e > worst.0 {
                worst = (e, format!("{}[{j}]: {a:.6e} vs {numeric:.6e}", m.parameters()[pi].name));
            }
            checked += 1;
        }
    }
    within(FD_TIME, start, "gradient check")?;
    ensure!(worst.0 < FD_REL_TOL, "relative error {:.2e} at {}", worst.0, worst.1);
    Ok(format!(
        "{checked} gradients, worst relative error {:.2e} ({}), {:.1?}",
        worst.0,
        worst.1,
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let corpus = ok(Corpus::from_text(
        &synthetic_text(40_000, 5),
        TokenScheme::Char,
        64,
        5,
        "acc",
    ))?;
    let mut c = ModelConfig::new(2, 32, corpus.vocab_size());
    c.max_seq_len = 16;
    let base = ok(TransformerModel::<f64>::new(c))?;
    let batch = 8;
    let run = |micro: usize| -> Result<Vec<Vec<u64>>, String> {
        let cfg = TrainConfig {
            batch_size: batch,
            micro_batch: micro,
            seq_len: 16,
            warmup_steps: 2,
            total_steps: 10,
            grad_clip_norm: Some(1.0),
            seed: 5,
            ..Default::default()
        };
        let mut m = base.clone();
        let mut state = TrainState::new(&m, &cfg);
        let sampler = BatchSampler::new(&corpus, batch, 16, cfg.mask_rate, cfg.seed);
        let mut trajectory = Vec::new();
        for step in 0..10 {
            ok(mlm_step(&mut m, &mut state, &ok(sampler.batch_at(step))?, &cfg))?;
            trajectory.push(
                m.parameters()
                    .iter()
                    .flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits()))
                    .collect(),
            );
        }
        Ok(trajectory)
    };
    let full = run(batch)?;
    for micro in [batch / 2, batch / 4] {
        let other = run(micro)?;
        for (step, (a, b)) in full.iter().zip(&other).enumerate() {
            ensure!(
                a == b,
                "micro_batch {micro} diverges from full batch at step {}",
                step + 1
            );
        }
    }
    ensure!(full[0] != full[9], "parameters did not move");
    Ok(format!(
        "micro_batch {{{batch}, {}, {}}} bit-identical over 10 steps",
        batch / 2,
        batch / 4
    ))
}

// ---------------------------------------------------------------- 6

/// Forward FLOPs by walking the parameter list: every dense weight applied
/// to each token costs 2·in·out, the tied output projection 2·H·V, and each
/// layer's score and context products 2·seq²·H each.
fn flop_oracle(m: &TransformerModel<f32>, seq: usize) -> u64 {
    let c = m.config();
    let s = seq as u64;
    let mut f = 0u64;
    for p in m.parameters() {
        let shape = p.tensor.shape();
        match p.group {
            ModuleGroup::AttnInProj
            | ModuleGroup::AttnOutProj
            | ModuleGroup::FfnUp
            | ModuleGroup::FfnDown
            | ModuleGroup::MlmHead
                if shape.len() == 2 =>
            {
                f += 2 * s * (shape[0] * shape[1]) as u64
            }
            ModuleGroup::Embedding if p.name.contains("token") => f += 2 * s * (shape[0] * shape[1]) as u64,
            _ => {}
        }
    }
    f + c.num_layers as u64 * 2 * (2 * s * s * c.hidden_size as u64)
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in 0..10 {
        let heads = rng.random_range(1..=4);
        let mut c = ModelConfig::new(
            rng.random_range(0..=6),
            heads * 8 * rng.random_range(1..=4),
            rng.random_range(10..=300),
        );
        c.num_heads = heads;
        c.ffn_size = rng.random_range(8..=256);
        c.max_seq_len = rng.random_range(4..=64);
        let seq = rng.random_range(1..=c.max_seq_len);
        let batch = rng.random_range(1..=32);
        let m = ok(TransformerModel::<f32>::new(c.clone()))?;
        let oracle = flop_oracle(&m, seq);
        ensure!(
            forward_flops(&c, seq) == oracle,
            "config {k} ({}): {} vs oracle {oracle}",
            c.label(),
            forward_flops(&c, seq)
        );
        ensure!(
            flops_per_step(&c, batch, seq) == 3 * batch as u64 * oracle,
            "config {k}: step count"
        );
        ensure!(
            ok(m.traced_forward_flops(batch, seq))? == batch as u64 * oracle,
            "config {k}: traced count differs"
        );
        let stack = |layers: usize| {
            let mut d = c.clone();
            d.num_layers = layers;
            forward_flops(&d, seq) - head_forward_flops(&d, seq)
        };
        let per_layer = stack(1);
        for l in 0..=8 {
            ensure!(
                stack(l) == l as u64 * per_layer,
                "config {k}: encoder stack not linear at L={l}"
            );
        }
    }
    Ok("10 configs match the shape oracle; encoder stack linear in L".into())
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let want = [
        (256, 0.0002),
        (2048, 0.001),
        (4096, 0.00125),
        (8192, 0.0015),
        (16384, 0.001875),
    ];
    for (b, lr) in want {
        let got = ok(batch_lr_lookup(b))?;
        ensure!(got == lr, "batch {b}: {got} vs {lr}");
    }
    for b in [0, 1, 255, 512, 32768] {
        ensure!(
            matches!(batch_lr_lookup(b), Err(Error::UnlistedBatchSize(x)) if x == b),
            "batch {b} should be unlisted"
        );
    }
    Ok("5 entries exact; unlisted sizes rejected".into())
}

// ---------------------------------------------------------------- 8

const SCALE_CORPUS_BYTES: usize = 1 << 20;
const SCALE_SEEDS: [u64; 3] = [0, 1, 2];
/// Preregistered from pilot runs on seeds 100..=102, which are not reused.
const SCALE_TARGET_LOSS: f64 = 2.95;
const SCALE_MAX_STEPS: u64 = 300;
const SCALE_EVAL_EVERY: u64 = 10;
const SCALE_LR: f64 = 5e-4;
const SCALE_BATCH: usize = 16;
const SCALE_SEQ: usize = 64;
const SCALE_TIME: Duration = Duration::from_secs(30 * 60);

fn steps_to_target(corpus: &Corpus, layers: usize, hidden: usize, seed: u64) -> Result<Option<u64>, String> {
    let mut c = ModelConfig::new(layers, hidden, corpus.vocab_size());
    c.max_seq_len = SCALE_SEQ;
    c.dropout = 0.0;
    c.seed = seed;
    let mut m = ok(TransformerModel::<f32>::new(c))?;
    let cfg = TrainConfig {
        peak_lr: SCALE_LR,
        batch_size: SCALE_BATCH,
        micro_batch: SCALE_BATCH,
        seq_len: SCALE_SEQ,
        warmup_steps: 20,
        total_steps: SCALE_MAX_STEPS,
        eval_interval: SCALE_EVAL_EVERY,
        seed,
        ..Default::default()
    };
    let mut state = TrainState::new(&m, &cfg);
    while state.step < SCALE_MAX_STEPS {
        let stop = state.step + SCALE_EVAL_EVERY;
        let curve = ok(train_mlm_until(&mut m, corpus, &cfg, &mut state, stop))?;
        if let Some(p) = curve.iter().find(|p| p.val_loss <= SCALE_TARGET_LOSS) {
            return Ok(Some(p.step));
        }
    }
    Ok(None)
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let text = synthetic_text(SCALE_CORPUS_BYTES, 7);
    ensure!(text.len() >= SCALE_CORPUS_BYTES, "corpus has {} bytes", text.len());
    let corpus = ok(Corpus::from_text(&text, TokenScheme::Char, 256, 7, "synthetic"))?;
    let show = |v: &[Option<u64>]| {
        v.iter()
            .map(|s| s.map_or("unreached".to_string(), |s| s.to_string()))
            .collect::<Vec<_>>()
            .join("/")
    };
    let mut small = Vec::new();
    let mut large = Vec::new();
    for seed in SCALE_SEEDS {
        small.push(steps_to_target(&corpus, 2, 64, seed)?);
        large.push(steps_to_target(&corpus, 4, 128, seed)?);
    }
    let as_f = |v: &[Option<u64>]| {
        v.iter()
            .map(|s| s.map_or(f64::INFINITY, |s| s as f64))
            .collect::<Vec<_>>()
    };
    let (ms, ml) = (median(&mut as_f(&small)), median(&mut as_f(&large)));
    let detail = format!(
        "steps to loss {SCALE_TARGET_LOSS}: L4-H128 {} (median {ml}) vs L2-H64 {} (median {ms}), {:.0?}",
        show(&large),
        show(&small),
        start.elapsed()
    );
    within(SCALE_TIME, start, "scale comparison")?;
    ensure!(ml.is_finite() && ml < ms, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 9

const ROBUST_SEEDS: [u64; 3] = [0, 1, 2];
/// Equal budgets on a simulated clock charging analytic FLOPs at a fixed rate.
const ROBUST_BUDGET_SECONDS: f64 = 60.0;
const ROBUST_FLOPS_PER_SECOND: f64 = 1e9;
const ROBUST_BITS: u32 = 4;

fn quantization_drop(corpus: &Corpus, layers: usize, hidden: usize, seed: u64) -> Result<(f64, u64), String> {
    let mut c = ModelConfig::new(layers, hidden, corpus.vocab_size());
    c.max_seq_len = 32;
    c.dropout = 0.0;
    c.seed = seed;
    let mut m = ok(TransformerModel::<f32>::new(c))?;
    let cfg = TrainConfig {
        peak_lr: 5e-4,
        batch_size: 16,
        micro_batch: 16,
        seq_len: 32,
        warmup_steps: 20,
        total_steps: 100_000,
        time_budget_seconds: Some(ROBUST_BUDGET_SECONDS),
        clock: Clock::Simulated {
            flops_per_second: ROBUST_FLOPS_PER_SECOND,
        },
        eval_interval: 100_000,
        seed,
        ..Default::default()
    };
    let mut state = TrainState::new(&m, &cfg);
    ok(train_mlm(&mut m, corpus, &cfg, &mut state))?;
    let data = ok(make_synthetic_classification(
        3000,
        16,
        corpus.vocab_size(),
        LabelRule::MajorityToken,
        seed,
    ))?;
    let ft = FinetuneConfig {
        lr: 1e-3,
        batch_size: 32,
        epochs: 3,
        seed,
        ..Default::default()
    };
    ok(finetune_classifier(&mut m, &data, &ft))?;
    let full = ok(accuracy(&m, &data.validation))?;
    let quantized = ok(accuracy(&ok(quantize_model(&m, ROBUST_BITS))?, &data.validation))?;
    Ok((full - quantized, state.step))
}

fn criterion_9() -> Outcome {
    let text = synthetic_text(SCALE_CORPUS_BYTES, 7);
    let corpus = ok(Corpus::from_text(&text, TokenScheme::Char, 256, 7, "synthetic"))?;
    let (mut small, mut large) = (Vec::new(), Vec::new());
    let mut steps = (0, 0);
    for seed in ROBUST_SEEDS {
        let (d, s) = quantization_drop(&corpus, 2, 64, seed)?;
        small.push(d);
        steps.0 = s;
        let (d, s) = quantization_drop(&corpus, 4, 128, seed)?;
        large.push(d);
        steps.1 = s;
    }
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>().join("/");
    let detail = format!(
        "{ROBUST_BITS}-bit drop: L4-H128 {} ({} steps) vs L2-H64 {} ({} steps)",
        fmt(&large),
        steps.1,
        fmt(&small),
        steps.0
    );
    let (ms, ml) = (median(&mut small), median(&mut large));
    ensure!(ml <= ms, "{detail}; median {ml:.4} > {ms:.4}");
    Ok(format!("{detail}; median {ml:.4} <= {ms:.4}"))
}

// ---------------------------------------------------------------- 10

const RECOVERY_TARGET: f64 = 0.45;
const RECOVERY_MAX_EPOCHS: f64 = 2.0;

fn criterion_10() -> Outcome {
    let data = ok(make_synthetic_classification(
        2000,
        16,
        32,
        LabelRule::MajorityToken,
        10,
    ))?;
    let mut c = ModelConfig::new(2, 64, 32);
    c.max_seq_len = 17;
    c.seed = 10;
    let mut m = ok(TransformerModel::<f64>::new(c))?;
    let ft = FinetuneConfig {
        lr: 1e-3,
        batch_size: 32,
        epochs: 6,
        seed: 10,
        ..Default::default()
    };
    ok(finetune_classifier(&mut m, &data, &ft))?;
    let reference = ok(accuracy(&m, &data.validation))?;
    let schedule: Vec<f64> = PRUNE_SCHEDULE
        .iter()
        .copied()
        .filter(|&s| s <= RECOVERY_TARGET + 1e-12)
        .collect();
    let cfg = RecoveryConfig {
        finetune: ft.clone(),
        max_epochs: RECOVERY_MAX_EPOCHS,
        ..Default::default()
    };
    let fresh = PruneState::new(&m);
    let (state, log) = ok(iterative_prune_with_recovery(&mut m, &data, &schedule, &cfg, fresh))?;
    let epochs: f64 = log.iter().map(|l| l.recovery_epochs).sum();
    let last = log.last().ok_or("no levels")?;
    let detail = format!(
        "reference {reference:.4}, at {:.2} sparsity {:.4} after pruning, {:.4} after {epochs:.2} recovery epochs",
        state.realized_sparsity(),
        last.accuracy_after_prune,
        last.final_accuracy
    );
    ensure!((state.realized_sparsity() - RECOVERY_TARGET).abs() < 1e-3, "{detail}");
    ensure!(last.final_accuracy >= cfg.ratio * reference, "{detail}: not recovered");
    ensure!(epochs <= RECOVERY_MAX_EPOCHS, "{detail}: too many epochs");
    Ok(format!(
        "{detail}; lowest post-prune accuracy {:.4}",
        log.iter().map(|l| l.accuracy_after_prune).fold(1.0, f64::min)
    ))
}

// ---------------------------------------------------------------- 11

const PARETO_SETS: usize = 1000;

/// Frontier labels by pairwise dominance; exact duplicates keep the
/// smallest label.
fn pareto_oracle(points: &[CompressionPoint], metric: MemoryMetric, mode: MetricMode) -> BTreeSet<String> {
    let same =
        |a: &CompressionPoint, b: &CompressionPoint| a.memory(metric) == b.memory(metric) && a.accuracy == b.accuracy;
    points
        .iter()
        .filter(|p| {
            !points
                .iter()
                .any(|q| dominates(q, p, metric, mode) || (same(q, p) && q.label < p.label))
        })
        .map(|p| p.label.clone())
        .collect()
}

fn criterion_11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut sizes = 0;
    for set in 0..PARETO_SETS {
        let n = rng.random_range(1..=40);
        let grid = rng.random_bool(0.5);
        let mut points: Vec<CompressionPoint> = (0..n)
            .map(|i| {
                let (mem, nz, acc) = if grid {
                    (
                        rng.random_range(1..=8u64),
                        rng.random_range(1..=8u64),
                        rng.random_range(0..=5) as f64 / 5.0,
                    )
                } else {
                    (
                        rng.random_range(1..=1_000_000u64),
                        rng.random_range(1..=1000u64),
                        rng.random::<f64>(),
                    )
                };
                CompressionPoint::new(format!("p{i:02}"), mem, nz, acc)
            })
            .collect();
        points.shuffle(&mut rng);
        for metric in [MemoryMetric::Bits, MemoryMetric::NonzeroParams] {
            for mode in [MetricMode::Maximize, MetricMode::Minimize] {
                let f = ok(pareto_frontier(&points, metric, mode))?;
                let got: BTreeSet<String> = f.frontier.iter().map(|p| p.label.clone()).collect();
                ensure!(got.len() == f.frontier.len(), "set {set}: duplicate frontier labels");
                ensure!(
                    got == pareto_oracle(&points, metric, mode),
                    "set {set} {metric:?} {mode:?}: frontier differs"
                );
                ensure!(f.frontier.len() + f.dominated.len() == n, "set {set}: points lost");
                ensure!(
                    f.frontier.windows(2).all(|w| w[0].memory(metric) < w[1].memory(metric)),
                    "set {set}: order"
                );
                sizes += f.frontier.len();
            }
        }
    }
    Ok(format!(
        "{PARETO_SETS} sets x 4 orientations match ({sizes} frontier points)"
    ))
}

// ---------------------------------------------------------------- 12

const STATS_TOL: f64 = 1e-10;

fn criterion_12() -> Outcome {
    let mut c = ModelConfig::new(2, 32, 40);
    c.max_seq_len = 16;
    c.seed = 12;
    let original = ok(TransformerModel::<f64>::new(c))?;
    let mut worst = 0.0f64;
    for bits in [2, 4, 8] {
        let q = ok(quantize_model(&original, bits))?;
        let groups = ok(compression_error_stats(&original, &q))?;
        let whole = ok(whole_model_error_stats(&original, &q))?;
        let n: usize = groups.iter().map(|g| g.count).sum();
        ensure!(
            n == whole.count && n == original.total_parameters(),
            "counts {n} vs {}",
            whole.count
        );
        let combined = groups.iter().map(|g| g.mean * g.count as f64).sum::<f64>() / n as f64;
        let pooled = ErrorStats::pooled("all", &groups);
        for d in [
            (combined - whole.mean).abs(),
            (pooled.mean - whole.mean).abs(),
            (pooled.variance - whole.variance).abs(),
        ] {
            ensure!(d <= STATS_TOL, "k={bits}: pooled statistics differ by {d:e}");
            worst = worst.max(d);
        }
    }
    let mut pruned = original.clone();
    let state = ok(prune_global(&mut pruned, 0.45, &PruneState::new(&original)))?;
    let mut masked = 0;
    for (name, _, diff) in ok(weight_differences(&original, &pruned))? {
        let orig = original.parameter(&name).ok_or("parameter")?.tensor.data();
        match state.mask(&name) {
            Some(mask) => {
                for ((d, w), &m) in diff.iter().zip(orig).zip(mask) {
                    let want = if m { *w } else { 0.0 };
                    ensure!(d.to_bits() == want.to_bits(), "{name}: difference {d} vs {want}");
                    masked += m as usize;
                }
            }
            None => ensure!(diff.iter().all(|&d| d == 0.0), "{name}: unpruned tensor changed"),
        }
    }
    ensure!(
        masked == state.pruned_count(),
        "masked positions {masked} vs {}",
        state.pruned_count()
    );
    Ok(format!(
        "pooled vs whole within {worst:.1e}; {masked} masked errors equal the original weights"
    ))
}

// ---------------------------------------------------------------- 13

const CORRUPTION_TRIALS: usize = 2000;

fn is_typed_corruption(e: &Error) -> bool {
    matches!(
        e,
        Error::Truncated(_)
            | Error::BadMagic(_)
            | Error::VersionMismatch(_)
            | Error::MalformedCheckpoint(_)
            | Error::CorruptPacked { .. }
            | Error::InvalidBits(_)
            | Error::InvalidConfig(_)
            | Error::ModelMismatch(_)
            | Error::Shape { .. }
            | Error::InvalidArgument(_)
    )
}

fn criterion_13() -> Outcome {
    let corpus = ok(Corpus::from_text(
        &synthetic_text(20_000, 13),
        TokenScheme::Char,
        64,
        13,
        "ckpt",
    ))?;
    let mut c = ModelConfig::new(2, 16, corpus.vocab_size());
    c.num_heads = 2;
    c.max_seq_len = 16;
    let mut m = ok(TransformerModel::<f64>::new(c))?;
    let cfg = TrainConfig {
        batch_size: 4,
        micro_batch: 4,
        seq_len: 16,
        warmup_steps: 2,
        total_steps: 5,
        eval_interval: 5,
        clock: Clock::Simulated { flops_per_second: 1e9 },
        ..Default::default()
    };
    let mut state = TrainState::new(&m, &cfg);
    ok(train_mlm(&mut m, &corpus, &cfg, &mut state))?;
    let fresh = PruneState::new(&m);
    let prune = ok(prune_global(&mut m, 0.3, &fresh))?;
    let ckpt = Checkpoint::from_model(&m).with_train_state(&state).with_prune(prune);

    let dir = ok(tempfile::tempdir())?;
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ok(save_checkpoint(&a, &ckpt))?;
    ok(save_checkpoint(&b, &ok(load_checkpoint::<f64>(&a))?))?;
    let bytes = ok(std::fs::read(&a))?;
    ensure!(bytes == ok(std::fs::read(&b))?, "save-load-save changed the file");

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for bits in 1..=8u32 {
        for _ in 0..50 {
            let n = rng.random_range(1..=300);
            let idx: Vec<u32> = (0..n).map(|_| rng.random_range(0..1u32 << bits)).collect();
            let packed = pack_indices(&idx, bits);
            ensure!(packed.len() == packed_len(n, bits), "k={bits}: packed length");
            ensure!(
                ok(unpack_indices(&packed, bits, n))? == idx,
                "k={bits}: indices changed"
            );
        }
        let q = ok(QuantizedModel::quantize(&m, bits, None))?;
        let qb = ok(Checkpoint::from_quantized(&q).to_bytes())?;
        let back = ok(Checkpoint::<f64>::from_bytes(&qb))?;
        ensure!(
            ok(back.to_bytes())? == qb,
            "k={bits}: quantized checkpoint not byte-stable"
        );
        let (x, y) = (ok(back.model())?, ok(q.dequantized())?);
        let weights = |m: &TransformerModel<f64>| {
            m.parameters()
                .iter()
                .map(|p| p.tensor.data().to_vec())
                .collect::<Vec<_>>()
        };
        ensure!(weights(&x) == weights(&y), "k={bits}: decoded weights differ");
    }

    for len in 0..bytes.len() {
        match Checkpoint::<f64>::from_bytes(&bytes[..len]) {
            Err(Error::Truncated(_)) => {}
            other => return Err(format!("prefix of {len} bytes gave {:?}", other.err())),
        }
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    ensure!(
        matches!(Checkpoint::<f64>::from_bytes(&bad), Err(Error::BadMagic(_))),
        "bad magic not detected"
    );
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&99u32.to_le_bytes());
    ensure!(
        matches!(Checkpoint::<f64>::from_bytes(&bad), Err(Error::VersionMismatch(99))),
        "version not detected"
    );
    let mut failures = 0;
    for _ in 0..CORRUPTION_TRIALS {
        let mut bad = bytes.clone();
        for _ in 0..rng.random_range(1..=4) {
            let i = rng.random_range(0..bad.len());
            bad[i] ^= 1 << rng.random_range(0..8);
        }
        match catch_unwind(|| Checkpoint::<f64>::from_bytes(&bad).map(|c| c.model().map(|_| ()))) {
            Err(_) => return Err("corrupted checkpoint panicked".into()),
            Ok(Err(e)) | Ok(Ok(Err(e))) => {
                ensure!(is_typed_corruption(&e), "untyped error {e:?}");
                failures += 1;
            }
            Ok(Ok(Ok(()))) => {}
        }
    }
    Ok(format!(
        "byte-identical resave; k=1..8 roundtrip; {} truncations and {failures}/{CORRUPTION_TRIALS} corruptions typed",
        bytes.len()
    ))
}

// ---------------------------------------------------------------- 14

fn criterion_14() -> Outcome {
    let counts: Vec<usize> = (1..=6)
        .map(|l| {
            let mut c = ModelConfig::new(l, 32, 50);
            c.share_mode = ShareMode::AllLayers;
            TransformerModel::<f32>::new(c).map(|m| m.encoder_parameter_count())
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure!(
        counts.windows(2).all(|w| w[0] == w[1]),
        "shared encoder counts vary with depth: {counts:?}"
    );
    let unshared =
        |l| ok(TransformerModel::<f32>::new(ModelConfig::new(l, 32, 50))).map(|m| m.encoder_parameter_count());
    ensure!(
        unshared(4)? == 4 * unshared(1)?,
        "unshared encoder count is not linear in depth"
    );

    let corpus = ok(Corpus::from_text(
        &synthetic_text(100_000, 14),
        TokenScheme::Char,
        64,
        14,
        "share",
    ))?;
    let mut c = ModelConfig::new(4, 32, corpus.vocab_size());
    c.share_mode = ShareMode::AllLayers;
    c.max_seq_len = 32;
    let mut m = ok(TransformerModel::<f64>::new(c))?;
    let cfg = TrainConfig {
        batch_size: 8,
        micro_batch: 8,
        seq_len: 32,
        warmup_steps: 10,
        total_steps: 100,
        eval_interval: 10,
        peak_lr: 1e-3,
        clock: Clock::Simulated { flops_per_second: 1e9 },
        ..Default::default()
    };
    let mut state = TrainState::new(&m, &cfg);
    let curve = ok(train_mlm(&mut m, &corpus, &cfg, &mut state))?;
    ensure!(state.step == 100, "stopped at step {}", state.step);
    ensure!(
        curve.iter().all(|p| p.val_loss.is_finite()),
        "non-finite validation loss"
    );
    ensure!(
        m.parameters().iter().all(|p| p.tensor.is_finite()),
        "non-finite parameters"
    );
    let (first, last) = (curve[0].val_loss, curve[curve.len() - 1].val_loss);
    ensure!(last < first, "loss rose from {first:.3} to {last:.3}");
    let crossing = ok(first_crossing(
        &LabeledCurve {
            label: "shared".into(),
            points: curve.clone(),
        },
        first,
    ))?;
    ensure!(crossing.reached(), "curve never reached its own first value");
    Ok(format!(
        "encoder params {} for L=1..6; loss {first:.3} -> {last:.3} over 100 steps",
        counts[0]
    ))
}

// ---------------------------------------------------------------- runner

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 14] = [
    (1, "quantization matches nearest-grid oracle", criterion_1),
    (2, "two-bit worked example", criterion_2),
    (3, "global magnitude pruning matches full sort", criterion_3),
    (4, "gradients match central differences", criterion_4),
    (5, "gradient accumulation is bit-exact", criterion_5),
    (6, "FLOP count matches shape enumeration", criterion_6),
    (7, "batch size learning-rate table", criterion_7),
    (8, "larger model needs fewer steps to a loss", criterion_8),
    (9, "larger model loses less accuracy at 4 bits", criterion_9),
    (10, "pruning to 45% recovers within 2 epochs", criterion_10),
    (11, "Pareto frontier matches dominance oracle", criterion_11),
    (12, "error statistics pool exactly", criterion_12),
    (13, "checkpoint roundtrip and corruption", criterion_13),
    (14, "all-layer sharing accounting and training", criterion_14),
];

fn main() {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut results = BTreeMap::new();
    for (n, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {tag}: {name} ({detail})");
        results.insert(n, outcome.is_ok());
    }
    std::panic::set_hook(hook);
    let failed: Vec<u32> = results.iter().filter(|(_, &ok)| !ok).map(|(&n, _)| n).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
