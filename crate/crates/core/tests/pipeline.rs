//! Pretrain, checkpoint, compress and rank through the public API.

use tltc_core::analysis::{pareto_frontier, CompressionPoint, MemoryMetric, MetricMode};
use tltc_core::compress::{combine_prune_quantize, RecoveryConfig};
use tltc_core::data::{make_synthetic_classification, synthetic_text, Corpus, LabelRule, TokenScheme};
use tltc_core::io::{load_checkpoint, save_checkpoint, Checkpoint};
use tltc_core::train::{accuracy, finetune_classifier, train_mlm, Clock, FinetuneConfig, TrainConfig, TrainState};
use tltc_core::{Model64, ModelConfig};

#[test]
fn train_save_compress_and_rank() {
    let corpus = Corpus::from_text(&synthetic_text(30_000, 5), TokenScheme::Char, 64, 5, "pipeline").unwrap();
    let mut c = ModelConfig::new(1, 16, corpus.vocab_size());
    c.max_seq_len = 17;
    c.seed = 5;
    let mut m = Model64::new(c).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        micro_batch: 2,
        seq_len: 16,
        warmup_steps: 3,
        total_steps: 30,
        eval_interval: 10,
        clock: Clock::Simulated { flops_per_second: 1e9 },
        seed: 5,
        ..Default::default()
    };
    let mut state = TrainState::new(&m, &cfg);
    let curve = train_mlm(&mut m, &corpus, &cfg, &mut state).unwrap();
    assert_eq!(state.step, 30);
    assert!(!curve.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Checkpoint::from_model(&m).with_train_state(&state)).unwrap();
    let loaded = load_checkpoint::<f64>(&path).unwrap();
    let restored = loaded.model().unwrap();
    for (a, b) in m.parameters().iter().zip(restored.parameters()) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
    assert_eq!(loaded.train_state().unwrap().step, 30);

    let data = make_synthetic_classification(300, 16, corpus.vocab_size(), LabelRule::MajorityToken, 5).unwrap();
    let ft = FinetuneConfig {
        lr: 1e-3,
        batch_size: 20,
        epochs: 2,
        seed: 5,
        ..Default::default()
    };
    let mut tuned = restored;
    finetune_classifier(&mut tuned, &data, &ft).unwrap();
    let recovery = RecoveryConfig {
        finetune: ft,
        ..Default::default()
    };

    let mut points = Vec::new();
    for bits in [4, 32] {
        for sparsity in [0.0, 0.3] {
            let out = combine_prune_quantize(&tuned, sparsity, bits, &data, &recovery).unwrap();
            assert_eq!(out.bits, bits);
            let acc = accuracy(&out.model, &data.validation).unwrap();
            assert!((0.0..=1.0).contains(&acc));
            points.push(CompressionPoint::new(
                format!("k{bits}-s{sparsity}"),
                out.memory_bits,
                out.nonzero as u64,
                acc,
            ));
        }
    }
    let dense32 = points.iter().find(|p| p.label == "k32-s0").unwrap();
    assert_eq!(dense32.accuracy, accuracy(&tuned, &data.validation).unwrap());
    assert!(points.iter().all(|p| p.memory_bits <= dense32.memory_bits));

    let f = pareto_frontier(&points, MemoryMetric::Bits, MetricMode::Maximize).unwrap();
    assert_eq!(f.frontier.len() + f.dominated.len(), points.len());
    assert!(f.frontier.windows(2).all(|w| w[0].memory_bits < w[1].memory_bits));
    assert!(f.frontier.windows(2).all(|w| w[0].accuracy < w[1].accuracy));
}
