//! Corpus ingestion, MLM batching, and synthetic tasks.

mod classification;
mod corpus;
mod mlm;
mod synth;

pub use classification::{make_synthetic_classification, ClassificationData, LabelRule, LabeledDataset, NUM_CLASSES};
pub use corpus::{Corpus, TokenScheme, Vocabulary, CLS_ID, MASK_ID, NUM_RESERVED, PAD_ID, UNK_ID, VALIDATION_FRACTION};
pub use mlm::{make_mlm_batch, validation_batches, BatchSampler, MlmBatch, DEFAULT_MASK_RATE};
pub use synth::synthetic_text;
