//! Sparse pattern mixture of experts for one-to-many generation.
//!
//! A small encoder-decoder shares its backbone across K output heads. Each
//! training pair is routed through a sparse simplex projection of pattern
//! logits, so only a few heads receive credit for it. The crate also ships a
//! synthetic corpus with known patterns and pattern-level diversity metrics.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod generate;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod projection;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use corpus::{generate_synthetic, load_corpus, pattern_purity, save_corpus, PatternCorpus, SyntheticSpec, TokenSequence, Vocabulary};
pub use error::{Error, Result};
pub use generate::{generate_all_patterns, GenerationSet};
pub use losses::{expert_cross_entropies, final_loss, load_balance_loss, pattern_logits, reconstruction_loss};
pub use metrics::{bleu, brevity_penalty, distinct_1, ngram_diversity, pairwise_bleu, pattern_diversity, pd_over_set, PdConfig};
pub use model::{Example, ExpertBundle, ModelConfig};
pub use projection::{brute_force_projection, projection_jacobian, sparsegen_lin, LogitVector, SimplexDistribution};
pub use train::{train_step, LossReport, Trainer};
