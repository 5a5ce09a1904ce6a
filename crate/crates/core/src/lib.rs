//! Permutation-based approximate similarity search over VLAD image
//! descriptors.
//!
//! Objects are described by the ordering of a fixed set of reference objects
//! (pivots) by distance. Truncated orderings are rendered as weighted terms
//! (a *surrogate text representation*) and indexed in an inverted index whose
//! integer dot-product score ranks documents exactly as the squared
//! location-parameter Spearman Rho distance between the truncated orderings.
//!
//! The crate covers the full path:
//!
//! - [`codebook`] / [`vlad`]: k-means codebook training and VLAD aggregation
//!   with power and L2 normalization.
//! - [`permutation`]: reference selection, truncated permutations, surrogate
//!   documents for whole vectors (STR) and per-block (BSTR) encodings, and the
//!   matching distances.
//! - [`index`]: the inverted index and its exact top-c scorer.
//! - [`pruning`]: tf-idf based reduction of queries and indexed documents.
//! - [`pipeline`]: the STR / rSTR / BSTR / BSTR-tfidf search pipelines.
//! - [`eval`]: exact oracles, AP / mAP / recall metrics and synthetic data.

pub mod codebook;
pub mod error;
pub mod eval;
pub mod format;
pub mod index;
pub mod permutation;
pub mod pipeline;
pub mod pruning;
pub mod vlad;

pub use codebook::{assign_nn, train_codebook, Codebook, TrainingSummary};
pub use error::{Error, Result};
pub use eval::{
    average_precision, exact_scan, mean_ap, permutation_scan, recall_at, synth_dataset, EvalReport,
    GroundTruth, SynthConfig,
};
pub use index::{IndexStats, InvertedIndex, ScoredHit};
pub use permutation::{
    blockwise_distance, disjoint_distance, encode_bstr, encode_permutations, encode_str,
    select_references, spearman_rho_loc, BlockPermutations, PermutationVector, RefMode,
    ReferenceSet, SurrogateDocument, TruncatedPermutation,
};
pub use pipeline::{rerank, search, PipelineConfig, SearchMode, SearchResult, VladStore};
pub use pruning::{build_pruned_index, prune_by_tfidf};
pub use vlad::{aggregate, inner_product, normalize, LocalDescriptorSet, VladVector};
