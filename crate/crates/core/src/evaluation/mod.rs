//! Accuracy metrics, significance tests, comparison reports and embedding
//! clustering.

pub mod kmeans;
pub mod metrics;
pub mod report;
pub mod stats;

pub use kmeans::{kmeans, kmeans_embeddings, KMeansResult};
pub use metrics::{absolute_errors, mae, mre_pred, random_guess_mae, sa, RandomGuessEstimate};
pub use report::{compare_report, ComparisonTable, EvalReport, PairwiseComparison};
pub use stats::{a12, wilcoxon_signed_rank, Alternative, Better, WilcoxonResult};
