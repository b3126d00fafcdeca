//! Verification evaluation: embeddings, genuine/impostor pairs, ROC/AUC,
//! repeated trials and percentage-variation reports.

mod embeddings;
mod pairs;
mod report;
mod roc;

pub use embeddings::{
    extract_embeddings, Embedding, EmbeddingSet, EMBEDDING_MAGIC, EMBEDDING_VERSION, UNIT_NORM_TOL,
};
pub use pairs::{make_pairs, score, score_pairs, PairSet, ScoredPairs, DEFAULT_IMPOSTOR_RATIO};
pub use report::{
    from_csv, model_family, overlap_comparisons, percentage_variation, read_csv, repeat_eval,
    setting_label, to_csv, EvalRow, PvReport, RepeatSummary,
};
pub use roc::{roc_auc, RocCurve};
