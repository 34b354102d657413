//! Episodic meta-testing with binocular fusion, ranking and prototype
//! diagnostics, embedding export and report files.

mod export;
mod metrics;
mod protocol;
mod ranking;
mod report;

pub use export::export_embeddings;
pub use metrics::{ci95, EvalResult};
pub use protocol::{
    episode_logits, fuse_logits, logits_from_embeddings, meta_test, prototype_dispersion, Branch, Embedder,
    Fusion, MetaTestConfig, MetaTestReport, View,
};
pub use ranking::{rank_scores, similarity_ranking, QueryRanking, RankingReport};
pub use report::{write_csv_summary, write_json, SummaryRow};
