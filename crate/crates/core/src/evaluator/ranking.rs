use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use super::protocol::{fuse_logits, logits_from_embeddings, Embedder, Fusion};
use crate::data::{Episode, EpisodeSpec};
use crate::error::Result;
use crate::losses::MetricConfig;
use crate::model::flatten_features;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query_id: String,
    pub true_class: usize,
    /// `(local class id, fused score)`, best first.
    pub ranking: Vec<(usize, f64)>,
    /// 1-based position of the true class in `ranking`.
    pub truth_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub spec: EpisodeSpec,
    /// `class_map[local id]` is the split class index.
    pub class_map: Vec<usize>,
    pub queries: Vec<QueryRanking>,
    pub mean_truth_rank: f64,
}

/// Classes ordered by descending score; equal scores keep ascending class id.
pub fn rank_scores(scores: ArrayView1<f64>) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Ranks every query's classes by fused logit.
pub fn similarity_ranking(
    model: &dyn Embedder,
    episode: &Episode,
    fusion: Fusion,
    metric: &MetricConfig,
) -> Result<RankingReport> {
    let s = model.embed(episode.support_images()?.view())?;
    let q = model.embed(episode.query_images()?.view())?;
    let labels = episode.support_labels();
    let flat = |m: &ndarray::Array4<f32>| flatten_features(m.view()).mapv(f64::from);
    let g = logits_from_embeddings(flat(&s.global_map).view(), &labels, flat(&q.global_map).view(), metric)?;
    let l = logits_from_embeddings(flat(&s.local_map).view(), &labels, flat(&q.local_map).view(), metric)?;
    let fused = fuse_logits(g.view(), l.view(), fusion)?;
    let queries: Vec<QueryRanking> = episode
        .query
        .iter()
        .zip(fused.rows())
        .map(|(item, row)| {
            let ranking = rank_scores(row);
            let truth_rank = ranking.iter().position(|&(c, _)| c == item.local_label).expect("class present") + 1;
            QueryRanking {
                query_id: item.image_id.clone(),
                true_class: item.local_label,
                ranking,
                truth_rank,
            }
        })
        .collect();
    let mean_truth_rank = queries.iter().map(|q| q.truth_rank as f64).sum::<f64>() / queries.len().max(1) as f64;
    Ok(RankingReport {
        spec: episode.spec,
        class_map: episode.class_map.clone(),
        queries,
        mean_truth_rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ties_break_by_class_id() {
        let r = rank_scores(array![0.5, 2.0, 0.5, 2.0].view());
        assert_eq!(r.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 3, 0, 2]);
    }
}
