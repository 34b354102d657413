use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use super::metrics::EvalResult;
use crate::data::{apply_degradations, sample_episode, stack_images, DatasetSplit, Degradation, Episode, EpisodeSpec, Image};
use crate::error::{BmlError, Result};
use crate::losses::{compute_prototypes, MetricConfig};
use crate::model::{flatten_features, BmlNetwork, DualViewFeatures};
use crate::rng::{derive_seed, stream};

/// Anything that maps images to the two views' feature maps.
pub trait Embedder {
    fn embed(&self, images: ArrayView4<f32>) -> Result<DualViewFeatures>;
}

impl Embedder for BmlNetwork {
    fn embed(&self, images: ArrayView4<f32>) -> Result<DualViewFeatures> {
        self.forward_any_size(images)
    }
}

/// One of the two heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Global,
    Local,
}

/// A scored output: either head alone or their fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Fused,
    Global,
    Local,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Fused, Branch::Global, Branch::Local];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Fused => "fused",
            Branch::Global => "global",
            Branch::Local => "local",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Branch {
    type Err = BmlError;

    fn from_str(s: &str) -> Result<Self> {
        Branch::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| BmlError::invalid(format!("unknown branch `{s}` (fused|global|local)")))
    }
}

/// How the two heads' logits are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Elementwise sum of raw logits.
    #[default]
    Sum,
    /// Sum of per-head softmax probabilities.
    SoftmaxSum,
}

impl FromStr for Fusion {
    type Err = BmlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Fusion::Sum),
            "softmax_sum" => Ok(Fusion::SoftmaxSum),
            _ => Err(BmlError::invalid(format!("unknown fusion `{s}` (sum|softmax_sum)"))),
        }
    }
}

fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub fn fuse_logits(global: ArrayView2<f64>, local: ArrayView2<f64>, fusion: Fusion) -> Result<Array2<f64>> {
    if global.dim() != local.dim() {
        return Err(BmlError::shape(format!("global logits {:?} vs local logits {:?}", global.dim(), local.dim())));
    }
    Ok(match fusion {
        Fusion::Sum => &global + &local,
        Fusion::SoftmaxSum => softmax_rows(global) + softmax_rows(local),
    })
}

/// `-dist(query, prototype)` for flattened embeddings; prototypes are class
/// means of the support rows.
pub fn logits_from_embeddings(
    support: ArrayView2<f64>,
    support_labels: &[usize],
    query: ArrayView2<f64>,
    metric: &MetricConfig,
) -> Result<Array2<f64>> {
    metric.validate()?;
    let protos = compute_prototypes(support, support_labels)?;
    if protos.ncols() != query.ncols() {
        return Err(BmlError::shape(format!(
            "support embeddings have {} dims, queries {}",
            protos.ncols(),
            query.ncols()
        )));
    }
    let mut logits = Array2::zeros((query.nrows(), protos.nrows()));
    for (i, q) in query.rows().into_iter().enumerate() {
        let q = q.as_standard_layout();
        for (j, p) in protos.rows().into_iter().enumerate() {
            logits[[i, j]] = metric.logit(q.as_slice().expect("row"), p.as_slice().expect("row"));
        }
    }
    Ok(logits)
}

const EMBED_CHUNK: usize = 32;

/// Flattened `(global, local)` embeddings of a list of images.
fn embed_flat(model: &dyn Embedder, images: &[&Image]) -> Result<(Array2<f32>, Array2<f32>)> {
    let mut globals = Vec::new();
    let mut locals = Vec::new();
    for chunk in images.chunks(EMBED_CHUNK) {
        let batch = stack_images(chunk.iter().copied())?;
        let f = model.embed(batch.view())?;
        globals.push(flatten_features(f.global_map.view()));
        locals.push(flatten_features(f.local_map.view()));
    }
    let cat = |parts: Vec<Array2<f32>>| -> Result<Array2<f32>> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| BmlError::shape(e.to_string()))
    };
    Ok((cat(globals)?, cat(locals)?))
}

fn to_f64(x: ArrayView2<f32>) -> Array2<f64> {
    x.mapv(f64::from)
}

/// Support and query embeddings of one episode for both views.
struct EpisodeEmbeddings {
    support: [Array2<f64>; 2],
    query: [Array2<f64>; 2],
}

impl EpisodeEmbeddings {
    fn view(&self, view: View) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
        let i = view as usize;
        (self.support[i].view(), self.query[i].view())
    }
}

/// Where episode embeddings come from: a whole-split cache or per-episode
/// forward passes. Both apply the same per-image degradation seeds, so they
/// agree.
enum EmbeddingSource {
    Cached {
        global: Array2<f32>,
        local: Array2<f32>,
        offsets: Vec<usize>,
    },
    OnDemand,
}

struct Embedding<'a> {
    model: &'a dyn Embedder,
    split: &'a DatasetSplit,
    degradations: &'a [Degradation],
    seed: u64,
    source: EmbeddingSource,
}

impl<'a> Embedding<'a> {
    fn new(
        model: &'a dyn Embedder,
        split: &'a DatasetSplit,
        degradations: &'a [Degradation],
        seed: u64,
        cache_limit_bytes: usize,
    ) -> Result<Self> {
        let mut this = Self {
            model,
            split,
            degradations,
            seed,
            source: EmbeddingSource::OnDemand,
        };
        if split.num_images() == 0 {
            return Ok(this);
        }
        let probe = this.image(0, 0)?;
        let (g, l) = embed_flat(model, &[probe.as_ref()])?;
        let bytes = split.num_images() * (g.ncols() + l.ncols()) * std::mem::size_of::<f32>();
        if bytes <= cache_limit_bytes {
            let mut images = Vec::with_capacity(split.num_images());
            let mut offsets = Vec::with_capacity(split.num_classes());
            for (class, imgs) in split.images.iter().enumerate() {
                offsets.push(images.len());
                for idx in 0..imgs.len() {
                    images.push(this.image(class, idx)?);
                }
            }
            let refs: Vec<&Image> = images.iter().map(|i| i.as_ref()).collect();
            let (global, local) = embed_flat(model, &refs)?;
            this.source = EmbeddingSource::Cached { global, local, offsets };
        }
        Ok(this)
    }

    /// The image as the model sees it, degraded with a per-image seed.
    fn image(&self, class: usize, idx: usize) -> Result<Arc<Image>> {
        let pixels = &self.split.images[class][idx].pixels;
        if self.degradations.is_empty() {
            return Ok(Arc::clone(pixels));
        }
        let seed = derive_seed(self.seed, &[stream::DEGRADE, class as u64, idx as u64]);
        Ok(Arc::new(apply_degradations(pixels, self.degradations, seed)?))
    }

    fn episode(&self, episode: &Episode) -> Result<EpisodeEmbeddings> {
        let keys = |items: &[crate::data::EpisodeItem]| -> Vec<(usize, usize)> {
            items.iter().map(|i| (i.global_label, i.image_index)).collect()
        };
        let (s_keys, q_keys) = (keys(&episode.support), keys(&episode.query));
        match &self.source {
            EmbeddingSource::Cached { global, local, offsets } => {
                let gather = |m: &Array2<f32>, ks: &[(usize, usize)]| {
                    let rows: Vec<usize> = ks.iter().map(|&(c, i)| offsets[c] + i).collect();
                    to_f64(m.select(Axis(0), &rows).view())
                };
                Ok(EpisodeEmbeddings {
                    support: [gather(global, &s_keys), gather(local, &s_keys)],
                    query: [gather(global, &q_keys), gather(local, &q_keys)],
                })
            }
            EmbeddingSource::OnDemand => {
                let embed = |ks: &[(usize, usize)]| -> Result<[Array2<f64>; 2]> {
                    let imgs = ks.iter().map(|&(c, i)| self.image(c, i)).collect::<Result<Vec<_>>>()?;
                    let refs: Vec<&Image> = imgs.iter().map(|i| i.as_ref()).collect();
                    let (g, l) = embed_flat(self.model, &refs)?;
                    Ok([to_f64(g.view()), to_f64(l.view())])
                };
                Ok(EpisodeEmbeddings {
                    support: embed(&s_keys)?,
                    query: embed(&q_keys)?,
                })
            }
        }
    }
}

/// Query-by-class logits `[N·Q, N]` of one head on one episode.
pub fn episode_logits(model: &dyn Embedder, episode: &Episode, view: View, metric: &MetricConfig) -> Result<Array2<f64>> {
    let support: Vec<&Image> = episode.support.iter().map(|i| i.image.as_ref()).collect();
    let query: Vec<&Image> = episode.query.iter().map(|i| i.image.as_ref()).collect();
    let (sg, sl) = embed_flat(model, &support)?;
    let (qg, ql) = embed_flat(model, &query)?;
    let (s, q) = match view {
        View::Global => (sg, qg),
        View::Local => (sl, ql),
    };
    logits_from_embeddings(to_f64(s.view()).view(), &episode.support_labels(), to_f64(q.view()).view(), metric)
}

/// Index of the row maximum; ties go to the lowest index.
pub(crate) fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let correct = logits.rows().into_iter().zip(labels).filter(|(row, &l)| argmax(row.view()) == l).count();
    100.0 * correct as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTestConfig {
    pub spec: EpisodeSpec,
    pub n_episodes: usize,
    pub seed: u64,
    pub fusion: Fusion,
    pub metric: MetricConfig,
    pub degradations: Vec<Degradation>,
    /// Upper bound on memory for embedding the whole split up front.
    pub cache_limit_bytes: usize,
}

impl MetaTestConfig {
    pub fn new(spec: EpisodeSpec, n_episodes: usize, seed: u64) -> Self {
        Self {
            spec,
            n_episodes,
            seed,
            fusion: Fusion::Sum,
            metric: MetricConfig::default(),
            degradations: Vec::new(),
            cache_limit_bytes: 1 << 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTestReport {
    pub split: String,
    pub degradations: Vec<Degradation>,
    pub fused: EvalResult,
    pub global: EvalResult,
    pub local: EvalResult,
}

impl MetaTestReport {
    pub fn get(&self, branch: Branch) -> &EvalResult {
        match branch {
            Branch::Fused => &self.fused,
            Branch::Global => &self.global,
            Branch::Local => &self.local,
        }
    }
}

/// Runs `n_episodes` seeded episodes on `split` and scores all three
/// branches on the same episodes.
pub fn meta_test(model: &dyn Embedder, split: &DatasetSplit, cfg: &MetaTestConfig) -> Result<MetaTestReport> {
    cfg.spec.validate()?;
    if cfg.n_episodes == 0 {
        return Err(BmlError::invalid("meta-test needs at least one episode"));
    }
    let embedding = Embedding::new(model, split, &cfg.degradations, cfg.seed, cfg.cache_limit_bytes)?;
    let mut acc: [Vec<f64>; 3] = Default::default();
    for e in 0..cfg.n_episodes {
        let episode = sample_episode(split, cfg.spec, derive_seed(cfg.seed, &[stream::EVAL_EPISODE, e as u64]))?;
        let emb = embedding.episode(&episode)?;
        let s_labels = episode.support_labels();
        let q_labels = episode.query_labels();
        let logits = |view| {
            let (s, q) = emb.view(view);
            logits_from_embeddings(s, &s_labels, q, &cfg.metric)
        };
        let g = logits(View::Global)?;
        let l = logits(View::Local)?;
        let f = fuse_logits(g.view(), l.view(), cfg.fusion)?;
        acc[0].push(accuracy(&f, &q_labels));
        acc[1].push(accuracy(&g, &q_labels));
        acc[2].push(accuracy(&l, &q_labels));
    }
    let [f, g, l] = acc;
    Ok(MetaTestReport {
        split: split.name.clone(),
        degradations: cfg.degradations.clone(),
        fused: EvalResult::from_episodes(Branch::Fused, cfg.spec, f),
        global: EvalResult::from_episodes(Branch::Global, cfg.spec, g),
        local: EvalResult::from_episodes(Branch::Local, cfg.spec, l),
    })
}

/// Mean pairwise distance between the N flattened prototypes of one head,
/// averaged over seeded episodes.
pub fn prototype_dispersion(
    model: &dyn Embedder,
    split: &DatasetSplit,
    spec: EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    view: View,
    metric: &MetricConfig,
) -> Result<f64> {
    if n_episodes == 0 {
        return Err(BmlError::invalid("dispersion needs at least one episode"));
    }
    let embedding = Embedding::new(model, split, &[], seed, 1 << 30)?;
    let mut total = 0.0;
    for e in 0..n_episodes {
        let episode = sample_episode(split, spec, derive_seed(seed, &[stream::EVAL_EPISODE, e as u64]))?;
        let emb = embedding.episode(&episode)?;
        let protos = compute_prototypes(emb.view(view).0, &episode.support_labels())?;
        let n = protos.nrows();
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                let a = protos.row(i);
                let b = protos.row(j);
                sum += metric.distance(a.as_slice().expect("row"), b.as_slice().expect("row"));
                pairs += 1;
            }
        }
        if pairs > 0 {
            total += sum / pairs as f64;
        }
    }
    Ok(total / n_episodes as f64)
}
