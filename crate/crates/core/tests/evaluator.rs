mod common;

use common::{constant_split, rng, uniform};
use ndarray::{Array2, Array3, Array4, ArrayView4};
use proptest::prelude::*;

use bml::data::{apply_degradation, sample_episode, Degradation, DegradationPreset, EpisodeSpec};
use bml::evaluator::{
    ci95, episode_logits, export_embeddings, fuse_logits, meta_test, prototype_dispersion, similarity_ranking,
    Embedder, Fusion, MetaTestConfig, View,
};
use bml::losses::MetricConfig;
use bml::model::{BackboneConfig, BmlNetwork, DualViewFeatures};

const CLASSES: usize = 6;

/// Embeds an image of `constant_split` as the one-hot vector of its class.
struct OneHot;

impl Embedder for OneHot {
    fn embed(&self, images: ArrayView4<f32>) -> bml::Result<DualViewFeatures> {
        let n = images.dim().0;
        let class = |i: usize| (images[[i, 0, 0, 0]] * CLASSES as f32).round() as usize;
        let map = Array4::from_shape_fn((n, 1, 1, CLASSES), |(i, _, _, k)| f32::from(u8::from(k == class(i))));
        Ok(DualViewFeatures {
            global_map: map.clone(),
            local_map: map,
        })
    }
}

/// Sends every image to the same point.
struct Collapse;

impl Embedder for Collapse {
    fn embed(&self, images: ArrayView4<f32>) -> bml::Result<DualViewFeatures> {
        let map = Array4::from_elem((images.dim().0, 1, 1, 3), 0.5);
        Ok(DualViewFeatures {
            global_map: map.clone(),
            local_map: map,
        })
    }
}

#[test]
fn separable_stub_scores_perfectly() {
    let split = constant_split(CLASSES, 10, 4);
    let cfg = MetaTestConfig::new(EpisodeSpec::new(5, 1, 5).unwrap(), 50, 0);
    let report = meta_test(&OneHot, &split, &cfg).unwrap();
    for b in [&report.fused, &report.global, &report.local] {
        assert_eq!(b.mean_accuracy, 100.0);
        assert_eq!(b.ci95, 0.0);
        assert_eq!(b.per_episode.len(), 50);
    }
}

#[test]
fn ci_is_recomputed_from_episodes() {
    let net = BmlNetwork::new(BackboneConfig::desk(), 16, 1).unwrap();
    let splits = common::desk_splits(20);
    let cfg = MetaTestConfig::new(EpisodeSpec::new(5, 1, 5).unwrap(), 2000, 3);
    let report = meta_test(&net, &splits.novel, &cfg).unwrap();
    for b in [&report.fused, &report.global, &report.local] {
        let n = b.per_episode.len() as f64;
        assert_eq!(n, 2000.0);
        let mean = b.per_episode.iter().sum::<f64>() / n;
        let var = b.per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        assert!((b.mean_accuracy - mean).abs() < 1e-9);
        assert!((b.ci95 - 1.96 * var.sqrt() / n.sqrt()).abs() < 1e-9);
        assert!((ci95(&b.per_episode) - b.ci95).abs() < 1e-12);
    }
}

#[test]
fn query_equal_to_its_support_wins() {
    let net = BmlNetwork::new(BackboneConfig::desk(), 16, 2).unwrap();
    let splits = common::desk_splits(20);
    let mut ep = sample_episode(&splits.novel, EpisodeSpec::new(5, 1, 2).unwrap(), 5).unwrap();
    for q in ep.query.iter_mut() {
        q.image = ep.support[q.local_label].image.clone();
    }
    for view in [View::Global, View::Local] {
        let logits = episode_logits(&net, &ep, view, &MetricConfig::default()).unwrap();
        for (row, q) in logits.rows().into_iter().zip(&ep.query) {
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(row[q.local_label], best);
        }
    }
}

#[test]
fn support_order_within_class_does_not_matter() {
    let net = BmlNetwork::new(BackboneConfig::desk(), 16, 2).unwrap();
    let splits = common::desk_splits(20);
    let ep = sample_episode(&splits.novel, EpisodeSpec::new(3, 3, 2).unwrap(), 8).unwrap();
    let mut shuffled = ep.clone();
    shuffled.support.reverse();
    for view in [View::Global, View::Local] {
        let a = episode_logits(&net, &ep, view, &MetricConfig::default()).unwrap();
        let b = episode_logits(&net, &shuffled, view, &MetricConfig::default()).unwrap();
        let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6 * scale));
    }
}

proptest! {
    #[test]
    fn shared_maximizer_survives_fusion(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let g: Array2<f64> = uniform((4, 5), 3.0, &mut r);
        let l: Array2<f64> = uniform((4, 5), 3.0, &mut r);
        let f = fuse_logits(g.view(), l.view(), Fusion::Sum).unwrap();
        for i in 0..4 {
            let (jg, jl) = (arg_of(g.row(i)), arg_of(l.row(i)));
            if jg == jl {
                prop_assert_eq!(arg_of(f.row(i)), jg);
            }
        }
        let uniform_local = Array2::from_elem((4, 5), 0.7);
        let f = fuse_logits(g.view(), uniform_local.view(), Fusion::Sum).unwrap();
        for i in 0..4 {
            prop_assert_eq!(arg_of(f.row(i)), arg_of(g.row(i)));
        }
    }
}

fn arg_of(row: ndarray::ArrayView1<f64>) -> usize {
    row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b })
}

#[test]
fn ranking_is_sorted_permutation() {
    let net = BmlNetwork::new(BackboneConfig::desk(), 16, 4).unwrap();
    let splits = common::desk_splits(20);
    let ep = sample_episode(&splits.novel, EpisodeSpec::new(4, 1, 3).unwrap(), 1).unwrap();
    let report = similarity_ranking(&net, &ep, Fusion::Sum, &MetricConfig::default()).unwrap();
    assert_eq!(report.queries.len(), 12);
    for q in &report.queries {
        let mut ids: Vec<usize> = q.ranking.iter().map(|r| r.0).collect();
        assert!(q.ranking.windows(2).all(|w| w[0].1 >= w[1].1));
        assert_eq!(q.ranking[q.truth_rank - 1].0, q.true_class);
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }
    let again = similarity_ranking(&net, &ep, Fusion::Sum, &MetricConfig::default()).unwrap();
    assert_eq!(report, again);

    let one_way = sample_episode(&splits.novel, EpisodeSpec::new(1, 1, 4).unwrap(), 1).unwrap();
    let report = similarity_ranking(&net, &one_way, Fusion::Sum, &MetricConfig::default()).unwrap();
    assert!(report.queries.iter().all(|q| q.truth_rank == 1));
}

#[test]
fn dispersion_geometry() {
    let split = constant_split(CLASSES, 4, 4);
    let spec = EpisodeSpec::new(2, 1, 1).unwrap();
    let collapsed = prototype_dispersion(&Collapse, &split, spec, 10, 0, View::Local, &MetricConfig::default()).unwrap();
    assert_eq!(collapsed, 0.0);
    let plain = MetricConfig {
        squared: false,
        ..MetricConfig::default()
    };
    let d = prototype_dispersion(&OneHot, &split, spec, 10, 0, View::Global, &plain).unwrap();
    assert!((d - 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn export_cardinality_and_determinism() {
    let net = BmlNetwork::new(BackboneConfig::desk(), 16, 4).unwrap();
    let mut split = common::desk_splits(20).novel;
    split.classes.truncate(2);
    split.images.truncate(2);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(export_embeddings(&net, &split, 3, &a).unwrap(), 12);
    export_embeddings(&net, &split, 3, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "# embedding_dim=512");
    let header = lines.next().unwrap();
    assert_eq!(header.split(',').count(), 3 + 2 * 2 * 128);
    assert_eq!(lines.count(), 12);
}

fn random_image(seed: u64, size: usize) -> Array3<f32> {
    let mut r = rng(seed);
    Array3::from_shape_simple_fn((size, size, 3), || rand::Rng::random_range(&mut r, 0.0f32..1.0))
}

#[test]
fn pepper_alters_about_one_percent_of_pixels() {
    for seed in 0..10 {
        let img = random_image(seed, 84);
        let out = apply_degradation(&img, &DegradationPreset::Pepper.degradation(84), seed).unwrap();
        let changed = (0..84)
            .flat_map(|y| (0..84).map(move |x| (y, x)))
            .filter(|&(y, x)| (0..3).any(|c| img[[y, x, c]] != out[[y, x, c]]))
            .count();
        let frac = changed as f64 / (84.0 * 84.0);
        assert!((0.005..=0.015).contains(&frac), "{frac}");
    }
}

#[test]
fn zero_strength_degradations_are_identities() {
    let img = random_image(3, 32);
    let blur = apply_degradation(&img, &Degradation::GaussianBlur { sigma_min: 0.0, sigma_max: 0.0 }, 1).unwrap();
    assert!(blur.iter().zip(&img).all(|(a, b)| (a - b).abs() < 1e-6));
    let jitter = apply_degradation(&img, &Degradation::ColorJitter { brightness: 0.0 }, 1).unwrap();
    assert_eq!(jitter, img);
}

#[test]
fn degradations_stay_in_range_and_are_seeded() {
    for preset in [DegradationPreset::Resize, DegradationPreset::Blur, DegradationPreset::Pepper, DegradationPreset::Jitter] {
        let img = random_image(9, 32);
        let d = preset.degradation(32);
        let a = apply_degradation(&img, &d, 5).unwrap();
        assert_eq!(a, apply_degradation(&img, &d, 5).unwrap());
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)), "{preset}");
        if preset == DegradationPreset::Resize {
            assert_eq!(a.dim(), (85, 85, 3));
        } else {
            assert_eq!(a.dim(), img.dim());
        }
    }
}

#[test]
fn degraded_meta_test_reports_all_branches_on_same_episodes() {
    let net = BmlNetwork::new(BackboneConfig::desk(), 16, 6).unwrap();
    let splits = common::desk_splits(20);
    let spec = EpisodeSpec::new(5, 1, 5).unwrap();
    let clean = meta_test(&net, &splits.novel, &MetaTestConfig::new(spec, 40, 2)).unwrap();
    for preset in [DegradationPreset::Resize, DegradationPreset::Blur, DegradationPreset::Pepper, DegradationPreset::Jitter] {
        let mut cfg = MetaTestConfig::new(spec, 40, 2);
        cfg.degradations = vec![preset.degradation(32)];
        let r = meta_test(&net, &splits.novel, &cfg).unwrap();
        assert_eq!(r.degradations, cfg.degradations);
        for (d, c) in [(&r.fused, &clean.fused), (&r.global, &clean.global), (&r.local, &clean.local)] {
            assert_eq!(d.per_episode.len(), c.per_episode.len());
            assert!(d.mean_accuracy.is_finite());
        }
    }
}
