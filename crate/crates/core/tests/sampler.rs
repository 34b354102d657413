mod common;

use std::collections::HashSet;

use common::{constant_split, desk_splits};
use proptest::prelude::*;

use bml::data::{
    generate_synthetic, load_source, sample_episode, sample_training_batch, DatasetSplit, EpisodeSpec, SplitRole,
};
use bml::evaluator::{meta_test, MetaTestConfig};
use bml::model::{BackboneConfig, BmlNetwork};
use bml::BmlError;

fn shared_split() -> &'static DatasetSplit {
    use std::sync::OnceLock;
    static SPLIT: OnceLock<DatasetSplit> = OnceLock::new();
    SPLIT.get_or_init(|| generate_synthetic(12, 16, 8, 3).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sampled_episodes_satisfy_invariants(n in 1usize..=12, k in 1usize..=8, q in 1usize..=8, seed: u64) {
        prop_assume!(k + q <= 16);
        let spec = EpisodeSpec::new(n, k, q).unwrap();
        let ep = sample_episode(shared_split(), spec, seed).unwrap();
        prop_assert!(ep.validate().is_ok(), "{:?}", ep.validate());
        prop_assert_eq!(ep.support.len(), n * k);
        prop_assert_eq!(ep.query.len(), n * q);
        let again = sample_episode(shared_split(), spec, seed).unwrap();
        prop_assert_eq!(&ep.class_map, &again.class_map);
        let ids = |e: &bml::data::Episode| e.items().map(|i| i.image_id.clone()).collect::<Vec<_>>();
        prop_assert_eq!(ids(&ep), ids(&again));
    }
}

#[test]
fn episode_cardinalities() {
    let split = shared_split();
    let ep = sample_episode(split, EpisodeSpec::new(5, 1, 15).unwrap(), 0).unwrap();
    assert_eq!((ep.support.len(), ep.query.len()), (5, 75));
    let ep = sample_episode(split, EpisodeSpec::new(5, 5, 3).unwrap(), 0).unwrap();
    assert_eq!(ep.class_map.len(), 5);
    assert_eq!(ep.support.len(), 25);
}

#[test]
fn default_training_batch_has_105_images() {
    let base = generate_synthetic(20, 8, 8, 1).unwrap();
    let spec = EpisodeSpec::training_default();
    let ep = sample_training_batch(&base, spec, 4).unwrap();
    assert_eq!(ep.class_map.len(), 15);
    assert_eq!(ep.items().count(), 105);
    assert_eq!(ep.items().map(|i| i.global_label).collect::<HashSet<_>>().len(), 15);
}

#[test]
fn too_few_classes_is_an_error() {
    let split = generate_synthetic(16, 4, 8, 1).unwrap();
    let err = sample_episode(&split, EpisodeSpec::new(20, 1, 1).unwrap(), 0).unwrap_err();
    assert!(matches!(err, BmlError::TooFewClasses { needed: 20, available: 16 }));
    let toy = generate_synthetic(10, 8, 8, 1).unwrap();
    assert!(sample_training_batch(&toy, EpisodeSpec::training_default(), 0).is_err());
    let err = sample_episode(&toy, EpisodeSpec::new(2, 5, 5).unwrap(), 0).unwrap_err();
    assert!(matches!(err, BmlError::TooFewImages { needed: 10, .. }));
}

#[test]
fn neighbouring_seeds_give_different_class_sets() {
    let base = generate_synthetic(20, 8, 8, 1).unwrap();
    let spec = EpisodeSpec::training_default();
    let mut same = 0;
    for s in 0..100u64 {
        let a = sample_training_batch(&base, spec, s).unwrap().class_map;
        let b = sample_training_batch(&base, spec, s + 1).unwrap().class_map;
        same += usize::from(a.iter().collect::<HashSet<_>>() == b.iter().collect::<HashSet<_>>());
    }
    assert!(same < 100);
}

#[test]
fn synthetic_generation_is_reproducible() {
    let a = generate_synthetic(8, 50, 32, 7).unwrap();
    assert_eq!(a.num_classes(), 8);
    assert_eq!(a.num_images(), 400);
    let b = generate_synthetic(8, 50, 32, 7).unwrap();
    for (x, y) in a.images.iter().flatten().zip(b.images.iter().flatten()) {
        assert_eq!(x.pixels, y.pixels);
    }
    assert!(generate_synthetic(1, 5, 32, 7).is_err());
    let uri = load_source("synthetic://classes=8,per=50,size=32,seed=7", 32).unwrap();
    assert_eq!(uri.base.num_classes() + uri.val.num_classes() + uri.novel.num_classes(), 8);
}

#[test]
fn benchmark_shaped_layout_loads_with_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let px = image::RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30]));
    for (role, n) in [("train", 60), ("val", 16), ("test", 20)] {
        for c in 0..n {
            let d = dir.path().join(role).join(format!("{role}_{c:02}"));
            std::fs::create_dir_all(&d).unwrap();
            px.save(d.join("0.png")).unwrap();
        }
    }
    let splits = bml::data::load_dataset(dir.path(), None, 4).unwrap();
    assert_eq!(
        [splits.base.num_classes(), splits.val.num_classes(), splits.novel.num_classes()],
        [60, 16, 20]
    );
    assert_eq!(splits.novel.role, SplitRole::Novel);
    assert!(splits.base.classes.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn untrained_model_is_at_chance_on_uninformative_images() {
    let net = BmlNetwork::new(BackboneConfig::desk(), 16, 0).unwrap();
    let split = common::noise_split(8, 30, 1);
    let cfg = MetaTestConfig::new(EpisodeSpec::new(5, 1, 15).unwrap(), 500, 42);
    let report = meta_test(&net, &split, &cfg).unwrap();
    for b in [&report.fused, &report.global, &report.local] {
        assert!((b.mean_accuracy - 20.0).abs() <= 2.0, "{:?}: {}", b.branch, b.mean_accuracy);
    }
}

#[test]
fn meta_test_is_reproducible() {
    let net = BmlNetwork::new(BackboneConfig::desk(), 16, 0).unwrap();
    let splits = desk_splits(20);
    let cfg = MetaTestConfig::new(EpisodeSpec::new(5, 1, 5).unwrap(), 30, 9);
    let a = meta_test(&net, &splits.novel, &cfg).unwrap();
    let b = meta_test(&net, &splits.novel, &cfg).unwrap();
    assert_eq!(a, b);
    let one = constant_split(3, 4, 32);
    assert!(meta_test(&net, &one, &cfg).is_err());
}
