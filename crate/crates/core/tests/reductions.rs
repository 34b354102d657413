mod common;

use common::{batch_of, rng, uniform};
use ndarray::{s, Array2, Array4};
use proptest::prelude::*;
use rand::Rng;

use bml::losses::{
    elastic_local_loss, global_pointwise_loss, local_proto_loss, mutual_loss, pointwise_proto_loss, ElasticConfig,
    MetricConfig,
};
use bml::model::{BackboneConfig, BmlNetwork};

/// Prototype loss evaluated separately at each spatial point, then averaged.
fn per_point_proto_loss(q: &Array4<f64>, p: &Array4<f64>, labels: &[usize], metric: &MetricConfig) -> f64 {
    let (_, h, w, _) = q.dim();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let qp: Array2<f64> = q.slice(s![.., i, j, ..]).to_owned();
            let pp: Array2<f64> = p.slice(s![.., i, j, ..]).to_owned();
            total += local_proto_loss(qp.view(), pp.view(), labels, metric).unwrap();
        }
    }
    total / (h * w) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn disabled_elastic_is_pointwise_proto_loss(seed in 0u64..10_000, epoch in 0usize..=30) {
        let mut r = rng(seed);
        let (n_way, nq) = (r.random_range(2..5), r.random_range(1..6));
        let shape = (r.random_range(1..3), r.random_range(1..3), r.random_range(1..4));
        let labels: Vec<usize> = (0..nq).map(|_| r.random_range(0..n_way)).collect();
        let q: Array4<f64> = uniform((nq, shape.0, shape.1, shape.2), 2.0, &mut r);
        let p: Array4<f64> = uniform((n_way, shape.0, shape.1, shape.2), 2.0, &mut r);
        let metric = MetricConfig { squared: r.random_bool(0.5), temperature: r.random_range(0.5..2.0) };
        let off = ElasticConfig { enabled: false, ..ElasticConfig::default() }.at_epoch(epoch, 30);
        let got = elastic_local_loss(q.view(), p.view(), &labels, &off, &metric).unwrap();
        let oracle = per_point_proto_loss(&q, &p, &labels, &metric);
        prop_assert!((got.value - oracle).abs() < 1e-7);
        prop_assert_eq!(got.mean_d_el, 0.0);
        let plain = pointwise_proto_loss(q.view(), p.view(), &labels, &metric).unwrap();
        prop_assert_eq!(plain.value, got.value);
    }

    #[test]
    fn elastic_at_epoch_zero_is_pointwise_proto_loss(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let q: Array4<f64> = uniform((3, 2, 2, 2), 2.0, &mut r);
        let p: Array4<f64> = uniform((3, 2, 2, 2), 2.0, &mut r);
        let labels = [0, 1, 2];
        let metric = MetricConfig::default();
        let on = ElasticConfig::default().at_epoch(0, 10);
        let got = elastic_local_loss(q.view(), p.view(), &labels, &on, &metric).unwrap();
        prop_assert!((got.value - per_point_proto_loss(&q, &p, &labels, &metric)).abs() < 1e-7);
    }

    #[test]
    fn identical_maps_have_zero_mutual_loss(seed in 0u64..10_000, t in 0.2f64..5.0) {
        let mut r = rng(seed);
        let a: Array4<f64> = uniform((r.random_range(1..4), 2, 2, r.random_range(1..5)), 3.0, &mut r);
        prop_assert_eq!(mutual_loss(a.view(), a.view(), t).unwrap(), 0.0);
    }

    #[test]
    fn single_point_global_loss_is_cross_entropy(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let (n, c) = (r.random_range(1..6), r.random_range(2..10));
        let scores: Array4<f64> = uniform((n, 1, 1, c), 4.0, &mut r);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let mut ce = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = scores.slice(s![i, 0, 0, ..]);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
            ce += lse - row[y];
        }
        ce /= n as f64;
        prop_assert!((global_pointwise_loss(scores.view(), &labels).unwrap() - ce).abs() < 1e-9);
    }
}

#[test]
fn fully_shared_network_has_zero_mutual_loss() {
    let cfg = BackboneConfig {
        shared_depth: 4,
        ..BackboneConfig::desk()
    };
    let net = BmlNetwork::new(cfg, 10, 3).unwrap();
    let feats = net.forward(batch_of(6, 32, 5).view()).unwrap();
    assert_eq!(feats.global_map, feats.local_map);
    let g = feats.global_map.mapv(f64::from);
    let l = feats.local_map.mapv(f64::from);
    assert_eq!(mutual_loss(g.view(), l.view(), 1.0).unwrap(), 0.0);
}
