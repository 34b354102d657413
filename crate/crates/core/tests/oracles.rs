mod common;

use std::f64::consts::E;

use common::{rng, uniform};
use ndarray::{array, Array2, Array3, Array4, ArrayView4};
use rand::Rng;

use bml::data::{sample_episode, DatasetSplit, EpisodeSpec, ImageRecord, SplitRole};
use bml::evaluator::{episode_logits, fuse_logits, Embedder, Fusion, View};
use bml::losses::{
    compute_prototypes, elastic_constraint, elastic_local_loss, global_pointwise_loss, local_proto_loss,
    mutual_loss, total_loss, ElasticConfig, LossWeights, MetricConfig,
};
use bml::model::{classify_pointwise, parameter_count, BackboneConfig, DualViewFeatures, GlobalClassifier};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn global_loss_matches_scalar_loop() {
    let mut r = rng(1);
    let scores: Array4<f64> = uniform((2, 2, 2, 3), 2.0, &mut r);
    let labels = [2usize, 0];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let mut per_image = 0.0;
        for p in 0..2 {
            for q in 0..2 {
                let mut denom = 0.0;
                for j in 0..3 {
                    denom += scores[[i, p, q, j]].exp();
                }
                per_image += -(scores[[i, p, q, y]].exp() / denom).ln();
            }
        }
        total += per_image / 4.0;
    }
    let oracle = total / 2.0;
    let got = global_pointwise_loss(scores.view(), &labels).unwrap();
    assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
}

#[test]
fn global_loss_of_zero_scores_is_log_classes() {
    let scores = Array4::<f64>::zeros((3, 2, 2, 64));
    let got = global_pointwise_loss(scores.view(), &[0, 17, 63]).unwrap();
    assert!((got - 4.1589).abs() < 1e-4);
    assert!((got - 64f64.ln()).abs() < 1e-12);
}

#[test]
fn prototypes_are_support_means() {
    let mut r = rng(2);
    let support: Array2<f64> = uniform((15, 4), 3.0, &mut r);
    let labels: Vec<usize> = (0..15).map(|i| i % 3).collect();
    let protos = compute_prototypes(support.view(), &labels).unwrap();
    for c in 0..3 {
        for k in 0..4 {
            let mut sum = 0.0;
            for i in 0..15 {
                if labels[i] == c {
                    sum += support[[i, k]];
                }
            }
            assert!((protos[[c, k]] - sum / 5.0).abs() < 1e-7);
        }
    }
}

#[test]
fn proto_loss_on_hand_placed_points() {
    let protos: Array2<f64> = array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]];
    let queries: Array2<f64> = array![[0.2, 0.1], [1.5, -0.5], [0.0, 1.0]];
    let labels = [0usize, 1, 2];
    let mut oracle = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let d = |j: usize| (queries[[i, 0]] - protos[[j, 0]]).powi(2) + (queries[[i, 1]] - protos[[j, 1]]).powi(2);
        let denom = (-d(0)).exp() + (-d(1)).exp() + (-d(2)).exp();
        oracle += -((-d(y)).exp() / denom).ln();
    }
    oracle /= 3.0;
    let got = local_proto_loss(queries.view(), protos.view(), &labels, &MetricConfig::default()).unwrap();
    assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
}

#[test]
fn elastic_constraint_tabulated_points() {
    let at = |e: usize, big_e: usize| ElasticConfig::default().at_epoch(e, big_e);
    // Logits for Δ = logit[pos] - max negative.
    let point = |delta: f64| [-1.0, -1.0 - delta, -1.0 - 2.0 * delta.abs() - 1.0];
    assert_eq!(elastic_constraint(&point(3.0), 0, &at(0, 10)).unwrap(), 0.0);
    assert!((elastic_constraint(&point(0.0), 0, &at(10, 10)).unwrap() - 5.5 / 2.0).abs() < 1e-12);
    let d = elastic_constraint(&point(10.0), 0, &at(10, 10)).unwrap();
    assert!((d - 5.5 * sigmoid(1.0)).abs() < 1e-12);
    assert!((d - 4.0208).abs() < 1e-4, "{d}");
}

#[test]
fn elastic_loss_two_way_toy() {
    // One query at 0, prototypes at 1 and 2: squared distances 1 and 4.
    let query = Array4::from_elem((1, 1, 1, 1), 0.0);
    let protos = Array4::from_shape_vec((2, 1, 1, 1), vec![1.0, 2.0]).unwrap();
    let cfg = ElasticConfig::default().at_epoch(20, 20);
    let out = elastic_local_loss(query.view(), protos.view(), &[0], &cfg, &MetricConfig::default()).unwrap();

    let (d_pos, d_neg) = (1.0_f64, 4.0_f64);
    let delta = d_neg - d_pos;
    let d_el = 5.5 * 1.0 * sigmoid(0.1 * delta);
    let num = (-d_pos - d_el).exp();
    let oracle = -(num / (num + (-d_neg).exp())).ln();
    assert!((out.mean_delta - 3.0).abs() < 1e-12);
    assert!((out.mean_d_el - d_el).abs() < 1e-12);
    assert!((out.value - oracle).abs() < 1e-6, "{} vs {oracle}", out.value);
}

#[test]
fn mutual_loss_of_two_one_hots() {
    let a = Array4::from_shape_vec((1, 1, 1, 3), vec![1.0, 0.0, 0.0]).unwrap();
    let b = Array4::from_shape_vec((1, 1, 1, 3), vec![0.0, 0.0, 1.0]).unwrap();
    let z = E + 2.0;
    let p = [E / z, 1.0 / z, 1.0 / z];
    let q = [1.0 / z, 1.0 / z, E / z];
    let mut kl_pq = 0.0;
    let mut kl_qp = 0.0;
    for k in 0..3 {
        kl_pq += p[k] * (p[k] / q[k]).ln();
        kl_qp += q[k] * (q[k] / p[k]).ln();
    }
    let oracle = kl_pq + kl_qp;
    assert!((oracle - 2.0 * (E - 1.0) / (E + 2.0)).abs() < 1e-12);
    let got = mutual_loss(a.view(), b.view(), 1.0).unwrap();
    assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
}

#[test]
fn total_loss_weighting() {
    let (t, report) = total_loss(1.0, 1.0, 1.0, &LossWeights::default()).unwrap();
    assert_eq!(t, 7.0);
    assert_eq!(report.total_loss, 7.0);
    let mut r = rng(3);
    for _ in 0..20 {
        let (g, l, m) = (r.random_range(0.0..5.0), r.random_range(0.0..5.0), r.random_range(0.0..5.0));
        let w = LossWeights {
            alpha: r.random_range(0.0..4.0),
            beta: r.random_range(0.0..4.0),
            gamma: r.random_range(0.0..4.0),
        };
        let (t, _) = total_loss(g, l, m, &w).unwrap();
        assert!((t - (w.alpha * g + w.beta * l + w.gamma * m)).abs() < 1e-6);
    }
}

#[test]
fn pointwise_classifier_matches_per_point_dot_products() {
    let mut r = rng(4);
    let map = Array4::from_shape_simple_fn((1, 2, 2, 3), || r.random_range(-1.0f32..1.0));
    let weight = Array2::from_shape_simple_fn((5, 3), || r.random_range(-1.0f32..1.0));
    let bias = ndarray::Array1::from_shape_simple_fn(5, || r.random_range(-1.0f32..1.0));
    let clf = GlobalClassifier::new(weight.view(), bias.view()).unwrap();
    let scores = classify_pointwise(map.view(), &clf).unwrap();
    for p in 0..2 {
        for q in 0..2 {
            for c in 0..5 {
                let mut s = bias[c];
                for k in 0..3 {
                    s += weight[[c, k]] * map[[0, p, q, k]];
                }
                assert!((scores[[0, p, q, c]] - s).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn desk_parameter_count_matches_layer_tally() {
    // Per block: three 3×3 convs, a 1×1 shortcut, four batch norms (γ, β).
    let block = |cin: usize, c: usize| 9 * cin * c + 9 * c * c + 9 * c * c + cin * c + 4 * 2 * c;
    let shared = block(3, 16) + block(16, 32) + block(32, 64);
    let heads = 2 * block(64, 128);
    let classifier = 128 * 16 + 16;
    assert_eq!(shared, 5216 + 23808 + 94720);
    assert_eq!(heads, 755_712);
    let cfg = BackboneConfig::desk();
    assert_eq!(parameter_count(&cfg, 16), shared + heads + classifier);
    assert_eq!(parameter_count(&cfg, 16), 881_520);
}

#[test]
fn resnet12_parameter_counts_per_shared_depth() {
    let count = |k| {
        let cfg = BackboneConfig {
            shared_depth: k,
            ..BackboneConfig::resnet12()
        };
        parameter_count(&cfg, 64)
    };
    assert_eq!(count(3), 21_891_264);
    assert_eq!(count(2), 24_249_024);
    assert_eq!(count(1), 24_813_504);
    // The reference S0I4 figure also counts a second 640→64 classifier.
    assert_eq!(count(0) + 64 * 641, 24_930_688);
    assert!(count(3) < count(2) && count(2) < count(1) && count(1) < count(0));
}

/// Maps an image to `[v, 2v]` (global) and `[v, -v]` (local), where `v` is
/// the image's first pixel.
struct PlantedHead;

impl Embedder for PlantedHead {
    fn embed(&self, images: ArrayView4<f32>) -> bml::Result<DualViewFeatures> {
        let n = images.dim().0;
        let v = |i: usize| images[[i, 0, 0, 0]];
        Ok(DualViewFeatures {
            global_map: Array4::from_shape_fn((n, 1, 1, 2), |(i, _, _, k)| if k == 0 { v(i) } else { 2.0 * v(i) }),
            local_map: Array4::from_shape_fn((n, 1, 1, 2), |(i, _, _, k)| if k == 0 { v(i) } else { -v(i) }),
        })
    }
}

fn planted_split(values: &[[f32; 3]]) -> DatasetSplit {
    let mut split = DatasetSplit::empty("planted", SplitRole::Novel, 2);
    for (c, vals) in values.iter().enumerate() {
        split.classes.push(format!("c{c}"));
        split.images.push(
            vals.iter()
                .enumerate()
                .map(|(i, &v)| ImageRecord {
                    id: format!("c{c}/{i}"),
                    pixels: std::sync::Arc::new(Array3::from_elem((2, 2, 3), v)),
                })
                .collect(),
        );
    }
    split
}

#[test]
fn episode_logits_match_distance_oracle() {
    let split = planted_split(&[[0.1, 0.2, 0.3], [0.7, 0.9, 0.8]]);
    let spec = EpisodeSpec::new(2, 2, 1).unwrap();
    let ep = sample_episode(&split, spec, 11).unwrap();
    let metric = MetricConfig::default();
    for (view, scale2) in [(View::Global, 2.0f64), (View::Local, -1.0)] {
        let logits = episode_logits(&PlantedHead, &ep, view, &metric).unwrap();
        let mut proto = [0.0f64; 2];
        for item in &ep.support {
            proto[item.local_label] += item.image[[0, 0, 0]] as f64 / 2.0;
        }
        for (qi, item) in ep.query.iter().enumerate() {
            let v = item.image[[0, 0, 0]] as f64;
            for c in 0..2 {
                let d = (v - proto[c]).powi(2) + (scale2 * v - scale2 * proto[c]).powi(2);
                assert!((logits[[qi, c]] + d).abs() < 1e-6, "{view:?} q{qi} c{c}");
            }
        }
    }
}

#[test]
fn fusion_adds_rows() {
    let fused = fuse_logits(array![[1.0, 0.0]].view(), array![[0.0, 0.5]].view(), Fusion::Sum).unwrap();
    assert_eq!(fused, array![[1.0, 0.5]]);
    assert!(fused[[0, 0]] > fused[[0, 1]]);
}
