//! Property tests: aggregation, metrics, folds, config and kernels.

mod common;

use common::{oracle_aggregate, pair_count_auc};
use mmbt::aggregation::{aggregate, AttnVariant, ImageAverageMode, ScaleMode};
use mmbt::autograd::Graph;
use mmbt::config::ExperimentConfig;
use mmbt::fusion::FeatureMode;
use mmbt::metrics::compute_auc;
use mmbt::tensor::Tensor;
use mmbt::train::stratified_folds;
use proptest::prelude::*;

fn rows(t: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), t)
}

/// `(query, keys, values)` with `1 ≤ T ≤ 8`, `1 ≤ d ≤ 16`.
fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..=8, 1usize..=16).prop_flat_map(|(t, d)| {
        (
            prop::collection::vec(-2.0f64..2.0, d),
            rows(t, d),
            rows(t, d),
        )
    })
}

fn scale_of(scaled: bool) -> ScaleMode {
    if scaled {
        ScaleMode::Scaled
    } else {
        ScaleMode::Literal
    }
}

/// Scores drawn from a small grid so ties are common, with both classes.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=50).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..10).prop_map(|v| v as f64 / 10.0), n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    })
}

proptest! {
    #[test]
    fn aggregate_matches_direct_summation((q, k, v) in instance(), scaled in any::<bool>()) {
        let r = aggregate(&q, &k, &v, scale_of(scaled)).unwrap();
        let (z, w) = oracle_aggregate(&q, &k, &v, scaled);
        for (a, b) in r.z_video.iter().zip(&z) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        for (a, b) in r.weights.iter().zip(&w) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn weights_positive_and_normalized((q, k, v) in instance()) {
        let r = aggregate(&q, &k, &v, ScaleMode::Literal).unwrap();
        prop_assert!(r.weights.iter().all(|&w| w > 0.0));
        prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn frame_permutation_permutes_weights((q, k, v) in instance(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<usize> = (0..k.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let kp: Vec<_> = perm.iter().map(|&i| k[i].clone()).collect();
        let vp: Vec<_> = perm.iter().map(|&i| v[i].clone()).collect();
        let a = aggregate(&q, &k, &v, ScaleMode::Literal).unwrap();
        let b = aggregate(&q, &kp, &vp, ScaleMode::Literal).unwrap();
        for (x, y) in a.z_video.iter().zip(&b.z_video) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((b.weights[j] - a.weights[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn z_video_in_convex_hull((q, k, v) in instance()) {
        let r = aggregate(&q, &k, &v, ScaleMode::Literal).unwrap();
        for (j, &z) in r.z_video.iter().enumerate() {
            let lo = v.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min);
            let hi = v.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(z >= lo - 1e-12 && z <= hi + 1e-12);
        }
    }

    #[test]
    fn single_frame_is_identity(q in prop::collection::vec(-5.0f64..5.0, 4), k in rows(1, 4), v in rows(1, 4)) {
        let r = aggregate(&q, &k, &v, ScaleMode::Literal).unwrap();
        prop_assert_eq!(&r.z_video, &v[0]);
        prop_assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn equal_keys_ignore_query_shift(
        q in prop::collection::vec(-2.0f64..2.0, 3),
        c in prop::collection::vec(-2.0f64..2.0, 3),
        key in prop::collection::vec(-2.0f64..2.0, 3),
        v in rows(5, 3),
    ) {
        let keys = vec![key; 5];
        let shifted: Vec<f64> = q.iter().zip(&c).map(|(a, b)| a + b).collect();
        let a = aggregate(&q, &keys, &v, ScaleMode::Literal).unwrap();
        let b = aggregate(&shifted, &keys, &v, ScaleMode::Literal).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() <= 1e-12 && (x - 0.2).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant(x in prop::collection::vec(-20.0f64..20.0, 1..12), c in -100.0f64..100.0) {
        let sm = |xs: &[f64]| {
            let mut g = Graph::<f64>::new();
            let v = g.input(Tensor::from_f64(&[1, xs.len()], xs).unwrap());
            let s = g.softmax(v, 1).unwrap();
            g.value(s).data().to_vec()
        };
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let (a, b) = (sm(&x), sm(&shifted));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!(*p > 0.0 && (p - q).abs() <= 1e-6);
        }
    }

    #[test]
    fn auc_equals_pair_count((scores, labels) in scored_labels()) {
        prop_assert_eq!(compute_auc(&scores, &labels).unwrap(), pair_count_auc(&scores, &labels));
    }

    #[test]
    fn auc_invariant_under_increasing_maps((scores, labels) in scored_labels(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = compute_auc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        prop_assert_eq!(compute_auc(&exp, &labels).unwrap(), base);
        prop_assert_eq!(compute_auc(&affine, &labels).unwrap(), base);
    }

    #[test]
    fn folds_are_stratified_cover(labels in prop::collection::vec(0u8..2, 10..120), k in 2usize..6, seed in any::<u64>()) {
        let counts = [labels.iter().filter(|&&l| l == 0).count(), labels.iter().filter(|&&l| l == 1).count()];
        prop_assume!(counts.iter().all(|&c| c >= k));
        let folds = stratified_folds(&labels, k, seed).unwrap();
        let mut seen = vec![0; labels.len()];
        for f in &folds {
            for &i in f {
                seen[i] += 1;
            }
            for class in [0u8, 1] {
                let got = f.iter().filter(|&&i| labels[i] == class).count() as f64;
                let expected = counts[class as usize] as f64 * f.len() as f64 / labels.len() as f64;
                prop_assert!((got - expected).abs() <= 1.0 + 1e-9, "class {} got {} expected {}", class, got, expected);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn config_text_round_trip(
        lr in 1e-6f64..1e-1,
        epochs in 0usize..100,
        batch in 1usize..9,
        k in 2usize..10,
        seeds in prop::collection::vec(any::<u64>(), 1..6),
        frames in 1usize..33,
        augment in any::<bool>(),
        variant in prop::sample::select(vec![AttnVariant::AttnToken, AttnVariant::ClsToken, AttnVariant::Uniform]),
        mode in prop::sample::select(vec![FeatureMode::Multi, FeatureMode::VideoOnly, FeatureMode::ImageOnly]),
        dist in any::<bool>(),
        scaled in any::<bool>(),
        share in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig { lr, epochs, batch_size: batch, k, seeds, frames, augment, ..Default::default() };
        cfg.model.attn_variant = variant;
        cfg.model.feature_mode = mode;
        cfg.model.scale_mode = scale_of(scaled);
        cfg.model.share_encoder = share;
        if dist {
            cfg.model.image_average_mode = ImageAverageMode::Distributions;
        }
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn matmul_is_associative(a in rows(3, 4), b in rows(4, 2), c in rows(2, 5)) {
        let flat = |r: &[Vec<f64>]| Tensor::from_f64(&[r.len(), r[0].len()], &r.concat()).unwrap();
        let mut g = Graph::<f64>::new();
        let (x, y, z) = (g.input(flat(&a)), g.input(flat(&b)), g.input(flat(&c)));
        let xy = g.matmul(x, y).unwrap();
        let left = g.matmul(xy, z).unwrap();
        let yz = g.matmul(y, z).unwrap();
        let right = g.matmul(x, yz).unwrap();
        for (p, q) in g.value(left).data().iter().zip(g.value(right).data()) {
            prop_assert!((p - q).abs() <= 1e-9 * p.abs().max(q.abs()).max(1.0));
        }
    }
}
