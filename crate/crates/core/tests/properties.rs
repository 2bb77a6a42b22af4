use std::path::Path;

use fuselab_core::checkpoint;
use fuselab_core::data::augment::{augment, Augment};
use fuselab_core::evaluation::roc_auc;
use fuselab_core::explain::{cam_map, normalize, upsample};
use fuselab_core::losses::{bce_loss, lmcl_loss, LmclParams};
use fuselab_core::models::{CnnArch, CnnParams, FusionParams, HeadKind, Patch};
use fuselab_core::{Graph, Tensor};
use proptest::prelude::*;

fn patch_strategy() -> impl Strategy<Value = Patch> {
    (2usize..12).prop_flat_map(|n| {
        prop::collection::vec(0.0f64..=1.0, n * n).prop_map(move |d| Patch::new(n, d).unwrap())
    })
}

fn op_strategy(size: usize) -> impl Strategy<Value = Augment> {
    let limit = (size / 10) as i32;
    prop_oneof![
        Just(Augment::HFlip),
        Just(Augment::VFlip),
        (0u8..4).prop_map(Augment::Rot90),
        (-limit..=limit, -limit..=limit).prop_map(|(dx, dy)| Augment::Translate { dx, dy }),
    ]
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec((0u32..15).prop_map(|v| v as f64 / 14.0), n),
            prop::collection::vec(0usize..2, n),
        )
            .prop_map(|(s, mut y)| {
                y[0] = 0;
                y[1] = 1;
                (s, y)
            })
    })
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        logits in prop::collection::vec(-30.0f64..30.0, 2..8),
        shift in -50.0f64..50.0,
    ) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(logits.clone())).unwrap();
        let b = g.constant(Tensor::vector(logits.iter().map(|v| v + shift).collect())).unwrap();
        let pa = g.softmax(a).unwrap();
        let pb = g.softmax(b).unwrap();
        prop_assert!((g.value(pa).data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn bce_is_non_negative(rows in prop::collection::vec((0.0f64..=1.0, 0usize..2), 1..10)) {
        let data: Vec<f64> = rows.iter().flat_map(|(p, _)| [1.0 - p, *p]).collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![rows.len(), 2], data).unwrap()).unwrap();
        let loss = bce_loss(&mut g, p, &labels).unwrap();
        prop_assert!(g.value(loss).item().unwrap() >= 0.0);
    }

    #[test]
    fn lmcl_ignores_positive_feature_scaling(
        d in 1usize..6,
        seed in any::<u64>(),
        scale in 0.01f64..100.0,
        m in 0.0f64..0.9,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) { v } else { -v }
            }).collect()
        };
        let f = draw(3 * d);
        let a = draw(2 * d);
        let labels = [0, 1, 1];
        let params = LmclParams { s: 16.0, m };
        let eval = |feat: Vec<f64>| {
            let mut g = Graph::new();
            let fv = g.constant(Tensor::new(vec![3, d], feat).unwrap()).unwrap();
            let av = g.constant(Tensor::new(vec![2, d], a.clone()).unwrap()).unwrap();
            let l = lmcl_loss(&mut g, fv, av, &labels, &params).unwrap();
            g.value(l).item().unwrap()
        };
        let base = eval(f.clone());
        let scaled = eval(f.iter().map(|v| v * scale).collect());
        prop_assert!((base - scaled).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn auc_is_rank_based((scores, labels) in scores_and_labels()) {
        let base = roc_auc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
        prop_assert_eq!(roc_auc(&transformed, &labels).unwrap().auc, base.auc);
        let swapped: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((roc_auc(&scores, &swapped).unwrap().auc - (1.0 - base.auc)).abs() <= 1e-12);
    }

    #[test]
    fn roc_curve_is_monotone_and_matches_trapezoid((scores, labels) in scores_and_labels()) {
        let c = roc_auc(&scores, &labels).unwrap();
        prop_assert_eq!(c.points[0], (0.0, 0.0));
        prop_assert_eq!(*c.points.last().unwrap(), (1.0, 1.0));
        for w in c.points.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        prop_assert!((c.trapezoid_area() - c.auc).abs() <= 1e-12);
    }

    #[test]
    fn augmentation_stays_in_the_patch_space(
        (patch, ops) in patch_strategy().prop_flat_map(|p| {
            let n = p.size();
            (Just(p), prop::collection::vec(op_strategy(n), 0..6))
        })
    ) {
        let mut out = patch.clone();
        for op in &ops {
            out = augment(&out, *op).unwrap();
        }
        prop_assert_eq!(out.size(), patch.size());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mut turned = patch.clone();
        for _ in 0..4 {
            turned = augment(&turned, Augment::Rot90(1)).unwrap();
        }
        prop_assert_eq!(&turned, &patch);
        let twice = augment(&augment(&patch, Augment::HFlip).unwrap(), Augment::HFlip).unwrap();
        prop_assert_eq!(&twice, &patch);
    }

    #[test]
    fn rot90_sends_r_c_to_c_last_minus_r(patch in patch_strategy()) {
        let n = patch.size();
        let r = augment(&patch, Augment::Rot90(1)).unwrap();
        for row in 0..n {
            for col in 0..n {
                prop_assert_eq!(r.get(col, n - 1 - row), patch.get(row, col));
            }
        }
    }

    #[test]
    fn checkpoints_reload_bit_exactly(
        channels in prop::collection::vec(1usize..4, 1..3),
        cosine in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let arch = CnnArch { patch_size: 8, channels, kernel: 3 };
        let head = if cosine { HeadKind::Cosine { scale: 12.5 } } else { HeadKind::Linear };
        let p = CnnParams::init(&arch, head, seed).unwrap();
        let back = checkpoint::decode_cnn(&checkpoint::encode_cnn(&p), Path::new("mem")).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn heatmaps_are_non_negative_and_scale_free(
        (c, h, w) in (1usize..4, 1usize..6, 1usize..6),
        seed in any::<u64>(),
        k in 1u32..6,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = c * h * w;
        // activations are post-ReLU in practice, but the map must be
        // non-negative for any input
        let act = Tensor::new(vec![c, h, w], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let grad = Tensor::new(vec![c, h, w], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let map = cam_map(&act, &grad).unwrap();
        prop_assert!(map.data().iter().all(|v| *v >= 0.0));
        // powers of two keep the scaling exact
        let factor = f64::powi(2.0, k as i32);
        let scaled = Tensor::new(vec![c, h, w], grad.data().iter().map(|g| g * factor).collect()).unwrap();
        prop_assert_eq!(normalize(&cam_map(&act, &scaled).unwrap()), normalize(&map));
    }

    #[test]
    fn upsampling_keeps_the_peak_near_its_cell(
        (h, w) in (1usize..6, 1usize..6),
        size in 8usize..40,
        cell in any::<prop::sample::Index>(),
    ) {
        let peak = cell.index(h * w);
        let mut data = vec![0.0; h * w];
        data[peak] = 1.0;
        let map = Tensor::new(vec![h, w], data).unwrap();
        let up = upsample(&map, size);
        prop_assert!(up.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let best = up.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let (r, c) = ((best / size) as f64, (best % size) as f64);
        let (pr, pc) = ((peak / w) as f64, (peak % w) as f64);
        // back to source-cell coordinates
        let sr = (r + 0.5) * h as f64 / size as f64 - 0.5;
        let sc = (c + 0.5) * w as f64 / size as f64 - 0.5;
        prop_assert!((sr - pr).abs() <= 1.0 && (sc - pc).abs() <= 1.0);
    }
}

#[test]
fn fusion_checkpoint_reloads() {
    let p = FusionParams::init(HeadKind::Cosine { scale: 30.0 }, true, 11);
    let back = checkpoint::decode_fusion(&checkpoint::encode_fusion(&p), Path::new("mem")).unwrap();
    assert_eq!(back, p);
}
