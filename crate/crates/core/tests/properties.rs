use dgdm::attention::{
    channelwise_average_pool, global_average_pool, importance_map, sigmoid, ChannelAttention,
    SpatialAttentionMap,
};
use dgdm::cagd::{channel_drop_mask, CagdConfig};
use dgdm::eval::{
    bbox_from_map, compute_metrics, iou, raw_cam, BBox, LocalizationRecord,
    DEFAULT_THRESHOLD_FRACTION,
};
use dgdm::layer::{Branch, Dgdm, DgdmConfig};
use dgdm::sagd::{apply_spatial_mask, dilate_to_blocks, SpatialDropMask};
use dgdm::FeatureMap;
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

fn feature_map() -> impl Strategy<Value = FeatureMap> {
    (1usize..3, 1usize..6, 1usize..7, 1usize..7).prop_flat_map(|(b, c, h, w)| {
        proptest::collection::vec(-5.0f64..5.0, b * c * h * w).prop_map(move |v| {
            FeatureMap::new(Array4::from_shape_vec((b, c, h, w), v).unwrap()).unwrap()
        })
    })
}

fn bool_grid(b: usize, h: usize, w: usize) -> impl Strategy<Value = Array3<bool>> {
    proptest::collection::vec(proptest::bool::weighted(0.8), b * h * w)
        .prop_map(move |v| Array3::from_shape_vec((b, h, w), v).unwrap())
}

fn bbox(max: u32) -> impl Strategy<Value = BBox> {
    (0..max, 0..max, 1..=max, 1..=max)
        .prop_map(|(x0, y0, dx, dy)| BBox::new(x0, y0, x0 + dx, y0 + dy).unwrap())
}

proptest! {
    #[test]
    fn channel_and_spatial_means_commute(f in feature_map()) {
        let cap = channelwise_average_pool(&f);
        let gap = global_average_pool(&f);
        for b in 0..f.dims().0 {
            let a = cap.view().index_axis(Axis(0), b).mean().unwrap();
            let g = gap.view().row(b).mean().unwrap();
            prop_assert!(close(a, g, 1e-6), "{a} vs {g}");
        }
    }

    #[test]
    fn channel_pool_is_linear(f in feature_map(), a in -3.0f64..3.0, b in -3.0f64..3.0, shift in 0.1f64..2.0) {
        let g = FeatureMap::new(f.as_array().mapv(|v| v * 0.5 - shift)).unwrap();
        let mix = FeatureMap::new(f.as_array() * a + g.as_array() * b).unwrap();
        let lhs = channelwise_average_pool(&mix);
        let rhs = channelwise_average_pool(&f).view().to_owned() * a
            + channelwise_average_pool(&g).view().to_owned() * b;
        for (x, y) in lhs.view().iter().zip(rhs.iter()) {
            prop_assert!(close(*x, *y, 1e-6), "{x} vs {y}");
        }
    }

    #[test]
    fn importance_is_monotone_and_bounded(mut v in proptest::collection::vec(-30.0f64..30.0, 2..40)) {
        v.sort_by(f64::total_cmp);
        v.dedup();
        let n = v.len();
        let m = SpatialAttentionMap::new(Array3::from_shape_vec((1, 1, n), v.clone()).unwrap()).unwrap();
        let imp = importance_map(&m);
        let out: Vec<f64> = imp.view().iter().copied().collect();
        for w in out.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
        prop_assert!(out.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn sigmoid_stays_finite(x in proptest::num::f64::NORMAL) {
        let s = sigmoid(x);
        prop_assert!(s.is_finite() && (0.0..=1.0).contains(&s));
    }

    #[test]
    fn strong_channels_always_survive(
        s in proptest::collection::vec(-4.0f64..4.0, 1..12),
        alpha in 0.0f64..=1.0,
        beta in 1.0f64..6.0,
        seed in any::<u64>(),
    ) {
        let c = s.len();
        let att = ChannelAttention::new(Array2::from_shape_vec((1, c), s.clone()).unwrap()).unwrap();
        let cfg = CagdConfig { alpha, beta };
        let mask = channel_drop_mask(&att, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let again = channel_drop_mask(&att, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&mask, &again);
        let tau = beta * s.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        for (ci, v) in s.iter().enumerate() {
            if v.abs() >= tau && tau > 0.0 {
                prop_assert!(mask.view()[[0, ci]]);
            }
        }
        prop_assert!(mask.view().iter().any(|&k| k));
    }

    #[test]
    fn dilation_is_monotone_in_seeds(
        (grid, extra) in (1usize..9, 1usize..9).prop_flat_map(|(h, w)| (bool_grid(1, h, w), (0..h, 0..w))),
        block in 1usize..5,
    ) {
        let before = dilate_to_blocks(&SpatialDropMask::new(grid.clone()), block).unwrap();
        let mut more = grid;
        more[[0, extra.0, extra.1]] = false;
        let after = dilate_to_blocks(&SpatialDropMask::new(more), block).unwrap();
        for (b, a) in before.view().iter().zip(after.view().iter()) {
            prop_assert!(*b || !*a, "a zero pixel became one");
        }
    }

    #[test]
    fn spatial_mask_commutes_with_channel_pool(
        (f, grid) in feature_map().prop_flat_map(|f| {
            let (b, _, h, w) = f.dims();
            (Just(f), bool_grid(b, h, w))
        })
    ) {
        let mask = SpatialDropMask::new(grid.clone());
        let lhs = channelwise_average_pool(&apply_spatial_mask(&f, &mask).unwrap());
        let rhs = channelwise_average_pool(&f).view().to_owned()
            * grid.mapv(|k| if k { 1.0 } else { 0.0 });
        prop_assert_eq!(lhs.view().to_owned(), rhs);
    }

    #[test]
    fn iou_is_symmetric(a in bbox(20), b in bbox(20)) {
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
        prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
    }

    #[test]
    fn box_ignores_positive_rescaling(
        v in proptest::collection::vec(0.0f64..1.0, 64),
        exp in -8i32..8,
        thr in 0.05f64..0.95,
    ) {
        let map = Array2::from_shape_vec((8, 8), v).unwrap();
        let scaled = &map * 2f64.powi(exp);
        prop_assert_eq!(bbox_from_map(map.view(), thr), bbox_from_map(scaled.view(), thr));
    }

    #[test]
    fn localization_never_exceeds_classification(
        recs in proptest::collection::vec((0usize..3, 0usize..3, 0.0f64..1.0, 0.0f64..1.0), 1..60)
    ) {
        let b = BBox::full(4, 4);
        let records: Vec<LocalizationRecord> = recs
            .iter()
            .enumerate()
            .map(|(i, &(t, p, gi, pi))| LocalizationRecord {
                image_id: i.to_string(),
                true_class: t,
                pred_class: p,
                gt_class_box: b,
                pred_class_box: b,
                gt_boxes: vec![b],
                gt_class_iou: gi,
                pred_class_iou: pi,
            })
            .collect();
        let r = compute_metrics(&records, DEFAULT_THRESHOLD_FRACTION).unwrap();
        prop_assert!(r.top1_loc <= r.top1_clas);
    }

    #[test]
    fn cam_is_linear_in_weights(
        (feat, w1, w2) in (1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| (
            proptest::collection::vec(0.0f64..4.0, c * h * w)
                .prop_map(move |v| Array3::from_shape_vec((c, h, w), v).unwrap()),
            proptest::collection::vec(-2.0f64..2.0, c).prop_map(Array1::from),
            proptest::collection::vec(-2.0f64..2.0, c).prop_map(Array1::from),
        )),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let mix = &w1 * a + &w2 * b;
        let lhs = raw_cam(feat.view(), mix.view()).unwrap();
        let rhs = raw_cam(feat.view(), w1.view()).unwrap() * a + raw_cam(feat.view(), w2.view()).unwrap() * b;
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            prop_assert!(close(*x, *y, 1e-9));
        }
    }

    #[test]
    fn dgdm_keeps_shape_and_zeroes_erased_pixels(f in feature_map(), seed in any::<u64>()) {
        let f = FeatureMap::new(f.as_array().mapv(f64::abs)).unwrap();
        let layer = Dgdm::new(DgdmConfig { drop_rate: 1.0, ..DgdmConfig::default() }).unwrap();
        let (out, trace) = layer.forward_train(&f, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.dims(), f.dims());
        prop_assert_eq!(trace.branch, Branch::DropMask);
        let mask = trace.spatial_mask.expect("drop branch records its mask");
        let (_, c, _, _) = f.dims();
        for ((b, y, x), &keep) in mask.view().indexed_iter() {
            if !keep {
                for ch in 0..c {
                    prop_assert_eq!(out.view()[[b, ch, y, x]], 0.0);
                }
            }
        }
        prop_assert_eq!(layer.forward_eval(&f), f);
    }
}
