//! Randomized property tests over the public API.

use proptest::prelude::*;

use sscn::config::RunConfig;
use sscn::ops;
use sscn::rulebook;
use sscn::train::iou_per_part;
use sscn::Matrix;
use sscn::SparseTensor;

proptest! {
    // densify(sparsify(x)) is the identity for any dense grid whose entries
    // are exactly representable
    #[test]
    fn densify_sparsify_round_trip(
        values in proptest::collection::vec(-8i32..=8, 36),
        dims in 2usize..=3,
    ) {
        let extents = if dims == 2 { vec![6, 6] } else { vec![4, 3, 3] };
        let dense: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let t = SparseTensor::<f64>::sparsify(&dense, dims, &extents, 1, 1, 0.0).unwrap();
        prop_assert_eq!(t.densify(), dense);
    }

    // the submanifold rule book never changes the active set, and every
    // pair list stays within row bounds
    #[test]
    fn ssc_preserves_active_set(
        cells in proptest::collection::hash_set((0i32..7, 0i32..7), 0..20),
    ) {
        let mut t = SparseTensor::<f64>::new(2, &[7, 7], 1, 1).unwrap();
        for (x, y) in &cells {
            t.set_site(sscn::Coordinate::new(0, &[*x, *y]), &[1.0]).unwrap();
        }
        let rb = rulebook::build_ssc(&t, 3).unwrap();
        prop_assert_eq!(rb.a_out(), t.active_count());
        prop_assert_eq!(&rb.out_coords, t.coords());
        for pairs in &rb.rules {
            for &(j, k) in pairs {
                prop_assert!((j as usize) < rb.a_in());
                prop_assert!((k as usize) < rb.a_out());
            }
        }
    }

    // strided SC output extents follow (l - f)/s + 1
    #[test]
    fn sc_output_extent(l in 2usize..=9, f in 2usize..=3, s in 1usize..=2) {
        prop_assume!(l >= f && (l - f) % s == 0);
        let mut t = SparseTensor::<f64>::new(2, &[l, l], 1, 1).unwrap();
        t.set_site(sscn::Coordinate::new(0, &[0, 0]), &[1.0]).unwrap();
        let rb = rulebook::build_sc(&t, f, s).unwrap();
        prop_assert_eq!(rb.out_spatial_size[0], (l - f) / s + 1);
    }

    // IoU does not depend on point order
    #[test]
    fn iou_permutation_invariant(
        pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..30),
        seed in 0u64..1000,
    ) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let parts = [0, 1, 2, 3];
        let a = iou_per_part(&preds, &labels, &parts).unwrap();
        // deterministic shuffle derived from the seed
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, (seed as usize + i * 7919) % (i + 1));
        }
        let p2: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let b = iou_per_part(&p2, &l2, &parts).unwrap();
        prop_assert_eq!(a, b);
    }

    // softmax rows are distributions; masked classes get exactly zero
    #[test]
    fn softmax_rows_normalized(
        logits in proptest::collection::vec(-20.0f64..20.0, 12),
        mask_bits in 1u8..15,
    ) {
        let m = Matrix::from_rows(3, 4, logits).unwrap();
        let mask: Vec<bool> = (0..4).map(|i| mask_bits & (1 << i) != 0).collect();
        let probs = ops::softmax_probs(&m, Some(&mask));
        for r in 0..3 {
            let row = probs.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (c, &allowed) in mask.iter().enumerate() {
                if !allowed {
                    prop_assert_eq!(row[c], 0.0);
                } else {
                    prop_assert!(row[c] >= 0.0);
                }
            }
        }
    }

    // any config survives serialize -> parse
    #[test]
    fn config_round_trip(
        filters_idx in 0usize..4,
        epochs in 1usize..200,
        lr0 in 0.001f64..1.0,
        views in 1usize..5,
        seed in 0u64..u64::MAX,
    ) {
        let mut cfg = RunConfig::default();
        cfg.filters0 = [8, 16, 32, 64][filters_idx];
        cfg.epochs = epochs;
        cfg.lr0 = lr0;
        cfg.views = views;
        cfg.seed = seed;
        let back = RunConfig::parse(&cfg.render(), std::path::Path::new("prop")).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
