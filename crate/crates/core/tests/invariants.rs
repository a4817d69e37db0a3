mod common;

use common::*;
use dear::attention::{attention_weights, unmask_attend, AttentionConfig};
use dear::autodiff::Tensor;
use dear::baselines::naive_inpaint_counted;
use dear::config::{EnsembleMode, HighpassMode};
use dear::dataset::generate_irregular_mask;
use dear::features::{elementwise_filter, FeatureMap, LatentMap, PixelKernelField};
use dear::imaging::{
    apply_mask, downsample, make_coord_grid, nearest_index, pixel_center, read_image, write_image, Image, Mask,
};
use dear::implicit::{build_queries, ensemble, NEIGHBORS};
use dear::importance::{reconstruct_lr, ReconKernelField};
use dear::model::{output_size, DearModel};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coordinate_grid_round_trips(h in 1usize..80, w in 1usize..80) {
        let grid = make_coord_grid(h, w).unwrap();
        prop_assert_eq!(grid.coords.len(), h * w);
        for (k, &[y, x]) in grid.coords.iter().enumerate() {
            prop_assert_eq!((nearest_index(y, h), nearest_index(x, w)), (k / w, k % w));
        }
    }

    #[test]
    fn downsampling_a_constant_is_constant(v in 0.0f32..=1.0, factor in 1usize..6, cells in 1usize..5) {
        let n = factor * cells;
        let img = Image::filled(n, n, 3, v).unwrap();
        let small = downsample(&img, factor).unwrap();
        prop_assert_eq!(small.shape(), (cells, cells, 3));
        for &p in small.data() {
            prop_assert!((p - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn masking_is_idempotent(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let mut r = rng(seed);
        let img = random_image(&mut r, h, w);
        let mask = random_mask(&mut r, h, w, 0.4);
        let once = apply_mask(&img, &mask).unwrap();
        let twice = apply_mask(once.raster(), &mask).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn ensemble_weights_are_convex(
        h in 1usize..24,
        w in 1usize..24,
        coords in prop::collection::vec((-1.0f64..=1.0, -1.0f64..=1.0), 1..64),
        invdist in any::<bool>(),
    ) {
        let mode = if invdist { EnsembleMode::Invdist } else { EnsembleMode::Area };
        let coords: Vec<[f64; 2]> = coords.into_iter().map(|(y, x)| [y, x]).collect();
        let q = build_queries((h, w), &coords, mode).unwrap();
        for (wts, idx) in q.weights.iter().zip(&q.neighbor_idx) {
            prop_assert!(wts.iter().all(|&v| v >= 0.0));
            prop_assert!((wts.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(idx.iter().all(|&i| i < h * w));
        }
    }

    #[test]
    fn ensemble_output_lies_between_neighbor_predictions(
        preds in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), NEIGHBORS),
        y in -1.0f64..=1.0,
        x in -1.0f64..=1.0,
    ) {
        let q = build_queries((5, 7), &[[y, x]], EnsembleMode::Area).unwrap();
        let per: [[f64; 3]; NEIGHBORS] = [preds[0], preds[1], preds[2], preds[3]];
        let out = ensemble(&[per], &q.weights).unwrap()[0];
        for ch in 0..3 {
            let lo = per.iter().map(|p| p[ch]).fold(f64::INFINITY, f64::min);
            let hi = per.iter().map(|p| p[ch]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[ch] >= lo - 1e-12 && out[ch] <= hi + 1e-12);
        }
    }

    #[test]
    fn naive_inpaint_terminates_within_h_plus_w_passes(seed in any::<u64>(), h in 1usize..24, w in 1usize..24, p in 0.0f64..0.99) {
        let mut r = rng(seed);
        let img = random_image(&mut r, h, w);
        let mask = random_mask(&mut r, h, w, p);
        let masked = apply_mask(&img, &mask).unwrap();
        let (out, passes) = naive_inpaint_counted(&masked).unwrap();
        prop_assert!(passes <= h + w, "{} passes on {}x{}", passes, h, w);
        for y in 0..h {
            for x in 0..w {
                if !mask.is_missing(y, x) {
                    prop_assert_eq!(out.pixel(y, x), img.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_outputs_convex(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, c in 1usize..5) {
        let mut r = rng(seed);
        let f = FeatureMap(random_tensor(&mut r, &[c, h, w]));
        let mask = random_mask(&mut r, h, w, 0.4);
        let cfg = AttentionConfig::default();
        let a = attention_weights(&f, &mask, cfg).unwrap();
        let n = h * w;
        for row in a.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        let e = unmask_attend(&f, &mask, cfg).unwrap();
        for ch in 0..c {
            let fc = &f.0.data()[ch * n..(ch + 1) * n];
            let lo = fc.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = fc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for &v in &e.0.data()[ch * n..(ch + 1) * n] {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn zero_kernels_filter_to_identity(seed in any::<u64>(), h in 1usize..10, w in 1usize..10, c in 1usize..4) {
        let mut r = rng(seed);
        let z = LatentMap(random_tensor(&mut r, &[c, h, w]));
        let k = PixelKernelField::new(Tensor::zeros(&[c * 9, h, w]), 3).unwrap();
        prop_assert_eq!(elementwise_filter(&z, &k).unwrap().0, z.0);
    }

    #[test]
    fn identity_kernels_reconstruct_exactly(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let mut r = rng(seed);
        let img = random_tensor(&mut r, &[3, h, w]);
        let weights = Tensor::from_fn(&[9, h, w], |i| if i / (h * w) == 4 { 1.0 } else { 0.0 });
        let k = ReconKernelField { weights, kernel_size: 3 };
        prop_assert_eq!(reconstruct_lr(&img, &k).unwrap(), img);
    }

    #[test]
    fn output_size_is_floor_of_scaled_size(h in 1usize..200, w in 1usize..200, s in 1.0f64..8.0) {
        let (oh, ow) = output_size(h, w, s).unwrap();
        prop_assert_eq!(oh, (h as f64 * s + 1e-9).floor() as usize);
        prop_assert_eq!(ow, (w as f64 * s + 1e-9).floor() as usize);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn feature_map_keeps_the_input_size(h in 8usize..=64, w in 8usize..=64, seed in any::<u64>()) {
        let model = DearModel::new(&tiny_config(), seed % 4).unwrap();
        let mut r = rng(seed);
        let (_, masked) = random_masked(&mut r, h, w);
        let f = model.extract_features(&masked).unwrap();
        prop_assert_eq!(f.0.shape(), &[tiny_config().feature_channels, h, w][..]);
    }
}

#[test]
fn lowpass_and_highpass_kernel_sums_over_random_inputs() {
    let mut literal = tiny_config();
    literal.highpass = HighpassMode::Literal;
    let mut delta = literal.clone();
    delta.highpass = HighpassMode::Delta;
    let mut r = rng(5);
    for trial in 0..200u64 {
        let (_, masked) = random_masked(&mut r, 8, 8);
        for (cfg, expected_high) in [(&literal, 8.0), (&delta, 0.0)] {
            let model = DearModel::new(cfg, trial).unwrap();
            let (lo, hi) = model.predict_filter_kernels(&masked).unwrap().unwrap();
            assert!(lo.weights.data().iter().all(|&v| v >= 0.0));
            for s in lo.group_sums() {
                assert!((s - 1.0).abs() <= 1e-5, "low-pass group sums to {s}");
            }
            for s in hi.group_sums() {
                assert!((s - expected_high).abs() <= 1e-4, "high-pass group sums to {s}");
            }
        }
    }
}

#[test]
fn center_and_cell_center_queries() {
    for (h, w) in [(1, 1), (3, 5), (8, 8)] {
        for i in 0..h {
            for j in 0..w {
                let c = [pixel_center(i, h), pixel_center(j, w)];
                for mode in [EnsembleMode::Area, EnsembleMode::Invdist] {
                    let q = build_queries((h, w), &[c], mode).unwrap();
                    assert_eq!(q.weights[0], [1.0, 0.0, 0.0, 0.0]);
                    assert_eq!(q.neighbor_idx[0][0], i * w + j);
                }
            }
        }
    }
    // Midpoint between four interior centers.
    let c = [0.5 * (pixel_center(2, 8) + pixel_center(3, 8)), 0.5 * (pixel_center(4, 8) + pixel_center(5, 8))];
    for mode in [EnsembleMode::Area, EnsembleMode::Invdist] {
        let q = build_queries((8, 8), &[c], mode).unwrap();
        assert_eq!(q.weights[0], [0.25; 4]);
    }
}

#[test]
fn mask_coverage_lands_in_range_for_100_seeds() {
    for seed in 0..100 {
        let m = generate_irregular_mask(64, 64, seed, (0.1, 0.3)).unwrap();
        assert!((0.1..=0.3).contains(&m.coverage()), "seed {seed}: coverage {}", m.coverage());
    }
}

#[test]
fn png_round_trip_error_is_within_half_a_level() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(3);
    let img = random_image(&mut r, 13, 17);
    let path = dir.path().join("x.png");
    write_image(&img, &path).unwrap();
    let back = read_image(&path).unwrap();
    let worst = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(worst <= 1.0 / 510.0 + 1e-7, "{worst}");
}

#[test]
fn renders_agree_where_query_coordinates_coincide() {
    let model = DearModel::new(&tiny_config(), 2).unwrap();
    let mut r = rng(8);
    let (_, masked) = random_masked(&mut r, 8, 8);
    let one = model.render(&masked, 1.0, 64).unwrap();
    let three = model.render(&masked, 3.0, 64).unwrap();
    // Center of LR pixel i is the center of output pixel 3i+1 at scale 3.
    let (g1, g3) = (make_coord_grid(8, 8).unwrap(), make_coord_grid(24, 24).unwrap());
    let mut matched = 0;
    for i in 0..8 {
        for j in 0..8 {
            let (y, x) = (3 * i + 1, 3 * j + 1);
            if g1.coords[i * 8 + j] == g3.coords[y * 24 + x] {
                assert_eq!(one.pixel(i, j), three.pixel(y, x));
                matched += 1;
            }
        }
    }
    assert_eq!(matched, 64);
}

#[test]
fn rendering_is_continuous_in_the_query() {
    let model = DearModel::new(&tiny_config(), 4).unwrap();
    let mut r = rng(9);
    let (_, masked) = random_masked(&mut r, 8, 8);
    let emb = model.embedding(&masked).unwrap();
    let eps = 1e-4;
    let coords = random_coords(&mut r, 200);
    let shifted: Vec<[f64; 2]> = coords.iter().map(|&[y, x]| [(y + eps).min(1.0), x]).collect();
    let a = model.query(&emb, &coords, 64).unwrap();
    let b = model.query(&emb, &shifted, 64).unwrap();
    let worst = a
        .iter()
        .zip(&b)
        .flat_map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v).abs() as f64))
        .fold(0.0, f64::max);
    // Smoke bound only: the MLP sees χ, which is continuous, and the
    // neighbor set changes only where the area weight of the swapped
    // neighbor vanishes.
    eprintln!("empirical Lipschitz estimate {:.3}", worst / eps);
    assert!(worst / eps < 1e3);
}

#[test]
fn attention_toggle_keeps_shapes() {
    let mut r = rng(10);
    let (_, masked) = random_masked(&mut r, 9, 11);
    let mut cfg = tiny_config();
    let on = DearModel::new(&cfg, 1).unwrap().embedding(&masked).unwrap();
    cfg.use_attention = false;
    let off = DearModel::new(&cfg, 1).unwrap().embedding(&masked).unwrap();
    assert_eq!(on.attention.0.shape(), off.attention.0.shape());
    assert_eq!(off.attention.0, off.features.0);
}

#[test]
fn fully_masked_inpaint_is_rejected() {
    let img = Image::filled(4, 4, 3, 0.2).unwrap();
    assert!(naive_inpaint_counted(&apply_mask(&img, &Mask::ones(4, 4)).unwrap()).is_err());
}
