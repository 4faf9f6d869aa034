mod common;

use common::fixtures::{cosine, he, mean_abs_diff, planted, unit};
use htxc::stain::{
    channel_to_od, compute_density, density_percentiles, fit_stain_basis, fit_target, normalize_image, od_to_rgb,
    pixel_objective, rgb_to_od, OdImage, StainBasis, StainParams,
};
use htxc::RngStream;
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn od_round_trip_on_random_image() {
    let mut rng = RngStream::new(1, "od", 0, 0).rng();
    let img = RgbImage::from_fn(40, 30, |_, _| Rgb([rng.random_range(1..=255), rng.random_range(1..=255), rng.random_range(1..=255)]));
    assert_eq!(od_to_rgb(&rgb_to_od(&img)), img);
    assert!((channel_to_od(1) - 5.541).abs() < 1e-3);
}

#[test]
fn planted_basis_is_recovered() {
    for seed in 0..5 {
        let w0 = he();
        let img = planted(w0, [1.0, 1.0], 64, &mut RngStream::new(seed, "planted", 0, 0).rng());
        let fit = fit_stain_basis(&rgb_to_od(&img), &StainParams::default()).unwrap();
        assert!(!fit.single_stain);
        for j in 0..2 {
            let c = cosine(fit.basis.column(j), w0[j]);
            assert!(c >= 0.99, "seed {seed} column {j}: cosine {c}");
        }
    }
}

#[test]
fn objective_never_increases() {
    for seed in 0..5 {
        let img = planted(he(), [1.2, 0.8], 48, &mut RngStream::new(seed, "monotone", 0, 0).rng());
        let params = StainParams {
            tol: 0.0,
            max_iters: 60,
            ..StainParams::default()
        };
        let fit = fit_stain_basis(&rgb_to_od(&img), &params).unwrap();
        assert!(fit.objective.len() >= 2);
        for w in fit.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-8 * w[0].abs().max(1.0), "objective rose {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn single_stain_leaves_other_density_empty() {
    let h = unit([0.65, 0.70, 0.29]);
    let mut rng = RngStream::new(2, "rank1", 0, 0).rng();
    let img = RgbImage::from_fn(48, 48, |_, _| {
        let d = rng.random_range(0.2..1.5);
        Rgb(h.map(|c| (255.0 * (-c * d).exp()).round() as u8))
    });
    let od = rgb_to_od(&img);
    let params = StainParams::default();
    let basis = fit_stain_basis(&od, &params).unwrap().basis;
    let density = compute_density(&od, &basis, params.density_lambda);
    let p99 = density_percentiles(&density, &od.tissue_mask(params.beta), 99.0);
    let planted_col = (0..2).max_by(|&a, &b| cosine(basis.column(a), h).total_cmp(&cosine(basis.column(b), h))).unwrap();
    assert!(cosine(basis.column(planted_col), h) >= 0.99);
    assert!(p99[1 - planted_col] < 0.05, "other stain p99 {}", p99[1 - planted_col]);
}

#[test]
fn pixel_order_does_not_change_basis() {
    let img = planted(he(), [1.0, 1.0], 40, &mut RngStream::new(3, "perm", 0, 0).rng());
    let od = rgb_to_od(&img);
    let mut shuffled = od.clone();
    shuffled.pixels.reverse();
    let mut rng = RngStream::new(3, "perm-swap", 0, 0).rng();
    for i in 0..shuffled.pixels.len() {
        let j = rng.random_range(0..shuffled.pixels.len());
        shuffled.pixels.swap(i, j);
    }
    let params = StainParams::default();
    let a = fit_stain_basis(&od, &params).unwrap().basis.row_major();
    let b = fit_stain_basis(&shuffled, &params).unwrap().basis.row_major();
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-6, "{a:?} vs {b:?}");
    }
}

#[test]
fn self_normalization_is_near_identity() {
    let img = planted(he(), [1.0, 1.0], 64, &mut RngStream::new(4, "self", 0, 0).rng());
    let params = StainParams::default();
    let model = fit_target(&img, &params).unwrap();
    assert!(model.p99.iter().all(|&p| p > 0.0));
    let out = normalize_image(&img, &model, &params).unwrap();
    assert!(!out.blank);
    let err = mean_abs_diff(&img, &out.image);
    assert!(err < 3.0, "mean abs error {err}/255");
}

#[test]
fn sources_share_target_percentile() {
    let params = StainParams::default();
    let target = planted(he(), [1.0, 1.0], 64, &mut RngStream::new(5, "target", 0, 0).rng());
    let model = fit_target(&target, &params).unwrap();
    let source_a = planted(
        [unit([0.60, 0.75, 0.35]), unit([0.10, 0.95, 0.18])],
        [0.6, 1.3],
        64,
        &mut RngStream::new(5, "a", 0, 0).rng(),
    );
    let source_b = planted(
        [unit([0.70, 0.65, 0.25]), unit([0.05, 0.98, 0.08])],
        [1.4, 0.7],
        64,
        &mut RngStream::new(5, "b", 0, 0).rng(),
    );
    let hema_p99 = |img: &RgbImage| {
        let out = normalize_image(img, &model, &params).unwrap().image;
        let od = rgb_to_od(&out);
        let d = compute_density(&od, &model.basis, params.density_lambda);
        density_percentiles(&d, &od.tissue_mask(params.beta), 99.0)[0]
    };
    let (a, b) = (hema_p99(&source_a), hema_p99(&source_b));
    assert!((a - b).abs() / a.max(b) < 0.02, "{a} vs {b}");
}

#[test]
fn normalization_keeps_size_and_background() {
    let params = StainParams::default();
    let target = planted(he(), [1.0, 1.0], 32, &mut RngStream::new(6, "t", 0, 0).rng());
    let model = fit_target(&target, &params).unwrap();
    let src = planted(he(), [1.3, 0.9], 48, &mut RngStream::new(6, "s", 0, 0).rng());
    let out = normalize_image(&src, &model, &params).unwrap().image;
    assert_eq!(out.dimensions(), src.dimensions());
    let od = rgb_to_od(&src);
    for ((p, q), o) in src.pixels().zip(out.pixels()).zip(&od.pixels) {
        if OdImage::magnitude(o) < params.beta {
            assert_eq!(p, q);
            assert!(q.0.iter().all(|&c| c >= 250), "background pixel {q:?}");
        }
    }
}

#[test]
fn blank_image_passes_through() {
    let params = StainParams::default();
    let model = fit_target(&planted(he(), [1.0, 1.0], 32, &mut RngStream::new(7, "t", 0, 0).rng()), &params).unwrap();
    let blank = RgbImage::from_pixel(30, 30, Rgb([252, 250, 251]));
    let out = normalize_image(&blank, &model, &params).unwrap();
    assert!(out.blank);
    assert_eq!(out.image, blank);
    assert!(fit_target(&blank, &params).is_err());
}

proptest! {
    #[test]
    fn density_beats_the_zero_solution(seed in any::<u64>(), lambda in 0.0f64..0.5) {
        let mut rng = RngStream::new(seed, "density", 0, 0).rng();
        let mut col = || unit([rng.random_range(0.01..1.0), rng.random_range(0.01..1.0), rng.random_range(0.01..1.0)]);
        let (a, b) = (col(), col());
        prop_assume!(cosine(a, b) < 0.999);
        let basis = StainBasis::new(a, b).unwrap();
        let pixels: Vec<[f64; 3]> = (0..50).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..2.0))).collect();
        let od = OdImage { width: 50, height: 1, pixels };
        let d = compute_density(&od, &basis, lambda);
        for (p, h) in od.pixels.iter().zip(&d) {
            prop_assert!(h[0] >= 0.0 && h[1] >= 0.0);
            prop_assert!(pixel_objective(p, &basis, *h, lambda) <= pixel_objective(p, &basis, [0.0, 0.0], lambda) + 1e-12);
        }
    }
}
