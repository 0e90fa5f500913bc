mod common;

use common::*;
use hvae_core::evalsuite::*;
use hvae_core::model::{Hvae, ModelConfig, Variant};
use hvae_core::phantom::FactorRanges;
use hvae_core::Tensor;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---- reference implementations -------------------------------------------

fn small_model(variant: Variant, supervise: bool) -> Hvae<f32> {
    let mut c = ModelConfig::default();
    c.variant = variant;
    c.levels = 2;
    c.resolution = 16;
    c.base_channels = 4;
    c.max_channels = 8;
    c.components = 3;
    c.seg_channels = 4;
    c.supervision.enabled = supervise;
    c.supervision.target_layer = 1;
    Hvae::new(c, 5).unwrap()
}

// ---- metrics --------------------------------------------------------------

#[test]
fn ssim_matches_reference_on_8x8_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let x: Vec<f64> = (0..64).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.7 * v + 0.3 * normal(&mut rng)).collect();
        let r = data_range(&x);
        let got = ssim(&x, &y, 8, 8, r).unwrap();
        assert!((got - ssim_oracle(&x, &y, 8, 8, r)).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&got));
    }
}

#[test]
fn ssim_of_negated_zero_mean_image_is_negative() {
    // Zero-sum period-7 rows: every 7x7 window has exactly zero mean.
    let x: Vec<f64> = (0..64).map(|i| (((i % 8) + 3 * (i / 8)) % 7) as f64 - 3.0).collect();
    let y: Vec<f64> = x.iter().map(|v| -v).collect();
    let got = ssim(&x, &y, 8, 8, data_range(&x)).unwrap();
    assert!(got < 0.0, "{got}");
    assert!((got - ssim_oracle(&x, &y, 8, 8, data_range(&x))).abs() < 1e-12);
}

#[test]
fn psnr_matches_direct_formula() {
    let x: Vec<f64> = (0..64).map(|i| (i % 8) as f64 / 7.0).collect();
    let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 0.1 } else { -0.1 }).collect();
    assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
}

#[test]
fn frechet_identity_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = DMatrix::from_fn(50, 6, |_, _| normal(&mut rng));
    let b = DMatrix::from_fn(40, 6, |_, j| normal(&mut rng) * 1.5 + j as f64 * 0.1);
    assert!(frechet_distance(&a, &a).unwrap().distance.abs() < 1e-6);
    let ab = frechet_distance(&a, &b).unwrap().distance;
    let ba = frechet_distance(&b, &a).unwrap().distance;
    assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
    assert!(ab > 0.0);
}

#[test]
fn frechet_regularizes_singular_covariance() {
    // Three samples in ten dimensions: rank-deficient covariance.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = DMatrix::from_fn(3, 10, |_, _| normal(&mut rng));
    let d = frechet_distance(&a, &a).unwrap();
    assert!(d.regularized && d.distance.abs() < 1e-6);
}

#[test]
fn fid_surrogate_orders_same_versus_shifted_distribution() {
    let ranges = FactorRanges::default();
    let shifted = FactorRanges {
        lesion_rate: 7.0,
        lesion_radius_64: (4.0, 6.0),
        lesion_boost: (4.0, 5.0),
        skull_a: (0.30, 0.34),
        ..FactorRanges::default()
    };
    let a = phantom_split(10, 120, 32, &ranges).images.cast::<f64>();
    let b = phantom_split(11, 120, 32, &ranges).images.cast::<f64>();
    let c = phantom_split(12, 120, 32, &shifted).images.cast::<f64>();
    let same = fid_surrogate(&a, &b, 0).unwrap().distance;
    let diff = fid_surrogate(&a, &c, 0).unwrap().distance;
    assert!(same < diff, "same {same} diff {diff}");
    assert_eq!(fid_surrogate(&a, &b, 0).unwrap().distance, same);
}

// ---- probe ----------------------------------------------------------------

#[test]
fn lasso_matches_independent_oracle_on_synthetic_fixture() {
    let (got, want, nonzero) = lasso_fixture();
    assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    assert!(got > 0.5 && got < 0.99, "shrinkage should be visible: {got}");
    assert_eq!(nonzero, 1);
}

#[test]
fn lasso_without_penalty_recovers_exact_linear_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = DMatrix::from_fn(200, 5, |_, _| normal(&mut rng));
    let wstar = [1.5, -2.0, 0.0, 0.7, 3.0];
    let y: Vec<f64> = (0..200).map(|i| 0.3 + (0..5).map(|j| wstar[j] * x[(i, j)]).sum::<f64>()).collect();
    let cfg = LassoConfig {
        alpha: 0.0,
        ..LassoConfig::default()
    };
    let xtr = x.rows(0, 150).into_owned();
    let xte = x.rows(150, 50).into_owned();
    let got = probe_arrays(&xtr, &y[..150], &xte, &y[150..], &cfg).unwrap();
    assert!((got.r2 - 1.0).abs() < 1e-6, "{}", got.r2);
}

#[test]
fn lasso_without_signal_scores_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = DMatrix::from_fn(600, 20, |_, _| normal(&mut rng));
    let y: Vec<f64> = (0..600).map(|_| 30.0 * normal(&mut rng)).collect();
    let got = probe_arrays(&x.rows(0, 400).into_owned(), &y[..400], &x.rows(400, 200).into_owned(), &y[400..], &LassoConfig::default())
        .unwrap();
    assert!(got.r2 <= 0.02, "{}", got.r2);
}

#[test]
fn lasso_fit_satisfies_optimality_conditions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = DMatrix::from_fn(300, 8, |_, _| normal(&mut rng));
    let y: Vec<f64> = (0..300).map(|i| 20.0 * x[(i, 0)] - 12.0 * x[(i, 3)] + 5.0 * normal(&mut rng)).collect();
    let alpha = 3.0;
    let fit = lasso_fit(&x, &y, &LassoConfig { alpha, ..LassoConfig::default() }).unwrap();
    assert!(fit.converged);
    let pred = fit.predict(&x);
    for j in 0..8 {
        let g: f64 = (0..300).map(|i| x[(i, j)] * (y[i] - pred[i])).sum::<f64>() / 300.0;
        if fit.coef[j] != 0.0 {
            assert!((g - alpha * fit.coef[j].signum()).abs() < 1e-4, "active {j}: {g}");
        } else {
            assert!(g.abs() <= alpha + 1e-4, "inactive {j}: {g}");
        }
    }
}

#[test]
fn probe_standardisation_uses_training_split_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xtr = DMatrix::from_fn(100, 3, |_, _| normal(&mut rng));
    let xte = DMatrix::from_fn(50, 3, |_, _| 10.0 + 3.0 * normal(&mut rng));
    let ytr: Vec<f64> = (0..100).map(|i| 50.0 * xtr[(i, 1)]).collect();
    let yte: Vec<f64> = (0..50).map(|i| 50.0 * xte[(i, 1)]).collect();
    let got = probe_arrays(&xtr, &ytr, &xte, &yte, &LassoConfig::default()).unwrap();
    let again = Standardizer::fit(&xtr);
    assert_eq!(got.standardizer, again);
    for j in 0..3 {
        let m = xtr.column(j).sum() / 100.0;
        assert!((got.standardizer.mean[j] - m).abs() < 1e-12);
    }
}

#[test]
fn probe_reports_one_entry_per_group() {
    let model = small_model(Variant::Nvae, false);
    let train = phantom_split(20, 40, 16, &FactorRanges::default());
    let test = phantom_split(21, 20, 16, &FactorRanges::default());
    let rep = informativeness_probe(&model, &train, &test, &LassoConfig::default()).unwrap();
    assert_eq!(rep.r2_per_layer.len(), 3);
    assert!(rep.r2_per_layer.iter().all(|r| (-1.0..=1.0).contains(r)));
    assert_eq!(rep.target, "lesion_area");
}

// ---- manipulations --------------------------------------------------------

#[test]
fn identity_scaling_has_zero_sensitivity() {
    let model = small_model(Variant::Nvae, false);
    let d = phantom_split(30, 6, 16, &FactorRanges::default());
    for l in 0..=2 {
        for s in attribute_sensitivity(&model, &d.images, &d.masks, l, &[1.0]).unwrap().into_iter().flatten() {
            assert_eq!(s, 0.0);
        }
    }
}

#[test]
fn empty_masks_are_skipped_and_counted() {
    let model = small_model(Variant::Vae, false);
    let mut d = phantom_split(31, 4, 16, &FactorRanges::default());
    d.masks = Tensor::zeros(d.masks.shape());
    let rep = sensitivity_scan(&model, &d.images, &d.masks, &SENSITIVITY_FACTORS, Some(1)).unwrap();
    assert_eq!((rep.scored, rep.skipped), (0, 4));
    assert_eq!(rep.argmax_match_fraction, None);
}

#[test]
fn untrained_model_has_no_lesion_specific_sensitivity() {
    // Images have unit variance, so 0.02 is small on the intensity scale.
    // The null is not exactly zero: lesions are bright, so their latents
    // are larger and move more under scaling.
    let mut c = ModelConfig::default();
    c.levels = 4;
    c.resolution = 32;
    c.base_channels = 8;
    c.max_channels = 32;
    let model = Hvae::<f32>::new(c, 5).unwrap();
    let d = phantom_split(32, 100, 32, &FactorRanges::default());
    for l in 0..=4 {
        let s: Vec<f64> = attribute_sensitivity(&model, &d.images, &d.masks, l, &SENSITIVITY_FACTORS)
            .unwrap()
            .into_iter()
            .flatten()
            .collect();
        assert!(s.len() > 80);
        let m = s.iter().sum::<f64>() / s.len() as f64;
        assert!(m.abs() < 0.02, "layer {l}: mean {m}");
    }
}

#[test]
fn style_mix_identities_hold_bitwise() {
    for v in Variant::ALL {
        let model = small_model(v, false);
        let d = phantom_split(33, 4, 16, &FactorRanges::default());
        let xa = d.images.select(&[0, 1]);
        let xb = d.images.select(&[2, 3]);
        let mean = || hvae_core::rng::NoiseSource::new(0, 0).with_scale(0.0);
        let ra = model.reconstruct(&xa, &mut mean()).unwrap();
        let rb = model.reconstruct(&xb, &mut mean()).unwrap();
        assert_eq!(style_mix(&model, &xa, &xb, &[]).unwrap(), ra, "{v}");
        assert_eq!(style_mix(&model, &xa, &xb, &[0, 1, 2]).unwrap(), rb, "{v}");
        assert_ne!(style_mix(&model, &xa, &xb, &[1]).unwrap(), ra, "{v}");
        assert!(style_mix(&model, &xa, &xb, &[3]).is_err());
        assert!(style_mix(&model, &xa, &xb, &[1, 1]).is_err());
    }
}

#[test]
fn resampling_at_zero_temperature_is_deterministic() {
    let model = small_model(Variant::Nvmp, true);
    let d = phantom_split(34, 2, 16, &FactorRanges::default());
    let mode = ResampleMode::ResamplePathology { draws: 3, temperature: 0.0 };
    let out = conditional_resample(&model, &d.images, 1, mode.clone(), 1).unwrap();
    assert!(out.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(out[0], conditional_resample(&model, &d.images, 1, mode, 99).unwrap()[0]);
}

#[test]
fn resampling_seeds_differ_but_share_outside_lesion_statistics() {
    let model = small_model(Variant::Nvae, false);
    let d = phantom_split(35, 1, 16, &FactorRanges::default());
    let mode = ResampleMode::ResamplePathology { draws: 50, temperature: 1.0 };
    let a = conditional_resample(&model, &d.images, 1, mode.clone(), 1).unwrap();
    let b = conditional_resample(&model, &d.images, 1, mode, 2).unwrap();
    assert_ne!(a[0], b[0]);
    let stats = |xs: &[Tensor<f32>], j: usize| {
        let v: Vec<f64> = xs.iter().map(|t| t.data()[j] as f64).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var)
    };
    let mut worst = 0.0f64;
    for j in 0..256 {
        if d.masks.data()[j] > 0.5 {
            continue;
        }
        let (ma, va) = stats(&a, j);
        let (mb, vb) = stats(&b, j);
        let se = ((va + vb) / 50.0).sqrt().max(1e-12);
        worst = worst.max((ma - mb).abs() / se);
    }
    // Max of ~250 roughly standard normal z-scores.
    assert!(worst < 5.0, "worst z {worst}");
}

#[test]
fn transplant_with_self_as_donor_is_reconstruction() {
    let model = small_model(Variant::NvmpPlus, true);
    let d = phantom_split(36, 1, 16, &FactorRanges::default());
    let out = conditional_resample(&model, &d.images, 1, ResampleMode::TransplantPathology { donors: Some(&d.images) }, 0).unwrap();
    let rec = model
        .reconstruct(&d.images, &mut hvae_core::rng::NoiseSource::new(0, 0).with_scale(0.0))
        .unwrap();
    assert_eq!(out[0], rec);
    let err = conditional_resample(&model, &d.images, 1, ResampleMode::TransplantPathology { donors: None }, 0);
    assert!(err.is_err());
}

#[test]
fn untrained_model_metrics_are_finite() {
    let model = small_model(Variant::Nvmp, false);
    let d = phantom_split(37, 10, 16, &FactorRanges::default());
    let rep = evaluate_reconstruction(&model, &d, 0).unwrap();
    for v in [rep.neg_recon_ll, rep.psnr, rep.ssim, rep.fid_surrogate] {
        assert!(v.is_finite(), "{rep:?}");
    }
    assert_eq!(rep.n_psnr, 10);
}

#[test]
fn pgm_grid_has_expected_header_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.pgm");
    let row = Tensor::from_vec(&[2, 3, 3, 1], (0..18).map(|v| v as f32).collect()).unwrap();
    write_pgm_grid(&p, &[row.clone(), row.select(&[0])]).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let header = b"P5\n7 7\n255\n";
    assert!(bytes.starts_with(header));
    assert_eq!(bytes.len(), header.len() + 49);
    assert_eq!(bytes[header.len()], 0);
    assert_eq!(*bytes.iter().max().unwrap(), 255);
}
