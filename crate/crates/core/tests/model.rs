mod common;

use common::*;
use hvae_core::model::*;
use hvae_core::rng::NoiseSource;
use hvae_core::Tensor;
use proptest::prelude::*;

const VARIANTS: [Variant; 4] = [Variant::Vae, Variant::Nvae, Variant::Nvmp, Variant::NvmpPlus];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn latent_grids_halve_per_level(levels in 1usize..5, mult in 1usize..3, ch in 1usize..4) {
        let resolution = (1 << levels) * 2 * mult;
        let cfg = ModelConfig {
            levels, resolution, latent_channels: ch, base_channels: 2, max_channels: 4, ..ModelConfig::default()
        };
        let model = Hvae::<f32>::new(cfg, 0).unwrap();
        let inf = model.infer(&uniform_images(1, resolution, 1).cast(), &mut NoiseSource::new(0, 0)).unwrap();
        prop_assert_eq!(inf.latents.groups.len(), levels + 1);
        for (l, z) in inf.latents.groups.iter().enumerate() {
            let side = resolution >> (levels - l);
            prop_assert_eq!(z.shape(), &[1, side, side, ch][..]);
            prop_assert_eq!(model.latent_shape(l), [side, side, ch]);
        }
    }
}

#[test]
fn residual_posteriors_compose_prior_and_deltas() {
    for variant in [Variant::Nvae, Variant::Nvmp, Variant::NvmpPlus] {
        let model = Hvae::<f64>::new(mini_config(variant, false), 2).unwrap();
        let inf = model.infer(&uniform_images(2, 16, 3), &mut NoiseSource::new(1, 1)).unwrap();
        for (l, pair) in inf.layers.iter().enumerate().skip(1) {
            let PriorKind::Gaussian(prior) = &pair.prior else {
                panic!("{variant}: layer {l} has no decoder prior");
            };
            for i in 0..prior.mean.len() {
                let m = prior.mean.data()[i] + pair.delta.mean.data()[i];
                let s = prior.log_std.data()[i].exp() * pair.delta.log_std.data()[i].exp();
                assert!((pair.posterior.mean.data()[i] - m).abs() < 1e-12);
                assert!((pair.posterior.log_std.data()[i].exp() - s).abs() < 1e-12 * s.max(1.0));
            }
        }
    }
}

#[test]
fn prior_of_a_group_ignores_that_groups_own_sample() {
    let model = Hvae::<f64>::new(mini_config(Variant::Nvae, false), 4).unwrap();
    let inf = model.infer(&uniform_images(1, 16, 5), &mut NoiseSource::new(2, 2)).unwrap();
    for l in 1..=model.levels() {
        let decode = |groups: &[Tensor<f64>]| {
            let src: Vec<Source<f64>> = groups.iter().cloned().map(Source::Fixed).collect();
            model.decode_sources(&src, &mut NoiseSource::new(0, 0)).unwrap()
        };
        let base = decode(&inf.latents.groups);
        let mut moved = inf.latents.groups.clone();
        let i = moved[l].len() / 2;
        let mut data = moved[l].data().to_vec();
        data[i] += 3.0;
        moved[l] = Tensor::from_vec(moved[l].shape(), data).unwrap();
        let after = decode(&moved);
        assert_eq!(base.layers[l].prior, after.layers[l].prior, "layer {l}");
        for k in 0..l {
            assert_eq!(base.layers[k].prior, after.layers[k].prior);
        }
    }
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    for variant in VARIANTS {
        let (worst, at) = worst_gradient_error(variant, 220);
        eprintln!("{variant}: worst {worst:e} at {at}");
        assert!(worst < 1e-3, "{variant}: worst relative error {worst:e} at {at}");
    }
}

#[test]
fn inference_and_generation_are_deterministic() {
    for variant in VARIANTS {
        let a = Hvae::<f32>::new(mini_config(variant, true), 6).unwrap();
        let b = Hvae::<f32>::new(mini_config(variant, true), 6).unwrap();
        assert_eq!(a.params(), b.params());
        let x = uniform_images(3, 16, 2).cast();
        let ia = a.infer(&x, &mut NoiseSource::new(3, 4)).unwrap();
        let ib = b.infer(&x, &mut NoiseSource::new(3, 4)).unwrap();
        assert_eq!(ia.latents, ib.latents);
        assert_eq!(ia.reconstruction, ib.reconstruction);
        assert_eq!(a.generate(4, 0.8, 9).unwrap(), b.generate(4, 0.8, 9).unwrap());
        assert_ne!(a.generate(4, 0.8, 9).unwrap(), a.generate(4, 0.8, 10).unwrap());
    }
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for variant in VARIANTS {
        let model = Hvae::<f32>::new(mini_config(variant, true), 12).unwrap();
        let ck = Checkpoint {
            config: model.config().clone(),
            iteration: 42,
            params: model.params().clone(),
            moments: None,
            meta: [("note".to_string(), "round-trip".to_string())].into_iter().collect(),
        };
        let path = dir.path().join(format!("{variant}.hvae"));
        write_checkpoint(&path, &ck).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let restored = Hvae::from_params(back.config, back.params).unwrap();
        let x = uniform_images(2, 16, 1).cast();
        let zero = || NoiseSource::new(0, 0).with_scale(0.0);
        assert_eq!(restored.reconstruct(&x, &mut zero()).unwrap(), model.reconstruct(&x, &mut zero()).unwrap());
    }
}
