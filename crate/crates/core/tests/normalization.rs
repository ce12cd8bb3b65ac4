use mixwb::color::{ColorSpace, Image, WbSetting};
use mixwb::eas::{edge_aware_smooth, EasParams};
use mixwb::infer::{correct_image_detailed, predict_weights_ensemble, upsample_weights, InferenceConfig};
use mixwb::isp::{FitSpace, PresetStack};
use mixwb::model::Model;
use mixwb::nn::GridNetConfig;
use mixwb::weights::{blend, WeightMaps};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, ColorSpace::GammaSrgb, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

fn perturbed_model(k: usize, seed: u64) -> Model {
    let presets = WbSetting::parse_list(if k == 3 { "tds" } else { "tfdcs" }).unwrap();
    let mut m = Model::new(GridNetConfig::tiny(k), &presets, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in &mut m.params {
        *v += rng.gen_range(-0.5..0.5);
    }
    m
}

fn within_hull(out: &Image, images: &[Image], tol: f32) -> bool {
    out.data().iter().enumerate().all(|(i, &v)| {
        let lo = images.iter().map(|m| m.data()[i]).fold(f32::INFINITY, f32::min);
        let hi = images.iter().map(|m| m.data()[i]).fold(f32::NEG_INFINITY, f32::max);
        v >= lo - tol && v <= hi + tol
    })
}

#[test]
fn weights_stay_normalized_through_every_stage() {
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = if seed % 2 == 0 { 3 } else { 5 };
        let model = perturbed_model(k, seed);
        let small = rng.gen_range(24..48);
        let full = small + rng.gen_range(0..40);
        let smalls = (0..k).map(|_| random_image(&mut rng, small, small)).collect();
        let stack =
            PresetStack::from_images(&model.presets, random_image(&mut rng, full, full), smalls, FitSpace::Gamma)
                .unwrap();

        let single =
            predict_weights_ensemble(&stack, &model, &InferenceConfig { ensemble: false, ..Default::default() })
                .unwrap();
        assert!(single.max_sum_error() <= 1e-5);
        let ens = predict_weights_ensemble(&stack, &model, &InferenceConfig::default()).unwrap();
        assert!(ens.max_sum_error() <= 1e-5);
        let up = upsample_weights(&ens, full, full).unwrap();
        assert!(up.max_sum_error() <= 1e-5);
        let smooth = edge_aware_smooth(&up, &stack.full_fixed, &EasParams::default()).unwrap();
        assert!(smooth.max_sum_error() <= 1e-5);
        assert!(smooth.data.iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v)));

        let c = correct_image_detailed(&stack, &model, &InferenceConfig::default()).unwrap();
        assert!(within_hull(&c.image, &stack.mapped_fulls, 1e-5));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blend_is_convex_for_any_normalized_weights(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (7, 5);
        let raw: Vec<f32> = (0..k * w * h).map(|_| rng.gen_range(0.0..1.0f32)).collect();
        let mut maps = WeightMaps::new(k, w, h, raw).unwrap();
        maps.renormalize();
        prop_assert!(maps.max_sum_error() <= 1e-6);
        let images: Vec<Image> = (0..k).map(|_| random_image(&mut rng, w, h)).collect();
        let out = blend(&maps, &images).unwrap();
        prop_assert!(within_hull(&out, &images, 1e-6));
    }

    #[test]
    fn identical_inputs_are_reproduced(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 6, 6);
        let raw: Vec<f32> = (0..k * 36).map(|_| rng.gen_range(0.01..1.0f32)).collect();
        let mut maps = WeightMaps::new(k, 6, 6, raw).unwrap();
        maps.renormalize();
        let out = blend(&maps, &vec![img.clone(); k]).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn resizing_keeps_maps_normalized(seed in any::<u64>(), tw in 4usize..40, th in 4usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f32> = (0..3 * 16).map(|_| rng.gen_range(0.0..1.0f32)).collect();
        let mut maps = WeightMaps::new(3, 4, 4, raw).unwrap();
        maps.renormalize();
        prop_assert!(maps.resized(tw, th).max_sum_error() <= 1e-5);
    }
}
