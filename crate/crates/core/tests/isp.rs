use iat_core::image_io::{encode_png, decode_png, image_to_tensor, quantize, ImageRGB};
use iat_core::isp::{apply_global, degrade, sample_degradation, synthetic_scene, DegradationParams, GlobalParams, Profile};
use iat_core::rng::stream;
use iat_core::tensor::{Eager, Tensor};
use rand::Rng;

fn max_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

#[test]
fn identity_pipeline_roundtrips_within_one_code() {
    for seed in 0..4 {
        let clean = synthetic_scene(&mut stream(seed, 0), 24, 31);
        let (deg, _) = degrade(&clean, &DegradationParams::identity(), &mut stream(seed, 1)).unwrap();
        let a: Vec<u8> = deg.pixels().iter().map(|&v| quantize(v)).collect();
        let b: Vec<u8> = clean.pixels().iter().map(|&v| quantize(v)).collect();
        assert!(a.iter().zip(&b).all(|(x, y)| x.abs_diff(*y) <= 1));
        // And through an actual file encoding.
        let back = decode_png(&encode_png(&deg).unwrap()).unwrap();
        assert!(max_diff(back.pixels(), clean.pixels()) <= 1.0 / 255.0);
    }
}

fn degraded_pair(seed: u64, desaturate: bool) -> (ImageRGB, DegradationParams, Profile) {
    let mut rng = stream(seed, 7);
    let profile = if seed % 2 == 0 { Profile::LowLight } else { Profile::OverExposure };
    let mut dp = sample_degradation(&mut rng, profile);
    dp.noise_sigma = 0.0;
    let scene = synthetic_scene(&mut stream(seed, 8), 20, 20);
    // Over-exposed pixels stay below the clip point so the mapping is
    // invertible.
    let limit = match profile {
        Profile::OverExposure => dp.exposure.powf(-1.0 / 2.2) as f32 * 0.9,
        _ => 1.0,
    };
    let clean = ImageRGB::from_fn(20, 20, |y, x, c| {
        let v = scene.get(y, x, c);
        let v = if desaturate {
            let grey = (0..3).map(|k| scene.get(y, x, k)).sum::<f32>() / 3.0;
            0.5 * v + 0.5 * grey
        } else {
            v
        };
        v * limit
    });
    (clean, dp, profile)
}

#[test]
fn analytic_global_params_recover_clean() {
    for seed in 0..16 {
        let (clean, dp, profile) = degraded_pair(seed, true);
        let (deg, raw) = degrade(&clean, &dp, &mut stream(seed, 9)).unwrap();
        assert!(raw.data.iter().all(|&v| v > 0.0), "seed {seed}: scene left the camera gamut");
        let gp = dp.recovery();
        let out = apply_global(&Eager, &image_to_tensor::<f64>(&deg), &gp.to_nodes(&Eager)).unwrap();
        let err = out.max_abs_diff(&image_to_tensor(&clean));
        assert!(err < 1e-3, "seed {seed} {profile}: {err}");
    }
}

/// Saturated colours can map outside the camera gamut, where the pseudo-raw
/// is clamped at zero; every other pixel is still recovered.
#[test]
fn recovery_exact_wherever_raw_is_unclamped() {
    for seed in 0..16 {
        let (clean, dp, _) = degraded_pair(seed, false);
        let (deg, raw) = degrade(&clean, &dp, &mut stream(seed, 9)).unwrap();
        let out = apply_global(&Eager, &image_to_tensor::<f64>(&deg), &dp.recovery().to_nodes(&Eager)).unwrap();
        let want: Tensor<f64> = image_to_tensor(&clean);
        let n = clean.height() * clean.width();
        for i in 0..n {
            if (0..3).any(|c| raw.data[i * 3 + c] == 0.0) {
                continue;
            }
            for c in 0..3 {
                let e = (out.data()[c * n + i] - want.data()[c * n + i]).abs();
                assert!(e < 1e-3, "seed {seed} pixel {i}: {e}");
            }
        }
    }
}

#[test]
fn recovery_gamma_and_scale() {
    let dp = DegradationParams {
        exposure: 0.25,
        gamma_d: 1.0 / 2.2,
        ..DegradationParams::identity()
    };
    let gp = dp.recovery();
    assert!((gp.gamma - 1.0).abs() < 1e-12);
    assert!((gp.matrix[0][0] - 0.25f64.powf(-1.0 / 2.2)).abs() < 1e-12);
    assert_eq!(gp.matrix[0][1], 0.0);
}

#[test]
fn pseudo_raw_is_nonnegative_and_noise_is_seeded() {
    let clean = synthetic_scene(&mut stream(3, 0), 16, 16);
    let dp = DegradationParams {
        noise_sigma: 0.05,
        exposure: 0.1,
        ..DegradationParams::identity()
    };
    let (a, ra) = degrade(&clean, &dp, &mut stream(3, 1)).unwrap();
    let (b, rb) = degrade(&clean, &dp, &mut stream(3, 1)).unwrap();
    let (c, _) = degrade(&clean, &dp, &mut stream(3, 2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_ne!(a, c);
    assert!(ra.data.iter().all(|&v| v >= 0.0));
    assert!(a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn global_params_validate() {
    let mut rng = stream(0, 0);
    for _ in 0..20 {
        let g: f64 = rng.random_range(0.1..3.0);
        assert!(GlobalParams::new(GlobalParams::identity().matrix, g).is_ok());
    }
    assert!(GlobalParams::new(GlobalParams::identity().matrix, 0.0).is_err());
    assert!(GlobalParams::new(GlobalParams::identity().matrix, f64::NAN).is_err());
}

#[test]
fn synthetic_scenes_are_in_range_and_seeded() {
    let a = synthetic_scene(&mut stream(1, 0), 30, 40);
    let b = synthetic_scene(&mut stream(1, 0), 30, 40);
    let c = synthetic_scene(&mut stream(2, 0), 30, 40);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.pixels().iter().all(|&v| (0.05..=0.95).contains(&v)));
}
