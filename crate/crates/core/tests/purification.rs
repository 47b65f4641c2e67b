mod common;

use common::random_image;
use proptest::prelude::*;
use shield::purify::*;
use shield::Tensor;
use std::f64::consts::PI;

/// Direct (non-separable) 2-D DCT round trip of a single 8×8 block.
fn reference_block(block: &[f64; 64], q: &[f64; 64]) -> [f64; 64] {
    let c = |k: usize| if k == 0 { (0.125f64).sqrt() } else { 0.5 };
    let cosv = |n: usize, k: usize| (PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
    let mut coef = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut s = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    s += (block[y * 8 + x] * 255.0 - 128.0) * cosv(y, u) * cosv(x, v);
                }
            }
            let f = c(u) * c(v) * s;
            coef[u * 8 + v] = (f / q[u * 8 + v]).round() * q[u * 8 + v];
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            let mut s = 0.0;
            for u in 0..8 {
                for v in 0..8 {
                    s += c(u) * c(v) * coef[u * 8 + v] * cosv(y, u) * cosv(x, v);
                }
            }
            out[y * 8 + x] = ((s + 128.0) / 255.0).clamp(0.0, 1.0);
        }
    }
    out
}

#[test]
fn quant_table_scaling() {
    let q50 = quant_table(50).unwrap();
    for (a, &b) in q50.iter().zip(&LUMA_TABLE) {
        assert_eq!(*a, b as f64);
    }
    assert!(quant_table(100).unwrap().iter().all(|&v| v == 1.0));
    assert!(quant_table(1).unwrap().iter().all(|&v| v == 255.0));
    // quality 75 halves the base table, rounding half up
    assert_eq!(quant_table(75).unwrap()[0], 8.0);
    assert_eq!(quant_table(75).unwrap()[1], 6.0);
    assert!(quant_table(0).is_err());
    assert!(quant_table(101).is_err());
}

#[test]
fn single_block_matches_direct_dct() {
    for quality in [10, 50, 65, 90] {
        let img = random_image(8, 8, quality as u64);
        let got = dct_quantize_purify(&img, quality).unwrap();
        let mut block = [0.0; 64];
        for (b, &v) in block.iter_mut().zip(img.data()) {
            *b = v as f64;
        }
        let want = reference_block(&block, &quant_table(quality).unwrap());
        for (g, w) in got.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-5, "q{quality}: {g} vs {w}");
        }
    }
}

#[test]
fn quality_100_is_nearly_lossless() {
    let img = random_image(20, 13, 4);
    let out = dct_quantize_purify(&img, 100).unwrap();
    assert_eq!(out.shape(), img.shape());
    let err = out.sub(&img).unwrap().max_abs();
    assert!(err < 2.0 / 255.0, "{err}");
}

#[test]
fn constant_images_survive_quantization() {
    for v in [0.0f32, 0.3, 0.5, 1.0] {
        let img = Tensor::full(&[1, 1, 16, 16], v);
        let out = dct_quantize_purify(&img, 65).unwrap();
        assert!(out.data().iter().all(|&o| (o - v).abs() <= 1.0 / 255.0), "{v}");
    }
}

#[test]
fn crop_of_the_full_frame_is_the_identity() {
    let img = random_image(17, 11, 5);
    assert_eq!(crop_resize_purify(&img, 1.0).unwrap(), img);
}

#[test]
fn crop_keeps_constants_and_shape() {
    let img = Tensor::full(&[2, 1, 32, 32], 0.4);
    let out = crop_resize_purify(&img, 0.9).unwrap();
    assert_eq!(out.shape(), img.shape());
    assert!(out.data().iter().all(|&o| (o - 0.4).abs() < 1e-6));
}

#[test]
fn crop_of_a_horizontal_ramp_is_a_ramp() {
    // crop 16 → ⌊0.5·16⌋ = 8 columns starting at 4, stretched back to 16
    let img = Tensor::from_fn(&[1, 1, 16, 16], |i| (i % 16) as f32 / 15.0);
    let out = crop_resize_purify(&img, 0.5).unwrap();
    for x in 0..16 {
        // half-pixel centres: source column (x + 0.5)/2 − 0.5, clamped to [0, 7]
        let sx = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 7.0);
        let want = (4.0 + sx) / 15.0;
        assert!((out.data()[x] as f64 - want).abs() < 1e-6, "x={x}");
    }
}

#[test]
fn invalid_settings_are_rejected() {
    let img = random_image(16, 16, 1);
    assert!(dct_quantize_purify(&img, 0).is_err());
    assert!(crop_resize_purify(&img, 0.0).is_err());
    assert!(crop_resize_purify(&img, 1.2).is_err());
    assert!(crop_resize_purify(&img, 0.3).is_err());
    assert!(dct_quantize_purify(&Tensor::zeros(&[16, 16]), 50).is_err());
    assert!(PurifyConfig::DctQuantize { quality: 0 }.validate().is_err());
    assert!(PurifyConfig::CropResize { fraction: f64::NAN }.validate().is_err());
}

#[test]
fn configs_round_trip_and_label() {
    let c = PurifyConfig::DctQuantize { quality: 65 };
    assert_eq!(c.label(), "dct65");
    let json = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<PurifyConfig>(&json).unwrap(), c);
    let c: PurifyConfig = serde_json::from_str(r#"{"kind":"crop_resize","fraction":0.9}"#).unwrap();
    assert_eq!(c.label(), "crop0.9");
    assert!(serde_json::from_str::<PurifyConfig>(r#"{"kind":"crop_resize","fraction":0.9,"x":1}"#).is_err());
    let img = random_image(16, 16, 2);
    assert_eq!(c.apply(&img).unwrap(), crop_resize_purify(&img, 0.9).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn purifiers_stay_in_range_and_keep_shape(
        s in 0u64..10_000,
        h in 14usize..30,
        w in 14usize..30,
        quality in 1u32..=100,
        f in 0.6f64..=1.0,
    ) {
        let img = random_image(h, w, s);
        for out in [dct_quantize_purify(&img, quality).unwrap(), crop_resize_purify(&img, f).unwrap()] {
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn quantization_is_nearly_idempotent(s in 0u64..10_000, quality in prop::sample::select(vec![50u32, 65, 75, 90])) {
        let img = random_image(16, 16, s);
        let once = dct_quantize_purify(&img, quality).unwrap();
        let twice = dct_quantize_purify(&once, quality).unwrap();
        prop_assert!(twice.sub(&once).unwrap().max_abs() < 4.0 / 255.0);
    }
}
