use proptest::prelude::*;

use facefill::imaging::{
    composite, decode_image, decode_mask, encode_mask_png, encode_png, generate_block_mask, Image, LandmarkSet, Mask,
    NUM_LANDMARKS,
};
use facefill::metrics::{psnr, ssim};
use facefill::train::{LrSchedule, MaskKind, TrainConfig};

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(-1.0f32..=1.0, h * w * 3).prop_map(move |d| Image::new(h, w, d).unwrap())
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(0u8..=1, h * w).prop_map(move |d| Mask::new(h, w, d).unwrap())
}

fn scene_from(min: usize) -> impl Strategy<Value = (Image, Image, Mask)> {
    (min..min + 12, min..min + 12).prop_flat_map(|(h, w)| (image(h, w), image(h, w), mask(h, w)))
}

fn scene() -> impl Strategy<Value = (Image, Image, Mask)> {
    scene_from(1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_keeps_known_pixels((generated, original, m) in scene()) {
        let out = composite(&generated, &original, &m).unwrap();
        let (h, w) = m.dims();
        for y in 0..h {
            for x in 0..w {
                let want = if m.is_hole(y, x) { generated.pixel(y, x) } else { original.pixel(y, x) };
                prop_assert_eq!(out.pixels().pixel(y, x), want);
            }
        }
    }

    #[test]
    fn png_round_trip_is_within_one_level((_, img, m) in scene()) {
        let back = decode_image(&encode_png(&img).unwrap()).unwrap();
        prop_assert_eq!(back.dims(), img.dims());
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6, "{} vs {}", a, b);
        }
        prop_assert_eq!(decode_mask(&encode_mask_png(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn psnr_is_symmetric_and_ssim_is_one_on_identity((a, b, _) in scene_from(11)) {
        let ab = psnr(&a, &b).unwrap();
        let ba = psnr(&b, &a).unwrap();
        prop_assert!(ab == ba || (ab.is_infinite() && ba.is_infinite()));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn block_masks_are_seeded(seed in any::<u64>(), coverage in 0.05f64..0.9, h in 8usize..48, w in 8usize..48) {
        let a = generate_block_mask(h, w, seed, coverage).unwrap();
        prop_assert_eq!(&a, &generate_block_mask(h, w, seed, coverage).unwrap());
        prop_assert!(a.hole_count() > 0 && a.hole_count() < h * w);
    }

    #[test]
    fn landmark_flat_round_trip(values in prop::collection::vec(0.0f32..=1.0, NUM_LANDMARKS * 2)) {
        let set = LandmarkSet::from_flat(&values).unwrap();
        prop_assert_eq!(set.to_flat(), values);
    }

    #[test]
    fn config_text_round_trip(
        seed in any::<u64>(),
        max_steps in 1u64..1_000_000,
        lr in 1e-6f64..1e-2,
        cosine in any::<bool>(),
        size in prop::sample::select(vec![32usize, 64, 128, 256]),
    ) {
        let cfg = TrainConfig {
            seed,
            max_steps,
            lr_generator: lr,
            image_size: size,
            lr_schedule: if cosine { LrSchedule::Cosine } else { LrSchedule::Constant },
            mask_source: MaskKind::Block,
            ..TrainConfig::desk()
        };
        prop_assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
