//! Property-based invariants over serialization, softmax, the video
//! pipeline, and edit-distance metrics.

use proptest::prelude::*;
use vsr_core::metrics::cer;
use vsr_core::tape::Tape;
use vsr_core::tensor::Tensor;
use vsr_core::video::{augment, load_tensor, save_tensor, speed_perturb, AugmentPolicy, VideoTensor};
use vsr_reference::edit_distance_naive;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vten_roundtrip_is_bitwise(
        dims in prop::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
    ) {
        let numel: usize = dims.iter().product();
        let data: Vec<f32> = (0..numel)
            .map(|i| ((seed.wrapping_add(i as u64).wrapping_mul(2654435761)) % 1000) as f32 / 999.0)
            .collect();
        let t = Tensor::new(dims, data).unwrap();
        let mut buf = Vec::new();
        save_tensor(&mut buf, &t).unwrap();
        let back = load_tensor(&buf[..]).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn softmax_rows_always_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..9,
        vals in prop::collection::vec(-30.0f32..30.0, 1..40),
    ) {
        let numel = rows * cols;
        let data: Vec<f32> = (0..numel).map(|i| vals[i % vals.len()]).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![rows, cols], data).unwrap());
        let y = tape.softmax(x).unwrap();
        for r in 0..rows {
            let s: f64 = tape.value(y).data()[r * cols..(r + 1) * cols]
                .iter()
                .map(|&v| v as f64)
                .sum();
            prop_assert!((s - 1.0).abs() < 1e-6, "row {} sums to {}", r, s);
        }
    }

    #[test]
    fn augmentation_keeps_pixels_in_range_and_channels(
        t in 1usize..4,
        side in 4usize..10,
        rot in 0.0f32..45.0,
        flip_p in 0.0f32..1.0,
        lo in 0.5f32..1.0,
        hi in 1.0f32..1.5,
        seed in any::<u64>(),
    ) {
        let n = t * side * side;
        let data: Vec<f32> = (0..n).map(|i| (i % 17) as f32 / 16.0).collect();
        let video = VideoTensor::new(Tensor::new(vec![t, side, side, 1], data).unwrap(), 25.0).unwrap();
        let policy = AugmentPolicy {
            rotation_max_deg: rot,
            hflip_prob: flip_p,
            brightness_range: (lo, hi),
            contrast_range: (lo, hi),
        };
        let out = augment(&video, &policy, &mut vsr_core::rng::stream(seed, &["prop"])).unwrap();
        prop_assert_eq!(out.channels(), 1);
        prop_assert_eq!(out.t(), t);
        prop_assert!(out.frames().data().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn speed_perturb_length_follows_the_formula(
        t in 1usize..40,
        rate_pick in 0usize..3,
    ) {
        let rate = [0.9f64, 1.0, 1.1][rate_pick];
        let data: Vec<f32> = (0..t * 4).map(|i| (i % 7) as f32 / 6.0).collect();
        let video = VideoTensor::new(Tensor::new(vec![t, 2, 2, 1], data).unwrap(), 25.0).unwrap();
        let out = speed_perturb(&video, rate).unwrap();
        let expect = (((t as f64) / rate) - 1e-9).ceil().max(1.0) as usize;
        prop_assert_eq!(out.t(), expect);
        // every output frame is a verbatim input frame
        let frame = 4;
        for j in 0..out.t() {
            let src = ((j as f64 * rate).floor() as usize).min(t - 1);
            prop_assert_eq!(
                &out.frames().data()[j * frame..(j + 1) * frame],
                &video.frames().data()[src * frame..(src + 1) * frame]
            );
        }
    }

    #[test]
    fn cer_distance_equals_brute_force_and_is_a_metric(
        a in "[abc]{0,10}",
        b in "[abc]{0,10}",
        c in "[abc]{0,10}",
    ) {
        let d = |x: &str, y: &str| cer(x, y).0.distance();
        let oracle = edit_distance_naive(
            &a.chars().collect::<Vec<_>>(),
            &b.chars().collect::<Vec<_>>(),
        );
        prop_assert_eq!(d(&a, &b), oracle);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert_eq!(d(&a, &a), 0);
    }
}
