//! Production kernels against naive loop-nest oracles. Both sides accumulate
//! in f64 over ascending indices and round once, so matches are exact
//! (bitwise on f32), not approximate.

use vsr_core::model::layers::{multi_head_attention, AttnW, Binder, LinearW};
use vsr_core::rng::stream;
use vsr_core::tape::Tape;
use vsr_core::tensor::Tensor;
use vsr_reference::{attention_naive, conv3d_naive, linear_naive};

#[test]
fn conv3d_identity_kernel_is_identity() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::rand_uniform(
        &[1, 3, 4, 4],
        -1.0,
        1.0,
        &mut stream(1, &["conv"]),
    ));
    let k = tape.leaf(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap());
    let y = tape.conv3d(x, k, None, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn conv3d_all_ones_kernel_sums_one_to_eight() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 2, 2, 2], (1..=8).map(|i| i as f32).collect()).unwrap());
    let k = tape.leaf(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
    let y = tape.conv3d(x, k, None, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[36.0]);
}

#[test]
fn conv3d_matches_loop_nest_oracle_exactly() {
    // random 3x3x3 kernel over a random 1x4x6x6 input, plus strided/padded
    // variants; outputs must match the seven-deep loop nest bitwise.
    let cases = [
        ([1usize, 4, 6, 6], [2usize, 1, 3, 3, 3], [1usize, 1, 1], [1usize, 1, 1]),
        ([2, 3, 5, 5], [3, 2, 3, 3, 3], [1, 2, 2], [0, 1, 1]),
        ([1, 4, 6, 6], [1, 1, 1, 2, 2], [2, 2, 2], [0, 0, 0]),
    ];
    for (i, (in_shape, k_shape, stride, pad)) in cases.into_iter().enumerate() {
        let seed = 100 + i as u64;
        let x = Tensor::rand_uniform(&in_shape, -1.0, 1.0, &mut stream(seed, &["x"]));
        let k = Tensor::rand_uniform(&k_shape, -1.0, 1.0, &mut stream(seed, &["k"]));
        let b = Tensor::rand_uniform(&[k_shape[0]], -1.0, 1.0, &mut stream(seed, &["b"]));
        let (want, want_shape) = conv3d_naive(
            x.data(),
            in_shape,
            k.data(),
            k_shape,
            Some(b.data()),
            stride,
            pad,
        );
        let mut tape = Tape::new();
        let xn = tape.leaf(x);
        let kn = tape.leaf(k);
        let bn = tape.leaf(b);
        let y = tape.conv3d(xn, kn, Some(bn), stride, pad).unwrap();
        assert_eq!(tape.value(y).shape(), &want_shape[..], "case {i}");
        assert_eq!(tape.value(y).data(), &want[..], "case {i}: bitwise mismatch");
    }
}

#[test]
fn conv3d_oversized_kernel_names_axis() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.leaf(Tensor::zeros(&[1, 1, 5, 3, 3]));
    let err = tape.conv3d(x, k, None, [1, 1, 1], [0, 0, 0]).unwrap_err();
    assert!(err.to_string().contains("axis 1"), "{err}");
}

#[test]
fn linear_identity_and_constant_cases() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut stream(5, &["x"])));
    let mut eye = vec![0.0f32; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let w = tape.leaf(Tensor::new(vec![4, 4], eye).unwrap());
    let y = tape.linear(x, w, None).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    // zero weight, bias b -> constant b
    let zero_w = tape.leaf(Tensor::zeros(&[2, 4]));
    let b = tape.leaf(Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
    let y = tape.linear(x, zero_w, Some(b)).unwrap();
    for row in 0..3 {
        assert_eq!(&tape.value(y).data()[row * 2..(row + 1) * 2], &[0.5, -1.5]);
    }

    // [[1,2],[3,4]] . [1,1] + [0,0] = [3, 7]
    let x2 = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let w2 = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y2 = tape.linear(x2, w2, None).unwrap();
    assert_eq!(tape.value(y2).data(), &[3.0, 7.0]);
}

#[test]
fn linear_matches_oracle_exactly() {
    let x = Tensor::rand_uniform(&[7, 5], -2.0, 2.0, &mut stream(6, &["x"]));
    let w = Tensor::rand_uniform(&[4, 5], -2.0, 2.0, &mut stream(6, &["w"]));
    let b = Tensor::rand_uniform(&[4], -2.0, 2.0, &mut stream(6, &["b"]));
    let want = linear_naive(x.data(), 7, 5, w.data(), 4, Some(b.data()));
    let mut tape = Tape::new();
    let (xn, wn, bn) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
    let y = tape.linear(xn, wn, Some(bn)).unwrap();
    assert_eq!(tape.value(y).data(), &want[..]);
}

#[test]
fn attention_with_identity_projections_matches_naive_single_head() {
    let (t, d) = (5, 6);
    let x = Tensor::rand_uniform(&[t, d], -1.0, 1.0, &mut stream(7, &["x"]));
    let want = attention_naive(x.data(), x.data(), x.data(), t, t, d);

    let mut eye = vec![0.0f32; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    let ident = || LinearW {
        w: Tensor::new(vec![d, d], eye.clone()).unwrap(),
        b: Tensor::zeros(&[d]),
    };
    let w = AttnW {
        q: ident(),
        k: ident(),
        v: ident(),
        o: ident(),
    };
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let wn = w.bind(&mut binder, "attn");
    let xn = binder.tape.leaf(x);
    let y = multi_head_attention(&mut tape, xn, xn, &wn, 1, None).unwrap();
    let got = tape.value(y).data();
    // The oracle computes context in f64 without the intermediate f32
    // rounding of the softmax op, so equality here is near-exact.
    for (g, w_) in got.iter().zip(&want) {
        assert!((g - w_).abs() <= 1e-6, "{g} vs {w_}");
    }
}

#[test]
fn softmax_shift_invariance_is_bitwise_for_exact_shifts() {
    // Quarter-step logits and a power-of-two shift: both the shifted inputs
    // and the max-subtracted differences are exactly representable, so the
    // outputs must agree bit for bit.
    let logits = vec![0.25f32, -1.5, 0.75, 2.0, -0.25, 1.25];
    let shifted: Vec<f32> = logits.iter().map(|x| x + 4.0).collect();
    let run = |vals: Vec<f32>| {
        let mut tape = Tape::new();
        let n = tape.leaf(Tensor::new(vec![1, 6], vals).unwrap());
        let s = tape.softmax(n).unwrap();
        tape.value(s).data().to_vec()
    };
    let a = run(logits);
    let b = run(shifted);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn softmax_closed_form_quarter_three_quarters() {
    let mut tape = Tape::new();
    let n = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, (3.0f32).ln()]).unwrap());
    let s = tape.softmax(n).unwrap();
    let got = tape.value(s).data();
    assert!((got[0] - 0.25).abs() < 1e-6);
    assert!((got[1] - 0.75).abs() < 1e-6);
}

#[test]
fn layer_norm_normalizes_random_vectors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::rand_uniform(&[1, 8], -3.0, 3.0, &mut stream(8, &["x"])));
    let gamma = tape.leaf(Tensor::full(&[8], 1.0));
    let beta = tape.leaf(Tensor::zeros(&[8]));
    let y = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
    let out = tape.value(y).data();
    let mean: f64 = out.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
    let var: f64 = out.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
    assert!(mean.abs() < 1e-6, "mean {mean}");
    assert!((var - 1.0).abs() < 1e-4, "var {var}");

    // constant vector -> all zeros
    let c = tape.leaf(Tensor::full(&[1, 5], 3.7));
    let g5 = tape.leaf(Tensor::full(&[5], 1.0));
    let b5 = tape.leaf(Tensor::zeros(&[5]));
    let y = tape.layer_norm(c, g5, b5, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // [-1, 1] is already normalized
    let pm = tape.leaf(Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap());
    let g2 = tape.leaf(Tensor::full(&[2], 1.0));
    let b2 = tape.leaf(Tensor::zeros(&[2]));
    let y = tape.layer_norm(pm, g2, b2, 1e-12).unwrap();
    let out = tape.value(y).data();
    assert!((out[0] + 1.0).abs() < 1e-5 && (out[1] - 1.0).abs() < 1e-5);
}
