//! Naive reference implementations used as independent oracles in tests.
//!
//! Everything here is written as the most literal loop nest or enumeration
//! possible and stays independent of the production kernels it checks. The
//! only convention shared with production code is the accumulation contract:
//! reductions accumulate in f64 over ascending indices and round to f32 once,
//! so that "exact match" assertions are meaningful.

/// Cross-correlation of `input` `[c_in, t, h, w]` with `kernel`
/// `[c_out, c_in, kt, kh, kw]`, written as the obvious seven-deep loop nest.
///
/// Returns `(data, [c_out, t_out, h_out, w_out])`. Out-of-range taps read 0.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_naive(
    input: &[f32],
    in_shape: [usize; 4],
    kernel: &[f32],
    k_shape: [usize; 5],
    bias: Option<&[f32]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f32>, [usize; 4]) {
    let [c_in, t, h, w] = in_shape;
    let [c_out, kc, kt, kh, kw] = k_shape;
    assert_eq!(c_in, kc, "channel mismatch");
    let t_out = (t + 2 * pad[0] - kt) / stride[0] + 1;
    let h_out = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let w_out = (w + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = vec![0f32; c_out * t_out * h_out * w_out];
    for co in 0..c_out {
        for to in 0..t_out {
            for ho in 0..h_out {
                for wo in 0..w_out {
                    let mut acc = bias.map_or(0.0, |b| b[co] as f64);
                    for ci in 0..c_in {
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let ti = (to * stride[0] + dt) as isize - pad[0] as isize;
                                    let hi = (ho * stride[1] + dh) as isize - pad[1] as isize;
                                    let wi = (wo * stride[2] + dw) as isize - pad[2] as isize;
                                    if ti < 0
                                        || hi < 0
                                        || wi < 0
                                        || ti >= t as isize
                                        || hi >= h as isize
                                        || wi >= w as isize
                                    {
                                        continue;
                                    }
                                    let x = input[((ci * t + ti as usize) * h + hi as usize) * w
                                        + wi as usize];
                                    let k = kernel[(((co * c_in + ci) * kt + dt) * kh + dh) * kw
                                        + dw];
                                    acc += x as f64 * k as f64;
                                }
                            }
                        }
                    }
                    out[((co * t_out + to) * h_out + ho) * w_out + wo] = acc as f32;
                }
            }
        }
    }
    (out, [c_out, t_out, h_out, w_out])
}

/// `y[m, o] = sum_i x[m, i] * w[o, i] + b[o]` with `x` viewed as `[m, d_in]`.
pub fn linear_naive(
    x: &[f32],
    rows: usize,
    d_in: usize,
    weight: &[f32],
    d_out: usize,
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let mut out = vec![0f32; rows * d_out];
    for m in 0..rows {
        for o in 0..d_out {
            let mut acc = bias.map_or(0.0, |b| b[o] as f64);
            for i in 0..d_in {
                acc += x[m * d_in + i] as f64 * weight[o * d_in + i] as f64;
            }
            out[m * d_out + o] = acc as f32;
        }
    }
    out
}

/// Single-head scaled dot-product attention on raw slices, no projections.
/// `q` is `[tq, d]`, `k` and `v` are `[tk, d]`; scaling is `1/sqrt(d)`.
pub fn attention_naive(q: &[f32], k: &[f32], v: &[f32], tq: usize, tk: usize, d: usize) -> Vec<f32> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0f32; tq * d];
    for i in 0..tq {
        let mut scores = vec![0f64; tk];
        for j in 0..tk {
            let mut acc = 0f64;
            for c in 0..d {
                acc += q[i * d + c] as f64 * k[j * d + c] as f64;
            }
            scores[j] = acc * scale;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for c in 0..d {
            let mut acc = 0f64;
            for j in 0..tk {
                acc += exps[j] / denom * v[j * d + c] as f64;
            }
            out[i * d + c] = acc as f32;
        }
    }
    out
}

/// Collapse a frame-level path under the CTC mapping: merge repeats, drop blanks.
pub fn ctc_collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &p in path {
        if p != blank && p != prev {
            out.push(p);
        }
        prev = p;
    }
    out
}

/// CTC negative log-likelihood by brute force: enumerate every one of the
/// `v^t` frame paths, collapse each, and sum the probabilities of paths whose
/// collapse equals `label`. `log_probs` is `[t, v]` row-major.
pub fn ctc_loss_exhaustive(log_probs: &[f32], t: usize, v: usize, label: &[usize], blank: usize) -> f64 {
    let mut total = 0f64;
    let paths = v.checked_pow(t as u32).expect("path count overflow");
    let mut path = vec![0usize; t];
    for idx in 0..paths {
        let mut rem = idx;
        for slot in path.iter_mut() {
            *slot = rem % v;
            rem /= v;
        }
        if ctc_collapse(&path, blank) == label {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(step, &tok)| log_probs[step * v + tok] as f64)
                .sum();
            total += lp.exp();
        }
    }
    -total.ln()
}

/// Plain Wagner-Fischer edit distance over arbitrary items.
pub fn edit_distance_naive<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        curr[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            curr[j] = sub.min(prev[j] + 1).min(curr[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Invoke `visit` for every sequence over `0..v` of length `0..=max_len`,
/// in length-then-lexicographic order. Used by exhaustive-search oracles.
pub fn for_each_sequence(v: usize, max_len: usize, visit: &mut dyn FnMut(&[usize])) {
    let mut seq = Vec::new();
    visit(&seq);
    fn rec(v: usize, max_len: usize, seq: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if seq.len() == max_len {
            return;
        }
        for tok in 0..v {
            seq.push(tok);
            visit(seq);
            rec(v, max_len, seq, visit);
            seq.pop();
        }
    }
    let mut seq2 = std::mem::take(&mut seq);
    rec(v, max_len, &mut seq2, visit);
}

/// Central finite difference of a scalar function: `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference(f: &mut dyn FnMut(f32) -> f64, x: f32, h: f32) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_merges_and_drops() {
        assert_eq!(ctc_collapse(&[0, 1, 1, 0, 1, 2], 0), vec![1, 1, 2]);
        assert_eq!(ctc_collapse(&[0, 0, 0], 0), Vec::<usize>::new());
    }

    #[test]
    fn edit_distance_kitten() {
        let a: Vec<char> = "kitten".chars().collect();
        let b: Vec<char> = "sitting".chars().collect();
        assert_eq!(edit_distance_naive(&a, &b), 3);
    }

    #[test]
    fn sequence_enumeration_count() {
        let mut n = 0usize;
        for_each_sequence(3, 3, &mut |_| n += 1);
        // 1 + 3 + 9 + 27
        assert_eq!(n, 40);
    }
}
