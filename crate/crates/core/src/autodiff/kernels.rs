//! Raw numeric kernels on flat slices.
//!
//! These are the hot loops shared by the tape ops and their backward rules.
//! All matrices are row-major.

/// c += a (m x k) * b (k x n)
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // ikj order: the inner loop is a contiguous axpy over b and c, which
    // the compiler vectorizes.
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ip * b_v;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// c += a^T (a is m x k, result k x n) * b (m x n)
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ip * b_v;
            }
        }
    }
}

/// c += a (m x n) * b^T (b is k x n, result m x k)
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (p, c_v) in c_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&a_v, &b_v) in a_row.iter().zip(b_row) {
                acc += a_v * b_v;
            }
            *c_v += acc;
        }
    }
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// 1-D convolution over (n, t, c_in) input with (c_out, k, c_in) kernel.
/// Zero padding on the left/right as given; `t_out` must satisfy
/// t_out = (t + pad_left + pad_right - (k-1)*dilation - 1) / stride + 1.
#[allow(clippy::too_many_arguments)]
pub fn conv1d(
    x: &[f64],
    w: &[f64],
    n: usize,
    t: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad_left: usize,
    t_out: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; n * t_out * c_out];
    for b in 0..n {
        let x_s = &x[b * t * c_in..(b + 1) * t * c_in];
        let y_s = &mut y[b * t_out * c_out..(b + 1) * t_out * c_out];
        for tau in 0..t_out {
            let base = (tau * stride) as isize - pad_left as isize;
            let y_row = &mut y_s[tau * c_out..(tau + 1) * c_out];
            for kk in 0..k {
                let src = base + (kk * dilation) as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let x_row = &x_s[src as usize * c_in..(src as usize + 1) * c_in];
                for (co, y_v) in y_row.iter_mut().enumerate() {
                    let w_row = &w[(co * k + kk) * c_in..(co * k + kk + 1) * c_in];
                    let mut acc = 0.0;
                    for (&xv, &wv) in x_row.iter().zip(w_row) {
                        acc += xv * wv;
                    }
                    *y_v += acc;
                }
            }
        }
    }
    y
}

/// Gradients of `conv1d` w.r.t. input and kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    t: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad_left: usize,
    t_out: usize,
    dx: &mut [f64],
    dw: &mut [f64],
) {
    for b in 0..n {
        let x_s = &x[b * t * c_in..(b + 1) * t * c_in];
        let dx_s = &mut dx[b * t * c_in..(b + 1) * t * c_in];
        let dy_s = &dy[b * t_out * c_out..(b + 1) * t_out * c_out];
        for tau in 0..t_out {
            let base = (tau * stride) as isize - pad_left as isize;
            let dy_row = &dy_s[tau * c_out..(tau + 1) * c_out];
            for kk in 0..k {
                let src = base + (kk * dilation) as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let x_row = &x_s[src * c_in..(src + 1) * c_in];
                let dx_row = &mut dx_s[src * c_in..(src + 1) * c_in];
                for (co, &g) in dy_row.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let w_row = &w[(co * k + kk) * c_in..(co * k + kk + 1) * c_in];
                    let dw_row = &mut dw[(co * k + kk) * c_in..(co * k + kk + 1) * c_in];
                    for ci in 0..c_in {
                        dx_row[ci] += g * w_row[ci];
                        dw_row[ci] += g * x_row[ci];
                    }
                }
            }
        }
    }
}

/// Row-wise softmax of an (r x c) matrix, numerically stable.
pub fn softmax_rows(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let out_row = &mut out[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let out_row = &mut out[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let log_z = max + sum.ln();
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = v - log_z;
        }
    }
    out
}

/// Per-sample cross-entropy losses from raw logits.
pub fn ce_losses(logits: &[f64], labels: &[usize], c: usize) -> Vec<f64> {
    let n = labels.len();
    debug_assert_eq!(logits.len(), n * c);
    let ls = log_softmax_rows(logits, n, c);
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -ls[i * c + y])
        .collect()
}

/// Row-wise argmax of an (r x c) matrix; ties go to the lowest index.
pub fn argmax_rows(x: &[f64], r: usize, c: usize) -> Vec<usize> {
    (0..r)
        .map(|i| {
            let row = &x[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] * [[1],[1]] = [[3],[7]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 2, 2, 1);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let t = transpose(&a, 2, 3);
        assert_eq!(t, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(transpose(&t, 3, 2), a);
    }

    #[test]
    fn conv1d_sliding_dot_oracle() {
        // conv1d(x=[1,0,0,0], kernel=[1,2], stride 1, no pad) -> [1,2,0]
        let y = conv1d(&[1.0, 0.0, 0.0, 0.0], &[1.0, 2.0], 1, 4, 1, 1, 2, 1, 1, 0, 3);
        assert_eq!(y, vec![1.0, 2.0, 0.0]);

        // Brute-force sliding window oracle on a random-ish case.
        let x = [0.5, -1.0, 2.0, 0.25, -0.75];
        let w = [1.0, -2.0, 0.5];
        let y = conv1d(&x, &w, 1, 5, 1, 1, 3, 1, 1, 0, 3);
        for (i, &yv) in y.iter().enumerate() {
            let expect: f64 = (0..3).map(|k| x[i + k] * w[k]).sum();
            assert!((yv - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_dilation_and_padding() {
        // kernel [1,1] dilation 2 over [1,2,3,4] with pad_left 2:
        // taps at (tau-2, tau): tau=0 -> 0+? src -2 skipped, src 0 -> 1
        let y = conv1d(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 1, 4, 1, 1, 2, 1, 2, 2, 4);
        assert_eq!(y, vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let s = softmax_rows(&[0.0, 0.0, 0.0], 1, 3);
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_rows(&[1.0, -2.0, 0.5, 10.0, 10.0, 10.0], 2, 3);
        for i in 0..2 {
            let sum: f64 = s[i * 3..(i + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
