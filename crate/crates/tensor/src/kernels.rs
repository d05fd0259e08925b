//! Raw numeric kernels shared by the tape ops. No shape validation here.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op(x)` optionally transposes. `a` is `m×k` after `op`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths are checked above and the strides describe
    // exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold 3×3 "same" neighbourhoods of an NHWC batch into rows of
/// `9 * channels` values ordered (ky, kx, c). Out-of-bounds taps are zero.
pub fn im2col(input: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let row_len = 9 * c;
    let mut cols = vec![0.0; n * h * w * row_len];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = ((b * h + y) * w + x) * row_len;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&input[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input.
pub fn col2im(cols: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let row_len = 9 * c;
    let mut out = vec![0.0; n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = ((b * h + y) * w + x) * row_len;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for ch in 0..c {
                            out[dst + ch] += cols[src + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2×2 stride-2 max pooling over an NHWC batch. Odd edges see −∞ padding.
/// Returns pooled values and, per output cell, the flat input index of the
/// winner (first row-major maximum on ties).
pub fn maxpool2(input: &[f64], n: usize, h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![f64::NEG_INFINITY; n * oh * ow * c];
    let mut arg = vec![0usize; out.len()];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let o = ((b * oh + oy) * ow + ox) * c + ch;
                    for dy in 0..2 {
                        let y = 2 * oy + dy;
                        if y >= h {
                            continue;
                        }
                        for dx in 0..2 {
                            let x = 2 * ox + dx;
                            if x >= w {
                                continue;
                            }
                            let i = ((b * h + y) * w + x) * c + ch;
                            if input[i] > out[o] {
                                out[o] = input[i];
                                arg[o] = i;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let (v, a) = maxpool2(&[1.0, 1.0, 1.0, 1.0], 1, 2, 2, 1);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
    }

    #[test]
    fn maxpool_odd_edges() {
        // 3x3 single channel -> 2x2
        let input: Vec<f64> = (0..9).map(f64::from).collect();
        let (v, _) = maxpool2(&input, 1, 3, 3, 1);
        assert_eq!(v, vec![4.0, 5.0, 7.0, 8.0]);
    }
}
