//! 3x3 convolution (stride 1, zero padding 1) through im2col and GEMM.

use super::Tensor3;

pub(crate) const KSIZE: usize = 3;
pub(crate) const KAREA: usize = KSIZE * KSIZE;

/// Unrolls every 3x3 neighbourhood into a `(C * 9) x (H * W)` matrix.
fn im2col(input: &Tensor3) -> Vec<f64> {
    let (c, h, w) = input.shape();
    let hw = h * w;
    let mut col = vec![0.0; c * KAREA * hw];
    for ci in 0..c {
        let plane = input.channel(ci);
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = &mut col[((ci * KAREA) + ky * KSIZE + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    // x range with a valid source column x + kx - 1
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for x in x0..x1 {
                        dst[x] = src[x + kx - 1];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds an unrolled gradient back onto the image grid.
fn col2im(col: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..][..hw];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = &col[((ci * KAREA) + ky * KSIZE + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for x in x0..x1 {
                        dst[x + kx - 1] += src[x];
                    }
                }
            }
        }
    }
    out
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above and the callers' shapes keep every index
    // `i * rs + j * cs` inside the borrowed slices; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(
    weights: &[f64],
    bias: &[f64],
    out_channels: usize,
    input: &Tensor3,
) -> Tensor3 {
    let (c, h, w) = input.shape();
    let hw = h * w;
    let k = c * KAREA;
    let col = im2col(input);
    let mut out = vec![0.0; out_channels * hw];
    for (o, row) in out.chunks_exact_mut(hw).enumerate() {
        row.fill(bias[o]);
    }
    gemm(
        out_channels,
        k,
        hw,
        weights,
        (k, 1),
        &col,
        (hw, 1),
        1.0,
        &mut out,
    );
    Tensor3::from_raw(out_channels, h, w, out)
}

/// Parameter gradients of one conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Returns the input gradient, plus weight/bias gradients when requested.
pub(crate) fn backward(
    weights: &[f64],
    out_channels: usize,
    input: &Tensor3,
    grad_out: &Tensor3,
    want_params: bool,
) -> (Tensor3, Option<ConvGrad>) {
    let (c, h, w) = input.shape();
    let hw = h * w;
    let k = c * KAREA;
    let dout = grad_out.data();

    let mut dcol = vec![0.0; k * hw];
    // dcol = W^T (k x out) * dOut (out x hw)
    gemm(
        k,
        out_channels,
        hw,
        weights,
        (1, k),
        dout,
        (hw, 1),
        0.0,
        &mut dcol,
    );
    let grad_in = Tensor3::from_raw(c, h, w, col2im(&dcol, c, h, w));

    let params = want_params.then(|| {
        let col = im2col(input);
        let mut dw = vec![0.0; out_channels * k];
        // dW = dOut (out x hw) * col^T (hw x k)
        gemm(
            out_channels,
            hw,
            k,
            dout,
            (hw, 1),
            &col,
            (1, hw),
            0.0,
            &mut dw,
        );
        let db = dout.chunks_exact(hw).map(|row| row.iter().sum()).collect();
        ConvGrad {
            weights: dw,
            bias: db,
        }
    });
    (grad_in, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct 7-loop convolution used as the reference.
    fn naive(weights: &[f64], bias: &[f64], out_c: usize, x: &Tensor3) -> Tensor3 {
        let (c, h, w) = x.shape();
        let mut out = vec![0.0; out_c * h * w];
        for o in 0..out_c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[o];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += weights[((o * c + ci) * 3 + ky) * 3 + kx]
                                    * x.at(ci, sy as usize, sx as usize);
                            }
                        }
                    }
                    out[(o * h + y) * w + xx] = acc;
                }
            }
        }
        Tensor3::from_raw(out_c, h, w, out)
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (c, o, h, w) = (3, 4, 5, 6);
        let x = Tensor3::from_raw(
            c,
            h,
            w,
            (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let wt: Vec<f64> = (0..o * c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = forward(&wt, &b, o, &x);
        let slow = naive(&wt, &b, o, &x);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn adjoint_identity() {
        // <conv(x), g> - <b, sum g> == <x, conv^T(g)>
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, o, h, w) = (2, 3, 4, 5);
        let x = Tensor3::from_raw(
            c,
            h,
            w,
            (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let g = Tensor3::from_raw(
            o,
            h,
            w,
            (0..o * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let wt: Vec<f64> = (0..o * c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zero_bias = vec![0.0; o];
        let y = forward(&wt, &zero_bias, o, &x);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let (gx, params) = backward(&wt, o, &x, &g, true);
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        // <conv(x), g> is linear in W, so its W-gradient dotted with W gives it back.
        let p = params.unwrap();
        let via_w: f64 = p.weights.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - via_w).abs() < 1e-12);
        let gsum: Vec<f64> = g.data().chunks(h * w).map(|r| r.iter().sum()).collect();
        assert_eq!(p.bias, gsum);
    }
}
