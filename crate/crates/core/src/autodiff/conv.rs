//! Direct 2-D convolution kernels ("same" zero padding) via im2col + GEMM.

use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4};

/// Lay out all kernel-sized patches of `x` as columns: output is
/// `(c_in * kh * kw, h * w)`.
pub fn im2col(x: &ArrayView3<f64>, kh: usize, kw: usize) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let ph = kh / 2;
    let pw = kw / 2;
    let mut col = Array2::zeros((c_in * kh * kw, h * w));
    for ci in 0..c_in {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                let mut col_row = col.row_mut(row);
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let shift = dx as isize - pw as isize;
                    let x_lo = (-shift).max(0) as usize;
                    let x_hi = (w as isize - shift).min(w as isize) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src = x.slice(ndarray::s![ci, sy as usize, ..]);
                    for xx in x_lo..x_hi {
                        col_row[y * w + xx] = src[(xx as isize + shift) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the columns back into an image; adjoint of [`im2col`].
pub fn col2im(col: &Array2<f64>, c_in: usize, h: usize, w: usize, kh: usize, kw: usize) -> Array3<f64> {
    let ph = kh / 2;
    let pw = kw / 2;
    let mut x = Array3::zeros((c_in, h, w));
    for ci in 0..c_in {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                let col_row = col.row(row);
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let shift = dx as isize - pw as isize;
                    let x_lo = (-shift).max(0) as usize;
                    let x_hi = (w as isize - shift).min(w as isize) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let mut dst = x.slice_mut(ndarray::s![ci, sy as usize, ..]);
                    for xx in x_lo..x_hi {
                        dst[(xx as isize + shift) as usize] += col_row[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// `y[co] = sum_ci w[co, ci] * x[ci]` with same padding.
pub fn conv2d_forward(x: &ArrayView3<f64>, w: &ArrayView4<f64>) -> Array3<f64> {
    let (c_in, h, width) = x.dim();
    let (c_out, c_in_w, kh, kw) = w.dim();
    assert_eq!(c_in, c_in_w, "conv channel mismatch");
    let col = im2col(x, kh, kw);
    let w_mat = w
        .to_shape((c_out, c_in * kh * kw))
        .expect("kernel is contiguous");
    let out = w_mat.dot(&col);
    out.into_shape_with_order((c_out, h, width)).unwrap()
}

/// Gradients of [`conv2d_forward`] w.r.t. input and kernel.
pub fn conv2d_backward(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    grad: &ArrayView3<f64>,
) -> (Array3<f64>, Array4<f64>) {
    let (c_in, h, width) = x.dim();
    let (c_out, _, kh, kw) = w.dim();
    let col = im2col(x, kh, kw);
    let g_mat = grad
        .to_shape((c_out, h * width))
        .expect("gradient is contiguous");
    let dw_mat = g_mat.dot(&col.t());
    let dw = dw_mat.into_shape_with_order((c_out, c_in, kh, kw)).unwrap();
    let w_mat = w
        .to_shape((c_out, c_in * kh * kw))
        .expect("kernel is contiguous");
    let dcol = w_mat.t().dot(&g_mat);
    let dx = col2im(&dcol, c_in, h, width, kh, kw);
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_fn((3, 5, 7), |_| rng.gen_range(-1.0..1.0));
        let w = Array4::from_shape_fn((2, 3, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let fast = conv2d_forward(&x.view(), &w.view());
        let (c_out, _, kh, kw) = w.dim();
        let (c_in, h, width) = x.dim();
        for co in 0..c_out {
            for y in 0..h {
                for xx in 0..width {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let sy = y as isize + dy as isize - (kh / 2) as isize;
                                let sx = xx as isize + dx as isize - (kw / 2) as isize;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < width as isize {
                                    acc += w[(co, ci, dy, dx)] * x[(ci, sy as usize, sx as usize)];
                                }
                            }
                        }
                    }
                    assert!((fast[(co, y, xx)] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array3::from_shape_fn((2, 4, 5), |_| rng.gen_range(-1.0..1.0));
        let w = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let g = Array3::from_shape_fn((3, 4, 5), |_| rng.gen_range(-1.0..1.0));
        let (dx, dw) = conv2d_backward(&x.view(), &w.view(), &g.view());

        let loss = |x: &Array3<f64>, w: &Array4<f64>| -> f64 {
            (conv2d_forward(&x.view(), &w.view()) * &g).sum()
        };
        let h = 1e-6;
        for idx in [(0usize, 0usize, 0usize), (1, 3, 4), (0, 2, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((dx[idx] - fd).abs() < 1e-6, "dx {idx:?}: {} vs {fd}", dx[idx]);
        }
        for idx in [(0usize, 0usize, 0usize, 0usize), (2, 1, 2, 2), (1, 0, 1, 0)] {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((dw[idx] - fd).abs() < 1e-6, "dw {idx:?}: {} vs {fd}", dw[idx]);
        }
    }
}
