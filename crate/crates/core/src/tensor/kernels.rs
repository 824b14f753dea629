//! Dense numeric kernels behind the graph ops: matrix multiply, im2col
//! convolution, pooling and resampling.
//!
//! Every kernel writes each output element from a single task, so results are
//! bitwise reproducible regardless of how rayon schedules the work.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

/// `out = a @ b`. Splits the row range across threads; each chunk is computed
/// by matrixmultiply's sequential dgemm.
pub fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = Array2::<f64>::zeros((m, n));
    let chunk = m.div_ceil(rayon::current_num_threads()).max(16);
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut oc)| {
            let r0 = ci * chunk;
            let rows = oc.nrows();
            let asub = a.slice(ndarray::s![r0..r0 + rows, ..]);
            ndarray::linalg::general_mat_mul(1.0, &asub, b, 0.0, &mut oc);
        });
    out
}

/// Unfold `(c, h, w)` into `(c*kh*kw, oh*ow)` columns for a strided, padded
/// convolution. Out-of-bounds taps read zero.
pub fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    {
        let xs = x.as_slice().expect("im2col needs contiguous input");
        let cs = cols.as_slice_mut().unwrap();
        cs.par_chunks_mut(oh * ow).enumerate().for_each(|(r, row)| {
            let ci = r / (kh * kw);
            let ky = (r / kw) % kh;
            let kx = r % kw;
            let plane = &xs[ci * h * w..(ci + 1) * h * w];
            for oy in 0..oh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src = &plane[iy as usize * w..iy as usize * w + w];
                let dst = &mut row[oy * ow..oy * ow + ow];
                for ox in 0..ow {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix >= 0 && ix < w as isize {
                        dst[ox] = src[ix as usize];
                    }
                }
            }
        });
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub fn col2im_add(
    cols: &ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    assert_eq!(cols.dim(), (c * kh * kw, oh * ow));
    let mut out = Array3::<f64>::zeros((c, h, w));
    let colsl = cols.as_slice().expect("col2im needs contiguous cols");
    // Parallel over channels: each channel only touches its own plane.
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut plane)| {
            let pl = plane.as_slice_mut().unwrap();
            for ky in 0..kh {
                for kx in 0..kw {
                    let r = ci * kh * kw + ky * kw + kx;
                    let row = &colsl[r * oh * ow..(r + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut pl[iy as usize * w..iy as usize * w + w];
                        let src = &row[oy * ow..oy * ow + ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[ox];
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Insert `stride-1` zeros between pixels: `(c,h,w) -> (c, (h-1)*s+1, (w-1)*s+1)`.
pub fn zero_insert(x: &ArrayView3<f64>, stride: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (uh, uw) = ((h - 1) * stride + 1, (w - 1) * stride + 1);
    let mut out = Array3::<f64>::zeros((c, uh, uw));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[[ci, y * stride, xx * stride]] = x[[ci, y, xx]];
            }
        }
    }
    out
}

/// Adjoint of [`zero_insert`]: sample the strided grid back out.
pub fn zero_insert_adjoint(g: &ArrayView3<f64>, stride: usize, h: usize, w: usize) -> Array3<f64> {
    let (c, _, _) = g.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[[ci, y, xx]] = g[[ci, y * stride, xx * stride]];
            }
        }
    }
    out
}

/// Max pooling; ties resolve to the first (row-major) maximum.
pub fn max_pool(
    x: &ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut arg = vec![usize::MAX; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut besti = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = x[[ci, iy as usize, ix as usize]];
                        if v > best {
                            best = v;
                            besti = ci * h * w + iy as usize * w + ix as usize;
                        }
                    }
                }
                out[[ci, oy, ox]] = best;
                arg[ci * oh * ow + oy * ow + ox] = besti;
            }
        }
    }
    (out, arg)
}

/// Average pooling with a full `k x k` window (no padding; `h`, `w` must be
/// divisible by `k` the way we use it, but partial windows are averaged over
/// their true support anyway).
pub fn avg_pool(x: &ArrayView3<f64>, k: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / k, w / k);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let inv = 1.0 / (k * k) as f64;
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        s += x[[ci, oy * k + ky, ox * k + kx]];
                    }
                }
                out[[ci, oy, ox]] = s * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward(g: &ArrayView3<f64>, k: usize, h: usize, w: usize) -> Array3<f64> {
    let (c, oh, ow) = g.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    let inv = 1.0 / (k * k) as f64;
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[[ci, oy, ox]] * inv;
                for ky in 0..k {
                    for kx in 0..k {
                        out[[ci, oy * k + ky, ox * k + kx]] += gv;
                    }
                }
            }
        }
    }
    out
}

/// Bilinear interpolation weights for one output coordinate
/// (half-pixel centers, clamped to the edge).
fn lerp_taps(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, in_len as f64 - 1.0);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

pub fn resize_bilinear(x: &ArrayView3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for oy in 0..oh {
        let (y0, y1, fy) = lerp_taps(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = lerp_taps(ox, ow, w);
            for ci in 0..c {
                let v = x[[ci, y0, x0]] * (1.0 - fy) * (1.0 - fx)
                    + x[[ci, y0, x1]] * (1.0 - fy) * fx
                    + x[[ci, y1, x0]] * fy * (1.0 - fx)
                    + x[[ci, y1, x1]] * fy * fx;
                out[[ci, oy, ox]] = v;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(
    g: &ArrayView3<f64>,
    h: usize,
    w: usize,
) -> Array3<f64> {
    let (c, oh, ow) = g.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for oy in 0..oh {
        let (y0, y1, fy) = lerp_taps(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = lerp_taps(ox, ow, w);
            for ci in 0..c {
                let gv = g[[ci, oy, ox]];
                out[[ci, y0, x0]] += gv * (1.0 - fy) * (1.0 - fx);
                out[[ci, y0, x1]] += gv * (1.0 - fy) * fx;
                out[[ci, y1, x0]] += gv * fy * (1.0 - fx);
                out[[ci, y1, x1]] += gv * fy * fx;
            }
        }
    }
    out
}

/// Depthwise correlation with one `kh x kw` kernel per channel, zero padding.
pub fn depthwise_conv(
    x: &ArrayView3<f64>,
    kernel: &ArrayView3<f64>,
    pad: usize,
) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (ck, kh, kw) = kernel.dim();
    assert_eq!(c, ck);
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut plane)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            s += x[[ci, iy as usize, ix as usize]] * kernel[[ci, ky, kx]];
                        }
                    }
                    plane[[oy, ox]] = s;
                }
            }
        });
    out
}

/// Input gradient of [`depthwise_conv`] (full correlation with the flipped kernel).
pub fn depthwise_conv_backward_input(
    g: &ArrayView3<f64>,
    kernel: &ArrayView3<f64>,
    pad: usize,
    h: usize,
    w: usize,
) -> Array3<f64> {
    let (c, oh, ow) = g.dim();
    let (_, kh, kw) = kernel.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut plane)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[[ci, oy, ox]];
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            plane[[iy as usize, ix as usize]] += gv * kernel[[ci, ky, kx]];
                        }
                    }
                }
            }
        });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    #[test]
    fn matmul_small() {
        let a = arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let b = arr2(&[[7.0, 8.0, 9.0], [10.0, 11.0, 12.0]]);
        let c = matmul(&a.view(), &b.view());
        assert_eq!(c, arr2(&[[27.0, 30.0, 33.0], [61.0, 68.0, 75.0], [95.0, 106.0, 117.0]]));
    }

    #[test]
    fn im2col_col2im_roundtrip_shape() {
        let x = Array3::from_shape_fn((2, 5, 5), |(c, y, xx)| (c * 25 + y * 5 + xx) as f64);
        let (cols, oh, ow) = im2col(&x.view(), 3, 3, 2, 1);
        assert_eq!((oh, ow), (3, 3));
        assert_eq!(cols.dim(), (18, 9));
        // center tap of the first window = x[0,0,0] with pad shift
        assert_eq!(cols[[4, 0]], x[[0, 0, 0]]);
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, y, xx)| (y * 4 + xx) as f64);
        let y = resize_bilinear(&x.view(), 4, 4);
        assert_eq!(x, y);
    }

    #[test]
    fn avg_pool_means() {
        let x = Array3::from_shape_fn((1, 2, 2), |(_, y, xx)| (y * 2 + xx) as f64);
        let y = avg_pool(&x.view(), 2);
        assert_eq!(y[[0, 0, 0]], 1.5);
    }
}
