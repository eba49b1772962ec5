//! Batched layer kernels on flat row-major buffers.
//!
//! Every output row depends only on its own input row, so results do not
//! depend on how examples are grouped into batches. Reductions use a fixed
//! eight-lane accumulation order.

use crate::scalar::Scalar;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[b, o] = sum_i w[o, i] x[b, i] + bias[o]`
pub fn dense_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    batch: usize,
    fan_in: usize,
    fan_out: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * fan_out);
    for b in 0..batch {
        let xr = &x[b * fan_in..(b + 1) * fan_in];
        for o in 0..fan_out {
            out.push(dot(xr, &w[o * fan_in..(o + 1) * fan_in]) + bias[o]);
        }
    }
    out
}

/// Accumulates weight/bias gradients and optionally returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    batch: usize,
    fan_in: usize,
    fan_out: usize,
    gw: &mut [T],
    gb: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let mut gx = want_input_grad.then(|| vec![T::zero(); batch * fan_in]);
    for b in 0..batch {
        let xr = &x[b * fan_in..(b + 1) * fan_in];
        let gr = &g[b * fan_out..(b + 1) * fan_out];
        for (o, &go) in gr.iter().enumerate() {
            if go == T::zero() {
                continue;
            }
            gb[o] += go;
            axpy(&mut gw[o * fan_in..(o + 1) * fan_in], go, xr);
            if let Some(gx) = gx.as_mut() {
                axpy(
                    &mut gx[b * fan_in..(b + 1) * fan_in],
                    go,
                    &w[o * fan_in..(o + 1) * fan_in],
                );
            }
        }
    }
    gx
}

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

/// Range of output coordinates `y` for which `y + k - 1` is inside `[0, n)`.
#[inline]
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { n.saturating_sub(1) } else { n };
    (lo, hi)
}

/// 3x3 convolution, stride 1, zero padding 1.
pub fn conv3x3_forward<T: Scalar>(x: &[T], wt: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let plane = d.h * d.w;
    let mut out = vec![T::zero(); d.batch * d.c_out * plane];
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let op = &mut out[(b * d.c_out + o) * plane..(b * d.c_out + o + 1) * plane];
            op.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..d.c_in {
                let ip = &x[(b * d.c_in + c) * plane..(b * d.c_in + c + 1) * plane];
                for ky in 0..3 {
                    let (y0, y1) = valid_range(ky, d.h);
                    for kx in 0..3 {
                        let (x0, x1) = valid_range(kx, d.w);
                        let wv = wt[((o * d.c_in + c) * 3 + ky) * 3 + kx];
                        for y in y0..y1 {
                            let iy = y + ky - 1;
                            let orow = &mut op[y * d.w + x0..y * d.w + x1];
                            let irow = &ip[iy * d.w + x0 + kx - 1..iy * d.w + x1 + kx - 1];
                            axpy(orow, wv, irow);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv3x3_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    g: &[T],
    d: &ConvDims,
    gw: &mut [T],
    gb: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let plane = d.h * d.w;
    let mut gx = want_input_grad.then(|| vec![T::zero(); d.batch * d.c_in * plane]);
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let gp = &g[(b * d.c_out + o) * plane..(b * d.c_out + o + 1) * plane];
            gb[o] += gp.iter().copied().sum::<T>();
            for c in 0..d.c_in {
                let base = (b * d.c_in + c) * plane;
                let ip = &x[base..base + plane];
                for ky in 0..3 {
                    let (y0, y1) = valid_range(ky, d.h);
                    for kx in 0..3 {
                        let (x0, x1) = valid_range(kx, d.w);
                        let widx = ((o * d.c_in + c) * 3 + ky) * 3 + kx;
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let iy = y + ky - 1;
                            let grow = &gp[y * d.w + x0..y * d.w + x1];
                            let irow = &ip[iy * d.w + x0 + kx - 1..iy * d.w + x1 + kx - 1];
                            acc += dot(grow, irow);
                            if let Some(gx) = gx.as_mut() {
                                let start = base + iy * d.w + x0 + kx - 1;
                                axpy(&mut gx[start..start + (x1 - x0)], wt[widx], grow);
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    gx
}

/// 2x2 average pooling with stride 2 over `[batch * channels]` planes.
pub fn avgpool_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let ip = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                out.push(((ip[i] + ip[i + 1]) + (ip[i + w] + ip[i + w + 1])) * quarter);
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let gp = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let v = g[(p * oh + y) * ow + xx] * quarter;
                let i = 2 * y * w + 2 * xx;
                gp[i] = v;
                gp[i + 1] = v;
                gp[i + w] = v;
                gp[i + w + 1] = v;
            }
        }
    }
    gx
}
