//! Slice-level forward and backward kernels behind the tape operations.
//!
//! Loops over the batch dimension go through [`crate::par`]; every reduction
//! across samples is performed afterwards in ascending sample order.

use crate::{par, Real, Result, TensorError};

/// Geometry of a stride-1 zero-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], pad: usize) -> Result<Self> {
        let (&[n, c, h, w], &[o, wc, k, k2]) = (x_shape, w_shape) else {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d expects rank-4 input and kernel, got {x_shape:?} and {w_shape:?}"
            )));
        };
        if wc != c || k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d kernel {w_shape:?} incompatible with input {x_shape:?}"
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d kernel {k} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            k,
            pad,
            oh: h + 2 * pad - k + 1,
            ow: w + 2 * pad - k + 1,
        })
    }

    /// Output rows `[y0, y1)` and columns `[x0, x1)` that read valid input at
    /// kernel offset `(ky, kx)`.
    #[inline]
    fn window(&self, ky: usize, kx: usize) -> (usize, usize, usize, usize) {
        let y0 = self.pad.saturating_sub(ky);
        let y1 = self.oh.min((self.h + self.pad).saturating_sub(ky));
        let x0 = self.pad.saturating_sub(kx);
        let x1 = self.ow.min((self.w + self.pad).saturating_sub(kx));
        (y0, y1, x0, x1)
    }
}

/// Unfolds one sample into a `[c·k·k, oh·ow]` patch matrix.
fn im2col<T: Real>(g: &ConvGeom, xn: &[T]) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut col = vec![T::zero(); g.c * g.k * g.k * plane];
    for ci in 0..g.c {
        let src = &xn[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let (y0, y1, x0, x1) = g.window(ky, kx);
                if x0 >= x1 {
                    continue;
                }
                let (ix0, span) = (x0 + kx - g.pad, x1 - x0);
                for y in y0..y1 {
                    let iy = y + ky - g.pad;
                    let at = r * plane + y * g.ow + x0;
                    col[at..at + span].copy_from_slice(&src[iy * g.w + ix0..iy * g.w + ix0 + span]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto the input.
fn col2im<T: Real>(g: &ConvGeom, col: &[T], gx: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        let dst = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let (y0, y1, x0, x1) = g.window(ky, kx);
                if x0 >= x1 {
                    continue;
                }
                let (ix0, span) = (x0 + kx - g.pad, x1 - x0);
                for y in y0..y1 {
                    let iy = y + ky - g.pad;
                    let at = r * plane + y * g.ow + x0;
                    let row = &mut dst[iy * g.w + ix0..iy * g.w + ix0 + span];
                    for (d, &v) in row.iter_mut().zip(&col[at..at + span]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    /// A 1×1 unpadded kernel reads the input as its own patch matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (in_len, plane) = (g.c * g.h * g.w, g.oh * g.ow);
    let rows = g.c * g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.o * plane];
    par::for_each_chunk(&mut out, g.o * plane, |ni, out_n| {
        let xn = &x[ni * in_len..(ni + 1) * in_len];
        let unfolded;
        let col = if g.is_pointwise() {
            xn
        } else {
            unfolded = im2col(g, xn);
            &unfolded[..]
        };
        for oc in 0..g.o {
            let dst = &mut out_n[oc * plane..(oc + 1) * plane];
            dst.fill(bias.map_or(T::zero(), |b| b[oc]));
            for (r, &wv) in wt[oc * rows..(oc + 1) * rows].iter().enumerate() {
                for (o, &v) in dst.iter_mut().zip(&col[r * plane..(r + 1) * plane]) {
                    *o += wv * v;
                }
            }
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub b: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    wt: &[T],
    grad: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let (in_len, plane) = (g.c * g.h * g.w, g.oh * g.ow);
    let rows = g.c * g.k * g.k;
    let w_len = g.o * rows;
    let per_sample = par::map(g.n, |ni| {
        let xn = &x[ni * in_len..(ni + 1) * in_len];
        let gn = &grad[ni * g.o * plane..(ni + 1) * g.o * plane];
        let mut gw = Vec::new();
        if need_w {
            let unfolded;
            let col = if g.is_pointwise() {
                xn
            } else {
                unfolded = im2col(g, xn);
                &unfolded[..]
            };
            gw = vec![T::zero(); w_len];
            for oc in 0..g.o {
                let gplane = &gn[oc * plane..(oc + 1) * plane];
                for (r, d) in gw[oc * rows..(oc + 1) * rows].iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (&gv, &v) in gplane.iter().zip(&col[r * plane..(r + 1) * plane]) {
                        acc += gv * v;
                    }
                    *d = acc;
                }
            }
        }
        let mut gx = Vec::new();
        if need_x {
            let mut gcol = vec![T::zero(); rows * plane];
            for oc in 0..g.o {
                let gplane = &gn[oc * plane..(oc + 1) * plane];
                for (r, &wv) in wt[oc * rows..(oc + 1) * rows].iter().enumerate() {
                    for (d, &gv) in gcol[r * plane..(r + 1) * plane].iter_mut().zip(gplane) {
                        *d += wv * gv;
                    }
                }
            }
            if g.is_pointwise() {
                gx = gcol;
            } else {
                gx = vec![T::zero(); in_len];
                col2im(g, &gcol, &mut gx);
            }
        }
        (gx, gw)
    });

    let gx = need_x.then(|| {
        let mut gx = Vec::with_capacity(g.n * in_len);
        for (s, _) in &per_sample {
            gx.extend_from_slice(s);
        }
        gx
    });
    let gw = need_w.then(|| {
        let mut gw = vec![T::zero(); w_len];
        for (_, s) in &per_sample {
            for (d, &v) in gw.iter_mut().zip(s) {
                *d += v;
            }
        }
        gw
    });
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); g.o];
        for ni in 0..g.n {
            for (oc, b) in gb.iter_mut().enumerate() {
                let off = (ni * g.o + oc) * plane;
                *b += grad[off..off + plane].iter().copied().sum::<T>();
            }
        }
        gb
    });
    ConvGrads { x: gx, w: gw, b: gb }
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2_forward<T: Real>(x: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, |p, dst| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let (r0, r1) = (2 * y * w + 2 * xx, (2 * y + 1) * w + 2 * xx);
                dst[y * ow + xx] = (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]) * quarter;
            }
        }
    });
    out
}

pub fn avg_pool2_backward<T: Real>(grad: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut gx = vec![T::zero(); n * c * h * w];
    par::for_each_chunk(&mut gx, h * w, |p, dst| {
        let src = &grad[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let v = src[y * ow + xx] * quarter;
                let (r0, r1) = (2 * y * w + 2 * xx, (2 * y + 1) * w + 2 * xx);
                dst[r0] = v;
                dst[r0 + 1] = v;
                dst[r1] = v;
                dst[r1 + 1] = v;
            }
        }
    });
    gx
}

/// `x[n, i] · w[o, i]ᵀ + b[o]`.
pub fn linear_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, n: usize, i: usize, o: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * o];
    par::for_each_chunk(&mut out, o, |r, dst| {
        let xr = &x[r * i..(r + 1) * i];
        for (j, d) in dst.iter_mut().enumerate() {
            let wr = &w[j * i..(j + 1) * i];
            let mut acc = b.map_or(T::zero(), |b| b[j]);
            for (&a, &bw) in xr.iter().zip(wr) {
                acc += a * bw;
            }
            *d = acc;
        }
    });
    out
}

/// Batched `a[b, m, k] · c[b, k, n]`.
pub fn bmm_forward<T: Real>(a: &[T], c: &[T], batch: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    par::for_each_chunk(&mut out, m * n, |bi, dst| {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let cb = &c[bi * k * n..(bi + 1) * k * n];
        for r in 0..m {
            let orow = &mut dst[r * n..(r + 1) * n];
            for kk in 0..k {
                let av = ab[r * k + kk];
                for (o, &cv) in orow.iter_mut().zip(&cb[kk * n..(kk + 1) * n]) {
                    *o += av * cv;
                }
            }
        }
    });
    out
}

/// Swaps the last two axes of a `[batch, rows, cols]` buffer.
pub fn transpose_last2<T: Real>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * rows * cols];
    for b in 0..batch {
        let (src, dst) = (&x[b * rows * cols..], &mut out[b * rows * cols..(b + 1) * rows * cols]);
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// Numerically stable softmax over contiguous rows of length `cols`.
pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    par::for_each_chunk(&mut out, cols, |_, row| {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    });
    out
}

pub fn softmax_rows_backward<T: Real>(y: &[T], grad: &[T], cols: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    par::for_each_chunk(&mut gx, cols, |r, dst| {
        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &grad[r * cols..(r + 1) * cols]);
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    });
    gx
}

/// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
pub fn cross_entropy_forward<T: Real>(logits: &[T], labels: &[usize], k: usize) -> T {
    let mut total = T::zero();
    for (row, &y) in logits.chunks(k).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - row[y];
    }
    total / T::lit(labels.len() as f64)
}

pub fn cross_entropy_backward<T: Real>(logits: &[T], labels: &[usize], k: usize, upstream: T) -> Vec<T> {
    let mut g = softmax_rows(logits, k);
    let scale = upstream / T::lit(labels.len() as f64);
    for (row, &y) in g.chunks_mut(k).zip(labels) {
        row[y] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_naive() {
        let (n, c, h, w, o, k, pad) = (2, 2, 4, 3, 3, 3, 1);
        let x: Vec<f64> = (0..n * c * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let wt: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 5) % 13) as f64 * 0.1).collect();
        let b = vec![0.5, -1.0, 2.0];
        let g = ConvGeom::new(&[n, c, h, w], &[o, c, k, k], pad).unwrap();
        let out = conv2d_forward(&g, &x, &wt, Some(&b));
        for ni in 0..n {
            for oc in 0..o {
                for y in 0..g.oh {
                    for xx in 0..g.ow {
                        let mut acc = b[oc];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as i64 + ky as i64 - pad as i64;
                                    let ix = xx as i64 + kx as i64 - pad as i64;
                                    if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                        continue;
                                    }
                                    acc += wt[((oc * c + ci) * k + ky) * k + kx]
                                        * x[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        let got = out[((ni * o + oc) * g.oh + y) * g.ow + xx];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = vec![0.0f64; 10];
        assert!((cross_entropy_forward(&uniform, &[3], 10) - 10f64.ln()).abs() < 1e-12);
        let two = [1.0f64, 2.0];
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((cross_entropy_forward(&two, &[1], 2) - expected).abs() < 1e-12);
        assert!((expected - 0.313262).abs() < 1e-6);
    }
}
