//! Raw array kernels shared by the tape and the free functions.

use super::Scalar;
use crate::error::{shape_err, Result};

/// Geometry of a batched 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `floor((n + 2·pad − k) / stride) + 1`, or `None` when the window does not fit.
pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || n + 2 * pad < k {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return shape_err(format!("conv2d expects x[B,C,H,W] and w[O,C,k,k], got {x:?} and {w:?}"));
        }
        if x[1] != w[1] {
            return shape_err(format!("conv2d input has {} channels, weights expect {}", x[1], w[1]));
        }
        if w[2] != w[3] {
            return shape_err(format!("conv2d kernel must be square, got {}x{}", w[2], w[3]));
        }
        let k = w[2];
        let (Some(out_h), Some(out_w)) = (out_extent(x[2], k, stride, pad), out_extent(x[3], k, stride, pad)) else {
            return shape_err(format!(
                "conv2d window k={k} stride={stride} pad={pad} does not fit {}x{}",
                x[2], x[3]
            ));
        };
        Ok(ConvGeom {
            batch: x[0],
            in_c: x[1],
            h: x[2],
            w: x[3],
            out_c: w[0],
            k,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_c, self.out_h, self.out_w]
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let n = g.col_cols();
    for c in 0..g.in_c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let n = g.col_cols();
    for c in 0..g.in_c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.out_w {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] = plane[base + ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. When `keep_cols` is set the unfolded input of every
/// image is returned for reuse by the backward pass.
pub fn conv2d<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T], keep_cols: bool) -> (Vec<T>, Option<Vec<T>>) {
    let (rows, n) = (g.col_rows(), g.col_cols());
    let in_img = g.in_c * g.h * g.w;
    let out_img = g.out_c * n;
    let mut out = vec![T::zero(); g.batch * out_img];
    let keep = keep_cols && !g.pointwise();
    let mut saved = if keep { vec![T::zero(); g.batch * rows * n] } else { Vec::new() };
    let mut scratch = if g.pointwise() || keep { Vec::new() } else { vec![T::zero(); rows * n] };

    for b in 0..g.batch {
        let img = &x[b * in_img..(b + 1) * in_img];
        let cols: &[T] = if g.pointwise() {
            img
        } else if keep {
            let dst = &mut saved[b * rows * n..(b + 1) * rows * n];
            im2col(g, img, dst);
            dst
        } else {
            im2col(g, img, &mut scratch);
            &scratch
        };
        let o = &mut out[b * out_img..(b + 1) * out_img];
        for (oc, line) in o.chunks_mut(n).enumerate() {
            line.fill(bias[oc]);
        }
        T::gemm(
            g.out_c,
            rows,
            n,
            T::one(),
            w,
            rows as isize,
            1,
            cols,
            n as isize,
            1,
            T::one(),
            o,
            n as isize,
            1,
        );
    }
    (out, keep.then_some(saved))
}

/// Gradients of a convolution: returns `(dx, dw, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    cols: Option<&[T]>,
    w: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (rows, n) = (g.col_rows(), g.col_cols());
    let in_img = g.in_c * g.h * g.w;
    let out_img = g.out_c * n;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.out_c];
    let mut scratch = vec![T::zero(); if g.pointwise() && cols.is_none() { 0 } else { rows * n }];
    let mut dcols = vec![T::zero(); if g.pointwise() { 0 } else { rows * n }];

    for b in 0..g.batch {
        let img = &x[b * in_img..(b + 1) * in_img];
        let d = &dout[b * out_img..(b + 1) * out_img];
        for (oc, line) in d.chunks(n).enumerate() {
            db[oc] = line.iter().fold(db[oc], |acc, &v| acc + v);
        }
        let col: &[T] = if g.pointwise() {
            img
        } else if let Some(c) = cols {
            &c[b * rows * n..(b + 1) * rows * n]
        } else {
            im2col(g, img, &mut scratch);
            &scratch
        };
        // dw += dout · colsᵀ
        T::gemm(
            g.out_c,
            n,
            rows,
            T::one(),
            d,
            n as isize,
            1,
            col,
            1,
            n as isize,
            T::one(),
            &mut dw,
            rows as isize,
            1,
        );
        // dcols = wᵀ · dout
        let dximg = &mut dx[b * in_img..(b + 1) * in_img];
        if g.pointwise() {
            T::gemm(
                rows,
                g.out_c,
                n,
                T::one(),
                w,
                1,
                rows as isize,
                d,
                n as isize,
                1,
                T::zero(),
                dximg,
                n as isize,
                1,
            );
        } else {
            T::gemm(
                rows,
                g.out_c,
                n,
                T::one(),
                w,
                1,
                rows as isize,
                d,
                n as isize,
                1,
                T::zero(),
                &mut dcols,
                n as isize,
                1,
            );
            col2im(g, &dcols, dximg);
        }
    }
    (dx, dw, db)
}

/// Geometry of a batched max pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(x: &[usize], k: usize, stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 {
            return shape_err(format!("maxpool2d expects x[B,C,H,W], got {x:?}"));
        }
        if k == 0 || pad >= k {
            return shape_err(format!("maxpool2d kernel {k} with padding {pad} is degenerate"));
        }
        let (Some(out_h), Some(out_w)) = (out_extent(x[2], k, stride, pad), out_extent(x[3], k, stride, pad)) else {
            return shape_err(format!("maxpool2d window does not fit {}x{}", x[2], x[3]));
        };
        Ok(PoolGeom {
            planes: x[0] * x[1],
            h: x[2],
            w: x[3],
            k,
            stride,
            pad,
            out_h,
            out_w,
        })
    }
}

/// Max pooling; returns the pooled values and the flat source index of each.
pub fn maxpool2d<T: Scalar>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let per_out = g.out_h * g.out_w;
    let mut out = Vec::with_capacity(g.planes * per_out);
    let mut arg = Vec::with_capacity(g.planes * per_out);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let i = base + iy as usize * g.w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Softmax over `count` entries of `buf` starting at `start` with `stride`,
/// restricted to positions where `valid` is true (others are set to zero).
/// Uses max-subtraction for stability.
pub fn softmax_masked<T: Scalar>(buf: &mut [T], start: usize, stride: usize, count: usize, valid: impl Fn(usize) -> bool) {
    let mut max = T::neg_infinity();
    for i in 0..count {
        if valid(i) {
            max = max.max(buf[start + i * stride]);
        }
    }
    if max == T::neg_infinity() {
        for i in 0..count {
            buf[start + i * stride] = T::zero();
        }
        return;
    }
    let mut sum = T::zero();
    for i in 0..count {
        let slot = &mut buf[start + i * stride];
        *slot = if valid(i) { (*slot - max).exp() } else { T::zero() };
        sum = sum + *slot;
    }
    for i in 0..count {
        let slot = &mut buf[start + i * stride];
        *slot = *slot / sum;
    }
}

/// Unmasked softmax along a strided line.
pub fn softmax_line<T: Scalar>(buf: &mut [T], start: usize, stride: usize, count: usize) {
    softmax_masked(buf, start, stride, count, |_| true)
}
