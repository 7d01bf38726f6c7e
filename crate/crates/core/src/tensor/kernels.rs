//! Raw slice kernels behind the graph operations.
//!
//! All kernels write each output element from exactly one task with a fixed
//! accumulation order, so a sample's result never depends on its batch
//! neighbours or on the thread count.

use crate::error::{Error, Result};
use crate::par;

use super::Scalar;

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Row-major `[rows×cols]` transpose.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    const BLK: usize = 32;
    for r0 in (0..rows).step_by(BLK) {
        for c0 in (0..cols).step_by(BLK) {
            for r in r0..(r0 + BLK).min(rows) {
                for c in c0..(c0 + BLK).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
    out
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let rows_per_task = (m / (4 * par::threads().max(1))).clamp(4, 64) & !3;
    let rows_per_task = rows_per_task.max(4);
    par::for_each_chunk(out, rows_per_task * n, m * k * n, |task, chunk| {
        let r_start = task * rows_per_task;
        let rows = chunk.len() / n;
        let mut r = 0;
        while r + 4 <= rows {
            let (o0, rest) = chunk[r * n..(r + 4) * n].split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            let base = (r_start + r) * k;
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let a0 = a[base + p];
                let a1 = a[base + k + p];
                let a2 = a[base + 2 * k + p];
                let a3 = a[base + 3 * k + p];
                for ((((x0, x1), x2), x3), &bv) in o0
                    .iter_mut()
                    .zip(o1.iter_mut())
                    .zip(o2.iter_mut())
                    .zip(o3.iter_mut())
                    .zip(brow)
                {
                    *x0 += a0 * bv;
                    *x1 += a1 * bv;
                    *x2 += a2 * bv;
                    *x3 += a3 * bv;
                }
            }
            r += 4;
        }
        while r < rows {
            let orow = &mut chunk[r * n..(r + 1) * n];
            let base = (r_start + r) * k;
            for p in 0..k {
                axpy(a[base + p], &b[p * n..(p + 1) * n], orow);
            }
            r += 1;
        }
    });
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `a[m×k]ᵀ · b[m×n]`, giving `[k×n]`.
pub fn matmul_at<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let at = transpose(a, m, k);
    matmul(&at, b, k, m, n)
}

/// Geometry of a grouped 2-D cross-correlation over NCHW tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects 4-d input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::shape("conv2d stride and groups must be positive"));
        }
        let (batch, in_ch, h, w) = (input[0], input[1], input[2], input[3]);
        let (out_ch, cpg, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(Error::shape(format!(
                "grouping error: {in_ch} input and {out_ch} output channels not divisible by {groups} groups"
            )));
        }
        if cpg != in_ch / groups {
            return Err(Error::shape(format!(
                "kernel {kernel:?} expects {cpg} channels per group, input {input:?} with {groups} groups has {}",
                in_ch / groups
            )));
        }
        let dim = |n: usize, k: usize| -> Result<usize> {
            let span = n + 2 * pad;
            if span < k || (span - k) % stride != 0 {
                return Err(Error::shape(format!(
                    "non-integral conv output: size {n}, kernel {k}, stride {stride}, padding {pad}"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        Ok(ConvGeom {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            groups,
            out_h: dim(h, kh)?,
            out_w: dim(w, kw)?,
        })
    }

    fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }

    /// Output positions `lo..hi` along one axis whose input tap `k` is in bounds.
    #[inline]
    fn valid(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        let hi = if n_in + self.pad > k { ((n_in - 1 + self.pad - k) / s + 1).min(n_out) } else { 0 };
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let in_plane = g.h * g.w;
    let cpg = g.in_per_group();
    let opg = g.out_per_group();
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    let work = out.len() * cpg * g.kh * g.kw;
    par::for_each_chunk(&mut out, plane, work, |idx, dst| {
        let (b, o) = (idx / g.out_ch, idx % g.out_ch);
        let grp = o / opg;
        if let Some(bias) = bias {
            dst.fill(bias[o]);
        }
        for ci in 0..cpg {
            let c = grp * cpg + ci;
            let src = &input[(b * g.in_ch + c) * in_plane..][..in_plane];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid(ky, g.h, g.out_h);
                for kx in 0..g.kw {
                    let wv = kernel[((o * cpg + ci) * g.kh + ky) * g.kw + kx];
                    let (ox_lo, ox_hi) = g.valid(kx, g.w, g.out_w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let irow = &src[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let off = ox_lo + kx - g.pad;
                            axpy(wv, &irow[off..off + ox_hi - ox_lo], &mut orow[ox_lo..ox_hi]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_grad_input<T: Scalar>(g: &ConvGeom, grad_out: &[T], kernel: &[T]) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let in_plane = g.h * g.w;
    let cpg = g.in_per_group();
    let opg = g.out_per_group();
    let mut gin = vec![T::zero(); g.batch * g.in_ch * in_plane];
    let work = grad_out.len() * cpg * g.kh * g.kw;
    par::for_each_chunk(&mut gin, in_plane, work, |idx, dst| {
        let (b, c) = (idx / g.in_ch, idx % g.in_ch);
        let (grp, ci) = (c / cpg, c % cpg);
        for oo in 0..opg {
            let o = grp * opg + oo;
            let src = &grad_out[(b * g.out_ch + o) * plane..][..plane];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid(ky, g.h, g.out_h);
                for kx in 0..g.kw {
                    let wv = kernel[((o * cpg + ci) * g.kh + ky) * g.kw + kx];
                    let (ox_lo, ox_hi) = g.valid(kx, g.w, g.out_w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                        let irow = &mut dst[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let off = ox_lo + kx - g.pad;
                            axpy(wv, &grow[ox_lo..ox_hi], &mut irow[off..off + ox_hi - ox_lo]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                irow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

pub fn conv2d_grad_kernel<T: Scalar>(g: &ConvGeom, grad_out: &[T], input: &[T]) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let in_plane = g.h * g.w;
    let cpg = g.in_per_group();
    let opg = g.out_per_group();
    let per_o = cpg * g.kh * g.kw;
    let mut gk = vec![T::zero(); g.out_ch * per_o];
    let work = grad_out.len() * per_o;
    par::for_each_chunk(&mut gk, per_o, work, |o, dst| {
        let grp = o / opg;
        for ci in 0..cpg {
            let c = grp * cpg + ci;
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid(ky, g.h, g.out_h);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = g.valid(kx, g.w, g.out_w);
                    let mut acc = T::zero();
                    if ox_lo < ox_hi {
                        for b in 0..g.batch {
                            let gsrc = &grad_out[(b * g.out_ch + o) * plane..][..plane];
                            let isrc = &input[(b * g.in_ch + c) * in_plane..][..in_plane];
                            for oy in oy_lo..oy_hi {
                                let iy = oy * g.stride + ky - g.pad;
                                let grow = &gsrc[oy * g.out_w..(oy + 1) * g.out_w];
                                let irow = &isrc[iy * g.w..(iy + 1) * g.w];
                                if g.stride == 1 {
                                    let off = ox_lo + kx - g.pad;
                                    acc += dot(&grow[ox_lo..ox_hi], &irow[off..off + ox_hi - ox_lo]);
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        acc += grow[ox] * irow[ox * g.stride + kx - g.pad];
                                    }
                                }
                            }
                        }
                    }
                    dst[(ci * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    gk
}

pub fn conv2d_grad_bias<T: Scalar>(g: &ConvGeom, grad_out: &[T]) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let mut gb = vec![T::zero(); g.out_ch];
    for b in 0..g.batch {
        for (o, acc) in gb.iter_mut().enumerate() {
            *acc += grad_out[(b * g.out_ch + o) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    gb
}

/// Normalises each length-`d` row; returns `(output, mean, rstd)`.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    d: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut mean = vec![T::zero(); rows];
    let mut rstd = vec![T::zero(); rows];
    let dn = T::from_f64(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mu = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
        let denom = (var + eps).sqrt();
        let rs = if denom > T::zero() { denom.recip() } else { T::zero() };
        mean[r] = mu;
        rstd[r] = rs;
        for (((o, &v), &gm), &bt) in out[r * d..(r + 1) * d].iter_mut().zip(row).zip(gamma).zip(beta) {
            *o = (v - mu) * rs * gm + bt;
        }
    }
    (out, mean, rstd)
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    grad: &[T],
    d: usize,
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); d];
    let mut gb = vec![T::zero(); d];
    let dn = T::from_f64(d as f64);
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let grow = &grad[r * d..(r + 1) * d];
        let (mu, rs) = (mean[r], rstd[r]);
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..d {
            xhat[j] = (row[j] - mu) * rs;
            dxhat[j] = grow[j] * gamma[j];
            gg[j] += grow[j] * xhat[j];
            gb[j] += grow[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xhat[j];
        }
        let (m1, m2) = (s1 / dn, s2 / dn);
        for (j, o) in gx[r * d..(r + 1) * d].iter_mut().enumerate() {
            *o = rs * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (gx, gg, gb)
}

/// `(outer, axis_len, inner)` view of `shape` around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let mut mx = T::neg_infinity();
            for l in 0..len {
                mx = mx.max(x[idx(l)]);
            }
            let mut sum = T::zero();
            for l in 0..len {
                let e = (x[idx(l)] - mx).exp();
                out[idx(l)] = e;
                sum += e;
            }
            let inv = sum.recip();
            for l in 0..len {
                out[idx(l)] *= inv;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(y: &[T], grad: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let mut s = T::zero();
            for l in 0..len {
                s += grad[idx(l)] * y[idx(l)];
            }
            for l in 0..len {
                gx[idx(l)] = y[idx(l)] * (grad[idx(l)] - s);
            }
        }
    }
    gx
}

/// Moves axis `perm[i]` of the input to position `i` of the output.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if nd == 0 {
        return x.to_vec();
    }
    let last = nd - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut coord = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|i| x[base + i * inner_stride]));
        }
        // advance the outer coordinates
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            coord[ax] += 1;
            base += strides[ax];
            if coord[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            coord[ax] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
