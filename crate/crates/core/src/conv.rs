//! 2-D convolution kernels (forward and backward) built on im2col + GEMM.
//!
//! Images are `[C,H,W]` or batched `[N,C,H,W]`. Filters are `[C_out,C_in,k,k]`
//! for [`conv2d`] and `[C_in,C_out,k,k]` for [`conv_transpose2d`]. Taps that
//! fall outside the image read zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on every side; requires odd `k`.
    Same,
    Valid,
}

impl Padding {
    pub fn amount(self, k: usize) -> Result<usize> {
        match self {
            Padding::Valid => Ok(0),
            Padding::Same if k % 2 == 1 => Ok((k - 1) / 2),
            Padding::Same => Err(Error::invalid(format!("SAME padding needs an odd kernel, got {k}"))),
        }
    }
}

pub fn conv_output_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Sliding-window geometry: an image of `c x h x w` visited by a `k x k`
/// window at `stride`, producing an `oh x ow` grid of window positions.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate of each (kernel offset, output position) pair along
    /// one axis, or `usize::MAX` where the tap falls in the padding.
    fn taps(&self, out: usize, size: usize) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.k * out);
        for kk in 0..self.k {
            for o in 0..out {
                let pos = (o * self.stride + kk) as isize - self.pad as isize;
                t.push(if pos >= 0 && (pos as usize) < size { pos as usize } else { usize::MAX });
            }
        }
        t
    }
}

pub(crate) fn im2col<S: Scalar>(img: &[S], g: &Geom, cols: &mut [S]) {
    let ncols = g.cols();
    let ys = g.taps(g.oh, g.h);
    let xs = g.taps(g.ow, g.w);
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let xrow = &xs[kj * g.ow..(kj + 1) * g.ow];
                for (oy, d) in dst.chunks_exact_mut(g.ow).enumerate() {
                    let y = ys[ki * g.oh + oy];
                    if y == usize::MAX {
                        d.fill(S::zero());
                        continue;
                    }
                    let src = &plane[y * g.w..(y + 1) * g.w];
                    for (v, &x) in d.iter_mut().zip(xrow) {
                        *v = if x == usize::MAX { S::zero() } else { src[x] };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im<S: Scalar>(cols: &[S], g: &Geom, img: &mut [S]) {
    let ncols = g.cols();
    let ys = g.taps(g.oh, g.h);
    let xs = g.taps(g.ow, g.w);
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let xrow = &xs[kj * g.ow..(kj + 1) * g.ow];
                for (oy, s) in src.chunks_exact(g.ow).enumerate() {
                    let y = ys[ki * g.oh + oy];
                    if y == usize::MAX {
                        continue;
                    }
                    let dst = &mut plane[y * g.w..(y + 1) * g.w];
                    for (&v, &x) in s.iter().zip(xrow) {
                        if x != usize::MAX {
                            dst[x] = dst[x] + v;
                        }
                    }
                }
            }
        }
    }
}

/// View `[C,H,W]` as `[1,C,H,W]`; returns the batched shape.
fn batched(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match *shape {
        [c, h, w] => Ok([1, c, h, w]),
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, format!("expected [C,H,W] or [N,C,H,W], got {shape:?}"))),
    }
}

fn square_filter(shape: &[usize], op: &'static str) -> Result<[usize; 3]> {
    match *shape {
        [a, b, k, k2] if k == k2 => Ok([a, b, k]),
        _ => Err(Error::shape(op, format!("expected square filters [A,B,k,k], got {shape:?}"))),
    }
}

fn unbatch<S: Scalar>(out: Tensor<S>, input_rank: usize) -> Tensor<S> {
    if input_rank == 3 {
        let shape = out.shape()[1..].to_vec();
        out.reshape(&shape).expect("dropping unit batch dim")
    } else {
        out
    }
}

/// Resolved shapes of a convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn conv(input: &[usize], filters: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = batched(input, "conv2d")?;
        let [cout, fcin, k] = square_filter(filters, "conv2d")?;
        if fcin != cin {
            return Err(Error::shape("conv2d", format!("filters expect {fcin} input channels, input has {cin}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let (oh, ow) = match (conv_output_dim(h, k, stride, pad), conv_output_dim(w, k, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::shape("conv2d", format!("kernel {k} larger than padded input {h}x{w}"))),
        };
        Ok(Self { n, cin, cout, h, w, k, stride, pad, oh, ow })
    }

    /// Dims for a transposed convolution; `h, w` are the input (small) grid and
    /// `oh, ow` the upsampled output.
    pub fn transposed(input: &[usize], filters: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = batched(input, "conv_transpose2d")?;
        let [fcin, cout, k] = square_filter(filters, "conv_transpose2d")?;
        if fcin != cin {
            return Err(Error::shape("conv_transpose2d", format!("filters expect {fcin} input channels, input has {cin}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv_transpose2d stride must be >= 1"));
        }
        let up = |s: usize| ((s - 1) * stride + k).checked_sub(2 * pad);
        let (oh, ow) = match (up(h), up(w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => return Err(Error::shape("conv_transpose2d", "padding exceeds output size")),
        };
        Ok(Self { n, cin, cout, h, w, k, stride, pad, oh, ow })
    }

    /// Window geometry of the forward convolution over the input image.
    fn conv_geom(&self) -> Geom {
        Geom { c: self.cin, h: self.h, w: self.w, k: self.k, stride: self.stride, pad: self.pad, oh: self.oh, ow: self.ow }
    }

    /// Window geometry of a transposed convolution: windows slide over the
    /// (large) output image and land on the (small) input grid.
    fn transposed_geom(&self) -> Geom {
        Geom { c: self.cout, h: self.oh, w: self.ow, k: self.k, stride: self.stride, pad: self.pad, oh: self.h, ow: self.w }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(x: &[S], filt: &[S], d: &ConvDims) -> Vec<S> {
    let g = d.conv_geom();
    let (rows, ncols) = (g.rows(), g.cols());
    let mut cols = vec![S::zero(); rows * ncols];
    let mut out = vec![S::zero(); d.n * d.cout * ncols];
    let in_sz = d.cin * d.h * d.w;
    for n in 0..d.n {
        im2col(&x[n * in_sz..(n + 1) * in_sz], &g, &mut cols);
        let dst = &mut out[n * d.cout * ncols..(n + 1) * d.cout * ncols];
        S::gemm(d.cout, rows, ncols, S::one(), filt, (rows as isize, 1), &cols, (ncols as isize, 1), S::zero(), dst, (ncols as isize, 1));
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. its input and filters.
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &[S],
    filt: &[S],
    gout: &[S],
    d: &ConvDims,
    need_input: bool,
    need_filter: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let g = d.conv_geom();
    let (rows, ncols) = (g.rows(), g.cols());
    let in_sz = d.cin * d.h * d.w;
    let mut cols = vec![S::zero(); rows * ncols];
    let mut gx = need_input.then(|| vec![S::zero(); x.len()]);
    let mut gw = need_filter.then(|| vec![S::zero(); filt.len()]);
    for n in 0..d.n {
        let go = &gout[n * d.cout * ncols..(n + 1) * d.cout * ncols];
        if let Some(gw) = gw.as_mut() {
            im2col(&x[n * in_sz..(n + 1) * in_sz], &g, &mut cols);
            S::gemm(d.cout, ncols, rows, S::one(), go, (ncols as isize, 1), &cols, (1, ncols as isize), S::one(), gw, (rows as isize, 1));
        }
        if let Some(gx) = gx.as_mut() {
            S::gemm(
                rows,
                d.cout,
                ncols,
                S::one(),
                filt,
                (1, rows as isize),
                go,
                (ncols as isize, 1),
                S::zero(),
                &mut cols,
                (ncols as isize, 1),
            );
            col2im(&cols, &g, &mut gx[n * in_sz..(n + 1) * in_sz]);
        }
    }
    (gx, gw)
}

pub(crate) fn conv_transpose2d_forward<S: Scalar>(x: &[S], filt: &[S], d: &ConvDims) -> Vec<S> {
    let g = d.transposed_geom();
    let (rows, ncols) = (g.rows(), g.cols());
    let in_sz = d.cin * d.h * d.w;
    let out_sz = d.cout * d.oh * d.ow;
    let mut cols = vec![S::zero(); rows * ncols];
    let mut out = vec![S::zero(); d.n * out_sz];
    for n in 0..d.n {
        let xs = &x[n * in_sz..(n + 1) * in_sz];
        S::gemm(rows, d.cin, ncols, S::one(), filt, (1, rows as isize), xs, (ncols as isize, 1), S::zero(), &mut cols, (ncols as isize, 1));
        col2im(&cols, &g, &mut out[n * out_sz..(n + 1) * out_sz]);
    }
    out
}

pub(crate) fn conv_transpose2d_backward<S: Scalar>(
    x: &[S],
    filt: &[S],
    gout: &[S],
    d: &ConvDims,
    need_input: bool,
    need_filter: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let g = d.transposed_geom();
    let (rows, ncols) = (g.rows(), g.cols());
    let in_sz = d.cin * d.h * d.w;
    let out_sz = d.cout * d.oh * d.ow;
    let mut cols = vec![S::zero(); rows * ncols];
    let mut gx = need_input.then(|| vec![S::zero(); x.len()]);
    let mut gw = need_filter.then(|| vec![S::zero(); filt.len()]);
    for n in 0..d.n {
        im2col(&gout[n * out_sz..(n + 1) * out_sz], &g, &mut cols);
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[n * in_sz..(n + 1) * in_sz];
            S::gemm(
                d.cin,
                rows,
                ncols,
                S::one(),
                filt,
                (rows as isize, 1),
                &cols,
                (ncols as isize, 1),
                S::zero(),
                dst,
                (ncols as isize, 1),
            );
        }
        if let Some(gw) = gw.as_mut() {
            let xs = &x[n * in_sz..(n + 1) * in_sz];
            S::gemm(d.cin, ncols, rows, S::one(), xs, (ncols as isize, 1), &cols, (1, ncols as isize), S::one(), gw, (rows as isize, 1));
        }
    }
    (gx, gw)
}

/// Valid output range along one axis for a tap at offset `d` (in
/// `-p..=p`): positions `i` with `0 <= i + d < size`.
fn tap_range(d: isize, size: usize) -> std::ops::Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (size as isize - d.max(0)).max(0) as usize;
    lo.min(hi)..hi
}

/// Per-channel stride-1 SAME convolution: channel `c` of the output is channel
/// `c` of the input filtered by `kernels[c]` (shape `[C,m,m]`).
pub(crate) fn depthwise_forward<S: Scalar>(x: &[S], kern: &[S], n: usize, c: usize, h: usize, w: usize, m: usize) -> Vec<S> {
    let p = (m / 2) as isize;
    let mut out = vec![S::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            let src = &x[base..base + h * w];
            let dst = &mut out[base..base + h * w];
            for a in 0..m {
                let dy = a as isize - p;
                for bb in 0..m {
                    let k = kern[(ch * m + a) * m + bb];
                    if k == S::zero() {
                        continue;
                    }
                    let dx = bb as isize - p;
                    let cols = tap_range(dx, w);
                    if cols.is_empty() {
                        continue;
                    }
                    for i in tap_range(dy, h) {
                        let y = (i as isize + dy) as usize;
                        let xs = (cols.start as isize + dx) as usize;
                        let len = cols.len();
                        let row_in = &src[y * w + xs..y * w + xs + len];
                        let row_out = &mut dst[i * w + cols.start..i * w + cols.start + len];
                        for (o, &v) in row_out.iter_mut().zip(row_in) {
                            *o = *o + k * v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward<S: Scalar>(
    x: &[S],
    kern: &[S],
    gout: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    m: usize,
) -> (Vec<S>, Vec<S>) {
    let p = (m / 2) as isize;
    let mut gx = vec![S::zero(); x.len()];
    let mut gk = vec![S::zero(); kern.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            let src = &x[base..base + h * w];
            let g = &gout[base..base + h * w];
            for a in 0..m {
                let dy = a as isize - p;
                for bb in 0..m {
                    let ki = (ch * m + a) * m + bb;
                    let k = kern[ki];
                    let dx = bb as isize - p;
                    let cols = tap_range(dx, w);
                    if cols.is_empty() {
                        continue;
                    }
                    let len = cols.len();
                    let mut acc = S::zero();
                    for i in tap_range(dy, h) {
                        let y = (i as isize + dy) as usize;
                        let xs = y * w + (cols.start as isize + dx) as usize;
                        let grow = &g[i * w + cols.start..i * w + cols.start + len];
                        for (&gv, &v) in grow.iter().zip(&src[xs..xs + len]) {
                            acc = acc + gv * v;
                        }
                        if k != S::zero() {
                            let gxr = &mut gx[base + xs..base + xs + len];
                            for (o, &gv) in gxr.iter_mut().zip(grow) {
                                *o = *o + k * gv;
                            }
                        }
                    }
                    gk[ki] = gk[ki] + acc;
                }
            }
        }
    }
    (gx, gk)
}

/// 2-D cross-correlation of `input` (`[C_in,H,W]` or `[N,C_in,H,W]`) with
/// `filters` (`[C_out,C_in,k,k]`).
pub fn conv2d<S: Scalar>(input: &Tensor<S>, filters: &Tensor<S>, stride: usize, padding: Padding) -> Result<Tensor<S>> {
    let k = filters.shape().get(2).copied().unwrap_or(0);
    let pad = padding.amount(k)?;
    let d = ConvDims::conv(input.shape(), filters.shape(), stride, pad)?;
    let out = conv2d_forward(input.data(), filters.data(), &d);
    let t = Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out)?;
    Ok(unbatch(t, input.ndim()))
}

/// Transposed convolution (the adjoint of [`conv2d`] with the same stride and
/// padding); `filters` are `[C_in,C_out,k,k]`.
pub fn conv_transpose2d<S: Scalar>(input: &Tensor<S>, filters: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    let d = ConvDims::transposed(input.shape(), filters.shape(), stride, pad)?;
    let out = conv_transpose2d_forward(input.data(), filters.data(), &d);
    let t = Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out)?;
    Ok(unbatch(t, input.ndim()))
}
