//! Forward and backward numeric kernels over flat NCHW buffers.
//!
//! Each function works on raw slices; shape validation happens in the graph
//! layer. Per-sample work is spread over rayon, but every cross-sample
//! reduction is summed in sample order so results do not depend on the
//! thread count.

use rayon::prelude::*;

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output extent for one spatial axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let d = &mut dst[iy as usize * g.w + ix as usize];
                        *d = *d + src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * g.out_plane();
    let mut out = vec![T::zero(); g.n * out_sample];
    out.par_chunks_mut(out_sample)
        .zip(x.par_chunks(in_sample))
        .for_each(|(y, xs)| {
            let col_owned;
            let col: &[T] = if g.is_pointwise() {
                xs
            } else {
                let mut buf = vec![T::zero(); g.patch() * g.out_plane()];
                im2col(xs, g, &mut buf);
                col_owned = buf;
                &col_owned
            };
            let (m, k, n) = (g.c_out, g.patch(), g.out_plane());
            T::gemm(
                m,
                k,
                n,
                T::one(),
                kernel,
                (k as isize, 1),
                col,
                (n as isize, 1),
                T::zero(),
                y,
                (n as isize, 1),
            );
        });
    out
}

/// Returns (d input, d kernel). Either may be skipped.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * g.out_plane();
    let (m, k, n) = (g.c_out, g.patch(), g.out_plane());

    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = x
        .par_chunks(in_sample)
        .zip(dy.par_chunks(out_sample))
        .map(|(xs, dys)| {
            let dk = want_dk.then(|| {
                let col_owned;
                let col: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    let mut buf = vec![T::zero(); k * n];
                    im2col(xs, g, &mut buf);
                    col_owned = buf;
                    &col_owned
                };
                // dK = dY · colᵀ  (m×n · n×k)
                let mut dk = vec![T::zero(); m * k];
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    dys,
                    (n as isize, 1),
                    col,
                    (1, n as isize),
                    T::zero(),
                    &mut dk,
                    (k as isize, 1),
                );
                dk
            });
            let dx = want_dx.then(|| {
                // dcol = Kᵀ · dY  (k×m · m×n)
                let mut dcol = vec![T::zero(); k * n];
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    kernel,
                    (1, k as isize),
                    dys,
                    (n as isize, 1),
                    T::zero(),
                    &mut dcol,
                    (n as isize, 1),
                );
                if g.is_pointwise() {
                    dcol
                } else {
                    let mut dx = vec![T::zero(); in_sample];
                    col2im(&dcol, g, &mut dx);
                    dx
                }
            });
            (dx, dk)
        })
        .collect();

    let dx = want_dx.then(|| {
        let mut dx = Vec::with_capacity(g.n * in_sample);
        for (d, _) in &per_sample {
            dx.extend_from_slice(d.as_ref().expect("requested"));
        }
        dx
    });
    let dk = want_dk.then(|| {
        let mut acc = vec![T::zero(); m * k];
        for (_, d) in &per_sample {
            for (a, &v) in acc.iter_mut().zip(d.as_ref().expect("requested")) {
                *a = *a + v;
            }
        }
        acc
    });
    (dx, dk)
}

/// Source coordinate and blend weights for one output index of a
/// half-pixel (align-corners-false) bilinear resample.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resample of `planes` independent H×W planes.
pub fn bilinear_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::of(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::of(b.frac);
                let top = src[a.lo * w + b.lo] * (T::one() - fx) + src[a.lo * w + b.hi] * fx;
                let bot = src[a.hi * w + b.lo] * (T::one() - fx) + src[a.hi * w + b.hi] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Real>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::of(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::of(b.frac);
                let g = src[oy * ow + ox];
                let one = T::one();
                let mut add = |idx: usize, wgt: T| dst[idx] = dst[idx] + g * wgt;
                add(a.lo * w + b.lo, (one - fy) * (one - fx));
                add(a.lo * w + b.hi, (one - fy) * fx);
                add(a.hi * w + b.lo, fy * (one - fx));
                add(a.hi * w + b.hi, fy * fx);
            }
        }
    }
    dx
}

/// Row-major strides of `shape` with zero stride on axes that are broadcast
/// to `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for axis in (0..shape.len()).rev() {
        strides[axis] = if shape[axis] == 1 && out[axis] != 1 { 0 } else { acc };
        acc *= shape[axis];
    }
    strides
}

/// Broadcast shape of two same-rank shapes, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each flat output index, the flat source index in a broadcast operand.
pub fn broadcast_index_map(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out.len()];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for axis in (0..out.len()).rev() {
            idx[axis] += 1;
            src += strides[axis];
            if idx[axis] < out[axis] {
                break;
            }
            src -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    map
}

/// Sums a full-size gradient back onto a broadcast operand.
pub fn reduce_to<T: Real>(dy: &[T], map: &[usize], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (&g, &i) in dy.iter().zip(map) {
        out[i] = out[i] + g;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Windowed pooling without padding. Returns output and, for max mode, the
/// flat input index that won each output cell.
pub fn pool2d_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    window: usize,
    stride: usize,
    mode: PoolMode,
) -> (Vec<T>, Vec<usize>) {
    let oh = conv_out_len(h, window, stride, 0);
    let ow = conv_out_len(w, window, stride, 0);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::new();
    let area = T::of((window * window) as f64);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                let mut sum = T::zero();
                for ky in 0..window {
                    for kx in 0..window {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        sum = sum + x[i];
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                match mode {
                    PoolMode::Max => {
                        out.push(x[best]);
                        arg.push(best);
                    }
                    PoolMode::Avg => out.push(sum / area),
                }
            }
        }
    }
    (out, arg)
}

#[allow(clippy::too_many_arguments)]
pub fn pool2d_backward<T: Real>(
    dy: &[T],
    argmax: &[usize],
    planes: usize,
    (h, w): (usize, usize),
    window: usize,
    stride: usize,
    mode: PoolMode,
) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    match mode {
        PoolMode::Max => {
            for (&g, &i) in dy.iter().zip(argmax) {
                dx[i] = dx[i] + g;
            }
        }
        PoolMode::Avg => {
            let oh = conv_out_len(h, window, stride, 0);
            let ow = conv_out_len(w, window, stride, 0);
            let area = T::of((window * window) as f64);
            for p in 0..planes {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dy[(p * oh + oy) * ow + ox] / area;
                        for ky in 0..window {
                            for kx in 0..window {
                                let i = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
                                dx[i] = dx[i] + g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Reduces the channel axis of N×C×(plane) to N×1×(plane).
pub fn channel_pool_forward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    mode: PoolMode,
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(n * plane);
    let mut arg = Vec::new();
    let count = T::of(c as f64);
    for s in 0..n {
        let base = s * c * plane;
        for p in 0..plane {
            let mut best = base + p;
            let mut sum = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + p;
                sum = sum + x[i];
                if x[i] > x[best] {
                    best = i;
                }
            }
            match mode {
                PoolMode::Max => {
                    out.push(x[best]);
                    arg.push(best);
                }
                PoolMode::Avg => out.push(sum / count),
            }
        }
    }
    (out, arg)
}

pub fn channel_pool_backward<T: Real>(
    dy: &[T],
    argmax: &[usize],
    n: usize,
    c: usize,
    plane: usize,
    mode: PoolMode,
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * c * plane];
    match mode {
        PoolMode::Max => {
            for (&g, &i) in dy.iter().zip(argmax) {
                dx[i] = dx[i] + g;
            }
        }
        PoolMode::Avg => {
            let count = T::of(c as f64);
            for s in 0..n {
                for p in 0..plane {
                    let g = dy[s * plane + p] / count;
                    for ch in 0..c {
                        dx[(s * c + ch) * plane + p] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel batch statistics over the N, H, W axes: (mean, biased variance).
pub fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s = s + x[off..off + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            v = v + x[off..off + plane].iter().map(|&t| (t - m) * (t - m)).sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}
