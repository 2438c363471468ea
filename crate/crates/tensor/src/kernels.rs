//! Raw-slice kernels shared by the graph ops.

use crate::real::Real;
use crate::tensor::{numel, strides};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if stride == 0 || ph < kh || pw < kw {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `lo..hi` whose stride-1 tap `j` lands inside a row of
/// `width` pixels.
fn valid_range(j: usize, pad: usize, width: usize, out_w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j).min(out_w);
    let hi = (width + pad).saturating_sub(j).min(out_w).max(lo);
    (lo, hi)
}

/// Unfolds one image `[C, H, W]` into `[C*kh*kw, out_h*out_w]`.
pub fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(j, g.pad, g.width, g.out_w);
                        line[..lo].iter_mut().for_each(|v| *v = T::zero());
                        line[hi..].iter_mut().for_each(|v| *v = T::zero());
                        if lo < hi {
                            line[lo..hi].copy_from_slice(&src[lo + j - g.pad..hi + j - g.pad]);
                        }
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if x < 0 || x >= g.width as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(j, g.pad, g.width, g.out_w);
                        let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                        for (d, &v) in dst[lo + j - g.pad..hi + j - g.pad]
                            .iter_mut()
                            .zip(&line[lo..hi])
                        {
                            *d = *d + v;
                        }
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] = dst[x as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed through the broadcast `out` shape
/// (zero along broadcast axes).
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let own = strides(shape);
    let mut s = vec![0; rank];
    for i in 0..shape.len() {
        let o = rank - shape.len() + i;
        s[o] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Maps every flat index of `out` to the flat index of an operand with the
/// given broadcast strides.
pub fn broadcast_index_map(out: &[usize], bstrides: &[usize]) -> Vec<usize> {
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    if out.is_empty() {
        map.push(0);
        return map;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let inner_stride = bstrides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let outer = total / inner.max(1);
    for _ in 0..outer {
        for j in 0..inner {
            map.push(base + j * inner_stride);
        }
        // advance odometer on axes [0, rank-1)
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += bstrides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            base -= bstrides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Visits every flat index of `out` in order together with the matching
/// flat indices of two operands given by their broadcast strides. Adjacent
/// axes are merged where both operands allow it, so the inner loop is long.
#[inline]
pub fn for_each2(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let mut dims: Vec<usize> = Vec::with_capacity(out.len());
    let mut ta: Vec<usize> = Vec::with_capacity(out.len());
    let mut tb: Vec<usize> = Vec::with_capacity(out.len());
    for i in 0..out.len() {
        if out[i] == 1 {
            continue;
        }
        if let Some(last) = dims.len().checked_sub(1) {
            if ta[last] == sa[i] * out[i] && tb[last] == sb[i] * out[i] {
                dims[last] *= out[i];
                ta[last] = sa[i];
                tb[last] = sb[i];
                continue;
            }
        }
        dims.push(out[i]);
        ta.push(sa[i]);
        tb.push(sb[i]);
    }
    if dims.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = dims.len();
    let (inner, ia_s, ib_s) = (dims[rank - 1], ta[rank - 1], tb[rank - 1]);
    let outer: usize = dims[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ba, mut bb, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        let (mut ia, mut ib) = (ba, bb);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_s;
            ib += ib_s;
        }
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            ba += ta[ax];
            bb += tb[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            ba -= ta[ax] * dims[ax];
            bb -= tb[ax] * dims[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down to an operand of shape `shape`.
pub fn reduce_to_shape<T: Real>(grad: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    if out == shape {
        return grad.to_vec();
    }
    let s = broadcast_strides(shape, out);
    let mut res = vec![T::zero(); numel(shape)];
    for_each2(out, &s, &s, |o, i, _| res[i] = res[i] + grad[o]);
    res
}

/// Gathers `data` into the broadcast shape `out`.
pub fn expand<T: Real>(data: &[T], shape: &[usize], out: &[usize]) -> Vec<T> {
    let s = broadcast_strides(shape, out);
    let mut res = Vec::with_capacity(numel(out));
    for_each2(out, &s, &s, |_, i, _| res.push(data[i]));
    res
}

/// General axis permutation: `out.shape[i] = shape[perm[i]]`.
pub fn permute<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = strides(shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut res = Vec::with_capacity(data.len());
    for_each2(&out_shape, &mapped, &mapped, |_, i, _| res.push(data[i]));
    res
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Diagonal linear recurrence over `[batch, len, d]`:
/// `x_t = a * x_{t-1} + b * g_t`, `x_{-1} = 0`. Returns every `x_t`.
pub fn scan_forward<T: Real>(a: &[T], b: &[T], g: &[T], batch: usize, len: usize) -> Vec<T> {
    let d = a.len();
    let mut out = vec![T::zero(); batch * len * d];
    for n in 0..batch {
        let mut state = vec![T::zero(); d];
        for t in 0..len {
            let off = (n * len + t) * d;
            for c in 0..d {
                state[c] = a[c] * state[c] + b[c] * g[off + c];
            }
            out[off..off + d].copy_from_slice(&state);
        }
    }
    out
}

/// Reverse sweep for [`scan_forward`]; returns `(da, db, dg)`.
pub fn scan_backward<T: Real>(
    a: &[T],
    b: &[T],
    g: &[T],
    states: &[T],
    grad_out: &[T],
    batch: usize,
    len: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = a.len();
    let mut da = vec![T::zero(); d];
    let mut db = vec![T::zero(); d];
    let mut dg = vec![T::zero(); g.len()];
    for n in 0..batch {
        let mut carry = vec![T::zero(); d];
        for t in (0..len).rev() {
            let off = (n * len + t) * d;
            for c in 0..d {
                let delta = grad_out[off + c] + carry[c];
                dg[off + c] = b[c] * delta;
                db[c] = db[c] + delta * g[off + c];
                if t > 0 {
                    da[c] = da[c] + delta * states[off - d + c];
                }
                carry[c] = a[c] * delta;
            }
        }
    }
    (da, db, dg)
}
