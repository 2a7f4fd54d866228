//! Raw slice kernels behind the graph operations. No shape validation here;
//! callers in `ops` check extents first.

use crate::scalar::Scalar;

/// `[m×k] · [k×n]`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` with `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], k: usize, m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == S::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` with `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).fold(S::zero(), |acc, (&x, &y)| acc + x * y);
        }
    }
    out
}

/// Output extent of a strided window sweep, `None` when not integral.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || !(padded - k).is_multiple_of(stride) {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Geometry of one 2-D window sweep.
#[derive(Clone, Copy, Debug)]
pub struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for kernel tap `(ky, kx)` at output `(oy, ox)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfolds `[c×h×w]` into `[c·k·k × oh·ow]`.
pub fn im2col<S: Scalar>(x: &[S], g: &Window) -> Vec<S> {
    let cols = g.cols();
    let mut out = vec![S::zero(); g.rows() * cols];
    for c in 0..g.channels {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let dst = &mut out[r * cols..(r + 1) * cols];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.ow + ox] = x[(c * g.h + y) * g.w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `[c×h×w]`.
pub fn col2im<S: Scalar>(cols_data: &[S], g: &Window) -> Vec<S> {
    let cols = g.cols();
    let mut out = vec![S::zero(); g.channels * g.h * g.w];
    for c in 0..g.channels {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let src = &cols_data[r * cols..(r + 1) * cols];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            let o = (c * g.h + y) * g.w + xx;
                            out[o] = out[o] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-output-coordinate taps of half-pixel bilinear resampling by an integer factor.
pub fn bilinear_taps(size: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..size * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(size - 1);
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Multi-head self-attention forward on packed `[n×3c]` projections.
/// Returns the `[n×c]` output and the `heads×n×n` row-stochastic weights.
pub fn attention<S: Scalar>(qkv: &[S], n: usize, c: usize, heads: usize) -> (Vec<S>, Vec<S>) {
    let dh = c / heads;
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let stride = 3 * c;
    let mut out = vec![S::zero(); n * c];
    let mut probs = vec![S::zero(); heads * n * n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, c + h * dh, 2 * c + h * dh);
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let q = &qkv[i * stride + qo..i * stride + qo + dh];
            let row = &mut p[i * n..(i + 1) * n];
            for j in 0..n {
                let k = &qkv[j * stride + ko..j * stride + ko + dh];
                row[j] = q.iter().zip(k).fold(S::zero(), |a, (&x, &y)| a + x * y) * scale;
            }
            softmax_in_place(row);
            for j in 0..n {
                let w = row[j];
                let v = &qkv[j * stride + vo..j * stride + vo + dh];
                let o = &mut out[i * c + h * dh..i * c + (h + 1) * dh];
                for (ov, &vv) in o.iter_mut().zip(v) {
                    *ov = *ov + w * vv;
                }
            }
        }
    }
    (out, probs)
}

pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    S::lit(0.5) * x * (S::one() + u.tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_A) * x * x);
    S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * du
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
