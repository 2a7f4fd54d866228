//! Forward constructors and their reverse-mode rules.

use super::kernels::{self, Window};
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn shaped<S: Scalar>(shape: &[usize], data: Vec<S>) -> Tensor<S> {
    Tensor::new(shape.to_vec(), data).expect("kernel output matches shape")
}

impl<S: Scalar> Graph<S> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, node: Op<S>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.needs(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// `1 - x`, for convex blend weights.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.scale(x, -S::one());
        self.add_scalar(n, S::one())
    }

    /// Multiplies `x` by a single-element variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::invalid("scale_by", format!("scale must have one element, got {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let value = self.value(x).map(|v| v * sv);
        let rg = self.needs(&[x, s]);
        Ok(self.push(value, Op::ScaleBy(x, s), rg))
    }

    /// `[.., k] · [k×n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(shaped(&shape, data), Op::MatMul(a, b), rg))
    }

    /// Adds `b: [n]` along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(b) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(&bias) {
                *v = *v + bb;
            }
        }
        let rg = self.needs(&[x, b]);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
        }
        let eps = S::lit(eps);
        let cs = S::lit(c as f64);
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.numel() / c);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<S>() / cs;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cs;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let value = shaped(xv.shape(), out);
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(S::zero()));
        let rg = self.needs(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        let rg = self.needs(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        let rg = self.needs(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = self.value(x).data().to_vec();
        let mut row = vec![S::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, r) in row.iter_mut().enumerate() {
                    *r = data[base + j * inner];
                }
                kernels::softmax_in_place(&mut row);
                for (j, &r) in row.iter().enumerate() {
                    data[base + j * inner] = r;
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(shaped(&shape, data), Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Cross-correlation of `x: [c_in×h×w]` with `w: [c_out×c_in×k×k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (co, k) = (sw[0], sw[2]);
        let (oh, ow) = match (kernels::conv_out(sx[1], k, stride, pad), kernels::conv_out(sx[2], k, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    format!("non-integral output extent for input {sx:?}, kernel {k}, stride {stride}, pad {pad}"),
                ))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = Window { channels: sx[0], h: sx[1], w: sx[2], k, stride, pad, oh, ow };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = kernels::matmul(self.value(w).data(), &cols, co, geom.rows(), geom.cols());
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), oh * ow);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        Ok(self.push(shaped(&[co, oh, ow], out), Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Transposed convolution, `w: [c_in×c_out×k×k]`, no padding.
    /// Output extent is `(h-1)·stride + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != sw[3] {
            return Err(Error::shape("conv_transpose2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv_transpose2d stride must be >= 1".into()));
        }
        let (ci, co, k) = (sw[0], sw[1], sw[2]);
        let (h, wd) = (sx[1], sx[2]);
        let geom = Window {
            channels: co,
            h: (h - 1) * stride + k,
            w: (wd - 1) * stride + k,
            k,
            stride,
            pad: 0,
            oh: h,
            ow: wd,
        };
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv_transpose2d bias", &sw, self.shape(b)));
            }
        }
        let cols = kernels::matmul_tn(self.value(w).data(), self.value(x).data(), ci, geom.rows(), h * wd);
        let mut out = kernels::col2im(&cols, &geom);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), geom.h * geom.w);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        Ok(self.push(shaped(&[co, geom.h, geom.w], out), Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// Upsampling deconvolution with kernel size equal to the factor, so the
    /// output extent is exactly `factor` times the input.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, up: usize) -> Result<Var> {
        if up != 2 && up != 4 {
            return Err(Error::InvalidArgument(format!("deconv2d supports factors 2 and 4, got {up}")));
        }
        let sw = self.shape(w);
        if sw.len() != 4 || sw[2] != up || sw[3] != up {
            return Err(Error::invalid("deconv2d", format!("kernel {sw:?} must be {up}x{up}")));
        }
        self.conv_transpose2d(x, w, b, up)
    }

    /// `[c×h×w] -> [c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("global_avg_pool", format!("expected [c,h,w], got {s:?}")));
        }
        let hw = s[1] * s[2];
        let n = S::lit(hw as f64);
        let data = self.value(x).data().chunks(hw).map(|ch| ch.iter().copied().sum::<S>() / n).collect();
        let rg = self.needs(&[x]);
        Ok(self.push(shaped(&[s[0]], data), Op::GlobalAvgPool(x), rg))
    }

    /// Multiplies each channel of `x: [c×h×w]` by `g[c]`.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(g) != [s[0]] {
            return Err(Error::shape("scale_channels", &s, self.shape(g)));
        }
        let hw = s[1] * s[2];
        let gv = self.value(g).data().to_vec();
        let mut value = self.value(x).clone();
        for (ch, &gc) in value.data_mut().chunks_mut(hw).zip(&gv) {
            for v in ch {
                *v = *v * gc;
            }
        }
        let rg = self.needs(&[x, g]);
        Ok(self.push(value, Op::ScaleChannels(x, g), rg))
    }

    /// Bilinear (half-pixel) upsampling of `[c×h×w]` by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::invalid("upsample_bilinear", format!("input {s:?}, factor {factor}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let ty = kernels::bilinear_taps(h, factor);
        let tx = kernels::bilinear_taps(w, factor);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); c * oh * ow];
        for ch in 0..c {
            let src = &xv[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = S::lit(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = S::lit(fx);
                    let top = src[y0 * w + x0] * (S::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (S::one() - fx) + src[y1 * w + x1] * fx;
                    out[(ch * oh + oy) * ow + ox] = top * (S::one() - fy) + bot * fy;
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(shaped(&[c, oh, ow], out), Op::Upsample(x, factor), rg))
    }

    /// `[a×b] -> [b×a]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected rank 2, got {s:?}")));
        }
        let data = transpose_data(self.value(x).data(), s[0], s[1]);
        let rg = self.needs(&[x]);
        Ok(self.push(shaped(&[s[1], s[0]], data), Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Global multi-head self-attention over packed `qkv: [n×3c]`, returning `[n×c]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 2 || !s[1].is_multiple_of(3) || heads == 0 || !(s[1] / 3).is_multiple_of(heads) {
            return Err(Error::invalid("attention", format!("qkv {s:?} with {heads} heads")));
        }
        let (n, c) = (s[0], s[1] / 3);
        let (out, probs) = kernels::attention(self.value(qkv).data(), n, c, heads);
        let rg = self.needs(&[qkv]);
        Ok(self.push(shaped(&[n, c], out), Op::Attention { qkv, heads, probs }, rg))
    }

    /// Attention weights saved by an [`Graph::attention`] node, `heads×n×n`.
    pub fn attention_weights(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean per-pixel softmax cross-entropy of `logits: [K×H×W]` against `labels[H·W]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 3 || s[1] * s[2] != labels.len() {
            return Err(Error::invalid("cross_entropy", format!("logits {s:?} vs {} labels", labels.len())));
        }
        let (k, hw) = (s[0], s[1] * s[2]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![S::zero(); k * hw];
        let mut row = vec![S::zero(); k];
        let mut total = S::zero();
        for (p, &label) in labels.iter().enumerate() {
            for (c, r) in row.iter_mut().enumerate() {
                *r = lv[c * hw + p];
            }
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total = total + lse - row[label];
            for (c, &r) in row.iter().enumerate() {
                probs[c * hw + p] = (r - lse).exp();
            }
        }
        let loss = total / S::lit(hw as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = S::lit(self.value(x).numel() as f64);
        let v = self.value(x).sum() / n;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    pub(super) fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|&d| d * *c).collect()),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::ScaleBy(x, s) => {
                let sv = val(*s)[0];
                self.accumulate(grads, *x, g.iter().map(|&d| d * sv).collect());
                let ds = g.iter().zip(val(*x)).fold(S::zero(), |acc, (&d, &v)| acc + d * v);
                self.accumulate(grads, *s, vec![ds]);
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n;
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, kernels::matmul_nt(g, val(*b), m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                let n = self.shape(*b)[0];
                let mut db = vec![S::zero(); n];
                for row in g.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                self.accumulate(grads, *b, db);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.shape(*gamma)[0];
                let gm = val(*gamma);
                let cs = S::lit(c as f64);
                let mut dx = Vec::with_capacity(g.len());
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for ((grow, hrow), &r) in g.chunks(c).zip(xhat.chunks(c)).zip(rstd) {
                    let mut mean_dh = S::zero();
                    let mut mean_dh_h = S::zero();
                    for j in 0..c {
                        let dh = grow[j] * gm[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hrow[j];
                        dgamma[j] = dgamma[j] + grow[j] * hrow[j];
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                    mean_dh = mean_dh / cs;
                    mean_dh_h = mean_dh_h / cs;
                    for j in 0..c {
                        let dh = grow[j] * gm[j];
                        dx.push(r * (dh - mean_dh - hrow[j] * mean_dh_h));
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu(x) => {
                let d = g.iter().zip(val(*x)).map(|(&d, &v)| if v > S::zero() { d } else { S::zero() }).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = g.iter().zip(val(*x)).map(|(&d, &v)| d * kernels::gelu_grad(v)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(&d, &s)| d * s * (S::one() - s)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![S::zero(); g.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let dot = (0..*len).fold(S::zero(), |acc, j| acc + g[base + j * inner] * y[base + j * inner]);
                        for j in 0..*len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let co = self.shape(*w)[0];
                let l = geom.cols();
                if let Some(b) = b {
                    self.accumulate(grads, *b, channel_sums(g, l));
                }
                if self.requires_grad(*w) {
                    let cols = kernels::im2col(val(*x), geom);
                    self.accumulate(grads, *w, kernels::matmul_nt(g, &cols, co, l, geom.rows()));
                }
                if self.requires_grad(*x) {
                    let dcols = kernels::matmul_tn(val(*w), g, co, geom.rows(), l);
                    self.accumulate(grads, *x, kernels::col2im(&dcols, geom));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let ci = self.shape(*w)[0];
                let l = geom.cols();
                if let Some(b) = b {
                    self.accumulate(grads, *b, channel_sums(g, geom.h * geom.w));
                }
                let dcols = kernels::im2col(g, geom);
                if self.requires_grad(*w) {
                    self.accumulate(grads, *w, kernels::matmul_nt(val(*x), &dcols, ci, l, geom.rows()));
                }
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, kernels::matmul(val(*w), &dcols, ci, geom.rows(), l));
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                let n = S::lit(hw as f64);
                let d = g.iter().flat_map(|&d| std::iter::repeat_n(d / n, hw)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::ScaleChannels(x, s) => {
                let sx = self.shape(*x);
                let hw = sx[1] * sx[2];
                let sv = val(*s);
                if self.requires_grad(*x) {
                    let d = g.chunks(hw).zip(sv).flat_map(|(ch, &sc)| ch.iter().map(move |&d| d * sc)).collect();
                    self.accumulate(grads, *x, d);
                }
                let ds = g
                    .chunks(hw)
                    .zip(val(*x).chunks(hw))
                    .map(|(gc, xc)| gc.iter().zip(xc).fold(S::zero(), |a, (&d, &v)| a + d * v))
                    .collect();
                self.accumulate(grads, *s, ds);
            }
            Op::Upsample(x, factor) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h * factor, w * factor);
                let ty = kernels::bilinear_taps(h, *factor);
                let tx = kernels::bilinear_taps(w, *factor);
                let mut dx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let fy = S::lit(fy);
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let fx = S::lit(fx);
                            let d = g[(ch * oh + oy) * ow + ox];
                            let top = d * (S::one() - fy);
                            let bot = d * fy;
                            dst[y0 * w + x0] = dst[y0 * w + x0] + top * (S::one() - fx);
                            dst[y0 * w + x1] = dst[y0 * w + x1] + top * fx;
                            dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (S::one() - fx);
                            dst[y1 * w + x1] = dst[y1 * w + x1] + bot * fx;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, transpose_data(g, s[1], s[0]));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Attention { qkv, heads, probs } => {
                let s = self.shape(*qkv);
                let (n, c) = (s[0], s[1] / 3);
                self.accumulate(grads, *qkv, attention_backward(val(*qkv), probs, g, n, c, *heads));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let hw = labels.len();
                let scale = g[0] / S::lit(hw as f64);
                let mut d: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (p, &l) in labels.iter().enumerate() {
                    d[l * hw + p] = d[l * hw + p] - scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / S::lit(n as f64); n]);
            }
        }
    }
}

fn add_channel_bias<S: Scalar>(out: &mut [S], bias: &[S], plane: usize) {
    for (ch, &b) in out.chunks_mut(plane).zip(bias) {
        for v in ch {
            *v = *v + b;
        }
    }
}

fn channel_sums<S: Scalar>(g: &[S], plane: usize) -> Vec<S> {
    g.chunks(plane).map(|ch| ch.iter().copied().sum()).collect()
}

fn transpose_data<S: Scalar>(data: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn attention_backward<S: Scalar>(qkv: &[S], probs: &[S], g: &[S], n: usize, c: usize, heads: usize) -> Vec<S> {
    let dh = c / heads;
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let stride = 3 * c;
    let mut d = vec![S::zero(); qkv.len()];
    let mut dp = vec![S::zero(); n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, c + h * dh, 2 * c + h * dh);
        let p = &probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let go = &g[i * c + h * dh..i * c + (h + 1) * dh];
            let prow = &p[i * n..(i + 1) * n];
            for j in 0..n {
                let v = &qkv[j * stride + vo..j * stride + vo + dh];
                dp[j] = go.iter().zip(v).fold(S::zero(), |a, (&x, &y)| a + x * y);
                // dV_j += P_ij · dO_i
                for t in 0..dh {
                    d[j * stride + vo + t] = d[j * stride + vo + t] + prow[j] * go[t];
                }
            }
            let dot = prow.iter().zip(&dp).fold(S::zero(), |a, (&x, &y)| a + x * y);
            for j in 0..n {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == S::zero() {
                    continue;
                }
                for t in 0..dh {
                    let q = qkv[i * stride + qo + t];
                    let k = qkv[j * stride + ko + t];
                    d[i * stride + qo + t] = d[i * stride + qo + t] + ds * k;
                    d[j * stride + ko + t] = d[j * stride + ko + t] + ds * q;
                }
            }
        }
    }
    d
}
