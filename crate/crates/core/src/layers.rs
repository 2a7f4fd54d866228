//! Parameterized building blocks shared by the encoder, fusion and decoder.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::param::{Component, Init, ParamId, ParamSink, ParamStore};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-6;

/// Registration context: name prefix, owning component and trainability.
#[derive(Clone, Debug)]
pub struct Scope {
    pub prefix: String,
    pub component: Component,
    pub trainable: bool,
}

impl Scope {
    pub fn new(prefix: impl Into<String>, component: Component, trainable: bool) -> Self {
        Self { prefix: prefix.into(), component, trainable }
    }

    pub fn child(&self, name: impl std::fmt::Display) -> Self {
        Self { prefix: format!("{}.{name}", self.prefix), ..self.clone() }
    }

    pub fn param<P: ParamSink>(&self, sink: &mut P, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        sink.param(format!("{}.{name}", self.prefix), shape.to_vec(), init, self.component, self.trainable)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<P: ParamSink>(sink: &mut P, scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param(sink, "weight", &[dim], Init::Const(1.0))?,
            beta: scope.param(sink, "bias", &[dim], Init::Const(0.0))?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// `x · W + b` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<P: ParamSink>(
        sink: &mut P,
        scope: &Scope,
        dims: (usize, usize),
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: scope.param(sink, "weight", &[dims.0, dims.1], init)?,
            bias: if bias { Some(scope.param(sink, "bias", &[dims.1], Init::Const(0.0))?) } else { None },
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Convolution weights `[out×in×k×k]` plus bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

/// Fan-in scaled normal for freshly added convolutional layers.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl Conv {
    pub fn new<P: ParamSink>(
        sink: &mut P,
        scope: &Scope,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: scope.param(sink, "weight", &[cout, cin, k, k], Init::TruncNormal(he_std(cin * k * k)))?,
            bias: scope.param(sink, "bias", &[cout], Init::Const(0.0))?,
            stride,
            pad,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Transposed convolution `[in×out×f×f]` upsampling by `f`.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub factor: usize,
}

impl Deconv {
    pub fn new<P: ParamSink>(sink: &mut P, scope: &Scope, (cin, cout): (usize, usize), factor: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param(sink, "weight", &[cin, cout, factor, factor], Init::TruncNormal(he_std(cin)))?,
            bias: scope.param(sink, "bias", &[cout], Init::Const(0.0))?,
            factor,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.deconv2d(x, w, Some(b), self.factor)
    }
}

/// Layer norm across the channel axis of a `[c×h×w]` map.
pub fn channel_norm<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, ln: &LayerNorm, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    let t = g.transpose(flat)?;
    let n = ln.forward(g, store, t)?;
    let back = g.transpose(n)?;
    g.reshape(back, &s)
}

/// `[h×w×c]` tokens to a `[c×h×w]` map.
pub fn tokens_to_map<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let t = g.transpose(flat)?;
    g.reshape(t, &[s[2], s[0], s[1]])
}
