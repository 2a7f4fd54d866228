//! Bottleneck adapters for the frozen encoder.
//!
//! A standard adapter computes `x_a = ReLU(LN(x)·W_d)·W_u` (plus optional
//! biases) and joins the block residual as `MLP(LN(x)) + s·x_a + x`.
//! The multimodal adapter keeps one bottleneck per modality and blends them
//! across branches with learned weights `λ1, λ2 ∈ [0, 1]`:
//!
//! ```text
//! x_o = MLP(LN(x)) + λ1·x_a + (1-λ1)·y_a + x
//! y_o = MLP(LN(y)) + λ2·y_a + (1-λ2)·x_a + y
//! ```
//!
//! `LN` and `MLP` are the block's own frozen weights, shared by both branches.

use crate::autograd::{Graph, Var};
use crate::config::{AdapterMode, Modality};
use crate::encoder::{SamEncoder, VitBlock};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, Scope};
use crate::param::{Component, Init, ParamId, ParamSink, ParamSpec, ParamStore};
use crate::scalar::Scalar;

const DOWN_STD: f64 = 0.02;
pub const SCALE_INIT: f64 = 0.5;
pub const LAMBDA_INIT: f64 = 0.5;

/// Down projection, ReLU, up projection.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub down: Linear,
    pub up: Linear,
}

impl Bottleneck {
    pub fn new<P: ParamSink>(sink: &mut P, scope: &Scope, dim: usize, hidden: usize, bias: bool) -> Result<Self> {
        Ok(Self {
            down: Linear::new(sink, &scope.child("down"), (dim, hidden), bias, Init::TruncNormal(DOWN_STD))?,
            up: Linear::new(sink, &scope.child("up"), (hidden, dim), bias, Init::Const(0.0))?,
        })
    }

    /// `ReLU(x·W_d + b_d)·W_u + b_u` on an already-normalized input.
    pub fn project<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.down.forward(g, store, x)?;
        let h = g.relu(h);
        self.up.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct Adapter {
    pub bottleneck: Bottleneck,
    /// Scalar `s` weighting the adapted feature.
    pub scale: ParamId,
}

impl Adapter {
    pub fn new<P: ParamSink>(sink: &mut P, scope: &Scope, dim: usize, hidden: usize, bias: bool) -> Result<Self> {
        Ok(Self {
            bottleneck: Bottleneck::new(sink, scope, dim, hidden, bias)?,
            scale: scope.param(sink, "scale", &[1], Init::Const(SCALE_INIT))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MmAdapter {
    pub x: Bottleneck,
    pub y: Bottleneck,
    pub lambda1: ParamId,
    pub lambda2: ParamId,
}

impl MmAdapter {
    pub fn new<P: ParamSink>(sink: &mut P, scope: &Scope, dim: usize, hidden: usize, bias: bool) -> Result<Self> {
        let lambda = |sink: &mut P, name: &str| {
            sink.declare(ParamSpec {
                name: format!("{}.{name}", scope.prefix),
                shape: vec![1],
                init: Init::Const(LAMBDA_INIT),
                trainable: true,
                component: scope.component,
                bounds: Some((0.0, 1.0)),
            })
        };
        Ok(Self {
            x: Bottleneck::new(sink, &scope.child("x"), dim, hidden, bias)?,
            y: Bottleneck::new(sink, &scope.child("y"), dim, hidden, bias)?,
            lambda1: lambda(sink, "lambda1")?,
            lambda2: lambda(sink, "lambda2")?,
        })
    }
}

/// `x_a = ReLU(LN(x_i)·W_d)·W_u`, with `ln` the block's MLP-stage norm.
pub fn adapter_forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x_i: Var,
    ln: &LayerNorm,
    p: &Adapter,
) -> Result<Var> {
    let n = ln.forward(g, store, x_i)?;
    p.bottleneck.project(g, store, n)
}

/// `x_o = MLP(LN(x_i)) + s·x_a + x_i`.
pub fn block_residual_std<S: Scalar>(g: &mut Graph<S>, x_i: Var, mlp_out: Var, x_a: Var, s: Var) -> Result<Var> {
    let sx = g.scale_by(x_a, s)?;
    let t = g.add(mlp_out, sx)?;
    g.add(t, x_i)
}

/// Cross-modal MLP stage of one block; returns `(x_o, y_o)`.
pub fn mmadapter_forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    block: &VitBlock,
    x_i: Var,
    y_i: Var,
    p: &MmAdapter,
) -> Result<(Var, Var)> {
    if g.shape(x_i) != g.shape(y_i) {
        return Err(Error::shape("mmadapter_forward", g.shape(x_i), g.shape(y_i)));
    }
    let nx = block.norm2.forward(g, store, x_i)?;
    let ny = block.norm2.forward(g, store, y_i)?;
    let x_a = p.x.project(g, store, nx)?;
    let y_a = p.y.project(g, store, ny)?;
    let mx = block.mlp(g, store, nx)?;
    let my = block.mlp(g, store, ny)?;
    let l1 = g.param(store, p.lambda1);
    let l2 = g.param(store, p.lambda2);
    let x_o = blend(g, mx, x_a, y_a, l1, x_i)?;
    let y_o = blend(g, my, y_a, x_a, l2, y_i)?;
    Ok((x_o, y_o))
}

/// `m + λ·own + (1-λ)·other + skip`.
fn blend<S: Scalar>(g: &mut Graph<S>, m: Var, own: Var, other: Var, lambda: Var, skip: Var) -> Result<Var> {
    let a = g.scale_by(own, lambda)?;
    let inv = g.one_minus(lambda);
    let b = g.scale_by(other, inv)?;
    let t = g.add(m, a)?;
    let t = g.add(t, b)?;
    g.add(t, skip)
}

/// Fills every block's adapter slots according to `mode`.
///
/// * `None`: nothing is added; the encoder stays fully frozen.
/// * `Standard`: per branch, one adapter after attention and one at the MLP stage.
/// * `MmAdapter`: per branch, one adapter after attention; one shared
///   multimodal adapter at the MLP stage.
pub fn install_adapters<P: ParamSink>(
    encoder: &mut SamEncoder,
    sink: &mut P,
    bottleneck: usize,
    bias: bool,
    mode: AdapterMode,
    modality: Modality,
) -> Result<()> {
    if encoder.adapter_mode.is_some() || encoder.blocks.iter().any(|b| !b.slots.is_empty()) {
        return Err(Error::InvalidArgument("adapters already installed".into()));
    }
    if mode == AdapterMode::MmAdapter && modality != Modality::Both {
        return Err(Error::Config("mmadapter needs both modalities".into()));
    }
    let c = encoder.cfg.embed_dim;
    if bottleneck == 0 || bottleneck >= c {
        return Err(Error::Config(format!("bottleneck {bottleneck} must be in [1, {c})")));
    }
    let branches = ["x", "y"];
    for (i, blk) in encoder.blocks.iter_mut().enumerate() {
        let scope = Scope::new(format!("encoder.blocks.{i}"), Component::Adapter, true);
        match mode {
            AdapterMode::None => {}
            AdapterMode::Standard => {
                for (b, name) in branches.iter().enumerate().take(modality.branches()) {
                    blk.slots.attn[b] =
                        Some(Adapter::new(sink, &scope.child(format!("adapter_attn.{name}")), c, bottleneck, bias)?);
                    blk.slots.mlp[b] =
                        Some(Adapter::new(sink, &scope.child(format!("adapter_mlp.{name}")), c, bottleneck, bias)?);
                }
            }
            AdapterMode::MmAdapter => {
                for (b, name) in branches.iter().enumerate() {
                    blk.slots.attn[b] =
                        Some(Adapter::new(sink, &scope.child(format!("adapter_attn.{name}")), c, bottleneck, bias)?);
                }
                blk.slots.mm = Some(MmAdapter::new(sink, &scope.child("mmadapter"), c, bottleneck, bias)?);
            }
        }
    }
    encoder.adapter_mode = Some(mode);
    Ok(())
}
