//! Deep fusion module: each modality's single-scale encoder feature is
//! expanded into four scales (1/4, 1/8, 1/16, 1/32 of the input) by its own
//! pyramid head, then the two pyramids are merged scale by scale with
//! squeeze-and-excitation gates.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{self, Conv, Deconv, LayerNorm, Scope};
use crate::param::{Component, ParamSink, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Deconvolution ×4, deconvolution ×2, 1×1 convolution, stride-2 convolution.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub up4: Deconv,
    pub norm4: LayerNorm,
    pub up2: Deconv,
    pub norm2: LayerNorm,
    pub same: Conv,
    pub down: Conv,
}

impl Pyramid {
    pub fn new<P: ParamSink>(sink: &mut P, scope: &Scope, c: usize, ch: [usize; 4]) -> Result<Self> {
        Ok(Self {
            up4: Deconv::new(sink, &scope.child("up4"), (c, ch[0]), 4)?,
            norm4: LayerNorm::new(sink, &scope.child("up4_norm"), ch[0])?,
            up2: Deconv::new(sink, &scope.child("up2"), (c, ch[1]), 2)?,
            norm2: LayerNorm::new(sink, &scope.child("up2_norm"), ch[1])?,
            same: Conv::new(sink, &scope.child("same"), (c, ch[2], 1), 1, 0)?,
            down: Conv::new(sink, &scope.child("down"), (c, ch[3], 2), 2, 0)?,
        })
    }

    /// `[h×w×c]` tokens to four `[C_i×h_i×w_i]` maps with `h_i = 4h, 2h, h, h/2`.
    pub fn expand<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, tokens: Var) -> Result<[Var; 4]> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("pyramid_expand", format!("expected [h,w,c], got {s:?}")));
        }
        if !s[0].is_multiple_of(2) || !s[1].is_multiple_of(2) {
            return Err(Error::invalid("pyramid_expand", format!("grid {}x{} must be even to downsample", s[0], s[1])));
        }
        let f = layers::tokens_to_map(g, tokens)?;
        let a = self.up4.forward(g, store, f)?;
        let a = layers::channel_norm(g, store, &self.norm4, a)?;
        let a = g.gelu(a);
        let b = self.up2.forward(g, store, f)?;
        let b = layers::channel_norm(g, store, &self.norm2, b)?;
        let b = g.gelu(b);
        let c = self.same.forward(g, store, f)?;
        let d = self.down.forward(g, store, f)?;
        Ok([a, b, c, d])
    }
}

/// Squeeze (1×1 conv, ReLU) and excite (1×1 conv, sigmoid) on pooled channels.
#[derive(Clone, Debug)]
pub struct SeGate {
    pub squeeze: Conv,
    pub excite: Conv,
}

impl SeGate {
    pub fn new<P: ParamSink>(sink: &mut P, scope: &Scope, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            squeeze: Conv::new(sink, &scope.child("squeeze"), (channels, hidden, 1), 1, 0)?,
            excite: Conv::new(sink, &scope.child("excite"), (hidden, channels, 1), 1, 0)?,
        })
    }

    /// Channel gate in `(0, 1)^C` for a `[C×h×w]` map.
    pub fn gate<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, f: Var) -> Result<Var> {
        let c = g.shape(f)[0];
        let p = g.global_avg_pool(f)?;
        let p = g.reshape(p, &[c, 1, 1])?;
        let z = self.squeeze.forward(g, store, p)?;
        let z = g.relu(z);
        let e = self.excite.forward(g, store, z)?;
        let e = g.sigmoid(e);
        g.reshape(e, &[c])
    }
}

#[derive(Clone, Debug)]
pub struct SeFusion {
    pub x: SeGate,
    pub y: Option<SeGate>,
}

pub struct Fused {
    pub fused: Var,
    pub gate_x: Var,
    pub gate_y: Option<Var>,
}

impl SeFusion {
    pub fn new<P: ParamSink>(
        sink: &mut P,
        scope: &Scope,
        channels: usize,
        reduction: usize,
        two: bool,
    ) -> Result<Self> {
        Ok(Self {
            x: SeGate::new(sink, &scope.child("x"), channels, reduction)?,
            y: if two { Some(SeGate::new(sink, &scope.child("y"), channels, reduction)?) } else { None },
        })
    }

    /// `g_x ⊙ F_x + g_y ⊙ F_y`, or `g_x ⊙ F_x` when only one modality is present.
    pub fn fuse<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, fx: Var, fy: Option<Var>) -> Result<Fused> {
        let gate_x = self.x.gate(g, store, fx)?;
        let wx = g.scale_channels(fx, gate_x)?;
        match (fy, &self.y) {
            (Some(fy), Some(gy)) => {
                if g.shape(fx) != g.shape(fy) {
                    return Err(Error::shape("se_fuse", g.shape(fx), g.shape(fy)));
                }
                let gate_y = gy.gate(g, store, fy)?;
                let wy = g.scale_channels(fy, gate_y)?;
                Ok(Fused { fused: g.add(wx, wy)?, gate_x, gate_y: Some(gate_y) })
            }
            (None, _) => Ok(Fused { fused: wx, gate_x, gate_y: None }),
            (Some(_), None) => Err(Error::InvalidArgument("second modality given to a single-modality fusion".into())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dfm {
    pub pyramid_x: Pyramid,
    pub pyramid_y: Option<Pyramid>,
    pub fusions: Vec<SeFusion>,
}

impl Dfm {
    pub fn new<P: ParamSink>(sink: &mut P, cfg: &ModelConfig) -> Result<Self> {
        let scope = Scope::new("dfm", Component::Dfm, true);
        let c = cfg.encoder.embed_dim;
        let ch = cfg.pyramid_channels;
        let two = cfg.modality.branches() == 2;
        Ok(Self {
            pyramid_x: Pyramid::new(sink, &scope.child("pyramid.x"), c, ch)?,
            pyramid_y: if two { Some(Pyramid::new(sink, &scope.child("pyramid.y"), c, ch)?) } else { None },
            fusions: (0..4)
                .map(|i| SeFusion::new(sink, &scope.child(format!("se.{i}")), ch[i], cfg.se_reduction, two))
                .collect::<Result<_>>()?,
        })
    }

    /// Fused multiscale features `F_f^1..F_f^4`, finest first.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        fx: Var,
        fy: Option<Var>,
    ) -> Result<[Var; 4]> {
        let px = self.pyramid_x.expand(g, store, fx)?;
        let py = match (fy, &self.pyramid_y) {
            (Some(fy), Some(p)) => {
                if g.shape(fx) != g.shape(fy) {
                    return Err(Error::shape("dfm_forward", g.shape(fx), g.shape(fy)));
                }
                Some(p.expand(g, store, fy)?)
            }
            (None, _) => None,
            (Some(_), None) => return Err(Error::InvalidArgument("dfm built for a single modality".into())),
        };
        let mut out = [px[0]; 4];
        for i in 0..4 {
            out[i] = self.fusions[i].fuse(g, store, px[i], py.map(|p| p[i]))?.fused;
        }
        Ok(out)
    }
}

/// Parameter-free ladder used when the fusion module is ablated: the branch
/// features are summed and resampled to the four scales (bilinear ×4 and ×2,
/// identity, 2×2 average pooling).
pub fn plain_ladder<S: Scalar>(g: &mut Graph<S>, fx: Var, fy: Option<Var>) -> Result<[Var; 4]> {
    let t = match fy {
        Some(fy) => g.add(fx, fy)?,
        None => fx,
    };
    let s = g.shape(t).to_vec();
    if !s[0].is_multiple_of(2) || !s[1].is_multiple_of(2) {
        return Err(Error::invalid("plain_ladder", format!("grid {}x{} must be even", s[0], s[1])));
    }
    let f = layers::tokens_to_map(g, t)?;
    let a = g.upsample_bilinear(f, 4)?;
    let b = g.upsample_bilinear(f, 2)?;
    let c = s[2];
    let mut pool = Tensor::<S>::zeros([c, c, 2, 2]);
    for ch in 0..c {
        for k in 0..4 {
            pool.set(&[ch, ch, k / 2, k % 2], S::lit(0.25));
        }
    }
    let pool = g.constant(pool);
    let d = g.conv2d(f, pool, None, 2, 0)?;
    Ok([a, b, f, d])
}
