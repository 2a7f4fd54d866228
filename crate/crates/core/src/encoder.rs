//! Plain (non-hierarchical) ViT image encoder shared by the optical and
//! elevation branches. Backbone weights are frozen; adapters hook into each
//! block through [`AdapterSlots`].

use crate::adapters::{self, Adapter, MmAdapter};
use crate::autograd::{Graph, Var};
use crate::config::{AdapterMode, EncoderConfig};
use crate::error::{Error, Result};
use crate::layers::{Conv, LayerNorm, Linear, Scope};
use crate::param::{Component, Init, Ledger, ParamId, ParamSink, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const BACKBONE_STD: f64 = 0.02;

/// Adapter hooks of one block. Index 0 is the optical branch, 1 the elevation branch.
#[derive(Clone, Debug, Default)]
pub struct AdapterSlots {
    pub attn: [Option<Adapter>; 2],
    pub mlp: [Option<Adapter>; 2],
    pub mm: Option<MmAdapter>,
}

impl AdapterSlots {
    pub fn is_empty(&self) -> bool {
        self.attn.iter().chain(&self.mlp).all(Option::is_none) && self.mm.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct VitBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub slots: AdapterSlots,
}

impl VitBlock {
    fn new<P: ParamSink>(sink: &mut P, scope: &Scope, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let init = Init::TruncNormal(BACKBONE_STD);
        Ok(Self {
            norm1: LayerNorm::new(sink, &scope.child("norm1"), c)?,
            qkv: Linear::new(sink, &scope.child("attn.qkv"), (c, 3 * c), true, init)?,
            proj: Linear::new(sink, &scope.child("attn.proj"), (c, c), true, init)?,
            norm2: LayerNorm::new(sink, &scope.child("norm2"), c)?,
            fc1: Linear::new(sink, &scope.child("mlp.fc1"), (c, hidden), true, init)?,
            fc2: Linear::new(sink, &scope.child("mlp.fc2"), (hidden, c), true, init)?,
            heads: cfg.heads,
            slots: AdapterSlots::default(),
        })
    }

    /// `proj(attention(qkv(LN1(x))))` on `[h×w×c]` tokens.
    pub fn attention_branch<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let n = self.norm1.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, n)?;
        let flat = g.reshape(qkv, &[s[0] * s[1], 3 * s[2]])?;
        let a = g.attention(flat, self.heads)?;
        let a = g.reshape(a, &s)?;
        self.proj.forward(g, store, a)
    }

    /// Frozen two-layer MLP applied to already-normalized tokens.
    pub fn mlp<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, normed: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, normed)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }

    /// `x + a` or, with an adapter, `x + a + s·adapter(a)`.
    pub fn attn_stage<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        adapter: Option<&Adapter>,
    ) -> Result<Var> {
        let a = self.attention_branch(g, store, x)?;
        let a = match adapter {
            Some(ad) => {
                let xa = ad.bottleneck.project(g, store, a)?;
                let s = g.param(store, ad.scale);
                let sx = g.scale_by(xa, s)?;
                g.add(a, sx)?
            }
            None => a,
        };
        g.add(x, a)
    }

    /// `MLP(LN2(x)) + x`, plus `s·x_a` when an adapter is present.
    pub fn mlp_stage<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        adapter: Option<&Adapter>,
    ) -> Result<Var> {
        let n = self.norm2.forward(g, store, x)?;
        let m = self.mlp(g, store, n)?;
        match adapter {
            Some(ad) => {
                let xa = ad.bottleneck.project(g, store, n)?;
                let s = g.param(store, ad.scale);
                adapters::block_residual_std(g, x, m, xa, s)
            }
            None => g.add(m, x),
        }
    }

    /// Plain frozen block (no adapters), one branch.
    pub fn forward_frozen<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let x1 = self.attn_stage(g, store, x, None)?;
        self.mlp_stage(g, store, x1, None)
    }

    fn forward_branch<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, branch: usize) -> Result<Var> {
        let x1 = self.attn_stage(g, store, x, self.slots.attn[branch].as_ref())?;
        self.mlp_stage(g, store, x1, self.slots.mlp[branch].as_ref())
    }

    pub fn forward_pair<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        y: Var,
    ) -> Result<(Var, Var)> {
        match &self.slots.mm {
            Some(mm) => {
                let x1 = self.attn_stage(g, store, x, self.slots.attn[0].as_ref())?;
                let y1 = self.attn_stage(g, store, y, self.slots.attn[1].as_ref())?;
                adapters::mmadapter_forward(g, store, self, x1, y1, mm)
            }
            None => Ok((self.forward_branch(g, store, x, 0)?, self.forward_branch(g, store, y, 1)?)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SamEncoder {
    pub cfg: EncoderConfig,
    pub patch: Conv,
    pub pos_embed: ParamId,
    pub blocks: Vec<VitBlock>,
    /// `None` until [`adapters::install_adapters`] has run.
    pub adapter_mode: Option<AdapterMode>,
}

impl SamEncoder {
    /// Declares the frozen backbone under `encoder.*`.
    pub fn new<P: ParamSink>(sink: &mut P, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let scope = Scope::new("encoder", Component::Backbone, false);
        let (c, p, grid) = (cfg.embed_dim, cfg.patch_size, cfg.grid());
        let init = Init::TruncNormal(BACKBONE_STD);
        let pe = scope.child("patch_embed");
        let patch = Conv {
            weight: pe.param(sink, "weight", &[c, 3, p, p], init)?,
            bias: pe.param(sink, "bias", &[c], Init::Const(0.0))?,
            stride: p,
            pad: 0,
        };
        let pos_embed = scope.param(sink, "pos_embed", &[grid, grid, c], init)?;
        let blocks = (0..cfg.depth)
            .map(|i| VitBlock::new(sink, &scope.child(format!("blocks.{i}")), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), patch, pos_embed, blocks, adapter_mode: None })
    }

    /// `[3×H×W]` image to `[h×w×c]` tokens with positional embedding added.
    pub fn patch_embed<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, image: &Tensor<S>) -> Result<Var> {
        let s = image.shape();
        let (size, p) = (self.cfg.image_size, self.cfg.patch_size);
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::invalid("patch_embed", format!("expected 3-channel [3,H,W] input, got {s:?}")));
        }
        if !s[1].is_multiple_of(p) || !s[2].is_multiple_of(p) {
            return Err(Error::invalid("patch_embed", format!("extent {}x{} not divisible by {p}", s[1], s[2])));
        }
        if s[1] != size || s[2] != size {
            return Err(Error::invalid("patch_embed", format!("expected {size}x{size}, got {}x{}", s[1], s[2])));
        }
        let x = g.constant(image.clone());
        let f = self.patch.forward(g, store, x)?;
        let (c, h, w) = (self.cfg.embed_dim, s[1] / p, s[2] / p);
        let f = g.reshape(f, &[c, h * w])?;
        let t = g.transpose(f)?;
        let t = g.reshape(t, &[h, w, c])?;
        let pos = g.param(store, self.pos_embed);
        g.add(t, pos)
    }

    /// Single-branch pass (optical only). Uses the branch-0 adapters.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, image: &Tensor<S>) -> Result<Var> {
        let mut x = self.patch_embed(g, store, image)?;
        for blk in &self.blocks {
            x = blk.forward_branch(g, store, x, 0)?;
            check_block_shape(g, x, &self.cfg)?;
        }
        Ok(x)
    }

    /// Both branches through the same backbone weights; returns `(F_x, F_y)`.
    pub fn encode_pair<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        image: &Tensor<S>,
        dsm: &Tensor<S>,
    ) -> Result<(Var, Var)> {
        if image.shape().len() != 3 || dsm.shape().len() != 3 || image.shape()[1..] != dsm.shape()[1..] {
            return Err(Error::shape("encode_pair", image.shape(), dsm.shape()));
        }
        let lifted = lift_dsm(dsm)?;
        let mut x = self.patch_embed(g, store, image)?;
        let mut y = self.patch_embed(g, store, &lifted)?;
        for blk in &self.blocks {
            (x, y) = blk.forward_pair(g, store, x, y)?;
            check_block_shape(g, x, &self.cfg)?;
            check_block_shape(g, y, &self.cfg)?;
        }
        Ok((x, y))
    }
}

fn check_block_shape<S: Scalar>(g: &Graph<S>, x: Var, cfg: &EncoderConfig) -> Result<()> {
    let want = [cfg.grid(), cfg.grid(), cfg.embed_dim];
    if g.shape(x) != want {
        return Err(Error::Invariant(format!("block output {:?}, expected {want:?}", g.shape(x))));
    }
    Ok(())
}

/// Replicates a single-channel elevation raster into three channels.
pub fn lift_dsm<S: Scalar>(dsm: &Tensor<S>) -> Result<Tensor<S>> {
    let s = dsm.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::invalid("lift_dsm", format!("expected [1,H,W], got {s:?}")));
    }
    let plane = dsm.data();
    let data = plane.iter().chain(plane).chain(plane).copied().collect();
    Tensor::new([3, s[1], s[2]], data)
}

/// Backbone parameter total (patch embedding, positional embedding and
/// blocks; adapters excluded), from the same declarations that build the model.
pub fn count_parameters(cfg: &EncoderConfig) -> Result<usize> {
    let mut ledger = Ledger::new();
    SamEncoder::new(&mut ledger, cfg)?;
    Ok(ledger.total())
}

/// Window side of the windowed-attention blocks in the reference encoder.
const REFERENCE_WINDOW: usize = 14;
/// Output width of the reference encoder's neck.
const REFERENCE_NECK: usize = 256;

/// Components of the reference image encoder this backbone does not build,
/// with the parameters each would add: decomposed relative position tables
/// (full-grid in the four global-attention blocks, window-sized elsewhere)
/// and the convolutional neck.
pub fn excluded_parameters(cfg: &EncoderConfig) -> Vec<(&'static str, usize)> {
    let head_dim = cfg.embed_dim / cfg.heads.max(1);
    let grid = cfg.grid();
    let window = REFERENCE_WINDOW.min(grid);
    let global = |i: usize| cfg.depth < 4 || (i + 1).is_multiple_of(cfg.depth / 4);
    let rel_pos: usize = (0..cfg.depth)
        .map(|i| {
            let side = if global(i) { grid } else { window };
            2 * (2 * side - 1) * head_dim
        })
        .sum();
    let c = cfg.embed_dim;
    let neck = c * REFERENCE_NECK + 2 * REFERENCE_NECK + REFERENCE_NECK * REFERENCE_NECK * 9 + 2 * REFERENCE_NECK;
    vec![("relative position encodings", rel_pos), ("neck", neck)]
}
