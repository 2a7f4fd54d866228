//! Top-down multiscale segmentation head.
//!
//! Starting from the coarsest (1/32) feature, each stage upsamples ×2,
//! adds a 1×1 projection of the next finer feature, then applies a 3×3
//! convolution and GELU. The 1/4-scale result is upsampled ×4 to the input
//! resolution and projected to class logits by a 1×1 convolution.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{Conv, Scope};
use crate::param::{Component, ParamSink, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Decoder {
    /// 1×1 projections of `F^1..F^4` to the decoder width.
    pub lateral: Vec<Conv>,
    /// 3×3 convolutions for the 1/16, 1/8 and 1/4 stages.
    pub smooth: Vec<Conv>,
    pub head: Conv,
    pub classes: usize,
}

impl Decoder {
    pub fn new<P: ParamSink>(sink: &mut P, cfg: &ModelConfig, in_channels: [usize; 4]) -> Result<Self> {
        let scope = Scope::new("decoder", Component::Decoder, true);
        let d = cfg.decoder_width;
        Ok(Self {
            lateral: in_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Conv::new(sink, &scope.child(format!("lateral.{i}")), (c, d, 1), 1, 0))
                .collect::<Result<_>>()?,
            smooth: (0..3)
                .map(|i| Conv::new(sink, &scope.child(format!("smooth.{i}")), (d, d, 3), 1, 1))
                .collect::<Result<_>>()?,
            head: Conv::new(sink, &scope.child("head"), (d, cfg.classes, 1), 1, 0)?,
            classes: cfg.classes,
        })
    }

    /// Logits `[K×H×W]` from the fused ladder (finest first).
    pub fn decode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        ladder: &[Var; 4],
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let (h4, w4) = {
            let s = g.shape(ladder[3]);
            (s[1], s[2])
        };
        for (i, &f) in ladder.iter().enumerate() {
            let s = g.shape(f);
            let k = 1 << (3 - i);
            if s.len() != 3 || s[1] != h4 * k || s[2] != w4 * k {
                return Err(Error::invalid(
                    "decode",
                    format!("ladder level {i} has shape {s:?}, expected spatial {}x{}", h4 * k, w4 * k),
                ));
            }
        }
        if h4 * 32 != height || w4 * 32 != width {
            return Err(Error::invalid(
                "decode",
                format!("coarsest level {h4}x{w4} does not match output {height}x{width}"),
            ));
        }
        let mut p = self.lateral[3].forward(g, store, ladder[3])?;
        for (stage, level) in [2usize, 1, 0].into_iter().enumerate() {
            let up = g.upsample_bilinear(p, 2)?;
            let lat = self.lateral[level].forward(g, store, ladder[level])?;
            let sum = g.add(up, lat)?;
            let sm = self.smooth[stage].forward(g, store, sum)?;
            p = g.gelu(sm);
        }
        let full = g.upsample_bilinear(p, 4)?;
        self.head.forward(g, store, full)
    }
}
