//! The assembled network: encoder (with adapters), fusion module, decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters;
use crate::autograd::{Graph, Var};
use crate::config::{Modality, ModelConfig};
use crate::decoder::Decoder;
use crate::encoder::SamEncoder;
use crate::error::{Error, Result};
use crate::fusion::{self, Dfm};
use crate::param::{Component, Initializer, Ledger, ParamSink, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Manet<S> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub encoder: SamEncoder,
    pub dfm: Option<Dfm>,
    pub decoder: Decoder,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    pub fx: Var,
    pub fy: Option<Var>,
}

type Parts = (SamEncoder, Option<Dfm>, Decoder);

fn build<P: ParamSink>(sink: &mut P, cfg: &ModelConfig) -> Result<Parts> {
    cfg.validate()?;
    let mut encoder = SamEncoder::new(sink, &cfg.encoder)?;
    adapters::install_adapters(&mut encoder, sink, cfg.bottleneck, cfg.adapter_bias, cfg.adapter, cfg.modality)?;
    let (dfm, channels) =
        if cfg.dfm { (Some(Dfm::new(sink, cfg)?), cfg.pyramid_channels) } else { (None, [cfg.encoder.embed_dim; 4]) };
    let decoder = Decoder::new(sink, cfg, channels)?;
    Ok((encoder, dfm, decoder))
}

impl<S: Scalar> Manet<S> {
    /// Builds and initializes every parameter from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (encoder, dfm, decoder) = build(&mut Initializer::new(&mut store, &mut rng), cfg)?;
        Ok(Self { cfg: cfg.clone(), store, encoder, dfm, decoder })
    }

    /// Parameter declarations of a configuration without allocating weights.
    pub fn ledger(cfg: &ModelConfig) -> Result<Ledger> {
        let mut ledger = Ledger::new();
        build(&mut ledger, cfg)?;
        Ok(ledger)
    }

    /// Runs the network on one tile. `dsm` is ignored for optical-only models.
    pub fn forward(&self, g: &mut Graph<S>, optical: &Tensor<S>, dsm: &Tensor<S>) -> Result<Forward> {
        let size = self.cfg.encoder.image_size;
        if optical.shape() != [3, size, size] {
            return Err(Error::invalid(
                "forward",
                format!("optical {:?}, expected [3,{size},{size}]", optical.shape()),
            ));
        }
        let (fx, fy) = match self.cfg.modality {
            Modality::Both => {
                let (fx, fy) = self.encoder.encode_pair(g, &self.store, optical, dsm)?;
                (fx, Some(fy))
            }
            Modality::Optical => (self.encoder.encode(g, &self.store, optical)?, None),
        };
        let ladder = match &self.dfm {
            Some(dfm) => dfm.forward(g, &self.store, fx, fy)?,
            None => fusion::plain_ladder(g, fx, fy)?,
        };
        let logits = self.decoder.decode(g, &self.store, &ladder, size, size)?;
        Ok(Forward { logits, fx, fy })
    }

    /// Per-pixel class probabilities `[K×H×W]`.
    pub fn predict_probs(&self, optical: &Tensor<S>, dsm: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, optical, dsm)?;
        let p = g.softmax(out.logits, 0)?;
        Ok(g.value(p).clone())
    }

    pub fn report(&self) -> ParamReport {
        ParamReport::from_counts(self.store.iter().map(|(_, p)| (p.component, p.trainable, p.numel())))
    }
}

/// Frozen / trainable totals per component.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamReport {
    pub rows: Vec<(Component, usize, usize)>,
}

impl ParamReport {
    pub fn from_counts(items: impl Iterator<Item = (Component, bool, usize)>) -> Self {
        let mut rows: Vec<(Component, usize, usize)> = Component::ALL.iter().map(|&c| (c, 0, 0)).collect();
        for (comp, trainable, n) in items {
            let row = rows.iter_mut().find(|r| r.0 == comp).expect("known component");
            if trainable {
                row.2 += n;
            } else {
                row.1 += n;
            }
        }
        Self { rows }
    }

    pub fn from_ledger(ledger: &Ledger) -> Self {
        Self::from_counts(ledger.specs.iter().map(|s| (s.component, s.trainable, s.numel())))
    }

    pub fn get(&self, c: Component) -> (usize, usize) {
        self.rows.iter().find(|r| r.0 == c).map(|r| (r.1, r.2)).unwrap_or((0, 0))
    }

    pub fn frozen(&self) -> usize {
        self.rows.iter().map(|r| r.1).sum()
    }

    pub fn trainable(&self) -> usize {
        self.rows.iter().map(|r| r.2).sum()
    }
}
