//! Optimizer, metrics, checkpoints and the training/evaluation loops.

pub mod checkpoint;
pub mod heatmap;
pub mod metrics;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::data::{crop, slide_windows, stitch_average, Augmentation, ClassTaxonomy, Patch, Sample, TileIndex};
use crate::error::{Error, Result};
use crate::model::Manet;
use crate::scalar::Scalar;

pub use metrics::{metrics, ClassScores, ConfusionMatrix, Metrics};
pub use optim::{sgd_step, SgdConfig, SgdState};

/// Header of the line-oriented metric log.
pub const LOG_HEADER: &str = "epoch,loss,OA,mF1,mIoU";

/// Mean cross-entropy of `[K×H×W]` logits against per-pixel labels.
pub fn loss_ce<S: Scalar>(
    g: &mut Graph<S>,
    logits: crate::autograd::Var,
    labels: &[usize],
) -> Result<crate::autograd::Var> {
    g.cross_entropy(logits, labels)
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub metrics: Option<Metrics>,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let (oa, mf1, miou) = self.metrics.as_ref().map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.oa, m.mf1, m.miou));
        format!("{},{:.6},{:.4},{:.4},{:.4}", self.epoch, self.loss, oa, mf1, miou)
    }
}

/// Every training window of a split.
pub fn training_tiles<S: Scalar>(patches: &[Patch<S>], window: usize, stride: usize) -> Result<Vec<TileIndex>> {
    let mut tiles = Vec::new();
    for (i, p) in patches.iter().enumerate() {
        tiles.extend(slide_windows(i, p.sample.height, p.sample.width, window, stride)?);
    }
    Ok(tiles)
}

/// Model, optimizer state and the seeded stream that drives shuffling and
/// augmentation.
pub struct Trainer<S> {
    pub model: Manet<S>,
    pub cfg: RunConfig,
    state: SgdState<S>,
    rng: ChaCha8Rng,
    frozen_hash: String,
    pub augment: bool,
    steps: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Manet::new(&cfg.model, cfg.train.seed)?;
        let frozen_hash = model.store.frozen_hash();
        Ok(Self {
            model,
            cfg: cfg.clone(),
            state: SgdState::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5eed_da7a),
            frozen_hash,
            augment: true,
            steps: 0,
        })
    }

    pub fn frozen_hash(&self) -> &str {
        &self.frozen_hash
    }

    fn sgd(&self) -> SgdConfig {
        let t = &self.cfg.train;
        SgdConfig { lr: t.lr, momentum: t.momentum, weight_decay: t.weight_decay }
    }

    /// One optimizer step on a batch; returns the mean loss.
    pub fn step(&mut self, batch: &[Sample<S>], epoch: usize) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        self.model.store.zero_grad();
        let inv = S::lit(1.0 / batch.len() as f64);
        let mut total = 0.0;
        for s in batch {
            let mut g = Graph::new();
            let out = self.model.forward(&mut g, &s.optical, &s.dsm)?;
            let loss = loss_ce(&mut g, out.logits, &s.labels_usize())?;
            let value = g.value(loss).data()[0].to_f64_lossy();
            let scaled = g.scale(loss, inv);
            g.backward(scaled)?;
            g.accumulate_param_grads(&mut self.model.store)?;
            total += value;
        }
        let first_bad = self
            .model
            .store
            .iter()
            .find(|(_, p)| p.grad.as_ref().is_some_and(|g| !g.all_finite()))
            .map(|(_, p)| p.name.clone());
        if !total.is_finite() || first_bad.is_some() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: self.steps,
                param: first_bad.unwrap_or_else(|| "<none>".into()),
            });
        }
        let sgd = self.sgd();
        sgd_step(&mut self.model.store, &mut self.state, &sgd)?;
        self.steps += 1;
        Ok(total / batch.len() as f64)
    }

    /// One pass over shuffled, augmented training windows; returns the mean
    /// batch loss.
    pub fn epoch(&mut self, epoch: usize, patches: &[Patch<S>], tiles: &[TileIndex]) -> Result<f64> {
        let mut order = tiles.to_vec();
        order.shuffle(&mut self.rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(self.cfg.train.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for t in chunk {
                let s = crop(&patches[t.patch].sample, t)?;
                let aug = if self.augment { Augmentation::sample(&mut self.rng) } else { Augmentation::IDENTITY };
                batch.push(aug.apply(&s)?);
            }
            losses.push(self.step(&batch, epoch)?);
        }
        self.check_frozen()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    /// Fails if any frozen parameter changed since construction.
    pub fn check_frozen(&self) -> Result<()> {
        let now = self.model.store.frozen_hash();
        if now != self.frozen_hash {
            return Err(Error::Invariant(format!("frozen parameters changed: {} -> {now}", self.frozen_hash)));
        }
        Ok(())
    }
}

/// Trained model and its per-epoch log.
pub struct Trained<S> {
    pub model: Manet<S>,
    pub log: Vec<EpochRecord>,
}

/// Trains for `cfg.train.epochs`, evaluating on `test` (when nonempty) after
/// every epoch. `on_epoch` observes each record as it is produced.
pub fn train<S: Scalar>(
    cfg: &RunConfig,
    train_set: &[Patch<S>],
    test_set: &[Patch<S>],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trained<S>> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let window = cfg.model.encoder.image_size;
    let tiles = training_tiles(train_set, window, cfg.train.train_stride)?;
    let taxonomy = ClassTaxonomy::default();
    let mut trainer = Trainer::new(cfg)?;
    let mut log = Vec::with_capacity(cfg.train.epochs);
    for epoch in 1..=cfg.train.epochs {
        let loss = trainer.epoch(epoch, train_set, &tiles)?;
        let metrics = if test_set.is_empty() {
            None
        } else {
            Some(evaluate(&trainer.model, test_set, cfg.train.eval_stride, &taxonomy)?.1)
        };
        let rec = EpochRecord { epoch, loss, metrics };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(Trained { model: trainer.model, log })
}

/// Overlap-averaged class probabilities `[K×H×W]` for a whole patch.
pub fn predict_patch<S: Scalar>(
    model: &Manet<S>,
    sample: &Sample<S>,
    stride: usize,
) -> Result<crate::tensor::Tensor<S>> {
    let window = model.cfg.encoder.image_size;
    let tiles = slide_windows(0, sample.height, sample.width, window, stride)?;
    let mut probs = Vec::with_capacity(tiles.len());
    for t in tiles {
        let s = crop(sample, &t)?;
        probs.push((t, model.predict_probs(&s.optical, &s.dsm)?));
    }
    stitch_average(&probs, model.cfg.classes, sample.height, sample.width)
}

/// Per-pixel argmax of a `[K×H×W]` map.
pub fn argmax_classes<S: Scalar>(probs: &crate::tensor::Tensor<S>) -> Vec<usize> {
    let (k, hw) = (probs.shape()[0], probs.shape()[1] * probs.shape()[2]);
    let d = probs.data();
    (0..hw).map(|p| (1..k).fold(0, |best, c| if d[c * hw + p] > d[best * hw + p] { c } else { best })).collect()
}

/// Sliding-window inference, stitching and confusion accumulation over all
/// patches.
pub fn evaluate<S: Scalar>(
    model: &Manet<S>,
    patches: &[Patch<S>],
    stride: usize,
    taxonomy: &ClassTaxonomy,
) -> Result<(ConfusionMatrix, Metrics)> {
    if model.cfg.classes != taxonomy.len() {
        return Err(Error::Config(format!(
            "model predicts {} classes, taxonomy has {}",
            model.cfg.classes,
            taxonomy.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(taxonomy.len());
    for p in patches {
        let pred = argmax_classes(&predict_patch(model, &p.sample, stride)?);
        cm.accumulate(&pred, &p.sample.labels_usize())?;
    }
    let m = metrics(&cm, taxonomy)?;
    Ok((cm, m))
}
