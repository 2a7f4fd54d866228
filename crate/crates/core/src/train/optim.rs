//! Stochastic gradient descent with momentum and L2 weight decay.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one slot per parameter of the store.
#[derive(Clone, Debug, Default)]
pub struct SgdState<S> {
    velocity: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> SgdState<S> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }
}

/// `v ← m·v + g + wd·w; w ← w − lr·v` for trainable parameters, then clamps
/// bounded parameters back into range. Frozen parameters are never touched.
pub fn sgd_step<S: Scalar>(store: &mut ParamStore<S>, state: &mut SgdState<S>, cfg: &SgdConfig) -> Result<()> {
    let (lr, m, wd) = (S::lit(cfg.lr), S::lit(cfg.momentum), S::lit(cfg.weight_decay));
    state.velocity.resize(store.len(), None);
    for (p, slot) in store.iter_mut().zip(state.velocity.iter_mut()) {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.as_ref().ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
        let v = slot.get_or_insert_with(|| Tensor::zeros(p.tensor.shape().to_vec()));
        for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(grad.data()).zip(p.tensor.data_mut()) {
            *vi = m * *vi + gi + wd * *wi;
            *wi = *wi - lr * *vi;
        }
        if let Some((lo, hi)) = p.bounds {
            for w in p.tensor.data_mut() {
                *w = w.max(lo).min(hi);
            }
        }
    }
    Ok(())
}
