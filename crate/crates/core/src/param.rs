//! Named parameters and the model-wide registry.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Backbone,
    Adapter,
    Dfm,
    Decoder,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Backbone, Component::Adapter, Component::Dfm, Component::Decoder];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Backbone => "encoder backbone",
            Component::Adapter => "adapters",
            Component::Dfm => "dfm",
            Component::Decoder => "decoder",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub trainable: bool,
    pub component: Component,
    /// Box constraint re-applied after every optimizer step.
    pub bounds: Option<(S, S)>,
    pub grad: Option<Tensor<S>>,
}

impl<S: Scalar> Parameter<S> {
    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Owns every parameter of a model; the single source of truth for weights.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<S>,
        trainable: bool,
        component: Component,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor, trainable, component, bounds: None, grad: None });
        Ok(id)
    }

    pub fn set_bounds(&mut self, id: ParamId, lo: S, hi: S) {
        self.params[id.0].bounds = Some((lo, hi));
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.tensor.shape() {
            return Err(Error::shape("accumulate_grad", p.tensor.shape(), grad.shape()));
        }
        match &mut p.grad {
            Some(acc) => {
                for (a, &g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a = *a + g;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn count(&self, filter: impl Fn(&Parameter<S>) -> bool) -> usize {
        self.params.iter().filter(|p| filter(p)).map(|p| p.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count(|p| p.trainable)
    }

    pub fn names(&self, filter: impl Fn(&Parameter<S>) -> bool) -> BTreeSet<String> {
        self.params.iter().filter(|p| filter(p)).map(|p| p.name.clone()).collect()
    }

    /// SHA-256 over the bytes of every frozen parameter in registration order.
    pub fn frozen_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| !p.trainable) {
            buf.clear();
            buf.extend_from_slice(p.name.as_bytes());
            for &v in p.tensor.data() {
                v.extend_le_bytes(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.register("a", Tensor::zeros([2]), true, Component::Adapter).unwrap();
        assert!(store.register("a", Tensor::zeros([2]), true, Component::Adapter).is_err());
    }

    #[test]
    fn frozen_hash_ignores_trainable_params() {
        let mut store = ParamStore::<f32>::new();
        let frozen = store.register("w", Tensor::ones([3]), false, Component::Backbone).unwrap();
        let free = store.register("a", Tensor::ones([3]), true, Component::Adapter).unwrap();
        let h0 = store.frozen_hash();
        store.get_mut(free).tensor.data_mut()[0] = 5.0;
        assert_eq!(h0, store.frozen_hash());
        store.get_mut(frozen).tensor.data_mut()[0] = 5.0;
        assert_ne!(h0, store.frozen_hash());
    }

    #[test]
    fn grads_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("a", Tensor::zeros([2]), true, Component::Adapter).unwrap();
        let g = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        store.accumulate_grad(id, &g).unwrap();
        store.accumulate_grad(id, &g).unwrap();
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[2.0, 4.0]);
        assert!(store.accumulate_grad(id, &Tensor::zeros([3])).is_err());
    }
}

/// Initial value rule for a parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Truncated normal (±2σ) with the given standard deviation.
    TruncNormal(f64),
    Const(f64),
}

/// Declaration of one parameter, as seen by a [`ParamSink`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
    pub component: Component,
    pub bounds: Option<(f64, f64)>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Receiver of parameter declarations while a module is being built. The same
/// construction code either allocates weights ([`Initializer`]) or only records
/// their shapes ([`Ledger`]), so parameter accounting never drifts from the
/// modules themselves.
pub trait ParamSink {
    fn declare(&mut self, spec: ParamSpec) -> Result<ParamId>;

    fn param(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        init: Init,
        component: Component,
        trainable: bool,
    ) -> Result<ParamId> {
        self.declare(ParamSpec { name: name.into(), shape: shape.into(), init, trainable, component, bounds: None })
    }
}

/// Shape-only sink used for closed-form parameter counts.
#[derive(Clone, Debug, Default)]
pub struct Ledger {
    pub specs: Vec<ParamSpec>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self, filter: impl Fn(&ParamSpec) -> bool) -> usize {
        self.specs.iter().filter(|s| filter(s)).map(ParamSpec::numel).sum()
    }

    pub fn total(&self) -> usize {
        self.count(|_| true)
    }
}

impl ParamSink for Ledger {
    fn declare(&mut self, spec: ParamSpec) -> Result<ParamId> {
        if self.specs.iter().any(|s| s.name == spec.name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{}`", spec.name)));
        }
        self.specs.push(spec);
        Ok(ParamId(self.specs.len() - 1))
    }
}

/// Allocating sink: draws initial values and registers them in a store.
pub struct Initializer<'a, S, R> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut R,
}

impl<'a, S, R> Initializer<'a, S, R> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut R) -> Self {
        Self { store, rng }
    }
}

impl<S: Scalar, R: rand::Rng> ParamSink for Initializer<'_, S, R> {
    fn declare(&mut self, spec: ParamSpec) -> Result<ParamId> {
        let tensor = match spec.init {
            Init::TruncNormal(std) => Tensor::trunc_normal(spec.shape.clone(), std, self.rng),
            Init::Const(v) => Tensor::full(spec.shape.clone(), S::lit(v)),
        };
        let id = self.store.register(spec.name, tensor, spec.trainable, spec.component)?;
        if let Some((lo, hi)) = spec.bounds {
            self.store.set_bounds(id, S::lit(lo), S::lit(hi));
        }
        Ok(id)
    }
}
