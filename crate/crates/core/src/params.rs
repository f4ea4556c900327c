//! Named parameters and batch-norm buffers, and their binding into a graph.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Graph, Real, Tensor, Var};

/// Running-average weight kept on each batch-norm update.
pub const BN_MOMENTUM: Real = 0.9;

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He uniform, `U(±√(6/fan_in))`.
    He { fan_in: usize },
    /// `U(±1/√fan_in)`.
    Uniform { fan_in: usize },
    Const(Real),
}

/// Declared parameter: name, shape, initializer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Tensor {
        let bound = |fan: usize, num: Real| (num / fan.max(1) as Real).sqrt();
        match self.init {
            Init::He { fan_in } => {
                let s = bound(fan_in, 6.0);
                Tensor::from_fn(&self.shape, |_| rng.gen_range(-s..=s))
            }
            Init::Uniform { fan_in } => {
                let s = bound(fan_in, 1.0);
                Tensor::from_fn(&self.shape, |_| rng.gen_range(-s..=s))
            }
            Init::Const(v) => Tensor::full(&self.shape, v),
        }
    }
}

/// Trainable parameters and non-trainable buffers, keyed by path names
/// such as `visual/stage0/block0/conv1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Samples every spec in order from `rng`.
    pub fn init<R: Rng>(specs: &[ParamSpec], buffers: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = Self::default();
        for s in specs {
            if store.params.insert(s.name.clone(), s.sample(rng)).is_some() {
                return Err(Error::Contract(format!("duplicate parameter {}", s.name)));
            }
        }
        for s in buffers {
            store.buffers.insert(s.name.clone(), s.sample(rng));
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown buffer {name}")))
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn apply_buffer_updates(&mut self, updates: BTreeMap<String, Tensor>) {
        self.buffers.extend(updates);
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "meta": meta,
            "buffers": self.buffers.keys().collect::<Vec<_>>(),
        }));
        for (k, v) in self.params.iter().chain(&self.buffers) {
            ck.insert(k.clone(), v.clone());
        }
        ck
    }

    /// Inverse of [`ParamStore::to_checkpoint`]; returns the user metadata.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, serde_json::Value)> {
        let names: Vec<String> = serde_json::from_value(ck.meta["buffers"].clone())
            .map_err(|_| Error::Input("checkpoint does not hold model parameters".into()))?;
        let mut store = Self::default();
        for (k, v) in &ck.tensors {
            if names.contains(k) {
                store.buffers.insert(k.clone(), v.clone());
            } else {
                store.params.insert(k.clone(), v.clone());
            }
        }
        Ok((store, ck.meta["meta"].clone()))
    }
}

/// Binds stored parameters into one graph on first use and collects the
/// batch-norm running-statistic updates of a training-mode forward pass.
pub struct Binder<'s> {
    store: &'s ParamStore,
    training: bool,
    bound: BTreeMap<String, Var>,
    updates: BTreeMap<String, Tensor>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, training: bool) -> Self {
        Self {
            store,
            training,
            bound: BTreeMap::new(),
            updates: BTreeMap::new(),
        }
    }

    /// Binder whose parameters are already leaves of the graph, e.g. the
    /// inputs of a gradient check.
    pub fn prebound(store: &'s ParamStore, training: bool, vars: BTreeMap<String, Var>) -> Self {
        Self {
            bound: vars,
            ..Self::new(store, training)
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn param(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let v = g.named_param(name, self.store.get(name)?.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters used so far, by name.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Batch norm with parameters `{prefix}/gamma`, `{prefix}/beta` and
    /// buffers `{prefix}/running_mean`, `{prefix}/running_var`.
    pub fn batch_norm(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(g, &format!("{prefix}/gamma"))?;
        let beta = self.param(g, &format!("{prefix}/beta"))?;
        let (mk, vk) = (format!("{prefix}/running_mean"), format!("{prefix}/running_var"));
        let (rm, rv) = (self.store.buffer(&mk)?, self.store.buffer(&vk)?);
        if !self.training {
            return g.batch_norm_eval(x, gamma, beta, rm.data(), rv.data());
        }
        let (y, stats) = g.batch_norm_train(x, gamma, beta)?;
        let blend = |old: &Tensor, new: &[Real]| {
            Tensor::from_fn(old.shape(), |i| {
                BN_MOMENTUM * old.data()[i] + (1.0 - BN_MOMENTUM) * new[i]
            })
        };
        self.updates.insert(mk, blend(rm, &stats.mean));
        self.updates.insert(vk, blend(rv, &stats.var));
        Ok(y)
    }

    /// Running-statistic updates, by buffer name.
    pub fn into_updates(self) -> BTreeMap<String, Tensor> {
        self.updates
    }
}

/// Specs for one batch norm over `channels`: parameters and buffers.
pub fn bn_specs(prefix: &str, channels: usize) -> (Vec<ParamSpec>, Vec<ParamSpec>) {
    (
        vec![
            ParamSpec::new(format!("{prefix}/gamma"), &[channels], Init::Const(1.0)),
            ParamSpec::new(format!("{prefix}/beta"), &[channels], Init::Const(0.0)),
        ],
        vec![
            ParamSpec::new(format!("{prefix}/running_mean"), &[channels], Init::Const(0.0)),
            ParamSpec::new(format!("{prefix}/running_var"), &[channels], Init::Const(1.0)),
        ],
    )
}
