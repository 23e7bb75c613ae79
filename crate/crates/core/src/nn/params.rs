use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RUNNING_MEAN_SUFFIX: &str = ".running_mean";
pub const RUNNING_VAR_SUFFIX: &str = ".running_var";

/// Named tensor owned by a network. Non-trainable entries are buffers
/// such as batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<E: Element = f32> {
    pub name: String,
    pub value: Tensor<E>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<E: Element = f32> {
    entries: Vec<Parameter<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: String, value: Tensor<E>, trainable: bool) -> Result<ParamId> {
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.push(Parameter { name, value, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<E> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<E> {
        &mut self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<E>> {
        self.entries.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Registers parameters under a dotted name prefix and draws their
/// initial values from a seeded stream.
pub struct Initializer<'a, E: Element> {
    store: &'a mut ParamStore<E>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, E: Element> Initializer<'a, E> {
    pub fn new(store: &'a mut ParamStore<E>, rng: &'a mut ChaCha8Rng) -> Self {
        Initializer {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> Initializer<'b, E> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Initializer {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// He-style normal with standard deviation `sqrt(2 / fan_in)`.
    pub fn he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| E::from_f64(normal.sample(self.rng))).collect();
        self.add(name, Tensor::from_vec(shape, data)?, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, E::from_f64(value))?, trainable)
    }

    pub fn add(&mut self, name: &str, value: Tensor<E>, trainable: bool) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(full, value, trainable)
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        self.rng
    }
}

/// Whether stochastic layers sample (training) or act as the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update from one training-mode batch norm.
#[derive(Debug, Clone)]
pub(crate) struct StatsUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub stats: crate::autodiff::BatchStats,
}

/// State threaded through a layer forward pass.
pub struct Ctx<'a, E: Element> {
    pub graph: &'a mut Graph<E>,
    params: &'a ParamStore<E>,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
    rng: Option<&'a mut ChaCha8Rng>,
    pub(crate) updates: Vec<StatsUpdate>,
}

impl<'a, E: Element> Ctx<'a, E> {
    pub fn new(
        graph: &'a mut Graph<E>,
        params: &'a ParamStore<E>,
        mode: Mode,
        rng: Option<&'a mut ChaCha8Rng>,
    ) -> Self {
        Ctx {
            graph,
            params,
            bound: vec![None; params.len()],
            mode,
            rng,
            updates: Vec::new(),
        }
    }

    /// Graph variable for a parameter, inserted on first use.
    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let v = self.graph.leaf(p.value.clone().with_requires_grad(p.trainable));
        self.bound[id.0] = Some(v);
        v
    }

    /// Uses `v` for parameter `id` in place of the stored value.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn param(&self, id: ParamId) -> &Tensor<E> {
        &self.params.get(id).value
    }

    pub fn rng(&mut self) -> Result<&mut ChaCha8Rng> {
        self.rng
            .as_deref_mut()
            .ok_or_else(|| Error::Config("training-mode forward needs a random stream".into()))
    }

    pub fn graph_and_rng(&mut self) -> (&mut Graph<E>, Option<&mut ChaCha8Rng>) {
        (&mut *self.graph, self.rng.as_deref_mut())
    }

    pub(crate) fn into_bindings(self) -> (Vec<Option<Var>>, Vec<StatsUpdate>) {
        (self.bound, self.updates)
    }
}
