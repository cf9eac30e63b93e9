//! Named parameter storage and binding onto a [`Graph`].
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical dotted names
//! (`level0.block1.img.attn.w_q`). Each architectural piece describes its
//! parameters as a list of [`ParamSpec`]s and binds them by the same names, so
//! the name→shape map is a pure function of the configuration.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::tensor::Tensor;

/// Truncated-normal standard deviation for weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }

    pub fn weight(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self::new(name, [din, dout], Init::TruncNormal(INIT_STD))
    }

    pub fn bias(name: impl Into<String>, d: usize) -> Self {
        Self::new(name, [d], Init::Zeros)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every parameter in `specs` in order.
    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let t = match spec.init {
                Init::TruncNormal(std) => Tensor::trunc_normal(spec.shape.clone(), std, rng),
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
                Init::Ones => Tensor::ones(spec.shape.clone()),
            };
            if store.tensors.insert(spec.name.clone(), t).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate parameter name `{}`",
                    spec.name
                )));
            }
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks that names and shapes match `specs` exactly.
    pub fn check_layout(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if self.tensors.len() != specs.len() {
            let known: std::collections::HashSet<&str> =
                specs.iter().map(|s| s.name.as_str()).collect();
            if let Some(extra) = self.tensors.keys().find(|k| !known.contains(k.as_str())) {
                return Err(Error::UnexpectedParam(extra.clone()));
            }
        }
        Ok(())
    }
}

/// Creates graph leaves for stored parameters and remembers their ids.
pub struct Binder<'a> {
    graph: &'a mut Graph,
    store: &'a ParamStore,
    trainable: bool,
    bound: Vec<(String, TensorId)>,
}

impl<'a> Binder<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            graph,
            store,
            trainable,
            bound: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<TensorId> {
        let t = self.store.get(name)?.clone();
        let id = self.graph.leaf(t, self.trainable)?;
        self.bound.push((name.to_string(), id));
        Ok(id)
    }

    pub fn finish(self) -> BoundParams {
        BoundParams { ids: self.bound }
    }
}

/// Name → graph id map produced by a [`Binder`].
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    ids: Vec<(String, TensorId)>,
}

impl BoundParams {
    pub fn ids(&self) -> &[(String, TensorId)] {
        &self.ids
    }

    /// Gradients after backward; parameters the loss did not reach get zeros.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.ids
            .iter()
            .map(|(name, id)| {
                let grad = g
                    .grad(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(*id).to_vec()));
                (name.clone(), grad)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::weight("a.w", 3, 2),
            ParamSpec::bias("a.b", 2),
            ParamSpec::new("n.gamma", [2], Init::Ones),
        ]
    }

    #[test]
    fn init_respects_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = ParamStore::init(&specs(), &mut rng).unwrap();
        store.check_layout(&specs()).unwrap();
        assert_eq!(store.num_scalars(), 6 + 2 + 2);
        assert_eq!(store.get("n.gamma").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(store.get("a.b").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn layout_mismatches_are_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::init(&specs(), &mut rng).unwrap();
        store.insert("a.w", Tensor::zeros([2, 2]));
        match store.check_layout(&specs()) {
            Err(Error::ParamShape { name, .. }) => assert_eq!(name, "a.w"),
            other => panic!("{other:?}"),
        }
        store.insert("a.w", Tensor::zeros([3, 2]));
        store.insert("extra", Tensor::zeros([1]));
        assert!(matches!(store.check_layout(&specs()), Err(Error::UnexpectedParam(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = specs();
        s.push(ParamSpec::bias("a.b", 2));
        assert!(ParamStore::init(&s, &mut rng).is_err());
    }
}
