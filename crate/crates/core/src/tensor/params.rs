use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Registry of named trainable tensors. Registration order is stable and is
/// the order parameters are serialized in.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "parameter {name} registered twice"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].grad
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count of every parameter whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[S]) {
        let dst = self.params[id.0].grad.data_mut();
        debug_assert_eq!(dst.len(), grad.len());
        for (d, g) in dst.iter_mut().zip(grad) {
            *d += *g;
        }
    }

    /// Copies values from `other` by name; every name and shape must agree.
    pub fn load_values_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.register(p.name.clone(), p.value.cast());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_is_ordered_and_named() {
        let mut store = ParamStore::<f32>::new();
        let a = store.register("a.weight", Tensor::zeros(&[2, 3]));
        let b = store.register("b.bias", Tensor::zeros(&[1, 3]));
        assert_eq!(store.id("a.weight"), Some(a));
        assert_eq!(store.id("b.bias"), Some(b));
        assert_eq!(store.num_scalars(), 9);
        assert_eq!(store.num_scalars_with_prefix("a."), 6);
        let names: Vec<_> = store.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["a.weight", "b.bias"]);
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.register("w", Tensor::zeros(&[1, 1]));
        store.register("w", Tensor::zeros(&[1, 1]));
    }

    #[test]
    fn load_values_checks_shapes() {
        let mut a = ParamStore::<f64>::new();
        a.register("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamStore::<f64>::new();
        b.register("w", Tensor::zeros(&[2, 3]));
        assert!(matches!(
            a.load_values_from(&b),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
