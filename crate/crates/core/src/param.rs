//! Named parameter storage with gradient accumulators.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He normal with the given fan-in: `N(0, 2/fan_in)`.
    HeNormal { fan_in: usize },
    Constant(f64),
}

impl Init {
    pub fn fill<T: Scalar, R: Rng + ?Sized>(&self, shape: Shape, rng: &mut R) -> Tensor<T> {
        match *self {
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let data = (0..shape.numel())
                    .map(|_| T::from_f64_lossy(normal.sample(rng)))
                    .collect();
                Tensor::new(shape, data).expect("sized by shape")
            }
            Init::Constant(v) => Tensor::full(shape, T::from_f64_lossy(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    /// Logical dimensions as written to disk, e.g. `[out, in]` for a linear weight.
    pub dims: Vec<usize>,
    /// Running statistics are stored alongside weights but never trained.
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, dims: Vec<usize>, trainable: bool) -> Result<Self> {
        let name = name.into();
        if dims.iter().product::<usize>() != value.len() {
            return Err(Error::shape(format!(
                "parameter `{name}`: dims {dims:?} do not match {} elements",
                value.len()
            )));
        }
        let grad = vec![T::zero(); value.len()];
        Ok(Parameter {
            name,
            value,
            grad,
            dims,
            trainable,
        })
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, param: Parameter<T>) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(Error::invalid(format!("duplicate parameter name `{}`", param.name)));
        }
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Parameter::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let mut q = Parameter::new(p.name.clone(), p.value.cast::<U>(), p.dims.clone(), p.trainable)
                .expect("same dims");
            q.grad = p.grad.iter().map(|g| U::from_f64_lossy(g.to_f64().unwrap())).collect();
            out.insert(q).expect("names already unique");
        }
        out
    }
}
