use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter tensor. `Bias` covers every additive shift (linear and
/// conv biases, layer-norm and channel-norm shifts); `Buffer` tensors are
/// frozen statistics that never receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
    Embedding,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Array2<S>,
    pub kind: ParamKind,
}

/// Named, ordered collection of 2-D parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. Names are unique; registering a name twice is a
    /// programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<S>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "parameter {name} registered twice"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, kind });
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

    pub fn get(&self, id: ParamId) -> &Array2<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<S> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.params[id.0].kind
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].kind != ParamKind::Buffer
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Sets every tensor whose name starts with `prefix` and whose kind is
    /// `kind` to zero. Returns the number of tensors touched.
    pub fn zero_matching(&mut self, prefix: &str, kind: ParamKind) -> usize {
        let mut touched = 0;
        for p in &mut self.params {
            if p.kind == kind && p.name.starts_with(prefix) {
                p.value.fill(S::zero());
                touched += 1;
            }
        }
        touched
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|x| T::lit(x.as_f64())),
                    kind: p.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Parameter gradients, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<S> {
    grads: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Grads {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Array2<S>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Drops the gradient of `id`, so the optimizer leaves it untouched.
    pub fn clear(&mut self, id: ParamId) {
        if let Some(g) = self.grads.get_mut(id.0) {
            *g = None;
        }
    }

    /// `self += weight * other`
    pub fn add_scaled(&mut self, other: &Grads<S>, weight: S) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(acc) => acc.scaled_add(weight, src),
                    None => *dst = Some(src.mapv(|x| x * weight)),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&x| {
                let x = x.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<S>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// Parameter initializers.
pub struct Init;

impl Init {
    /// Normal(0, std) resampled outside two standard deviations.
    pub fn trunc_normal<S: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<S> {
        Array2::from_shape_simple_fn((rows, cols), || loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                return S::lit(z * std);
            }
        })
    }

    /// He-normal for a layer with `fan_in` inputs.
    pub fn kaiming<S: Scalar, R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<S> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_simple_fn((rows, cols), || S::lit(normal.sample(rng)))
    }

    pub fn zeros<S: Scalar>(rows: usize, cols: usize) -> Array2<S> {
        Array2::zeros((rows, cols))
    }

    pub fn ones<S: Scalar>(rows: usize, cols: usize) -> Array2<S> {
        Array2::ones((rows, cols))
    }
}
