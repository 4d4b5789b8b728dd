use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(t);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Param(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Param(format!("missing parameter `{name}`"))),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn same_layout<G: Scalar>(&self, other: &ParamSet<G>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Records every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<F>, requires_grad: bool) -> Bound<'_, F> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        Bound { set: self, vars }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix_stripped(&self, prefix: &str) -> ParamSet<F> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet<F>) {
        for (n, t) in other.iter() {
            self.insert(format!("{prefix}{n}"), t.clone());
        }
    }
}

/// A [`ParamSet`] recorded on a tape.
pub struct Bound<'a, F: Scalar> {
    set: &'a ParamSet<F>,
    vars: Vec<Var>,
}

impl<F: Scalar> Bound<'_, F> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.set
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Param(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Normal(0, std²) truncated to ±2·std by rejection.
pub fn trunc_normal<F: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break F::c(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub fn normal<F: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| F::c(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
