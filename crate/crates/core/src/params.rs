//! Named parameter storage shared by every layer.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Ordered collection of named parameter tensors.
///
/// Insertion order is the canonical order used by the optimizer and by
/// checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Records every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Same as [`bind`](Self::bind) but without gradient tracking.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        Bound { vars }
    }

    /// All parameters concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn to_vec(&self) -> Vec<Tensor> {
        self.entries.values().cloned().collect()
    }

    /// Replaces values in canonical order; shapes must match.
    pub fn assign(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "assign: {} tensors for {} parameters",
                values.len(),
                self.entries.len()
            )));
        }
        for ((name, t), v) in self.entries.iter_mut().zip(values) {
            if t.shape() != v.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: v.shape().to_vec(),
                });
            }
            *t = v.clone();
        }
        Ok(())
    }
}

/// Tape handles for a [`ParamStore`], looked up by parameter name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    /// Handle for `name`. Panics when the name was never registered, which
    /// means a layer and its initializer disagree.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was not registered"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients in the canonical parameter order (zeros where none reached).
    pub fn collect_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let n = store.get(k).map(Tensor::len).unwrap_or(0);
                grads.get_or_zeros(*v, n)
            })
            .collect()
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
            .expect("positive extents")
    }

    pub fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-scale, scale);
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
            .expect("positive extents")
    }

    /// He-normal for convolutions with the given fan-in.
    pub fn he(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
        normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
    }
}

impl ParamStore {
    /// Gradient check of a scalar function of `inputs` and every parameter.
    ///
    /// `f` receives the input handles and a [`Bound`] for the parameters.
    pub fn gradcheck<F>(
        &self,
        inputs: &[Tensor],
        f: F,
        opts: &crate::tensor::GradcheckOptions,
    ) -> Result<crate::tensor::GradcheckReport>
    where
        F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
    {
        let mut all = inputs.to_vec();
        all.extend(self.to_vec());
        let names: Vec<String> = self.names().map(String::from).collect();
        let k = inputs.len();
        crate::tensor::gradcheck(
            |t, v| {
                let bound = Bound::from_pairs(names.iter().cloned().zip(v[k..].iter().copied()));
                f(t, &bound, &v[..k])
            },
            &all,
            opts,
        )
    }
}
