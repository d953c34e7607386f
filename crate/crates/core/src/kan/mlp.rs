use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init, Bound, ParamStore};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Silu => tape.silu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Affine map `x·W + b` followed (except on the last layer) by `activation`.
/// `{prefix}.weight` is stored as `[n_in, n_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayer {
    pub prefix: String,
    pub n_in: usize,
    pub n_out: usize,
    pub activation: Activation,
}

impl MlpLayer {
    pub fn new(
        prefix: impl Into<String>,
        n_in: usize,
        n_out: usize,
        activation: Activation,
    ) -> Self {
        MlpLayer {
            prefix: prefix.into(),
            n_in,
            n_out,
            activation,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let std = (1.0 / self.n_in as f64).sqrt();
        store.insert(
            self.weight_name(),
            init::normal(&[self.n_in, self.n_out], std, rng),
        )?;
        store.insert(self.bias_name(), init::normal(&[self.n_out], 0.1, rng))
    }

    fn affine(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let y = tape.matmul(x, p.get(&self.weight_name()))?;
        let b = tape.repeat_rows(p.get(&self.bias_name()), rows)?;
        tape.add(y, b)
    }
}

/// `W_{L-1}(σ(W_{L-2}(…σ(W_0 x)…)))`: the activation sits between layers
/// only, never after the last one.
pub fn mlp_forward(tape: &mut Tape, p: &Bound, layers: &[MlpLayer], x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let vector = shape.len() == 1;
    let mut h = if vector {
        tape.reshape(x, vec![1, shape[0]])?
    } else {
        x
    };
    for (l, layer) in layers.iter().enumerate() {
        let width = tape.shape(h)[1];
        if width != layer.n_in {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                lhs: vec![width],
                rhs: vec![layer.n_in, layer.n_out],
            });
        }
        h = layer.affine(tape, p, h)?;
        if l + 1 < layers.len() {
            h = layer.activation.apply(tape, h)?;
        }
    }
    if vector {
        let n = tape.value(h).len();
        h = tape.reshape(h, vec![n])?;
    }
    Ok(h)
}
