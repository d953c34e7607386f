use rand::Rng;

use crate::error::Result;
use crate::params::{init, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Square convolution, `{prefix}.w: [cout, cin, k, k]`, optional `{prefix}.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(prefix: impl Into<String>, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        Conv {
            prefix: prefix.into(),
            cin,
            cout,
            k,
            bias,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let fan_in = self.cin * self.k * self.k;
        store.insert(
            format!("{}.w", self.prefix),
            init::he(&[self.cout, self.cin, self.k, self.k], fan_in, rng),
        )?;
        if self.bias {
            store.insert(format!("{}.b", self.prefix), Tensor::zeros(&[self.cout]))?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + if self.bias { self.cout } else { 0 }
    }

    /// Same-size output (stride 1, padding `k/2`).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.w", self.prefix));
        let b = self.bias.then(|| p.get(&format!("{}.b", self.prefix)));
        tape.conv2d(x, w, b, 1, self.k / 2)
    }
}

/// Learned scale and shift of a normalization layer, `{prefix}.g|b: [c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub prefix: String,
    pub c: usize,
}

impl Affine {
    pub fn new(prefix: impl Into<String>, c: usize) -> Self {
        Affine {
            prefix: prefix.into(),
            c,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(format!("{}.g", self.prefix), Tensor::ones(&[self.c]))?;
        store.insert(format!("{}.b", self.prefix), Tensor::zeros(&[self.c]))
    }

    pub fn param_count(&self) -> usize {
        2 * self.c
    }

    pub fn vars(&self, p: &Bound) -> (Var, Var) {
        (
            p.get(&format!("{}.g", self.prefix)),
            p.get(&format!("{}.b", self.prefix)),
        )
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (g, b) = self.vars(p);
        tape.layer_norm(x, g, b, NORM_EPS)
    }

    pub fn instance_norm(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (g, b) = self.vars(p);
        tape.instance_norm(x, g, b, NORM_EPS)
    }
}

/// 3×3 conv (no bias, the norm removes it) → instance norm → SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub norm: Affine,
}

impl ConvNormAct {
    pub fn new(prefix: &str, cin: usize, cout: usize) -> Self {
        ConvNormAct {
            conv: Conv::new(format!("{prefix}.conv"), cin, cout, 3, false),
            norm: Affine::new(format!("{prefix}.norm"), cout),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.conv.init(store, rng)?;
        self.norm.init(store)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.param_count()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.instance_norm(tape, p, y)?;
        tape.silu(y)
    }
}
