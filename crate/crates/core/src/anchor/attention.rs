use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Scaled dot-product attention with learned query/key/value/output
/// projections (no biases, no positional encoding).
///
/// Parameters `{prefix}.wq|wk|wv|wo`, each `[dim, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
}

impl Attention {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            prefix: prefix.into(),
            dim,
            heads,
        })
    }

    pub fn name(&self, w: &str) -> String {
        format!("{}.{w}", self.prefix)
    }

    pub fn param_names(&self) -> [String; 4] {
        ["wq", "wk", "wv", "wo"].map(|w| self.name(w))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let std = 1.0 / (self.dim as f64).sqrt();
        for n in self.param_names() {
            store.insert(n, init::normal(&[self.dim, self.dim], std, rng))?;
        }
        Ok(())
    }

    /// Zeroes the value and output projections in `store`.
    pub fn zero_value_path(&self, store: &mut ParamStore) -> Result<()> {
        for w in ["wv", "wo"] {
            store.get_mut(&self.name(w))?.data_mut().fill(0.0);
        }
        Ok(())
    }

    /// Attention of `queries: Nq×C` over `context: Nk×C`.
    ///
    /// Returns the projected output (`Nq×C`) and the row-stochastic attention
    /// matrix (`Nq×Nk`, averaged over heads).
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        queries: Var,
        context: Var,
    ) -> Result<(Var, Var)> {
        for v in [queries, context] {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != self.dim {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    lhs: s.to_vec(),
                    rhs: vec![0, self.dim],
                });
            }
        }
        let q = tape.matmul(queries, p.get(&self.name("wq")))?;
        let k = tape.matmul(context, p.get(&self.name("wk")))?;
        let v = tape.matmul(context, p.get(&self.name("wv")))?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut outs = Vec::with_capacity(self.heads);
        let mut attn_sum: Option<Var> = None;
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 1, h * dh, dh)?,
                    tape.slice(k, 1, h * dh, dh)?,
                    tape.slice(v, 1, h * dh, dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scalar_mul(scores, scale)?;
            let a = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(a, vh)?);
            attn_sum = Some(match attn_sum {
                None => a,
                Some(s) => tape.add(s, a)?,
            });
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        let out = tape.matmul(o, p.get(&self.name("wo")))?;
        let mut attn = attn_sum.expect("at least one head");
        if self.heads > 1 {
            attn = tape.scalar_mul(attn, 1.0 / self.heads as f64)?;
        }
        Ok((out, attn))
    }
}

/// Self-attention over `tokens: N×C`; returns `(N×C output, N×N attention)`.
pub fn self_attention(
    tape: &mut Tape,
    p: &Bound,
    attn: &Attention,
    tokens: Var,
) -> Result<(Var, Var)> {
    attn.forward(tape, p, tokens, tokens)
}

/// Attention received by each token: the column means of a row-stochastic
/// `N×N` matrix. The scores sum to one.
pub fn saliency_scores(tape: &mut Tape, attn: Var) -> Result<Var> {
    let s = tape.shape(attn).to_vec();
    if s.len() != 2 {
        return Err(Error::InvalidShape {
            shape: s,
            reason: "saliency expects an attention matrix".into(),
        });
    }
    let (rows, cols) = (s[0], s[1]);
    let mean_row = tape.constant(Tensor::full(&[1, rows], 1.0 / rows as f64));
    let m = tape.matmul(mean_row, attn)?;
    tape.reshape(m, vec![cols])
}
