use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::SplineGrid;
use crate::error::{Error, Result};
use crate::params::{init, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Shared settings for every KAN layer in a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KanConfig {
    pub grid: SplineGrid,
    /// Adds `w_b·silu(x)` next to the spline on every edge.
    pub use_base: bool,
}

impl Default for KanConfig {
    fn default() -> Self {
        KanConfig {
            grid: SplineGrid::default(),
            use_base: true,
        }
    }
}

/// One univariate edge function `φ(x) = w_b·silu(x) + Σ_m c_m·B_m(clamp(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineFunction {
    pub grid: SplineGrid,
    pub coeffs: Vec<f64>,
    pub base_weight: f64,
}

impl SplineFunction {
    pub fn zero(grid: SplineGrid) -> Self {
        SplineFunction {
            grid,
            coeffs: vec![0.0; grid.n_basis()],
            base_weight: 0.0,
        }
    }

    /// Scalar evaluation, without a tape.
    pub fn eval(&self, x: f64) -> f64 {
        let b = self.grid.basis(x);
        let spline: f64 = b.iter().zip(&self.coeffs).map(|(b, c)| b * c).sum();
        self.base_weight * silu(x) + spline
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Applies one spline function elementwise to `x`, differentiable in `x`,
/// `coeffs` (length `n_basis`) and `base_weight` (a scalar, if present).
pub fn spline_eval(
    tape: &mut Tape,
    grid: &SplineGrid,
    x: Var,
    coeffs: Var,
    base_weight: Option<Var>,
) -> Result<Var> {
    let m = grid.n_basis();
    if tape.value(coeffs).len() != m {
        return Err(Error::ShapeMismatch {
            op: "spline_eval",
            lhs: tape.shape(coeffs).to_vec(),
            rhs: vec![m],
        });
    }
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).len();
    let col = tape.reshape(x, vec![n, 1])?;
    let basis = tape.expand(col, m, |v, vals, d| grid.eval(v, vals, d))?;
    let c = tape.reshape(coeffs, vec![m, 1])?;
    let mut y = tape.matmul(basis, c)?;
    if let Some(w) = base_weight {
        let s = tape.silu(col)?;
        let w = tape.reshape(w, vec![1, 1])?;
        let b = tape.matmul(s, w)?;
        y = tape.add(y, b)?;
    }
    tape.reshape(y, shape)
}

/// KAN layer mapping `n_in` inputs to `n_out` outputs through an
/// `n_out × n_in` grid of [`SplineFunction`]s.
///
/// Parameters (in a [`ParamStore`]):
/// - `{prefix}.coeffs`: `[n_in·M, n_out]`, where rows `i·M..(i+1)·M` of
///   column `j` are the coefficients of `φ_{j,i}`
/// - `{prefix}.base`: `[n_in, n_out]` base weights (only with `use_base`)
#[derive(Clone, Debug, PartialEq)]
pub struct KanLayer {
    pub prefix: String,
    pub n_in: usize,
    pub n_out: usize,
    pub config: KanConfig,
}

impl KanLayer {
    pub fn new(prefix: impl Into<String>, n_in: usize, n_out: usize, config: KanConfig) -> Self {
        KanLayer {
            prefix: prefix.into(),
            n_in,
            n_out,
            config,
        }
    }

    pub fn coeffs_name(&self) -> String {
        format!("{}.coeffs", self.prefix)
    }

    pub fn base_name(&self) -> String {
        format!("{}.base", self.prefix)
    }

    fn m(&self) -> usize {
        self.config.grid.n_basis()
    }

    /// Coefficients ~ U(±0.1/√M); base weights ~ U(±1/√n_in).
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let m = self.m();
        let scale = 0.1 / (m as f64).sqrt();
        store.insert(
            self.coeffs_name(),
            init::uniform(&[self.n_in * m, self.n_out], scale, rng),
        )?;
        if self.config.use_base {
            let s = 1.0 / (self.n_in as f64).sqrt();
            store.insert(
                self.base_name(),
                init::uniform(&[self.n_in, self.n_out], s, rng),
            )?;
        }
        Ok(())
    }

    /// Registers an all-zero layer.
    pub fn init_zeros(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(
            self.coeffs_name(),
            Tensor::zeros(&[self.n_in * self.m(), self.n_out]),
        )?;
        if self.config.use_base {
            store.insert(self.base_name(), Tensor::zeros(&[self.n_in, self.n_out]))?;
        }
        Ok(())
    }

    /// The edge function `φ_{j,i}` read from `store`.
    pub fn function(&self, store: &ParamStore, j: usize, i: usize) -> Result<SplineFunction> {
        let m = self.m();
        let c = store.get(&self.coeffs_name())?.data();
        let coeffs = (0..m).map(|k| c[(i * m + k) * self.n_out + j]).collect();
        let base_weight = if self.config.use_base {
            store.get(&self.base_name())?.data()[i * self.n_out + j]
        } else {
            0.0
        };
        Ok(SplineFunction {
            grid: self.config.grid,
            coeffs,
            base_weight,
        })
    }

    /// Overwrites `φ_{j,i}` in `store`.
    pub fn set_function(
        &self,
        store: &mut ParamStore,
        j: usize,
        i: usize,
        f: &SplineFunction,
    ) -> Result<()> {
        let m = self.m();
        if f.coeffs.len() != m {
            return Err(Error::InvalidArgument(format!(
                "spline has {} coefficients, layer expects {m}",
                f.coeffs.len()
            )));
        }
        let n_out = self.n_out;
        let c = store.get_mut(&self.coeffs_name())?.data_mut();
        for (k, v) in f.coeffs.iter().enumerate() {
            c[(i * m + k) * n_out + j] = *v;
        }
        if self.config.use_base {
            store.get_mut(&self.base_name())?.data_mut()[i * n_out + j] = f.base_weight;
        }
        Ok(())
    }

    /// `x: T×n_in → T×n_out`, output `j` of row `t` being `Σ_i φ_{j,i}(x[t,i])`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.n_in {
            return Err(Error::ShapeMismatch {
                op: "kan_layer",
                lhs: s,
                rhs: vec![0, self.n_in],
            });
        }
        let grid = self.config.grid;
        let basis = tape.expand(x, self.m(), |v, vals, d| grid.eval(v, vals, d))?;
        let mut y = tape.matmul(basis, p.get(&self.coeffs_name()))?;
        if self.config.use_base {
            let a = tape.silu(x)?;
            let b = tape.matmul(a, p.get(&self.base_name()))?;
            y = tape.add(y, b)?;
        }
        Ok(y)
    }
}

/// Composes KAN layers with no activation in between.
///
/// `x` is either a single vector `[n_0]` or a batch `[T, n_0]`; the result
/// has the matching rank.
pub fn kan_forward(tape: &mut Tape, p: &Bound, layers: &[KanLayer], x: Var) -> Result<Var> {
    for w in layers.windows(2) {
        if w[0].n_out != w[1].n_in {
            return Err(Error::ShapeMismatch {
                op: "kan_forward",
                lhs: vec![w[0].n_in, w[0].n_out],
                rhs: vec![w[1].n_in, w[1].n_out],
            });
        }
    }
    let shape = tape.shape(x).to_vec();
    let vector = shape.len() == 1;
    let mut h = if vector {
        tape.reshape(x, vec![1, shape[0]])?
    } else {
        x
    };
    for layer in layers {
        h = layer.forward(tape, p, h)?;
    }
    if vector {
        let n = tape.value(h).len();
        h = tape.reshape(h, vec![n])?;
    }
    Ok(h)
}
