//! Pixel-wise cross-entropy, focal loss, and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of lesion pixels; background pixels get `1 − alpha`. The value
    /// `1` switches class weighting off (every pixel weighted 1).
    pub alpha: f64,
    pub gamma: f64,
    pub use_focal: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            gamma: 2.0,
            use_focal: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0)
            || !(self.gamma >= 0.0)
            || !self.gamma.is_finite()
        {
            return Err(Error::Config(format!(
                "focal loss needs alpha in (0, 1] and gamma ≥ 0, got alpha {} gamma {}",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }

    /// `α_t` for a pixel of class `class`.
    pub fn alpha_t(&self, class: usize) -> f64 {
        if self.alpha == 1.0 {
            1.0
        } else if class == 1 {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }
}

/// One-hot `n_classes×H×W` target from an `H×W` mask of class indices.
pub fn one_hot(mask: &Tensor, n_classes: usize) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "mask must be H×W".into(),
        });
    }
    let hw = mask.len();
    let mut data = vec![0.0; n_classes * hw];
    for (i, &v) in mask.data().iter().enumerate() {
        let c = v as usize;
        if v != c as f64 || c >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "mask value {v} is not a class index"
            )));
        }
        data[c * hw + i] = 1.0;
    }
    Tensor::new(vec![n_classes, s[0], s[1]], data)
}

fn check_target(tape: &Tape, logits: Var, target: &Tensor) -> Result<()> {
    let s = tape.shape(logits);
    if s.len() != 3 || target.shape() != s {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: s.to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let hw = s[1] * s[2];
    let t = target.data();
    for i in 0..hw {
        let mut sum = 0.0;
        for c in 0..s[0] {
            let v = t[c * hw + i];
            if v != 0.0 && v != 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "target value {v} is not one-hot"
                )));
            }
            sum += v;
        }
        if sum != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "target pixel {i} is not one-hot"
            )));
        }
    }
    Ok(())
}

/// `p_t` per pixel (`H×W`): the softmax probability of the true class.
fn true_class_prob(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    let probs = tape.softmax(logits, 0)?;
    let y = tape.constant(target.clone());
    let picked = tape.mul(probs, y)?;
    tape.sum_axis(picked, 0)
}

/// `−(1/N)·Σ_i log ŷ_{i,true}` with `ŷ = softmax` over the class axis.
pub fn ce_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    check_target(tape, logits, target)?;
    let pt = true_class_prob(tape, logits, target)?;
    let lp = tape.ln_clamped(pt, LOG_FLOOR)?;
    let m = tape.mean(lp)?;
    tape.neg(m)
}

/// Mean of `−α_t (1 − p_t)^γ log p_t` given `p_t` and `α_t` per pixel.
pub fn focal_from_pt(tape: &mut Tape, pt: Var, alpha_t: &Tensor, gamma: f64) -> Result<Var> {
    if tape.shape(pt) != alpha_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "focal_loss",
            lhs: tape.shape(pt).to_vec(),
            rhs: alpha_t.shape().to_vec(),
        });
    }
    let lp = tape.ln_clamped(pt, LOG_FLOOR)?;
    let one_minus = tape.neg(pt)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    // rounding can leave 1 − p_t a hair below zero
    let one_minus = tape.relu(one_minus)?;
    let modulation = tape.pow_scalar(one_minus, gamma)?;
    let a = tape.constant(alpha_t.clone());
    let w = tape.mul(modulation, a)?;
    let terms = tape.mul(w, lp)?;
    let m = tape.mean(terms)?;
    tape.neg(m)
}

/// Focal loss of `n_classes×H×W` logits against a one-hot target.
pub fn focal_loss(tape: &mut Tape, logits: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
    check_target(tape, logits, target)?;
    let pt = true_class_prob(tape, logits, target)?;
    let s = target.shape();
    let hw = s[1] * s[2];
    let alpha: Vec<f64> = (0..hw)
        .map(|i| {
            let class = (0..s[0])
                .find(|&c| target.data()[c * hw + i] == 1.0)
                .unwrap_or(0);
            cfg.alpha_t(class)
        })
        .collect();
    let alpha = Tensor::new(vec![s[1], s[2]], alpha)?;
    focal_from_pt(tape, pt, &alpha, cfg.gamma)
}

/// `ce_loss + focal_loss`, or `ce_loss` alone when `use_focal` is off.
pub fn total_loss(tape: &mut Tape, logits: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let ce = ce_loss(tape, logits, target)?;
    if !cfg.use_focal {
        return Ok(ce);
    }
    let fl = focal_loss(tape, logits, target, cfg)?;
    tape.add(ce, fl)
}
