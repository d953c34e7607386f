use crate::error::{Error, Result};

/// Cosine annealing from `lr_max` at `t_cur = 0` to `lr_min` at `t_cur = t_max`.
pub fn cosine_lr(t_cur: usize, t_max: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if t_max == 0 || t_cur > t_max {
        return Err(Error::InvalidArgument(format!(
            "scheduler position {t_cur} outside [0, {t_max}]"
        )));
    }
    let phase = std::f64::consts::PI * t_cur as f64 / t_max as f64;
    let span = lr_max - lr_min;
    // Anchored at the nearer endpoint so both endpoints come out exact.
    Ok(if 2 * t_cur <= t_max {
        lr_max - 0.5 * span * (1.0 - phase.cos())
    } else {
        lr_min + 0.5 * span * (1.0 + phase.cos())
    })
}
