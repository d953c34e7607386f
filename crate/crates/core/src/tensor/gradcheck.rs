//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub rtol: f64,
    /// Check only this many randomly chosen elements across all inputs.
    pub sample: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            rtol: 1e-4,
            sample: None,
            seed: 0,
        }
    }
}

impl GradcheckOptions {
    pub fn with_rtol(rtol: f64) -> Self {
        GradcheckOptions {
            rtol,
            ..Default::default()
        }
    }
}

/// One compared gradient element.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checked: usize,
    pub rtol: f64,
    pub max_rel_error: f64,
    /// Element with the largest relative error.
    pub worst: Option<GradEntry>,
    pub failures: Vec<GradEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} elements, max rel error {:.3e} (rtol {:.0e})",
            self.checked, self.max_rel_error, self.rtol
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                ", worst input {} [{}]: analytic {:.6e} numeric {:.6e}",
                w.input, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Relative error `|a−n| / max(1e-8, |a|+|n|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function against fourth-order
/// central differences.
///
/// `f` receives a fresh tape and one [`Var`] per input and must return a
/// scalar. It is evaluated once with gradients and four times per checked element.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let flat: Vec<usize> = match opts.sample {
        Some(n) if n < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut s = sample(&mut rng, total, n).into_vec();
            s.sort_unstable();
            s
        }
        _ => (0..total).collect(),
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradcheckReport {
        checked: 0,
        rtol: opts.rtol,
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
    };
    for g in flat {
        let (input, index) = locate(inputs, g);
        let orig = work[input].data()[index];
        let mut at = |offset: f64| -> Result<f64> {
            work[input].data_mut()[index] = orig + offset * opts.step;
            eval(&work)
        };
        let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
        work[input].data_mut()[index] = orig;

        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * opts.step);
        let a = analytic[input][index];
        let entry = GradEntry {
            input,
            index,
            analytic: a,
            numeric,
            rel_error: rel_error(a, numeric),
        };
        report.checked += 1;
        if report.worst.is_none() || entry.rel_error > report.max_rel_error {
            report.max_rel_error = entry.rel_error;
            report.worst = Some(entry.clone());
        }
        if entry.rel_error > opts.rtol {
            report.failures.push(entry);
        }
    }
    Ok(report)
}

fn locate(inputs: &[Tensor], mut g: usize) -> (usize, usize) {
    for (i, t) in inputs.iter().enumerate() {
        if g < t.len() {
            return (i, g);
        }
        g -= t.len();
    }
    unreachable!("flat index within total")
}
