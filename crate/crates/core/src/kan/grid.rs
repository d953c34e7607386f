use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform B-spline knot grid.
///
/// `intervals` equal cells cover `[lo, hi]`; the knot vector is extended by
/// `degree` cells on each side, giving `intervals + degree` basis functions
/// that sum to one everywhere on `[lo, hi]`. Inputs outside the range are
/// clamped to the nearest boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    pub intervals: usize,
    pub degree: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for SplineGrid {
    fn default() -> Self {
        SplineGrid {
            intervals: 5,
            degree: 3,
            lo: -1.0,
            hi: 1.0,
        }
    }
}

impl SplineGrid {
    pub fn new(intervals: usize, degree: usize, lo: f64, hi: f64) -> Result<Self> {
        let g = SplineGrid {
            intervals,
            degree,
            lo,
            hi,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.intervals == 0
            || !(self.lo < self.hi)
            || !self.lo.is_finite()
            || !self.hi.is_finite()
        {
            return Err(Error::InvalidArgument(format!("bad spline grid {self:?}")));
        }
        Ok(())
    }

    pub fn n_basis(&self) -> usize {
        self.intervals + self.degree
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.intervals as f64
    }

    /// Knot `i` of the extended vector, `0 ≤ i ≤ intervals + 2·degree`.
    pub fn knot(&self, i: usize) -> f64 {
        self.lo + (i as f64 - self.degree as f64) * self.step()
    }

    /// The `intervals + 1` knots spanning `[lo, hi]`.
    pub fn interior_knots(&self) -> Vec<f64> {
        (0..=self.intervals)
            .map(|i| self.knot(i + self.degree))
            .collect()
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    /// Writes all basis values at `x` into `vals` and their derivatives with
    /// respect to `x` into `derivs` (both of length [`n_basis`](Self::n_basis)).
    ///
    /// Derivatives vanish outside `[lo, hi]` where the input is clamped.
    pub fn eval(&self, x: f64, vals: &mut [f64], derivs: &mut [f64]) {
        let d = self.degree;
        vals.fill(0.0);
        derivs.fill(0.0);
        let inside = x >= self.lo && x <= self.hi;
        let xc = self.clamp(x);
        let h = self.step();
        let cell = (((xc - self.lo) / h).floor() as usize).min(self.intervals - 1);
        let span = cell + d;

        let n = self.nonzero_basis(span, xc, d);
        for (r, v) in n.iter().enumerate() {
            vals[span - d + r] = *v;
        }
        if d == 0 || !inside {
            return;
        }
        // dB_{i,d}/dx = (B_{i,d-1} - B_{i+1,d-1}) / h on a uniform grid
        let lower = self.nonzero_basis(span, xc, d - 1);
        for (r, v) in lower.iter().enumerate() {
            let i = span - (d - 1) + r;
            derivs[i - 1] -= v / h;
            derivs[i] += v / h;
        }
    }

    /// The `p + 1` degree-`p` basis functions that can be nonzero on knot span
    /// `span`, i.e. `B_{span-p}..=B_{span}` (Cox–de Boor, triangular form).
    fn nonzero_basis(&self, span: usize, x: f64, p: usize) -> Vec<f64> {
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.knot(span + 1 - j);
            right[j] = self.knot(span + j) - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }

    /// Basis values only.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let m = self.n_basis();
        let (mut v, mut d) = (vec![0.0; m], vec![0.0; m]);
        self.eval(x, &mut v, &mut d);
        v
    }
}
