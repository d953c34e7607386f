//! Raw slice kernels behind the tape ops. Shapes are validated by callers.

use super::tape::NormAffine;
use crate::error::{Error, Result};

/// C[m×n] = A[m×k]·B[k×n]
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// S[m×k] += G[m×n]·Bᵀ with B[k×n]
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], s: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            s[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// S[k×n] += Aᵀ·G with A[m×k], G[m×n]
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], s: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let srow = &mut s[p * n..(p + 1) * n];
            for (sv, gv) in srow.iter_mut().zip(grow) {
                *sv += av * gv;
            }
        }
    }
}

/// Output positions `ox` for which `ox*stride + k - pad` lies in `[0, len)`.
fn valid_range(len: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi_num = len + pad - 1;
    let hi = if hi_num < k {
        return (0, 0);
    } else {
        ((hi_num - k) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if k > padded || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 3 || w.len() != 4 || x[0] != w[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let (oh, ow) = match (
            out_extent(x[1], w[2], stride, pad),
            out_extent(x[2], w[3], stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidShape {
                    shape: w.to_vec(),
                    reason: format!(
                        "kernel larger than padded input {:?} (pad {pad}, stride {stride})",
                        x
                    ),
                })
            }
        };
        Ok(ConvGeom {
            cin: x[0],
            h: x[1],
            w: x[2],
            cout: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits every (output offset, input offset, weight index) triple row by row.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let s = self.stride;
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for ky in 0..self.kh {
                    let (oy0, oy1) = valid_range(self.h, self.oh, ky, s, self.pad);
                    for kx in 0..self.kw {
                        let (ox0, ox1) = valid_range(self.w, self.ow, kx, s, self.pad);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let widx = ((co * self.cin + ci) * self.kh + ky) * self.kw + kx;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - self.pad;
                            let out_row = (co * self.oh + oy) * self.ow;
                            let in_row = (ci * self.h + iy) * self.w;
                            f(widx, out_row, in_row, ox0, ox1, kx);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.cout * g.out_plane()];
    if let Some(b) = b {
        for co in 0..g.cout {
            out[co * g.out_plane()..(co + 1) * g.out_plane()].fill(b[co]);
        }
    }
    let (s, pad) = (g.stride, g.pad);
    g.for_each_tap(|widx, out_row, in_row, ox0, ox1, kx| {
        let wv = w[widx];
        if s == 1 {
            let off = in_row + ox0 + kx - pad;
            let src = &x[off..off + (ox1 - ox0)];
            for (o, xv) in out[out_row + ox0..out_row + ox1].iter_mut().zip(src) {
                *o += wv * xv;
            }
        } else {
            for ox in ox0..ox1 {
                out[out_row + ox] += wv * x[in_row + ox * s + kx - pad];
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward_input(g: &ConvGeom, dout: &[f64], w: &[f64], dx: &mut [f64]) {
    let (s, pad) = (g.stride, g.pad);
    g.for_each_tap(|widx, out_row, in_row, ox0, ox1, kx| {
        let wv = w[widx];
        for ox in ox0..ox1 {
            dx[in_row + ox * s + kx - pad] += wv * dout[out_row + ox];
        }
    });
}

pub(crate) fn conv2d_backward_weight(g: &ConvGeom, dout: &[f64], x: &[f64], dw: &mut [f64]) {
    let (s, pad) = (g.stride, g.pad);
    g.for_each_tap(|widx, out_row, in_row, ox0, ox1, kx| {
        let mut acc = 0.0;
        for ox in ox0..ox1 {
            acc += dout[out_row + ox] * x[in_row + ox * s + kx - pad];
        }
        dw[widx] += acc;
    });
}

pub(crate) fn bias_backward(dout: &[f64], db: &mut [f64], plane: usize) {
    for (c, slot) in db.iter_mut().enumerate() {
        *slot += dout[c * plane..(c + 1) * plane].iter().sum::<f64>();
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DwGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl DwGeom {
    pub fn new(x: &[usize], w: &[usize], pad: usize) -> Result<Self> {
        if x.len() != 3 || w.len() != 3 || x[0] != w[0] {
            return Err(Error::ShapeMismatch {
                op: "dwconv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let (oh, ow) = match (
            out_extent(x[1], w[1], 1, pad),
            out_extent(x[2], w[2], 1, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidShape {
                    shape: w.to_vec(),
                    reason: format!("kernel larger than padded input {:?} (pad {pad})", x),
                })
            }
        };
        Ok(DwGeom {
            c: x[0],
            h: x[1],
            w: x[2],
            kh: w[1],
            kw: w[2],
            pad,
            oh,
            ow,
        })
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Same contract as a dense conv whose weight is diagonal in channels.
    fn as_conv(&self) -> ConvGeom {
        ConvGeom {
            cin: 1,
            h: self.h,
            w: self.w,
            cout: 1,
            kh: self.kh,
            kw: self.kw,
            stride: 1,
            pad: self.pad,
            oh: self.oh,
            ow: self.ow,
        }
    }

    fn plane_slices(
        &self,
        c: usize,
    ) -> (
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
    ) {
        let ip = self.h * self.w;
        let op = self.out_plane();
        let kp = self.kh * self.kw;
        (
            c * ip..(c + 1) * ip,
            c * op..(c + 1) * op,
            c * kp..(c + 1) * kp,
        )
    }
}

pub(crate) fn dwconv_forward(g: &DwGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let single = g.as_conv();
    let mut out = Vec::with_capacity(g.c * g.out_plane());
    for c in 0..g.c {
        let (xi, _, wi) = g.plane_slices(c);
        let bias = b.map(|b| &b[c..c + 1]);
        out.extend(conv2d_forward(&single, &x[xi], &w[wi], bias));
    }
    out
}

pub(crate) fn dwconv_backward_input(g: &DwGeom, dout: &[f64], w: &[f64], dx: &mut [f64]) {
    let single = g.as_conv();
    for c in 0..g.c {
        let (xi, oi, wi) = g.plane_slices(c);
        conv2d_backward_input(&single, &dout[oi], &w[wi], &mut dx[xi]);
    }
}

pub(crate) fn dwconv_backward_weight(g: &DwGeom, dout: &[f64], x: &[f64], dw: &mut [f64]) {
    let single = g.as_conv();
    for c in 0..g.c {
        let (xi, oi, wi) = g.plane_slices(c);
        conv2d_backward_weight(&single, &dout[oi], &x[xi], &mut dw[wi]);
    }
}

pub(crate) type NormDims = (usize, usize, usize);

/// Normalizes along the middle extent of `(outer, len, inner)`.
/// Returns `(y, xhat, inv_std)`; `inv_std` is indexed by `o*inner + n`.
pub(crate) fn norm_forward(
    (outer, len, inner): NormDims,
    affine: NormAffine,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; outer * inner];
    let lf = len as f64;
    for o in 0..outer {
        for n in 0..inner {
            let at = |l: usize| (o * len + l) * inner + n;
            let mean = (0..len).map(|l| x[at(l)]).sum::<f64>() / lf;
            let var = (0..len).map(|l| (x[at(l)] - mean).powi(2)).sum::<f64>() / lf;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[o * inner + n] = inv;
            for l in 0..len {
                let k = at(l);
                let xh = (x[k] - mean) * inv;
                xhat[k] = xh;
                let (gm, bt) = match affine {
                    NormAffine::Axis => (gamma[l], beta[l]),
                    NormAffine::Outer => (gamma[o], beta[o]),
                };
                y[k] = gm * xh + bt;
            }
        }
    }
    (y, xhat, inv_std)
}

pub(crate) fn norm_backward_input(
    (outer, len, inner): NormDims,
    affine: NormAffine,
    dy: &[f64],
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    dx: &mut [f64],
) {
    let lf = len as f64;
    let mut dxhat = vec![0.0; len];
    for o in 0..outer {
        for n in 0..inner {
            let at = |l: usize| (o * len + l) * inner + n;
            let mut sum = 0.0;
            let mut sum_x = 0.0;
            for (l, d) in dxhat.iter_mut().enumerate() {
                let gm = match affine {
                    NormAffine::Axis => gamma[l],
                    NormAffine::Outer => gamma[o],
                };
                *d = dy[at(l)] * gm;
                sum += *d;
                sum_x += *d * xhat[at(l)];
            }
            let inv = inv_std[o * inner + n];
            for (l, d) in dxhat.iter().enumerate() {
                let k = at(l);
                dx[k] += inv / lf * (lf * d - sum - xhat[k] * sum_x);
            }
        }
    }
}

pub(crate) fn norm_backward_gamma(
    (outer, len, inner): NormDims,
    affine: NormAffine,
    dy: &[f64],
    xhat: &[f64],
    dg: &mut [f64],
) {
    for o in 0..outer {
        for l in 0..len {
            for n in 0..inner {
                let k = (o * len + l) * inner + n;
                let slot = match affine {
                    NormAffine::Axis => l,
                    NormAffine::Outer => o,
                };
                dg[slot] += dy[k] * xhat[k];
            }
        }
    }
}

pub(crate) fn norm_backward_beta(
    (outer, len, inner): NormDims,
    affine: NormAffine,
    dy: &[f64],
    db: &mut [f64],
) {
    for o in 0..outer {
        for l in 0..len {
            for n in 0..inner {
                let k = (o * len + l) * inner + n;
                let slot = match affine {
                    NormAffine::Axis => l,
                    NormAffine::Outer => o,
                };
                db[slot] += dy[k];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for len in 1..7 {
            for k in 0..4 {
                for stride in 1..3 {
                    for pad in 0..3 {
                        let Some(out) = out_extent(len, k + 1, stride, pad) else {
                            continue;
                        };
                        let expect: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - pad as isize;
                                i >= 0 && (i as usize) < len
                            })
                            .collect();
                        let (lo, hi) = valid_range(len, out, k, stride, pad);
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, expect, "len {len} k {k} s {stride} p {pad}");
                    }
                }
            }
        }
    }
}
