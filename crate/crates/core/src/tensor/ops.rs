//! Differentiable primitives recorded on a [`Tape`].
//!
//! Only scalar broadcasting is supported. Every op validates shapes up front
//! and rejects non-finite results.

use super::kernels::{self, ConvGeom, DwGeom};
use super::tape::{sigmoid, NormAffine, Op, Tape, Var};
use super::value::{axis_split, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

impl Tape {
    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape checked")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    /// Elementwise sum. A single-element operand is broadcast as a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        match self.scalar_side(a, b) {
            Some((t, s)) => {
                if self.requires_grad(s) {
                    let n = self.value(t).len();
                    let ones = self.constant(Tensor::ones(self.shape(t)));
                    let sb = self.broadcast_scalar(s, ones, n)?;
                    return self.add(t, sb);
                }
                let v = self.value(s).item();
                self.add_scalar(t, v)
            }
            None => {
                same_shape("add", self.shape(a), self.shape(b))?;
                let y = self.zip_with(a, b, |x, y| x + y);
                self.push("add", y, Op::Add(a, b))
            }
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).len() == 1 && self.value(a).len() > 1 {
            let nb = self.scalar_mul(b, -1.0)?;
            return self.add(a, nb);
        }
        if self.value(a).len() == 1 && self.value(b).len() > 1 {
            let nb = self.scalar_mul(b, -1.0)?;
            return self.add(nb, a);
        }
        same_shape("sub", self.shape(a), self.shape(b))?;
        let y = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some((t, s)) = self.scalar_side(a, b) {
            let ones = self.constant(Tensor::ones(self.shape(t)));
            let n = self.value(t).len();
            let sb = self.broadcast_scalar(s, ones, n)?;
            return self.mul(t, sb);
        }
        same_shape("mul", self.shape(a), self.shape(b))?;
        let y = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", y, Op::Mul(a, b))
    }

    fn scalar_side(&self, a: Var, b: Var) -> Option<(Var, Var)> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if lb == 1 && la > 1 {
            Some((a, b))
        } else if la == 1 && lb > 1 {
            Some((b, a))
        } else {
            None
        }
    }

    /// Scalar `s` expanded to the shape of `ones` (differentiable in `s`).
    fn broadcast_scalar(&mut self, s: Var, ones: Var, n: usize) -> Result<Var> {
        let shape = self.shape(ones).to_vec();
        let col = self.reshape(ones, vec![n, 1])?;
        let s11 = self.reshape(s, vec![1, 1])?;
        let y = self.matmul(col, s11)?;
        self.reshape(y, shape)
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        let y = self.map(a, |x| x * c);
        self.push("scalar_mul", y, Op::ScalarMul(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let y = self.map(a, |x| x + c);
        self.push("add_scalar", y, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scalar_mul(a, -1.0)
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let y = Tensor::new(vec![m, n], data)?;
        self.push("matmul", y, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "transpose expects a matrix".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let av = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av[i * c + j];
            }
        }
        let y = Tensor::new(vec![c, r], data)?;
        self.push("transpose", y, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let y = self.value(a).clone().reshape(shape)?;
        self.push("reshape", y, Op::Reshape(a))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} for rank {}",
                shape.len()
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut y = vec![0.0; xv.len()];
        for o in 0..outer {
            for n in 0..inner {
                let base = o * len * inner + n;
                let max = (0..len)
                    .map(|l| xv[base + l * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (xv[base + l * inner] - max).exp();
                    y[base + l * inner] = e;
                    z += e;
                }
                for l in 0..len {
                    y[base + l * inner] /= z;
                }
            }
        }
        let y = Tensor::new(shape, y)?;
        self.push(
            "softmax",
            y,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        )
    }

    /// `x·sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let y = self.map(x, |v| v * sigmoid(v));
        self.push("silu", y, Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.map(x, |v| v.max(0.0));
        self.push("relu", y, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let y = self.map(x, f64::tanh);
        self.push("tanh", y, Op::Tanh(x))
    }

    /// `ln(max(x, floor))`; no gradient below the floor.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let y = self.map(x, |v| v.max(floor).ln());
        self.push("ln_clamped", y, Op::LnClamped { x, floor })
    }

    /// `x^p` for nonnegative `x`.
    pub fn pow_scalar(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("pow_scalar needs x ≥ 0".into()));
        }
        let y = self.map(x, |v| v.powf(p));
        self.push("pow_scalar", y, Op::PowScalar { x, p })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scalar_mul(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!("sum_axis axis {axis}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for n in 0..inner {
                    y[o * inner + n] += xv[(o * len + l) * inner + n];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let y = Tensor::new(out_shape, y)?;
        self.push(
            "sum_axis",
            y,
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            },
        )
    }

    /// Cross-correlation of a `C_in×H×W` map with `C_out×C_in×kH×kW` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            same_shape("conv2d bias", self.shape(b), &[geom.cout])?;
        }
        let data = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let y = Tensor::new(vec![geom.cout, geom.oh, geom.ow], data)?;
        self.push(
            "conv2d",
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Depthwise cross-correlation, one `kH×kW` kernel per channel, stride 1.
    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let geom = DwGeom::new(self.shape(x), self.shape(w), pad)?;
        if let Some(b) = b {
            same_shape("dwconv2d bias", self.shape(b), &[geom.c])?;
        }
        let data = kernels::dwconv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let y = Tensor::new(vec![geom.c, geom.oh, geom.ow], data)?;
        self.push("dwconv2d", y, Op::DwConv2d { x, w, b, pad })
    }

    /// Normalizes the last axis: `gamma·(x−μ)/√(σ²+eps) + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = shape.len() - 1;
        let dims = axis_split(&shape, axis);
        same_shape("layer_norm gamma", self.shape(gamma), &[dims.1])?;
        same_shape("layer_norm beta", self.shape(beta), &[dims.1])?;
        self.norm(x, gamma, beta, eps, dims, NormAffine::Axis, "layer_norm")
    }

    /// Per-channel normalization of a `C×H×W` map over its spatial extent.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::InvalidShape {
                shape,
                reason: "instance_norm expects C×H×W".into(),
            });
        }
        same_shape("instance_norm gamma", self.shape(gamma), &[shape[0]])?;
        same_shape("instance_norm beta", self.shape(beta), &[shape[0]])?;
        let dims = (shape[0], shape[1] * shape[2], 1);
        self.norm(
            x,
            gamma,
            beta,
            eps,
            dims,
            NormAffine::Outer,
            "instance_norm",
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        (outer, len, inner): (usize, usize, usize),
        affine: NormAffine,
        name: &'static str,
    ) -> Result<Var> {
        let (y, xhat, inv_std) = kernels::norm_forward(
            (outer, len, inner),
            affine,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let y = Tensor::new(self.shape(x).to_vec(), y)?;
        self.push(
            name,
            y,
            Op::Norm {
                x,
                gamma,
                beta,
                affine,
                outer,
                len,
                inner,
                xhat,
                inv_std,
            },
        )
    }

    /// 2×2 max pooling with stride 2; ties pick the first position in row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "max_pool2 expects C×H×W with even H, W".into(),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (ch * h + 2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let k = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if xv[k] > xv[best] {
                            best = k;
                        }
                    }
                    data.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let y = Tensor::new(vec![c, oh, ow], data)?;
        self.push("max_pool2", y, Op::MaxPool2 { x, argmax })
    }

    /// 2× nearest-neighbor upsampling of a `C×H×W` map.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "upsample2 expects C×H×W".into(),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut data = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(ch * 2 * h + y) * 2 * w + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let y = Tensor::new(vec![c, 2 * h, 2 * w], data)?;
        self.push("upsample2", y, Op::Upsample2(x))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!("concat axis {axis}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let total: usize = lens.iter().sum();
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (&p, &len) in parts.iter().zip(&lens) {
            let pv = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&pv[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let mut shape = first;
        shape[axis] = total;
        let y = Tensor::new(shape, data)?;
        self.push(
            "concat",
            y,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                lens,
                inner,
            },
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) of axis {axis} in {shape:?}",
                start + len
            )));
        }
        let (outer, len_in, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * len_in + start) * inner;
            data.extend_from_slice(&xv[src..src + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let y = Tensor::new(out_shape, data)?;
        self.push(
            "slice",
            y,
            Op::Slice {
                x,
                outer,
                len_in,
                inner,
                start,
                len,
            },
        )
    }

    /// Rows `idx` of an `N×C` matrix. The index choice itself carries no gradient.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows {idx:?} from {s:?}"
            )));
        }
        let c = s[1];
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let y = Tensor::new(vec![idx.len(), c], data)?;
        self.push(
            "gather_rows",
            y,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Multiplies row `i` of a `k×C` matrix by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.value(s).len() != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: sx,
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = sx[1];
        let sv = self.value(s).data();
        let xv = self.value(x).data();
        let data = xv.iter().enumerate().map(|(k, v)| v * sv[k / c]).collect();
        let y = Tensor::new(sx, data)?;
        self.push("scale_rows", y, Op::ScaleRows { x, s })
    }

    /// Expands every element of `x` into `m` features with known derivatives.
    ///
    /// `f(v, values, derivs)` fills `m` feature values and their derivatives
    /// with respect to `v`. The result has shape `[..., last·m]`.
    pub fn expand(
        &mut self,
        x: Var,
        m: usize,
        f: impl Fn(f64, &mut [f64], &mut [f64]),
    ) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let xv = self.value(x).data();
        let mut values = vec![0.0; xv.len() * m];
        let mut deriv = vec![0.0; xv.len() * m];
        for (k, &v) in xv.iter().enumerate() {
            f(
                v,
                &mut values[k * m..(k + 1) * m],
                &mut deriv[k * m..(k + 1) * m],
            );
        }
        *shape.last_mut().expect("rank ≥ 1") *= m;
        let y = Tensor::new(shape, values)?;
        self.push("expand", y, Op::Expand { x, m, deriv })
    }
}

/// Indices of the `k` largest scores, ordered by descending score with ties
/// broken by ascending index.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::TopKRange { k, n });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "topk_indices" });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < n {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    Ok(idx)
}

impl Tape {
    /// Stacks a length-`n` vector into a `rows×n` matrix (differentiable).
    pub fn repeat_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let n = self.value(v).len();
        let ones = self.constant(Tensor::ones(&[rows, 1]));
        let row = self.reshape(v, vec![1, n])?;
        self.matmul(ones, row)
    }
}
