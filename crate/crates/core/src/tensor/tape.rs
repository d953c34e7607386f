use super::kernels;
use super::value::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum NormAffine {
    /// gamma/beta indexed along the normalized axis (layer norm).
    Axis,
    /// gamma/beta indexed along the outer axis (instance norm on C×H×W).
    Outer,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Silu(Var),
    Relu(Var),
    Tanh(Var),
    LnClamped {
        x: Var,
        floor: f64,
    },
    PowScalar {
        x: Var,
        p: f64,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    DwConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        affine: NormAffine,
        outer: usize,
        len: usize,
        inner: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        len_in: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Expand {
        x: Var,
        m: usize,
        deriv: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            ScalarMul(a, _)
            | AddScalar(a)
            | Transpose(a)
            | Reshape(a)
            | Silu(a)
            | Relu(a)
            | Tanh(a)
            | Sum(a)
            | Upsample2(a) => vec![*a],
            Softmax { x, .. }
            | LnClamped { x, .. }
            | PowScalar { x, .. }
            | SumAxis { x, .. }
            | MaxPool2 { x, .. }
            | Slice { x, .. }
            | GatherRows { x, .. }
            | Expand { x, .. } => vec![*x],
            Conv2d { x, w, b, .. } | DwConv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { parts, .. } => parts.clone(),
            ScaleRows { x, s } => vec![*x, *s],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode gradient tape.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// `backward` walks the nodes once in reverse and may only run once per tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required one and
    /// the loss depended on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient data for `v`, or zeros of `len` when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match self.get(v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; len],
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match g {
                    Some(d) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), d).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Accumulate `contrib` into the gradient slot of `v`, skipping
        // inputs that do not require one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| axpy(s, g, 1.0));
                acc(*b, &mut |s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| axpy(s, g, 1.0));
                acc(*b, &mut |s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * av[k];
                    }
                });
            }
            Op::ScalarMul(a, c) => acc(*a, &mut |s| axpy(s, g, *c)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |s| axpy(s, g, 1.0)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.val(*a), self.val(*b));
                // dA = dC·Bᵀ
                acc(*a, &mut |s| kernels::matmul_nt_acc(g, bv, s, m, n, k));
                // dB = Aᵀ·dC
                acc(*b, &mut |s| kernels::matmul_tn_acc(av, g, s, m, k, n));
            }
            Op::Transpose(a) => {
                let sa = self.shape(*a);
                let (r, c) = (sa[0], sa[1]);
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for n in 0..inner {
                            let base = o * len * inner + n;
                            let mut dot = 0.0;
                            for l in 0..len {
                                let k = base + l * inner;
                                dot += g[k] * out[k];
                            }
                            for l in 0..len {
                                let k = base + l * inner;
                                s[k] += out[k] * (g[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let av = self.val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        let sig = sigmoid(av[k]);
                        s[k] += g[k] * sig * (1.0 + av[k] * (1.0 - sig));
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        if av[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            Op::LnClamped { x, floor } => {
                let xv = self.val(*x);
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        if xv[k] > *floor {
                            s[k] += g[k] / xv[k];
                        }
                    }
                });
            }
            Op::PowScalar { x, p } => {
                let xv = self.val(*x);
                let p = *p;
                acc(*x, &mut |s| {
                    if p == 0.0 {
                        return;
                    }
                    for k in 0..s.len() {
                        let d = if xv[k] == 0.0 {
                            if p == 1.0 {
                                1.0
                            } else {
                                0.0
                            }
                        } else {
                            p * xv[k].powf(p - 1.0)
                        };
                        s[k] += g[k] * d;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| {
                for v in s.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for l in 0..len {
                            for n in 0..inner {
                                s[(o * len + l) * inner + n] += g[o * inner + n];
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let geom = kernels::ConvGeom::new(self.shape(*x), self.shape(*w), *stride, *pad)
                    .expect("validated in forward");
                let (xv, wv) = (self.val(*x), self.val(*w));
                acc(*x, &mut |s| kernels::conv2d_backward_input(&geom, g, wv, s));
                acc(*w, &mut |s| {
                    kernels::conv2d_backward_weight(&geom, g, xv, s)
                });
                if let Some(b) = b {
                    acc(*b, &mut |s| kernels::bias_backward(g, s, geom.out_plane()));
                }
            }
            Op::DwConv2d { x, w, b, pad } => {
                let geom = kernels::DwGeom::new(self.shape(*x), self.shape(*w), *pad)
                    .expect("validated in forward");
                let (xv, wv) = (self.val(*x), self.val(*w));
                acc(*x, &mut |s| kernels::dwconv_backward_input(&geom, g, wv, s));
                acc(*w, &mut |s| {
                    kernels::dwconv_backward_weight(&geom, g, xv, s)
                });
                if let Some(b) = b {
                    acc(*b, &mut |s| kernels::bias_backward(g, s, geom.out_plane()));
                }
            }
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
            } => {
                let dims = (*outer, *len, *inner);
                let gv = self.val(*gamma);
                acc(*x, &mut |s| {
                    kernels::norm_backward_input(dims, *affine, g, gv, xhat, inv_std, s)
                });
                acc(*gamma, &mut |s| {
                    kernels::norm_backward_gamma(dims, *affine, g, xhat, s)
                });
                acc(*beta, &mut |s| {
                    kernels::norm_backward_beta(dims, *affine, g, s)
                });
            }
            Op::MaxPool2 { x, argmax } => acc(*x, &mut |s| {
                for (k, &src) in argmax.iter().enumerate() {
                    s[src] += g[k];
                }
            }),
            Op::Upsample2(x) => {
                let sx = self.shape(*x);
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                acc(*x, &mut |s| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                s[(ch * h + y / 2) * w + xx / 2] +=
                                    g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Concat {
                parts,
                outer,
                lens,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (p, &len) in parts.iter().zip(lens) {
                    acc(*p, &mut |s| {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            axpy(
                                &mut s[dst..dst + len * inner],
                                &g[src..src + len * inner],
                                1.0,
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice {
                x,
                outer,
                len_in,
                inner,
                start,
                len,
            } => acc(*x, &mut |s| {
                for o in 0..*outer {
                    let dst = (o * len_in + start) * inner;
                    let src = o * len * inner;
                    axpy(
                        &mut s[dst..dst + len * inner],
                        &g[src..src + len * inner],
                        1.0,
                    );
                }
            }),
            Op::GatherRows { x, idx } => {
                let c = self.shape(*x)[1];
                acc(*x, &mut |s| {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut s[src * c..(src + 1) * c], &g[r * c..(r + 1) * c], 1.0);
                    }
                });
            }
            Op::ScaleRows { x, s: sv } => {
                let c = self.shape(*x)[1];
                let (xv, scale) = (self.val(*x), self.val(*sv));
                acc(*x, &mut |s| {
                    for (r, &f) in scale.iter().enumerate() {
                        axpy(&mut s[r * c..(r + 1) * c], &g[r * c..(r + 1) * c], f);
                    }
                });
                acc(*sv, &mut |s| {
                    for (r, slot) in s.iter_mut().enumerate() {
                        *slot += dot(&g[r * c..(r + 1) * c], &xv[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Expand { x, m, deriv } => acc(*x, &mut |s| {
                for (k, slot) in s.iter_mut().enumerate() {
                    *slot += dot(&g[k * m..(k + 1) * m], &deriv[k * m..(k + 1) * m]);
                }
            }),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
