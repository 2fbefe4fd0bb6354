use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{axis_blocks, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
    Exp,
    Log,
    Sin,
    Cos,
    Abs,
    Softplus,
    /// Huber-style smooth L1 with transition at 1.
    SmoothL1,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Abs => "abs",
            Unary::Softplus => "softplus",
            Unary::SmoothL1 => "smooth_l1",
        }
    }

    pub(crate) fn eval<F: Real>(self, x: F) -> F {
        let one = F::one();
        match self {
            Unary::Neg => -x,
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(F::zero()),
            Unary::Gelu => {
                let inner = F::lit(GELU_K) * (x + F::lit(0.044715) * x * x * x);
                F::lit(0.5) * x * (one + inner.tanh())
            }
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Abs => x.abs(),
            Unary::Softplus => x.max(F::zero()) + (-x.abs()).exp().ln_1p(),
            Unary::SmoothL1 => {
                let a = x.abs();
                if a < one {
                    F::lit(0.5) * x * x
                } else {
                    a - F::lit(0.5)
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`.
    pub(crate) fn deriv<F: Real>(self, x: F, y: F) -> F {
        let one = F::one();
        let zero = F::zero();
        match self {
            Unary::Neg => -one,
            Unary::Tanh => one - y * y,
            Unary::Sigmoid => y * (one - y),
            Unary::Relu => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            Unary::Gelu => {
                let k = F::lit(GELU_K);
                let c = F::lit(0.044715);
                let t = (k * (x + c * x * x * x)).tanh();
                let dt = (one - t * t) * k * (one + F::lit(3.0) * c * x * x);
                F::lit(0.5) * (one + t) + F::lit(0.5) * x * dt
            }
            Unary::Exp => y,
            Unary::Log => one / x,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Abs => x.signum(),
            Unary::Softplus => sigmoid(x),
            Unary::SmoothL1 => {
                if x.abs() < one {
                    x
                } else {
                    x.signum()
                }
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batches: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, F),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Unary(Var, Unary),
    Clamp {
        src: Var,
        lo: F,
        hi: F,
    },
    Minimum(Var, Var),
    Maximum(Var, Var),
    Softmax {
        src: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Sum(Var),
    MeanAxis {
        src: Var,
        axis: usize,
    },
    Repeat {
        src: Var,
        times: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<F>,
    },
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a forward computation. Node order is a valid
/// topological order because every op only references earlier nodes.
pub struct Tape<F> {
    pub(crate) nodes: Vec<Node<F>>,
    check_finite: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Head-resolved attention probabilities `[batches, heads, q_len, k_len]`
    /// recorded by [`Tape::attention`].
    pub fn attention_probs(&self, v: Var) -> Option<(AttnShape, &[F])> {
        match &self.nodes[v.0].op {
            Op::Attention { shape, probs, .. } => Some((*shape, probs)),
            _ => None,
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch(name, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, Op::Div(a, b), |p, q| p / q)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("minimum", a, b, Op::Minimum(a, b), |p, q| if p <= q { p } else { q })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("maximum", a, b, Op::Maximum(a, b), |p, q| if p >= q { p } else { q })
    }

    fn check_suffix(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        // A [1] operand broadcasts against anything.
        if ok || (sb == [1]) {
            Ok(())
        } else {
            Err(mismatch(name, sa, sb))
        }
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add_bcast", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let m = y.numel();
        let data = x.data().iter().enumerate().map(|(i, &p)| p + y.data()[i % m]).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add_bcast", out, Op::AddBcast(a, b), &[a, b])
    }

    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul_bcast", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let m = y.numel();
        let data = x.data().iter().enumerate().map(|(i, &p)| p * y.data()[i % m]).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul_bcast", out, Op::MulBcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&p| p * c).collect())?;
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: F) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&p| p + c).collect())?;
        self.push("offset", out, Op::Offset(a), &[a])
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&p| kind.eval(p)).collect())?;
        self.push(kind.name(), out, Op::Unary(a, kind), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }
    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Cos)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }
    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::SmoothL1)
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&p| p.max(lo).min(hi)).collect(),
        )?;
        self.push("clamp", out, Op::Clamp { src: a, lo, hi }, &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (sa, sb) = (x.shape(), y.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_into(x.data(), y.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: 1,
                shape: x.shape().to_vec(),
            });
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let out = Tensor::new(vec![c, r], transpose_data(x.data(), r, c))?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// `x W + b` with `x: [.., in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let rows = shape.iter().product::<usize>() / cols;
        let flat = if shape.len() == 2 {
            x
        } else {
            self.reshape(x, [rows, cols])?
        };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bcast(y, b)?;
        }
        if shape.len() != 2 {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.shape(y)[1];
            y = self.reshape(y, out_shape)?;
        }
        Ok(y)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let (outer, _, inner) = axis_blocks("concat", &first, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len() && s.iter().enumerate().all(|(i, &e)| i == axis || e == first[i]);
            if !ok {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, extent, inner) = axis_blocks("slice", &shape, axis)?;
        if len == 0 || start + len > extent {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                limit: extent,
            });
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        self.push("slice", out, Op::Slice { src: a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn repeat(&mut self, a: Var, times: usize) -> Result<Var> {
        let x = self.value(a);
        let mut shape = vec![times];
        shape.extend_from_slice(x.shape());
        let mut data = Vec::with_capacity(times * x.numel());
        for _ in 0..times {
            data.extend_from_slice(x.data());
        }
        let out = Tensor::new(shape, data)?;
        self.push("repeat", out, Op::Repeat { src: a, times }, &[a])
    }

    /// Row lookup into a `[rows, cols]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let rows = t.shape()[0];
        let cols = t.numel() / rows;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    limit: rows,
                });
            }
            data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        self.push(
            "gather_rows",
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, len, inner) = axis_blocks("softmax", x.shape(), axis)?;
        let mut y = vec![F::zero(); x.numel()];
        let d = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..len {
                    mx = mx.max(d[idx(j)]);
                }
                let mut sum = F::zero();
                for j in 0..len {
                    let e = (d[idx(j)] - mx).exp();
                    y[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[idx(j)] /= sum;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), y)?;
        self.push("softmax", out, Op::Softmax { src: a, axis }, &[a])
    }

    /// Normalizes over the last axis, then applies elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(mismatch("layer_norm", xv.shape(), self.shape(gain)));
        }
        let rows = xv.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = F::lit(c as f64);
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut y = vec![F::zero(); xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                y[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), y)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<F>();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = F::lit(self.value(a).numel() as f64);
        let s = self.sum(a)?;
        self.scale(s, F::one() / n)
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, len, inner) = axis_blocks("mean_axis", x.shape(), axis)?;
        let mut y = vec![F::zero(); outer * inner];
        let inv = F::one() / F::lit(len as f64);
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    y[o * inner + i] += x.data()[base + i];
                }
            }
        }
        y.iter_mut().for_each(|v| *v *= inv);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, y)?;
        self.push("mean_axis", out, Op::MeanAxis { src: a, axis }, &[a])
    }

    /// Scaled dot-product attention over already projected `q: [B*Lq, C]`,
    /// `k, v: [B*Lk, C]`. Each batch attends only within itself; channels
    /// are split evenly across heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let AttnShape {
            batches,
            heads,
            q_len,
            k_len,
        } = shape;
        let c = self.value(q).cols();
        if heads == 0 || c % heads != 0 {
            return Err(TensorError::Config(format!(
                "channel width {c} is not divisible by {heads} heads"
            )));
        }
        if self.shape(q) != [batches * q_len, c] {
            return Err(mismatch("attention", self.shape(q), &[batches * q_len, c]));
        }
        for kv in [k, v] {
            if self.shape(kv) != [batches * k_len, c] {
                return Err(mismatch("attention", self.shape(kv), &[batches * k_len, c]));
            }
        }
        let (out, probs) = crate::attention::sdpa_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            shape,
            c,
        );
        let out = Tensor::new(vec![batches * q_len, c], out)?;
        self.push("attention", out, Op::Attention { q, k, v, shape, probs }, &[q, k, v])
    }
}

pub(crate) fn transpose_data<F: Real>(x: &[F], r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// `out += a[m,k] * b[k,n]`.
pub(crate) fn matmul_into<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// `out += a[m,n] * b[k,n]^T`, giving `[m,k]`.
pub(crate) fn matmul_nt_into<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out += a[m,k]^T * b[m,n]`, giving `[k,n]`.
pub(crate) fn matmul_tn_into<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}
