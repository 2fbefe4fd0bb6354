use crate::attention::sdpa_backward;
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{matmul_nt_into, matmul_tn_into, transpose_data, Op, Tape, Var};
use crate::tensor::{axis_blocks, Tensor};

/// Gradients of a scalar loss with respect to every node on a tape.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`; zero when `v` is not reachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn acc<F: Real>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Real> Tape<F> {
    /// Reverse pass from a scalar `loss`. Nodes are visited in reverse
    /// recording order, so every gradient is complete before it propagates.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let out = &node.value;
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            let len = |v: Var| self.nodes[v.0].value.numel();
            let val = |v: Var| self.nodes[v.0].value.data();

            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for &p in [a, b] {
                        if rg(p) {
                            let d = acc(&mut grads[p.0], g.len());
                            d.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        let d = acc(&mut grads[a.0], g.len());
                        d.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                    if rg(*b) {
                        let d = acc(&mut grads[b.0], g.len());
                        d.iter_mut().zip(&g).for_each(|(x, &y)| *x -= y);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if rg(*a) {
                        let d = acc(&mut grads[a.0], g.len());
                        for j in 0..g.len() {
                            d[j] += g[j] * bv[j];
                        }
                    }
                    if rg(*b) {
                        let d = acc(&mut grads[b.0], g.len());
                        for j in 0..g.len() {
                            d[j] += g[j] * av[j];
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if rg(*a) {
                        let d = acc(&mut grads[a.0], g.len());
                        for j in 0..g.len() {
                            d[j] += g[j] / bv[j];
                        }
                    }
                    if rg(*b) {
                        let d = acc(&mut grads[b.0], g.len());
                        for j in 0..g.len() {
                            d[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                        }
                    }
                }
                Op::Minimum(a, b) | Op::Maximum(a, b) => {
                    let is_min = matches!(node.op, Op::Minimum(..));
                    let (av, bv) = (val(*a), val(*b));
                    let pick_a: Vec<bool> = av
                        .iter()
                        .zip(bv)
                        .map(|(&x, &y)| if is_min { x <= y } else { x >= y })
                        .collect();
                    if rg(*a) {
                        let d = acc(&mut grads[a.0], g.len());
                        for j in 0..g.len() {
                            if pick_a[j] {
                                d[j] += g[j];
                            }
                        }
                    }
                    if rg(*b) {
                        let d = acc(&mut grads[b.0], g.len());
                        for j in 0..g.len() {
                            if !pick_a[j] {
                                d[j] += g[j];
                            }
                        }
                    }
                }
                Op::AddBcast(a, b) => {
                    if rg(*a) {
                        let d = acc(&mut grads[a.0], g.len());
                        d.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                    if rg(*b) {
                        let m = len(*b);
                        let d = acc(&mut grads[b.0], m);
                        for (j, &y) in g.iter().enumerate() {
                            d[j % m] += y;
                        }
                    }
                }
                Op::MulBcast(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let m = bv.len();
                    if rg(*a) {
                        let d = acc(&mut grads[a.0], g.len());
                        for j in 0..g.len() {
                            d[j] += g[j] * bv[j % m];
                        }
                    }
                    if rg(*b) {
                        let d = acc(&mut grads[b.0], m);
                        for j in 0..g.len() {
                            d[j % m] += g[j] * av[j];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let d = acc(&mut grads[a.0], g.len());
                    d.iter_mut().zip(&g).for_each(|(x, &y)| *x += y * *c);
                }
                Op::Offset(a) | Op::Reshape(a) => {
                    let d = acc(&mut grads[a.0], g.len());
                    d.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, nn) = (sa[0], sa[1], sb[1]);
                    if rg(*a) {
                        // dA = dC B^T
                        let d = acc(&mut grads[a.0], m * k);
                        matmul_nt_into(&g, val(*b), d, m, nn, k);
                    }
                    if rg(*b) {
                        // dB = A^T dC
                        let d = acc(&mut grads[b.0], k * nn);
                        matmul_tn_into(val(*a), &g, d, m, k, nn);
                    }
                }
                Op::Transpose(a) => {
                    let s = out.shape();
                    let t = transpose_data(&g, s[0], s[1]);
                    let d = acc(&mut grads[a.0], g.len());
                    d.iter_mut().zip(&t).for_each(|(x, &y)| *x += y);
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = axis_blocks("concat", out.shape(), *axis)?;
                    let mut off = 0;
                    for &p in parts {
                        let ext = self.shape(p)[*axis];
                        if rg(p) {
                            let d = acc(&mut grads[p.0], outer * ext * inner);
                            for o in 0..outer {
                                let src = (o * total + off) * inner;
                                let dst = o * ext * inner;
                                for t in 0..ext * inner {
                                    d[dst + t] += g[src + t];
                                }
                            }
                        }
                        off += ext;
                    }
                }
                Op::Slice { src, axis, start } => {
                    let (outer, extent, inner) = axis_blocks("slice", self.shape(*src), *axis)?;
                    let sl = out.shape()[*axis];
                    let d = acc(&mut grads[src.0], outer * extent * inner);
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let srcoff = o * sl * inner;
                        for t in 0..sl * inner {
                            d[dst + t] += g[srcoff + t];
                        }
                    }
                }
                Op::Unary(a, kind) => {
                    let x = val(*a);
                    let y = out.data();
                    let d = acc(&mut grads[a.0], g.len());
                    for j in 0..g.len() {
                        d[j] += g[j] * kind.deriv(x[j], y[j]);
                    }
                }
                Op::Clamp { src, lo, hi } => {
                    let x = val(*src);
                    let d = acc(&mut grads[src.0], g.len());
                    for j in 0..g.len() {
                        if x[j] >= *lo && x[j] <= *hi {
                            d[j] += g[j];
                        }
                    }
                }
                Op::Softmax { src, axis } => {
                    let (outer, l, inner) = axis_blocks("softmax", out.shape(), *axis)?;
                    let y = out.data();
                    let d = acc(&mut grads[src.0], g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * l + j) * inner + i;
                            let dot: F = (0..l).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..l {
                                d[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let c = out.cols();
                    let rows = out.rows();
                    let gv = val(*gain);
                    if rg(*gain) {
                        let d = acc(&mut grads[gain.0], c);
                        for r in 0..rows {
                            for j in 0..c {
                                d[j] += g[r * c + j] * xhat[r * c + j];
                            }
                        }
                    }
                    if rg(*bias) {
                        let d = acc(&mut grads[bias.0], c);
                        for r in 0..rows {
                            for j in 0..c {
                                d[j] += g[r * c + j];
                            }
                        }
                    }
                    if rg(*x) {
                        let n = F::lit(c as f64);
                        let d = acc(&mut grads[x.0], rows * c);
                        for r in 0..rows {
                            let dh: Vec<F> = (0..c).map(|j| g[r * c + j] * gv[j]).collect();
                            let h = &xhat[r * c..(r + 1) * c];
                            let mean_dh = dh.iter().copied().sum::<F>() / n;
                            let mean_dh_h = dh.iter().zip(h).map(|(&a, &b)| a * b).sum::<F>() / n;
                            for j in 0..c {
                                d[r * c + j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let m = len(*a);
                    let d = acc(&mut grads[a.0], m);
                    d.iter_mut().for_each(|x| *x += g[0]);
                }
                Op::MeanAxis { src, axis } => {
                    let (outer, l, inner) = axis_blocks("mean_axis", self.shape(*src), *axis)?;
                    let inv = F::one() / F::lit(l as f64);
                    let d = acc(&mut grads[src.0], outer * l * inner);
                    for o in 0..outer {
                        for j in 0..l {
                            for i in 0..inner {
                                d[(o * l + j) * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
                Op::Repeat { src, times } => {
                    let m = len(*src);
                    let d = acc(&mut grads[src.0], m);
                    for t in 0..*times {
                        for j in 0..m {
                            d[j] += g[t * m + j];
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let m = len(*table);
                    let cols = out.cols();
                    let d = acc(&mut grads[table.0], m);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            d[id * cols + j] += g[r * cols + j];
                        }
                    }
                }
                Op::Attention { q, k, v, shape, probs } => {
                    let c = out.cols();
                    let sg = sdpa_backward(val(*q), val(*k), val(*v), probs, &g, *shape, c);
                    for (p, dp) in [(q, sg.dq), (k, sg.dk), (v, sg.dv)] {
                        if rg(*p) {
                            let d = acc(&mut grads[p.0], dp.len());
                            d.iter_mut().zip(&dp).for_each(|(x, &y)| *x += y);
                        }
                    }
                }
            }
            // Keep the seed gradient of the loss and leaf gradients only.
            if i == loss.0 {
                grads[i] = Some(g);
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}
