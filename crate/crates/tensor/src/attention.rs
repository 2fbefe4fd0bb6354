//! Fused batched multi-head scaled dot-product attention.

use crate::real::Real;
use crate::tape::AttnShape;

fn head_rows<F: Real>(x: &[F], row0: usize, rows: usize, c: usize, h: usize, d: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let base = (row0 + r) * c + h * d;
        out.extend_from_slice(&x[base..base + d]);
    }
    out
}

pub(crate) fn sdpa_forward<F: Real>(q: &[F], k: &[F], v: &[F], shape: AttnShape, c: usize) -> (Vec<F>, Vec<F>) {
    let AttnShape {
        batches,
        heads,
        q_len,
        k_len,
    } = shape;
    let d = c / heads;
    let scale = F::one() / F::lit(d as f64).sqrt();
    let mut out = vec![F::zero(); batches * q_len * c];
    let mut probs = vec![F::zero(); batches * heads * q_len * k_len];
    for b in 0..batches {
        for h in 0..heads {
            let qh = head_rows(q, b * q_len, q_len, c, h, d);
            let kh = head_rows(k, b * k_len, k_len, c, h, d);
            let vh = head_rows(v, b * k_len, k_len, c, h, d);
            let p = &mut probs[((b * heads + h) * q_len) * k_len..((b * heads + h + 1) * q_len) * k_len];
            for i in 0..q_len {
                let qi = &qh[i * d..(i + 1) * d];
                let row = &mut p[i * k_len..(i + 1) * k_len];
                let mut mx = F::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kh[j * d..(j + 1) * d];
                    let mut acc = F::zero();
                    for (&x, &y) in qi.iter().zip(kj) {
                        acc += x * y;
                    }
                    *s = acc * scale;
                    mx = mx.max(*s);
                }
                let mut sum = F::zero();
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
                let orow = &mut out[(b * q_len + i) * c + h * d..(b * q_len + i) * c + (h + 1) * d];
                for (j, &pj) in row.iter().enumerate() {
                    let vj = &vh[j * d..(j + 1) * d];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

pub(crate) struct SdpaGrads<F> {
    pub dq: Vec<F>,
    pub dk: Vec<F>,
    pub dv: Vec<F>,
}

pub(crate) fn sdpa_backward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
    shape: AttnShape,
    c: usize,
) -> SdpaGrads<F> {
    let AttnShape {
        batches,
        heads,
        q_len,
        k_len,
    } = shape;
    let d = c / heads;
    let scale = F::one() / F::lit(d as f64).sqrt();
    let mut dq = vec![F::zero(); q.len()];
    let mut dk = vec![F::zero(); k.len()];
    let mut dv = vec![F::zero(); v.len()];
    let mut ds = vec![F::zero(); k_len];
    for b in 0..batches {
        for h in 0..heads {
            let p = &probs[((b * heads + h) * q_len) * k_len..((b * heads + h + 1) * q_len) * k_len];
            for i in 0..q_len {
                let qrow = (b * q_len + i) * c + h * d;
                let go = &dout[qrow..qrow + d];
                let prow = &p[i * k_len..(i + 1) * k_len];
                // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                let mut dot = F::zero();
                for j in 0..k_len {
                    let krow = (b * k_len + j) * c + h * d;
                    let vj = &v[krow..krow + d];
                    let mut dp = F::zero();
                    for (&g, &x) in go.iter().zip(vj) {
                        dp += g * x;
                    }
                    ds[j] = dp;
                    dot += dp * prow[j];
                    let dvj = &mut dv[krow..krow + d];
                    for (o, &g) in dvj.iter_mut().zip(go) {
                        *o += prow[j] * g;
                    }
                }
                for j in 0..k_len {
                    ds[j] = prow[j] * (ds[j] - dot) * scale;
                }
                for j in 0..k_len {
                    let krow = (b * k_len + j) * c + h * d;
                    let s = ds[j];
                    for t in 0..d {
                        dq[qrow + t] += s * k[krow + t];
                        dk[krow + t] += s * q[qrow + t];
                    }
                }
            }
        }
    }
    SdpaGrads { dq, dk, dv }
}
