//! Fixed sinusoidal encodings for token positions, patch grids, frame
//! indices and box coordinates.

use std::f64::consts::TAU;

use stcat_tensor::{Graph, Real, Tensor, Var};

use crate::error::Result;

const TEMPERATURE: f64 = 10000.0;

/// `[len, dim]`; even channels carry `sin(pos / 10000^(2i/dim))`, odd
/// channels the matching cosine.
pub fn sine_1d<F: Real>(len: usize, dim: usize) -> Tensor<F> {
    Tensor::from_fn(vec![len, dim], |idx| {
        let (pos, c) = (idx / dim, idx % dim);
        let freq = TEMPERATURE.powf((2 * (c / 2)) as f64 / dim as f64);
        let a = pos as f64 / freq;
        F::lit(if c % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// `[rows * cols, dim]` in row-major patch order. The first half of the
/// channels encodes the normalized row, the second half the column.
pub fn sine_2d<F: Real>(rows: usize, cols: usize, dim: usize) -> Tensor<F> {
    let half = dim / 2;
    Tensor::from_fn(vec![rows * cols, dim], |idx| {
        let (tok, c) = (idx / dim, idx % dim);
        let (r, k) = (tok / cols, tok % cols);
        let (coord, ch) = if c < half {
            ((r + 1) as f64 / rows as f64, c)
        } else {
            ((k + 1) as f64 / cols as f64, c - half)
        };
        let freq = TEMPERATURE.powf((2 * (ch / 2)) as f64 / half as f64);
        let a = coord * TAU / freq;
        F::lit(if ch % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Differentiable encoding of `[n, 4]` normalized box coordinates into
/// `[n, 4 * per_coord]`: each coordinate gets its own `per_coord` block of
/// alternating sine/cosine features.
pub fn box_sine<F: Real>(g: &mut Graph<F>, boxes: Var, per_coord: usize) -> Result<Var> {
    let width = 4 * per_coord;
    let freqs = Tensor::from_fn(vec![4, width], |idx| {
        let (coord, col) = (idx / width, idx % width);
        if col / per_coord != coord {
            return F::zero();
        }
        let i = col % per_coord;
        F::lit(TAU / TEMPERATURE.powf((2 * (i / 2)) as f64 / per_coord as f64))
    });
    let even = Tensor::from_fn(
        vec![width],
        |c| if (c % per_coord) % 2 == 0 { F::one() } else { F::zero() },
    );
    let odd = Tensor::from_fn(
        vec![width],
        |c| if (c % per_coord) % 2 == 1 { F::one() } else { F::zero() },
    );
    let freqs = g.constant(freqs);
    let even = g.constant(even);
    let odd = g.constant(odd);
    let angles = g.matmul(boxes, freqs)?;
    let s = g.sin(angles)?;
    let c = g.cos(angles)?;
    let s = g.mul_bcast(s, even)?;
    let c = g.mul_bcast(c, odd)?;
    Ok(g.add(s, c)?)
}
