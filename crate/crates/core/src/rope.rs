//! Rotary position embeddings over one or more position axes.
//!
//! Feature pairs `(2i, 2i+1)` of each head are rotated by a position-dependent
//! angle. With several axes the pairs are partitioned between them, so a 2D
//! table spends half the pairs on rows and half on columns.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;

/// Per-token cos/sin of the rotation angle for every feature pair.
#[derive(Debug, Clone)]
pub struct RopeTable<T: Scalar> {
    pub head_dim: usize,
    pub tokens: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    /// `positions[t][a]` is token `t`'s coordinate on axis `a`; `axis_dims[a]`
    /// is the (even) number of features that axis rotates.
    pub fn new(positions: &[Vec<f64>], axis_dims: &[usize]) -> Result<Self> {
        let head_dim: usize = axis_dims.iter().sum();
        if axis_dims.iter().any(|d| d % 2 != 0) || head_dim == 0 {
            return Err(Error::Config(format!(
                "rope axis dims must be even and nonzero, got {axis_dims:?}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for pos in positions {
            if pos.len() != axis_dims.len() {
                return Err(Error::Shape(format!(
                    "token has {} coordinates, table has {} axes",
                    pos.len(),
                    axis_dims.len()
                )));
            }
            for (a, &d) in axis_dims.iter().enumerate() {
                let pairs = d / 2;
                for j in 0..pairs {
                    let freq = ROPE_BASE.powf(-(j as f64) / pairs as f64);
                    let ang = pos[a] * freq;
                    cos.push(T::from_f64_lossy(ang.cos()));
                    sin.push(T::from_f64_lossy(ang.sin()));
                }
            }
        }
        Ok(Self { head_dim, tokens: positions.len(), cos, sin })
    }

    pub fn one_d(positions: &[f64], head_dim: usize) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(Error::Config(format!("rope_1d needs an even feature dim, got {head_dim}")));
        }
        let p: Vec<Vec<f64>> = positions.iter().map(|&x| vec![x]).collect();
        Self::new(&p, &[head_dim])
    }

    pub fn two_d(rows: &[f64], cols: &[f64], head_dim: usize) -> Result<Self> {
        if head_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "rope_2d needs a feature dim divisible by 4, got {head_dim}"
            )));
        }
        if rows.len() != cols.len() {
            return Err(Error::Shape(format!("{} row vs {} col positions", rows.len(), cols.len())));
        }
        let p: Vec<Vec<f64>> = rows.iter().zip(cols).map(|(&r, &c)| vec![r, c]).collect();
        Self::new(&p, &[head_dim / 2, head_dim / 2])
    }

    /// Rotates `x` (`[tokens, heads*head_dim]`) in place; `inverse` rotates
    /// by the negative angle, which is the transpose used in backward.
    pub fn apply_in_place(&self, x: &mut [T], inverse: bool) {
        let half = self.head_dim / 2;
        let width = x.len() / self.tokens;
        let heads = width / self.head_dim;
        for t in 0..self.tokens {
            let cs = &self.cos[t * half..(t + 1) * half];
            let sn = &self.sin[t * half..(t + 1) * half];
            for h in 0..heads {
                let row = &mut x[t * width + h * self.head_dim..t * width + (h + 1) * self.head_dim];
                for i in 0..half {
                    let (c, mut s) = (cs[i], sn[i]);
                    if inverse {
                        s = -s;
                    }
                    let (a, b) = (row[2 * i], row[2 * i + 1]);
                    row[2 * i] = a * c - b * s;
                    row[2 * i + 1] = a * s + b * c;
                }
            }
        }
    }

    pub fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.rows() != self.tokens || x.cols() % self.head_dim != 0 {
            return Err(Error::Shape(format!(
                "rope table for {} tokens x head_dim {} cannot rotate {:?}",
                self.tokens,
                self.head_dim,
                x.shape()
            )));
        }
        Ok(())
    }
}

/// Applies 1D rotary embedding to `x: [tokens, dim]` treated as a single head.
pub fn rope_1d<T: Scalar>(x: &Tensor<T>, positions: &[f64]) -> Result<Tensor<T>> {
    let table = RopeTable::one_d(positions, x.cols())?;
    table.check(x)?;
    let mut out = x.clone();
    table.apply_in_place(out.data_mut(), false);
    Ok(out)
}

/// Applies 2D rotary embedding to `x: [tokens, dim]` treated as a single head.
pub fn rope_2d<T: Scalar>(x: &Tensor<T>, rows: &[f64], cols: &[f64]) -> Result<Tensor<T>> {
    let table = RopeTable::two_d(rows, cols, x.cols())?;
    table.check(x)?;
    let mut out = x.clone();
    table.apply_in_place(out.data_mut(), false);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecs(seed: u64, n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * (seed as f64 + 0.3) * 12.9898).sin() * 2.0).collect()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn position_zero_is_exact_identity() {
        let x = Tensor::<f64>::new(&[1, 8], vecs(1, 8)).unwrap();
        assert_eq!(rope_1d(&x, &[0.0]).unwrap(), x);
        assert_eq!(rope_2d(&x, &[0.0], &[0.0]).unwrap(), x);
    }

    #[test]
    fn rotation_preserves_norm() {
        let x = Tensor::<f64>::new(&[3, 16], vecs(2, 48)).unwrap();
        let y = rope_1d(&x, &[1.0, 7.0, 300.0]).unwrap();
        let z = rope_2d(&x, &[3.0, 1.0, 9.0], &[0.0, 5.0, 2.0]).unwrap();
        for t in 0..3 {
            assert!((norm(x.row(t)) - norm(y.row(t))).abs() < 1e-6);
            assert!((norm(x.row(t)) - norm(z.row(t))).abs() < 1e-6);
        }
    }

    #[test]
    fn scores_depend_only_on_relative_position() {
        let q = Tensor::<f64>::new(&[1, 16], vecs(3, 16)).unwrap();
        let k = Tensor::<f64>::new(&[1, 16], vecs(4, 16)).unwrap();
        let score = |m: f64, n: f64| {
            let a = rope_1d(&q, &[m]).unwrap();
            let b = rope_1d(&k, &[n]).unwrap();
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        for s in [1.0, 5.0, 40.0] {
            assert!((score(2.0, 7.0) - score(2.0 + s, 7.0 + s)).abs() < 1e-6);
        }
        let score2 = |m: (f64, f64), n: (f64, f64)| {
            let a = rope_2d(&q, &[m.0], &[m.1]).unwrap();
            let b = rope_2d(&k, &[n.0], &[n.1]).unwrap();
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        assert!((score2((1.0, 2.0), (3.0, 0.0)) - score2((4.0, 6.0), (6.0, 4.0))).abs() < 1e-6);
    }

    #[test]
    fn odd_dims_are_configuration_errors() {
        let x = Tensor::<f64>::new(&[1, 6], vecs(5, 6)).unwrap();
        assert!(matches!(rope_2d(&x, &[1.0], &[1.0]), Err(Error::Config(_))));
        let y = Tensor::<f64>::new(&[1, 5], vecs(5, 5)).unwrap();
        assert!(matches!(rope_1d(&y, &[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn inverse_undoes_forward() {
        let t = RopeTable::<f64>::two_d(&[1.0, 2.0], &[3.0, 4.0], 8).unwrap();
        let orig = vecs(6, 32);
        let mut x = orig.clone();
        t.apply_in_place(&mut x, false);
        t.apply_in_place(&mut x, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
