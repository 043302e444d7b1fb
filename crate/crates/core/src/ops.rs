//! Tensor-level entry points for the core primitives, plus packed sequences.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{AttnLayout, Graph};
use crate::nn::SelfAttention;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Attention mask choice for [`attention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    Causal,
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::detached();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(a, b)?;
    Ok(g.value(c).clone())
}

/// Softmax along the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::detached();
    let x = g.constant(x.clone());
    let y = g.softmax(x)?;
    Ok(g.value(y).clone())
}

/// Single-head `softmax(q k^T / sqrt(d)) v` over `[tokens, d]` inputs.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, mask: Mask) -> Result<Tensor<T>> {
    let mut g = Graph::detached();
    let layout = AttnLayout::single(q.rows(), mask == Mask::Causal);
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let o = g.attention(q, k, v, 1, &layout)?;
    Ok(g.value(o).clone())
}

/// Variable-length items concatenated along the token axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence<T: Scalar> {
    pub data: Tensor<T>,
    pub lengths: Vec<usize>,
}

impl<T: Scalar> PackedSequence<T> {
    pub fn new(data: Tensor<T>, lengths: Vec<usize>) -> Result<Self> {
        let seq = Self { data, lengths };
        seq.validate()?;
        Ok(seq)
    }

    pub fn pack(items: &[Tensor<T>]) -> Result<Self> {
        let refs: Vec<&Tensor<T>> = items.iter().collect();
        let data = Tensor::concat_rows(&refs)?;
        Self::new(data, items.iter().map(|t| t.rows()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.lengths.iter().sum();
        if total != self.data.rows() || self.lengths.iter().any(|&l| l == 0) {
            return Err(Error::Structure(format!(
                "packed lengths {:?} sum to {total}, data has {} tokens",
                self.lengths,
                self.data.rows()
            )));
        }
        Ok(())
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.lengths
            .iter()
            .map(|l| {
                let o = acc;
                acc += l;
                o
            })
            .collect()
    }

    pub fn item(&self, i: usize) -> Result<Tensor<T>> {
        self.data.slice_rows(self.offsets()[i], self.lengths[i])
    }

    pub fn unpack(&self) -> Result<Vec<Tensor<T>>> {
        (0..self.lengths.len()).map(|i| self.item(i)).collect()
    }

    pub fn layout(&self, causal: bool) -> AttnLayout {
        AttnLayout { segments: Arc::new(self.lengths.clone()), causal }
    }
}

/// Multi-head self-attention applied independently to every packed item.
pub fn packed_attention<T: Scalar>(
    store: &ParamStore<T>,
    weights: &SelfAttention,
    seq: &PackedSequence<T>,
) -> Result<PackedSequence<T>> {
    seq.validate()?;
    let mut g = Graph::new(store);
    let x = g.constant(seq.data.clone());
    let y = weights.forward(&mut g, x, &seq.layout(false), None)?;
    PackedSequence::new(g.value(y).clone(), seq.lengths.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_attention_returns_v() {
        let q = Tensor::<f64>::from_f64(&[1, 3], &[0.3, -1.0, 2.0]).unwrap();
        let k = Tensor::<f64>::from_f64(&[1, 3], &[5.0, 1.0, 0.0]).unwrap();
        let v = Tensor::<f64>::from_f64(&[1, 3], &[7.0, 8.0, 9.0]).unwrap();
        assert_eq!(attention(&q, &k, &v, Mask::None).unwrap(), v);
    }

    #[test]
    fn identical_keys_mean_pool_values() {
        let q = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 2.0, -3.0, 0.5, 9.0, 9.0]).unwrap();
        let k = Tensor::<f64>::from_f64(&[3, 2], &[0.4, 0.1, 0.4, 0.1, 0.4, 0.1]).unwrap();
        let v = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let o = attention(&q, &k, &v, Mask::None).unwrap();
        for r in 0..3 {
            assert!((o.row(r)[0] - 3.0).abs() < 1e-12);
            assert!((o.row(r)[1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch_is_structural() {
        let t = Tensor::<f32>::zeros(&[4, 2]);
        assert!(matches!(PackedSequence::new(t, vec![1, 2]), Err(Error::Structure(_))));
    }
}
