//! Pixel-shuffle compression and probabilistic visual tokenization.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var, ZERO_INDEX};
use crate::nn::{Init, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{s, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub shuffle: usize,
    pub vocab_size: usize,
    pub temperature: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { shuffle: 2, vocab_size: 1024, temperature: 1.0 }
    }
}

/// Index list for `gather_rows` mapping a `rows x cols` token grid to the
/// `[rows/r * cols/r * r*r, c]` layout whose reshape to `[.., r*r*c]` is the
/// shuffled grid. Cells outside the grid read [`ZERO_INDEX`].
pub fn shuffle_index(rows: usize, cols: usize, r: usize, offset: usize) -> Vec<u32> {
    let (or, oc) = (rows.div_ceil(r), cols.div_ceil(r));
    let mut idx = Vec::with_capacity(or * oc * r * r);
    for i in 0..or {
        for j in 0..oc {
            for dy in 0..r {
                for dx in 0..r {
                    let (y, x) = (i * r + dy, j * r + dx);
                    idx.push(if y < rows && x < cols { (offset + y * cols + x) as u32 } else { ZERO_INDEX });
                }
            }
        }
    }
    idx
}

/// Pixel shuffle of a `[rows*cols, c]` grid; every side must divide by `r`.
pub fn pixel_shuffle<T: Scalar>(grid: &Tensor<T>, rows: usize, cols: usize, r: usize) -> Result<Tensor<T>> {
    if r == 0 || rows % r != 0 || cols % r != 0 {
        return Err(Error::Structure(format!("{rows}x{cols} grid is not divisible by shuffle factor {r}")));
    }
    if grid.rows() != rows * cols {
        return Err(Error::Shape(format!("grid {:?} is not {rows}x{cols}", grid.shape())));
    }
    let c = grid.cols();
    let idx = shuffle_index(rows, cols, r, 0);
    let mut out = Vec::with_capacity(grid.numel());
    for &i in &idx {
        out.extend_from_slice(grid.row(i as usize));
    }
    Tensor::new(&[rows * cols / (r * r), r * r * c], out)
}

/// Inverse of [`pixel_shuffle`]: `[(rows/r)*(cols/r), r*r*c]` back to `[rows*cols, c]`.
pub fn pixel_unshuffle<T: Scalar>(grid: &Tensor<T>, rows: usize, cols: usize, r: usize) -> Result<Tensor<T>> {
    if r == 0 || rows % r != 0 || cols % r != 0 || grid.cols() % (r * r) != 0 {
        return Err(Error::Structure(format!("cannot unshuffle {:?} to {rows}x{cols} with r={r}", grid.shape())));
    }
    let c = grid.cols() / (r * r);
    let flat = grid.data();
    let mut out = vec![T::zero(); rows * cols * c];
    for (k, &i) in shuffle_index(rows, cols, r, 0).iter().enumerate() {
        let i = i as usize;
        out[i * c..(i + 1) * c].copy_from_slice(&flat[k * c..(k + 1) * c]);
    }
    Tensor::new(&[rows * cols, c], out)
}

/// Shuffled grid side after zero-padding to a multiple of `r`.
pub fn shuffled_side(n: usize, r: usize) -> usize {
    n.div_ceil(r)
}

/// Row-wise softmax of logits: the tokenization distribution.
pub fn tokenize<T: Scalar>(features: &Tensor<T>, head: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    let logits = crate::ops::matmul(features, head)?;
    crate::ops::softmax(&logits.map(|v| v / s::<T>(temperature)))
}

/// Expected embedding under the token distribution.
pub fn embed<T: Scalar>(probs: &Tensor<T>, table: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.cols() != table.rows() {
        return Err(Error::Shape(format!(
            "distribution over {} entries vs table of {}",
            probs.cols(),
            table.rows()
        )));
    }
    crate::ops::matmul(probs, table)
}

#[derive(Debug, Clone)]
pub struct VisualAdapter {
    pub cfg: AdapterConfig,
    pub head: Linear,
    pub table: ParamId,
}

/// Graph outputs of [`VisualAdapter::forward`].
pub struct AdaptedBatch {
    pub embeddings: Var,
    pub probs: Var,
    pub lengths: Vec<usize>,
}

impl VisualAdapter {
    pub fn new<T: Scalar>(init: &mut Init<T>, cfg: AdapterConfig, enc_dim: usize, llm_dim: usize) -> Result<Self> {
        if cfg.shuffle == 0 || cfg.vocab_size == 0 || cfg.temperature <= 0.0 {
            return Err(Error::Config(format!("invalid adapter config {cfg:?}")));
        }
        let head = init.linear("adapter.head", enc_dim * cfg.shuffle * cfg.shuffle, cfg.vocab_size, true)?;
        let table = init.normal("adapter.table", &[cfg.vocab_size, llm_dim], 1.0)?;
        Ok(Self { cfg, head, table })
    }

    /// Tokens produced per image of a `rows x cols` patch grid.
    pub fn tokens_for(&self, rows: usize, cols: usize) -> usize {
        shuffled_side(rows, self.cfg.shuffle) * shuffled_side(cols, self.cfg.shuffle)
    }

    /// Packed encoder features `[sum rows*cols, c]` to packed LLM embeddings.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, features: Var, grids: &[(usize, usize)]) -> Result<AdaptedBatch> {
        let r = self.cfg.shuffle;
        let c = g.shape(features)[1];
        let mut idx = Vec::new();
        let mut lengths = Vec::with_capacity(grids.len());
        let mut offset = 0;
        for &(rows, cols) in grids {
            idx.extend(shuffle_index(rows, cols, r, offset));
            offset += rows * cols;
            lengths.push(self.tokens_for(rows, cols));
        }
        if offset != g.shape(features)[0] {
            return Err(Error::Shape(format!("grids cover {offset} tokens, features have {}", g.shape(features)[0])));
        }
        let total: usize = lengths.iter().sum();
        let x = g.gather_rows(features, &Arc::new(idx))?;
        let x = g.reshape(x, &[total, r * r * c])?;
        let mut logits = self.head.forward(g, x)?;
        if self.cfg.temperature != 1.0 {
            logits = g.scale(logits, s(1.0 / self.cfg.temperature))?;
        }
        let probs = g.softmax(logits)?;
        let table = g.param(self.table);
        let embeddings = g.matmul(probs, table)?;
        Ok(AdaptedBatch { embeddings, probs, lengths })
    }

    pub fn table<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> &'a Tensor<T> {
        &store.get(self.table).tensor
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shuffle_identity_and_shape() {
        let g = random(&[16, 3], 0);
        assert_eq!(pixel_shuffle(&g, 4, 4, 1).unwrap(), g);
        let s = pixel_shuffle(&g, 4, 4, 2).unwrap();
        assert_eq!(s.shape(), &[4, 12]);
        assert!(matches!(pixel_shuffle(&random(&[15, 2], 1), 3, 5, 2), Err(Error::Structure(_))));
    }

    #[test]
    fn shuffle_matches_nested_loop_oracle() {
        let (rows, cols, c, r) = (4, 6, 3, 2);
        let g = random(&[rows * cols, c], 2);
        let out = pixel_shuffle(&g, rows, cols, r).unwrap();
        let oc = cols / r;
        for i in 0..rows / r {
            for j in 0..oc {
                for dy in 0..r {
                    for dx in 0..r {
                        for ch in 0..c {
                            let src = g.data()[((i * r + dy) * cols + j * r + dx) * c + ch];
                            let dst = out.data()[(i * oc + j) * r * r * c + (dy * r + dx) * c + ch];
                            assert_eq!(src, dst);
                        }
                    }
                }
            }
        }
        assert_eq!(pixel_unshuffle(&out, rows, cols, r).unwrap(), g);
    }

    #[test]
    fn tokenize_examples() {
        let head = random(&[5, 7], 3);
        let zero = tokenize(&Tensor::<f64>::zeros(&[2, 5]), &head, 1.0).unwrap();
        assert!(zero.data().iter().all(|&p| (p - 1.0 / 7.0).abs() < 1e-12));
        let mut logits = Tensor::<f64>::zeros(&[1, 7]);
        logits.data_mut()[3] = 20.0;
        let p = tokenize(&logits, &Tensor::eye(7), 1.0).unwrap();
        assert!(p.data()[3] > 0.9999);
        let p = tokenize(&random(&[9, 5], 4), &head, 1.0).unwrap();
        for r in 0..9 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn embed_examples() {
        let table = random(&[6, 4], 5);
        let mut onehot = Tensor::<f64>::zeros(&[1, 6]);
        onehot.data_mut()[2] = 1.0;
        assert_eq!(embed(&onehot, &table).unwrap().data(), table.row(2));
        let uni = embed(&Tensor::full(&[1, 6], 1.0 / 6.0), &table).unwrap();
        for c in 0..4 {
            let mean = (0..6).map(|r| table.data()[r * 4 + c]).sum::<f64>() / 6.0;
            assert!((uni.data()[c] - mean).abs() < 1e-12);
        }
        let probs = crate::ops::softmax(&random(&[3, 6], 6)).unwrap();
        let e = embed(&probs, &table).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let naive: f64 = (0..6).map(|k| probs.data()[r * 6 + k] * table.data()[k * 4 + c]).sum();
                assert!((e.data()[r * 4 + c] - naive).abs() < 1e-6);
                let col = (0..6).map(|k| table.data()[k * 4 + c]);
                let (lo, hi) = col.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
                assert!(e.data()[r * 4 + c] >= lo - 1e-12 && e.data()[r * 4 + c] <= hi + 1e-12);
            }
        }
        assert!(matches!(embed(&probs, &random(&[5, 4], 7)), Err(Error::Shape(_))));
    }

    #[test]
    fn adapter_forward_pads_and_trains_both_sides() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, 9);
        let cfg = AdapterConfig { shuffle: 2, vocab_size: 8, temperature: 1.0 };
        let ad = VisualAdapter::new(&mut init, cfg, 3, 5).unwrap();
        let feats = init.normal("feats", &[4 * 4 + 3 * 3, 3], 1.0).unwrap();
        let mut g = Graph::new(&store);
        let f = g.param(feats);
        let out = ad.forward(&mut g, f, &[(4, 4), (3, 3)]).unwrap();
        assert_eq!(out.lengths, vec![4, 4]);
        assert_eq!(g.shape(out.embeddings), &[8, 5]);
        let loss = g.sum(out.embeddings).unwrap();
        let sq = g.mul(loss, loss).unwrap();
        let grads = g.backward(sq).unwrap();
        let nz = |id| grads.param(id).unwrap().data().iter().any(|&v: &f64| v != 0.0);
        assert!(nz(ad.head.w) && nz(ad.table));
    }
}
