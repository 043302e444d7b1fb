//! Reusable layers built on the autodiff graph.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{AttnLayout, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rope::RopeTable;
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-6;

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'s, T: Scalar> {
    store: &'s mut ParamStore<T>,
    rng: ChaCha8Rng,
    /// In dry mode only `(name, numel)` is recorded and the store receives
    /// one-element placeholders.
    dry: Option<Vec<(String, usize)>>,
}

impl<'s, T: Scalar> Init<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), dry: None }
    }

    /// Shape-only registration for sizing configurations too large to allocate.
    pub fn dry(store: &'s mut ParamStore<T>) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(0), dry: Some(Vec::new()) }
    }

    /// Recorded `(name, numel)` pairs of a dry run.
    pub fn dry_counts(&self) -> Option<&[(String, usize)]> {
        self.dry.as_deref()
    }

    fn placeholder(&mut self, name: &str, shape: &[usize], trainable: bool) -> Option<Result<ParamId>> {
        let counts = self.dry.as_mut()?;
        counts.push((name.to_string(), shape.iter().product()));
        Some(self.store.add(name, Tensor::zeros(&[1]), trainable))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        if let Some(r) = self.placeholder(name, shape, true) {
            return r;
        }
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("valid std");
        let data: Vec<T> = (0..n)
            .map(|_| if std == 0.0 { T::zero() } else { T::from_f64_lossy(dist.sample(&mut self.rng)) })
            .collect();
        self.store.add(name, Tensor::new(shape, data)?, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        if let Some(r) = self.placeholder(name, shape, true) {
            return r;
        }
        self.store.add(name, Tensor::full(shape, T::from_f64_lossy(v)), true)
    }

    /// A constant that is never trained.
    pub fn frozen(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        if let Some(r) = self.placeholder(name, shape, false) {
            return r;
        }
        self.store.add(name, Tensor::full(shape, T::from_f64_lossy(v)), false)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        self.linear_std(name, fan_in, fan_out, bias, 1.0 / (fan_in as f64).sqrt())
    }

    /// Linear layer with explicit weight std (0 gives a zero-initialized layer).
    pub fn linear_std(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool, std: f64) -> Result<Linear> {
        let w = self.normal(&format!("{name}.w"), &[fan_in, fan_out], std)?;
        let b = if bias { Some(self.constant(&format!("{name}.b"), &[fan_out], 0.0)?) } else { None };
        Ok(Linear { w, b, fan_in, fan_out })
    }

    pub fn rms_norm(&mut self, name: &str, dim: usize) -> Result<RmsNorm> {
        Ok(RmsNorm { w: Some(self.constant(&format!("{name}.g"), &[dim], 1.0)?) })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RmsNorm {
    pub w: Option<ParamId>,
}

impl RmsNorm {
    /// Gain-free normalization (used ahead of adaptive modulation).
    pub fn plain() -> Self {
        Self { w: None }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = self.w.map(|w| g.param(w));
        g.rms_norm(x, w, NORM_EPS)
    }
}

/// Two-layer SiLU MLP.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: init.linear(&format!("{name}.up"), dim, hidden, true)?,
            down: init.linear(&format!("{name}.down"), hidden, dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.silu(h)?;
        self.down.forward(g, h)
    }
}

/// Fused QKV projection + multi-head attention + output projection.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: init.linear(&format!("{name}.qkv"), dim, 3 * dim, true)?,
            out: init.linear(&format!("{name}.out"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    /// Projects to rotated q, k and plain v.
    pub fn project<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        rope: Option<&Arc<RopeTable<T>>>,
    ) -> Result<(Var, Var, Var)> {
        let qkv = self.qkv.forward(g, x)?;
        let mut q = g.slice_cols(qkv, 0, self.dim)?;
        let mut k = g.slice_cols(qkv, self.dim, self.dim)?;
        let v = g.slice_cols(qkv, 2 * self.dim, self.dim)?;
        if let Some(t) = rope {
            q = g.rope(q, t)?;
            k = g.rope(k, t)?;
        }
        Ok((q, k, v))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layout: &AttnLayout,
        rope: Option<&Arc<RopeTable<T>>>,
    ) -> Result<Var> {
        let (q, k, v) = self.project(g, x, rope)?;
        let a = g.attention(q, k, v, self.heads, layout)?;
        self.out.forward(g, a)
    }
}

/// Row index list that repeats row `s` of a per-segment tensor `lengths[s]` times.
pub fn segment_broadcast_index(lengths: &[usize]) -> Arc<Vec<u32>> {
    Arc::new(
        lengths
            .iter()
            .enumerate()
            .flat_map(|(s, &l)| std::iter::repeat(s as u32).take(l))
            .collect(),
    )
}

/// Expands a per-segment `[segments, c]` tensor to per-token `[sum(lengths), c]`.
pub fn broadcast_segments<T: Scalar>(g: &mut Graph<T>, per_seg: Var, lengths: &[usize]) -> Result<Var> {
    let idx = segment_broadcast_index(lengths);
    g.gather_rows(per_seg, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    #[test]
    fn mlp_and_attention_pass_gradcheck() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, 3);
        let mlp = Mlp::new(&mut init, "m", 8, 16).unwrap();
        let attn = SelfAttention::new(&mut init, "a", 8, 2).unwrap();
        let norm = init.rms_norm("n", 8).unwrap();
        let x = init.normal("x", &[5, 8], 1.0).unwrap();
        let layout = AttnLayout::packed(vec![2, 3], true);
        let rope = Arc::new(RopeTable::one_d(&[0.0, 1.0, 0.0, 1.0, 2.0], 4).unwrap());
        let report = gradcheck::check(&store, 1e-5, None, 0, |g| {
            let xv = g.param(x);
            let h = norm.forward(g, xv)?;
            let h = attn.forward(g, h, &layout, Some(&rope))?;
            let h = mlp.forward(g, h)?;
            let h = g.mul(h, h)?;
            g.mean(h)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
