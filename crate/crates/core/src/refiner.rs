//! Bidirectional modulated transformer turning LLM hidden states into
//! decoder conditioning tokens and a global vector.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnLayout, Graph, Var};
use crate::nn::{broadcast_segments, Init, Linear, Mlp, RmsNorm, SelfAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    LastOnly,
    ConcatTwo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMode {
    ClsToken,
    Averaged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerConfig {
    pub blocks: usize,
    pub cond_dim: usize,
    pub heads: usize,
    pub input_mode: InputMode,
    pub global_mode: GlobalMode,
}

impl RefinerConfig {
    pub fn toy() -> Self {
        Self { blocks: 2, cond_dim: 128, heads: 4, input_mode: InputMode::ConcatTwo, global_mode: GlobalMode::ClsToken }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.heads == 0 || self.cond_dim % self.heads != 0 {
            return Err(Error::Config(format!("invalid refiner config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct RefinerBlock {
    modulation: Linear,
    attn: SelfAttention,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Refiner {
    pub cfg: RefinerConfig,
    pub fuse: Linear,
    cls: ParamId,
    blocks: Vec<RefinerBlock>,
    norm: RmsNorm,
    /// Maps context-image visual embeddings into the condition space.
    pub semantic_proj: Linear,
    pub null_text: ParamId,
    pub null_global: ParamId,
}

/// Graph-level refiner output for a packed batch.
#[derive(Debug, Clone)]
pub struct RefinedVars {
    /// `[sum n_i, cond_dim]`, CLS excluded.
    pub cond_tokens: Var,
    /// `[batch, cond_dim]`.
    pub global: Var,
    pub lengths: Vec<usize>,
}

/// Value-level conditioning for one sample.
#[derive(Debug, Clone)]
pub struct ConditionBundle<T: Scalar> {
    pub cond_tokens: Tensor<T>,
    pub global_vec: Tensor<T>,
    pub context_semantic_tokens: Option<Tensor<T>>,
    pub source_len: usize,
}

impl Refiner {
    pub fn new<T: Scalar>(init: &mut Init<T>, cfg: RefinerConfig, llm_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.cond_dim;
        let fan_in = match cfg.input_mode {
            InputMode::ConcatTwo => 2 * llm_dim,
            InputMode::LastOnly => llm_dim,
        };
        let fuse = init.linear("refiner.fuse", fan_in, c, true)?;
        let cls = init.normal("refiner.cls", &[1, c], 1.0)?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let p = format!("refiner.block{i}");
                Ok(RefinerBlock {
                    modulation: init.linear_std(&format!("{p}.modulation"), c, 4 * c, true, 0.0)?,
                    attn: SelfAttention::new(init, &format!("{p}.attn"), c, cfg.heads)?,
                    mlp: Mlp::new(init, &format!("{p}.mlp"), c, 4 * c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = init.rms_norm("refiner.norm", c)?;
        let semantic_proj = init.linear("refiner.semantic_proj", llm_dim, c, true)?;
        let null_text = init.normal("refiner.null_text", &[1, c], 1.0)?;
        let null_global = init.normal("refiner.null_global", &[1, c], 1.0)?;
        Ok(Self { cfg, fuse, cls, blocks, norm, semantic_proj, null_text, null_global })
    }

    /// Projects hidden states to the condition width.
    pub fn fuse_vars<T: Scalar>(&self, g: &mut Graph<T>, h_last: Var, h_prev: Var) -> Result<Var> {
        if g.shape(h_last) != g.shape(h_prev) {
            return Err(Error::Shape(format!("h_last {:?} vs h_prev {:?}", g.shape(h_last), g.shape(h_prev))));
        }
        let x = match self.cfg.input_mode {
            InputMode::ConcatTwo => g.concat_cols(&[h_last, h_prev])?,
            InputMode::LastOnly => h_last,
        };
        self.fuse.forward(g, x)
    }

    /// Runs the blocks over packed fused tokens (`lengths[i] = n_i`).
    pub fn refine_vars<T: Scalar>(&self, g: &mut Graph<T>, fused: Var, lengths: &[usize]) -> Result<RefinedVars> {
        if lengths.iter().any(|&n| n == 0) || lengths.is_empty() {
            return Err(Error::Contract("refiner needs at least one token per sample".into()));
        }
        if lengths.iter().sum::<usize>() != g.shape(fused)[0] {
            return Err(Error::Structure(format!("lengths {lengths:?} vs {} rows", g.shape(fused)[0])));
        }
        let c = self.cfg.cond_dim;
        let n_total = g.shape(fused)[0];
        let cls_mode = self.cfg.global_mode == GlobalMode::ClsToken;
        let (mut x, seg) = if cls_mode {
            let cls = g.param(self.cls);
            let both = g.concat_rows(&[fused, cls])?;
            let mut idx = Vec::with_capacity(n_total + lengths.len());
            let mut start = 0u32;
            for &n in lengths {
                idx.push(n_total as u32);
                idx.extend(start..start + n as u32);
                start += n as u32;
            }
            let x = g.gather_rows(both, &Arc::new(idx))?;
            (x, lengths.iter().map(|n| n + 1).collect::<Vec<_>>())
        } else {
            (fused, lengths.to_vec())
        };
        let seg = Arc::new(seg);
        let layout = AttnLayout { segments: seg.clone(), causal: false };
        for b in &self.blocks {
            let pooled = g.segment_mean(x, &seg)?;
            let m = b.modulation.forward(g, pooled)?;
            let m = broadcast_segments(g, m, &seg)?;
            let gamma1 = g.slice_cols(m, 0, c)?;
            let beta1 = g.slice_cols(m, c, c)?;
            let gamma2 = g.slice_cols(m, 2 * c, c)?;
            let beta2 = g.slice_cols(m, 3 * c, c)?;
            let h = RmsNorm::plain().forward(g, x)?;
            let h = g.affine_mod(h, gamma1, beta1)?;
            let h = b.attn.forward(g, h, &layout, None)?;
            x = g.add(x, h)?;
            let h = RmsNorm::plain().forward(g, x)?;
            let h = g.affine_mod(h, gamma2, beta2)?;
            let h = b.mlp.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let x = self.norm.forward(g, x)?;
        if cls_mode {
            let (mut tok, mut cls) = (Vec::with_capacity(n_total), Vec::with_capacity(lengths.len()));
            let mut start = 0u32;
            for &n in lengths {
                cls.push(start);
                tok.extend(start + 1..start + 1 + n as u32);
                start += n as u32 + 1;
            }
            let cond_tokens = g.gather_rows(x, &Arc::new(tok))?;
            let global = g.gather_rows(x, &Arc::new(cls))?;
            Ok(RefinedVars { cond_tokens, global, lengths: lengths.to_vec() })
        } else {
            let global = g.segment_mean(x, &seg)?;
            Ok(RefinedVars { cond_tokens: x, global, lengths: lengths.to_vec() })
        }
    }

    /// Value-level fuse for one sample.
    pub fn fuse_layers<T: Scalar>(&self, store: &ParamStore<T>, h_last: &Tensor<T>, h_prev: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(store);
        let (a, b) = (g.constant(h_last.clone()), g.constant(h_prev.clone()));
        let f = self.fuse_vars(&mut g, a, b)?;
        Ok(g.value(f).clone())
    }

    /// Value-level refinement of one sample.
    pub fn refine<T: Scalar>(&self, store: &ParamStore<T>, fused: &Tensor<T>) -> Result<ConditionBundle<T>> {
        let mut g = Graph::new(store);
        let f = g.constant(fused.clone());
        let r = self.refine_vars(&mut g, f, &[fused.rows()])?;
        let global = g.value(r.global);
        Ok(ConditionBundle {
            cond_tokens: g.value(r.cond_tokens).clone(),
            global_vec: global.reshape(&[global.cols()])?,
            context_semantic_tokens: None,
            source_len: fused.rows(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn refiner(input_mode: InputMode, global_mode: GlobalMode, seed: u64) -> (ParamStore<f64>, Refiner) {
        let mut store = ParamStore::new();
        let cfg = RefinerConfig { blocks: 2, cond_dim: 8, heads: 2, input_mode, global_mode };
        let r = Refiner::new(&mut Init::new(&mut store, seed), cfg, 6).unwrap();
        // generic (nonzero) modulation for the probes
        for p in store.iter_mut() {
            if p.name.contains("modulation") {
                let n = p.tensor.numel();
                let v: Vec<f64> = (0..n).map(|i| ((i * 7919 % 97) as f64 / 97.0 - 0.5) * 0.3).collect();
                p.tensor = Tensor::new(p.tensor.shape(), v).unwrap();
            }
        }
        (store, r)
    }

    fn input(n: usize, w: usize, seed: u64) -> Tensor<f64> {
        let v: Vec<f64> = (0..n * w).map(|i| (((i as u64 + 1) * (seed + 3) * 2654435761) % 1000) as f64 / 500.0 - 1.0).collect();
        Tensor::new(&[n, w], v).unwrap()
    }

    #[test]
    fn fuse_mode_contracts() {
        let (store, r) = refiner(InputMode::ConcatTwo, GlobalMode::ClsToken, 1);
        let (a, b) = (input(5, 6, 1), input(5, 6, 2));
        assert_eq!(r.fuse_layers(&store, &a, &b).unwrap().shape(), &[5, 8]);
        assert!(matches!(r.fuse_layers(&store, &a, &input(4, 6, 2)), Err(Error::Shape(_))));

        let (ls, lr) = refiner(InputMode::LastOnly, GlobalMode::ClsToken, 1);
        assert_eq!(lr.fuse_layers(&ls, &a, &b).unwrap(), lr.fuse_layers(&ls, &a, &input(5, 6, 9)).unwrap());

        // zero the h_prev half of the concat projection -> last-only projection of h_last
        let mut zs = store.clone();
        let w = zs.get(r.fuse.w).tensor.clone();
        let mut wd = w.data().to_vec();
        wd[6 * 8..].iter_mut().for_each(|v| *v = 0.0);
        zs.get_mut(r.fuse.w).tensor = Tensor::new(w.shape(), wd.clone()).unwrap();
        let mut last = ls.clone();
        last.get_mut(lr.fuse.w).tensor = Tensor::new(&[6, 8], wd[..48].to_vec()).unwrap();
        last.get_mut(lr.fuse.b.unwrap()).tensor = zs.get(r.fuse.b.unwrap()).tensor.clone();
        let x = r.fuse_layers(&zs, &a, &b).unwrap();
        let y = lr.fuse_layers(&last, &a, &input(5, 6, 7)).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn refine_lengths_and_averaged_single_token() {
        let (store, r) = refiner(InputMode::ConcatTwo, GlobalMode::ClsToken, 2);
        let b = r.refine(&store, &input(5, 8, 3)).unwrap();
        assert_eq!(b.cond_tokens.shape(), &[5, 8]);
        assert_eq!(b.global_vec.shape(), &[8]);
        let (store, r) = refiner(InputMode::ConcatTwo, GlobalMode::Averaged, 2);
        let b = r.refine(&store, &input(1, 8, 3)).unwrap();
        assert!(b.cond_tokens.max_abs_diff(&b.global_vec.reshape(&[1, 8]).unwrap()) < 1e-15);
        let mut g = Graph::new(&store);
        let empty = g.constant(Tensor::zeros(&[1, 8]));
        assert!(matches!(r.refine_vars(&mut g, empty, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn permutation_probe_and_bidirectionality() {
        let (store, r) = refiner(InputMode::ConcatTwo, GlobalMode::ClsToken, 3);
        let x = input(6, 8, 4);
        let base = r.refine(&store, &x).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let rows: Vec<Tensor<f64>> = perm.iter().map(|&i| x.slice_rows(i, 1).unwrap()).collect();
        let px = Tensor::concat_rows(&rows.iter().collect::<Vec<_>>()).unwrap();
        let pb = r.refine(&store, &px).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            let d: f64 = pb.cond_tokens.row(k).iter().zip(base.cond_tokens.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-5);
        }
        assert!(pb.global_vec.max_abs_diff(&base.global_vec) < 1e-5);

        let mut y = x.clone();
        y.data_mut()[5 * 8] += 1.0;
        let yb = r.refine(&store, &y).unwrap();
        assert!(yb.cond_tokens.row(0) != base.cond_tokens.row(0));
    }

    #[test]
    fn zero_modulation_is_plain_block() {
        let (mut store, r) = refiner(InputMode::ConcatTwo, GlobalMode::Averaged, 4);
        for p in store.iter_mut() {
            if p.name.contains("modulation") {
                p.tensor = Tensor::zeros(p.tensor.shape());
            }
        }
        let x = input(4, 8, 5);
        let got = r.refine(&store, &x).unwrap();
        let mut g = Graph::new(&store);
        let mut h = g.constant(x);
        let layout = AttnLayout::single(4, false);
        for b in &r.blocks {
            let n = RmsNorm::plain().forward(&mut g, h).unwrap();
            let a = b.attn.forward(&mut g, n, &layout, None).unwrap();
            h = g.add(h, a).unwrap();
            let n = RmsNorm::plain().forward(&mut g, h).unwrap();
            let m = b.mlp.forward(&mut g, n).unwrap();
            h = g.add(h, m).unwrap();
        }
        let h = r.norm.forward(&mut g, h).unwrap();
        assert!(g.value(h).max_abs_diff(&got.cond_tokens) < 1e-12);
    }

    #[test]
    fn all_mode_combinations_pass_gradcheck() {
        for im in [InputMode::LastOnly, InputMode::ConcatTwo] {
            for gm in [GlobalMode::ClsToken, GlobalMode::Averaged] {
                let (mut store, r) = refiner(im, gm, 5);
                let hl = store.add("h_last", input(5, 6, 6), true).unwrap();
                let hp = store.add("h_prev", input(5, 6, 7), true).unwrap();
                let report = gradcheck::check(&store, 1e-5, Some(6), 0, |g| {
                    let (a, b) = (g.param(hl), g.param(hp));
                    let f = r.fuse_vars(g, a, b)?;
                    let out = r.refine_vars(g, f, &[2, 3])?;
                    let t = g.mul(out.cond_tokens, out.cond_tokens)?;
                    let t = g.mean(t)?;
                    let gl = g.mean(out.global)?;
                    let gl = g.mul(gl, gl)?;
                    g.add(t, gl)
                })
                .unwrap();
                assert!(report.max_rel_err < 1e-4, "{im:?}/{gm:?}: {report:?}");
            }
        }
    }
}
