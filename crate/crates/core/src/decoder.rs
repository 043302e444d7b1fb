//! Dual-stream diffusion transformer predicting rectified-flow velocities.
//!
//! Per sample the joint attention order is `[cond, noisy, context]`. Visual
//! tokens carry 3-axis rotary positions `(frame, row, col)`: noisy latents
//! use frame 0, context latents frame `context_offset`, and condition tokens
//! sit at the origin.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnLayout, Graph, Var};
use crate::nn::{broadcast_segments, Init, Linear, Mlp, RmsNorm};
use crate::params::ParamStore;
use crate::refiner::ConditionBundle;
use crate::rope::RopeTable;
use crate::tensor::{s, Scalar, Tensor};
use crate::vae::{depth_to_space_index, space_to_depth_index, Geom, LatentImage, LATENT_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub latent_patch: usize,
    /// Frame coordinate given to context tokens.
    pub context_offset: f64,
    /// Width of the sinusoidal timestep features.
    pub time_features: usize,
}

impl DecoderConfig {
    pub fn paper() -> Self {
        Self { layers: 27, heads: 16, hidden: 1024, latent_patch: 2, context_offset: 1.0, time_features: 256 }
    }

    pub fn toy() -> Self {
        Self { layers: 4, heads: 4, hidden: 128, latent_patch: 2, context_offset: 1.0, time_features: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % (4 * self.heads) != 0 {
            return Err(Error::Config(format!(
                "decoder hidden {} must be divisible by 4*heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 || self.latent_patch == 0 || self.time_features % 2 != 0 {
            return Err(Error::Config("decoder sizes must be positive and time features even".into()));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        LATENT_CHANNELS * self.latent_patch * self.latent_patch
    }

    /// Feature split of each head over (frame, row, col): about a quarter of
    /// the rotation pairs for frames, the rest shared by rows and columns.
    pub fn rope_axes(&self) -> [usize; 3] {
        let pairs = self.hidden / self.heads / 2;
        let rc = (pairs - pairs / 4) / 2;
        [2 * (pairs - 2 * rc), 2 * rc, 2 * rc]
    }
}

/// Rectified-flow interpolant `(1-t) x0 + t eps`.
pub fn interpolate<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    x0.zip_map(eps, |a, e| s::<T>(1.0 - t) * a + s::<T>(t) * e)
}

/// Velocity target `eps - x0`.
pub fn velocity_target<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    eps.zip_map(x0, |e, a| e - a)
}

/// Distribution of training timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeSampling {
    Uniform,
    /// `t = sigmoid(z)` with `z ~ N(mean, std)`.
    LogitNormal { mean: f64, std: f64 },
}

impl Default for TimeSampling {
    fn default() -> Self {
        TimeSampling::LogitNormal { mean: 0.0, std: 1.0 }
    }
}

impl TimeSampling {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            TimeSampling::Uniform => rng.gen_range(0.0..1.0),
            TimeSampling::LogitNormal { mean, std } => {
                let z: f64 = rng.sample(StandardNormal);
                1.0 / (1.0 + (-(mean + std * z)).exp())
            }
        }
    }
}

pub fn gaussian<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Flow-matching loss of `predict(x_t, t)` against `eps - x0` with
/// `t ~ U(0,1)` and `eps ~ N(0, I)`.
pub fn flow_matching_loss<T: Scalar, R: Rng>(
    x0: &Tensor<T>,
    rng: &mut R,
    mut predict: impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
) -> Result<f64> {
    let t: f64 = rng.gen_range(0.0..1.0);
    let eps = gaussian(x0.shape(), rng);
    let xt = interpolate(x0, &eps, t)?;
    let v = predict(&xt, t)?;
    let target = velocity_target(x0, &eps)?;
    Ok(v.zip_map(&target, |a, b| (a - b) * (a - b))?.sum().to_f64_lossy() / x0.numel() as f64)
}

/// Latent `[4, h, w]` to patch tokens `[(h/p)*(w/p), 4*p*p]`.
pub fn patchify_latent<T: Scalar>(latent: &LatentImage<T>, p: usize) -> Result<(Tensor<T>, (usize, usize))> {
    let (h, w) = latent.hw();
    if h % p != 0 || w % p != 0 {
        return Err(Error::Structure(format!("latent {h}x{w} not divisible by patch {p}")));
    }
    let tok = latent.to_tokens();
    let idx = space_to_depth_index(Geom { batch: 1, h, w }, p);
    let mut out = Vec::with_capacity(tok.numel());
    for &i in &idx {
        out.extend_from_slice(tok.row(i as usize));
    }
    Ok((Tensor::new(&[h * w / (p * p), LATENT_CHANNELS * p * p], out)?, (h / p, w / p)))
}

pub fn unpatchify_latent<T: Scalar>(tokens: &Tensor<T>, grid: (usize, usize), p: usize) -> Result<LatentImage<T>> {
    let (gh, gw) = grid;
    if tokens.shape() != [gh * gw, LATENT_CHANNELS * p * p] {
        return Err(Error::Shape(format!("tokens {:?} do not fill a {gh}x{gw} grid", tokens.shape())));
    }
    let flat = tokens.reshape(&[gh * gw * p * p, LATENT_CHANNELS])?;
    let idx = depth_to_space_index(Geom { batch: 1, h: gh, w: gw }, p);
    let mut out = Vec::with_capacity(flat.numel());
    for &i in &idx {
        out.extend_from_slice(flat.row(i as usize));
    }
    LatentImage::from_tokens(&Tensor::new(&[gh * gw * p * p, LATENT_CHANNELS], out)?, gh * p, gw * p)
}

/// Sinusoidal features of `t * 1000`.
pub fn timestep_features<T: Scalar>(ts: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::from_f64_lossy((t * 1000.0 * f).cos()));
        }
        for i in 0..half {
            let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::from_f64_lossy((t * 1000.0 * f).sin()));
        }
    }
    Tensor::from_parts(vec![ts.len(), dim], out)
}

/// Concatenates context-image semantic tokens after the text tokens.
pub fn build_condition<T: Scalar>(bundle: &ConditionBundle<T>, semantic: Option<&Tensor<T>>) -> Result<ConditionBundle<T>> {
    match semantic {
        None => Ok(bundle.clone()),
        Some(sem) => Ok(ConditionBundle {
            cond_tokens: Tensor::concat_rows(&[&bundle.cond_tokens, sem])?,
            global_vec: bundle.global_vec.clone(),
            context_semantic_tokens: Some(sem.clone()),
            source_len: bundle.source_len,
        }),
    }
}

#[derive(Debug, Clone, Copy)]
struct Stream {
    modulation: Linear,
    qkv: Linear,
    out: Linear,
    mlp: Mlp,
}

impl Stream {
    fn new<T: Scalar>(init: &mut Init<T>, name: &str, h: usize) -> Result<Self> {
        Ok(Self {
            modulation: init.linear_std(&format!("{name}.modulation"), h, 6 * h, true, 0.0)?,
            qkv: init.linear(&format!("{name}.qkv"), h, 3 * h, true)?,
            out: init.linear(&format!("{name}.out"), h, h, true)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), h, 4 * h)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    visual: Stream,
    cond: Stream,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    latent_in: Linear,
    cond_in: Linear,
    /// Added to condition rows past the text tokens (context semantics).
    semantic_embed: crate::params::ParamId,
    time_mlp: Mlp,
    time_in: Linear,
    global_proj: Linear,
    blocks: Vec<Block>,
    final_mod: Linear,
    head: Linear,
}

/// One packed decoder batch inside a graph.
pub struct DecoderBatch {
    /// `[batch * grid, token_dim]`.
    pub noisy: Var,
    pub grid: (usize, usize),
    /// `[sum n_i, cond_dim]`.
    pub cond: Var,
    pub cond_lengths: Vec<usize>,
    /// Leading text-derived rows of each sample's condition; the rest are
    /// context semantic tokens.
    pub text_lengths: Vec<usize>,
    /// `[batch, cond_dim]`.
    pub global: Var,
    /// `[context samples * grid, token_dim]` for the samples flagged in `has_context`.
    pub context: Option<Var>,
    pub has_context: Vec<bool>,
    pub t: Vec<f64>,
}

/// Value-level input for one sample.
pub struct DecoderInput<'a, T: Scalar> {
    pub noisy_tokens: &'a Tensor<T>,
    pub grid: (usize, usize),
    pub context_tokens: Option<&'a Tensor<T>>,
    pub cond: &'a ConditionBundle<T>,
    pub t: f64,
}

struct Modulation {
    shift1: Var,
    scale1: Var,
    gate1: Var,
    shift2: Var,
    scale2: Var,
    gate2: Var,
}

fn modulation<T: Scalar>(g: &mut Graph<T>, lin: &Linear, signal: Var, lengths: &[usize], h: usize) -> Result<Modulation> {
    let m = lin.forward(g, signal)?;
    let m = broadcast_segments(g, m, lengths)?;
    let mut part = |i: usize| g.slice_cols(m, i * h, h);
    Ok(Modulation {
        shift1: part(0)?,
        scale1: part(1)?,
        gate1: part(2)?,
        shift2: part(3)?,
        scale2: part(4)?,
        gate2: part(5)?,
    })
}

impl Decoder {
    pub fn new<T: Scalar>(init: &mut Init<T>, cfg: DecoderConfig, cond_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        Ok(Self {
            cfg,
            latent_in: init.linear("decoder.latent_in", cfg.token_dim(), h, true)?,
            cond_in: init.linear("decoder.cond_in", cond_dim, h, true)?,
            semantic_embed: init.normal("decoder.semantic_embed", &[1, h], 0.02)?,
            time_in: init.linear("decoder.time_in", cfg.time_features, h, true)?,
            time_mlp: Mlp::new(init, "decoder.time_mlp", h, h)?,
            global_proj: init.linear("decoder.global_proj", cond_dim, h, true)?,
            blocks: (0..cfg.layers)
                .map(|i| {
                    Ok(Block {
                        visual: Stream::new(init, &format!("decoder.block{i}.visual"), h)?,
                        cond: Stream::new(init, &format!("decoder.block{i}.cond"), h)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            final_mod: init.linear_std("decoder.final_mod", h, 2 * h, true, 0.0)?,
            head: init.linear_std("decoder.head", h, cfg.token_dim(), true, 0.0)?,
        })
    }

    /// Modulation signal `silu(time_mlp(time) + global_proj(global))`, `[batch, hidden]`.
    fn signal<T: Scalar>(&self, g: &mut Graph<T>, t: &[f64], global: Var) -> Result<Var> {
        let tf = g.constant(timestep_features(t, self.cfg.time_features));
        let te = self.time_in.forward(g, tf)?;
        let te = self.time_mlp.forward(g, te)?;
        let ge = self.global_proj.forward(g, global)?;
        let sig = g.add(te, ge)?;
        g.silu(sig)
    }

    pub fn predict_vars<T: Scalar>(&self, g: &mut Graph<T>, batch: &DecoderBatch) -> Result<Var> {
        let b = batch.t.len();
        let (gh, gw) = batch.grid;
        let grid = gh * gw;
        let h = self.cfg.hidden;
        if batch.cond_lengths.len() != b
            || batch.text_lengths.len() != b
            || batch.text_lengths.iter().zip(&batch.cond_lengths).any(|(t, c)| t > c)
            || batch.has_context.len() != b || g.shape(batch.global)[0] != b {
            return Err(Error::Shape("decoder batch fields disagree on batch size".into()));
        }
        if g.shape(batch.noisy) != [b * grid, self.cfg.token_dim()] {
            return Err(Error::Shape(format!("noisy tokens {:?} vs {b} x {grid} grid", g.shape(batch.noisy))));
        }
        let n_ctx = batch.has_context.iter().filter(|&&c| c).count();
        match batch.context {
            Some(c) if g.shape(c) != [n_ctx * grid, self.cfg.token_dim()] => {
                return Err(Error::Shape(format!("context tokens {:?} vs {n_ctx} x {grid}", g.shape(c))))
            }
            None if n_ctx > 0 => return Err(Error::Contract("has_context set without context tokens".into())),
            _ => {}
        }
        let cond_total: usize = batch.cond_lengths.iter().sum();
        if g.shape(batch.cond)[0] != cond_total {
            return Err(Error::Shape("cond lengths do not cover cond tokens".into()));
        }

        // visual stream rows: per sample [noisy_i, context_i]
        let vis_lengths: Vec<usize> = batch.has_context.iter().map(|&c| if c { 2 * grid } else { grid }).collect();
        let lat = match batch.context {
            Some(c) => g.concat_rows(&[batch.noisy, c])?,
            None => batch.noisy,
        };
        let mut vis_idx = Vec::with_capacity(vis_lengths.iter().sum());
        let mut ctx_row = b * grid;
        for (i, &has) in batch.has_context.iter().enumerate() {
            vis_idx.extend((i * grid..(i + 1) * grid).map(|r| r as u32));
            if has {
                vis_idx.extend((ctx_row..ctx_row + grid).map(|r| r as u32));
                ctx_row += grid;
            }
        }
        let lat = g.gather_rows(lat, &Arc::new(vis_idx))?;
        let mut vis = self.latent_in.forward(g, lat)?;
        let mut cond = self.cond_in.forward(g, batch.cond)?;
        if batch.text_lengths != batch.cond_lengths {
            let idx: Vec<u32> = batch
                .cond_lengths
                .iter()
                .zip(&batch.text_lengths)
                .flat_map(|(&n, &t)| (0..n).map(move |r| if r < t { crate::graph::ZERO_INDEX } else { 0 }))
                .collect();
            let se = g.param(self.semantic_embed);
            let se = g.gather_rows(se, &Arc::new(idx))?;
            cond = g.add(cond, se)?;
        }

        // joint order per sample [cond_i, vis_i] over concat [cond; vis]
        let vis_total: usize = vis_lengths.iter().sum();
        let mut joint = Vec::with_capacity(cond_total + vis_total);
        let mut to_cond = vec![0u32; cond_total];
        let mut to_vis = vec![0u32; vis_total];
        let mut positions = Vec::with_capacity(cond_total + vis_total);
        let (mut co, mut vo) = (0usize, 0usize);
        for i in 0..b {
            for r in 0..batch.cond_lengths[i] {
                to_cond[co + r] = joint.len() as u32;
                joint.push((co + r) as u32);
                positions.push(vec![0.0, 0.0, 0.0]);
            }
            for r in 0..vis_lengths[i] {
                to_vis[vo + r] = joint.len() as u32;
                joint.push((cond_total + vo + r) as u32);
                let (frame, p) = if r < grid { (0.0, r) } else { (self.cfg.context_offset, r - grid) };
                positions.push(vec![frame, (p / gw) as f64, (p % gw) as f64]);
            }
            co += batch.cond_lengths[i];
            vo += vis_lengths[i];
        }
        let (joint, to_cond, to_vis) = (Arc::new(joint), Arc::new(to_cond), Arc::new(to_vis));
        let rope = Arc::new(RopeTable::new(&positions, &self.cfg.rope_axes())?);
        let seg: Vec<usize> = (0..b).map(|i| batch.cond_lengths[i] + vis_lengths[i]).collect();
        let layout = AttnLayout::packed(seg, false);

        let signal = self.signal(g, &batch.t, batch.global)?;
        for blk in &self.blocks {
            let mv = modulation(g, &blk.visual.modulation, signal, &vis_lengths, h)?;
            let mc = modulation(g, &blk.cond.modulation, signal, &batch.cond_lengths, h)?;
            let nv = RmsNorm::plain().forward(g, vis)?;
            let nv = g.affine_mod(nv, mv.scale1, mv.shift1)?;
            let nc = RmsNorm::plain().forward(g, cond)?;
            let nc = g.affine_mod(nc, mc.scale1, mc.shift1)?;
            let qv = blk.visual.qkv.forward(g, nv)?;
            let qc = blk.cond.qkv.forward(g, nc)?;
            let both = g.concat_rows(&[qc, qv])?;
            let qkv = g.gather_rows(both, &joint)?;
            let q = g.slice_cols(qkv, 0, h)?;
            let k = g.slice_cols(qkv, h, h)?;
            let v = g.slice_cols(qkv, 2 * h, h)?;
            let q = g.rope(q, &rope)?;
            let k = g.rope(k, &rope)?;
            let a = g.attention(q, k, v, self.cfg.heads, &layout)?;
            let av = g.gather_rows(a, &to_vis)?;
            let ac = g.gather_rows(a, &to_cond)?;
            let av = blk.visual.out.forward(g, av)?;
            let ac = blk.cond.out.forward(g, ac)?;
            let av = g.mul(av, mv.gate1)?;
            let ac = g.mul(ac, mc.gate1)?;
            vis = g.add(vis, av)?;
            cond = g.add(cond, ac)?;

            let nv = RmsNorm::plain().forward(g, vis)?;
            let nv = g.affine_mod(nv, mv.scale2, mv.shift2)?;
            let fv = blk.visual.mlp.forward(g, nv)?;
            let fv = g.mul(fv, mv.gate2)?;
            vis = g.add(vis, fv)?;
            let nc = RmsNorm::plain().forward(g, cond)?;
            let nc = g.affine_mod(nc, mc.scale2, mc.shift2)?;
            let fc = blk.cond.mlp.forward(g, nc)?;
            let fc = g.mul(fc, mc.gate2)?;
            cond = g.add(cond, fc)?;
        }
        // output head over noisy positions only
        let mut noisy_rows = Vec::with_capacity(b * grid);
        let mut vo = 0;
        for &l in &vis_lengths {
            noisy_rows.extend((vo..vo + grid).map(|r| r as u32));
            vo += l;
        }
        let x = g.gather_rows(vis, &Arc::new(noisy_rows))?;
        let fm = self.final_mod.forward(g, signal)?;
        let fm = broadcast_segments(g, fm, &vec![grid; b])?;
        let shift = g.slice_cols(fm, 0, h)?;
        let scale = g.slice_cols(fm, h, h)?;
        let x = RmsNorm::plain().forward(g, x)?;
        let x = g.affine_mod(x, scale, shift)?;
        self.head.forward(g, x)
    }

    /// Value-level velocity for one sample.
    pub fn predict_velocity<T: Scalar>(&self, store: &ParamStore<T>, input: &DecoderInput<T>) -> Result<Tensor<T>> {
        Ok(self.predict_batch(store, std::slice::from_ref(input))?.remove(0))
    }

    /// Value-level velocities for several samples sharing one grid size.
    pub fn predict_batch<T: Scalar>(&self, store: &ParamStore<T>, inputs: &[DecoderInput<T>]) -> Result<Vec<Tensor<T>>> {
        let first = inputs.first().ok_or_else(|| Error::Contract("empty decoder batch".into()))?;
        let grid = first.grid;
        if inputs.iter().any(|i| i.grid != grid) {
            return Err(Error::Shape("decoder batch mixes grid sizes".into()));
        }
        let mut g = Graph::new(store);
        let noisy: Vec<&Tensor<T>> = inputs.iter().map(|i| i.noisy_tokens).collect();
        let noisy = g.constant(Tensor::concat_rows(&noisy)?);
        let conds: Vec<&Tensor<T>> = inputs.iter().map(|i| &i.cond.cond_tokens).collect();
        let cond = g.constant(Tensor::concat_rows(&conds)?);
        let globals: Vec<Tensor<T>> =
            inputs.iter().map(|i| i.cond.global_vec.reshape(&[1, i.cond.global_vec.numel()])).collect::<Result<_>>()?;
        let global = g.constant(Tensor::concat_rows(&globals.iter().collect::<Vec<_>>())?);
        let ctx: Vec<&Tensor<T>> = inputs.iter().filter_map(|i| i.context_tokens).collect();
        let context = if ctx.is_empty() { None } else { Some(g.constant(Tensor::concat_rows(&ctx)?)) };
        let batch = DecoderBatch {
            noisy,
            grid,
            cond,
            cond_lengths: inputs.iter().map(|i| i.cond.cond_tokens.rows()).collect(),
            text_lengths: inputs.iter().map(|i| i.cond.source_len.min(i.cond.cond_tokens.rows())).collect(),
            global,
            context,
            has_context: inputs.iter().map(|i| i.context_tokens.is_some()).collect(),
            t: inputs.iter().map(|i| i.t).collect(),
        };
        let out = self.predict_vars(&mut g, &batch)?;
        let v = g.value(out);
        let n = grid.0 * grid.1;
        (0..inputs.len()).map(|i| v.slice_rows(i * n, n)).collect()
    }
}
