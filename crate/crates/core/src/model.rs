//! The unified model: encoder, adapter, LLM, refiner, decoder and VAE over a
//! single parameter store, with the condition path shared by training and
//! inference.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, VisualAdapter};
use crate::decoder::{
    gaussian, interpolate, patchify_latent, unpatchify_latent, velocity_target, Decoder, DecoderBatch, DecoderConfig,
    TimeSampling,
};
use crate::encoder::{EncoderConfig, VisualEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::llm::{encode_text, Decode, Llm, LlmConfig, Part, BOS, EOS, SEP};
use crate::nn::Init;
use crate::params::ParamStore;
use crate::refiner::{ConditionBundle, Refiner, RefinerConfig};
use crate::sampler::{sample_edit, sample_t2i, DecoderModel, EditCondition, SamplerConfig};
use crate::tensor::{s, Scalar, Tensor};
use crate::vae::{LatentImage, Vae, VaeConfig, DOWNSAMPLE};

/// Module prefixes in reporting order.
pub const MODULES: [&str; 6] = ["llm", "decoder", "encoder", "adapter", "vae", "refiner"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub llm: LlmConfig,
    pub refiner: RefinerConfig,
    pub decoder: DecoderConfig,
    pub vae: VaeConfig,
    /// Side of the square images every task uses.
    pub image_size: usize,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            adapter: AdapterConfig::default(),
            llm: LlmConfig::toy(),
            refiner: RefinerConfig::toy(),
            decoder: DecoderConfig::toy(),
            vae: VaeConfig::toy(),
            image_size: 64,
        }
    }

    /// Smallest consistent geometry, for fast tests.
    pub fn tiny() -> Self {
        let mut cfg = Self::toy();
        cfg.encoder.hidden_dim = 16;
        cfg.encoder.heads = 2;
        cfg.encoder.layers = 1;
        cfg.llm.llm_dim = 16;
        cfg.llm.heads = 2;
        cfg.llm.layers = 2;
        cfg.adapter.vocab_size = 8;
        cfg.refiner.cond_dim = 16;
        cfg.refiner.heads = 2;
        cfg.decoder.hidden = 16;
        cfg.decoder.heads = 2;
        cfg.decoder.layers = 1;
        cfg.decoder.time_features = 8;
        cfg.vae = VaeConfig { hidden: 8, res_blocks: 1, head_hidden: 8, kl_weight: 1e-6 };
        cfg.image_size = 32;
        cfg
    }

    /// Full-size geometry; only usable for dry-run sizing.
    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig::paper(),
            adapter: AdapterConfig { shuffle: 2, vocab_size: 16_384, temperature: 1.0 },
            llm: LlmConfig::paper(),
            refiner: RefinerConfig { cond_dim: 1024, heads: 16, ..RefinerConfig::toy() },
            decoder: DecoderConfig::paper(),
            vae: VaeConfig { hidden: 512, res_blocks: 4, head_hidden: 1024, kl_weight: 1e-6 },
            image_size: 448,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.llm.validate()?;
        self.refiner.validate()?;
        self.decoder.validate()?;
        let n = self.image_size;
        if n == 0 || n % self.encoder.patch_size != 0 || n % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!(
                "image_size {n} must be a multiple of patch {} and {DOWNSAMPLE}",
                self.encoder.patch_size
            )));
        }
        if (n / DOWNSAMPLE) % self.decoder.latent_patch != 0 {
            return Err(Error::Config("latent side must be a multiple of latent_patch".into()));
        }
        if self.adapter.shuffle == 0 || self.adapter.vocab_size == 0 || self.adapter.temperature <= 0.0 {
            return Err(Error::Config(format!("invalid adapter config {:?}", self.adapter)));
        }
        Ok(())
    }

    /// Decoder token grid of one image.
    pub fn latent_grid(&self) -> (usize, usize) {
        let side = self.image_size / DOWNSAMPLE / self.decoder.latent_patch;
        (side, side)
    }
}

/// Per-module parameter counts without allocating the weights.
pub fn param_counts(cfg: &ModelConfig) -> Result<Vec<(&'static str, usize)>> {
    cfg.validate()?;
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::dry(&mut store);
    build_modules(&mut init, cfg)?;
    let counts = init.dry_counts().unwrap_or_default();
    Ok(MODULES
        .iter()
        .map(|&m| (m, counts.iter().filter(|(n, _)| crate::params::has_prefix(n, m)).map(|(_, c)| c).sum()))
        .collect())
}

type Modules = (Llm, Decoder, VisualEncoder, VisualAdapter, Vae, Refiner);

fn build_modules<T: Scalar>(init: &mut Init<T>, cfg: &ModelConfig) -> Result<Modules> {
    let llm = Llm::new(init, cfg.llm)?;
    let decoder = Decoder::new(init, cfg.decoder, cfg.refiner.cond_dim)?;
    let encoder = VisualEncoder::new(init, cfg.encoder)?;
    let adapter = VisualAdapter::new(init, cfg.adapter, cfg.encoder.hidden_dim, cfg.llm.llm_dim)?;
    let vae = Vae::new(init, cfg.vae)?;
    let refiner = Refiner::new(init, cfg.refiner, cfg.llm.llm_dim)?;
    Ok((llm, decoder, encoder, adapter, vae, refiner))
}

/// Which conditions of a sample are replaced by the learned null embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drop {
    Keep,
    Text,
    Image,
    Both,
}

impl Drop {
    fn text(self) -> bool {
        matches!(self, Drop::Keep | Drop::Image)
    }

    fn image(self) -> bool {
        matches!(self, Drop::Keep | Drop::Text)
    }
}

/// One generation condition: a prompt or instruction with an optional source image.
#[derive(Debug, Clone, Copy)]
pub struct CondItem<'a> {
    pub text: &'a str,
    pub image: Option<&'a Image>,
    pub drop: Drop,
    /// Content key for caching frozen features; `None` disables caching.
    pub key: Option<&'a str>,
}

impl CondItem<'_> {
    fn uses_text(&self) -> bool {
        self.drop.text()
    }

    fn uses_image(&self) -> bool {
        self.image.is_some() && self.drop.image()
    }
}

/// Upstream features of one condition item.
#[derive(Debug, Clone)]
pub struct Features<T: Scalar> {
    pub h_last: Option<Tensor<T>>,
    pub h_prev: Option<Tensor<T>>,
    pub visual: Option<Tensor<T>>,
}

/// Bounded memo of frozen upstream features, valid while the encoder,
/// adapter and LLM weights stay fixed.
#[derive(Debug)]
pub struct FeatureCache<T: Scalar> {
    map: HashMap<String, Features<T>>,
    cap: usize,
    pub hits: usize,
    pub misses: usize,
}

impl<T: Scalar> FeatureCache<T> {
    pub fn new(cap: usize) -> Self {
        Self { map: HashMap::new(), cap, hits: 0, misses: 0 }
    }

    fn key(item: &CondItem) -> Option<String> {
        item.key.map(|k| format!("{}|{}|{}|{}", item.uses_text(), item.uses_image(), item.text, k))
    }
}

/// Packed upstream outputs inside a graph with per-item row ranges.
struct UpstreamVars {
    h_last: Option<Var>,
    h_prev: Option<Var>,
    llm: Vec<Option<(usize, usize)>>,
    visual: Option<Var>,
    vis: Vec<Option<(usize, usize)>>,
}

/// Packed conditioning of a batch inside a graph.
pub struct CondVars {
    pub cond: Var,
    pub cond_lengths: Vec<usize>,
    pub text_lengths: Vec<usize>,
    pub global: Var,
}

/// An understanding example: image, question and answer text.
#[derive(Debug, Clone, Copy)]
pub struct QaItem<'a> {
    pub image: &'a Image,
    pub question: &'a str,
    pub answer: &'a str,
}

/// One flow-matching training sample.
pub struct FlowItem<'a, T: Scalar> {
    pub cond: CondItem<'a>,
    /// Clean latent tokens of the target image.
    pub target: &'a Tensor<T>,
    /// Clean latent tokens of the source image for edits.
    pub context: Option<&'a Tensor<T>>,
}

fn ranges(lengths: &[usize]) -> Vec<Option<(usize, usize)>> {
    let mut off = 0;
    lengths
        .iter()
        .map(|&l| {
            let r = (l > 0).then_some((off, l));
            off += l;
            r
        })
        .collect()
}

fn rows<T: Scalar>(t: &Tensor<T>, r: Option<(usize, usize)>) -> Result<Option<Tensor<T>>> {
    r.map(|(s, l)| t.slice_rows(s, l)).transpose()
}

fn pack<T: Scalar>(g: &mut Graph<T>, parts: &[&Tensor<T>]) -> Result<Option<Var>> {
    if parts.is_empty() {
        return Ok(None);
    }
    Ok(Some(g.constant(Tensor::concat_rows(parts)?)))
}

pub struct UnifiedModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub llm: Llm,
    pub decoder: Decoder,
    pub encoder: VisualEncoder,
    pub adapter: VisualAdapter,
    pub vae: Vae,
    pub refiner: Refiner,
}

impl<T: Scalar> UnifiedModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (llm, decoder, encoder, adapter, vae, refiner) = build_modules(&mut Init::new(&mut store, seed), &cfg)?;
        Ok(Self { cfg, store, llm, decoder, encoder, adapter, vae, refiner })
    }

    pub fn module_counts(&self) -> Vec<(&'static str, usize)> {
        MODULES.iter().map(|&m| (m, self.store.numel_under(m))).collect()
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let n = self.cfg.image_size;
        if img.width != n || img.height != n {
            return Err(Error::Resize(format!("expected {n}x{n} image, got {}x{}", img.width, img.height)));
        }
        Ok(())
    }

    fn prompt_ids(text: &str) -> Result<Vec<u32>> {
        let mut ids = vec![BOS];
        ids.extend(encode_text(text)?);
        Ok(ids)
    }

    /// Visual embeddings `[sum tokens, llm_dim]` of `images` and their lengths.
    fn visual_vars(&self, g: &mut Graph<T>, images: &[&Image]) -> Result<(Var, Vec<usize>)> {
        for img in images {
            self.check_image(img)?;
        }
        let enc = self.encoder.forward(g, images)?;
        let ad = self.adapter.forward(g, enc.features, &enc.grids)?;
        Ok((ad.embeddings, ad.lengths))
    }

    fn upstream_vars(&self, g: &mut Graph<T>, items: &[CondItem]) -> Result<UpstreamVars> {
        let images: Vec<&Image> = items.iter().filter(|i| i.uses_image()).filter_map(|i| i.image).collect();
        let (visual, img_lengths) = if images.is_empty() {
            (None, Vec::new())
        } else {
            let (v, l) = self.visual_vars(g, &images)?;
            (Some(v), l)
        };
        let mut vis_lengths = Vec::with_capacity(items.len());
        let mut img_iter = img_lengths.iter();
        let mut img_off = Vec::with_capacity(items.len());
        let mut off = 0;
        for it in items {
            let l = if it.uses_image() { *img_iter.next().expect("one length per image") } else { 0 };
            img_off.push(off);
            off += l;
            vis_lengths.push(l);
        }
        let ids: Vec<Vec<u32>> =
            items.iter().map(|i| if i.uses_text() { Self::prompt_ids(i.text) } else { Ok(Vec::new()) }).collect::<Result<_>>()?;
        let mut seqs = Vec::new();
        let mut llm_lengths = Vec::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if !it.uses_text() {
                llm_lengths.push(0);
                continue;
            }
            let mut parts = vec![Part::Text(&ids[i][..1])];
            if let (true, Some(v)) = (vis_lengths[i] > 0, visual) {
                parts.push(Part::Visual { var: v, start: img_off[i], len: vis_lengths[i] });
            }
            parts.push(Part::Text(&ids[i][1..]));
            let (x, tags) = self.llm.assemble(g, &parts)?;
            llm_lengths.push(tags.len());
            seqs.push(x);
        }
        let (h_last, h_prev) = if seqs.is_empty() {
            (None, None)
        } else {
            let x = g.concat_rows(&seqs)?;
            let lens: Vec<usize> = llm_lengths.iter().copied().filter(|&l| l > 0).collect();
            let h = self.llm.forward_hidden_vars(g, x, &lens)?;
            (Some(h.h_last), Some(h.h_prev))
        };
        Ok(UpstreamVars { h_last, h_prev, llm: ranges(&llm_lengths), visual, vis: ranges(&vis_lengths) })
    }

    /// Value-level upstream features of each item, memoized in `cache`.
    pub fn features(&self, items: &[CondItem], cache: Option<&mut FeatureCache<T>>) -> Result<Vec<Features<T>>> {
        let mut out: Vec<Option<Features<T>>> = vec![None; items.len()];
        let keys: Vec<Option<String>> = items.iter().map(FeatureCache::<T>::key).collect();
        let mut cache = cache;
        if let Some(c) = cache.as_deref_mut() {
            for (o, k) in out.iter_mut().zip(&keys) {
                if let Some(f) = k.as_ref().and_then(|k| c.map.get(k)) {
                    *o = Some(f.clone());
                    c.hits += 1;
                }
            }
        }
        let missing: Vec<usize> = (0..items.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let sub: Vec<CondItem> = missing.iter().map(|&i| items[i]).collect();
            let mut g = Graph::new(&self.store);
            let up = self.upstream_vars(&mut g, &sub)?;
            let h_last = up.h_last.map(|v| g.value(v).clone());
            let h_prev = up.h_prev.map(|v| g.value(v).clone());
            let visual = up.visual.map(|v| g.value(v).clone());
            for (j, &i) in missing.iter().enumerate() {
                let f = Features {
                    h_last: h_last.as_ref().map(|t| rows(t, up.llm[j])).transpose()?.flatten(),
                    h_prev: h_prev.as_ref().map(|t| rows(t, up.llm[j])).transpose()?.flatten(),
                    visual: visual.as_ref().map(|t| rows(t, up.vis[j])).transpose()?.flatten(),
                };
                if let (Some(c), Some(k)) = (cache.as_deref_mut(), &keys[i]) {
                    c.misses += 1;
                    if c.map.len() < c.cap {
                        c.map.insert(k.clone(), f.clone());
                    }
                }
                out[i] = Some(f);
            }
        }
        Ok(out.into_iter().map(|f| f.expect("every item resolved")).collect())
    }

    fn constant_upstream(&self, g: &mut Graph<T>, feats: &[Features<T>]) -> Result<UpstreamVars> {
        let lens = |f: fn(&Features<T>) -> Option<&Tensor<T>>| -> Vec<usize> {
            feats.iter().map(|x| f(x).map_or(0, |t| t.rows())).collect()
        };
        let llm_lengths = lens(|f| f.h_last.as_ref());
        let vis_lengths = lens(|f| f.visual.as_ref());
        let last: Vec<&Tensor<T>> = feats.iter().filter_map(|f| f.h_last.as_ref()).collect();
        let prev: Vec<&Tensor<T>> = feats.iter().filter_map(|f| f.h_prev.as_ref()).collect();
        let vis: Vec<&Tensor<T>> = feats.iter().filter_map(|f| f.visual.as_ref()).collect();
        Ok(UpstreamVars {
            h_last: pack(g, &last)?,
            h_prev: pack(g, &prev)?,
            llm: ranges(&llm_lengths),
            visual: pack(g, &vis)?,
            vis: ranges(&vis_lengths),
        })
    }

    /// Builds refined conditioning for a batch. With a cache, the upstream
    /// modules are evaluated outside the graph and treated as constants.
    pub fn condition_vars(
        &self,
        g: &mut Graph<T>,
        items: &[CondItem],
        cache: Option<&mut FeatureCache<T>>,
    ) -> Result<CondVars> {
        if items.is_empty() {
            return Err(Error::Contract("empty condition batch".into()));
        }
        let up = match cache {
            Some(c) => {
                let feats = self.features(items, Some(c))?;
                self.constant_upstream(g, &feats)?
            }
            None => self.upstream_vars(g, items)?,
        };
        let n_text = up.llm.iter().flatten().count();
        let n_vis = up.vis.iter().flatten().count();

        let mut pieces = Vec::new();
        let mut globals = Vec::new();
        let text_out = match (up.h_last, up.h_prev) {
            (Some(hl), Some(hp)) => {
                let fused = self.refiner.fuse_vars(g, hl, hp)?;
                let lens: Vec<usize> = up.llm.iter().flatten().map(|r| r.1).collect();
                let r = self.refiner.refine_vars(g, fused, &lens)?;
                pieces.push(r.cond_tokens);
                globals.push(r.global);
                Some(ranges(&lens))
            }
            _ => None,
        };
        let text_rows: usize = up.llm.iter().flatten().map(|r| r.1).sum();
        let sem_out = match up.visual {
            Some(v) => {
                let sem = self.refiner.semantic_proj.forward(g, v)?;
                let lens: Vec<usize> = up.vis.iter().flatten().map(|r| r.1).collect();
                let r = self.refiner.refine_vars(g, sem, &lens)?;
                pieces.push(r.cond_tokens);
                Some(ranges(&lens))
            }
            None => None,
        };
        let sem_rows: usize = up.vis.iter().flatten().map(|r| r.1).sum();
        let null_row = (text_rows + sem_rows) as u32;
        pieces.push(g.param(self.refiner.null_text));
        globals.push(g.param(self.refiner.null_global));
        let all = g.concat_rows(&pieces)?;
        let all_globals = g.concat_rows(&globals)?;

        let (mut ti, mut si) = (0, 0);
        let mut idx = Vec::new();
        let mut gidx = Vec::with_capacity(items.len());
        let (mut cond_lengths, mut text_lengths) = (Vec::new(), Vec::new());
        for i in 0..items.len() {
            let start = idx.len();
            match (up.llm[i], &text_out) {
                (Some(_), Some(tr)) => {
                    let (s0, l) = tr[ti].expect("nonempty text range");
                    idx.extend((s0..s0 + l).map(|r| r as u32));
                    gidx.push(ti as u32);
                    ti += 1;
                }
                _ => {
                    idx.push(null_row);
                    gidx.push(n_text as u32);
                }
            }
            text_lengths.push(idx.len() - start);
            if let (Some(_), Some(sr)) = (up.vis[i], &sem_out) {
                let (s0, l) = sr[si].expect("nonempty visual range");
                idx.extend((text_rows + s0..text_rows + s0 + l).map(|r| r as u32));
                si += 1;
            }
            cond_lengths.push(idx.len() - start);
        }
        debug_assert_eq!((ti, si), (n_text, n_vis));
        let cond = g.gather_rows(all, &Arc::new(idx))?;
        let global = g.gather_rows(all_globals, &Arc::new(gidx))?;
        Ok(CondVars { cond, cond_lengths, text_lengths, global })
    }

    /// Value-level condition bundles.
    pub fn conditions(&self, items: &[CondItem]) -> Result<Vec<ConditionBundle<T>>> {
        let mut g = Graph::new(&self.store);
        let cv = self.condition_vars(&mut g, items, None)?;
        let cond = g.value(cv.cond);
        let global = g.value(cv.global);
        let mut off = 0;
        (0..items.len())
            .map(|i| {
                let (n, t) = (cv.cond_lengths[i], cv.text_lengths[i]);
                let toks = cond.slice_rows(off, n)?;
                off += n;
                Ok(ConditionBundle {
                    context_semantic_tokens: if n > t { Some(toks.slice_rows(t, n - t)?) } else { None },
                    cond_tokens: toks,
                    global_vec: Tensor::new(&[global.cols()], global.row(i).to_vec())?,
                    source_len: t,
                })
            })
            .collect()
    }

    /// The fully unconditional bundle.
    pub fn null_condition(&self) -> ConditionBundle<T> {
        let text = &self.store.get(self.refiner.null_text).tensor;
        let global = &self.store.get(self.refiner.null_global).tensor;
        ConditionBundle {
            cond_tokens: text.clone(),
            global_vec: Tensor::new(&[global.numel()], global.data().to_vec()).expect("global shape"),
            context_semantic_tokens: None,
            source_len: 1,
        }
    }

    /// Scaled, patchified latent tokens of images (VAE posterior means).
    pub fn latent_tokens(&self, images: &[&Image]) -> Result<Vec<Tensor<T>>> {
        let scale = self.vae.scale_value(&self.store);
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            for img in chunk {
                self.check_image(img)?;
            }
            for lat in self.vae.encode_batch(&self.store, chunk)? {
                let scaled = LatentImage { data: lat.data.map(|v| v * scale), source_hw: lat.source_hw };
                out.push(patchify_latent(&scaled, self.cfg.decoder.latent_patch)?.0);
            }
        }
        Ok(out)
    }

    /// Decodes generated latents (in scaled units) to images.
    pub fn decode_latents(&self, latents: &[LatentImage<T>]) -> Result<Vec<Image>> {
        let inv = T::one() / self.vae.scale_value(&self.store);
        let unscaled: Vec<LatentImage<T>> =
            latents.iter().map(|l| LatentImage { data: l.data.map(|v| v * inv), source_hw: l.source_hw }).collect();
        let mut out = Vec::with_capacity(latents.len());
        for chunk in unscaled.chunks(16) {
            out.extend(self.vae.decode_batch(&self.store, chunk)?);
        }
        Ok(out)
    }

    /// Decodes scaled latent tokens to images.
    pub fn decode_tokens(&self, tokens: &[Tensor<T>]) -> Result<Vec<Image>> {
        let lats: Vec<LatentImage<T>> = tokens
            .iter()
            .map(|t| unpatchify_latent(t, self.cfg.latent_grid(), self.cfg.decoder.latent_patch))
            .collect::<Result<_>>()?;
        self.decode_latents(&lats)
    }

    /// Mean next-token cross-entropy of the answers given image and question.
    pub fn understanding_loss(&self, g: &mut Graph<T>, items: &[QaItem]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Contract("empty understanding batch".into()));
        }
        let images: Vec<&Image> = items.iter().map(|i| i.image).collect();
        let (visual, vis_lengths) = self.visual_vars(g, &images)?;
        let mut seqs = Vec::with_capacity(items.len());
        let mut lengths = Vec::with_capacity(items.len());
        let mut all_tags = Vec::new();
        let mut targets = Vec::new();
        let mut off = 0;
        for (it, &vl) in items.iter().zip(&vis_lengths) {
            let mut q = encode_text(it.question)?;
            q.push(SEP);
            let mut a = encode_text(it.answer)?;
            a.push(EOS);
            let tail: Vec<u32> = q.iter().chain(&a).copied().collect();
            let (x, tags) = self.llm.assemble(
                g,
                &[Part::Text(&[BOS]), Part::Visual { var: visual, start: off, len: vl }, Part::Text(&tail)],
            )?;
            off += vl;
            let n = tags.len();
            let first_answer = n - a.len();
            targets.extend((0..n).map(|p| (p + 1 >= first_answer && p + 1 < n).then(|| a[p + 1 - first_answer])));
            all_tags.extend(tags);
            lengths.push(n);
            seqs.push(x);
        }
        let x = g.concat_rows(&seqs)?;
        let h = self.llm.forward_hidden_vars(g, x, &lengths)?;
        self.llm.loss_vars(g, h.h_last, &all_tags, &targets)
    }

    /// Flow-matching loss of a batch sharing the configured image size; per
    /// sample `t` from `time` and Gaussian noise drawn from `rng`.
    pub fn flow_loss<R: Rng>(
        &self,
        g: &mut Graph<T>,
        items: &[FlowItem<T>],
        cache: Option<&mut FeatureCache<T>>,
        time: TimeSampling,
        rng: &mut R,
    ) -> Result<Var> {
        let conds: Vec<CondItem> = items.iter().map(|i| i.cond).collect();
        let cv = self.condition_vars(g, &conds, cache)?;
        let grid = self.cfg.latent_grid();
        let mut noisy = Vec::with_capacity(items.len());
        let mut target = Vec::with_capacity(items.len());
        let mut ts = Vec::with_capacity(items.len());
        let mut ctx = Vec::new();
        let mut has_context = Vec::with_capacity(items.len());
        for it in items {
            let t = time.sample(rng);
            let eps = gaussian::<T, _>(it.target.shape(), rng);
            noisy.push(interpolate(it.target, &eps, t)?);
            target.push(velocity_target(it.target, &eps)?);
            ts.push(t);
            let use_ctx = it.cond.uses_image() && it.context.is_some();
            if use_ctx {
                ctx.push(it.context.expect("checked"));
            }
            has_context.push(use_ctx);
        }
        let noisy = pack(g, &noisy.iter().collect::<Vec<_>>())?.expect("nonempty batch");
        let context = pack(g, &ctx)?;
        let batch = DecoderBatch {
            noisy,
            grid,
            cond: cv.cond,
            cond_lengths: cv.cond_lengths,
            text_lengths: cv.text_lengths,
            global: cv.global,
            context,
            has_context,
            t: ts,
        };
        let pred = self.decoder.predict_vars(g, &batch)?;
        let target = pack(g, &target.iter().collect::<Vec<_>>())?.expect("nonempty batch");
        g.mse(pred, target)
    }

    /// Text-to-image generation; sample `i` of a call uses noise stream `i`.
    pub fn generate(&self, prompts: &[&str], cfg: &SamplerConfig) -> Result<Vec<Image>> {
        let items: Vec<CondItem> =
            prompts.iter().map(|p| CondItem { text: p, image: None, drop: Drop::Keep, key: None }).collect();
        let bundles = self.conditions(&items)?;
        let refs: Vec<&ConditionBundle<T>> = bundles.iter().collect();
        let null = self.null_condition();
        let model = DecoderModel { decoder: &self.decoder, store: &self.store };
        let lats = sample_t2i(&model, &refs, &null, cfg, self.cfg.latent_grid())?;
        self.decode_latents(&lats)
    }

    /// Instruction-based editing of `(source, instruction)` pairs.
    pub fn edit(&self, items: &[(&Image, &str)], cfg: &SamplerConfig) -> Result<Vec<Image>> {
        let full: Vec<CondItem> =
            items.iter().map(|(img, text)| CondItem { text, image: Some(img), drop: Drop::Keep, key: None }).collect();
        let img_only: Vec<CondItem> = full.iter().map(|c| CondItem { drop: Drop::Text, ..*c }).collect();
        let full = self.conditions(&full)?;
        let img_only = self.conditions(&img_only)?;
        let sources: Vec<&Image> = items.iter().map(|(i, _)| *i).collect();
        let ctx = self.latent_tokens(&sources)?;
        let conds: Vec<EditCondition<T>> = (0..items.len())
            .map(|i| EditCondition { full: &full[i], image_only: &img_only[i], context: Some(&ctx[i]) })
            .collect();
        let null = self.null_condition();
        let model = DecoderModel { decoder: &self.decoder, store: &self.store };
        let lats = sample_edit(&model, &conds, &null, cfg, self.cfg.latent_grid())?;
        self.decode_latents(&lats)
    }

    /// Answers a question about an image by greedy decoding.
    pub fn answer(&self, image: &Image, question: &str, max_new: usize) -> Result<String> {
        self.check_image(image)?;
        let mut g = Graph::new(&self.store);
        let (visual, lens) = self.visual_vars(&mut g, &[image])?;
        let mut q = encode_text(question)?;
        q.push(SEP);
        let (x, tags) =
            self.llm.assemble(&mut g, &[Part::Text(&[BOS]), Part::Visual { var: visual, start: 0, len: lens[0] }, Part::Text(&q)])?;
        let prompt = crate::llm::MultimodalSequence { embeddings: g.value(x).clone(), tags, targets: None };
        let ids = self.llm.generate_text(&self.store, &prompt, max_new, Decode::Greedy)?;
        Ok(crate::llm::decode_text(&ids))
    }

    /// Sets the latent scale to the reciprocal standard deviation of the
    /// posterior means of `images`.
    pub fn calibrate_latent_scale(&mut self, images: &[Image]) -> Result<f64> {
        let id = self.vae.latent_scale;
        self.store.get_mut(id).tensor.data_mut()[0] = T::one();
        let refs: Vec<&Image> = images.iter().collect();
        let toks = self.latent_tokens(&refs)?;
        let vals: Vec<f64> = toks.iter().flat_map(|t| t.to_f64_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let scale = 1.0 / var.sqrt().max(1e-6);
        self.store.get_mut(id).tensor.data_mut()[0] = s(scale);
        Ok(scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;


    fn image(seed: u32) -> Image {
        let data = (0..32 * 32 * 3).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 255) as f32 / 255.0).collect();
        Image::new(32, 32, data).unwrap()
    }

    #[test]
    fn module_counts_follow_reporting_order_and_match_dry_run() {
        let cfg = ModelConfig::tiny();
        let m = UnifiedModel::<f32>::new(cfg, 0).unwrap();
        let counts = m.module_counts();
        assert_eq!(counts.iter().map(|c| c.0).collect::<Vec<_>>(), MODULES);
        assert_eq!(counts, param_counts(&cfg).unwrap());
        assert_eq!(counts.iter().map(|c| c.1).sum::<usize>(), m.store.numel());
    }

    #[test]
    fn paper_dry_run_sizes_are_in_the_expected_range() {
        let counts = param_counts(&ModelConfig::paper()).unwrap();
        let get = |m: &str| counts.iter().find(|c| c.0 == m).unwrap().1 as f64 / 1e6;
        assert!((1500.0..2100.0).contains(&get("llm")), "{counts:?}");
        assert!((800.0..1300.0).contains(&get("decoder")), "{counts:?}");
        assert!((250.0..700.0).contains(&get("encoder")), "{counts:?}");
    }

    #[test]
    fn condition_layout_per_drop_mode() {
        let m = UnifiedModel::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        let img = image(3);
        let items = [
            CondItem { text: "a red circle", image: None, drop: Drop::Keep, key: None },
            CondItem { text: "remove it", image: Some(&img), drop: Drop::Keep, key: None },
            CondItem { text: "remove it", image: Some(&img), drop: Drop::Text, key: None },
            CondItem { text: "remove it", image: Some(&img), drop: Drop::Image, key: None },
            CondItem { text: "remove it", image: Some(&img), drop: Drop::Both, key: None },
        ];
        let b = m.conditions(&items).unwrap();
        // 4 visual tokens after a 2x shuffle of the 2x2 patch grid -> 1 token
        let vis = m.adapter.tokens_for(2, 2);
        assert_eq!(b[0].source_len, 13);
        assert_eq!(b[0].cond_tokens.rows(), 13);
        assert_eq!(b[1].source_len, 1 + vis + 9);
        assert_eq!(b[1].cond_tokens.rows(), 1 + 2 * vis + 9);
        assert_eq!((b[2].source_len, b[2].cond_tokens.rows()), (1, 1 + vis));
        assert_eq!((b[3].source_len, b[3].cond_tokens.rows()), (10, 10));
        let null = m.null_condition();
        assert_eq!(b[4].cond_tokens, null.cond_tokens);
        assert_eq!(b[4].global_vec, null.global_vec);
        assert_eq!(b[2].global_vec, null.global_vec);
        assert_eq!(b[2].cond_tokens.slice_rows(0, 1).unwrap(), null.cond_tokens);
        // the semantic rows of the full and image-only bundles agree
        assert!(b[1].context_semantic_tokens.as_ref().unwrap().max_abs_diff(b[2].context_semantic_tokens.as_ref().unwrap()) < 1e-12);
    }

    #[test]
    fn cached_features_reproduce_the_graph_path() {
        let m = UnifiedModel::<f64>::new(ModelConfig::tiny(), 2).unwrap();
        let img = image(5);
        let items = [
            CondItem { text: "two squares", image: None, drop: Drop::Keep, key: Some("a") },
            CondItem { text: "make it blue", image: Some(&img), drop: Drop::Keep, key: Some("b") },
            CondItem { text: "make it blue", image: Some(&img), drop: Drop::Text, key: Some("b") },
        ];
        let mut cache = FeatureCache::new(16);
        let mut g1 = Graph::new(&m.store);
        let a = m.condition_vars(&mut g1, &items, None).unwrap();
        let mut g2 = Graph::new(&m.store);
        let b = m.condition_vars(&mut g2, &items, Some(&mut cache)).unwrap();
        assert!(g1.value(a.cond).max_abs_diff(g2.value(b.cond)) < 1e-12);
        assert!(g1.value(a.global).max_abs_diff(g2.value(b.global)) < 1e-12);
        assert_eq!(a.cond_lengths, b.cond_lengths);
        let mut g3 = Graph::new(&m.store);
        m.condition_vars(&mut g3, &items, Some(&mut cache)).unwrap();
        assert_eq!((cache.misses, cache.hits), (3, 3));
    }

    #[test]
    fn losses_are_finite_and_reach_the_right_parameters() {
        let m = UnifiedModel::<f64>::new(ModelConfig::tiny(), 4).unwrap();
        let (src, tgt) = (image(7), image(8));
        let toks = m.latent_tokens(&[&src, &tgt]).unwrap();
        assert_eq!(toks[0].shape(), &[4, 16]);
        let items = [
            FlowItem {
                cond: CondItem { text: "move it", image: Some(&src), drop: Drop::Keep, key: None },
                target: &toks[1],
                context: Some(&toks[0]),
            },
            FlowItem { cond: CondItem { text: "x", image: None, drop: Drop::Text, key: None }, target: &toks[1], context: None },
        ];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&m.store);
        let l = m.flow_loss(&mut g, &items, None, TimeSampling::Uniform, &mut rng).unwrap();
        assert!(g.value(l).data()[0].is_finite());
        let grads = g.backward(l).unwrap();
        let has = |p: &str| grads.params().iter().any(|(id, _)| crate::params::has_prefix(&m.store.get(*id).name, p));
        for p in ["decoder", "refiner", "adapter", "encoder", "llm"] {
            assert!(has(p), "no gradient reaches {p}");
        }
        let mut g = Graph::new(&m.store);
        let qa = [QaItem { image: &src, question: "what shape?", answer: "circle" }];
        let l = m.understanding_loss(&mut g, &qa).unwrap();
        let v = g.value(l).data()[0];
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn generation_and_editing_produce_images_of_the_configured_size() {
        let m = UnifiedModel::<f32>::new(ModelConfig::tiny(), 5).unwrap();
        let cfg = SamplerConfig { steps: 2, ..Default::default() };
        let out = m.generate(&["a blue square", "one circle"], &cfg).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].width, out[0].height), (32, 32));
        let src = image(9);
        let out = m.edit(&[(&src, "remove the circle")], &cfg).unwrap();
        assert_eq!((out[0].width, out[0].height), (32, 32));
        assert!(matches!(m.generate(&["é"], &cfg), Err(Error::Contract(_))));
        assert!(matches!(m.edit(&[(&image(1).resize_bilinear(16, 16), "x")], &cfg), Err(Error::Resize(_))));
    }

    use rand::SeedableRng;
}
