//! Causal transformer backbone over interleaved text and visual embeddings.

use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnLayout, Graph, Var};
use crate::nn::{Init, Linear, Mlp, RmsNorm, SelfAttention};
use crate::params::{ParamId, ParamStore};
use crate::rope::RopeTable;
use crate::tensor::{Scalar, Tensor};

pub const BOS: u32 = 0x02;
pub const EOS: u32 = 0x03;
/// Separates an understanding question from its answer.
pub const SEP: u32 = b'\n' as u32;

/// Character-level tokenizer: ids are ASCII code points.
pub fn encode_text(text: &str) -> Result<Vec<u32>> {
    text.bytes()
        .map(|b| {
            if b.is_ascii() {
                Ok(b as u32)
            } else {
                Err(Error::Contract(format!("non-ASCII character in {text:?}")))
            }
        })
        .collect()
}

pub fn decode_text(ids: &[u32]) -> String {
    ids.iter().filter(|&&i| i < 128 && i != BOS && i != EOS).map(|&i| i as u8 as char).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    pub layers: usize,
    pub heads: usize,
    pub llm_dim: usize,
    pub text_vocab_size: usize,
    pub max_seq: usize,
}

impl LlmConfig {
    /// Qwen3-1.7B geometry.
    pub fn paper() -> Self {
        Self { layers: 28, heads: 16, llm_dim: 2048, text_vocab_size: 151_936, max_seq: 40_960 }
    }

    pub fn toy() -> Self {
        Self { layers: 4, heads: 4, llm_dim: 128, text_vocab_size: 128, max_seq: 256 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.llm_dim % (2 * self.heads) != 0 {
            return Err(Error::Config(format!(
                "llm_dim {} must be divisible by 2*heads ({}) with at least one layer",
                self.llm_dim, self.heads
            )));
        }
        if self.text_vocab_size < 128 || self.max_seq == 0 {
            return Err(Error::Config("text vocabulary must cover ASCII and max_seq be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentTag {
    Text,
    Visual,
}

/// One assembled sequence with concrete embeddings.
#[derive(Debug, Clone)]
pub struct MultimodalSequence<T: Scalar> {
    pub embeddings: Tensor<T>,
    pub tags: Vec<SegmentTag>,
    /// Next-token target stored at the predicting position.
    pub targets: Option<Vec<Option<u32>>>,
}

/// A piece of a sequence under construction inside a graph.
#[derive(Debug, Clone, Copy)]
pub enum Part<'p> {
    Text(&'p [u32]),
    /// Rows `[start, start+len)` of a visual embedding variable.
    Visual { var: Var, start: usize, len: usize },
}

#[derive(Debug, Clone, Copy)]
struct LlmBlock {
    norm1: RmsNorm,
    attn: SelfAttention,
    norm2: RmsNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Llm {
    pub cfg: LlmConfig,
    embed: ParamId,
    blocks: Vec<LlmBlock>,
    final_norm: RmsNorm,
    head: Linear,
}

/// Hidden states of a packed batch.
#[derive(Debug, Clone, Copy)]
pub struct HiddenVars {
    pub h_last: Var,
    pub h_prev: Var,
}

/// Value-level hidden states and logits of one sequence.
#[derive(Debug, Clone)]
pub struct Hidden<T: Scalar> {
    pub h_last: Tensor<T>,
    pub h_prev: Tensor<T>,
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

impl Llm {
    pub fn new<T: Scalar>(init: &mut Init<T>, cfg: LlmConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.llm_dim;
        let embed = init.normal("llm.embed", &[cfg.text_vocab_size, d], 1.0)?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("llm.block{i}");
                Ok(LlmBlock {
                    norm1: init.rms_norm(&format!("{p}.norm1"), d)?,
                    attn: SelfAttention::new(init, &format!("{p}.attn"), d, cfg.heads)?,
                    norm2: init.rms_norm(&format!("{p}.norm2"), d)?,
                    mlp: Mlp::new(init, &format!("{p}.mlp"), d, 4 * d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = init.rms_norm("llm.final_norm", d)?;
        let head = init.linear("llm.head", d, cfg.text_vocab_size, false)?;
        Ok(Self { cfg, embed, blocks, final_norm, head })
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.cfg.text_vocab_size) {
            Some(i) => Err(Error::Contract(format!("token id {i} outside vocabulary"))),
            None => Ok(()),
        }
    }

    /// Embeds text ids.
    pub fn embed_text<T: Scalar>(&self, g: &mut Graph<T>, ids: &[u32]) -> Result<Var> {
        self.check_ids(ids)?;
        let table = g.param(self.embed);
        g.gather_rows(table, &Arc::new(ids.to_vec()))
    }

    /// Concatenates parts into one sequence; returns embeddings and tags.
    pub fn assemble<T: Scalar>(&self, g: &mut Graph<T>, parts: &[Part]) -> Result<(Var, Vec<SegmentTag>)> {
        let mut vars = Vec::with_capacity(parts.len());
        let mut tags = Vec::new();
        for p in parts {
            match *p {
                Part::Text(ids) if ids.is_empty() => {}
                Part::Text(ids) => {
                    vars.push(self.embed_text(g, ids)?);
                    tags.extend(std::iter::repeat(SegmentTag::Text).take(ids.len()));
                }
                Part::Visual { len: 0, .. } => {}
                Part::Visual { var, start, len } => {
                    vars.push(g.slice_rows(var, start, len)?);
                    tags.extend(std::iter::repeat(SegmentTag::Visual).take(len));
                }
            }
        }
        if tags.len() > self.cfg.max_seq {
            return Err(Error::SequenceLength { len: tags.len(), max: self.cfg.max_seq });
        }
        if vars.is_empty() {
            return Err(Error::Contract("empty sequence".into()));
        }
        Ok((g.concat_rows(&vars)?, tags))
    }

    /// Runs the blocks over packed sequences (`lengths` per sequence).
    pub fn forward_hidden_vars<T: Scalar>(&self, g: &mut Graph<T>, x: Var, lengths: &[usize]) -> Result<HiddenVars> {
        if let Some(&l) = lengths.iter().find(|&&l| l > self.cfg.max_seq) {
            return Err(Error::SequenceLength { len: l, max: self.cfg.max_seq });
        }
        let positions: Vec<f64> = lengths.iter().flat_map(|&l| (0..l).map(|p| p as f64)).collect();
        let rope = Arc::new(RopeTable::one_d(&positions, self.cfg.llm_dim / self.cfg.heads)?);
        let layout = AttnLayout::packed(lengths.to_vec(), true);
        let mut x = x;
        let mut before_last = x;
        for b in &self.blocks {
            before_last = x;
            let h = b.norm1.forward(g, x)?;
            let h = b.attn.forward(g, h, &layout, Some(&rope))?;
            x = g.add(x, h)?;
            let h = b.norm2.forward(g, x)?;
            let h = b.mlp.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let h_prev = RmsNorm::plain().forward(g, before_last)?;
        let h_last = self.final_norm.forward(g, x)?;
        Ok(HiddenVars { h_last, h_prev })
    }

    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, h_last: Var) -> Result<Var> {
        self.head.forward(g, h_last)
    }

    /// Mean next-token cross-entropy over the given targets; positions tagged
    /// visual may not carry a target.
    pub fn loss_vars<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        h_last: Var,
        tags: &[SegmentTag],
        targets: &[Option<u32>],
    ) -> Result<Var> {
        if tags.len() != targets.len() {
            return Err(Error::Shape(format!("{} tags vs {} targets", tags.len(), targets.len())));
        }
        if tags.iter().zip(targets).any(|(t, y)| *t == SegmentTag::Visual && y.is_some()) {
            return Err(Error::Contract("targets are only allowed on text positions".into()));
        }
        let ids: Vec<u32> = targets.iter().flatten().copied().collect();
        self.check_ids(&ids)?;
        let logits = self.logits(g, h_last)?;
        g.cross_entropy(logits, targets)
    }

    /// Value-level assembly: `[before, visual, after]`.
    pub fn assemble_sequence<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        before: &[u32],
        visual: Option<&Tensor<T>>,
        after: &[u32],
    ) -> Result<MultimodalSequence<T>> {
        let mut g = Graph::new(store);
        let mut parts = vec![Part::Text(before)];
        if let Some(v) = visual {
            if v.cols() != self.cfg.llm_dim {
                return Err(Error::Shape(format!("visual width {} vs llm_dim {}", v.cols(), self.cfg.llm_dim)));
            }
            let var = g.constant(v.clone());
            parts.push(Part::Visual { var, start: 0, len: v.rows() });
        }
        parts.push(Part::Text(after));
        let (x, tags) = self.assemble(&mut g, &parts)?;
        Ok(MultimodalSequence { embeddings: g.value(x).clone(), tags, targets: None })
    }

    pub fn forward_hidden<T: Scalar>(&self, store: &ParamStore<T>, seq: &MultimodalSequence<T>) -> Result<Hidden<T>> {
        let mut g = Graph::new(store);
        let x = g.constant(seq.embeddings.clone());
        let h = self.forward_hidden_vars(&mut g, x, &[seq.tags.len()])?;
        let logits = self.logits(&mut g, h.h_last)?;
        Ok(Hidden {
            h_last: g.value(h.h_last).clone(),
            h_prev: g.value(h.h_prev).clone(),
            logits: g.value(logits).clone(),
        })
    }

    pub fn lm_loss<T: Scalar>(&self, store: &ParamStore<T>, seq: &MultimodalSequence<T>) -> Result<T> {
        let targets = seq.targets.as_ref().ok_or_else(|| Error::Contract("sequence has no targets".into()))?;
        let mut g = Graph::new(store);
        let x = g.constant(seq.embeddings.clone());
        let h = self.forward_hidden_vars(&mut g, x, &[seq.tags.len()])?;
        let loss = self.loss_vars(&mut g, h.h_last, &seq.tags, targets)?;
        Ok(g.value(loss).data()[0])
    }

    /// Autoregressive decoding until EOS or `max_new` tokens.
    pub fn generate_text<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        prompt: &MultimodalSequence<T>,
        max_new: usize,
        decode: Decode,
    ) -> Result<Vec<u32>> {
        if prompt.tags.is_empty() {
            return Err(Error::Contract("generation needs a nonempty prompt".into()));
        }
        let mut rng = match decode {
            Decode::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Decode::Greedy => None,
        };
        let mut out = Vec::new();
        let mut emb = prompt.embeddings.clone();
        for _ in 0..max_new {
            if emb.rows() >= self.cfg.max_seq {
                break;
            }
            let mut g = Graph::new(store);
            let x = g.constant(emb.clone());
            let h = self.forward_hidden_vars(&mut g, x, &[emb.rows()])?;
            let last = g.slice_rows(h.h_last, emb.rows() - 1, 1)?;
            let logits = self.logits(&mut g, last)?;
            let row: Vec<f64> = g.value(logits).to_f64_vec();
            let next = match (decode, rng.as_mut()) {
                (Decode::Sample { temperature, .. }, Some(rng)) => {
                    let m = row.iter().cloned().fold(f64::MIN, f64::max);
                    let w: Vec<f64> = row.iter().map(|&l| ((l - m) / temperature.max(1e-6)).exp()).collect();
                    WeightedIndex::new(&w).map_err(|e| Error::Contract(e.to_string()))?.sample(rng) as u32
                }
                _ => argmax(&row) as u32,
            };
            if next == EOS {
                break;
            }
            out.push(next);
            let e = g.param(self.embed);
            let e = g.gather_rows(e, &Arc::new(vec![next]))?;
            emb = Tensor::concat_rows(&[&emb, g.value(e)])?;
        }
        Ok(out)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
