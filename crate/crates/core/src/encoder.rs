//! Native-resolution patch encoder: interpolated absolute position
//! embeddings, 2D rotary attention, and NaViT-style packed batching.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnLayout, Graph, Var};
use crate::image::Image;
use crate::nn::{Init, Linear, Mlp, RmsNorm, SelfAttention};
use crate::ops::PackedSequence;
use crate::params::{ParamId, ParamStore};
use crate::rope::RopeTable;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    /// Side of the positional-embedding grid learned at the native resolution.
    pub base_grid: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
}

impl EncoderConfig {
    /// aimv2-large-patch14-448 geometry.
    pub fn paper() -> Self {
        Self { patch_size: 14, base_grid: 32, layers: 24, heads: 16, hidden_dim: 1024 }
    }

    /// Desk-scale preset sized for 64x64 canvases.
    pub fn toy() -> Self {
        Self { patch_size: 16, base_grid: 4, layers: 4, heads: 4, hidden_dim: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden_dim % (4 * self.heads) != 0 {
            return Err(Error::Config(format!(
                "encoder hidden_dim {} must be divisible by 4*heads ({})",
                self.hidden_dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.base_grid == 0 || self.layers == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Token grid of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T: Scalar> {
    pub rows: usize,
    pub cols: usize,
    pub tokens: Tensor<T>,
}

/// Raw pixel patches `[rows*cols, p*p*3]`, row-major over the grid, each
/// patch flattened in (y, x, channel) order.
pub fn extract_patches<T: Scalar>(image: &Image, patch: usize) -> Result<(usize, usize, Tensor<T>)> {
    if image.width % patch != 0 || image.height % patch != 0 {
        return Err(Error::Resize(format!(
            "{}x{} is not a multiple of patch size {patch}; resize first",
            image.width, image.height
        )));
    }
    let (rows, cols) = (image.height / patch, image.width / patch);
    let mut data = Vec::with_capacity(rows * cols * patch * patch * 3);
    for r in 0..rows {
        for c in 0..cols {
            for y in 0..patch {
                let base = ((r * patch + y) * image.width + c * patch) * 3;
                data.extend(image.data[base..base + patch * 3].iter().map(|&v| T::from_f64_lossy(v as f64)));
            }
        }
    }
    Ok((rows, cols, Tensor::new(&[rows * cols, patch * patch * 3], data)?))
}

/// Bilinear (half-pixel) interpolation matrix mapping a `base x base` grid to
/// `rows x cols`: `out = M @ base_embeddings`.
pub fn interpolation_matrix<T: Scalar>(base: usize, rows: usize, cols: usize) -> Tensor<T> {
    let weights_1d = |n: usize| -> Vec<[(usize, f64); 2]> {
        (0..n)
            .map(|i| {
                let f = ((i as f64 + 0.5) * base as f64 / n as f64 - 0.5).clamp(0.0, (base - 1) as f64);
                let i0 = f.floor() as usize;
                let i1 = (i0 + 1).min(base - 1);
                let w = f - i0 as f64;
                [(i0, 1.0 - w), (i1, w)]
            })
            .collect()
    };
    let (wr, wc) = (weights_1d(rows), weights_1d(cols));
    let mut m = vec![T::zero(); rows * cols * base * base];
    for r in 0..rows {
        for c in 0..cols {
            let row = &mut m[(r * cols + c) * base * base..(r * cols + c + 1) * base * base];
            for &(ri, rw) in &wr[r] {
                for &(ci, cw) in &wc[c] {
                    row[ri * base + ci] += T::from_f64_lossy(rw * cw);
                }
            }
        }
    }
    Tensor::from_parts(vec![rows * cols, base * base], m)
}

/// Resamples a `[base*base, dim]` positional table to `rows x cols`.
/// The base resolution is returned untouched.
pub fn interpolate_pos_embed<T: Scalar>(base: &Tensor<T>, base_grid: usize, rows: usize, cols: usize) -> Result<Tensor<T>> {
    if base.rows() != base_grid * base_grid {
        return Err(Error::Shape(format!("pos table {:?} is not {base_grid}x{base_grid}", base.shape())));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Contract("interpolation target must be at least 1x1".into()));
    }
    if rows == base_grid && cols == base_grid {
        return Ok(base.clone());
    }
    let m = interpolation_matrix::<T>(base_grid, rows, cols);
    crate::ops::matmul(&m, base)
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    norm1: RmsNorm,
    attn: SelfAttention,
    norm2: RmsNorm,
    mlp: Mlp,
}

/// Parameter handles of the visual encoder.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub cfg: EncoderConfig,
    patch_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<EncoderBlock>,
    norm: RmsNorm,
}

/// Graph-level output of [`VisualEncoder::forward`].
pub struct EncodedBatch {
    pub features: Var,
    pub grids: Vec<(usize, usize)>,
}

impl VisualEncoder {
    pub fn new<T: Scalar>(init: &mut Init<T>, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let patch_embed = init.linear("encoder.patch_embed", cfg.patch_dim(), h, true)?;
        let pos_embed = init.normal("encoder.pos_embed", &[cfg.base_grid * cfg.base_grid, h], 0.02)?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("encoder.block{i}");
                Ok(EncoderBlock {
                    norm1: init.rms_norm(&format!("{p}.norm1"), h)?,
                    attn: SelfAttention::new(init, &format!("{p}.attn"), h, cfg.heads)?,
                    norm2: init.rms_norm(&format!("{p}.norm2"), h)?,
                    mlp: Mlp::new(init, &format!("{p}.mlp"), h, 4 * h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = init.rms_norm("encoder.norm", h)?;
        Ok(Self { cfg, patch_embed, pos_embed, blocks, norm })
    }

    /// Linear patch projection of one image (no position information).
    pub fn patchify<T: Scalar>(&self, g: &mut Graph<T>, image: &Image) -> Result<(Var, usize, usize)> {
        let (rows, cols, patches) = extract_patches::<T>(image, self.cfg.patch_size)?;
        let x = g.constant(patches);
        Ok((self.patch_embed.forward(g, x)?, rows, cols))
    }

    fn pos_for<T: Scalar>(&self, g: &mut Graph<T>, rows: usize, cols: usize) -> Result<Var> {
        let base = g.param(self.pos_embed);
        let b = self.cfg.base_grid;
        if rows == b && cols == b {
            return Ok(base);
        }
        let m = g.constant(interpolation_matrix(b, rows, cols));
        g.matmul(m, base)
    }

    /// Encodes a packed batch; every image must already satisfy the patch
    /// multiple contract.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, images: &[&Image]) -> Result<EncodedBatch> {
        if images.is_empty() {
            return Err(Error::Contract("encode called with an empty batch".into()));
        }
        let mut tokens = Vec::with_capacity(images.len());
        let mut grids = Vec::with_capacity(images.len());
        let (mut prow, mut pcol) = (Vec::new(), Vec::new());
        for img in images {
            let (x, rows, cols) = self.patchify(g, img)?;
            let pos = self.pos_for(g, rows, cols)?;
            tokens.push(g.add(x, pos)?);
            grids.push((rows, cols));
            for r in 0..rows {
                for c in 0..cols {
                    prow.push(r as f64);
                    pcol.push(c as f64);
                }
            }
        }
        let mut x = g.concat_rows(&tokens)?;
        let layout = AttnLayout::packed(grids.iter().map(|(r, c)| r * c).collect(), false);
        let rope = Arc::new(RopeTable::two_d(&prow, &pcol, self.cfg.hidden_dim / self.cfg.heads)?);
        for b in &self.blocks {
            let h = b.norm1.forward(g, x)?;
            let h = b.attn.forward(g, h, &layout, Some(&rope))?;
            x = g.add(x, h)?;
            let h = b.norm2.forward(g, x)?;
            let h = b.mlp.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let features = self.norm.forward(g, x)?;
        Ok(EncodedBatch { features, grids })
    }

    /// Value-level packed encoding.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, images: &[&Image]) -> Result<PackedSequence<T>> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, images)?;
        PackedSequence::new(g.value(out.features).clone(), out.grids.iter().map(|(r, c)| r * c).collect())
    }

    /// Value-level patch projection of one image.
    pub fn patch_grid<T: Scalar>(&self, store: &ParamStore<T>, image: &Image) -> Result<PatchGrid<T>> {
        let mut g = Graph::new(store);
        let (x, rows, cols) = self.patchify(&mut g, image)?;
        Ok(PatchGrid { rows, cols, tokens: g.value(x).clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder(cfg: EncoderConfig) -> (ParamStore<f64>, VisualEncoder) {
        let mut store = ParamStore::new();
        let enc = VisualEncoder::new(&mut Init::new(&mut store, 1), cfg).unwrap();
        (store, enc)
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig { patch_size: 14, base_grid: 4, layers: 1, heads: 2, hidden_dim: 16 }
    }

    #[test]
    fn patch_grid_arithmetic() {
        let (store, enc) = encoder(small_cfg());
        for (w, h, rows, cols) in [(28, 28, 2, 2), (448, 448, 32, 32), (42, 70, 5, 3)] {
            let g = enc.patch_grid(&store, &Image::filled(w, h, [0.2, 0.4, 0.6])).unwrap();
            assert_eq!((g.rows, g.cols, g.tokens.rows()), (rows, cols, rows * cols));
        }
        assert!(matches!(
            enc.patch_grid(&store, &Image::filled(30, 28, [0.0; 3])),
            Err(Error::Resize(_))
        ));
    }

    #[test]
    fn interpolation_identity_and_constants() {
        let base = Tensor::<f64>::from_f64(&[4, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(interpolate_pos_embed(&base, 2, 2, 2).unwrap(), base);
        let c = Tensor::<f64>::full(&[9, 2], 0.7);
        let out = interpolate_pos_embed(&c, 3, 5, 7).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn interpolation_center_by_hand() {
        // corners 0, 1, 1, 2 -> center of a 3x3 resample is their mean
        let base = Tensor::<f64>::from_f64(&[4, 1], &[0.0, 1.0, 1.0, 2.0]).unwrap();
        let out = interpolate_pos_embed(&base, 2, 3, 3).unwrap();
        assert!((out.data()[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn packed_lengths_and_solo_equivalence() {
        let (store, enc) = encoder(small_cfg());
        let a = Image::filled(28, 28, [0.1, 0.5, 0.9]);
        let mut b = Image::filled(42, 56, [0.3, 0.3, 0.3]);
        b.set_pixel(3, 3, [1.0, 0.0, 0.0]);
        let packed = enc.encode(&store, &[&a, &b]).unwrap();
        assert_eq!(packed.lengths, vec![4, 12]);
        let solo = enc.encode(&store, &[&b]).unwrap();
        assert_eq!(packed.item(1).unwrap(), solo.data);
        let one = enc.encode(&store, &[&a]).unwrap();
        assert_eq!(packed.item(0).unwrap(), one.data);
        assert!(enc.encode::<f64>(&store, &[]).is_err());
    }
}
