//! Convolutional autoencoder with 4-channel latents at 8x downsampling.
//!
//! Activations are channels-last `[batch*h*w, c]`. A 3x3 convolution is an
//! im2col gather followed by a matmul; resolution changes use space-to-depth
//! and depth-to-space rearrangements.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapter::shuffle_index;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var, ZERO_INDEX};
use crate::image::Image;
use crate::nn::{Init, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{s, Scalar, Tensor};

pub const LATENT_CHANNELS: usize = 4;
pub const DOWNSAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    /// Channel width of the latent-resolution trunk.
    pub hidden: usize,
    /// Residual 3x3 convolutions in each of encoder and decoder.
    pub res_blocks: usize,
    /// Width of the per-cell pixel head.
    pub head_hidden: usize,
    pub kl_weight: f64,
}

impl VaeConfig {
    pub fn toy() -> Self {
        Self { hidden: 128, res_blocks: 2, head_hidden: 256, kl_weight: 1e-6 }
    }
}

/// `[4, h, w]` latent plus the pixel size it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage<T: Scalar> {
    pub data: Tensor<T>,
    pub source_hw: (usize, usize),
}

impl<T: Scalar> LatentImage<T> {
    pub fn hw(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    /// Channels-last `[h*w, 4]` view.
    pub fn to_tokens(&self) -> Tensor<T> {
        let (h, w) = self.hw();
        let d = self.data.data();
        let mut out = Vec::with_capacity(d.len());
        for p in 0..h * w {
            for c in 0..LATENT_CHANNELS {
                out.push(d[c * h * w + p]);
            }
        }
        Tensor::from_parts(vec![h * w, LATENT_CHANNELS], out)
    }

    pub fn from_tokens(tokens: &Tensor<T>, h: usize, w: usize) -> Result<Self> {
        if tokens.shape() != [h * w, LATENT_CHANNELS] {
            return Err(Error::Shape(format!("latent tokens {:?} are not {h}x{w}x4", tokens.shape())));
        }
        let d = tokens.data();
        let mut out = vec![T::zero(); d.len()];
        for p in 0..h * w {
            for c in 0..LATENT_CHANNELS {
                out[c * h * w + p] = d[p * LATENT_CHANNELS + c];
            }
        }
        Ok(Self { data: Tensor::from_parts(vec![LATENT_CHANNELS, h, w], out), source_hw: (h * DOWNSAMPLE, w * DOWNSAMPLE) })
    }
}

/// Spatial layout of a channels-last batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
}

impl Geom {
    fn pixels(self) -> usize {
        self.h * self.w
    }

    fn latent(self) -> Self {
        Self { batch: self.batch, h: self.h / DOWNSAMPLE, w: self.w / DOWNSAMPLE }
    }
}

/// im2col rows for a zero-padded `k x k` convolution.
pub fn im2col_index(geom: Geom, k: usize) -> Vec<u32> {
    let r = (k / 2) as isize;
    let (h, w) = (geom.h as isize, geom.w as isize);
    let mut idx = Vec::with_capacity(geom.batch * geom.pixels() * k * k);
    for b in 0..geom.batch {
        let base = b * geom.pixels();
        for y in 0..h {
            for x in 0..w {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        idx.push(if yy >= 0 && yy < h && xx >= 0 && xx < w {
                            (base + (yy * w + xx) as usize) as u32
                        } else {
                            ZERO_INDEX
                        });
                    }
                }
            }
        }
    }
    idx
}

/// Space-to-depth by `r` for every image in the batch (`geom` is the input).
pub fn space_to_depth_index(geom: Geom, r: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(geom.batch * geom.pixels());
    for b in 0..geom.batch {
        idx.extend(shuffle_index(geom.h, geom.w, r, b * geom.pixels()));
    }
    idx
}

/// Depth-to-space by `r`: input `[b*h*w, r*r*c]` viewed as `[b*h*w*r*r, c]`
/// (`geom` is the input).
pub fn depth_to_space_index(geom: Geom, r: usize) -> Vec<u32> {
    let (h2, w2) = (geom.h * r, geom.w * r);
    let mut idx = Vec::with_capacity(geom.batch * h2 * w2);
    for b in 0..geom.batch {
        for y in 0..h2 {
            for x in 0..w2 {
                let src = b * geom.pixels() + (y / r) * geom.w + x / r;
                idx.push((src * r * r + (y % r) * r + x % r) as u32);
            }
        }
    }
    idx
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub lin: Linear,
    pub k: usize,
}

impl Conv {
    fn new<T: Scalar>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Self { lin: init.linear(name, cin * k * k, cout, true)?, k })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, geom: Geom) -> Result<Var> {
        if self.k == 1 {
            return self.lin.forward(g, x);
        }
        let c = g.shape(x)[1];
        let cols = g.gather_rows(x, &Arc::new(im2col_index(geom, self.k)))?;
        let cols = g.reshape(cols, &[geom.batch * geom.pixels(), c * self.k * self.k])?;
        self.lin.forward(g, cols)
    }
}

/// Encoder: stride-8 space-to-depth, a 3x3 convolution and residual 3x3
/// convolutions at latent resolution, then a 1x1 projection to 4 channels.
/// Decoder: the mirror image ending in a per-cell pixel head, depth-to-space
/// and a sigmoid.
#[derive(Debug, Clone)]
pub struct Vae {
    pub cfg: VaeConfig,
    enc_in: Conv,
    enc_res: Vec<Conv>,
    enc_out: Conv,
    dec_in: Conv,
    dec_res: Vec<Conv>,
    dec_head: Conv,
    dec_out: Conv,
    /// Multiplier applied to latents before the decoder sees them.
    pub latent_scale: ParamId,
}

impl Vae {
    pub fn new<T: Scalar>(init: &mut Init<T>, cfg: VaeConfig) -> Result<Self> {
        let (h, hh) = (cfg.hidden, cfg.head_hidden);
        if h == 0 || hh == 0 {
            return Err(Error::Config("vae widths must be positive".into()));
        }
        let cell = DOWNSAMPLE * DOWNSAMPLE * 3;
        let res = |init: &mut Init<T>, name: &str| -> Result<Vec<Conv>> {
            (0..cfg.res_blocks).map(|i| Conv::new(init, &format!("{name}.res{i}"), h, h, 3)).collect()
        };
        let enc_in = Conv::new(init, "vae.enc.in", cell, h, 3)?;
        let enc_res = res(init, "vae.enc")?;
        let enc_out = Conv::new(init, "vae.enc.out", h, LATENT_CHANNELS, 1)?;
        let dec_in = Conv::new(init, "vae.dec.in", LATENT_CHANNELS, h, 3)?;
        let dec_res = res(init, "vae.dec")?;
        let dec_head = Conv::new(init, "vae.dec.head", h, hh, 1)?;
        let dec_out = Conv::new(init, "vae.dec.out", hh, cell, 1)?;
        let latent_scale = init.frozen("vae.latent_scale", &[1], 1.0)?;
        Ok(Self { cfg, enc_in, enc_res, enc_out, dec_in, dec_res, dec_head, dec_out, latent_scale })
    }

    fn residual<T: Scalar>(g: &mut Graph<T>, x: Var, convs: &[Conv], geom: Geom) -> Result<Var> {
        let mut x = x;
        for c in convs {
            let h = g.silu(x)?;
            let h = c.forward(g, h, geom)?;
            x = g.add(x, h)?;
        }
        Ok(x)
    }

    /// Same-size images to a channels-last pixel tensor in `[-1, 1]`.
    pub fn pixels<T: Scalar>(images: &[&Image]) -> Result<(Tensor<T>, Geom)> {
        let first = images.first().ok_or_else(|| Error::Contract("empty image batch".into()))?;
        let (w, h) = (first.width, first.height);
        if w % DOWNSAMPLE != 0 || h % DOWNSAMPLE != 0 {
            return Err(Error::Resize(format!("{w}x{h} is not a multiple of {DOWNSAMPLE}; resize first")));
        }
        let mut data = Vec::with_capacity(images.len() * w * h * 3);
        for img in images {
            if (img.width, img.height) != (w, h) {
                return Err(Error::Shape("vae batches need equal image sizes".into()));
            }
            data.extend(img.data.iter().map(|&v| T::from_f64_lossy(2.0 * v as f64 - 1.0)));
        }
        Ok((Tensor::new(&[images.len() * w * h, 3], data)?, Geom { batch: images.len(), h, w }))
    }

    /// Posterior mean `[b*h/8*w/8, 4]` (unscaled) of pixels at `geom`.
    pub fn encode_vars<T: Scalar>(&self, g: &mut Graph<T>, x: Var, geom: Geom) -> Result<Var> {
        let lat = geom.latent();
        let x = g.gather_rows(x, &Arc::new(space_to_depth_index(geom, DOWNSAMPLE)))?;
        let x = g.reshape(x, &[lat.batch * lat.pixels(), DOWNSAMPLE * DOWNSAMPLE * 3])?;
        let x = self.enc_in.forward(g, x, lat)?;
        let x = Self::residual(g, x, &self.enc_res, lat)?;
        let x = g.silu(x)?;
        self.enc_out.forward(g, x, lat)
    }

    /// Latent `[b*h*w, 4]` at latent geometry `geom` to channels-last pixels in `[0, 1]`.
    pub fn decode_vars<T: Scalar>(&self, g: &mut Graph<T>, z: Var, geom: Geom) -> Result<Var> {
        let x = self.dec_in.forward(g, z, geom)?;
        let x = Self::residual(g, x, &self.dec_res, geom)?;
        let x = g.silu(x)?;
        let x = self.dec_head.forward(g, x, geom)?;
        let x = g.silu(x)?;
        let x = self.dec_out.forward(g, x, geom)?;
        let x = g.reshape(x, &[geom.batch * geom.pixels() * DOWNSAMPLE * DOWNSAMPLE, 3])?;
        let x = g.gather_rows(x, &Arc::new(depth_to_space_index(geom, DOWNSAMPLE)))?;
        g.sigmoid(x)
    }

    /// Reconstruction MSE (in `[0,1]` pixel units) plus the KL term of a
    /// unit-variance posterior, `0.5 * mean(mu^2)`.
    pub fn loss_vars<T: Scalar>(&self, g: &mut Graph<T>, images: &[&Image]) -> Result<(Var, Var)> {
        let (px, geom) = Self::pixels::<T>(images)?;
        let target = px.map(|v| (v + T::one()) * s(0.5));
        let x = g.constant(px);
        let mu = self.encode_vars(g, x, geom)?;
        let recon = self.decode_vars(g, mu, geom.latent())?;
        let t = g.constant(target);
        let mse = g.mse(recon, t)?;
        let sq = g.mul(mu, mu)?;
        let kl = g.mean(sq)?;
        let kl = g.scale(kl, s(0.5 * self.cfg.kl_weight))?;
        Ok((g.add(mse, kl)?, mse))
    }

    pub fn scale_value<T: Scalar>(&self, store: &ParamStore<T>) -> T {
        store.get(self.latent_scale).tensor.data()[0]
    }

    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, image: &Image) -> Result<LatentImage<T>> {
        Ok(self.encode_batch(store, &[image])?.remove(0))
    }

    pub fn encode_batch<T: Scalar>(&self, store: &ParamStore<T>, images: &[&Image]) -> Result<Vec<LatentImage<T>>> {
        let (px, geom) = Self::pixels::<T>(images)?;
        let mut g = Graph::new(store);
        let x = g.constant(px);
        let mu = self.encode_vars(&mut g, x, geom)?;
        let (h, w) = (geom.h / DOWNSAMPLE, geom.w / DOWNSAMPLE);
        let all = g.value(mu);
        (0..geom.batch)
            .map(|b| {
                let mut l = LatentImage::from_tokens(&all.slice_rows(b * h * w, h * w)?, h, w)?;
                l.source_hw = (geom.h, geom.w);
                Ok(l)
            })
            .collect()
    }

    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, latent: &LatentImage<T>) -> Result<Image> {
        Ok(self.decode_batch(store, std::slice::from_ref(latent))?.remove(0))
    }

    pub fn decode_batch<T: Scalar>(&self, store: &ParamStore<T>, latents: &[LatentImage<T>]) -> Result<Vec<Image>> {
        let first = latents.first().ok_or_else(|| Error::Contract("empty latent batch".into()))?;
        if first.data.shape()[0] != LATENT_CHANNELS {
            return Err(Error::Shape(format!("latent has {} channels", first.data.shape()[0])));
        }
        let (h, w) = first.hw();
        let tokens: Vec<Tensor<T>> = latents.iter().map(|l| l.to_tokens()).collect();
        if latents.iter().any(|l| l.hw() != (h, w)) {
            return Err(Error::Shape("decode batches need equal latent sizes".into()));
        }
        let mut g = Graph::new(store);
        let z = g.constant(Tensor::concat_rows(&tokens.iter().collect::<Vec<_>>())?);
        let out = self.decode_vars(&mut g, z, Geom { batch: latents.len(), h, w })?;
        let px = g.value(out);
        let n = h * w * DOWNSAMPLE * DOWNSAMPLE * 3;
        (0..latents.len())
            .map(|b| {
                let data = px.data()[b * n..(b + 1) * n].iter().map(|v| v.to_f64_lossy() as f32).collect();
                Image::new(w * DOWNSAMPLE, h * DOWNSAMPLE, data)
            })
            .collect()
    }

    /// Mean reconstruction MSE over `images`, evaluated in batches.
    pub fn recon_mse<T: Scalar>(&self, store: &ParamStore<T>, images: &[Image]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in images.chunks(16) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let lat = self.encode_batch(store, &refs)?;
            let rec = self.decode_batch(store, &lat)?;
            total += rec.iter().zip(chunk).map(|(a, b)| a.mse(b)).sum::<f64>();
        }
        Ok(total / images.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn tiny() -> (ParamStore<f64>, Vae) {
        let mut store = ParamStore::new();
        let cfg = VaeConfig { hidden: 3, res_blocks: 1, head_hidden: 4, kl_weight: 1e-2 };
        let vae = Vae::new(&mut Init::new(&mut store, 4), cfg).unwrap();
        (store, vae)
    }

    fn checker(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, [0.1, 0.2, 0.3]);
        for y in 0..h {
            for x in 0..w {
                if (x / 3 + y / 5) % 2 == 0 {
                    img.set_pixel(x, y, [0.9, (x as f32) / w as f32, 0.4]);
                }
            }
        }
        img
    }

    #[test]
    fn latent_geometry() {
        let (store, vae) = tiny();
        let l = vae.encode(&store, &checker(64, 64)).unwrap();
        assert_eq!(l.data.shape(), &[4, 8, 8]);
        assert_eq!(vae.encode(&store, &checker(32, 32)).unwrap().data.shape(), &[4, 4, 4]);
        assert!(matches!(vae.encode(&store, &checker(30, 32)), Err(Error::Resize(_))));
        let img = vae.decode(&store, &l).unwrap();
        assert_eq!((img.width, img.height), (64, 64));
        assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(vae.decode(&store, &l).unwrap(), img);
        assert_eq!(LatentImage::from_tokens(&l.to_tokens(), 8, 8).unwrap().data, l.data);
    }

    #[test]
    fn rearrangements_invert() {
        for r in [2, 8] {
            let geom = Geom { batch: 2, h: 2 * r, w: 3 * r };
            let x: Vec<u32> = (0..(2 * geom.pixels()) as u32).collect();
            let shuffled: Vec<u32> = space_to_depth_index(geom, r).iter().map(|&i| x[i as usize]).collect();
            let small = Geom { batch: 2, h: 2, w: 3 };
            let back: Vec<u32> = depth_to_space_index(small, r).iter().map(|&i| shuffled[i as usize]).collect();
            assert_eq!(back, x);
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, 2);
        let conv = Conv::new(&mut init, "c", 2, 3, 3).unwrap();
        let geom = Geom { batch: 1, h: 3, w: 4 };
        let xv: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new(&[12, 2], xv.clone()).unwrap());
        let y = conv.forward(&mut g, x, geom).unwrap();
        let w = store.get(conv.lin.w).tensor.data();
        for oy in 0..3 {
            for ox in 0..4 {
                for co in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                            if iy < 0 || iy >= 3 || ix < 0 || ix >= 4 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += xv[(iy as usize * 4 + ix as usize) * 2 + ci] * w[((ky * 3 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    assert!((g.value(y).data()[(oy * 4 + ox) * 3 + co] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn vae_passes_gradcheck() {
        let (store, vae) = tiny();
        let img = checker(8, 8);
        let report = gradcheck::check(&store, 1e-5, Some(5), 1, |g| Ok(vae.loss_vars(g, &[&img])?.0)).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn loss_positive_at_init() {
        let (store, vae) = tiny();
        let img = checker(16, 16);
        let mut g = Graph::new(&store);
        let (loss, _) = vae.loss_vars(&mut g, &[&img]).unwrap();
        assert!(g.value(loss).data()[0] > 0.0);
    }
}
