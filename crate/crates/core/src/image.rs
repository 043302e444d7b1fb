//! RGB images, binary PPM (P6) I/O and bilinear resampling.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major HWC RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mean squared difference over all channels.
    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
            / self.data.len() as f64
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Vec::with_capacity(width * height * 3);
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for c in 0..3 {
                    let p = |xx: usize, yy: usize| self.data[(yy * self.width + xx) * 3 + c];
                    let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
                    let bot = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
                    out.push(top * (1.0 - wy) + bot * wy);
                }
            }
        }
        Image { width, height, data: out }
    }

    /// Resizes to the nearest multiple of `multiple` per side (at least one
    /// multiple), the shared policy ahead of patchify and VAE encoding.
    pub fn resize_to_multiple(&self, multiple: usize) -> Image {
        let round = |v: usize| (((v as f64) / multiple as f64).round() as usize).max(1) * multiple;
        self.resize_bilinear(round(self.width), round(self.height))
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_rgb8())?;
        Ok(())
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(f))
    }

    pub fn read_ppm<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = Vec::new();
        // magic, width, height, maxval, separated by whitespace with optional comments
        while header.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PPM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            header.extend(content.split_whitespace().map(str::to_string));
        }
        if header[0] != "P6" {
            return Err(Error::Format(format!("expected P6 magic, got {}", header[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field {s}")));
        let (w, h, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("only maxval 255 supported, got {maxval}")));
        }
        let mut buf = vec![0u8; w * h * 3];
        r.read_exact(&mut buf)?;
        Self::from_rgb8(w, h, &buf)
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_ppm(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_exact_for_8bit_values() {
        let bytes: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 17 % 256) as u8).collect();
        let img = Image::from_rgb8(5, 3, &bytes).unwrap();
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n5 3\n255\n"));
        let back = Image::read_ppm(&buf[..]).unwrap();
        assert_eq!(back.to_rgb8(), bytes);
    }

    #[test]
    fn rejects_other_magic() {
        assert!(Image::read_ppm(&b"P3\n1 1\n255\n0 0 0"[..]).is_err());
    }

    #[test]
    fn resize_policy_rounds_to_nearest_multiple() {
        let img = Image::filled(64, 40, [0.5, 0.5, 0.5]);
        let r = img.resize_to_multiple(14);
        assert_eq!((r.width, r.height), (70, 42));
        assert!(r.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }
}
