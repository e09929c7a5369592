//! Single-channel images in [0, 1], label masks, and 8-bit PGM I/O.

use std::path::Path;

use image::{GrayImage as Gray8, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in [0, 1].
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            return Err(Error::invalid("image", format!("{height}x{width} does not hold {} pixels", data.len())));
        }
        Ok(GrayImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        GrayImage { height, width, data: vec![v; height * width] }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("consistent dims")
    }

    /// From a `[1, H, W]` or `[H, W]` tensor; values are clamped to [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            s => return Err(Error::invalid("image", format!("not a single-channel image: {s:?}"))),
        };
        GrayImage::new(h, w, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Nearest 8-bit level of each pixel.
    pub fn quantized(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(height: usize, width: usize, px: &[u8]) -> Result<Self> {
        GrayImage::new(height, width, px.iter().map(|&p| f64::from(p) / 255.0).collect())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let (h, w, px) = read_gray8(path)?;
        GrayImage::from_u8(h, w, &px)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_gray8(path, self.height, self.width, &self.quantized())
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            return Err(Error::invalid("mask", format!("{height}x{width} does not hold {} labels", data.len())));
        }
        Ok(LabelMask { height, width, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Labels are stored verbatim as gray levels.
    pub fn read_pgm(path: &Path) -> Result<Self> {
        let (h, w, px) = read_gray8(path)?;
        LabelMask::new(h, w, px)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_gray8(path, self.height, self.width, &self.data)
    }
}

fn read_gray8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?;
    let g = img.into_luma8();
    let (w, h) = g.dimensions();
    Ok((h as usize, w as usize, g.into_raw()))
}

fn write_gray8(path: &Path, h: usize, w: usize, px: &[u8]) -> Result<()> {
    let img: Gray8 = Gray8::from_fn(w as u32, h as u32, |x, y| Luma([px[y as usize * w + x as usize]]));
    let mut buf = std::io::Cursor::new(Vec::new());
    let enc = image::codecs::pnm::PnmEncoder::new(&mut buf)
        .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary));
    img.write_with_encoder(enc).map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?;
    std::fs::write(path, buf.into_inner()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_exact_on_8bit_levels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = GrayImage::from_u8(3, 5, &(0..15).map(|i| (i * 17) as u8).collect::<Vec<_>>()).unwrap();
        img.write_pgm(&p).unwrap();
        assert_eq!(GrayImage::read_pgm(&p).unwrap(), img);
        let m = LabelMask::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let q = dir.path().join("m.pgm");
        m.write_pgm(&q).unwrap();
        assert_eq!(LabelMask::read_pgm(&q).unwrap(), m);
    }
}
