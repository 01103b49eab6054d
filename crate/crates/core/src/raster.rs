//! In-memory RGB images and single-channel label maps, plus their PNG codecs.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Label value excluded from supervision and from every metric count.
pub const IGNORE_LABEL: u8 = 255;

/// An `H × W × 3` image with channel values in `[0, 1]`, row-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "image buffer has {} values, expected {}×{}×3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `(3, H, W)` tensor, the layout expected by the convolutional backbone.
    pub fn to_chw_tensor(&self) -> Result<Tensor> {
        let hwc = Tensor::from_vec(self.data.clone(), (self.height, self.width, 3), &Device::Cpu)?;
        Ok(hwc.permute((2, 0, 1))?.contiguous()?)
    }

    /// Stacks images of identical size into a `(B, 3, H, W)` batch.
    pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let mut chw = Vec::with_capacity(images.len());
        for img in images {
            if img.height != first.height || img.width != first.width {
                return Err(Error::Dimension("images in a batch must share a size".into()));
            }
            chw.push(img.to_chw_tensor()?);
        }
        Ok(Tensor::stack(&chw, 0)?)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(h as usize, w as usize, data)
    }

    /// Quantizes to 8 bits per channel and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for r in 0..self.height {
            for c in 0..self.width {
                let p = self.pixel(r, c);
                let q = p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
                out.put_pixel(c as u32, r as u32, Rgb(q));
            }
        }
        out.save(path)?;
        Ok(())
    }
}

/// An `H × W` grid of class labels, with [`IGNORE_LABEL`] as the sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "label buffer has {} values, expected {}×{}",
                labels.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Nearest-neighbour downsampling by an integer factor, sampling the centre of each cell.
    pub fn downsample(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Dimension(format!(
                "{}×{} label map is not divisible by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut labels = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                labels.push(self.get(r * factor + factor / 2, c * factor + factor / 2));
            }
        }
        LabelMap::new(h, w, labels)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> LabelMap {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut labels = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                labels.push(self.get(r / factor, c / factor));
            }
        }
        LabelMap {
            height: h,
            width: w,
            labels,
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        LabelMap::new(h as usize, w as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .ok_or_else(|| Error::Dimension("label buffer size".into()))?;
        img.save(path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_then_upsample_preserves_blocky_maps() {
        let coarse = LabelMap::new(2, 2, vec![0, 1, 2, IGNORE_LABEL]).unwrap();
        let fine = coarse.upsample(4);
        assert_eq!(fine.height, 8);
        assert_eq!(fine.downsample(4).unwrap(), coarse);
        assert!(fine.downsample(3).is_err());
    }

    #[test]
    fn chw_tensor_layout() {
        let mut img = Image::filled(2, 3, 0.0);
        img.data[(1 * 3 + 2) * 3 + 1] = 0.5; // row 1, col 2, green
        let t = img.to_chw_tensor().unwrap();
        assert_eq!(t.dims(), &[3, 2, 3]);
        let v: f64 = t.get(1).unwrap().get(1).unwrap().get(2).unwrap().to_scalar().unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let data = (0..4 * 4 * 3).map(|i| (i * 5 % 256) as f64 / 255.0).collect();
        let img = Image::new(4, 4, data).unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(Image::load_png(&path).unwrap(), img);

        let labels = LabelMap::new(2, 2, vec![0, 3, 5, IGNORE_LABEL]).unwrap();
        let lpath = dir.path().join("l.png");
        labels.save_png(&lpath).unwrap();
        assert_eq!(LabelMap::load_png(&lpath).unwrap(), labels);
    }
}
