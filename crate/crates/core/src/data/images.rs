use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{Rgb, RgbImage};

use super::DatasetRecord;
use crate::error::{Error, Result};

/// Maps an 8-bit channel value to `[-1, 1]`.
pub fn normalize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize`], clamping out-of-range values.
pub fn denormalize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// A batch of RGB images in `[-1, 1]`, stored `n x h x w x 3` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageBatch {
    pub fn new(n: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {n}x{height}x{width}x3 batch",
                data.len()
            )));
        }
        Ok(Self { n, height, width, data })
    }

    pub fn filled(n: usize, height: usize, width: usize, value: f32) -> Self {
        Self { n, height, width, data: vec![value; n * height * width * 3] }
    }

    /// `(n, height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.height, self.width, 3)
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.height * self.width * 3;
        &self.data[i * len..(i + 1) * len]
    }

    pub fn concat(batches: &[&ImageBatch]) -> Result<Self> {
        let Some(first) = batches.first() else {
            return Err(Error::InvalidArgument("concat of zero batches".into()));
        };
        let mut data = Vec::new();
        let mut n = 0;
        for b in batches {
            if (b.height, b.width) != (first.height, first.width) {
                return Err(Error::Shape("image sizes differ within a batch".into()));
            }
            data.extend_from_slice(&b.data);
            n += b.n;
        }
        Self::new(n, first.height, first.width, data)
    }

    pub fn select(&self, positions: &[usize]) -> Self {
        let mut data = Vec::with_capacity(positions.len() * self.height * self.width * 3);
        for &i in positions {
            data.extend_from_slice(self.image(i));
        }
        Self { n: positions.len(), height: self.height, width: self.width, data }
    }

    /// NCHW tensor for the networks.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.n, self.height, self.width, 3), device)?;
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
    }

    /// Inverse of [`ImageBatch::to_tensor`]; values are taken as-is.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(n, h, w, data)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn to_rgb(&self, i: usize) -> RgbImage {
        let px = self.image(i);
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let o = (y as usize * self.width + x as usize) * 3;
            Rgb([denormalize(px[o]), denormalize(px[o + 1]), denormalize(px[o + 2])])
        })
    }

    pub fn save_png(&self, i: usize, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb(i)
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

pub(crate) fn rgb_to_normalized(img: &RgbImage) -> Vec<f32> {
    img.as_raw().iter().map(|&v| normalize(v)).collect()
}

/// Reads one image, resizing to `size x size` when needed.
pub fn load_image(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    } else {
        img
    };
    Ok(rgb_to_normalized(&img))
}

/// Loads `records` in order as one `size x size` batch.
pub fn load_image_batch(records: &[DatasetRecord], size: usize) -> Result<ImageBatch> {
    let mut data = Vec::with_capacity(records.len() * size * size * 3);
    for r in records {
        data.extend(load_image(&r.image_path, size)?);
    }
    ImageBatch::new(records.len(), size, size, data)
}
