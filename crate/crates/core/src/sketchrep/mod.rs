//! Dual-sketch data model: strokes, binary rasters, foreground masks, paired
//! augmentation, the dataset manifest and the synthetic concept generator.

mod augment;
mod hull;
pub mod manifest;
mod stroke;
pub mod synth;

pub use augment::{apply_transform, augment, transform_raster, AugmentParams};
pub use hull::auto_mask;
pub use stroke::{rasterize, Stroke, StrokeKind};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Single-channel raster, row-major, `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!("{} values for a {width}x{height} raster", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_size(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Number of pixels at value 1 (ink in the `ink = 1` convention).
    pub fn count_on(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Pixel-wise `1 - v`.
    pub fn inverted(&self) -> Raster {
        Raster { width: self.width, height: self.height, data: self.data.iter().map(|v| 1.0 - v).collect() }
    }

    /// Mean `(x, y)` of pixels at value ≥ 0.5.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) >= 0.5 {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.data.clone())
    }
}

/// Three-channel image with planar `[3][H][W]` storage and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; 3 * width * height] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, rgb);
            }
        }
        img
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!("{} values for a {width}x{height} RGB image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let p = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[p + i], self.data[2 * p + i]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let p = self.width * self.height;
        let i = y * self.width + x;
        self.data[i] = rgb[0];
        self.data[p + i] = rgb[1];
        self.data[2 * p + i] = rgb[2];
    }

    /// `[1, 3, H, W]` tensor rescaled from `[0, 1]` to `[-1, 1]`.
    pub fn to_signed_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.data.iter().map(|v| v * 2.0 - 1.0).collect())
    }

    /// Inverse of [`Image::to_signed_tensor`] for one batch element, clamped to `[0, 1]`.
    pub fn from_signed(t: &[f32], width: usize, height: usize) -> Result<Self> {
        Self::from_planar(width, height, t.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect())
    }

    /// Mean over the pixels where `mask ≥ 0.5`, per channel.
    pub fn masked_mean(&self, mask: &Raster) -> Option<[f32; 3]> {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if mask.get(x, y) >= 0.5 {
                    let c = self.get(x, y);
                    for k in 0..3 {
                        acc[k] += c[k] as f64;
                    }
                    n += 1;
                }
            }
        }
        (n > 0).then(|| acc.map(|a| (a / n as f64) as f32))
    }
}

/// Contour and detail strokes as two binary rasters (`ink = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct DualSketch {
    pub s_c: Raster,
    pub s_d: Raster,
}

impl DualSketch {
    pub fn new(s_c: Raster, s_d: Raster) -> Result<Self> {
        if !s_c.same_size(&s_d) {
            return Err(Error::Shape("contour and detail rasters differ in size".into()));
        }
        if !s_c.is_binary() || !s_d.is_binary() {
            return Err(invalid("sketch rasters must be binary"));
        }
        Ok(Self { s_c, s_d })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { s_c: Raster::new(width, height), s_d: Raster::new(width, height) }
    }

    pub fn width(&self) -> usize {
        self.s_c.width()
    }

    pub fn height(&self) -> usize {
        self.s_c.height()
    }
}

/// Binary foreground region gating feature injection and the losses.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask(pub Raster);

impl ForegroundMask {
    pub fn new(r: Raster) -> Result<Self> {
        if !r.is_binary() {
            return Err(invalid("foreground mask must be binary"));
        }
        Ok(Self(r))
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self(Raster::filled(width, height, 1.0))
    }

    pub fn raster(&self) -> &Raster {
        &self.0
    }

    pub fn area(&self) -> usize {
        self.0.count_on()
    }
}

/// One reference image with its dual sketch and foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub image: Image,
    pub sketch: DualSketch,
    pub mask: ForegroundMask,
    pub class_name: String,
    pub concept_id: String,
    /// Full description of the image, used when pretraining the base model.
    pub caption: String,
}

impl TrainingPair {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width(), self.image.height());
        if self.sketch.width() != w || self.sketch.height() != h || self.mask.0.width() != w || self.mask.0.height() != h {
            return Err(Error::Shape(format!("pair {} has rasters of differing size", self.concept_id)));
        }
        Ok(())
    }
}

/// Union of contour and detail ink as an `ink = 0` (black) / background = 1 (white) map.
pub fn merge_binary(ds: &DualSketch) -> Raster {
    let data = ds.s_c.data().iter().zip(ds.s_d.data()).map(|(&c, &d)| if c >= 0.5 || d >= 0.5 { 0.0 } else { 1.0 }).collect();
    Raster { width: ds.width(), height: ds.height(), data }
}

/// 8-bit map with background 0, detail 127 and contour 255 (contour wins).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayMap {
    pub fn to_raster(&self) -> Raster {
        Raster { width: self.width, height: self.height, data: self.data.iter().map(|&v| v as f32 / 255.0).collect() }
    }
}

pub fn merge_gray(ds: &DualSketch) -> GrayMap {
    let data = ds
        .s_c
        .data()
        .iter()
        .zip(ds.s_d.data())
        .map(|(&c, &d)| if c >= 0.5 { 255 } else if d >= 0.5 { 127 } else { 0 })
        .collect();
    GrayMap { width: ds.width(), height: ds.height(), data }
}
