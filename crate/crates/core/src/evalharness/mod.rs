//! Evaluation metrics and benchmark runs.
//!
//! Similarity metrics go through an [`Embedder`]; the two built-in ones are a
//! palette histogram (the only one that embeds text) and pooled features of
//! the frozen denoiser encoder. Desk proxies measure texture orientation,
//! silhouette overlap and background fidelity against the synthetic ground
//! truth.

mod report;

pub use report::{run_benchmark, BenchConfig, Cell, ItemScore, MetricReport, METRICS};

use crate::backbone::BaseModel;
use crate::error::{Error, Result};
use crate::sketchrep::synth::{context_background, COLORS, CONTEXTS, DEFAULT_BACKGROUND, PAPER};
use crate::sketchrep::{Image, Raster};

pub trait Embedder {
    fn name(&self) -> &str;
    /// Unit-norm image embedding.
    fn embed_image(&self, img: &Image) -> Result<Vec<f64>>;
    /// Unit-norm text embedding in the image space.
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Err(Error::InvalidArgument(format!("embedder {} has no text encoder ({text:?})", self.name())))
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("embeddings of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (a.iter().map(|x| x * x).sum::<f64>().sqrt(), b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0))
}

/// Soft colour histogram over the synthetic world's named colours. Text maps
/// to its context background plus any colour words it names.
pub struct PaletteEmbedder {
    palette: Vec<(String, [f32; 3])>,
    sigma: f64,
}

impl Default for PaletteEmbedder {
    fn default() -> Self {
        let mut palette: Vec<(String, [f32; 3])> = COLORS.iter().chain(CONTEXTS).map(|(n, c)| (n.to_string(), *c)).collect();
        palette.push(("gray".into(), DEFAULT_BACKGROUND));
        palette.push(("paper".into(), PAPER));
        palette.push(("black".into(), [0.0; 3]));
        Self { palette, sigma: 0.15 }
    }
}

impl PaletteEmbedder {
    fn index_of(&self, rgb: [f32; 3]) -> usize {
        let d = |c: &[f32; 3]| c.iter().zip(&rgb).map(|(a, b)| (a - b).powi(2)).sum::<f32>();
        (0..self.palette.len()).min_by(|&i, &j| d(&self.palette[i].1).total_cmp(&d(&self.palette[j].1))).unwrap_or(0)
    }
}

impl Embedder for PaletteEmbedder {
    fn name(&self) -> &str {
        "palette"
    }

    fn embed_image(&self, img: &Image) -> Result<Vec<f64>> {
        let mut h = vec![0.0; self.palette.len()];
        let s2 = 2.0 * self.sigma * self.sigma;
        for y in 0..img.height() {
            for x in 0..img.width() {
                let p = img.get(x, y);
                let w: Vec<f64> = self.palette.iter().map(|(_, c)| (-c.iter().zip(&p).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / s2).exp()).collect();
                let total: f64 = w.iter().sum();
                if total > 0.0 {
                    h.iter_mut().zip(&w).for_each(|(a, b)| *a += b / total);
                }
            }
        }
        Ok(normalize(h))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.palette.len()];
        v[self.index_of(context_background(text))] += 1.0;
        for w in text.split(|c: char| !c.is_alphanumeric()) {
            let w = w.to_ascii_lowercase();
            if let Some(i) = COLORS.iter().position(|(n, _)| *n == w) {
                v[i] += 1.0;
            }
        }
        Ok(normalize(v))
    }
}

/// Frozen denoiser encoder features. The embedding is the per-channel mean
/// of each level, each level normalised, concatenated and normalised again.
pub struct FeatureEmbedder<'a> {
    pub base: &'a BaseModel,
}

impl FeatureEmbedder<'_> {
    /// Per level `[C, R·R]` feature columns.
    fn levels(&self, img: &Image) -> Result<Vec<(usize, Vec<f32>)>> {
        Ok(self.base.image_features(img)?.into_iter().map(|t| (t.shape()[1], t.into_data())).collect())
    }

    /// Mean over levels of the per-position squared distance between
    /// channel-normalised features.
    pub fn feature_distance(&self, a: &Image, b: &Image) -> Result<f64> {
        let (la, lb) = (self.levels(a)?, self.levels(b)?);
        let mut total = 0.0;
        for ((c, fa), (_, fb)) in la.iter().zip(&lb) {
            let p = fa.len() / c;
            let norm = |f: &[f32], i: usize| (0..*c).map(|k| (f[k * p + i] as f64).powi(2)).sum::<f64>().sqrt() + 1e-10;
            let mut d = 0.0;
            for i in 0..p {
                let (na, nb) = (norm(fa, i), norm(fb, i));
                d += (0..*c).map(|k| (fa[k * p + i] as f64 / na - fb[k * p + i] as f64 / nb).powi(2)).sum::<f64>();
            }
            total += d / p as f64;
        }
        Ok(total / la.len() as f64)
    }
}

impl Embedder for FeatureEmbedder<'_> {
    fn name(&self) -> &str {
        "features"
    }

    fn embed_image(&self, img: &Image) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (c, f) in self.levels(img)? {
            let p = f.len() / c;
            let means = (0..c).map(|k| f[k * p..(k + 1) * p].iter().map(|&x| x as f64).sum::<f64>() / p as f64).collect();
            out.extend(normalize(means));
        }
        Ok(normalize(out))
    }
}

/// `template` with `[v]` replaced by the class name.
pub fn scored_text(template: &str, class_name: &str) -> Result<String> {
    if !template.contains("[v]") {
        return Err(Error::MissingPlaceholder(template.to_string()));
    }
    Ok(template.replace("[v]", class_name))
}

pub fn prompt_similarity(e: &dyn Embedder, image: &Image, template: &str, class_name: &str) -> Result<f64> {
    let text = scored_text(template, class_name)?;
    cosine(&e.embed_image(image)?, &e.embed_text(&text)?)
}

/// `img` with every pixel outside `mask` set to black.
pub fn mask_image(img: &Image, mask: &Raster) -> Result<Image> {
    if img.width() != mask.width() || img.height() != mask.height() {
        return Err(Error::Shape(format!("image {}x{} vs mask {}x{}", img.width(), img.height(), mask.width(), mask.height())));
    }
    if mask.count_on() == 0 {
        return Err(Error::DegenerateMask("mask covers no pixels".into()));
    }
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(x, y) < 0.5 {
                out.set(x, y, [0.0; 3]);
            }
        }
    }
    Ok(out)
}

pub fn identity_similarity(e: &dyn Embedder, generated: &Image, reference: &Image, gen_mask: &Raster, ref_mask: &Raster) -> Result<f64> {
    let (g, r) = (mask_image(generated, gen_mask)?, mask_image(reference, ref_mask)?);
    cosine(&e.embed_image(&g)?, &e.embed_image(&r)?)
}

/// Encoder feature distance between the masked images; symmetric, 0 for
/// identical masked content.
pub fn perceptual_distance(e: &FeatureEmbedder, generated: &Image, reference: &Image, gen_mask: &Raster, ref_mask: &Raster) -> Result<f64> {
    let (g, r) = (mask_image(generated, gen_mask)?, mask_image(reference, ref_mask)?);
    if g == r {
        return Ok(0.0);
    }
    e.feature_distance(&g, &r)
}

/// Coherence below which a region has no dominant orientation.
pub const COHERENCE_THRESHOLD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Orientation {
    /// Dominant line direction in `[0, 180)`, counter-clockwise from +x, y up.
    pub degrees: f64,
    /// `(λ1 − λ2) / (λ1 + λ2)` of the structure tensor, in `[0, 1]`.
    pub coherence: f64,
}

impl Orientation {
    pub fn defined(&self) -> bool {
        self.coherence >= COHERENCE_THRESHOLD
    }
}

/// Structure tensor of the luminance Sobel gradients summed over `region`.
pub fn dominant_orientation(img: &Image, region: &Raster) -> Result<Orientation> {
    if img.width() != region.width() || img.height() != region.height() {
        return Err(Error::Shape("image and region differ in size".into()));
    }
    if region.count_on() == 0 {
        return Err(Error::DegenerateMask("orientation region is empty".into()));
    }
    let lum = |x: usize, y: usize| {
        let c = img.get(x, y);
        (c[0] + c[1] + c[2]) as f64 / 3.0
    };
    let (mut jxx, mut jyy, mut jxy) = (0.0, 0.0, 0.0);
    for y in 1..img.height().saturating_sub(1) {
        for x in 1..img.width().saturating_sub(1) {
            if region.get(x, y) < 0.5 {
                continue;
            }
            // row index grows downwards, so gy flips sign to point up
            let gx = lum(x + 1, y - 1) + 2.0 * lum(x + 1, y) + lum(x + 1, y + 1) - lum(x - 1, y - 1) - 2.0 * lum(x - 1, y) - lum(x - 1, y + 1);
            let gy = lum(x - 1, y - 1) + 2.0 * lum(x, y - 1) + lum(x + 1, y - 1) - lum(x - 1, y + 1) - 2.0 * lum(x, y + 1) - lum(x + 1, y + 1);
            jxx += gx * gx;
            jyy += gy * gy;
            jxy += gx * gy;
        }
    }
    let trace = jxx + jyy;
    let coherence = if trace > 1e-12 { ((jxx - jyy).powi(2) + 4.0 * jxy * jxy).sqrt() / trace } else { 0.0 };
    let grad = 0.5 * (2.0 * jxy).atan2(jxx - jyy);
    Ok(Orientation { degrees: (grad.to_degrees() + 90.0).rem_euclid(180.0), coherence })
}

/// Angular distance between line directions, in `[0, 90]`.
pub fn line_angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

/// Error of the dominant texture direction in `region` against `target`
/// degrees; `None` when the region has no dominant direction.
pub fn texture_orientation_error(img: &Image, region: &Raster, target_deg: f64) -> Result<Option<f64>> {
    let o = dominant_orientation(img, region)?;
    Ok(o.defined().then(|| line_angle_diff(o.degrees, target_deg)))
}

/// Default colour-distance threshold separating foreground from background.
pub const SEGMENT_THRESHOLD: f32 = 0.15;

/// Pixels farther than `threshold` (RGB Euclidean) from `background`.
pub fn segment_foreground(img: &Image, background: [f32; 3], threshold: f32) -> Raster {
    let mut r = Raster::new(img.width(), img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let d = img.get(x, y).iter().zip(&background).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
            if d > threshold {
                r.set(x, y, 1.0);
            }
        }
    }
    r
}

/// Intersection over union of two binary rasters (cells ≥ 0.5); 1 when both are empty.
pub fn iou(a: &Raster, b: &Raster) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::Shape("rasters differ in size".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (p, q) = (*x >= 0.5, *y >= 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU of the segmented foreground of `img` with `target`.
pub fn silhouette_iou(img: &Image, target: &Raster, background: [f32; 3]) -> Result<f64> {
    iou(&segment_foreground(img, background, SEGMENT_THRESHOLD), target)
}

/// Mean squared pixel difference over the cells where `region` ≥ 0.5.
pub fn masked_mse(a: &Image, b: &Image, region: &Raster) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() || a.width() != region.width() || a.height() != region.height() {
        return Err(Error::Shape("images and region differ in size".into()));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            if region.get(x, y) >= 0.5 {
                s += a.get(x, y).iter().zip(b.get(x, y)).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>();
                n += 3;
            }
        }
    }
    if n == 0 {
        return Err(Error::DegenerateMask("mse region is empty".into()));
    }
    Ok(s / n as f64)
}

#[cfg(test)]
mod tests;
