use super::{DualSketch, ForegroundMask, Image, Raster, TrainingPair};
use rand::Rng;

pub const MAX_SHIFT: f32 = 0.2;
pub const MAX_ROTATION_DEG: f32 = 45.0;

/// One sampled joint transform. Translation is a fraction of width/height;
/// rotation is counter-clockwise in degrees about the image centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub shift: [f32; 2],
    pub rotation_deg: f32,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { flip: false, shift: [0.0, 0.0], rotation_deg: 0.0 };

    /// Gate with probability 0.5; when open, every component is drawn.
    pub fn sample(rng: &mut impl Rng) -> Option<AugmentParams> {
        if !rng.random_bool(0.5) {
            return None;
        }
        Some(AugmentParams {
            flip: rng.random_bool(0.5),
            shift: [rng.random_range(-MAX_SHIFT..=MAX_SHIFT), rng.random_range(-MAX_SHIFT..=MAX_SHIFT)],
            rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        })
    }

    /// Source coordinate for output pixel `(x, y)`.
    fn source(&self, x: f32, y: f32, w: usize, h: usize) -> (f32, f32) {
        let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
        let (dx, dy) = (x - self.shift[0] * w as f32 - cx, y - self.shift[1] * h as f32 - cy);
        // inverse rotation; y grows downward so a visual CCW turn is a negative angle in pixel space
        let (s, c) = (-self.rotation_deg.to_radians()).sin_cos();
        let rx = c * dx + s * dy;
        let ry = -s * dx + c * dy;
        let sx = if self.flip { -rx } else { rx };
        (sx + cx, ry + cy)
    }
}

fn warp_nearest(r: &Raster, p: &AugmentParams) -> Raster {
    let (w, h) = (r.width(), r.height());
    let mut out = Raster::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = p.source(x as f32, y as f32, w, h);
            let (ix, iy) = (sx.round(), sy.round());
            if ix >= 0.0 && iy >= 0.0 && (ix as usize) < w && (iy as usize) < h {
                let v = r.get(ix as usize, iy as usize);
                out.set(x, y, if v >= 0.5 { 1.0 } else { 0.0 });
            }
        }
    }
    out
}

fn border_mean(img: &Image) -> [f32; 3] {
    let (w, h) = (img.width(), img.height());
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                let c = img.get(x, y);
                for k in 0..3 {
                    acc[k] += c[k] as f64;
                }
                n += 1;
            }
        }
    }
    acc.map(|a| (a / n as f64) as f32)
}

fn warp_bilinear(img: &Image, p: &AugmentParams) -> Image {
    let (w, h) = (img.width(), img.height());
    let fill = border_mean(img);
    let at = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            img.get(x as usize, y as usize)
        } else {
            fill
        }
    };
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = p.source(x as f32, y as f32, w, h);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let (a, b, c, d) = (at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1));
            let mut rgb = [0.0; 3];
            for k in 0..3 {
                let top = a[k] * (1.0 - fx) + b[k] * fx;
                let bot = c[k] * (1.0 - fx) + d[k] * fx;
                rgb[k] = top * (1.0 - fy) + bot * fy;
            }
            out.set(x, y, rgb);
        }
    }
    out
}

/// Apply one transform jointly to image, both sketch channels and the mask.
pub fn apply_transform(pair: &TrainingPair, p: &AugmentParams) -> TrainingPair {
    TrainingPair {
        image: warp_bilinear(&pair.image, p),
        sketch: DualSketch { s_c: warp_nearest(&pair.sketch.s_c, p), s_d: warp_nearest(&pair.sketch.s_d, p) },
        mask: ForegroundMask(warp_nearest(pair.mask.raster(), p)),
        class_name: pair.class_name.clone(),
        concept_id: pair.concept_id.clone(),
        caption: pair.caption.clone(),
    }
}

/// Random paired augmentation; returns the pair unchanged when the gate is closed.
pub fn augment(pair: &TrainingPair, rng: &mut impl Rng) -> TrainingPair {
    match AugmentParams::sample(rng) {
        Some(p) => apply_transform(pair, &p),
        None => pair.clone(),
    }
}

/// Warp a single binary raster with the same resampling used for sketches and masks.
pub fn transform_raster(r: &Raster, p: &AugmentParams) -> Raster {
    warp_nearest(r, p)
}
