use super::{DualSketch, Raster};
use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrokeKind {
    Contour,
    Detail,
}

/// A polyline in normalised `[0, 1]²` coordinates; `width` is in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub kind: StrokeKind,
    pub width: u32,
    pub points: Vec<[f32; 2]>,
}

impl Stroke {
    pub fn new(kind: StrokeKind, width: u32, points: Vec<[f32; 2]>) -> Result<Self> {
        let s = Self { kind, width, points };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(invalid(format!("stroke needs at least 2 points, got {}", self.points.len())));
        }
        if self.width == 0 {
            return Err(invalid("stroke width must be at least 1 pixel"));
        }
        for p in &self.points {
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                return Err(invalid(format!("stroke point {p:?} outside the unit square")));
            }
        }
        Ok(())
    }
}

fn to_pixel(p: [f32; 2], w: usize, h: usize) -> (i64, i64) {
    ((p[0] as f64 * (w - 1) as f64).round() as i64, (p[1] as f64 * (h - 1) as f64).round() as i64)
}

fn stamp(r: &mut Raster, x: i64, y: i64, width: u32) {
    let rad = (width as i64 - 1) / 2;
    let extra = (width as i64 - 1) % 2;
    for dy in -rad..=rad + extra {
        for dx in -rad..=rad + extra {
            let (px, py) = (x + dx, y + dy);
            if px >= 0 && py >= 0 && (px as usize) < r.width() && (py as usize) < r.height() {
                r.set(px as usize, py as usize, 1.0);
            }
        }
    }
}

/// Bresenham segment between two pixel centres, stamping a `width`-pixel square brush.
pub(crate) fn draw_line(r: &mut Raster, a: (i64, i64), b: (i64, i64), width: u32) {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        stamp(r, x0, y0, width);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Draw strokes into a fresh dual sketch; contour strokes land in `s_c`,
/// detail strokes in `s_d`. No anti-aliasing.
pub fn rasterize(strokes: &[Stroke], height: usize, width: usize) -> Result<DualSketch> {
    if height < 16 || width < 16 {
        return Err(invalid(format!("raster size {width}x{height} below 16x16")));
    }
    let mut ds = DualSketch::empty(width, height);
    for s in strokes {
        s.validate()?;
        let target = match s.kind {
            StrokeKind::Contour => &mut ds.s_c,
            StrokeKind::Detail => &mut ds.s_d,
        };
        for seg in s.points.windows(2) {
            draw_line(target, to_pixel(seg[0], width, height), to_pixel(seg[1], width, height), s.width);
        }
    }
    Ok(ds)
}
