use super::{DualSketch, ForegroundMask, Raster};
use crate::error::{Error, Result};

type Pt = (i64, i64);

fn cross(o: Pt, a: Pt, b: Pt) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain; returns the hull counter-clockwise without
/// collinear points, or `None` when the input spans no area.
fn convex_hull(mut pts: Vec<Pt>) -> Option<Vec<Pt>> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return None;
    }
    let mut lower: Vec<Pt> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Pt> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    (lower.len() >= 3).then_some(lower)
}

/// Filled convex hull of the contour ink. Pixels on the hull boundary are inside.
pub fn auto_mask(ds: &DualSketch) -> Result<ForegroundMask> {
    let s_c = &ds.s_c;
    let mut pts = Vec::new();
    for y in 0..s_c.height() {
        for x in 0..s_c.width() {
            if s_c.get(x, y) >= 0.5 {
                pts.push((x as i64, y as i64));
            }
        }
    }
    if pts.len() < 3 {
        return Err(Error::DegenerateMask(format!(
            "contour has {} ink pixels; draw a mask manually",
            pts.len()
        )));
    }
    let hull = convex_hull(pts).ok_or_else(|| {
        Error::DegenerateMask("contour ink is collinear; draw a mask manually".into())
    })?;
    let (xmin, xmax) = hull.iter().fold((i64::MAX, i64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ymin, ymax) = hull.iter().fold((i64::MAX, i64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let mut m = Raster::new(s_c.width(), s_c.height());
    for y in ymin..=ymax {
        for x in xmin..=xmax {
            let inside = (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], (x, y)) >= 0);
            if inside {
                m.set(x as usize, y as usize, 1.0);
            }
        }
    }
    Ok(ForegroundMask(m))
}
