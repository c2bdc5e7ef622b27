//! Procedural concept world: parametric silhouettes filled with a colour and a
//! striped or dotted texture, contour strokes tracing the outline and sparse
//! detail strokes following the texture direction.
//!
//! Orientation convention: degrees counter-clockwise from the +x axis with
//! y pointing up on screen, so 0° stripes are horizontal lines and 90°
//! stripes are vertical lines.

use super::{auto_mask, rasterize, DualSketch, ForegroundMask, Image, Raster, Stroke, StrokeKind, TrainingPair};
use crate::error::{invalid, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const STRIPE_PERIOD: f32 = 8.0;
pub const STRIPE_DUTY: f32 = 0.45;
pub const TEXTURE_DARKEN: f32 = 0.35;
pub const DEFAULT_BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];
pub const PAPER: [f32; 3] = [1.0, 1.0, 1.0];

pub const COLORS: &[(&str, [f32; 3])] = &[
    ("red", [0.85, 0.15, 0.15]),
    ("orange", [0.95, 0.55, 0.1]),
    ("yellow", [0.95, 0.85, 0.2]),
    ("green", [0.2, 0.7, 0.25]),
    ("blue", [0.15, 0.3, 0.85]),
    ("purple", [0.55, 0.2, 0.7]),
    ("pink", [0.95, 0.5, 0.7]),
    ("cyan", [0.2, 0.8, 0.85]),
];

/// Context word → uniform background colour.
pub const CONTEXTS: &[(&str, [f32; 3])] = &[
    ("beach", [0.86, 0.78, 0.55]),
    ("jungle", [0.1, 0.35, 0.12]),
    ("snow", [0.95, 0.96, 0.98]),
    ("street", [0.3, 0.3, 0.32]),
    ("wooden", [0.55, 0.35, 0.18]),
    ("city", [0.55, 0.6, 0.7]),
    ("mountain", [0.45, 0.5, 0.42]),
    ("eiffel", [0.55, 0.75, 0.92]),
    ("water", [0.2, 0.55, 0.65]),
    ("office", [0.85, 0.8, 0.68]),
];

/// Phrase used in captions for each context word.
pub const CONTEXT_PHRASES: &[(&str, &str)] = &[
    ("beach", "at the beach"),
    ("jungle", "in the jungle"),
    ("snow", "in the snow"),
    ("street", "in the street"),
    ("wooden", "on top of a wooden floor"),
    ("city", "with a city in the background"),
    ("mountain", "with a mountain in the background"),
    ("eiffel", "with the eiffel tower in the background"),
    ("water", "floating on top of water"),
    ("office", "in an office"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Crayon,
    Watercolor,
    Pencil,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Crayon, Style::Watercolor, Style::Pencil];

    pub fn phrase(self) -> &'static str {
        match self {
            Style::Crayon => "a crayon drawing",
            Style::Watercolor => "a watercolor painting",
            Style::Pencil => "a pencil sketch",
        }
    }

    /// Keyword that selects this style in a prompt.
    pub fn keyword(self) -> &'static str {
        match self {
            Style::Crayon => "crayon",
            Style::Watercolor => "watercolor",
            Style::Pencil => "pencil",
        }
    }

    /// Fill colour after the style's palette mapping.
    pub fn fill(self, rgb: [f32; 3]) -> [f32; 3] {
        match self {
            Style::Crayon => rgb.map(|c| (1.2 * c - 0.1).clamp(0.0, 1.0)),
            Style::Watercolor => rgb.map(|c| 0.5 * c + 0.5),
            Style::Pencil => {
                let l = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                [0.6 + 0.3 * l; 3]
            }
        }
    }

    pub fn texture(self, rgb: [f32; 3]) -> [f32; 3] {
        match self {
            Style::Pencil => [0.25; 3],
            _ => self.fill(rgb).map(|c| c * TEXTURE_DARKEN),
        }
    }
}

/// Class name → silhouette family.
pub const CLASSES: &[(&str, ShapeFamily)] = &[
    ("toy", ShapeFamily::Blob { aspect: [1.0, 1.0], harmonic: 3, amp: 0.08 }),
    ("vase", ShapeFamily::Polygon { sides: 6, aspect: [0.6, 1.1] }),
    ("bag", ShapeFamily::Polygon { sides: 4, aspect: [1.05, 0.9] }),
    ("hat", ShapeFamily::Blob { aspect: [1.25, 0.6], harmonic: 2, amp: 0.05 }),
    ("cat", ShapeFamily::Polygon { sides: 5, aspect: [1.0, 0.95] }),
    ("woman", ShapeFamily::Blob { aspect: [0.55, 1.15], harmonic: 2, amp: 0.06 }),
    ("shoe", ShapeFamily::Polygon { sides: 7, aspect: [1.25, 0.6] }),
    ("cup", ShapeFamily::Polygon { sides: 8, aspect: [0.85, 0.85] }),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum ShapeFamily {
    /// Radius `1 + amp·cos(harmonic·φ)`, convex for `amp·(harmonic² − 1) ≤ 1`.
    Blob { aspect: [f32; 2], harmonic: u32, amp: f32 },
    Polygon { sides: u32, aspect: [f32; 2] },
}

impl ShapeFamily {
    pub fn for_class(class: &str) -> Option<ShapeFamily> {
        CLASSES.iter().find(|(c, _)| *c == class).map(|(_, s)| *s)
    }

    fn with_aspect(self, a: [f32; 2]) -> ShapeFamily {
        match self {
            ShapeFamily::Blob { harmonic, amp, .. } => ShapeFamily::Blob { aspect: a, harmonic, amp },
            ShapeFamily::Polygon { sides, .. } => ShapeFamily::Polygon { sides, aspect: a },
        }
    }

    fn aspect(self) -> [f32; 2] {
        match self {
            ShapeFamily::Blob { aspect, .. } | ShapeFamily::Polygon { aspect, .. } => aspect,
        }
    }

    /// Outline vertices on the unit scale, counter-clockwise, centred at the origin.
    fn outline(self) -> Vec<[f32; 2]> {
        match self {
            ShapeFamily::Blob { aspect, harmonic, amp } => (0..48)
                .map(|i| {
                    let phi = i as f32 / 48.0 * std::f32::consts::TAU;
                    let r = 1.0 + amp * (harmonic as f32 * phi).cos();
                    [r * phi.cos() * aspect[0], r * phi.sin() * aspect[1]]
                })
                .collect(),
            ShapeFamily::Polygon { sides, aspect } => (0..sides)
                .map(|i| {
                    let phi = i as f32 / sides as f32 * std::f32::consts::TAU + std::f32::consts::FRAC_PI_2;
                    [phi.cos() * aspect[0], phi.sin() * aspect[1]]
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Stripes,
    Dots,
}

impl TextureKind {
    pub fn word(self) -> &'static str {
        match self {
            TextureKind::Stripes => "stripes",
            TextureKind::Dots => "dots",
        }
    }
}

/// How the background of a render is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundPolicy {
    /// First context or style word in the prompt selects the colour; gray otherwise.
    Contextual,
    Fixed([f32; 3]),
}

impl BackgroundPolicy {
    pub fn color_for(&self, prompt: &str) -> [f32; 3] {
        match self {
            BackgroundPolicy::Fixed(c) => *c,
            BackgroundPolicy::Contextual => context_background(prompt),
        }
    }
}

/// Background colour implied by the words of a prompt.
pub fn context_background(prompt: &str) -> [f32; 3] {
    for w in prompt.split(|c: char| !c.is_alphanumeric()) {
        let w = w.to_ascii_lowercase();
        if let Some((_, c)) = CONTEXTS.iter().find(|(k, _)| *k == w) {
            return *c;
        }
        if Style::ALL.iter().any(|s| s.keyword() == w) {
            return PAPER;
        }
    }
    DEFAULT_BACKGROUND
}

/// Style named by a prompt, if any.
pub fn prompt_style(prompt: &str) -> Option<Style> {
    let lower = prompt.to_ascii_lowercase();
    Style::ALL.into_iter().find(|s| lower.split(|c: char| !c.is_alphanumeric()).any(|w| w == s.keyword()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConceptSpec {
    pub concept_id: String,
    pub class_name: String,
    pub shape: ShapeFamily,
    pub fill: [f32; 3],
    pub texture: TextureKind,
    pub orientation_deg: f32,
    pub background: BackgroundPolicy,
}

impl SyntheticConceptSpec {
    pub fn new(concept_id: &str, class_name: &str, fill: [f32; 3], texture: TextureKind, orientation_deg: f32) -> Result<Self> {
        let shape = ShapeFamily::for_class(class_name).ok_or_else(|| invalid(format!("no shape family for class {class_name:?}")))?;
        let s = Self {
            concept_id: concept_id.into(),
            class_name: class_name.into(),
            shape,
            fill,
            texture,
            orientation_deg,
            background: BackgroundPolicy::Fixed(DEFAULT_BACKGROUND),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..180.0).contains(&self.orientation_deg) {
            return Err(invalid(format!("orientation {} outside [0, 180)", self.orientation_deg)));
        }
        if self.fill.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid("fill colour outside [0, 1]"));
        }
        Ok(())
    }
}

/// Placement of a silhouette in normalised image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub center: [f32; 2],
    pub radius: f32,
    pub rotation_deg: f32,
}

impl Pose {
    pub const CENTERED: Pose = Pose { center: [0.5, 0.5], radius: 0.3, rotation_deg: 0.0 };

    fn jittered(rng: &mut impl Rng) -> Pose {
        Pose {
            center: [0.5 + rng.random_range(-0.06..0.06), 0.5 + rng.random_range(-0.06..0.06)],
            radius: 0.3 * rng.random_range(0.9..1.1),
            rotation_deg: rng.random_range(-10.0..10.0),
        }
    }
}

/// Everything needed to draw one object.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub shape: ShapeFamily,
    pub pose: Pose,
    pub fill: [f32; 3],
    pub texture: TextureKind,
    pub orientation_deg: f32,
    /// Texture offset along the stripe normal, pixels in `[0, period)`.
    pub phase: f32,
    pub background: [f32; 3],
    pub style: Option<Style>,
}

/// A drawn scene with its strokes and ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Render {
    pub image: Image,
    pub strokes: Vec<Stroke>,
    pub sketch: DualSketch,
    pub silhouette: Raster,
}

fn point_in_polygon(p: [f32; 2], poly: &[[f32; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Unit direction of lines at `deg` and its normal, in pixel coordinates (y down).
pub fn orientation_axes(deg: f32) -> ([f32; 2], [f32; 2]) {
    let (s, c) = deg.to_radians().sin_cos();
    ([c, -s], [s, c])
}

impl Scene {
    /// Outline polygon in pixel coordinates.
    fn polygon(&self, size: usize) -> Vec<[f32; 2]> {
        let scale = self.pose.radius * (size - 1) as f32;
        let (s, c) = (-self.pose.rotation_deg.to_radians()).sin_cos();
        self.shape
            .outline()
            .into_iter()
            .map(|[x, y]| {
                let (rx, ry) = (c * x - s * y, s * x + c * y);
                [self.pose.center[0] * (size - 1) as f32 + rx * scale, self.pose.center[1] * (size - 1) as f32 + ry * scale]
            })
            .collect()
    }

    fn texture_on(&self, x: f32, y: f32) -> bool {
        let (dir, nrm) = orientation_axes(self.orientation_deg);
        let d = x * nrm[0] + y * nrm[1] - self.phase;
        match self.texture {
            TextureKind::Stripes => d.rem_euclid(STRIPE_PERIOD) < STRIPE_DUTY * STRIPE_PERIOD,
            TextureKind::Dots => {
                let along = x * dir[0] + y * dir[1];
                let row = (d / STRIPE_PERIOD).round() * STRIPE_PERIOD;
                let col = (along / 4.0).round() * 4.0;
                let (dr, dc) = (d - row, along - col);
                dr * dr + dc * dc <= 1.6 * 1.6
            }
        }
    }

    pub fn render(&self, size: usize) -> Result<Render> {
        let poly = self.polygon(size);
        let mut silhouette = Raster::new(size, size);
        let mut image = Image::filled(size, size, self.background);
        let (fill, tex) = match self.style {
            Some(s) => (s.fill(self.fill), s.texture(self.fill)),
            None => (self.fill, self.fill.map(|c| c * TEXTURE_DARKEN)),
        };
        for y in 0..size {
            for x in 0..size {
                if point_in_polygon([x as f32, y as f32], &poly) {
                    silhouette.set(x, y, 1.0);
                    image.set(x, y, if self.texture_on(x as f32, y as f32) { tex } else { fill });
                }
            }
        }
        let to_unit = |p: [f32; 2]| [(p[0] / (size - 1) as f32).clamp(0.0, 1.0), (p[1] / (size - 1) as f32).clamp(0.0, 1.0)];
        let mut outline: Vec<[f32; 2]> = poly.iter().map(|&p| to_unit(p)).collect();
        outline.push(outline[0]);
        let mut strokes = vec![Stroke::new(StrokeKind::Contour, 1, outline)?];
        strokes.extend(self.flow_lines(size, &silhouette)?);
        let sketch = rasterize(&strokes, size, size)?;
        Ok(Render { image, strokes, sketch, silhouette })
    }

    /// Detail strokes along the centre of every second texture row, clipped
    /// to the silhouette eroded by two pixels.
    fn flow_lines(&self, size: usize, silhouette: &Raster) -> Result<Vec<Stroke>> {
        let inner = erode(silhouette, 2);
        let (dir, nrm) = orientation_axes(self.orientation_deg);
        let centre = (size - 1) as f32 / 2.0;
        let reach = size as f32;
        let band = match self.texture {
            TextureKind::Stripes => STRIPE_DUTY * STRIPE_PERIOD / 2.0,
            TextureKind::Dots => 0.0,
        };
        let centre_n = centre * nrm[0] + centre * nrm[1];
        let k0 = (-reach / STRIPE_PERIOD).floor() as i64;
        let k1 = (reach / STRIPE_PERIOD).ceil() as i64;
        let mut out = Vec::new();
        for k in (k0..=k1).filter(|k| k.rem_euclid(2) == 0) {
            // texture row k is centred at normal offset phase + band + k·period
            let row = self.phase + band + k as f32 * STRIPE_PERIOD;
            let shift = row - centre_n;
            let p0 = [centre + nrm[0] * shift, centre + nrm[1] * shift];
            let mut run: Vec<[f32; 2]> = Vec::new();
            let mut t = -reach;
            while t <= reach {
                let p = [p0[0] + dir[0] * t, p0[1] + dir[1] * t];
                let (ix, iy) = (p[0].round(), p[1].round());
                let on = ix >= 0.0 && iy >= 0.0 && (ix as usize) < size && (iy as usize) < size && inner.get(ix as usize, iy as usize) >= 0.5;
                if on {
                    run.push([(p[0] / (size - 1) as f32).clamp(0.0, 1.0), (p[1] / (size - 1) as f32).clamp(0.0, 1.0)]);
                } else if !run.is_empty() {
                    flush(&mut out, &mut run)?;
                }
                t += 1.0;
            }
            flush(&mut out, &mut run)?;
        }
        Ok(out)
    }
}

fn flush(out: &mut Vec<Stroke>, run: &mut Vec<[f32; 2]>) -> Result<()> {
    if run.len() >= 4 {
        out.push(Stroke::new(StrokeKind::Detail, 1, vec![run[0], run[run.len() - 1]])?);
    }
    run.clear();
    Ok(())
}

/// Binary erosion with a `(2r+1)²` square.
pub fn erode(r: &Raster, radius: usize) -> Raster {
    let (w, h) = (r.width(), r.height());
    let mut out = Raster::new(w, h);
    let rad = radius as i64;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let keep = (-rad..=rad).all(|dy| {
                (-rad..=rad).all(|dx| {
                    let (px, py) = (x + dx, y + dy);
                    px >= 0 && py >= 0 && px < w as i64 && py < h as i64 && r.get(px as usize, py as usize) >= 0.5
                })
            });
            if keep {
                out.set(x as usize, y as usize, 1.0);
            }
        }
    }
    out
}

/// One training pair with the strokes it was rasterised from.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub pair: TrainingPair,
    pub strokes: Vec<Stroke>,
    pub silhouette: Raster,
    pub orientation_deg: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Orientation,
    Shape,
    Both,
}

/// An edited sketch with ground truth for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthEdit {
    pub kind: EditKind,
    pub strokes: Vec<Stroke>,
    pub sketch: DualSketch,
    pub mask: ForegroundMask,
    pub silhouette: Raster,
    pub orientation_deg: f32,
    /// The concept drawn with the edited geometry on the default background.
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConcept {
    pub spec: SyntheticConceptSpec,
    pub pairs: Vec<SynthPair>,
    pub edits: Vec<SynthEdit>,
}

impl SynthConcept {
    pub fn training_pairs(&self) -> Vec<TrainingPair> {
        self.pairs.iter().map(|p| p.pair.clone()).collect()
    }
}

fn wrap_deg(d: f32) -> f32 {
    d.rem_euclid(180.0)
}

/// Render `n_pairs` reference pairs of one concept plus `n_edits` edited sketches.
/// Edits cycle through orientation, shape and combined changes.
pub fn synth_concept(spec: &SyntheticConceptSpec, n_pairs: usize, n_edits: usize, size: usize, rng: &mut impl Rng) -> Result<SynthConcept> {
    spec.validate()?;
    if n_pairs == 0 {
        return Err(invalid("n_pairs must be at least 1"));
    }
    let background = spec.background.color_for("");
    let scene = |pose: Pose, shape: ShapeFamily, orientation: f32, phase: f32| Scene {
        shape,
        pose,
        fill: spec.fill,
        texture: spec.texture,
        orientation_deg: orientation,
        phase,
        background,
        style: None,
    };
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let pose = if pairs.is_empty() { Pose::CENTERED } else { Pose::jittered(rng) };
        let phase = rng.random_range(0.0..STRIPE_PERIOD);
        let r = scene(pose, spec.shape, spec.orientation_deg, phase).render(size)?;
        let mask = auto_mask(&r.sketch)?;
        let pair = TrainingPair {
            image: r.image,
            sketch: r.sketch,
            mask,
            class_name: spec.class_name.clone(),
            concept_id: spec.concept_id.clone(),
            caption: format!("a photo of a {}", spec.class_name),
        };
        pairs.push(SynthPair { pair, strokes: r.strokes, silhouette: r.silhouette, orientation_deg: spec.orientation_deg });
    }
    let mut edits = Vec::with_capacity(n_edits);
    for i in 0..n_edits {
        let kind = [EditKind::Orientation, EditKind::Shape, EditKind::Both][i % 3];
        let mut pose = Pose::CENTERED;
        let mut shape = spec.shape;
        let mut orientation = spec.orientation_deg;
        if kind != EditKind::Shape {
            let delta = rng.random_range(45.0..=90.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            orientation = wrap_deg(orientation + delta);
        }
        if kind != EditKind::Orientation {
            let a = shape.aspect();
            shape = shape.with_aspect([a[0] * rng.random_range(0.75..1.25), a[1] * rng.random_range(0.75..1.25)]);
            pose.center = [0.5 + rng.random_range(-0.08..0.08), 0.5 + rng.random_range(-0.08..0.08)];
            pose.radius = 0.3 * rng.random_range(0.8..1.1);
            pose.rotation_deg = rng.random_range(-20.0..20.0);
        }
        let phase = rng.random_range(0.0..STRIPE_PERIOD);
        let r = scene(pose, shape, orientation, phase).render(size)?;
        let mask = auto_mask(&r.sketch)?;
        edits.push(SynthEdit {
            kind,
            strokes: r.strokes,
            sketch: r.sketch,
            mask,
            silhouette: r.silhouette,
            orientation_deg: orientation,
            image: r.image,
        });
    }
    Ok(SynthConcept { spec: spec.clone(), pairs, edits })
}

/// Filler prefixes shared with the concept-training templates.
pub const PHOTO_PREFIXES: &[&str] = &[
    "a photo of a",
    "a rendering of a",
    "a cropped photo of the",
    "the photo of a",
    "a close-up photo of a",
    "a good photo of a",
    "a photo of one",
    "a photo of my",
    "a photo of the nice",
    "a photo of the small",
    "a photo of the large",
    "a photo of the clean",
    "a photo of the cool",
    "a rendition of the",
];

/// Captioned random scenes for pretraining the base model.
pub fn base_corpus(n: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (class, shape) = CLASSES[rng.random_range(0..CLASSES.len())];
        let (color_word, fill) = COLORS[rng.random_range(0..COLORS.len())];
        let texture = if rng.random_bool(0.5) { TextureKind::Stripes } else { TextureKind::Dots };
        let orientation = rng.random_range(0.0..180.0f32);
        let a = shape.aspect();
        let shape = shape.with_aspect([a[0] * rng.random_range(0.85..1.15), a[1] * rng.random_range(0.85..1.15)]);
        let pose = Pose {
            center: [0.5 + rng.random_range(-0.1..0.1), 0.5 + rng.random_range(-0.1..0.1)],
            radius: rng.random_range(0.22..0.34),
            rotation_deg: rng.random_range(-20.0..20.0),
        };
        let style = if rng.random_bool(0.15) { Some(Style::ALL[rng.random_range(0..3)]) } else { None };
        let context = if style.is_none() && rng.random_bool(0.6) { Some(CONTEXT_PHRASES[rng.random_range(0..CONTEXT_PHRASES.len())]) } else { None };
        let name_color = rng.random_bool(0.8);
        let noun = if name_color { format!("{color_word} {class}") } else { class.to_string() };
        let mut caption = match style {
            Some(s) => format!("{} of a {noun}", s.phrase()),
            None => format!("{} {noun}", PHOTO_PREFIXES[rng.random_range(0..PHOTO_PREFIXES.len())]),
        };
        if rng.random_bool(0.5) {
            caption.push_str(&format!(" with {}", texture.word()));
        }
        if let Some((_, phrase)) = context {
            caption.push(' ');
            caption.push_str(phrase);
        }
        let background = context_background(&caption);
        let scene = Scene {
            shape,
            pose,
            fill,
            texture,
            orientation_deg: orientation,
            phase: rng.random_range(0.0..STRIPE_PERIOD),
            background,
            style,
        };
        let r = scene.render(size)?;
        let mask = auto_mask(&r.sketch)?;
        out.push(TrainingPair {
            image: r.image,
            sketch: r.sketch,
            mask,
            class_name: class.to_string(),
            concept_id: format!("corpus-{i}"),
            caption,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(deg: f32) -> SyntheticConceptSpec {
        SyntheticConceptSpec::new("t", "toy", [0.9, 0.5, 0.2], TextureKind::Stripes, deg).unwrap()
    }

    fn dominant_line_deg(img: &Image, region: &Raster) -> f64 {
        crate::evalharness::dominant_orientation(img, region).unwrap().degrees
    }

    #[test]
    fn horizontal_stripes_have_vertical_gradient() {
        let c = synth_concept(&spec(0.0), 1, 0, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p = &c.pairs[0];
        let region = erode(&p.silhouette, 3);
        let deg = dominant_line_deg(&p.pair.image, &region);
        assert!(deg.min(180.0 - deg) < 3.0, "measured {deg}");
        for s in p.strokes.iter().filter(|s| s.kind == StrokeKind::Detail) {
            let (a, b) = (s.points[0], s.points[1]);
            assert!((a[1] - b[1]).abs() < 1.5 / 63.0, "detail stroke not horizontal: {a:?} {b:?}");
        }
        assert!(p.pair.sketch.s_d.count_on() > 0);
    }

    #[test]
    fn oblique_orientation_is_recoverable_from_render() {
        for deg in [30.0f32, 75.0, 120.0, 160.0] {
            let c = synth_concept(&spec(deg), 1, 0, 64, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let p = &c.pairs[0];
            let got = dominant_line_deg(&p.pair.image, &erode(&p.silhouette, 3));
            let err = (got - deg as f64).rem_euclid(180.0);
            assert!(err.min(180.0 - err) < 4.0, "{deg}: measured {got}");
        }
    }

    #[test]
    fn single_pair_and_determinism() {
        let a = synth_concept(&spec(10.0), 1, 3, 64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = synth_concept(&spec(10.0), 1, 3, 64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.pairs.len(), 1);
        assert_eq!(a.edits.len(), 3);
        assert_eq!(a, b);
        assert!(synth_concept(&spec(10.0), 0, 0, 64, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn orientation_edits_change_the_label() {
        let c = synth_concept(&spec(20.0), 1, 3, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let e = &c.edits[0];
        assert_eq!(e.kind, EditKind::Orientation);
        let d = (e.orientation_deg - 20.0).rem_euclid(180.0);
        assert!(d.min(180.0 - d) >= 45.0 - 1e-3);
        assert_eq!(c.edits[1].orientation_deg, 20.0);
    }

    #[test]
    fn orientation_outside_range_is_rejected() {
        assert!(SyntheticConceptSpec::new("t", "toy", [0.5; 3], TextureKind::Dots, 180.0).is_err());
        assert!(SyntheticConceptSpec::new("t", "toy", [0.5; 3], TextureKind::Dots, -1.0).is_err());
    }

    #[test]
    fn auto_mask_covers_silhouette() {
        let c = synth_concept(&spec(45.0), 3, 3, 64, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for p in &c.pairs {
            let sil = &p.silhouette;
            let m = p.pair.mask.raster();
            let inter = sil.data().iter().zip(m.data()).filter(|(a, b)| **a >= 0.5 && **b >= 0.5).count();
            let union = sil.data().iter().zip(m.data()).filter(|(a, b)| **a >= 0.5 || **b >= 0.5).count();
            assert!(inter as f64 / union as f64 > 0.9);
        }
    }

    #[test]
    fn corpus_captions_name_context_and_background_matches() {
        let corpus = base_corpus(40, 64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(corpus.len(), 40);
        for p in &corpus {
            let bg = p.image.get(0, 0);
            assert_eq!(bg, context_background(&p.caption), "{}", p.caption);
            assert!(p.caption.contains(&p.class_name));
        }
    }
}
