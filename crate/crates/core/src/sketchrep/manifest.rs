//! On-disk concept dataset: one directory per concept holding `concept.json`,
//! PNG images, stroke JSON files and optional mask PNGs.

use super::synth::{SynthConcept, SynthEdit};
use super::{auto_mask, rasterize, DualSketch, ForegroundMask, Image, Raster, Stroke, TrainingPair};
use crate::error::{Error, Result};
use crate::imageio;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "concept.json";

/// The ten evaluation templates.
pub const EVAL_TEMPLATES: [&str; 10] = [
    "a photo of [v] at the beach",
    "a photo of [v] in the jungle",
    "a photo of [v] in the snow",
    "a photo of [v] in the street",
    "a photo of [v] on top of a wooden floor",
    "a photo of [v] with a city in the background",
    "a photo of [v] with a mountain in the background",
    "a photo of [v] with the eiffel tower in the background",
    "a photo of [v] floating on top of water",
    "a photo of [v] in an office",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub image: String,
    pub strokes: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditEntry {
    pub strokes: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Expected texture orientation in degrees, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation_deg: Option<f32>,
    /// Ground-truth object region, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub silhouette: Option<String>,
    /// Reference render of the edit, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptManifest {
    pub concept_id: String,
    pub class_name: String,
    pub size: usize,
    pub prompts: Vec<String>,
    pub pairs: Vec<PairEntry>,
    #[serde(default)]
    pub edits: Vec<EditEntry>,
    /// Texture orientation of the reference pairs, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation_deg: Option<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedEdit {
    pub strokes: Vec<Stroke>,
    pub sketch: DualSketch,
    pub mask: ForegroundMask,
    pub orientation_deg: Option<f32>,
    pub silhouette: Option<Raster>,
    pub image: Option<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptDataset {
    pub dir: PathBuf,
    pub manifest: ConceptManifest,
    pub pairs: Vec<TrainingPair>,
    pub pair_strokes: Vec<Vec<Stroke>>,
    pub edits: Vec<LoadedEdit>,
}

pub fn read_strokes(path: &Path) -> Result<Vec<Stroke>> {
    let strokes: Vec<Stroke> = serde_json::from_slice(&std::fs::read(path)?)?;
    for s in &strokes {
        s.validate()?;
    }
    Ok(strokes)
}

pub fn write_strokes(path: &Path, strokes: &[Stroke]) -> Result<()> {
    Ok(std::fs::write(path, serde_json::to_vec_pretty(strokes)?)?)
}

fn load_mask(dir: &Path, file: Option<&String>, sketch: &DualSketch, size: usize) -> Result<ForegroundMask> {
    match file {
        Some(f) => {
            let r = imageio::read_mask(&dir.join(f))?;
            if r.width() != size || r.height() != size {
                return Err(Error::Shape(format!("mask {f} is {}x{}, expected {size}x{size}", r.width(), r.height())));
            }
            ForegroundMask::new(r)
        }
        None => auto_mask(sketch),
    }
}

/// Load and validate a concept directory.
pub fn load_concept_dir(dir: &Path) -> Result<ConceptDataset> {
    let manifest: ConceptManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.pairs.is_empty() {
        return Err(Error::InvalidArgument(format!("concept {} has no pairs", manifest.concept_id)));
    }
    let size = manifest.size;
    let mut pairs = Vec::new();
    let mut pair_strokes = Vec::new();
    for e in &manifest.pairs {
        let image = imageio::read_image(&dir.join(&e.image))?;
        if image.width() != size || image.height() != size {
            return Err(Error::Shape(format!("image {} is {}x{}, expected {size}x{size}", e.image, image.width(), image.height())));
        }
        let strokes = read_strokes(&dir.join(&e.strokes))?;
        let sketch = rasterize(&strokes, size, size)?;
        let mask = load_mask(dir, e.mask.as_ref(), &sketch, size)?;
        let pair = TrainingPair {
            image,
            sketch,
            mask,
            class_name: manifest.class_name.clone(),
            concept_id: manifest.concept_id.clone(),
            caption: format!("a photo of a {}", manifest.class_name),
        };
        pair.validate()?;
        pairs.push(pair);
        pair_strokes.push(strokes);
    }
    let mut edits = Vec::new();
    for e in &manifest.edits {
        let strokes = read_strokes(&dir.join(&e.strokes))?;
        let sketch = rasterize(&strokes, size, size)?;
        let mask = load_mask(dir, e.mask.as_ref(), &sketch, size)?;
        let silhouette = e.silhouette.as_ref().map(|f| imageio::read_mask(&dir.join(f))).transpose()?;
        let image = e.image.as_ref().map(|f| imageio::read_image(&dir.join(f))).transpose()?;
        edits.push(LoadedEdit { strokes, sketch, mask, orientation_deg: e.orientation_deg, silhouette, image });
    }
    Ok(ConceptDataset { dir: dir.to_path_buf(), manifest, pairs, pair_strokes, edits })
}

fn write_edit(dir: &Path, i: usize, e: &SynthEdit) -> Result<EditEntry> {
    let strokes = format!("edit_{i}.strokes.json");
    let silhouette = format!("edit_{i}.silhouette.png");
    let image = format!("edit_{i}.png");
    write_strokes(&dir.join(&strokes), &e.strokes)?;
    imageio::write_mask(&dir.join(&silhouette), &e.silhouette)?;
    imageio::write_image(&dir.join(&image), &e.image)?;
    Ok(EditEntry { strokes, mask: None, orientation_deg: Some(e.orientation_deg), silhouette: Some(silhouette), image: Some(image) })
}

/// Write a synthetic concept in the dataset layout. Masks are left to `auto_mask`.
pub fn write_synth_concept(dir: &Path, c: &SynthConcept) -> Result<ConceptManifest> {
    std::fs::create_dir_all(dir)?;
    let mut pairs = Vec::new();
    for (i, p) in c.pairs.iter().enumerate() {
        let image = format!("pair_{i}.png");
        let strokes = format!("pair_{i}.strokes.json");
        imageio::write_image(&dir.join(&image), &p.pair.image)?;
        write_strokes(&dir.join(&strokes), &p.strokes)?;
        pairs.push(PairEntry { image, strokes, mask: None });
    }
    let edits = c.edits.iter().enumerate().map(|(i, e)| write_edit(dir, i, e)).collect::<Result<Vec<_>>>()?;
    let manifest = ConceptManifest {
        concept_id: c.spec.concept_id.clone(),
        class_name: c.spec.class_name.clone(),
        size: c.pairs[0].pair.image.width(),
        prompts: EVAL_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        pairs,
        edits,
        orientation_deg: Some(c.spec.orientation_deg),
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::super::synth::{synth_concept, SyntheticConceptSpec, TextureKind};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn concept() -> SynthConcept {
        let spec = SyntheticConceptSpec::new("vase-blue", "vase", [0.2, 0.3, 0.9], TextureKind::Dots, 60.0).unwrap();
        synth_concept(&spec, 2, 2, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn synthetic_concept_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let c = concept();
        write_synth_concept(dir.path(), &c).unwrap();
        let loaded = load_concept_dir(dir.path()).unwrap();
        assert_eq!(loaded.pairs.len(), 2);
        assert_eq!(loaded.edits.len(), 2);
        for (a, b) in loaded.pairs.iter().zip(&c.pairs) {
            assert_eq!(a.sketch, b.pair.sketch);
            assert_eq!(a.mask, b.pair.mask);
            // 8-bit quantisation of the image
            assert!(a.image.data().iter().zip(b.pair.image.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
        }
        assert_eq!(loaded.edits[0].silhouette.as_ref(), Some(&c.edits[0].silhouette));
        assert_eq!(loaded.manifest.prompts.len(), 10);
    }

    #[test]
    fn manual_mask_overrides_hull() {
        let dir = tempfile::tempdir().unwrap();
        let c = concept();
        let mut m = write_synth_concept(dir.path(), &c).unwrap();
        let mut r = Raster::new(64, 64);
        r.set(10, 10, 1.0);
        imageio::write_mask(&dir.path().join("manual.png"), &r).unwrap();
        m.pairs[0].mask = Some("manual.png".into());
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
        let loaded = load_concept_dir(dir.path()).unwrap();
        assert_eq!(loaded.pairs[0].mask.area(), 1);
    }

    #[test]
    fn invalid_stroke_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_synth_concept(dir.path(), &concept()).unwrap();
        std::fs::write(dir.path().join("pair_0.strokes.json"), r#"[{"kind":"contour","width":1,"points":[[0.5,0.5]]}]"#).unwrap();
        assert!(load_concept_dir(dir.path()).is_err());
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_synth_concept(dir.path(), &concept()).unwrap();
        imageio::write_image(&dir.path().join("pair_1.png"), &Image::new(32, 32)).unwrap();
        assert!(matches!(load_concept_dir(dir.path()), Err(Error::Shape(_))));
    }
}
