//! The operations behind each CLI subcommand. Every command writes its
//! artifacts under the output directory and returns their paths; nothing
//! written here depends on wall-clock time.

use super::{Config, ConceptStore};
use crate::backbone::{pretrain_base, BaseModel};
use crate::error::{Error, Result};
use crate::evalharness::{run_benchmark, MetricReport};
use crate::imageio;
use crate::inference::{self, Placement, RunRecord, Sampling};
use crate::sketchrep::manifest::{load_concept_dir, read_strokes, write_synth_concept, ConceptDataset, MANIFEST_FILE};
use crate::sketchrep::synth::{base_corpus, synth_concept, SyntheticConceptSpec, TextureKind, CLASSES, COLORS};
use crate::sketchrep::{auto_mask, rasterize, DualSketch, ForegroundMask, Image, Raster};
use crate::trainer::{loss_csv, train_concept, AblationFlags, Concept, TrainSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Store id of a concept trained with `flags`; the full variant keeps the bare id.
pub fn variant_id(concept_id: &str, flags: &AblationFlags) -> String {
    if *flags == AblationFlags::default() {
        concept_id.to_string()
    } else {
        format!("{concept_id}__{}", flags.name().replace('+', "__"))
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<PathBuf> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(path.to_path_buf())
}

fn write_text(path: &Path, s: &str) -> Result<PathBuf> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, s)?;
    Ok(path.to_path_buf())
}

pub struct SynthOptions {
    pub concepts: usize,
    pub pairs: usize,
    pub edits: usize,
    pub size: usize,
    pub seed: u64,
}

/// Draw distinct (colour, class) concepts with random texture and
/// orientation and write each as a dataset directory.
pub fn synth_data(out: &Path, o: &SynthOptions) -> Result<Vec<PathBuf>> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut combos: Vec<(usize, usize)> = (0..COLORS.len()).flat_map(|c| (0..CLASSES.len()).map(move |k| (c, k))).collect();
    if o.concepts > combos.len() {
        return Err(Error::InvalidArgument(format!("at most {} distinct synthetic concepts", combos.len())));
    }
    combos.shuffle(&mut rng);
    let mut written = Vec::new();
    let mut index = Vec::new();
    for &(c, k) in &combos[..o.concepts] {
        let (color, fill) = COLORS[c];
        let class = CLASSES[k].0;
        let id = format!("{color}-{class}");
        let texture = if rng.random_bool(0.5) { TextureKind::Stripes } else { TextureKind::Dots };
        let deg = (rng.random_range(0.0f32..180.0) * 10.0).round() / 10.0;
        let spec = SyntheticConceptSpec::new(&id, class, fill, texture, deg)?;
        let sc = synth_concept(&spec, o.pairs, o.edits, o.size, &mut rng)?;
        let dir = out.join(&id);
        write_synth_concept(&dir, &sc)?;
        written.push(dir.join(MANIFEST_FILE));
        index.push(id);
    }
    written.push(write_json(&out.join("index.json"), &index)?);
    Ok(written)
}

#[derive(Serialize)]
struct BaseSummary<'a> {
    hash: String,
    parameters: usize,
    manifest: &'a crate::backbone::BaseManifest,
}

/// Build the captioned corpus, pretrain, store the base and mark it latest.
pub fn pretrain(cfg: &Config, store: &ConceptStore, out: &Path) -> Result<(BaseModel, Vec<PathBuf>)> {
    let size = cfg.pretrain.denoiser.size;
    let corpus = base_corpus(cfg.corpus.pairs, size, &mut ChaCha8Rng::seed_from_u64(cfg.corpus.seed))?;
    let (base, log) = pretrain_base(&corpus, &cfg.pretrain)?;
    let hash = store.save_base(&base)?;
    store.set_latest_base(&hash)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in log.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    let files = vec![
        write_json(&out.join("base.json"), &BaseSummary { hash, parameters: base.params.scalar_count() + base.encoder.params.scalar_count(), manifest: &base.manifest })?,
        write_text(&out.join("pretrain_loss.csv"), &csv)?,
    ];
    Ok((base, files))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    store_id: &'a str,
    hash: &'a str,
    norm_v: f64,
    spec: &'a TrainSpec,
}

/// Train a concept on a dataset directory and store it under its variant id.
pub fn train(cfg: &Config, store: &ConceptStore, base: &BaseModel, ds: &ConceptDataset, flags: AblationFlags, out: &Path) -> Result<(Concept, Vec<PathBuf>)> {
    let store_id = variant_id(&ds.manifest.concept_id, &flags);
    let spec = TrainSpec {
        concept_id: store_id.clone(),
        class_name: ds.manifest.class_name.clone(),
        stage1: cfg.stage1.clone(),
        stage2: cfg.stage2.clone(),
        flags,
        weights: cfg.weights,
    };
    let c = train_concept(base, &ds.pairs, &spec)?;
    let hash = store.save_concept(&c)?;
    let dir = out.join(&store_id);
    let files = vec![
        write_text(&dir.join("stage1_loss.csv"), &loss_csv(&c.record.stage1_losses))?,
        write_text(&dir.join("stage2_loss.csv"), &loss_csv(&c.record.stage2_losses))?,
        write_json(&dir.join("concept.json"), &TrainSummary { store_id: &store_id, hash: &hash, norm_v: c.token.norm(), spec: &spec })?,
    ];
    Ok((c, files))
}

/// Rasterise a stroke file; the mask comes from `mask` or the contour hull.
pub fn load_sketch(strokes: &Path, mask: Option<&Path>, size: usize) -> Result<(DualSketch, ForegroundMask)> {
    let ds = rasterize(&read_strokes(strokes)?, size, size)?;
    let m = match mask {
        Some(p) => ForegroundMask::new(imageio::read_mask(p)?)?,
        None => auto_mask(&ds)?,
    };
    if m.raster().width() != size || m.raster().height() != size {
        return Err(Error::Shape(format!("mask must be {size}x{size}")));
    }
    Ok((ds, m))
}

/// Write `<name>.png` and its `<name>.json` run record.
pub fn write_result(out: &Path, name: &str, img: &Image, record: &RunRecord) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let png = out.join(format!("{name}.png"));
    imageio::write_image(&png, img)?;
    Ok(vec![png, write_json(&out.join(format!("{name}.json")), record)?])
}

/// Inputs shared by the generation commands.
pub struct SketchArgs<'a> {
    pub strokes: &'a Path,
    pub mask: Option<&'a Path>,
}

pub fn generate(base: &BaseModel, c: &Concept, sk: &SketchArgs, prompt: &str, s: Sampling, out: &Path) -> Result<Vec<PathBuf>> {
    let (ds, m) = load_sketch(sk.strokes, sk.mask, base.denoiser_cfg.size)?;
    let img = inference::generate(base, c, &ds, &m, prompt, s)?;
    write_result(out, "generate", &img, &RunRecord::new("generate", prompt, s, base, &[c]))
}

fn blend_mask(path: Option<&Path>, m: &ForegroundMask) -> Result<Raster> {
    match path {
        Some(p) => imageio::read_mask(p),
        None => Ok(m.raster().clone()),
    }
}

/// Local edit; the blend mask defaults to the sketch mask.
#[allow(clippy::too_many_arguments)]
pub fn edit(base: &BaseModel, c: &Concept, image: &Path, sk: &SketchArgs, blend: Option<&Path>, prompt: &str, s: Sampling, out: &Path) -> Result<Vec<PathBuf>> {
    let (ds, m) = load_sketch(sk.strokes, sk.mask, base.denoiser_cfg.size)?;
    let original = imageio::read_image(image)?;
    let m_b = blend_mask(blend, &m)?;
    let img = inference::local_edit(base, c, &original, &ds, &m, &m_b, prompt, s)?;
    write_result(out, "edit", &img, &RunRecord::new("edit", prompt, s, base, &[c]))
}

#[allow(clippy::too_many_arguments)]
pub fn transfer(
    base: &BaseModel,
    target: &Concept,
    source: &Concept,
    image: &Path,
    sk: &SketchArgs,
    blend: Option<&Path>,
    prompt: &str,
    s: Sampling,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (ds, m) = load_sketch(sk.strokes, sk.mask, base.denoiser_cfg.size)?;
    let original = imageio::read_image(image)?;
    let m_b = blend_mask(blend, &m)?;
    let img = inference::concept_transfer(base, target, source, &original, &ds, &m, &m_b, prompt, s)?;
    write_result(out, "transfer", &img, &RunRecord::new("transfer", prompt, s, base, &[target, source]))
}

/// Compose concepts; `prompt` defaults to "a photo of [v1] and [v2] …".
pub fn multi(base: &BaseModel, concepts: &[Concept], sketches: &[SketchArgs], prompt: Option<&str>, s: Sampling, out: &Path) -> Result<Vec<PathBuf>> {
    if concepts.len() != sketches.len() {
        return Err(Error::InvalidArgument(format!("{} concepts but {} sketches", concepts.len(), sketches.len())));
    }
    let loaded = sketches.iter().map(|sk| load_sketch(sk.strokes, sk.mask, base.denoiser_cfg.size)).collect::<Result<Vec<_>>>()?;
    let items: Vec<Placement> = concepts.iter().zip(&loaded).map(|(c, (ds, m))| Placement { concept: c, sketch: ds, mask: m }).collect();
    let prompt = prompt.map(str::to_string).unwrap_or_else(|| inference::multi_prompt(concepts.len()));
    let img = inference::multi_generate(base, &items, &prompt, s)?;
    let refs: Vec<&Concept> = concepts.iter().collect();
    write_result(out, "multi", &img, &RunRecord::new("multi", &prompt, s, base, &refs))
}

pub fn style(base: &BaseModel, c: &Concept, sk: &SketchArgs, prompt: &str, s: Sampling, out: &Path) -> Result<Vec<PathBuf>> {
    let (ds, m) = load_sketch(sk.strokes, sk.mask, base.denoiser_cfg.size)?;
    let img = inference::style_variation(base, c, &ds, &m, prompt, s)?;
    write_result(out, "style", &img, &RunRecord::new("style", prompt, s, base, &[c]))
}

/// Dataset directories named by `path`: a `concept.json`, a dataset
/// directory, or a directory of dataset directories.
pub fn load_datasets(path: &Path) -> Result<Vec<ConceptDataset>> {
    if path.is_file() {
        return Ok(vec![load_concept_dir(path.parent().unwrap_or(Path::new(".")))?]);
    }
    if path.join(MANIFEST_FILE).exists() {
        return Ok(vec![load_concept_dir(path)?]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::NotFound(format!("no concept datasets under {}", path.display())));
    }
    dirs.iter().map(|d| load_concept_dir(d)).collect()
}

/// Benchmark stored concepts; with `train_missing`, variants absent from the
/// store are trained first.
pub fn bench(
    cfg: &Config,
    store: &ConceptStore,
    base: &BaseModel,
    datasets: &[ConceptDataset],
    variants: &[AblationFlags],
    train_missing: bool,
    out: &Path,
) -> Result<(MetricReport, Vec<PathBuf>)> {
    let mut concepts = BTreeMap::new();
    for flags in variants {
        for ds in datasets {
            let id = variant_id(&ds.manifest.concept_id, flags);
            let c = match store.load_concept(&id, None, base) {
                Ok(c) => c,
                Err(Error::NotFound(_)) if train_missing => train(cfg, store, base, ds, *flags, &out.join("trained"))?.0,
                Err(e) => return Err(e),
            };
            if c.record.flags != *flags {
                return Err(Error::Integrity(format!("stored concept {id} was trained as {}", c.record.flags.name())));
            }
            concepts.insert((flags.name(), ds.manifest.concept_id.clone()), c);
        }
    }
    let bc = crate::evalharness::BenchConfig { out_dir: Some(out.join("images")), ..cfg.bench.clone() };
    let report = run_benchmark(base, datasets, &concepts, variants, &bc)?;
    report.write(out)?;
    Ok((report, vec![out.join("report.csv"), out.join("report.json")]))
}
