use super::{
    identity_similarity, masked_mse, perceptual_distance, prompt_similarity, silhouette_iou, texture_orientation_error, FeatureEmbedder,
    PaletteEmbedder,
};
use crate::backbone::BaseModel;
use crate::error::{Error, Result};
use crate::imageio;
use crate::inference::{generate, local_edit, Sampling};
use crate::sketchrep::manifest::ConceptDataset;
use crate::sketchrep::synth::{context_background, erode};
use crate::sketchrep::{Image, Raster};
use crate::trainer::{AblationFlags, Concept};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Column names, in report order.
pub const METRICS: [&str; 6] = ["prompt_similarity", "identity_similarity", "perceptual_distance", "orientation_error", "silhouette_iou", "background_mse"];

/// Prompt used for edit items.
pub const EDIT_PROMPT: &str = "a photo of [v]";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub steps: usize,
    pub seed: u64,
    /// Templates per concept, taken from the front of the manifest's list.
    pub templates: usize,
    /// Erosion radius of the orientation region inside the mask.
    pub orientation_erode: usize,
    /// Where generated images are written; none keeps them in memory only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { steps: crate::inference::DEFAULT_STEPS, seed: 42, templates: 10, orientation_erode: 3, out_dir: None }
    }
}

/// Scores of one generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub method: String,
    pub concept_id: String,
    pub item: String,
    pub prompt: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub scores: BTreeMap<String, f64>,
}

/// Mean of one metric over the items of one method and concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub concept_id: String,
    pub metric: String,
    pub mean: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub items: Vec<ItemScore>,
    pub cells: Vec<Cell>,
}

impl MetricReport {
    /// Cells are the per-(method, concept, metric) means of the items that
    /// have the metric.
    pub fn from_items(items: Vec<ItemScore>) -> Self {
        let mut acc: BTreeMap<(String, String, usize), (f64, usize)> = BTreeMap::new();
        for it in &items {
            for (k, name) in METRICS.iter().enumerate() {
                if let Some(v) = it.scores.get(*name) {
                    let e = acc.entry((it.method.clone(), it.concept_id.clone(), k)).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
            }
        }
        let cells = acc
            .into_iter()
            .map(|((method, concept_id, k), (s, n))| Cell { method, concept_id, metric: METRICS[k].to_string(), mean: s / n as f64, n })
            .collect();
        Self { items, cells }
    }

    pub fn cell(&self, method: &str, concept_id: &str, metric: &str) -> Option<f64> {
        self.cells.iter().find(|c| c.method == method && c.concept_id == concept_id && c.metric == metric).map(|c| c.mean)
    }

    /// One row per method and concept, one column per metric.
    pub fn to_csv(&self) -> String {
        let mut rows: BTreeMap<(String, String), BTreeMap<&str, f64>> = BTreeMap::new();
        for c in &self.cells {
            rows.entry((c.method.clone(), c.concept_id.clone())).or_default().insert(METRICS.iter().find(|m| **m == c.metric).unwrap(), c.mean);
        }
        let mut out = format!("method,concept,{}\n", METRICS.join(","));
        for ((m, c), vals) in rows {
            let cols: Vec<String> = METRICS.iter().map(|k| vals.get(k).map(|v| format!("{v:.6}")).unwrap_or_default()).collect();
            out.push_str(&format!("{m},{c},{}\n", cols.join(",")));
        }
        out
    }

    /// Writes `report.csv` and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn dilate(r: &Raster, radius: usize) -> Raster {
    erode(&r.inverted(), radius).inverted()
}

fn save(cfg: &BenchConfig, rel: &str, img: &Image) -> Result<Option<String>> {
    match &cfg.out_dir {
        Some(d) => {
            let p = d.join(rel);
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            imageio::write_image(&p, img)?;
            Ok(Some(rel.to_string()))
        }
        None => Ok(None),
    }
}

/// Evaluate every variant on every dataset. `concepts` is keyed by
/// (variant name, concept id). Prompt items use the first pair's sketch
/// with each template; edit items use the edited sketches with
/// [`EDIT_PROMPT`] and score whatever ground truth the edit carries.
pub fn run_benchmark(
    base: &BaseModel,
    datasets: &[ConceptDataset],
    concepts: &BTreeMap<(String, String), Concept>,
    variants: &[AblationFlags],
    cfg: &BenchConfig,
) -> Result<MetricReport> {
    let palette = PaletteEmbedder::default();
    let features = FeatureEmbedder { base };
    let mut items = Vec::new();
    for flags in variants {
        let method = flags.name();
        for ds in datasets {
            let cid = &ds.manifest.concept_id;
            let concept = concepts.get(&(method.clone(), cid.clone())).ok_or_else(|| Error::NotFound(format!("concept {cid} for variant {method}")))?;
            let reference = &ds.pairs[0];
            let ref_mask = reference.mask.raster();
            for (k, template) in ds.manifest.prompts.iter().take(cfg.templates).enumerate() {
                let s = Sampling { steps: cfg.steps, seed: cfg.seed + k as u64 };
                let img = generate(base, concept, &reference.sketch, &reference.mask, template, s)?;
                let mut scores = BTreeMap::new();
                scores.insert("prompt_similarity".to_string(), prompt_similarity(&palette, &img, template, &ds.manifest.class_name)?);
                scores.insert("identity_similarity".to_string(), identity_similarity(&features, &img, &reference.image, ref_mask, ref_mask)?);
                let image = save(cfg, &format!("{method}/{cid}/prompt_{k}.png"), &img)?;
                items.push(ItemScore { method: method.clone(), concept_id: cid.clone(), item: format!("prompt_{k}"), prompt: template.clone(), seed: s.seed, image, scores });
            }
            for (k, e) in ds.edits.iter().enumerate() {
                let s = Sampling { steps: cfg.steps, seed: cfg.seed + k as u64 };
                let img = generate(base, concept, &e.sketch, &e.mask, EDIT_PROMPT, s)?;
                let m = e.mask.raster();
                let mut scores = BTreeMap::new();
                scores.insert("identity_similarity".to_string(), identity_similarity(&features, &img, &reference.image, m, ref_mask)?);
                if let Some(truth) = &e.image {
                    scores.insert("perceptual_distance".to_string(), perceptual_distance(&features, &img, truth, m, m)?);
                }
                if let Some(deg) = e.orientation_deg {
                    let region = erode(e.silhouette.as_ref().unwrap_or(m), cfg.orientation_erode);
                    if region.count_on() > 0 {
                        if let Some(err) = texture_orientation_error(&img, &region, deg as f64)? {
                            scores.insert("orientation_error".to_string(), err);
                        }
                    }
                }
                if let Some(sil) = &e.silhouette {
                    scores.insert("silhouette_iou".to_string(), silhouette_iou(&img, sil, context_background(EDIT_PROMPT))?);
                }
                let m_b = dilate(m, 2);
                let edited = local_edit(base, concept, &reference.image, &e.sketch, &e.mask, &m_b, EDIT_PROMPT, s)?;
                let outside = m_b.inverted();
                if outside.count_on() > 0 {
                    scores.insert("background_mse".to_string(), masked_mse(&edited, &reference.image, &outside)?);
                }
                let image = save(cfg, &format!("{method}/{cid}/edit_{k}.png"), &img)?;
                save(cfg, &format!("{method}/{cid}/edit_{k}_local.png"), &edited)?;
                items.push(ItemScore { method: method.clone(), concept_id: cid.clone(), item: format!("edit_{k}"), prompt: EDIT_PROMPT.into(), seed: s.seed, image, scores });
            }
        }
    }
    Ok(MetricReport::from_items(items))
}
