//! Generation with learned concepts: direct generation, local editing by
//! latent blending, concept transfer, multi-concept composition and style
//! variation.

use crate::adapters::FeaturePyramid;
use crate::backbone::{invert_image as ddim_invert, sample, sample_with, BaseModel, Blend, PromptTokens, SampleSpec};
use crate::error::{Error, Result};
use crate::sketchrep::{DualSketch, ForegroundMask, Image, Raster};
use crate::tensor::Tensor;
use crate::trainer::Concept;
use serde::{Deserialize, Serialize};

pub const DEFAULT_STEPS: usize = 50;

/// Sampling controls shared by every operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub steps: usize,
    pub seed: u64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, seed: 42 }
    }
}

/// Provenance written next to every generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub operation: String,
    pub prompt: String,
    pub steps: usize,
    pub seed: u64,
    pub base_hash: String,
    pub concept_hashes: Vec<String>,
}

impl RunRecord {
    pub fn new(op: &str, prompt: &str, s: Sampling, base: &BaseModel, concepts: &[&Concept]) -> Self {
        Self {
            operation: op.to_string(),
            prompt: prompt.to_string(),
            steps: s.steps,
            seed: s.seed,
            base_hash: base.hash(),
            concept_hashes: concepts.iter().map(|c| c.hash()).collect(),
        }
    }
}

/// Tokenise a prompt that must use `[v]` and no slot beyond `slots`.
pub fn concept_tokens(base: &BaseModel, prompt: &str, slots: usize) -> Result<PromptTokens> {
    let t = base.tokenize(prompt)?;
    if t.placeholders.is_empty() {
        return Err(Error::MissingPlaceholder(prompt.to_string()));
    }
    if let Some(&(s, _)) = t.placeholders.iter().find(|(s, _)| *s >= slots) {
        return Err(Error::InvalidArgument(format!("prompt {prompt:?} uses concept slot {} but {slots} concept(s) given", s + 1)));
    }
    Ok(t)
}

fn check_size(base: &BaseModel, w: usize, h: usize, what: &str) -> Result<()> {
    let s = base.denoiser_cfg.size;
    if w != s || h != s {
        return Err(Error::Shape(format!("{what} is {w}x{h}, working size is {s}x{s}")));
    }
    Ok(())
}

/// Generate `concept` following `ds` inside `m`, with `[v]` in `prompt`.
pub fn generate(base: &BaseModel, concept: &Concept, ds: &DualSketch, m: &ForegroundMask, prompt: &str, s: Sampling) -> Result<Image> {
    concept.check_base(base)?;
    let tokens = concept_tokens(base, prompt, 1)?;
    let pyr = concept.pyramid(ds, m)?;
    let slots = [concept.token.tensor()];
    sample(base, &SampleSpec { tokens: &tokens, slots: &slots, pyramid: Some(&pyr), steps: s.steps, seed: s.seed })
}

/// Deterministic DDIM inversion of `image` under `prompt`, no sketch
/// features. `slots` fill the prompt's placeholders.
pub fn invert_image(base: &BaseModel, image: &Image, prompt: &str, slots: &[Tensor<f32>], steps: usize) -> Result<Vec<Vec<f32>>> {
    check_size(base, image.width(), image.height(), "image")?;
    let tokens = base.tokenize(prompt)?;
    ddim_invert(base, image, &SampleSpec { tokens: &tokens, slots, pyramid: None, steps, seed: 0 })
}

fn blended(
    base: &BaseModel,
    tokens: &PromptTokens,
    slots: &[Tensor<f32>],
    pyr: &FeaturePyramid,
    original: &Image,
    m_b: &Raster,
    s: Sampling,
) -> Result<Image> {
    check_size(base, original.width(), original.height(), "original image")?;
    check_size(base, m_b.width(), m_b.height(), "blend mask")?;
    if m_b.data().iter().all(|&x| x <= 0.0) {
        return Err(Error::DegenerateMask("blend mask is empty".into()));
    }
    let spec = SampleSpec { tokens, slots, pyramid: Some(pyr), steps: s.steps, seed: s.seed };
    let latents = ddim_invert(base, original, &SampleSpec { pyramid: None, ..spec.clone() })?;
    let orig = original.to_signed_tensor().into_data();
    let z = sample_with(base, &spec, Some(&Blend { mask: m_b, latents: &latents, original: &orig }))?;
    let n = base.denoiser_cfg.size;
    Image::from_signed(&z, n, n)
}

/// Regenerate the region `m_b` of `original` from the edited sketch; the
/// rest follows the inverted original at every step.
#[allow(clippy::too_many_arguments)]
pub fn local_edit(
    base: &BaseModel,
    concept: &Concept,
    original: &Image,
    ds: &DualSketch,
    m: &ForegroundMask,
    m_b: &Raster,
    prompt: &str,
    s: Sampling,
) -> Result<Image> {
    concept.check_base(base)?;
    let tokens = concept_tokens(base, prompt, 1)?;
    let pyr = concept.pyramid(ds, m)?;
    blended(base, &tokens, &[concept.token.tensor()], &pyr, original, m_b, s)
}

/// Local edit of a `target`-concept image driven by `source`'s token and encoders.
#[allow(clippy::too_many_arguments)]
pub fn concept_transfer(
    base: &BaseModel,
    target: &Concept,
    source: &Concept,
    original: &Image,
    ds: &DualSketch,
    m: &ForegroundMask,
    m_b: &Raster,
    prompt: &str,
    s: Sampling,
) -> Result<Image> {
    target.check_base(base)?;
    local_edit(base, source, original, ds, m, m_b, prompt, s)
}

/// One concept of a composition.
#[derive(Clone, Copy, Debug)]
pub struct Placement<'a> {
    pub concept: &'a Concept,
    pub sketch: &'a DualSketch,
    pub mask: &'a ForegroundMask,
}

/// `"a photo of [v1] and [v2] …"` for `n` concepts.
pub fn multi_prompt(n: usize) -> String {
    let parts: Vec<String> = (1..=n).map(|i| format!("[v{i}]")).collect();
    format!("a photo of {}", parts.join(" and "))
}

/// Sum of the concepts' masked pyramids, injected once; `[vi]` in `prompt`
/// is concept `i`. Overlapping masks are allowed with a warning.
pub fn multi_generate(base: &BaseModel, items: &[Placement], prompt: &str, s: Sampling) -> Result<Image> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no concepts to compose".into()));
    }
    for it in items {
        it.concept.check_base(base)?;
    }
    for (i, a) in items.iter().enumerate() {
        for b in &items[i + 1..] {
            let overlap = a.mask.raster().data().iter().zip(b.mask.raster().data()).filter(|(x, y)| **x > 0.0 && **y > 0.0).count();
            if overlap > 0 {
                log::warn!("masks of {} and {} overlap in {overlap} pixels", a.concept.concept_id, b.concept.concept_id);
            }
        }
    }
    let tokens = concept_tokens(base, prompt, items.len())?;
    let mut pyr = items[0].concept.pyramid(items[0].sketch, items[0].mask)?;
    for it in &items[1..] {
        pyr = pyr.add(&it.concept.pyramid(it.sketch, it.mask)?)?;
    }
    let slots: Vec<Tensor<f32>> = items.iter().map(|it| it.concept.token.tensor()).collect();
    sample(base, &SampleSpec { tokens: &tokens, slots: &slots, pyramid: Some(&pyr), steps: s.steps, seed: s.seed })
}

/// Geometry from the concept's encoders, appearance from a prompt without `[v]`.
pub fn style_variation(base: &BaseModel, concept: &Concept, ds: &DualSketch, m: &ForegroundMask, prompt: &str, s: Sampling) -> Result<Image> {
    concept.check_base(base)?;
    let tokens = base.tokenize(prompt)?;
    if !tokens.placeholders.is_empty() {
        return Err(Error::UnexpectedPlaceholder(prompt.to_string()));
    }
    let pyr = concept.pyramid(ds, m)?;
    sample(base, &SampleSpec { tokens: &tokens, slots: &[], pyramid: Some(&pyr), steps: s.steps, seed: s.seed })
}
