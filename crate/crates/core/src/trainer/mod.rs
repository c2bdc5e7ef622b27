//! Two-stage concept optimisation. Stage I learns only the token `v` against
//! the frozen pretrained encoder; Stage II learns `v` together with fresh
//! copies of that encoder for contour and detail strokes. The denoiser, the
//! embedding table and the pretrained encoder are never written.

use crate::adapters::{mask_levels, mask_pyramid, resize_mask, FeaturePyramid, SketchEncoder};
use crate::backbone::denoiser::{self, LEVELS};
use crate::backbone::vocab::training_templates;
use crate::backbone::{build_context, corpus_hash, BaseModel, PromptTokens, TABLE};
use crate::error::{Error, Result};
use crate::losses::{
    aggregate_attention_graph, rec_loss_graph, reg_loss_graph, shape_loss_graph, total_loss_graph, ConceptToken, LossTerms,
    LossWeights, ATTN_RES,
};
use crate::nn::{clip_global_norm, gaussian, Adam, AdamConfig, Bound};
use crate::sketchrep::{augment, merge_binary, merge_gray, DualSketch, ForegroundMask, Raster, TrainingPair};
use crate::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: bool,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self { steps: 400, batch: 4, lr: 5e-4, seed: 0, augment: true, grad_clip: 1.0 }
    }

    /// Stage II at desk scale. The reference setting for a full-size
    /// backbone is `lr = 2e-6`; the desk encoders need a larger step to move
    /// within the same number of updates.
    pub fn stage2() -> Self {
        Self { steps: 400, batch: 4, lr: 1e-4, seed: 1, augment: true, grad_clip: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config(format!("invalid stage config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    #[serde(default)]
    pub single_sketch: bool,
    #[serde(default)]
    pub single_encoder: bool,
    #[serde(default)]
    pub no_shape_loss: bool,
    #[serde(default)]
    pub no_reg_loss: bool,
    #[serde(default)]
    pub no_masked_features: bool,
    #[serde(default)]
    pub skip_stage1: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 6] =
        ["single_sketch", "single_encoder", "no_shape_loss", "no_reg_loss", "no_masked_features", "skip_stage1"];

    fn slot(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "single_sketch" => &mut self.single_sketch,
            "single_encoder" => &mut self.single_encoder,
            "no_shape_loss" => &mut self.no_shape_loss,
            "no_reg_loss" => &mut self.no_reg_loss,
            "no_masked_features" => &mut self.no_masked_features,
            "skip_stage1" => &mut self.skip_stage1,
            _ => return None,
        })
    }

    /// Parse `full` or a `+`/`,`-separated list of flag names.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut f = Self::default();
        for name in spec.split(['+', ',']).map(str::trim).filter(|s| !s.is_empty() && *s != "full") {
            *f.slot(name).ok_or_else(|| Error::Config(format!("unknown ablation {name:?}")))? = true;
        }
        Ok(f)
    }

    pub fn name(&self) -> String {
        let on: Vec<&str> = Self::NAMES.iter().copied().filter(|n| *self.clone().slot(n).unwrap()).collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }

    pub fn weights(&self, base: LossWeights) -> LossWeights {
        LossWeights {
            shape: if self.no_shape_loss { 0.0 } else { base.shape },
            reg: if self.no_reg_loss { 0.0 } else { base.reg },
        }
    }
}

/// How a concept's encoders read a dual sketch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchInput {
    /// `F_c(S_C) + F_d(S_D)`.
    Dual,
    /// One encoder on the merged binary sketch.
    Merged,
    /// One encoder on the 0/127/255 gray encoding.
    Gray,
}

impl SketchInput {
    pub fn for_flags(f: &AblationFlags) -> Self {
        if f.single_encoder {
            SketchInput::Gray
        } else if f.single_sketch {
            SketchInput::Merged
        } else {
            SketchInput::Dual
        }
    }
}

/// Everything needed to reproduce and audit a trained concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub base_hash: String,
    pub data_hash: String,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub flags: AblationFlags,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub stage1_losses: Vec<LossTerms>,
    pub stage2_losses: Vec<LossTerms>,
}

/// Learned token plus fine-tuned encoders. For single-encoder inputs `f_d` is absent.
#[derive(Clone, Debug, PartialEq)]
pub struct Concept {
    pub concept_id: String,
    pub token: ConceptToken,
    pub input: SketchInput,
    pub masked: bool,
    pub f_c: SketchEncoder,
    pub f_d: Option<SketchEncoder>,
    pub record: TrainingRecord,
}

impl Concept {
    pub fn class_name(&self) -> &str {
        &self.token.class_name
    }

    /// Content hash over the token, encoder weights and training record.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.concept_id.as_bytes());
        for x in &self.token.v {
            h.update(x.to_le_bytes());
        }
        h.update(serde_json::to_vec(&(self.input, self.masked, &self.record, &self.token.class_name)).expect("serialisable"));
        h.update(self.f_c.params.checksum().as_bytes());
        if let Some(f) = &self.f_d {
            h.update(f.params.checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn check_base(&self, base: &BaseModel) -> Result<()> {
        let found = base.hash();
        if self.record.base_hash != found {
            return Err(Error::BaseMismatch { expected: self.record.base_hash.clone(), found });
        }
        Ok(())
    }

    /// Unmasked encoder response to a dual sketch.
    pub fn encode(&self, ds: &DualSketch) -> Result<FeaturePyramid> {
        let size = self.f_c.cfg.size;
        if ds.width() != size || ds.height() != size {
            return Err(Error::Shape(format!("sketch {}x{}, concept expects {size}x{size}", ds.width(), ds.height())));
        }
        match (self.input, &self.f_d) {
            (SketchInput::Dual, Some(f_d)) => crate::adapters::encode_dual(&self.f_c, f_d, ds),
            (SketchInput::Dual, None) => Err(Error::Integrity("dual-input concept without a detail encoder".into())),
            (SketchInput::Merged, _) => self.f_c.encode_single(&merge_binary(ds)),
            (SketchInput::Gray, _) => Ok(self.f_c.encode_map(&gray_input(ds))),
        }
    }

    /// Pyramid injected at inference: encoder response gated by `m` unless
    /// the concept was trained without masking.
    pub fn pyramid(&self, ds: &DualSketch, m: &ForegroundMask) -> Result<FeaturePyramid> {
        let p = self.encode(ds)?;
        if self.masked {
            mask_pyramid(&p, m)
        } else {
            Ok(p)
        }
    }
}

/// Gray encoding as encoder input: contour full ink, detail half ink.
fn gray_input(ds: &DualSketch) -> Raster {
    let g = merge_gray(ds).to_raster();
    Raster::from_vec(g.width(), g.height(), g.data().iter().map(|v| 1.0 - v).collect()).expect("same size")
}

/// `v` initialised from the embedding of the first word of `class_name`.
pub fn init_token(class_name: &str, base: &BaseModel) -> Result<ConceptToken> {
    let word = class_name.split_whitespace().next().ok_or_else(|| Error::UnknownWord(class_name.to_string()))?;
    let v = base.embedding(&word.to_ascii_lowercase())?;
    Ok(ConceptToken { v: v.into_data(), class_name: class_name.to_string(), trainable: true })
}

/// Random events of one training step. Drawn before any loss is evaluated
/// so runs that differ only in flags see the same sequence.
struct Batch {
    pairs: Vec<TrainingPair>,
    timesteps: Vec<usize>,
    noise: Vec<f32>,
    prompts: Vec<usize>,
}

fn draw_batch(rng: &mut ChaCha8Rng, pairs: &[TrainingPair], cfg: &StageConfig, base: &BaseModel, n_prompts: usize) -> Batch {
    let size = base.denoiser_cfg.size;
    let mut b = Batch { pairs: Vec::new(), timesteps: Vec::new(), noise: Vec::new(), prompts: Vec::new() };
    for _ in 0..cfg.batch {
        let idx = rng.random_range(0..pairs.len());
        let mut pair = if cfg.augment { augment(&pairs[idx], rng) } else { pairs[idx].clone() };
        // a transform that pushes the object out of frame leaves nothing to supervise
        if resize_mask(&pair.mask, ATTN_RES).map(|r| r.sum() < 0.25).unwrap_or(true) {
            pair = pairs[idx].clone();
        }
        b.pairs.push(pair);
        b.timesteps.push(rng.random_range(0..base.schedule.len()));
        b.noise.extend((0..3 * size * size).map(|_| gaussian(rng) as f32));
        b.prompts.push(rng.random_range(0..n_prompts));
    }
    b
}

/// Trainable encoders of one stage, bound into the step graph.
enum Encoders<'a> {
    /// Stage I: the frozen pretrained encoder; its response is a constant.
    Frozen(&'a SketchEncoder),
    Dual(Bound, Bound),
    Single(Bound, SketchInput),
}

fn stack(rasters: impl Iterator<Item = Raster>, n: usize, size: usize) -> Tensor<f32> {
    let data: Vec<f32> = rasters.flat_map(|r| r.data().to_vec()).collect();
    Tensor::from_vec(&[n, 1, size, size], data)
}

fn pyramid_vars(g: &mut Graph<f32>, enc: &Encoders, batch: &Batch, size: usize) -> Result<[Var; LEVELS]> {
    let n = batch.pairs.len();
    Ok(match enc {
        Encoders::Frozen(f_e) => {
            let mut levels: Vec<Vec<f32>> = vec![Vec::new(); LEVELS];
            for p in &batch.pairs {
                let py = f_e.encode_single(&merge_binary(&p.sketch))?;
                for (l, t) in py.levels.into_iter().enumerate() {
                    levels[l].extend(t.into_data());
                }
            }
            let c = f_e.cfg.channels;
            std::array::from_fn(|l| {
                let r = size >> l;
                g.constant(Tensor::from_vec(&[n, c[l], r, r], std::mem::take(&mut levels[l])))
            })
        }
        Encoders::Dual(bc, bd) => {
            let sc = g.constant(stack(batch.pairs.iter().map(|p| p.sketch.s_c.inverted()), n, size));
            let sd = g.constant(stack(batch.pairs.iter().map(|p| p.sketch.s_d.inverted()), n, size));
            let a = SketchEncoder::forward(g, bc, sc);
            let b = SketchEncoder::forward(g, bd, sd);
            std::array::from_fn(|l| g.add(a[l], b[l]))
        }
        Encoders::Single(b, input) => {
            let x = match input {
                SketchInput::Gray => stack(batch.pairs.iter().map(|p| gray_input(&p.sketch)), n, size),
                _ => stack(batch.pairs.iter().map(|p| merge_binary(&p.sketch)), n, size),
            };
            let x = g.constant(x);
            SketchEncoder::forward(g, b, x)
        }
    })
}

struct StepOut {
    terms: LossTerms,
    grads: Grads,
}

type Grads = BTreeMap<String, Tensor<f32>>;

const V_NAME: &str = "v";

#[allow(clippy::too_many_arguments)]
fn step(
    base: &BaseModel,
    v: &[f32],
    enc_params: &[(&str, &crate::nn::ParamSet)],
    frozen: Option<&SketchEncoder>,
    input: SketchInput,
    masked: bool,
    batch: &Batch,
    prompts: &[PromptTokens],
    w: &LossWeights,
) -> Result<StepOut> {
    let size = base.denoiser_cfg.size;
    let n = batch.pairs.len();
    let mut g = Graph::<f32>::new();
    let p = base.params.bind(&mut g, false);
    let vv = g.param(Tensor::from_vec(&[v.len()], v.to_vec()));
    let bound: Vec<(String, Bound)> = enc_params.iter().map(|(k, ps)| (k.to_string(), ps.bind(&mut g, true))).collect();
    let enc = match (frozen, &bound[..]) {
        (Some(f), _) => Encoders::Frozen(f),
        (None, [(_, c), (_, d)]) => Encoders::Dual(c.clone(), d.clone()),
        (None, [(_, s)]) => Encoders::Single(s.clone(), input),
        _ => return Err(Error::Integrity("unexpected encoder set".into())),
    };
    let raw = pyramid_vars(&mut g, &enc, batch, size)?;
    let pyr = if masked {
        let mut lv: Vec<Vec<f32>> = vec![Vec::new(); LEVELS];
        for pair in &batch.pairs {
            for (l, t) in mask_levels(&pair.mask, size)?.into_iter().enumerate() {
                lv[l].extend(t.into_data());
            }
        }
        std::array::from_fn(|l| {
            let r = size >> l;
            let m = g.constant(Tensor::from_vec(&[n, 1, r, r], std::mem::take(&mut lv[l])));
            g.mul_spatial(raw[l], m)
        })
    } else {
        raw
    };

    let toks: Vec<PromptTokens> = batch.prompts.iter().map(|&i| prompts[i].clone()).collect();
    let ctx = build_context(&mut g, p.get(TABLE), &toks, &[vv])?;
    let hw = size * size;
    let mut zt = Vec::with_capacity(n * 3 * hw);
    for (i, pair) in batch.pairs.iter().enumerate() {
        let z0 = pair.image.to_signed_tensor().into_data();
        let ab = base.schedule.alpha_bar(batch.timesteps[i]);
        zt.extend(crate::backbone::mix(&z0, &batch.noise[i * 3 * hw..(i + 1) * 3 * hw], ab));
    }
    let zv = g.constant(Tensor::from_vec(&[n, 3, size, size], zt));
    let positions: Vec<usize> =
        toks.iter().map(|t| t.v_position().ok_or_else(|| Error::MissingPlaceholder(t.template.clone()))).collect::<Result<_>>()?;
    let (out, maps) = denoiser::forward(
        &mut g,
        &p,
        &base.denoiser_cfg,
        denoiser::Forward { z: zv, timesteps: &batch.timesteps, context: ctx, pyramid: Some(&pyr), record: Some(&positions) },
    )?;

    let eps = g.constant(Tensor::from_vec(&[n, 3, size, size], batch.noise.clone()));
    let m_full = g.constant(stack(batch.pairs.iter().map(|p| p.mask.raster().clone()), n, size));
    let rec = rec_loss_graph(&mut g, eps, out, m_full)?;

    let layers: Vec<(Var, usize)> = maps.iter().map(|m| (m.map, m.resolution)).collect();
    let a = aggregate_attention_graph(&mut g, &layers)?;
    let mut m16 = Vec::with_capacity(n * ATTN_RES * ATTN_RES);
    for pair in &batch.pairs {
        m16.extend(resize_mask(&pair.mask, ATTN_RES)?.data());
    }
    let sh = shape_loss_graph(&mut g, a, &Tensor::from_vec(&[n, ATTN_RES * ATTN_RES], m16))?;
    let reg = reg_loss_graph(&mut g, vv);
    let total = total_loss_graph(&mut g, rec, Some(sh.shape), Some(reg), w);

    let item = |v: Var| g.value(v).item() as f64;
    let terms = LossTerms { rec: item(rec), fg: item(sh.fg), bg: item(sh.bg), reg: item(reg), total: item(total) };
    if !terms.total.is_finite() {
        return Err(Error::Diverged { step: 0, detail: format!("non-finite loss {terms:?}") });
    }
    let mut gr = g.backward(total);
    let mut grads = Grads::new();
    grads.insert(V_NAME.into(), gr.take(vv).expect("v is trainable"));
    for (k, b) in &bound {
        for (name, t) in b.grads(&mut gr) {
            grads.insert(format!("{k}/{name}"), t);
        }
    }
    Ok(StepOut { terms, grads })
}

fn check_inputs(base: &BaseModel, pairs: &[TrainingPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("concept training needs at least one pair".into()));
    }
    let s = base.denoiser_cfg.size;
    for p in pairs {
        p.validate()?;
        if p.image.width() != s || p.image.height() != s {
            return Err(Error::Shape(format!("pair is {}x{}, base works at {s}x{s}", p.image.width(), p.image.height())));
        }
        if resize_mask(&p.mask, ATTN_RES)?.sum() <= 0.0 {
            return Err(Error::DegenerateMask(format!("pair of {} has an empty mask", p.concept_id)));
        }
    }
    Ok(())
}

fn template_tokens(base: &BaseModel) -> Result<Vec<PromptTokens>> {
    training_templates().iter().map(|t| base.tokenize(t)).collect()
}

/// Optimise `v` alone. `losses` receives one entry per step.
pub fn run_stage1(
    base: &BaseModel,
    pairs: &[TrainingPair],
    init: &ConceptToken,
    cfg: &StageConfig,
    weights: &LossWeights,
    losses: &mut Vec<LossTerms>,
) -> Result<ConceptToken> {
    cfg.validate()?;
    weights.validate()?;
    check_inputs(base, pairs)?;
    let before = base.frozen_checksums();
    let prompts = template_tokens(base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v = ParamV::new(&init.v);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    for s in 0..cfg.steps {
        let batch = draw_batch(&mut rng, pairs, cfg, base, prompts.len());
        let out = step(base, v.data(), &[], Some(&base.encoder), SketchInput::Merged, true, &batch, &prompts, weights)
            .map_err(|e| at_step(e, s))?;
        let mut grads = out.grads;
        if cfg.grad_clip > 0.0 {
            clip_global_norm(&mut [&mut grads], cfg.grad_clip);
        }
        opt.update(&mut v.set, &grads);
        losses.push(out.terms);
    }
    verify_frozen(base, &before)?;
    Ok(ConceptToken { v: v.data().to_vec(), class_name: init.class_name.clone(), trainable: true })
}

/// `v` held in a one-entry parameter set so the shared optimiser applies.
struct ParamV {
    set: crate::nn::ParamSet,
}

impl ParamV {
    fn new(v: &[f32]) -> Self {
        let mut set = crate::nn::ParamSet::new();
        set.insert(V_NAME, Tensor::from_vec(&[v.len()], v.to_vec()));
        Self { set }
    }

    fn data(&self) -> &[f32] {
        self.set.get(V_NAME).expect("v").data()
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Diverged { detail, .. } => Error::Diverged { step, detail },
        other => other,
    }
}

fn verify_frozen(base: &BaseModel, before: &[String; 3]) -> Result<()> {
    if &base.frozen_checksums() != before {
        return Err(Error::Integrity("frozen base parameters changed during training".into()));
    }
    Ok(())
}

/// Jointly optimise `v` and encoders cloned from the pretrained one.
pub fn run_stage2(
    base: &BaseModel,
    pairs: &[TrainingPair],
    v: &ConceptToken,
    cfg: &StageConfig,
    flags: &AblationFlags,
    weights: &LossWeights,
    losses: &mut Vec<LossTerms>,
) -> Result<(ConceptToken, SketchEncoder, Option<SketchEncoder>)> {
    cfg.validate()?;
    let w = flags.weights(*weights);
    w.validate()?;
    check_inputs(base, pairs)?;
    let before = base.frozen_checksums();
    let prompts = template_tokens(base)?;
    let input = SketchInput::for_flags(flags);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tok = ParamV::new(&v.v);
    let mut f_c = base.encoder.clone();
    let mut f_d = (input == SketchInput::Dual).then(|| base.encoder.clone());
    let mut opt_v = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut opt_c = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut opt_d = Adam::new(AdamConfig::with_lr(cfg.lr));
    for s in 0..cfg.steps {
        let batch = draw_batch(&mut rng, pairs, cfg, base, prompts.len());
        let mut sets: Vec<(&str, &crate::nn::ParamSet)> = vec![("c", &f_c.params)];
        if let Some(d) = &f_d {
            sets.push(("d", &d.params));
        }
        let out = step(base, tok.data(), &sets, None, input, !flags.no_masked_features, &batch, &prompts, &w)
            .map_err(|e| at_step(e, s))?;
        let mut gv = Grads::new();
        let mut gc = Grads::new();
        let mut gd = Grads::new();
        for (k, t) in out.grads {
            if k == V_NAME {
                gv.insert(k, t);
            } else if let Some(n) = k.strip_prefix("c/") {
                gc.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("d/") {
                gd.insert(n.to_string(), t);
            }
        }
        if cfg.grad_clip > 0.0 {
            clip_global_norm(&mut [&mut gv, &mut gc, &mut gd], cfg.grad_clip);
        }
        opt_v.update(&mut tok.set, &gv);
        opt_c.update(&mut f_c.params, &gc);
        if let Some(d) = f_d.as_mut() {
            opt_d.update(&mut d.params, &gd);
        }
        losses.push(out.terms);
    }
    verify_frozen(base, &before)?;
    Ok((ConceptToken { v: tok.data().to_vec(), class_name: v.class_name.clone(), trainable: true }, f_c, f_d))
}

/// Inputs of a full two-stage run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub concept_id: String,
    pub class_name: String,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub flags: AblationFlags,
    pub weights: LossWeights,
}

/// Stage I followed by Stage II. Stage I honours the loss toggles as well.
pub fn train_concept(base: &BaseModel, pairs: &[TrainingPair], spec: &TrainSpec) -> Result<Concept> {
    let stage1 = stage1_token(base, pairs, spec)?;
    finish_concept(base, pairs, spec, stage1)
}

/// Result of Stage I, reusable across variants that share it.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Result {
    pub token: ConceptToken,
    pub losses: Vec<LossTerms>,
}

/// Stage I for `spec`, or the class-initialised token when it is skipped.
pub fn stage1_token(base: &BaseModel, pairs: &[TrainingPair], spec: &TrainSpec) -> Result<Stage1Result> {
    let init = init_token(&spec.class_name, base)?;
    let mut losses = Vec::new();
    if spec.flags.skip_stage1 {
        check_inputs(base, pairs)?;
        return Ok(Stage1Result { token: init, losses });
    }
    let w = spec.flags.weights(spec.weights);
    let token = run_stage1(base, pairs, &init, &spec.stage1, &w, &mut losses)?;
    Ok(Stage1Result { token, losses })
}

/// Stage II on top of a Stage I result.
pub fn finish_concept(base: &BaseModel, pairs: &[TrainingPair], spec: &TrainSpec, stage1: Stage1Result) -> Result<Concept> {
    let mut losses2 = Vec::new();
    let (token, f_c, f_d) = run_stage2(base, pairs, &stage1.token, &spec.stage2, &spec.flags, &spec.weights, &mut losses2)?;
    Ok(Concept {
        concept_id: spec.concept_id.clone(),
        token,
        input: SketchInput::for_flags(&spec.flags),
        masked: !spec.flags.no_masked_features,
        f_c,
        f_d,
        record: TrainingRecord {
            base_hash: base.hash(),
            data_hash: corpus_hash(pairs),
            stage1: spec.stage1.clone(),
            stage2: spec.stage2.clone(),
            flags: spec.flags,
            weights: spec.weights,
            adam: AdamConfig::with_lr(spec.stage2.lr),
            stage1_losses: stage1.losses,
            stage2_losses: losses2,
        },
    })
}

/// Per-step loss log in CSV form.
pub fn loss_csv(losses: &[LossTerms]) -> String {
    let mut s = String::from(LossTerms::CSV_HEADER);
    s.push('\n');
    for (i, t) in losses.iter().enumerate() {
        s.push_str(&t.csv_row(i));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests;
