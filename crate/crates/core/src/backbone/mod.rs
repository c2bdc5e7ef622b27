//! Pixel-space diffusion backbone: schedule, vocabulary, denoiser, sampler
//! and the pretrained base model bundle.

pub mod denoiser;
mod pretrain;
mod sampler;
mod schedule;
pub mod vocab;

pub use denoiser::{DenoiserConfig, LEVELS};
pub use pretrain::{corpus_hash, pretrain_base, PretrainConfig, PretrainLog};
pub(crate) use schedule::mix;
pub use sampler::{ddim_sample, invert_image, sample, sample_with, Blend, SampleSpec};
pub use schedule::{build_schedule, forward_diffuse, NoiseSchedule};
pub use vocab::{PromptTokens, Vocab};

use crate::adapters::{EncoderConfig, FeaturePyramid, SketchEncoder};
use crate::sketchrep::Image;
use crate::error::{Error, Result};
use crate::nn::{Init, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_min: 1e-4, beta_max: 2e-2 }
    }
}

/// Provenance of a pretrained base.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaseManifest {
    pub corpus_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    /// Mean training loss per logging window.
    pub loss_curve: Vec<f64>,
}

/// Frozen denoiser, text table, schedule and the pretrained single-sketch encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub denoiser_cfg: DenoiserConfig,
    pub schedule_cfg: ScheduleConfig,
    pub schedule: NoiseSchedule,
    pub vocab: Vocab,
    /// `unet.*` and `text.table`.
    pub params: ParamSet,
    pub encoder: SketchEncoder,
    pub manifest: BaseManifest,
}

pub const TABLE: &str = "text.table";

/// One cross-attention layer's `[v]` attention, `[N, R·R]`, averaged over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention {
    pub resolution: usize,
    pub map: Tensor<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<LayerAttention>,
}

/// Prompt embeddings `[N, L, D]` with placeholder rows replaced by `slots[s]`.
pub fn build_context<T: Scalar>(g: &mut Graph<T>, table: Var, tokens: &[PromptTokens], slots: &[Var]) -> Result<Var> {
    let n = tokens.len();
    let l = tokens.first().map(|t| t.ids.len()).unwrap_or(0);
    if n == 0 || tokens.iter().any(|t| t.ids.len() != l) {
        return Err(Error::Shape("prompt batch is empty or ragged".into()));
    }
    let ids: Vec<usize> = tokens.iter().flat_map(|t| t.ids.iter().copied()).collect();
    let mut ctx = g.embed(table, ids, n, l);
    let max_slot = tokens.iter().flat_map(|t| t.placeholders.iter().map(|&(s, _)| s + 1)).max().unwrap_or(0);
    if max_slot > slots.len() {
        return Err(Error::InvalidArgument(format!("prompt uses {max_slot} concept tokens, {} supplied", slots.len())));
    }
    for (s, &v) in slots.iter().enumerate() {
        let rows: Vec<(usize, usize)> =
            tokens.iter().enumerate().filter_map(|(i, t)| t.slot_position(s).map(|p| (i, p))).collect();
        if !rows.is_empty() {
            ctx = g.splice(ctx, v, rows);
        }
    }
    Ok(ctx)
}

impl BaseModel {
    /// Randomly initialised, untrained model.
    pub fn init(denoiser_cfg: DenoiserConfig, schedule_cfg: ScheduleConfig, seed: u64) -> Result<Self> {
        let schedule = build_schedule(schedule_cfg.steps, schedule_cfg.beta_min, schedule_cfg.beta_max)?;
        let vocab = Vocab::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = denoiser::init_params(&denoiser_cfg, &mut rng);
        params.insert(TABLE, Init::new(&mut rng).normal(&[vocab.len(), denoiser_cfg.text_dim], 1.0));
        let encoder = SketchEncoder::init(EncoderConfig::matching(&denoiser_cfg), &mut rng);
        Ok(Self { denoiser_cfg, schedule_cfg, schedule, vocab, params, encoder, manifest: BaseManifest { seed, ..Default::default() } })
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        self.encoder.cfg.clone()
    }

    pub fn text_dim(&self) -> usize {
        self.denoiser_cfg.text_dim
    }

    pub fn tokenize(&self, prompt: &str) -> Result<PromptTokens> {
        self.vocab.encode(prompt, self.denoiser_cfg.context_len)
    }

    /// Row of the embedding table for `word`.
    pub fn embedding(&self, word: &str) -> Result<Tensor<f32>> {
        let id = self.vocab.id(word).ok_or_else(|| Error::UnknownWord(word.to_string()))?;
        let table = self.params.get(TABLE).expect("base has a text table");
        let d = table.shape()[1];
        Ok(Tensor::from_vec(&[d], table.data()[id * d..(id + 1) * d].to_vec()))
    }

    /// Content hash over configuration, vocabulary and every parameter.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.denoiser_cfg).expect("serialisable"));
        h.update(serde_json::to_vec(&self.schedule_cfg).expect("serialisable"));
        for w in self.vocab.words() {
            h.update(w.as_bytes());
            h.update([0]);
        }
        h.update(self.params.checksum().as_bytes());
        h.update(self.encoder.params.checksum().as_bytes());
        hex::encode(h.finalize())
    }

    /// Checksums of the three frozen parameter groups: denoiser, text table, sketch encoder.
    pub fn frozen_checksums(&self) -> [String; 3] {
        let unet: ParamSet = {
            let mut p = ParamSet::new();
            for (k, v) in self.params.iter().filter(|(k, _)| k.starts_with("unet.")) {
                p.insert(k.clone(), v.clone());
            }
            p
        };
        let mut table = ParamSet::new();
        table.insert(TABLE, self.params.get(TABLE).expect("text table").clone());
        [unet.checksum(), table.checksum(), self.encoder.params.checksum()]
    }

    /// Frozen encoder level outputs for a clean image under the neutral
    /// prompt "a photo", `[1, C_l, R_l, R_l]` per level.
    pub fn image_features(&self, img: &Image) -> Result<Vec<Tensor<f32>>> {
        let s = self.denoiser_cfg.size;
        if img.width() != s || img.height() != s {
            return Err(Error::Shape(format!("image is {}x{}, working size is {s}x{s}", img.width(), img.height())));
        }
        let tokens = self.tokenize("a photo")?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let ctx = build_context(&mut g, p.get(TABLE), std::slice::from_ref(&tokens), &[])?;
        let z = g.constant(img.to_signed_tensor());
        let levels = denoiser::encoder_features(&mut g, &p, &self.denoiser_cfg, z, ctx);
        Ok(levels.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Evaluate `ε̂(z_t, t, prompt, pyramid)` for a batch. `slots[s]` fills
    /// placeholder slot `s`. With `record`, the `[v]` attention of each
    /// cross-attention layer is returned as well.
    pub fn predict_noise(
        &self,
        z: &Tensor<f32>,
        timesteps: &[usize],
        tokens: &[PromptTokens],
        slots: &[Tensor<f32>],
        pyramid: Option<&FeaturePyramid>,
        record: bool,
    ) -> Result<(Tensor<f32>, Option<AttentionRecord>)> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let slot_vars: Vec<Var> = slots.iter().map(|s| g.constant(s.clone())).collect();
        let ctx = build_context(&mut g, p.get(TABLE), tokens, &slot_vars)?;
        let zv = g.constant(z.clone());
        let pyr = match pyramid {
            Some(py) => {
                if py.levels.len() != LEVELS {
                    return Err(Error::Shape(format!("pyramid has {} levels", py.levels.len())));
                }
                Some(py.bind(&mut g))
            }
            None => None,
        };
        let positions: Option<Vec<usize>> = if record {
            Some(
                tokens
                    .iter()
                    .map(|t| t.v_position().ok_or_else(|| Error::MissingPlaceholder(t.template.clone())))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let (out, maps) = denoiser::forward(
            &mut g,
            &p,
            &self.denoiser_cfg,
            denoiser::Forward { z: zv, timesteps, context: ctx, pyramid: pyr.as_ref(), record: positions.as_deref() },
        )?;
        let rec = record.then(|| AttentionRecord {
            layers: maps.iter().map(|m| LayerAttention { resolution: m.resolution, map: g.value(m.map).clone() }).collect(),
        });
        Ok((g.value(out).clone(), rec))
    }
}
