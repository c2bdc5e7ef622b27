use super::denoiser::{self, DenoiserConfig, LEVELS};
use super::{build_context, schedule::mix, BaseManifest, BaseModel, ScheduleConfig, TABLE};
use crate::adapters::{mask_levels, SketchEncoder};
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, gaussian, Adam, AdamConfig};
use crate::sketchrep::{augment, merge_binary, TrainingPair};
use crate::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate of the cosine decay, as a fraction of `lr`.
    pub lr_floor: f64,
    pub grad_clip: f64,
    /// Probability that a sample's pyramid is gated by its foreground mask.
    pub mask_gate_prob: f64,
    /// Probability that a sample's pyramid is dropped entirely.
    pub sketch_dropout: f64,
    pub augment: bool,
    /// Steps per logged loss value.
    pub log_every: usize,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 4000,
            batch: 8,
            lr: 2e-3,
            lr_floor: 0.05,
            grad_clip: 1.0,
            mask_gate_prob: 0.5,
            sketch_dropout: 0.1,
            augment: true,
            log_every: 50,
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serialisable")))
    }
}

/// Per-step losses of a pretraining run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainLog {
    pub losses: Vec<f64>,
}

pub fn corpus_hash(corpus: &[TrainingPair]) -> String {
    let mut h = Sha256::new();
    for p in corpus {
        h.update(p.caption.as_bytes());
        for v in p.image.data().iter().chain(p.sketch.s_c.data()).chain(p.sketch.s_d.data()).chain(p.mask.raster().data()) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Jointly train denoiser, text table and single-sketch encoder on
/// (merged sketch, caption, image) triples.
pub fn pretrain_base(corpus: &[TrainingPair], cfg: &PretrainConfig) -> Result<(BaseModel, PretrainLog)> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("pretraining corpus is empty".into()));
    }
    let dc = &cfg.denoiser;
    let size = dc.size;
    for p in corpus {
        p.validate()?;
        if p.image.width() != size || p.image.height() != size {
            return Err(Error::Shape(format!("corpus image {}x{}, working size {size}", p.image.width(), p.image.height())));
        }
    }
    let mut base = BaseModel::init(dc.clone(), cfg.schedule.clone(), cfg.seed)?;
    let tokens: Vec<_> = corpus.iter().map(|p| base.tokenize(&p.caption)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut opt_main = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut opt_enc = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut log = PretrainLog::default();
    let hw = size * size;

    for step in 0..cfg.steps {
        let frac = step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        opt_main.set_lr(lr);
        opt_enc.set_lr(lr);

        let mut z0 = Vec::with_capacity(cfg.batch * 3 * hw);
        let mut sk = Vec::with_capacity(cfg.batch * hw);
        let mut gates: Vec<Vec<f32>> = (0..LEVELS).map(|_| Vec::new()).collect();
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut toks = Vec::with_capacity(cfg.batch);
        let mut noise = Vec::with_capacity(cfg.batch * 3 * hw);
        for _ in 0..cfg.batch {
            let idx = rng.random_range(0..corpus.len());
            let pair = if cfg.augment { augment(&corpus[idx], &mut rng) } else { corpus[idx].clone() };
            z0.extend(pair.image.to_signed_tensor().into_data());
            sk.extend(merge_binary(&pair.sketch).data());
            let u: f64 = rng.random();
            let levels = if u < cfg.sketch_dropout {
                (0..LEVELS).map(|l| Tensor::zeros(&[1, 1, size >> l, size >> l])).collect()
            } else if u < cfg.sketch_dropout + (1.0 - cfg.sketch_dropout) * cfg.mask_gate_prob {
                mask_levels(&pair.mask, size)?
            } else {
                (0..LEVELS).map(|l| Tensor::full(&[1, 1, size >> l, size >> l], 1.0)).collect()
            };
            for (l, t) in levels.into_iter().enumerate() {
                gates[l].extend(t.into_data());
            }
            ts.push(rng.random_range(0..base.schedule.len()));
            toks.push(tokens[idx].clone());
            noise.extend((0..3 * hw).map(|_| gaussian(&mut rng) as f32));
        }
        let n = cfg.batch;
        let mut zt = Vec::with_capacity(z0.len());
        for i in 0..n {
            let r = i * 3 * hw..(i + 1) * 3 * hw;
            zt.extend(mix(&z0[r.clone()], &noise[r], base.schedule.alpha_bar(ts[i])));
        }

        let mut g = Graph::<f32>::new();
        let p = base.params.bind(&mut g, true);
        let pe = base.encoder.params.bind(&mut g, true);
        let ctx = build_context(&mut g, p.get(TABLE), &toks, &[])?;
        let x = g.constant(Tensor::from_vec(&[n, 1, size, size], sk));
        let pyr = SketchEncoder::forward(&mut g, &pe, x);
        let pyr: [Var; LEVELS] = std::array::from_fn(|l| {
            let r = size >> l;
            let m = g.constant(Tensor::from_vec(&[n, 1, r, r], std::mem::take(&mut gates[l])));
            g.mul_spatial(pyr[l], m)
        });
        let zv = g.constant(Tensor::from_vec(&[n, 3, size, size], zt));
        let (out, _) = denoiser::forward(&mut g, &p, dc, denoiser::Forward { z: zv, timesteps: &ts, context: ctx, pyramid: Some(&pyr), record: None })?;
        let target = g.constant(Tensor::from_vec(&[n, 3, size, size], noise));
        let diff = g.sub(out, target);
        let sq = g.square(diff);
        let loss = g.mean_all(sq);
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::Diverged { step, detail: format!("pretraining loss {lv}") });
        }
        log.losses.push(lv);
        let mut grads = g.backward(loss);
        let mut gm = p.grads(&mut grads);
        let mut ge = pe.grads(&mut grads);
        clip_global_norm(&mut [&mut gm, &mut ge], cfg.grad_clip);
        opt_main.update(&mut base.params, &gm);
        opt_enc.update(&mut base.encoder.params, &ge);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            let w = &log.losses[log.losses.len() - cfg.log_every..];
            log::info!("pretrain step {} loss {:.5}", step + 1, w.iter().sum::<f64>() / w.len() as f64);
        }
    }
    let window = cfg.log_every.max(1);
    let loss_curve = log.losses.chunks(window).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    base.manifest = BaseManifest { corpus_hash: corpus_hash(corpus), config_hash: cfg.hash(), seed: cfg.seed, steps: cfg.steps, loss_curve };
    Ok((base, log))
}
