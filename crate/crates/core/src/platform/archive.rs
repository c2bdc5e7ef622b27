//! Binary archives for base models and concepts.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header, the tensors'
//! f32 LE data back to back in header order, then the SHA-256 of every
//! preceding byte. Reading verifies the digest and then the model's own
//! content hash recorded in the header.

use crate::adapters::{EncoderConfig, SketchEncoder};
use crate::backbone::{build_schedule, BaseManifest, BaseModel, DenoiserConfig, ScheduleConfig, Vocab};
use crate::error::{Error, Result};
use crate::losses::ConceptToken;
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::trainer::{Concept, SketchInput, TrainingRecord};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

pub const MAGIC: &[u8; 8] = b"SKCARCH1";
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header<M> {
    kind: String,
    meta: M,
    tensors: Vec<(String, Vec<usize>)>,
}

fn encode<M: Serialize>(kind: &str, meta: &M, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let header = Header { kind: kind.to_string(), meta, tensors: tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect() };
    let hj = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + hj.len() + tensors.iter().map(|(_, t)| 4 * t.len()).sum::<usize>() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(hj.len() as u64).to_le_bytes());
    out.extend_from_slice(&hj);
    for (_, t) in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let d = Sha256::digest(&out);
    out.extend_from_slice(&d);
    Ok(out)
}

fn decode<M: DeserializeOwned>(kind: &str, bytes: &[u8]) -> Result<(M, BTreeMap<String, Tensor<f32>>)> {
    let bad = |m: &str| Error::Integrity(format!("{kind} archive: {m}"));
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(bad("not an archive"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("digest mismatch"));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let hj = body.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header<M> = serde_json::from_slice(hj).map_err(|e| bad(&e.to_string()))?;
    if header.kind != kind {
        return Err(bad(&format!("holds a {}", header.kind)));
    }
    let mut pos = 16 + hlen;
    let mut tensors = BTreeMap::new();
    for (name, shape) in header.tensors {
        let n: usize = shape.iter().product();
        let raw = body.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated data"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.insert(name, Tensor::from_vec(&shape, data));
        pos += 4 * n;
    }
    if pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header.meta, tensors))
}

fn take_prefix(tensors: &mut BTreeMap<String, Tensor<f32>>, prefix: &str) -> ParamSet {
    let keys: Vec<String> = tensors.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
    let mut ps = ParamSet::new();
    for k in keys {
        let t = tensors.remove(&k).expect("listed key");
        ps.insert(&k[prefix.len()..], t);
    }
    ps
}

fn prefixed<'a>(prefix: &str, ps: &'a ParamSet) -> Vec<(String, &'a Tensor<f32>)> {
    ps.iter().map(|(k, t)| (format!("{prefix}{k}"), t)).collect()
}

#[derive(Serialize, Deserialize)]
struct BaseMeta {
    hash: String,
    denoiser: DenoiserConfig,
    schedule: ScheduleConfig,
    vocab: Vec<String>,
    encoder: EncoderConfig,
    manifest: BaseManifest,
}

pub fn encode_base(b: &BaseModel) -> Result<Vec<u8>> {
    let meta = BaseMeta {
        hash: b.hash(),
        denoiser: b.denoiser_cfg.clone(),
        schedule: b.schedule_cfg.clone(),
        vocab: b.vocab.words().to_vec(),
        encoder: b.encoder.cfg.clone(),
        manifest: b.manifest.clone(),
    };
    let mut t = prefixed("m/", &b.params);
    t.extend(prefixed("e/", &b.encoder.params));
    encode("base", &meta, &t)
}

pub fn decode_base(bytes: &[u8]) -> Result<BaseModel> {
    let (meta, mut t): (BaseMeta, _) = decode("base", bytes)?;
    let params = take_prefix(&mut t, "m/");
    let encoder = SketchEncoder { cfg: meta.encoder, params: take_prefix(&mut t, "e/") };
    let schedule = build_schedule(meta.schedule.steps, meta.schedule.beta_min, meta.schedule.beta_max)?;
    let b = BaseModel {
        denoiser_cfg: meta.denoiser,
        schedule_cfg: meta.schedule,
        schedule,
        vocab: Vocab::new(meta.vocab),
        params,
        encoder,
        manifest: meta.manifest,
    };
    if b.hash() != meta.hash {
        return Err(Error::Integrity(format!("base content hash {} does not match recorded {}", b.hash(), meta.hash)));
    }
    Ok(b)
}

#[derive(Serialize, Deserialize)]
struct ConceptMeta {
    hash: String,
    concept_id: String,
    class_name: String,
    trainable: bool,
    input: SketchInput,
    masked: bool,
    f_c: EncoderConfig,
    f_d: Option<EncoderConfig>,
    record: TrainingRecord,
}

pub fn encode_concept(c: &Concept) -> Result<Vec<u8>> {
    let meta = ConceptMeta {
        hash: c.hash(),
        concept_id: c.concept_id.clone(),
        class_name: c.token.class_name.clone(),
        trainable: c.token.trainable,
        input: c.input,
        masked: c.masked,
        f_c: c.f_c.cfg.clone(),
        f_d: c.f_d.as_ref().map(|f| f.cfg.clone()),
        record: c.record.clone(),
    };
    let v = c.token.tensor();
    let mut t = vec![("v".to_string(), &v)];
    t.extend(prefixed("c/", &c.f_c.params));
    if let Some(f) = &c.f_d {
        t.extend(prefixed("d/", &f.params));
    }
    encode("concept", &meta, &t)
}

pub fn decode_concept(bytes: &[u8]) -> Result<Concept> {
    let (meta, mut t): (ConceptMeta, _) = decode("concept", bytes)?;
    let v = t.remove("v").ok_or_else(|| Error::Integrity("concept archive has no token".into()))?;
    let f_c = SketchEncoder { cfg: meta.f_c, params: take_prefix(&mut t, "c/") };
    let f_d = meta.f_d.map(|cfg| SketchEncoder { cfg, params: take_prefix(&mut t, "d/") });
    let c = Concept {
        concept_id: meta.concept_id,
        token: ConceptToken { v: v.into_data(), class_name: meta.class_name, trainable: meta.trainable },
        input: meta.input,
        masked: meta.masked,
        f_c,
        f_d,
        record: meta.record,
    };
    if c.hash() != meta.hash {
        return Err(Error::Integrity(format!("concept content hash {} does not match recorded {}", c.hash(), meta.hash)));
    }
    Ok(c)
}
