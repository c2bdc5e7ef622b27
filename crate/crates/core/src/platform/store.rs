//! Directory-backed registry of bases and concepts.
//!
//! ```text
//! <root>/bases/<hash>.skb
//! <root>/concepts/<id>/<hash>.skc   write-once, named by content hash
//! <root>/concepts/<id>/HEAD         hash of the latest version
//! ```
//! Files are written to a temporary name and renamed into place, so two
//! writers sharing a root never leave a partial archive behind.

use super::archive::{decode_base, decode_concept, encode_base, encode_concept};
use crate::backbone::BaseModel;
use crate::error::{Error, Result};
use crate::trainer::Concept;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const STORE_ENV: &str = "SKETCH_CONCEPT_STORE";
pub const DEFAULT_STORE: &str = "store";

#[derive(Clone, Debug)]
pub struct ConceptStore {
    root: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptInfo {
    pub concept_id: String,
    pub hash: String,
    pub class_name: String,
    pub base_hash: String,
    pub flags: String,
}

fn valid_id(id: &str) -> Result<()> {
    if id.is_empty() || id.len() > 64 || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(Error::InvalidArgument(format!("concept id {id:?} must be 1-64 characters of [A-Za-z0-9_-]")));
    }
    Ok(())
}

fn valid_hash(h: &str) -> Result<()> {
    if h.len() != 64 || !h.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(Error::InvalidArgument(format!("{h:?} is not a content hash")));
    }
    Ok(())
}

/// Atomic write through a sibling temporary file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().expect("store paths have a parent");
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn read(path: &Path, what: &str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| if e.kind() == std::io::ErrorKind::NotFound { Error::NotFound(what.to_string()) } else { e.into() })
}

impl ConceptStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("bases"))?;
        std::fs::create_dir_all(root.join("concepts"))?;
        Ok(Self { root })
    }

    /// Root from `$SKETCH_CONCEPT_STORE`, else `fallback`.
    pub fn from_env(fallback: Option<&Path>) -> Result<Self> {
        match std::env::var_os(STORE_ENV) {
            Some(p) => Self::open(PathBuf::from(p)),
            None => Self::open(fallback.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(DEFAULT_STORE))),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn base_path(&self, hash: &str) -> PathBuf {
        self.root.join("bases").join(format!("{hash}.skb"))
    }

    pub fn concept_path(&self, id: &str, hash: &str) -> PathBuf {
        self.root.join("concepts").join(id).join(format!("{hash}.skc"))
    }

    pub fn save_base(&self, b: &BaseModel) -> Result<String> {
        let hash = b.hash();
        let path = self.base_path(&hash);
        if !path.exists() {
            write_atomic(&path, &encode_base(b)?)?;
        }
        Ok(hash)
    }

    pub fn load_base(&self, hash: &str) -> Result<BaseModel> {
        valid_hash(hash)?;
        let b = decode_base(&read(&self.base_path(hash), &format!("base {hash}"))?)?;
        if b.hash() != hash {
            return Err(Error::Integrity(format!("base file {hash} holds {}", b.hash())));
        }
        Ok(b)
    }

    /// Record `hash` as the base used when none is named.
    pub fn set_latest_base(&self, hash: &str) -> Result<()> {
        valid_hash(hash)?;
        write_atomic(&self.root.join("bases").join("LATEST"), hash.as_bytes())
    }

    pub fn latest_base(&self) -> Result<String> {
        let h = String::from_utf8_lossy(&read(&self.root.join("bases").join("LATEST"), "latest base (run pretrain first)")?).trim().to_string();
        valid_hash(&h).map_err(|_| Error::Integrity("bases/LATEST is corrupt".into()))?;
        Ok(h)
    }

    /// A base named by store hash, by archive path, or the latest one when empty.
    pub fn resolve_base(&self, spec: &str) -> Result<BaseModel> {
        if spec.is_empty() {
            return self.load_base(&self.latest_base()?);
        }
        if valid_hash(spec).is_ok() {
            return self.load_base(spec);
        }
        decode_base(&read(Path::new(spec), &format!("base archive {spec}"))?)
    }

    /// Store a concept version and point `HEAD` at it; returns its hash.
    pub fn save_concept(&self, c: &Concept) -> Result<String> {
        valid_id(&c.concept_id)?;
        let hash = c.hash();
        let path = self.concept_path(&c.concept_id, &hash);
        if !path.exists() {
            write_atomic(&path, &encode_concept(c)?)?;
        }
        write_atomic(&self.root.join("concepts").join(&c.concept_id).join("HEAD"), hash.as_bytes())?;
        Ok(hash)
    }

    pub fn head(&self, id: &str) -> Result<String> {
        valid_id(id)?;
        let h = String::from_utf8_lossy(&read(&self.root.join("concepts").join(id).join("HEAD"), &format!("concept {id}"))?).trim().to_string();
        valid_hash(&h).map_err(|_| Error::Integrity(format!("HEAD of {id} is corrupt")))?;
        Ok(h)
    }

    /// Load a concept version without checking it against a base.
    pub fn load_concept_unchecked(&self, id: &str, hash: Option<&str>) -> Result<Concept> {
        let hash = match hash {
            Some(h) => {
                valid_hash(h)?;
                h.to_string()
            }
            None => self.head(id)?,
        };
        let c = decode_concept(&read(&self.concept_path(id, &hash), &format!("concept {id}@{hash}"))?)?;
        if c.hash() != hash || c.concept_id != id {
            return Err(Error::Integrity(format!("archive {id}/{hash} holds {}@{}", c.concept_id, c.hash())));
        }
        Ok(c)
    }

    /// Latest (or given) version of `id`, verified to belong to `base`.
    pub fn load_concept(&self, id: &str, hash: Option<&str>, base: &BaseModel) -> Result<Concept> {
        let c = self.load_concept_unchecked(id, hash)?;
        c.check_base(base)?;
        Ok(c)
    }

    /// Head version of every concept, sorted by id.
    pub fn list(&self) -> Result<Vec<ConceptInfo>> {
        let mut ids: Vec<String> = std::fs::read_dir(self.root.join("concepts"))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("HEAD").exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        ids.iter()
            .map(|id| {
                let c = self.load_concept_unchecked(id, None)?;
                Ok(ConceptInfo {
                    concept_id: id.clone(),
                    hash: c.hash(),
                    class_name: c.class_name().to_string(),
                    base_hash: c.record.base_hash.clone(),
                    flags: c.record.flags.name(),
                })
            })
            .collect()
    }
}
