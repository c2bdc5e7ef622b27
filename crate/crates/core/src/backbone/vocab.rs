use crate::error::{Error, Result};
use crate::sketchrep::synth::{CLASSES, COLORS, CONTEXT_PHRASES, PHOTO_PREFIXES};
use crate::sketchrep::manifest::EVAL_TEMPLATES;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PAD: &str = "<pad>";
pub const START: &str = "<start>";

/// Concept-training prompts; `[v]` marks the learned token.
pub fn training_templates() -> Vec<String> {
    PHOTO_PREFIXES.iter().map(|p| format!("{p} [v]")).collect()
}

/// Closed word list with fixed ids. Ids 0 and 1 are padding and start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| matches!(c, ',' | '.' | '!' | '?' | '"' | '\'' | ';' | ':')).to_ascii_lowercase())
        .filter(|w| !w.is_empty())
}

/// Placeholder slot for `[v]` (0) or `[vN]` (N − 1).
pub fn placeholder_slot(word: &str) -> Option<usize> {
    let inner = word.strip_prefix("[v")?.strip_suffix(']')?;
    if inner.is_empty() {
        return Some(0);
    }
    let n: usize = inner.parse().ok()?;
    (n >= 1).then(|| n - 1)
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Every word the synthetic world and the prompt templates use.
    pub fn standard() -> Self {
        let mut set = std::collections::BTreeSet::new();
        let mut add = |s: &str| {
            for w in split_words(s) {
                if placeholder_slot(&w).is_none() {
                    set.insert(w);
                }
            }
        };
        for p in PHOTO_PREFIXES {
            add(p);
        }
        for (_, p) in CONTEXT_PHRASES {
            add(p);
        }
        for t in EVAL_TEMPLATES {
            add(t);
        }
        for (c, _) in CLASSES {
            add(c);
        }
        for (c, _) in COLORS {
            add(c);
        }
        for s in crate::sketchrep::synth::Style::ALL {
            add(s.phrase());
        }
        add("with stripes dots and");
        let mut words = vec![PAD.to_string(), START.to_string()];
        words.extend(set);
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        if self.index.is_empty() && !self.words.is_empty() {
            return self.words.iter().position(|w| w == word);
        }
        self.index.get(word).copied()
    }

    /// Rebuild the lookup after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    /// Tokenise into a fixed-length sequence `<start> w1 … wk <pad> …`.
    pub fn encode(&self, text: &str, context_len: usize) -> Result<PromptTokens> {
        let mut ids = vec![1usize];
        let mut placeholders = Vec::new();
        for w in split_words(text) {
            if let Some(slot) = placeholder_slot(&w) {
                if placeholders.iter().any(|&(s, _)| s == slot) {
                    return Err(Error::InvalidArgument(format!("placeholder {w} appears twice in {text:?}")));
                }
                placeholders.push((slot, ids.len()));
                ids.push(0);
            } else {
                ids.push(self.id(&w).ok_or_else(|| Error::UnknownWord(w.clone()))?);
            }
        }
        if ids.len() > context_len {
            return Err(Error::InvalidArgument(format!("prompt {text:?} has {} tokens, limit {context_len}", ids.len())));
        }
        ids.resize(context_len, 0);
        Ok(PromptTokens { ids, placeholders, template: text.to_string() })
    }
}

/// Token ids of one prompt. Placeholder positions hold id 0 and are
/// overwritten by concept embeddings during the forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTokens {
    pub ids: Vec<usize>,
    /// `(slot, position)`, slot 0 for `[v]`/`[v1]`.
    pub placeholders: Vec<(usize, usize)>,
    pub template: String,
}

impl PromptTokens {
    pub fn v_position(&self) -> Option<usize> {
        self.placeholders.iter().find(|(s, _)| *s == 0).map(|&(_, p)| p)
    }

    pub fn slot_position(&self, slot: usize) -> Option<usize> {
        self.placeholders.iter().find(|(s, _)| *s == slot).map(|&(_, p)| p)
    }
}
