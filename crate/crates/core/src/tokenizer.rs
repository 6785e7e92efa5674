//! Tokenizers with character offsets.
//!
//! Two providers: a whitespace+punctuation [`WordTokenizer`] whose vocabulary is
//! built from a training corpus, and [`HfTokenizer`], a thin wrapper over a
//! `tokenizer.json` shipped with a pretrained checkpoint.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{DrexError, Result};

/// A token id with the byte range it covers in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

/// Surface forms of the special tokens of a tokenizer family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub sequence_start: String,
    pub separator: String,
    pub mask: String,
    pub pad: String,
    pub unknown: String,
}

impl SpecialTokens {
    pub fn bert() -> Self {
        Self {
            sequence_start: "[CLS]".into(),
            separator: "[SEP]".into(),
            mask: "[MASK]".into(),
            pad: "[PAD]".into(),
            unknown: "[UNK]".into(),
        }
    }

    /// RoBERTa uses `<s>` and `</s>` in place of `[CLS]` and `[SEP]`.
    pub fn roberta() -> Self {
        Self {
            sequence_start: "<s>".into(),
            separator: "</s>".into(),
            mask: "<mask>".into(),
            pad: "<pad>".into(),
            unknown: "<unk>".into(),
        }
    }

    fn all(&self) -> [&str; 5] {
        [
            &self.pad,
            &self.unknown,
            &self.sequence_start,
            &self.separator,
            &self.mask,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.all();
        for (i, a) in all.iter().enumerate() {
            if a.is_empty() || all[..i].contains(a) {
                return Err(DrexError::Config(format!(
                    "special tokens must be nonempty and distinct, got {self:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub sequence_start: u32,
    pub separator: u32,
    pub mask: u32,
    pub pad: u32,
}

pub trait Tokenizer: Send + Sync + fmt::Debug {
    /// Tokenize without adding special tokens.
    fn encode(&self, text: &str) -> Result<Vec<Token>>;

    fn special_ids(&self) -> SpecialIds;

    fn vocab_size(&self) -> usize;

    fn id_to_token(&self, id: u32) -> Option<String>;
}

/// Splits on whitespace; every punctuation character is a token of its own.
#[derive(Clone, Serialize, Deserialize)]
pub struct WordTokenizer {
    vocab: Vec<String>,
    lowercase: bool,
    specials: SpecialTokens,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl fmt::Debug for WordTokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WordTokenizer")
            .field("vocab_size", &self.vocab.len())
            .field("lowercase", &self.lowercase)
            .finish()
    }
}

/// Byte ranges of the pieces `text` splits into.
pub fn split_words(text: &str) -> Vec<(usize, usize)> {
    let mut pieces = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            pieces.push((s, i));
        }
        if !c.is_whitespace() {
            pieces.push((i, i + c.len_utf8()));
        }
    }
    if let Some(s) = word_start {
        pieces.push((s, text.len()));
    }
    pieces
}

impl WordTokenizer {
    /// Build a vocabulary from every piece seen in `texts`. Ids are assigned in
    /// sorted order after the special tokens, so the result does not depend on
    /// iteration order.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        specials: SpecialTokens,
        lowercase: bool,
    ) -> Result<Self> {
        specials.validate()?;
        let mut words = BTreeSet::new();
        for text in texts {
            for (s, e) in split_words(text) {
                let w = &text[s..e];
                words.insert(if lowercase { w.to_lowercase() } else { w.to_string() });
            }
        }
        let mut vocab: Vec<String> = specials.all().iter().map(|s| s.to_string()).collect();
        let fresh: Vec<String> = words.into_iter().filter(|w| !vocab.contains(w)).collect();
        vocab.extend(fresh);
        Self::from_vocab(vocab, specials, lowercase)
    }

    pub fn from_vocab(vocab: Vec<String>, specials: SpecialTokens, lowercase: bool) -> Result<Self> {
        specials.validate()?;
        let mut tok = Self {
            vocab,
            lowercase,
            specials,
            index: HashMap::new(),
        };
        tok.reindex()?;
        Ok(tok)
    }

    fn reindex(&mut self) -> Result<()> {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        for s in self.specials.all() {
            if !self.index.contains_key(s) {
                return Err(DrexError::Tokenizer(format!("special token {s} missing from vocabulary")));
            }
        }
        Ok(())
    }

    fn id_of(&self, s: &str) -> u32 {
        self.index[s]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut tok: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        tok.reindex()?;
        Ok(tok)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<Token>> {
        let unk = self.id_of(&self.specials.unknown);
        Ok(split_words(text)
            .into_iter()
            .map(|(start, end)| {
                let piece = &text[start..end];
                let id = if self.lowercase {
                    self.index.get(&piece.to_lowercase())
                } else {
                    self.index.get(piece)
                };
                Token {
                    id: id.copied().unwrap_or(unk),
                    start,
                    end,
                }
            })
            .collect())
    }

    fn special_ids(&self) -> SpecialIds {
        SpecialIds {
            sequence_start: self.id_of(&self.specials.sequence_start),
            separator: self.id_of(&self.specials.separator),
            mask: self.id_of(&self.specials.mask),
            pad: self.id_of(&self.specials.pad),
        }
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn id_to_token(&self, id: u32) -> Option<String> {
        self.vocab.get(id as usize).cloned()
    }
}

/// A pretrained subword tokenizer loaded from a `tokenizer.json`.
#[derive(Clone)]
pub struct HfTokenizer {
    inner: tokenizers::Tokenizer,
    ids: SpecialIds,
}

impl fmt::Debug for HfTokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HfTokenizer")
            .field("vocab_size", &self.inner.get_vocab_size(true))
            .field("ids", &self.ids)
            .finish()
    }
}

impl HfTokenizer {
    pub fn from_file(path: impl AsRef<Path>, specials: &SpecialTokens) -> Result<Self> {
        let inner = tokenizers::Tokenizer::from_file(path.as_ref())
            .map_err(|e| DrexError::Tokenizer(e.to_string()))?;
        let lookup = |s: &str| {
            inner
                .token_to_id(s)
                .ok_or_else(|| DrexError::Tokenizer(format!("special token {s} not in vocabulary")))
        };
        let ids = SpecialIds {
            sequence_start: lookup(&specials.sequence_start)?,
            separator: lookup(&specials.separator)?,
            mask: lookup(&specials.mask)?,
            pad: lookup(&specials.pad)?,
        };
        Ok(Self { inner, ids })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.inner
            .save(path, false)
            .map_err(|e| DrexError::Tokenizer(e.to_string()))
    }
}

impl Tokenizer for HfTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<Token>> {
        let enc = self
            .inner
            .encode(text, false)
            .map_err(|e| DrexError::Tokenizer(e.to_string()))?;
        Ok(enc
            .get_ids()
            .iter()
            .zip(enc.get_offsets())
            .map(|(&id, &(start, end))| Token { id, start, end })
            .collect())
    }

    fn special_ids(&self) -> SpecialIds {
        self.ids
    }

    fn vocab_size(&self) -> usize {
        self.inner.get_vocab_size(true)
    }

    fn id_to_token(&self, id: u32) -> Option<String> {
        self.inner.id_to_token(id)
    }
}

/// Which tokenizer family a checkpoint carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Word,
    HuggingFace,
}

impl TokenizerKind {
    pub fn file_name(self) -> &'static str {
        match self {
            TokenizerKind::Word => "vocab.json",
            TokenizerKind::HuggingFace => "tokenizer.json",
        }
    }
}

#[derive(Debug, Clone)]
pub enum AnyTokenizer {
    Word(WordTokenizer),
    HuggingFace(HfTokenizer),
}

impl AnyTokenizer {
    pub fn kind(&self) -> TokenizerKind {
        match self {
            AnyTokenizer::Word(_) => TokenizerKind::Word,
            AnyTokenizer::HuggingFace(_) => TokenizerKind::HuggingFace,
        }
    }

    pub fn save_to_dir(&self, dir: &Path) -> Result<()> {
        let path = dir.join(self.kind().file_name());
        match self {
            AnyTokenizer::Word(t) => t.save(path),
            AnyTokenizer::HuggingFace(t) => t.save(path),
        }
    }

    pub fn load_from_dir(dir: &Path, kind: TokenizerKind, specials: &SpecialTokens) -> Result<Self> {
        let path = dir.join(kind.file_name());
        Ok(match kind {
            TokenizerKind::Word => AnyTokenizer::Word(WordTokenizer::load(path)?),
            TokenizerKind::HuggingFace => {
                AnyTokenizer::HuggingFace(HfTokenizer::from_file(path, specials)?)
            }
        })
    }

    pub fn into_shared(self) -> Arc<dyn Tokenizer> {
        match self {
            AnyTokenizer::Word(t) => Arc::new(t),
            AnyTokenizer::HuggingFace(t) => Arc::new(t),
        }
    }
}

impl Tokenizer for AnyTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<Token>> {
        match self {
            AnyTokenizer::Word(t) => t.encode(text),
            AnyTokenizer::HuggingFace(t) => t.encode(text),
        }
    }

    fn special_ids(&self) -> SpecialIds {
        match self {
            AnyTokenizer::Word(t) => t.special_ids(),
            AnyTokenizer::HuggingFace(t) => t.special_ids(),
        }
    }

    fn vocab_size(&self) -> usize {
        match self {
            AnyTokenizer::Word(t) => t.vocab_size(),
            AnyTokenizer::HuggingFace(t) => t.vocab_size(),
        }
    }

    fn id_to_token(&self, id: u32) -> Option<String> {
        match self {
            AnyTokenizer::Word(t) => t.id_to_token(id),
            AnyTokenizer::HuggingFace(t) => t.id_to_token(id),
        }
    }
}
