//! Whole-word tokenizer: every grammar symbol is exactly one token.
//!
//! Flag words, category names (including multi-word ones such as
//! "dining table"), coordinate integers, keywords and punctuation each map to
//! a single id, so token positions line up with grammar positions.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::annotations::{AnnotationKind, DataType, SizeFlag, CANVAS_MAX, DEFAULT_MASK_POINTS};
use crate::grammar::{join_canonical, lex_symbols, Keyword, Lexeme, BOX_KEYWORDS, MAX_JOINTS};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];
pub const STRUCTURAL_TOKENS: [&str; 4] = [";", ",", "[", "]"];

pub type TokenSeq = Vec<u32>;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("token id {0} is out of range")]
    IdOutOfRange(u32),
    #[error("malformed vocabulary file: {0}")]
    MalformedVocabulary(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabOptions {
    pub special_words: bool,
    pub mask_points: usize,
}

impl Default for VocabOptions {
    fn default() -> Self {
        VocabOptions {
            special_words: true,
            mask_points: DEFAULT_MASK_POINTS,
        }
    }
}

/// Every flag word of the five-field prefix.
pub fn flag_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = AnnotationKind::ALL.iter().map(|k| k.word()).collect();
    words.extend(DataType::ALL.iter().map(|d| d.word()));
    words.extend(SizeFlag::ALL.iter().map(|s| s.word()));
    words
}

fn is_flag_word(w: &str) -> bool {
    AnnotationKind::from_word(w).is_some()
        || DataType::from_word(w).is_some()
        || SizeFlag::from_word(w).is_some()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    lexemes: Vec<Lexeme>,
    category: Vec<bool>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(TokenizerError::MalformedVocabulary(format!(
                    "line {} must be the reserved token {r}",
                    i + 1
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        let mut lexemes = Vec::with_capacity(tokens.len());
        let mut category = Vec::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(TokenizerError::MalformedVocabulary(format!(
                    "empty token at id {i}"
                )));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::MalformedVocabulary(format!(
                    "duplicate token {t:?}"
                )));
            }
            let lex = match i as u32 {
                EOS => Lexeme::Eos,
                BOS | PAD | UNK => Lexeme::Reserved,
                _ => Lexeme::classify(t),
            };
            category.push(matches!(&lex, Lexeme::Phrase(p) if !is_flag_word(p)));
            lexemes.push(lex);
        }
        Ok(Vocabulary {
            tokens,
            ids,
            lexemes,
            category,
        })
    }

    /// Builds a vocabulary covering every symbol of the corpus lines.
    ///
    /// Layout: reserved, structural, flag words, coordinates `0..=512`,
    /// keywords (when enabled), then the remaining corpus symbols sorted.
    pub fn build<'a, I>(corpus: I, opts: &VocabOptions) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(STRUCTURAL_TOKENS.iter().map(|s| s.to_string()));
        tokens.extend(flag_words().into_iter().map(String::from));
        tokens.extend((0..=CANVAS_MAX).map(|v| v.to_string()));
        if opts.special_words {
            tokens.extend(BOX_KEYWORDS.iter().map(|k| k.to_string()));
            tokens.extend((0..MAX_JOINTS as u8).map(|i| Keyword::Joint(i).to_string()));
            tokens.extend((0..opts.mask_points as u16).map(|i| Keyword::MaskPoint(i).to_string()));
        }
        let known: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let mut extra = BTreeSet::new();
        let mut lines = 0usize;
        for line in corpus {
            if line.trim().is_empty() {
                continue;
            }
            lines += 1;
            for (_, sym) in lex_symbols(line) {
                if !known.contains(&sym) {
                    extra.insert(sym);
                }
            }
        }
        if lines == 0 {
            return Err(TokenizerError::EmptyCorpus);
        }
        tokens.extend(extra);
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Grammar symbol carried by a token id.
    pub fn lexeme(&self, id: u32) -> Option<&Lexeme> {
        self.lexemes.get(id as usize)
    }

    /// True for ids that name an object category.
    pub fn is_category(&self, id: u32) -> bool {
        self.category.get(id as usize).copied().unwrap_or(false)
    }

    pub fn category_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.len() as u32).filter(|&i| self.is_category(i))
    }

    pub fn categories(&self) -> Vec<&str> {
        self.category_ids()
            .map(|i| self.tokens[i as usize].as_str())
            .collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self, TokenizerError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Self::from_tokens(body.split('\n').map(String::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_file_string(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: TokenSeq,
    pub unk_count: usize,
}

/// `BOS`, one id per symbol, `EOS`. Unknown symbols become `UNK` and are counted.
pub fn encode(text: &str, vocab: &Vocabulary) -> Encoded {
    let mut enc = encode_prompt(text, vocab);
    enc.ids.push(EOS);
    enc
}

/// Like [`encode`] but without the trailing `EOS`, for use as a sampling prefix.
pub fn encode_prompt(text: &str, vocab: &Vocabulary) -> Encoded {
    let mut ids = vec![BOS];
    let mut unk_count = 0;
    for (_, sym) in lex_symbols(text) {
        // Spelling variants of a flag word map to its canonical token.
        let sym = AnnotationKind::from_word(&sym).map_or(sym, |k| k.word().to_string());
        ids.push(vocab.id(&sym).unwrap_or_else(|| {
            unk_count += 1;
            UNK
        }));
    }
    Encoded { ids, unk_count }
}

/// Canonical text of a token sequence; `BOS`, `EOS` and `PAD` are dropped.
pub fn decode(tokens: &[u32], vocab: &Vocabulary) -> Result<String, TokenizerError> {
    let mut symbols = Vec::with_capacity(tokens.len());
    for &id in tokens {
        let t = vocab.token(id).ok_or(TokenizerError::IdOutOfRange(id))?;
        if !matches!(id, BOS | EOS | PAD) {
            symbols.push(t);
        }
    }
    Ok(join_canonical(&symbols))
}
