use std::fmt;

use serde::{Deserialize, Serialize};

/// Coordinate keywords ("special words") that label values inside a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Keyword {
    Xmin,
    Ymin,
    Xmax,
    Ymax,
    /// Keypoint letter `a`, `b`, … (index 0 is `a`).
    Joint(u8),
    /// Mask boundary label `m0`, `m1`, …
    MaskPoint(u16),
}

pub const BOX_KEYWORDS: [Keyword; 4] = [Keyword::Xmin, Keyword::Ymin, Keyword::Xmax, Keyword::Ymax];

/// Largest keypoint alphabet (`a..r`).
pub const MAX_JOINTS: usize = 18;

const MAX_MASK_LABEL: u16 = 4096;

impl Keyword {
    pub fn parse(word: &str) -> Option<Keyword> {
        match word {
            "xmin" => return Some(Keyword::Xmin),
            "ymin" => return Some(Keyword::Ymin),
            "xmax" => return Some(Keyword::Xmax),
            "ymax" => return Some(Keyword::Ymax),
            _ => {}
        }
        let bytes = word.as_bytes();
        if bytes.len() == 1 && (b'a'..b'a' + MAX_JOINTS as u8).contains(&bytes[0]) {
            return Some(Keyword::Joint(bytes[0] - b'a'));
        }
        let digits = word.strip_prefix('m')?;
        let canonical = !digits.is_empty()
            && digits.bytes().all(|b| b.is_ascii_digit())
            && (digits == "0" || !digits.starts_with('0'));
        if !canonical {
            return None;
        }
        digits
            .parse::<u16>()
            .ok()
            .filter(|v| *v < MAX_MASK_LABEL)
            .map(Keyword::MaskPoint)
    }
}

impl fmt::Display for Keyword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Keyword::Xmin => f.write_str("xmin"),
            Keyword::Ymin => f.write_str("ymin"),
            Keyword::Xmax => f.write_str("xmax"),
            Keyword::Ymax => f.write_str("ymax"),
            Keyword::Joint(i) => write!(f, "{}", (b'a' + i) as char),
            Keyword::MaskPoint(i) => write!(f, "m{i}"),
        }
    }
}

/// One grammar symbol of the sequence language.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Lexeme {
    Semi,
    Comma,
    Open,
    Close,
    Int(u32),
    Keyword(Keyword),
    /// A run of ordinary words: a flag word ("multiple instances") or a category ("dining table").
    Phrase(String),
    Eos,
    /// Reserved tokens other than end-of-sequence; never legal in a sentence.
    Reserved,
}

impl Lexeme {
    pub fn classify(symbol: &str) -> Lexeme {
        match symbol {
            ";" => Lexeme::Semi,
            "," => Lexeme::Comma,
            "[" => Lexeme::Open,
            "]" => Lexeme::Close,
            _ => {
                if !symbol.is_empty() && symbol.bytes().all(|b| b.is_ascii_digit()) {
                    if let Ok(v) = symbol.parse::<u32>() {
                        return Lexeme::Int(v);
                    }
                }
                match Keyword::parse(symbol) {
                    Some(k) => Lexeme::Keyword(k),
                    None => Lexeme::Phrase(symbol.to_string()),
                }
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Lexeme::Semi => "';'".into(),
            Lexeme::Comma => "','".into(),
            Lexeme::Open => "'['".into(),
            Lexeme::Close => "']'".into(),
            Lexeme::Int(v) => format!("integer {v}"),
            Lexeme::Keyword(k) => format!("keyword '{k}'"),
            Lexeme::Phrase(p) => format!("'{p}'"),
            Lexeme::Eos => "end of sequence".into(),
            Lexeme::Reserved => "reserved token".into(),
        }
    }
}

fn is_structural(c: char) -> bool {
    matches!(c, ';' | ',' | '[' | ']')
}

/// Splits text into grammar symbols, returning each with its byte offset.
///
/// Punctuation is always a separate symbol. Adjacent ordinary words (not
/// integers, not keywords) merge into one phrase joined by single spaces, so
/// multi-word flags and category names come out atomic.
pub fn lex_symbols(text: &str) -> Vec<(usize, String)> {
    let mut words: Vec<(usize, &str)> = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || is_structural(c) {
            if let Some(s) = start.take() {
                words.push((s, &text[s..i]));
            }
            if is_structural(c) {
                words.push((i, &text[i..i + c.len_utf8()]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        words.push((s, &text[s..]));
    }

    let mut out: Vec<(usize, String)> = Vec::with_capacity(words.len());
    let mut phrase_open = false;
    for (pos, w) in words {
        let plain = !matches!(
            Lexeme::classify(w),
            Lexeme::Semi
                | Lexeme::Comma
                | Lexeme::Open
                | Lexeme::Close
                | Lexeme::Int(_)
                | Lexeme::Keyword(_)
        );
        if plain && phrase_open {
            let last = out
                .last_mut()
                .expect("phrase_open implies a previous symbol");
            last.1.push(' ');
            last.1.push_str(w);
        } else {
            out.push((pos, w.to_string()));
        }
        phrase_open = plain;
    }
    out
}

pub fn lex(text: &str) -> Vec<(usize, Lexeme)> {
    lex_symbols(text)
        .into_iter()
        .map(|(pos, s)| (pos, Lexeme::classify(&s)))
        .collect()
}

/// Joins symbols into canonical text: single spaces, with `,` `;` and `]`
/// attached to the preceding symbol.
pub fn join_canonical<S: AsRef<str>>(symbols: &[S]) -> String {
    let mut out = String::new();
    for s in symbols {
        let s = s.as_ref();
        if !out.is_empty() && !matches!(s, "," | ";" | "]") {
            out.push(' ');
        }
        out.push_str(s);
    }
    out
}

/// Normalizes a category name so it survives a serialize/lex round trip.
///
/// Structural characters become spaces and whitespace runs collapse.
pub fn sanitize_category(name: &str) -> String {
    name.split(|c: char| c.is_whitespace() || is_structural(c))
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}
