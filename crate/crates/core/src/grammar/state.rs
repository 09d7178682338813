//! Deterministic recognizer of the sequence language.
//!
//! The same machine runs in two modes. `Strict` enforces the declared counts
//! (number of categories, groups, keypoint pairs, mask points), so every path
//! to the end state is a well-formed, count-consistent sentence; this is what
//! constrained decoding walks. `Lenient` accepts any syntactically valid
//! sentence and leaves count checks to the parser, which is how Format and
//! Matching are told apart.

use crate::annotations::{AnnotationKind, DataType, SizeFlag, CANVAS_MAX};

use super::lexer::{Keyword, Lexeme, BOX_KEYWORDS, MAX_JOINTS};
use super::Template;

/// Largest instance count the strict machine lets a sequence declare.
pub const MAX_DECLARED_INSTANCES: u32 = CANVAS_MAX;

/// Upper bound on mask points per group accepted when parsing.
const LENIENT_MAX_MASK_POINTS: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Annotation,
    DataType,
    Size,
    Count,
    Keypoints,
    /// Expecting the `;` that closes the flag field just read.
    FlagSep(u8),
    /// After the last flag's `;`: a category (T_a) or `[` (T_b).
    Body,
    Category,
    AfterCategory,
    GroupOpen,
    GroupCategory,
    GroupBody,
    AfterGroup,
    Done,
}

/// Configuration of the strict machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GrammarConfig {
    /// `None` leaves the template open until the first body symbol decides it.
    pub template: Option<Template>,
    pub special_words: bool,
    pub mask_points: u16,
}

impl GrammarConfig {
    pub fn new(template: Template) -> Self {
        GrammarConfig {
            template: Some(template),
            special_words: true,
            mask_points: crate::annotations::DEFAULT_MASK_POINTS as u16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GrammarState {
    pub(crate) mode: Mode,
    pub(crate) template: Option<Template>,
    pub(crate) special_words: Option<bool>,
    pub(crate) mask_points: u16,
    pub(crate) phase: Phase,
    pub(crate) annotation: Option<AnnotationKind>,
    pub(crate) declared_instances: u32,
    pub(crate) n_keypoints: u32,
    pub(crate) categories_emitted: u32,
    pub(crate) groups_emitted: u32,
    /// Symbols consumed inside the current group body.
    pub(crate) slot: u32,
}

impl GrammarState {
    pub fn strict(cfg: GrammarConfig) -> Self {
        GrammarState {
            mode: Mode::Strict,
            template: cfg.template,
            special_words: Some(cfg.special_words),
            mask_points: cfg.mask_points.max(1),
            phase: Phase::Annotation,
            annotation: None,
            declared_instances: 0,
            n_keypoints: 0,
            categories_emitted: 0,
            groups_emitted: 0,
            slot: 0,
        }
    }

    pub fn lenient() -> Self {
        GrammarState {
            mode: Mode::Lenient,
            special_words: None,
            template: None,
            ..GrammarState::strict(GrammarConfig::new(Template::A))
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn template(&self) -> Option<Template> {
        self.template
    }

    pub fn annotation(&self) -> Option<AnnotationKind> {
        self.annotation
    }

    pub fn declared_instances(&self) -> u32 {
        self.declared_instances
    }

    pub fn n_keypoints(&self) -> u32 {
        self.n_keypoints
    }

    pub fn categories_emitted(&self) -> u32 {
        self.categories_emitted
    }

    pub fn groups_emitted(&self) -> u32 {
        self.groups_emitted
    }

    pub fn special_words(&self) -> Option<bool> {
        self.special_words
    }

    pub fn is_terminal(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn is_strict(&self) -> bool {
        self.mode == Mode::Strict
    }

    /// Successor state after `lex`, or `None` if the symbol is illegal here.
    ///
    /// Phrases at category positions are accepted without a vocabulary check;
    /// callers that need a closed category set filter before stepping.
    pub fn step(&self, lex: &Lexeme) -> Option<GrammarState> {
        let strict = self.mode == Mode::Strict;
        let mut next = *self;
        match (self.phase, lex) {
            (Phase::Annotation, Lexeme::Phrase(w)) => {
                next.annotation = Some(AnnotationKind::from_word(w)?);
                next.phase = Phase::FlagSep(0);
            }
            (Phase::DataType, Lexeme::Phrase(w)) => {
                DataType::from_word(w)?;
                next.phase = Phase::FlagSep(1);
            }
            (Phase::Size, Lexeme::Phrase(w)) => {
                SizeFlag::from_word(w)?;
                next.phase = Phase::FlagSep(2);
            }
            (Phase::Count, Lexeme::Int(n)) => {
                if strict && (*n == 0 || *n > MAX_DECLARED_INSTANCES) {
                    return None;
                }
                next.declared_instances = *n;
                next.phase = Phase::FlagSep(3);
            }
            (Phase::Keypoints, Lexeme::Int(k)) => {
                let ok = match self.annotation? {
                    AnnotationKind::Keypoint => *k == 14 || *k == 18,
                    _ => *k == 0,
                };
                if !ok {
                    return None;
                }
                next.n_keypoints = *k;
                next.phase = Phase::FlagSep(4);
            }
            (Phase::FlagSep(i), Lexeme::Semi) => {
                next.phase = match i {
                    0 => Phase::DataType,
                    1 => Phase::Size,
                    2 => Phase::Count,
                    3 => Phase::Keypoints,
                    _ => match self.template {
                        Some(Template::A) => Phase::Category,
                        Some(Template::B) => Phase::GroupOpen,
                        None => Phase::Body,
                    },
                };
            }
            (Phase::Body, Lexeme::Phrase(_)) => {
                next.template = Some(Template::A);
                return next.with_phase(Phase::Category).step(lex);
            }
            (Phase::Body, Lexeme::Open) => {
                next.template = Some(Template::B);
                return next.with_phase(Phase::GroupOpen).step(lex);
            }
            (Phase::Category, Lexeme::Phrase(_)) => {
                if strict && self.categories_emitted >= self.declared_instances {
                    return None;
                }
                next.categories_emitted += 1;
                next.phase = Phase::AfterCategory;
            }
            (Phase::AfterCategory, Lexeme::Comma) => {
                if strict && self.categories_emitted >= self.declared_instances {
                    return None;
                }
                next.phase = Phase::Category;
            }
            (Phase::AfterCategory, Lexeme::Semi) => {
                if strict && self.categories_emitted != self.declared_instances {
                    return None;
                }
                next.phase = Phase::GroupOpen;
            }
            (Phase::GroupOpen, Lexeme::Open) => {
                if strict && self.groups_emitted >= self.declared_instances {
                    return None;
                }
                next.slot = 0;
                next.phase = match self.template? {
                    Template::A => Phase::GroupBody,
                    Template::B => Phase::GroupCategory,
                };
            }
            (Phase::GroupCategory, Lexeme::Phrase(_)) => {
                next.phase = Phase::GroupBody;
            }
            (Phase::GroupBody, _) => return self.step_body(lex),
            (Phase::AfterGroup, Lexeme::Open) => {
                return next.with_phase(Phase::GroupOpen).step(lex);
            }
            (Phase::AfterGroup, Lexeme::Eos) => {
                if strict && self.groups_emitted != self.declared_instances {
                    return None;
                }
                next.phase = Phase::Done;
            }
            _ => return None,
        }
        Some(next)
    }

    fn with_phase(mut self, phase: Phase) -> Self {
        self.phase = phase;
        self
    }

    fn step_body(&self, lex: &Lexeme) -> Option<GrammarState> {
        let strict = self.mode == Mode::Strict;
        let mut next = *self;
        // The first body symbol settles special-word usage for lenient parsing.
        let sw = match self.special_words {
            Some(sw) => sw,
            None => {
                let sw = matches!(lex, Lexeme::Keyword(_));
                next.special_words = Some(sw);
                sw
            }
        };
        let slot = self.slot;
        let kind = self.annotation?;
        let (stride, required, max_pairs) = match kind {
            AnnotationKind::Box => (if sw { 2 } else { 1 }, 4, 4),
            AnnotationKind::Keypoint => (
                if sw { 3 } else { 2 },
                self.n_keypoints,
                if strict {
                    self.n_keypoints
                } else {
                    MAX_JOINTS as u32
                },
            ),
            AnnotationKind::Mask => (
                if sw { 3 } else { 2 },
                u32::from(self.mask_points),
                if strict {
                    u32::from(self.mask_points)
                } else {
                    LENIENT_MAX_MASK_POINTS
                },
            ),
        };
        let item = slot / stride;
        let offset = slot % stride;
        let at_boundary = offset == 0;

        if let Lexeme::Close = lex {
            if !at_boundary {
                return None;
            }
            let done_enough = match kind {
                AnnotationKind::Box => item == 4,
                _ if strict => item == required,
                _ => item >= 1,
            };
            if !done_enough {
                return None;
            }
            next.groups_emitted += 1;
            next.phase = Phase::AfterGroup;
            return Some(next);
        }
        if item >= max_pairs {
            return None;
        }
        let expects_keyword = sw && at_boundary;
        match lex {
            Lexeme::Keyword(k) if expects_keyword => {
                let expected = match kind {
                    AnnotationKind::Box => BOX_KEYWORDS[item as usize],
                    AnnotationKind::Keypoint => Keyword::Joint(item as u8),
                    AnnotationKind::Mask => Keyword::MaskPoint(item as u16),
                };
                if *k != expected {
                    return None;
                }
            }
            Lexeme::Int(v) if !expects_keyword => {
                if *v > CANVAS_MAX {
                    return None;
                }
            }
            _ => return None,
        }
        next.slot += 1;
        Some(next)
    }

    /// Number of values (per group) the body layout carries, with and without keywords.
    fn group_len(&self, kind: AnnotationKind, sw: bool, template: Template, n_kp: u32) -> usize {
        let per_item = |values: usize| if sw { values + 1 } else { values };
        let body = match kind {
            AnnotationKind::Box => 4 * per_item(1),
            AnnotationKind::Keypoint => n_kp as usize * per_item(2),
            AnnotationKind::Mask => self.mask_points as usize * per_item(2),
        };
        let cat = usize::from(template == Template::B);
        2 + cat + body
    }

    /// Fewest symbols (including end-of-sequence) that complete the sentence
    /// from here under strict rules. Unresolved choices take their cheapest option.
    pub fn min_remaining(&self) -> usize {
        if self.phase == Phase::Done {
            return 0;
        }
        let one_kind;
        let kinds: &[AnnotationKind] = match self.annotation {
            Some(k) => {
                one_kind = [k];
                &one_kind
            }
            None => &AnnotationKind::ALL,
        };
        let one_template;
        let templates: &[Template] = match self.template {
            Some(t) => {
                one_template = [t];
                &one_template
            }
            None => &[Template::A, Template::B],
        };
        let one_sw;
        let sws: &[bool] = match self.special_words {
            Some(s) => {
                one_sw = [s];
                &one_sw
            }
            None => &[false, true],
        };
        let flags_left = match self.phase {
            Phase::Annotation => 10,
            Phase::FlagSep(i) => 9 - 2 * i as usize,
            Phase::DataType => 8,
            Phase::Size => 6,
            Phase::Count => 4,
            Phase::Keypoints => 2,
            _ => 0,
        };
        let count_known = !matches!(
            self.phase,
            Phase::Annotation | Phase::DataType | Phase::Size | Phase::Count
        ) && !matches!(self.phase, Phase::FlagSep(0..=2));
        let n = if count_known {
            self.declared_instances as usize
        } else {
            1
        };

        let mut best = usize::MAX;
        for &kind in kinds {
            let kp = if self.annotation.is_some() && self.n_keypoints != 0 {
                self.n_keypoints
            } else if kind == AnnotationKind::Keypoint {
                14
            } else {
                0
            };
            for &t in templates {
                for &sw in sws {
                    let g = self.group_len(kind, sw, t, kp);
                    let cats = if t == Template::A { 2 * n } else { 0 };
                    let total = match self.phase {
                        Phase::Category => {
                            2 * n.saturating_sub(self.categories_emitted as usize) + n * g + 1
                        }
                        Phase::AfterCategory => {
                            2 * n.saturating_sub(self.categories_emitted as usize) + 1 + n * g + 1
                        }
                        Phase::GroupOpen | Phase::AfterGroup => {
                            n.saturating_sub(self.groups_emitted as usize) * g + 1
                        }
                        Phase::GroupCategory | Phase::GroupBody => {
                            let used = 1
                                + usize::from(t == Template::B && self.phase == Phase::GroupBody)
                                + self.slot as usize;
                            g.saturating_sub(used)
                                + n.saturating_sub(self.groups_emitted as usize + 1) * g
                                + 1
                        }
                        _ => flags_left + cats + n * g + 1,
                    };
                    best = best.min(total);
                }
            }
        }
        best
    }
}
