//! The sequence language: serialization, parsing and the token-level state machine.
//!
//! Two templates share a five-field flag prefix
//! (`annotation; data type; size; #instances; #keypoints;`):
//!
//! ```text
//! T_a: box; multiple instances; large; 2; 0; person, dog; [ xmin 1 ymin 2 xmax 3 ymax 4] [ xmin …]
//! T_b: box; multiple instances; large; 2; 0; [ person xmin 1 ymin 2 xmax 3 ymax 4] [ dog xmin …]
//! ```
//!
//! T_a lists every category before the coordinate groups; T_b carries each
//! category inside its own group, which makes it possible to append more
//! instances to an existing scene.

mod lexer;
mod state;

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{
    AnnotationKind, DataType, Point, QuantGeometry, SceneInstance, SceneRecord, SizeFlag,
    DEFAULT_MASK_POINTS,
};
use crate::tokenizer::Vocabulary;

pub use crate::annotations::CANVAS_MAX;
pub use lexer::{
    join_canonical, lex, lex_symbols, sanitize_category, Keyword, Lexeme, BOX_KEYWORDS, MAX_JOINTS,
};
pub use state::{GrammarConfig, GrammarState, Mode, Phase, MAX_DECLARED_INSTANCES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Template {
    /// Category list first, then all coordinate groups.
    #[serde(rename = "a")]
    A,
    /// Category interleaved inside each coordinate group.
    #[serde(rename = "b")]
    B,
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Template::A => "a",
            Template::B => "b",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GrammarError {
    #[error("scene mixes annotation types or carries malformed geometry: {0}")]
    UnsupportedGeometry(String),
    #[error("state is terminal")]
    TerminalState,
    #[error("token {0} is not allowed here")]
    IllegalToken(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceText {
    pub text: String,
    pub template: Template,
}

impl fmt::Display for SequenceText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Format,
    Matching,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Byte offset into the parsed text.
    pub position: usize,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParseReport {
    pub format_ok: bool,
    pub matching_ok: bool,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOptions {
    /// When set, categories outside this set are Matching failures.
    pub closed_categories: Option<HashSet<String>>,
    /// Point count every mask group must carry.
    pub mask_points: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            closed_categories: None,
            mask_points: DEFAULT_MASK_POINTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SerializeOptions {
    pub template: Template,
    pub special_words: bool,
    /// Seed for the instance-order shuffle.
    pub seed: u64,
}

impl SerializeOptions {
    pub fn new(template: Template, seed: u64) -> Self {
        SerializeOptions {
            template,
            special_words: true,
            seed,
        }
    }
}

/// Serializes a scene with coordinate keywords; see [`serialize_with`].
pub fn serialize(
    scene: &SceneRecord,
    template: Template,
    seed: u64,
) -> Result<SequenceText, GrammarError> {
    serialize_with(scene, &SerializeOptions::new(template, seed))
}

/// Writes a scene as canonical text with a seed-determined instance order.
pub fn serialize_with(
    scene: &SceneRecord,
    opts: &SerializeOptions,
) -> Result<SequenceText, GrammarError> {
    let symbols = serialize_symbols(scene, opts)?;
    Ok(SequenceText {
        text: join_canonical(&symbols),
        template: opts.template,
    })
}

/// Instance permutation used by [`serialize_with`] for a given seed.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

fn serialize_symbols(
    scene: &SceneRecord,
    opts: &SerializeOptions,
) -> Result<Vec<String>, GrammarError> {
    let kind = scene.annotation_type;
    if scene.instances.is_empty() {
        return Err(GrammarError::UnsupportedGeometry(
            "scene has no instances".into(),
        ));
    }
    for inst in &scene.instances {
        if inst.geometry.kind() != kind {
            return Err(GrammarError::UnsupportedGeometry(format!(
                "{} instance in a {} scene",
                inst.geometry.kind(),
                kind
            )));
        }
        if inst.category.is_empty() || sanitize_category(&inst.category) != inst.category {
            return Err(GrammarError::UnsupportedGeometry(format!(
                "category name {:?} is not in canonical form",
                inst.category
            )));
        }
        if let QuantGeometry::Keypoints(p) = &inst.geometry {
            if p.len() != scene.n_keypoints as usize {
                return Err(GrammarError::UnsupportedGeometry(format!(
                    "keypoint group of {} pairs in a {}-keypoint scene",
                    p.len(),
                    scene.n_keypoints
                )));
            }
        }
    }
    let order = shuffled_order(scene.instances.len(), opts.seed);
    let instances: Vec<&SceneInstance> = order.iter().map(|&i| &scene.instances[i]).collect();

    let mut out: Vec<String> = Vec::with_capacity(16 + instances.len() * 12);
    for field in [
        kind.word().to_string(),
        scene.data_type.word().to_string(),
        scene.size_flag.word().to_string(),
        instances.len().to_string(),
        scene.n_keypoints.to_string(),
    ] {
        out.push(field);
        out.push(";".into());
    }
    if opts.template == Template::A {
        for (i, inst) in instances.iter().enumerate() {
            if i > 0 {
                out.push(",".into());
            }
            out.push(inst.category.clone());
        }
        out.push(";".into());
    }
    for inst in instances {
        out.push("[".into());
        if opts.template == Template::B {
            out.push(inst.category.clone());
        }
        push_group(&mut out, &inst.geometry, opts.special_words);
        out.push("]".into());
    }
    Ok(out)
}

fn push_group(out: &mut Vec<String>, geometry: &QuantGeometry, sw: bool) {
    let mut push_labeled = |label: Option<Keyword>, values: &[u32]| {
        if let (true, Some(k)) = (sw, label) {
            out.push(k.to_string());
        }
        out.extend(values.iter().map(|v| v.to_string()));
    };
    match geometry {
        QuantGeometry::Box {
            xmin,
            ymin,
            xmax,
            ymax,
        } => {
            for (k, v) in BOX_KEYWORDS.iter().zip([xmin, ymin, xmax, ymax]) {
                push_labeled(Some(*k), &[*v]);
            }
        }
        QuantGeometry::Keypoints(points) => {
            for (i, p) in points.iter().enumerate() {
                push_labeled(Some(Keyword::Joint(i as u8)), &[p.x, p.y]);
            }
        }
        QuantGeometry::Mask(points) => {
            for (i, p) in points.iter().enumerate() {
                push_labeled(Some(Keyword::MaskPoint(i as u16)), &[p.x, p.y]);
            }
        }
    }
}

#[derive(Debug, Default)]
struct GroupAcc {
    position: usize,
    category: Option<String>,
    values: Vec<u32>,
}

/// Parses text with default options; see [`parse_with`].
pub fn parse(text: &str) -> (Option<SceneRecord>, ParseReport) {
    parse_with(text, &ParseOptions::default())
}

/// Parses a sequence. Never panics; every failure is recorded in the report.
///
/// A record is returned only when the text is both well-formed (Format) and
/// count-consistent (Matching).
pub fn parse_with(text: &str, opts: &ParseOptions) -> (Option<SceneRecord>, ParseReport) {
    let mut report = ParseReport::default();
    let lexemes = lex(text);
    let mut state = GrammarState::lenient();

    let mut annotation = None;
    let mut data_type = None;
    let mut size = None;
    let mut declared = 0u32;
    let mut categories: Vec<(usize, String)> = Vec::new();
    let mut groups: Vec<GroupAcc> = Vec::new();

    let end = (text.len(), Lexeme::Eos);
    for (pos, lexeme) in lexemes.iter().chain(std::iter::once(&end)) {
        let Some(next) = state.step(lexeme) else {
            report.violations.push(Violation {
                position: *pos,
                kind: ViolationKind::Format,
                message: format!(
                    "unexpected {} while expecting {}",
                    lexeme.describe(),
                    expectation(&state)
                ),
            });
            return (None, report);
        };
        match (state.phase(), lexeme) {
            (Phase::Annotation, Lexeme::Phrase(w)) => annotation = AnnotationKind::from_word(w),
            (Phase::DataType, Lexeme::Phrase(w)) => data_type = DataType::from_word(w),
            (Phase::Size, Lexeme::Phrase(w)) => size = SizeFlag::from_word(w),
            (Phase::Count, Lexeme::Int(n)) => declared = *n,
            (Phase::Body | Phase::Category, Lexeme::Phrase(w)) => {
                categories.push((*pos, w.clone()))
            }
            (Phase::Body | Phase::GroupOpen | Phase::AfterGroup, Lexeme::Open) => {
                groups.push(GroupAcc {
                    position: *pos,
                    ..Default::default()
                })
            }
            (Phase::GroupCategory, Lexeme::Phrase(w)) => {
                if let Some(g) = groups.last_mut() {
                    g.category = Some(w.clone());
                }
            }
            (Phase::GroupBody, Lexeme::Int(v)) => {
                if let Some(g) = groups.last_mut() {
                    g.values.push(*v);
                }
            }
            _ => {}
        }
        state = next;
    }
    report.format_ok = true;

    let (Some(annotation), Some(data_type), Some(size_flag)) = (annotation, data_type, size) else {
        unreachable!("a completed sentence always carries all flags");
    };
    let template = state.template().unwrap_or(Template::A);
    let n_keypoints = state.n_keypoints();
    let mut matching = |position: usize, message: String| {
        report.violations.push(Violation {
            position,
            kind: ViolationKind::Matching,
            message,
        });
    };

    if template == Template::A && categories.len() != declared as usize {
        matching(
            0,
            format!(
                "declares {declared} instances but lists {} categories",
                categories.len()
            ),
        );
    }
    if groups.len() != declared as usize {
        matching(
            0,
            format!(
                "declares {declared} instances but has {} coordinate groups",
                groups.len()
            ),
        );
    }
    let group_categories: Vec<(usize, String)> = match template {
        Template::A => categories,
        Template::B => groups
            .iter()
            .map(|g| (g.position, g.category.clone().unwrap_or_default()))
            .collect(),
    };
    if let Some(closed) = &opts.closed_categories {
        for (pos, c) in &group_categories {
            if !closed.contains(c) {
                matching(
                    *pos,
                    format!("category '{c}' is outside the closed vocabulary"),
                );
            }
        }
    }
    for g in &groups {
        let pairs = g.values.len() / 2;
        match annotation {
            AnnotationKind::Keypoint if pairs != n_keypoints as usize => matching(
                g.position,
                format!("keypoint group has {pairs} pairs, expected {n_keypoints}"),
            ),
            AnnotationKind::Mask if pairs != opts.mask_points => matching(
                g.position,
                format!(
                    "mask group has {pairs} points, expected {}",
                    opts.mask_points
                ),
            ),
            _ => {}
        }
    }

    report.matching_ok = report.violations.is_empty();
    if !report.matching_ok {
        return (None, report);
    }
    let instances = group_categories
        .into_iter()
        .zip(groups)
        .map(|((_, category), g)| SceneInstance {
            category,
            geometry: geometry_from_values(annotation, &g.values),
        })
        .collect();
    let record = SceneRecord {
        annotation_type: annotation,
        data_type,
        size_flag,
        n_keypoints,
        instances,
    };
    (Some(record), report)
}

fn geometry_from_values(kind: AnnotationKind, v: &[u32]) -> QuantGeometry {
    let points = || v.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect();
    match kind {
        AnnotationKind::Box => QuantGeometry::Box {
            xmin: v[0],
            ymin: v[1],
            xmax: v[2],
            ymax: v[3],
        },
        AnnotationKind::Keypoint => QuantGeometry::Keypoints(points()),
        AnnotationKind::Mask => QuantGeometry::Mask(points()),
    }
}

fn expectation(state: &GrammarState) -> &'static str {
    match state.phase() {
        Phase::Annotation => "an annotation type",
        Phase::DataType => "a data type",
        Phase::Size => "a size flag",
        Phase::Count => "an instance count",
        Phase::Keypoints => "a keypoint count",
        Phase::FlagSep(_) => "';'",
        Phase::Body => "a category or '['",
        Phase::Category => "a category",
        Phase::AfterCategory => "',' or ';'",
        Phase::GroupOpen => "'['",
        Phase::GroupCategory => "a category",
        Phase::GroupBody => "a coordinate, keyword or ']'",
        Phase::AfterGroup => "'[' or end of sequence",
        Phase::Done => "nothing",
    }
}

/// Start state of the strict machine with coordinate keywords and 36-point masks.
pub fn init_state(template: Template) -> GrammarState {
    GrammarState::strict(GrammarConfig::new(template))
}

fn token_allowed(state: &GrammarState, vocab: &Vocabulary, id: u32) -> Option<GrammarState> {
    let lex = vocab.lexeme(id)?;
    if let Lexeme::Phrase(_) = lex {
        let category_slot = matches!(state.phase(), Phase::Category | Phase::GroupCategory)
            || (state.phase() == Phase::Body);
        if category_slot && state.is_strict() && !vocab.is_category(id) {
            return None;
        }
    }
    state.step(lex)
}

/// Every token id that legally extends `state`, in ascending order.
pub fn next_allowed_tokens(
    state: &GrammarState,
    vocab: &Vocabulary,
) -> Result<Vec<u32>, GrammarError> {
    if state.is_terminal() {
        return Err(GrammarError::TerminalState);
    }
    Ok((0..vocab.len() as u32)
        .filter(|&id| token_allowed(state, vocab, id).is_some())
        .collect())
}

/// Allowed tokens whose cheapest completion still fits in `budget` more tokens.
pub fn next_allowed_within(
    state: &GrammarState,
    vocab: &Vocabulary,
    budget: usize,
) -> Result<Vec<u32>, GrammarError> {
    if state.is_terminal() {
        return Err(GrammarError::TerminalState);
    }
    // Few distinct successor states occur per step, so a linear memo beats hashing.
    let mut cost: Vec<(GrammarState, usize)> = Vec::new();
    Ok((0..vocab.len() as u32)
        .filter(|&id| match token_allowed(state, vocab, id) {
            Some(next) => {
                let c = match cost.iter().find(|(s, _)| *s == next) {
                    Some(&(_, c)) => c,
                    None => {
                        let c = next.min_remaining();
                        cost.push((next, c));
                        c
                    }
                };
                1 + c <= budget
            }
            None => false,
        })
        .collect())
}

pub fn advance(
    state: &GrammarState,
    token: u32,
    vocab: &Vocabulary,
) -> Result<GrammarState, GrammarError> {
    if state.is_terminal() {
        return Err(GrammarError::TerminalState);
    }
    token_allowed(state, vocab, token).ok_or(GrammarError::IllegalToken(token))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TA_EXAMPLE: &str = "box; multiple instances; large; 3; 0; person, motorcycle, bicycle; [ xmin 377 ymin 250 xmax 406 ymax 288] [ xmin 287 ymin 228 xmax 377 ymax 399] [ xmin 388 ymin 258 xmax 413 ymax 286]";
    const TB_EXAMPLE: &str = "box; multiple instances; large; 3; 0; [ keyboard xmin 0 ymin 268 xmax 512 ymax 384 ] [ dining table xmin 0 ymin 95 xmax 512 ymax 442 ] [ cup xmin 97 ymin 82 xmax 503 ymax 443 ]";

    fn boxed(category: &str, c: [u32; 4]) -> SceneInstance {
        SceneInstance {
            category: category.into(),
            geometry: QuantGeometry::Box {
                xmin: c[0],
                ymin: c[1],
                xmax: c[2],
                ymax: c[3],
            },
        }
    }

    fn example_scene() -> SceneRecord {
        SceneRecord {
            annotation_type: AnnotationKind::Box,
            data_type: DataType::MultipleInstances,
            size_flag: SizeFlag::Large,
            n_keypoints: 0,
            instances: vec![
                boxed("person", [377, 250, 406, 288]),
                boxed("motorcycle", [287, 228, 377, 399]),
                boxed("bicycle", [388, 258, 413, 286]),
            ],
        }
    }

    #[test]
    fn parses_published_template_a_example() {
        let (rec, report) = parse(TA_EXAMPLE);
        assert!(report.format_ok && report.matching_ok, "{report:?}");
        assert_eq!(rec.unwrap(), example_scene());
    }

    #[test]
    fn parses_published_template_b_example() {
        let (rec, report) = parse(TB_EXAMPLE);
        assert!(report.format_ok && report.matching_ok, "{report:?}");
        let rec = rec.unwrap();
        assert_eq!(rec.instances[1].category, "dining table");
        assert_eq!(
            rec.instances[0].geometry,
            QuantGeometry::Box {
                xmin: 0,
                ymin: 268,
                xmax: 512,
                ymax: 384
            }
        );
    }

    #[test]
    fn serializes_in_published_layout() {
        let scene = example_scene();
        // find a seed that keeps the original order so the text can be compared verbatim
        let seed = (0..1000u64)
            .find(|s| shuffled_order(3, *s) == [0, 1, 2])
            .unwrap();
        assert_eq!(
            serialize(&scene, Template::A, seed).unwrap().text,
            TA_EXAMPLE
        );
        let tb = serialize(&scene, Template::B, seed).unwrap().text;
        assert!(tb.starts_with("box; multiple instances; large; 3; 0; [ person xmin 377 ymin 250"));
    }

    #[test]
    fn object_centric_example() {
        let scene = SceneRecord {
            annotation_type: AnnotationKind::Box,
            data_type: DataType::ObjectCentric,
            size_flag: SizeFlag::Large,
            n_keypoints: 0,
            instances: vec![boxed("castle", [236, 142, 413, 232])],
        };
        assert_eq!(
            serialize(&scene, Template::A, 9).unwrap().text,
            "box; object centric; large; 1; 0; castle; [ xmin 236 ymin 142 xmax 413 ymax 232]"
        );
    }

    #[test]
    fn count_mismatch_is_a_matching_failure() {
        let (rec, report) =
            parse("box; multiple instances; large; 2; 0; person; [ xmin 1 ymin 1 xmax 2 ymax 2]");
        assert!(rec.is_none());
        assert!(report.format_ok);
        assert!(!report.matching_ok);
        assert!(report
            .violations
            .iter()
            .all(|v| v.kind == ViolationKind::Matching));
    }

    #[test]
    fn empty_and_garbage_fail_format() {
        for text in [
            "",
            "box",
            "box; multiple instances; large; 1; 0; cat; [ xmin 1 ymin 1 xmax 2]",
            "hello world",
        ] {
            let (rec, report) = parse(text);
            assert!(rec.is_none());
            assert!(!report.format_ok && !report.matching_ok, "{text}");
            assert_eq!(report.violations[0].kind, ViolationKind::Format);
        }
    }

    #[test]
    fn out_of_canvas_coordinate_is_a_format_failure() {
        let (_, report) =
            parse("box; multiple instances; large; 1; 0; cat; [ xmin 1 ymin 1 xmax 2 ymax 513]");
        assert!(!report.format_ok);
        assert_eq!(report.violations[0].position, 71);
    }

    #[test]
    fn published_pose_and_mask_examples_parse() {
        let pose = "key point; multiple instances; large; 1; 18; person; [ a 190 120 b 266 146 c 318 143 d 385 232 e 338 269 f 214 150 g 0 0 h 0 0 i 312 280 j 365 296 k 359 420 l 258 283 m 194 344 n 301 383 o 197 100 p 181 103 q 234 84 r 0 0]";
        let (rec, report) = parse(pose);
        assert!(report.matching_ok, "{report:?}");
        let rec = rec.unwrap();
        let QuantGeometry::Keypoints(p) = &rec.instances[0].geometry else {
            panic!()
        };
        assert_eq!(p[6], Point::HIDDEN);
        assert_eq!(serialize(&rec, Template::A, 0).unwrap().text, pose);

        let crowd = "key point; multiple instances; large; 2; 14; person, person; [ a 240 178 b 304 168 c 228 239 d 0 0 e 261 236 f 0 0 g 251 296 h 289 296 i 0 0 j 0 0 k 0 0 l 0 0 m 261 92 n 272 156] [ a 314 160 b 363 158 c 274 232 d 356 264 e 224 260 f 271 263 g 298 315 h 341 324 i 0 0 j 332 442 k 0 0 l 0 0 m 287 64 n 333 133]";
        assert!(parse(crowd).1.matching_ok);

        let mask = "mask; multiple instances; medium; 1; 0; clock; [ m0 224 291 m1 226 299 m2 227 306 m3 228 313 m4 233 320 m5 238 325 m6 245 329 m7 252 332 m8 259 334 m9 266 335 m10 274 333 m11 281 330 m12 288 327 m13 293 323 m14 299 318 m15 303 312 m16 305 305 m17 307 298 m18 310 291 m19 308 284 m20 307 276 m21 303 269 m22 299 263 m23 295 257 m24 288 254 m25 280 251 m26 273 250 m27 266 249 m28 259 249 m29 252 251 m30 246 256 m31 240 260 m32 235 265 m33 229 270 m34 227 277 m35 225 284]";
        let (rec, report) = parse(mask);
        assert!(report.matching_ok);
        assert_eq!(serialize(&rec.unwrap(), Template::A, 0).unwrap().text, mask);
    }

    #[test]
    fn short_keypoint_group_is_matching_failure() {
        let (_, report) =
            parse("key point; multiple instances; large; 1; 14; person; [ a 1 2 b 3 4]");
        assert!(report.format_ok);
        assert!(!report.matching_ok);
    }

    #[test]
    fn keywordless_groups_parse() {
        let scene = example_scene();
        let opts = SerializeOptions {
            template: Template::B,
            special_words: false,
            seed: 3,
        };
        let text = serialize_with(&scene, &opts).unwrap().text;
        assert!(!text.contains("xmin"));
        let (rec, report) = parse(&text);
        assert!(report.matching_ok, "{text}");
        assert_eq!(rec.unwrap().instances.len(), 3);
    }

    #[test]
    fn closed_vocabulary_flag() {
        let closed: HashSet<String> = ["person", "motorcycle"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let opts = ParseOptions {
            closed_categories: Some(closed),
            ..Default::default()
        };
        let (_, report) = parse_with(TA_EXAMPLE, &opts);
        assert!(report.format_ok && !report.matching_ok);
        assert!(parse(TA_EXAMPLE).1.matching_ok);
    }

    #[test]
    fn mixed_scene_is_rejected() {
        let mut scene = example_scene();
        scene.instances.push(SceneInstance {
            category: "x".into(),
            geometry: QuantGeometry::Mask(vec![Point::new(1, 1); 36]),
        });
        assert!(matches!(
            serialize(&scene, Template::A, 0),
            Err(GrammarError::UnsupportedGeometry(_))
        ));
    }
}
