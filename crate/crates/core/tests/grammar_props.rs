mod common;

use layoutprior::grammar::{
    advance, init_state, next_allowed_tokens, next_allowed_within, parse, serialize,
    serialize_with, GrammarConfig, GrammarError, GrammarState, Phase, SerializeOptions,
};
use layoutprior::tokenizer::{decode, encode, encode_prompt, VocabOptions, Vocabulary, EOS};
use layoutprior::Template;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vocab() -> Vocabulary {
    let corpus: Vec<String> = common::CATEGORIES
        .iter()
        .map(|c| format!("box; object centric; small; 1; 0; {c}; [ xmin 1 ymin 1 xmax 2 ymax 2]"))
        .collect();
    Vocabulary::build(corpus.iter().map(String::as_str), &VocabOptions::default()).unwrap()
}

fn run(state: GrammarState, text: &str, v: &Vocabulary) -> GrammarState {
    encode_prompt(text, v).ids[1..]
        .iter()
        .fold(state, |s, &t| advance(&s, t, v).unwrap())
}

fn names(ids: &[u32], v: &Vocabulary) -> Vec<String> {
    let mut n: Vec<String> = ids
        .iter()
        .map(|&i| v.token(i).unwrap().to_string())
        .collect();
    n.sort();
    n
}

#[test]
fn first_field_is_annotation_type() {
    let v = vocab();
    for t in [Template::A, Template::B] {
        let allowed = next_allowed_tokens(&init_state(t), &v).unwrap();
        assert_eq!(names(&allowed, &v), ["box", "key point", "mask"]);
    }
}

#[test]
fn data_type_after_mask() {
    let v = vocab();
    let s = run(init_state(Template::A), "mask;", &v);
    let allowed = next_allowed_tokens(&s, &v).unwrap();
    assert_eq!(
        names(&allowed, &v),
        ["multiple instances", "object centric"]
    );
}

#[test]
fn size_field() {
    let v = vocab();
    let s = run(init_state(Template::A), "box; multiple instances;", &v);
    assert_eq!(
        names(&next_allowed_tokens(&s, &v).unwrap(), &v),
        ["large", "medium", "small"]
    );
}

#[test]
fn coordinates_allow_exactly_the_canvas_integers() {
    let v = vocab();
    let s = run(
        init_state(Template::A),
        "box; multiple instances; large; 1; 0; cup; [ xmin",
        &v,
    );
    let allowed = next_allowed_tokens(&s, &v).unwrap();
    let expected: Vec<u32> = (0..=512).map(|i| v.id(&i.to_string()).unwrap()).collect();
    let mut sorted = expected.clone();
    sorted.sort();
    assert_eq!(allowed, sorted);
}

#[test]
fn end_of_sequence_after_last_group() {
    let v = vocab();
    let s = run(
        init_state(Template::B),
        "box; multiple instances; large; 1; 0; [ cup xmin 1 ymin 2 xmax 3 ymax 4]",
        &v,
    );
    assert_eq!(next_allowed_tokens(&s, &v).unwrap(), [EOS]);
    let done = advance(&s, EOS, &v).unwrap();
    assert_eq!(
        next_allowed_tokens(&done, &v),
        Err(GrammarError::TerminalState)
    );
}

#[test]
fn advance_examples() {
    let v = vocab();
    let s = advance(&init_state(Template::A), v.id("box").unwrap(), &v).unwrap();
    assert_eq!(s.phase(), Phase::FlagSep(0));
    let s = advance(&s, v.id(";").unwrap(), &v).unwrap();
    assert_eq!(s.phase(), Phase::DataType);

    let s = run(
        init_state(Template::A),
        "box; multiple instances; large; 1; 0; cup; [ xmin 377 ymin 250 xmax 406 ymax",
        &v,
    );
    let s = advance(&s, v.id("288").unwrap(), &v).unwrap();
    assert_eq!(next_allowed_tokens(&s, &v).unwrap(), [v.id("]").unwrap()]);

    let s = run(
        init_state(Template::A),
        "box; multiple instances; large; 2; 0; cup, dog",
        &v,
    );
    let s = advance(&s, v.id(";").unwrap(), &v).unwrap();
    assert_eq!(s.phase(), Phase::GroupOpen);
    assert_eq!(
        advance(&s, v.id("cup").unwrap(), &v),
        Err(GrammarError::IllegalToken(v.id("cup").unwrap()))
    );
}

#[test]
fn flag_words_are_not_categories() {
    let v = vocab();
    let s = run(
        init_state(Template::A),
        "box; multiple instances; large; 1; 0;",
        &v,
    );
    let allowed = names(&next_allowed_tokens(&s, &v).unwrap(), &v);
    assert_eq!(allowed, {
        let mut c: Vec<String> = common::CATEGORIES.iter().map(|s| s.to_string()).collect();
        c.sort();
        c
    });
}

/// Draws uniformly among legal tokens that still fit the remaining budget.
fn random_walk(
    rng: &mut ChaCha8Rng,
    v: &Vocabulary,
    start: GrammarState,
    budget: usize,
) -> Vec<u32> {
    let mut state = start;
    let mut out = Vec::new();
    loop {
        let allowed = next_allowed_within(&state, v, budget - out.len()).unwrap();
        assert!(!allowed.is_empty(), "dead end after {out:?}");
        let t = allowed[rng.random_range(0..allowed.len())];
        state = advance(&state, t, v).unwrap();
        out.push(t);
        if t == EOS {
            return out;
        }
    }
}

#[test]
fn ten_thousand_random_walks_parse_cleanly() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let starts = [
        init_state(Template::A),
        init_state(Template::B),
        GrammarState::strict(GrammarConfig {
            template: None,
            special_words: true,
            mask_points: 36,
        }),
        GrammarState::strict(GrammarConfig {
            template: Some(Template::B),
            special_words: false,
            mask_points: 36,
        }),
    ];
    for i in 0..10_000 {
        let budget = [120, 256][i % 2];
        let walk = random_walk(&mut rng, &v, starts[i % starts.len()], budget);
        assert!(walk.len() <= budget);
        let text = decode(&walk, &v).unwrap();
        let (rec, report) = parse(&text);
        assert!(report.format_ok && report.matching_ok, "{text}\n{report:?}");
        assert!(rec.is_some());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn round_trip(scene in common::scene(), seed in any::<u64>(), b in any::<bool>(), sw in any::<bool>()) {
        let template = if b { Template::B } else { Template::A };
        let opts = SerializeOptions { template, special_words: sw, seed };
        let text = serialize_with(&scene, &opts).unwrap();
        let (rec, report) = parse(&text.text);
        prop_assert!(report.format_ok && report.matching_ok, "{} {:?}", text.text, report);
        let rec = rec.unwrap();
        prop_assert_eq!(rec.annotation_type, scene.annotation_type);
        prop_assert_eq!(rec.size_flag, scene.size_flag);
        prop_assert_eq!(rec.data_type, scene.data_type);
        prop_assert_eq!(common::sorted_instances(&rec), common::sorted_instances(&scene));
    }

    #[test]
    fn serialized_lines_are_accepted_token_by_token(scene in common::scene(), seed in any::<u64>(), b in any::<bool>()) {
        let v = vocab();
        let template = if b { Template::B } else { Template::A };
        let text = serialize(&scene, template, seed).unwrap();
        let enc = encode(&text.text, &v);
        prop_assert_eq!(enc.unk_count, 0);
        let mut state = init_state(template);
        for &t in &enc.ids[1..] {
            state = advance(&state, t, &v).unwrap();
        }
        prop_assert!(state.is_terminal());
        prop_assert_eq!(decode(&enc.ids, &v).unwrap(), text.text);
    }

    #[test]
    fn parse_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
        let text = String::from_utf8_lossy(&bytes);
        let (rec, report) = parse(&text);
        prop_assert_eq!(rec.is_some(), report.format_ok && report.matching_ok);
    }

    #[test]
    fn parse_never_panics_on_near_miss_text(scene in common::scene(), cut in 0usize..400, junk in "[\\[\\];, 0-9a-z]{0,6}") {
        let text = serialize(&scene, Template::A, 0).unwrap().text;
        let cut = cut.min(text.len());
        let mutated = format!("{}{}{}", &text[..cut], junk, &text[cut..]);
        let (rec, report) = parse(&mutated);
        prop_assert_eq!(rec.is_some(), report.format_ok && report.matching_ok);
    }
}
