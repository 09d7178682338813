use layoutprior::grammar::parse;
use layoutprior::model::{ModelConfig, Parameters};
use layoutprior::sampler::{sample, PromptSpec, SampleOptions};
use layoutprior::tokenizer::{VocabOptions, Vocabulary, BOS, EOS};
use layoutprior::{SizeFlag, Template};
use proptest::prelude::*;

fn setup(seed: u64) -> (Parameters<f32>, Vocabulary) {
    let v = Vocabulary::build(
        ["box; multiple instances; large; 2; 0; cup, dog; [ xmin 1 ymin 1 xmax 2 ymax 2] [ xmin 1 ymin 1 xmax 2 ymax 2]"],
        &VocabOptions::default(),
    )
    .unwrap();
    let mut cfg = ModelConfig::new(v.len());
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.context_window = 128;
    cfg.seed = seed;
    (Parameters::init(&cfg).unwrap(), v)
}

fn spec() -> impl Strategy<Value = PromptSpec> {
    (0usize..3, 2u32..=5, prop_oneof![Just("cup"), Just("dog")]).prop_map(|(s, count, c)| {
        PromptSpec {
            size: SizeFlag::ALL[s],
            count,
            category: c.to_string(),
        }
    })
}

fn options() -> impl Strategy<Value = SampleOptions> {
    (
        0.3f64..3.0,
        prop_oneof![Just(None), (1usize..50).prop_map(Some)],
        prop_oneof![Just(None), (0.2f64..1.0).prop_map(Some)],
        any::<u64>(),
        prop_oneof![Just(None), Just(Some(Template::A))],
    )
        .prop_map(
            |(temperature, top_k, top_p, seed, template)| SampleOptions {
                temperature,
                top_k,
                top_p,
                max_tokens: 129,
                constrained: true,
                seed,
                template,
                ..SampleOptions::default()
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constrained_samples_always_decode(model_seed in 0u64..50, spec in spec(), opts in options()) {
        let (p, v) = setup(model_seed);
        let s = sample(&p, &v, &spec.text(), &opts).unwrap();
        prop_assert!(s.reached_eos);
        prop_assert_eq!(*s.tokens.last().unwrap(), EOS);
        prop_assert!(s.tokens.len() <= opts.max_tokens);
        let (rec, report) = parse(&s.text);
        prop_assert!(report.format_ok && report.matching_ok, "{}: {:?}", s.text, report);
        let rec = rec.unwrap();
        prop_assert_eq!(rec.instances.len(), spec.count as usize);
        prop_assert_eq!(rec.size_flag, spec.size);
        prop_assert!(rec.instances.iter().any(|i| i.category == spec.category));
    }

    #[test]
    fn same_seed_same_sample(spec in spec(), opts in options()) {
        let (p, v) = setup(1);
        let a = sample(&p, &v, &spec.text(), &opts).unwrap();
        let b = sample(&p, &v, &spec.text(), &opts).unwrap();
        prop_assert_eq!(a.tokens, b.tokens);
        prop_assert_eq!(a.text, b.text);
    }

    #[test]
    fn unconstrained_respects_the_token_budget(max_tokens in 14usize..60, seed in any::<u64>(), spec in spec()) {
        let (p, v) = setup(2);
        let opts = SampleOptions { max_tokens, constrained: false, seed, ..SampleOptions::default() };
        let s = sample(&p, &v, &spec.text(), &opts).unwrap();
        prop_assert!(s.tokens.len() <= max_tokens);
        prop_assert_eq!(s.reached_eos, s.tokens.last() == Some(&EOS));
        prop_assert_eq!(s.tokens[0], BOS);
    }

    #[test]
    fn greedy_ignores_the_seed(spec in spec(), a in any::<u64>(), b in any::<u64>()) {
        let (p, v) = setup(3);
        let ga = sample(&p, &v, &spec.text(), &SampleOptions { seed: a, constrained: true, max_tokens: 129, ..SampleOptions::greedy() }).unwrap();
        let gb = sample(&p, &v, &spec.text(), &SampleOptions { seed: b, constrained: true, max_tokens: 129, ..SampleOptions::greedy() }).unwrap();
        prop_assert_eq!(ga.tokens, gb.tokens);
    }
}
