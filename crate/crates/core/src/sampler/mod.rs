//! Prompted autoregressive generation, optionally restricted by the grammar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{SizeFlag, DEFAULT_MASK_POINTS};
use crate::grammar::{advance, next_allowed_within, GrammarConfig, GrammarState, Phase, Template};
use crate::model::{ModelError, Parameters, Session};
use crate::tokenizer::{decode, encode_prompt, Vocabulary, EOS};

/// Seed offset between consecutive samples of a batch.
const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("illegal prompt prefix: {0}")]
    IllegalPromptPrefix(String),
    #[error("context overflow: {0}")]
    ContextOverflow(String),
    #[error("the prefix already holds every declared instance")]
    DeclaredCountExhausted,
    #[error("invalid sampling options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub temperature: f64,
    /// `None` disables top-k filtering; `Some(1)` is greedy decoding.
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    /// Upper bound on the total sequence length, BOS and EOS included.
    pub max_tokens: usize,
    pub constrained: bool,
    pub seed: u64,
    /// Template enforced in constrained mode; `None` lets the first body symbol decide.
    pub template: Option<Template>,
    pub special_words: bool,
    pub mask_points: u16,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            temperature: 1.0,
            top_k: Some(40),
            top_p: None,
            max_tokens: 256,
            constrained: false,
            seed: 0,
            template: None,
            special_words: true,
            mask_points: DEFAULT_MASK_POINTS as u16,
        }
    }
}

impl SampleOptions {
    pub fn greedy() -> Self {
        SampleOptions {
            top_k: Some(1),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SampleError::InvalidOptions(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(SampleError::InvalidOptions(format!(
                    "top_p {p} outside (0, 1]"
                )));
            }
        }
        if self.top_k == Some(0) {
            return Err(SampleError::InvalidOptions(
                "top_k must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn grammar(&self) -> GrammarConfig {
        GrammarConfig {
            template: self.template,
            special_words: self.special_words,
            mask_points: self.mask_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Canonical text of prompt and continuation.
    pub text: String,
    /// Token ids, starting with BOS and ending with EOS when it was reached.
    pub tokens: Vec<u32>,
    pub prompt_tokens: usize,
    pub reached_eos: bool,
}

/// Picks the next token among `candidates` (or all ids when `None`).
fn choose(
    logits: &[f32],
    candidates: Option<&[u32]>,
    opts: &SampleOptions,
    rng: &mut ChaCha8Rng,
) -> u32 {
    let mut pool: Vec<(u32, f64)> = match candidates {
        Some(c) => c
            .iter()
            .map(|&i| (i, f64::from(logits[i as usize])))
            .collect(),
        None => logits
            .iter()
            .enumerate()
            .map(|(i, &l)| (i as u32, f64::from(l)))
            .collect(),
    };
    // Highest logit first, lowest id on ties.
    let order = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if let Some(k) = opts.top_k {
        if k < pool.len() {
            pool.select_nth_unstable_by(k - 1, order);
            pool.truncate(k);
        }
    }
    // Candidates otherwise stay in id order; only nucleus filtering needs the ranking.
    if opts.top_k.is_some() || opts.top_p.is_some() {
        pool.sort_by(order);
    }
    if pool.len() == 1 {
        return pool[0].0;
    }
    let max = pool
        .iter()
        .map(|&(_, l)| l)
        .fold(f64::NEG_INFINITY, f64::max)
        / opts.temperature;
    let mut probs: Vec<f64> = pool
        .iter()
        .map(|&(_, l)| (l / opts.temperature - max).exp())
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    if let Some(top_p) = opts.top_p {
        let mut acc = 0.0;
        let keep = probs
            .iter()
            .position(|&p| {
                acc += p;
                acc >= top_p
            })
            .map_or(probs.len(), |i| i + 1);
        probs.truncate(keep);
        let t: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= t);
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return pool[i].0;
        }
    }
    pool[probs.len() - 1].0
}

fn prefix_state(
    ids: &[u32],
    vocab: &Vocabulary,
    cfg: GrammarConfig,
) -> Result<GrammarState, SampleError> {
    let mut state = GrammarState::strict(cfg);
    for &t in ids.iter().skip(1) {
        state = advance(&state, t, vocab).map_err(|_| {
            SampleError::IllegalPromptPrefix(format!(
                "token '{}' is not allowed after the preceding prompt",
                vocab.token(t).unwrap_or("?")
            ))
        })?;
    }
    Ok(state)
}

/// Continues `prompt` until EOS or `max_tokens`.
///
/// In constrained mode every emitted token is legal for the grammar and the
/// budget still admits a complete sentence, so the result always parses.
pub fn sample(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    prompt: &str,
    opts: &SampleOptions,
) -> Result<Sample, SampleError> {
    opts.validate()?;
    let enc = encode_prompt(prompt, vocab);
    if opts.constrained && enc.unk_count > 0 {
        return Err(SampleError::IllegalPromptPrefix(format!(
            "{} prompt word(s) are outside the vocabulary",
            enc.unk_count
        )));
    }
    let state = if opts.constrained {
        Some(prefix_state(&enc.ids, vocab, opts.grammar())?)
    } else {
        None
    };
    generate(params, vocab, enc.ids, state, opts)
}

fn generate(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    mut tokens: Vec<u32>,
    mut state: Option<GrammarState>,
    opts: &SampleOptions,
) -> Result<Sample, SampleError> {
    let context = params.config().context_window;
    if opts.max_tokens > context + 1 {
        return Err(SampleError::ContextOverflow(format!(
            "max_tokens {} exceeds the context window {context} plus the final token",
            opts.max_tokens
        )));
    }
    let prompt_tokens = tokens.len();
    if prompt_tokens >= opts.max_tokens {
        return Err(SampleError::ContextOverflow(format!(
            "prompt of {prompt_tokens} tokens leaves no room under max_tokens {}",
            opts.max_tokens
        )));
    }
    if let Some(s) = &state {
        if s.min_remaining() > opts.max_tokens - prompt_tokens {
            return Err(SampleError::ContextOverflow(format!(
                "the shortest completion needs {} more tokens",
                s.min_remaining()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut session = Session::new(params);
    let mut logits = Vec::new();
    for &t in &tokens {
        logits = session.push(t)?;
    }
    let mut reached_eos = false;
    while tokens.len() < opts.max_tokens {
        let budget = opts.max_tokens - tokens.len();
        let allowed = match &state {
            Some(s) => {
                let a = next_allowed_within(s, vocab, budget)
                    .map_err(|e| SampleError::IllegalPromptPrefix(e.to_string()))?;
                if a.is_empty() {
                    return Err(SampleError::ContextOverflow(
                        "no legal token fits the remaining budget".into(),
                    ));
                }
                Some(a)
            }
            None => None,
        };
        let next = choose(&logits, allowed.as_deref(), opts, &mut rng);
        if let Some(s) = &mut state {
            *s = advance(s, next, vocab).expect("chosen from the allowed set");
        }
        tokens.push(next);
        if next == EOS {
            reached_eos = true;
            break;
        }
        if tokens.len() < opts.max_tokens {
            logits = session.push(next)?;
        }
    }
    let text = decode(&tokens, vocab).map_err(|e| SampleError::InvalidOptions(e.to_string()))?;
    Ok(Sample {
        text,
        tokens,
        prompt_tokens,
        reached_eos,
    })
}

/// Appends instances to a T_b scene until the declared count is met.
///
/// `partial` must end right after a closed group and declare more instances
/// than it holds; its text is kept verbatim (up to canonical spacing).
pub fn continue_scene(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    partial: &str,
    opts: &SampleOptions,
) -> Result<Sample, SampleError> {
    opts.validate()?;
    let enc = encode_prompt(partial, vocab);
    if enc.unk_count > 0 {
        return Err(SampleError::IllegalPromptPrefix(
            "prefix contains unknown words".into(),
        ));
    }
    let cfg = GrammarConfig {
        template: Some(Template::B),
        ..opts.grammar()
    };
    let mut lenient = GrammarState::lenient();
    for &t in &enc.ids[1..] {
        let lex = vocab.lexeme(t).expect("encoded ids are in range");
        lenient = lenient.step(lex).ok_or_else(|| {
            SampleError::IllegalPromptPrefix("prefix is not a legal sequence prefix".into())
        })?;
    }
    if lenient.phase() != Phase::AfterGroup || lenient.template() != Some(Template::B) {
        return Err(SampleError::IllegalPromptPrefix(
            "prefix must be a T_b sequence ending after a closed group".into(),
        ));
    }
    if lenient.groups_emitted() >= lenient.declared_instances() {
        return Err(SampleError::DeclaredCountExhausted);
    }
    let state = if opts.constrained {
        Some(prefix_state(&enc.ids, vocab, cfg)?)
    } else {
        None
    };
    generate(params, vocab, enc.ids, state, opts)
}

/// Flags requested by one evaluation prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub size: SizeFlag,
    pub count: u32,
    pub category: String,
}

impl PromptSpec {
    /// `box; multiple instances; {size}; {count}; 0; {category},`
    pub fn text(&self) -> String {
        format!(
            "box; multiple instances; {}; {}; 0; {},",
            self.size.word(),
            self.count,
            self.category
        )
    }
}

/// Evaluation prompt generator: random size flag, instance count in
/// `min_count..=max_count`, and a leading category, cycling through the
/// categories so each receives `per_category` prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptGenerator {
    pub categories: Vec<String>,
    pub per_category: usize,
    pub min_count: u32,
    pub max_count: u32,
}

impl PromptGenerator {
    pub fn new(categories: Vec<String>, per_category: usize) -> Self {
        PromptGenerator {
            categories,
            per_category,
            min_count: 2,
            max_count: 10,
        }
    }

    pub fn total(&self) -> usize {
        self.categories.len() * self.per_category
    }

    pub fn draw(&self, category: &str, rng: &mut ChaCha8Rng) -> PromptSpec {
        let size = SizeFlag::ALL[rng.random_range(0..3)];
        let count = rng.random_range(self.min_count..=self.max_count);
        PromptSpec {
            size,
            count,
            category: category.to_string(),
        }
    }

    /// All prompts, round-robin over categories.
    pub fn prompts(&self, seed: u64) -> Vec<PromptSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.per_category)
            .flat_map(|_| self.categories.iter())
            .map(|c| c.as_str())
            .collect::<Vec<_>>()
            .into_iter()
            .map(|c| self.draw(c, &mut rng))
            .collect()
    }
}

/// Seed used for sample `i` of a batch started from `seed`.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64).wrapping_mul(SEED_STRIDE))
}

/// Sidecar record written next to every sampled line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub line: usize,
    pub prompt: String,
    pub requested: Option<PromptSpec>,
    pub options: SampleOptions,
    pub reached_eos: bool,
}

/// Samples `count` sequences; sample `i` uses [`sample_seed`]`(opts.seed, i)`.
///
/// Prompts come from `generator` (drawn with the batch seed) when given, and
/// the plain `prompt` otherwise.
pub fn batch_sample(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    generator: Option<&PromptGenerator>,
    prompt: &str,
    count: usize,
    opts: &SampleOptions,
) -> Result<Vec<(Sample, SampleMeta)>, SampleError> {
    if count == 0 {
        return Err(SampleError::InvalidOptions(
            "count must be at least 1".into(),
        ));
    }
    let specs: Vec<Option<PromptSpec>> = match generator {
        Some(g) => {
            let all = g.prompts(opts.seed);
            if all.is_empty() {
                return Err(SampleError::InvalidOptions(
                    "prompt generator has no categories".into(),
                ));
            }
            (0..count)
                .map(|i| Some(all[i % all.len()].clone()))
                .collect()
        }
        None => vec![None; count],
    };
    let mut out = Vec::with_capacity(count);
    for (i, spec) in specs.into_iter().enumerate() {
        let text = spec
            .as_ref()
            .map_or_else(|| prompt.to_string(), PromptSpec::text);
        let o = SampleOptions {
            seed: sample_seed(opts.seed, i),
            ..opts.clone()
        };
        let s = sample(params, vocab, &text, &o)?;
        let meta = SampleMeta {
            line: i,
            prompt: text,
            requested: spec,
            reached_eos: s.reached_eos,
            options: o,
        };
        out.push((s, meta));
    }
    Ok(out)
}
