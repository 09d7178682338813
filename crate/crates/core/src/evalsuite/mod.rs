//! Location, shape and relation priors, KL divergence, and sequence-level
//! quality and controllability metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{classify_size, SceneRecord, CANVAS_MAX};
use crate::grammar::{parse, serialize, Template};
use crate::model::Parameters;
use crate::sampler::{
    sample, sample_seed, PromptGenerator, PromptSpec, SampleError, SampleOptions,
};
use crate::tokenizer::Vocabulary;

pub const DEFAULT_GRID: usize = 64;
pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no usable instance of '{0}'")]
    NoInstances(String),
    #[error("distributions have {0} and {1} entries")]
    SupportMismatch(usize, usize),
    #[error("sequence {0} has no sidecar flags")]
    MissingSidecar(usize),
    #[error("category '{category}' reached {got} of {needed} valid sequences")]
    InsufficientValidSamples {
        category: String,
        got: usize,
        needed: usize,
    },
    #[error("invalid evaluation option: {0}")]
    InvalidOption(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

fn normalize_smoothed(mut v: Vec<f64>, epsilon: f64) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    }
    if epsilon == 0.0 && total > 0.0 {
        return v;
    }
    let z: f64 = v.iter().map(|x| x + epsilon).sum();
    if z > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x + epsilon) / z);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationPrior {
    pub category: String,
    pub grid_size: usize,
    /// Row-major, row 0 at the top of the canvas.
    pub grid: Vec<f64>,
}

impl LocationPrior {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.grid_size + col]
    }

    /// One grid row per line, space-separated.
    pub fn to_text(&self) -> String {
        self.grid
            .chunks(self.grid_size)
            .map(|r| {
                r.iter()
                    .map(|v| format!("{v:.6e}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Unnormalized `G×G` accumulation of box interiors.
///
/// Cell `(r, c)` covers canvas pixels `[c·s, (c+1)·s) × [r·s, (r+1)·s)` with
/// `s = 512 / G`; a box `(x0, y0, x1, y1)` covers `[x0, x1) × [y0, y1)`. Each
/// cell receives the exact pixel overlap, so the result equals a full-canvas
/// indicator accumulation summed over blocks.
pub fn location_counts(
    records: &[SceneRecord],
    category: &str,
    grid: usize,
) -> Result<(Vec<f64>, usize), EvalError> {
    let canvas = CANVAS_MAX as usize;
    if grid == 0 || canvas % grid != 0 {
        return Err(EvalError::InvalidOption(format!(
            "grid {grid} does not divide {canvas}"
        )));
    }
    let s = canvas / grid;
    let mut acc = vec![0.0; grid * grid];
    let mut n = 0;
    let overlap = |lo: usize, hi: usize, cell: usize| {
        let (a, b) = (lo.max(cell * s), hi.min((cell + 1) * s));
        b.saturating_sub(a)
    };
    for inst in records
        .iter()
        .flat_map(|r| &r.instances)
        .filter(|i| i.category == category)
    {
        let Some((x0, y0, x1, y1)) = inst.geometry.bounding_box() else {
            continue;
        };
        n += 1;
        let (x0, y0) = (x0 as usize, y0 as usize);
        let (x1, y1) = ((x1 as usize).min(canvas), (y1 as usize).min(canvas));
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        for r in y0 / s..=((y1 - 1) / s) {
            let oy = overlap(y0, y1, r);
            for c in x0 / s..=((x1 - 1) / s) {
                acc[r * grid + c] += (oy * overlap(x0, x1, c)) as f64;
            }
        }
    }
    Ok((acc, n))
}

pub fn location_prior(
    records: &[SceneRecord],
    category: &str,
    grid: usize,
    epsilon: f64,
) -> Result<LocationPrior, EvalError> {
    let (acc, n) = location_counts(records, category, grid)?;
    if n == 0 {
        return Err(EvalError::NoInstances(category.to_string()));
    }
    Ok(LocationPrior {
        category: category.to_string(),
        grid_size: grid,
        grid: normalize_smoothed(acc, epsilon),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapePrior {
    pub category: String,
    /// `bins + 1` strictly increasing edges in log(w/h).
    pub edges: Vec<f64>,
    pub bins: Vec<f64>,
}

impl ShapePrior {
    pub fn to_text(&self) -> String {
        self.bins
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{:.6} {:.6} {p:.6e}", self.edges[i], self.edges[i + 1]))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Bin of `ln(w/h)` among `bins` uniform bins over `[ln 1/8, ln 8]`, clamped at both ends.
pub fn shape_bin(log_ratio: f64, bins: usize) -> usize {
    let lo = -(8f64.ln());
    let width = 2.0 * 8f64.ln() / bins as f64;
    let i = ((log_ratio - lo) / width).floor();
    if i.is_nan() || i < 0.0 {
        0
    } else {
        (i as usize).min(bins - 1)
    }
}

pub fn shape_prior(
    records: &[SceneRecord],
    category: &str,
    bins: usize,
    epsilon: f64,
) -> Result<ShapePrior, EvalError> {
    if bins == 0 {
        return Err(EvalError::InvalidOption("zero shape bins".into()));
    }
    let mut hist = vec![0.0; bins];
    let mut n = 0;
    for inst in records
        .iter()
        .flat_map(|r| &r.instances)
        .filter(|i| i.category == category)
    {
        let Some((x0, y0, x1, y1)) = inst.geometry.bounding_box() else {
            continue;
        };
        let (w, h) = (x1.saturating_sub(x0), y1.saturating_sub(y0));
        if h == 0 {
            continue;
        }
        hist[shape_bin((f64::from(w) / f64::from(h)).ln(), bins)] += 1.0;
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::NoInstances(category.to_string()));
    }
    let lo = -(8f64.ln());
    let width = 2.0 * 8f64.ln() / bins as f64;
    Ok(ShapePrior {
        category: category.to_string(),
        edges: (0..=bins).map(|i| lo + width * i as f64).collect(),
        bins: normalize_smoothed(hist, epsilon),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationPrior {
    pub categories: Vec<String>,
    /// Raw co-occurrence counts, `C×C` row-major, zero diagonal.
    pub counts: Vec<f64>,
    /// Counts smoothed off the diagonal and row-normalized.
    pub matrix: Vec<f64>,
}

impl RelationPrior {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn count(&self, a: usize, b: usize) -> f64 {
        self.counts[a * self.len() + b]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        let c = self.len();
        &self.matrix[a * c..(a + 1) * c]
    }

    /// Row `a` without its diagonal entry, the support compared by KL.
    pub fn off_diagonal_row(&self, a: usize) -> Vec<f64> {
        self.row(a)
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != a)
            .map(|(_, &v)| v)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.categories.join("\t");
        for a in 0..self.len() {
            s.push('\n');
            s.push_str(
                &self
                    .row(a)
                    .iter()
                    .map(|v| format!("{v:.6e}"))
                    .collect::<Vec<_>>()
                    .join(" "),
            );
        }
        s
    }
}

/// Co-occurrence counts over `categories`: per record either presence
/// (`multiplicity == false`) or the product of instance counts.
pub fn relation_prior(
    records: &[SceneRecord],
    categories: &[String],
    multiplicity: bool,
    epsilon: f64,
) -> RelationPrior {
    let c = categories.len();
    let index: BTreeMap<&str, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut counts = vec![0.0; c * c];
    let mut per = vec![0usize; c];
    for r in records {
        per.iter_mut().for_each(|x| *x = 0);
        for inst in &r.instances {
            if let Some(&i) = index.get(inst.category.as_str()) {
                per[i] += 1;
            }
        }
        for a in 0..c {
            for b in 0..c {
                if a != b && per[a] > 0 && per[b] > 0 {
                    counts[a * c + b] += if multiplicity {
                        (per[a] * per[b]) as f64
                    } else {
                        1.0
                    };
                }
            }
        }
    }
    let mut matrix = vec![0.0; c * c];
    for a in 0..c {
        let row: Vec<f64> = (0..c)
            .filter(|&b| b != a)
            .map(|b| counts[a * c + b])
            .collect();
        if row.is_empty() {
            continue;
        }
        let norm = normalize_smoothed(row, epsilon);
        for (b, v) in (0..c).filter(|&b| b != a).zip(norm) {
            matrix[a * c + b] = v;
        }
    }
    RelationPrior {
        categories: categories.to_vec(),
        counts,
        matrix,
    }
}

/// `Σ pᵢ ln(pᵢ/qᵢ)`, with terms where `pᵢ = 0` contributing nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, EvalError> {
    if p.len() != q.len() {
        return Err(EvalError::SupportMismatch(p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorOptions {
    pub grid: usize,
    pub bins: usize,
    pub epsilon: f64,
    pub multiplicity: bool,
}

impl Default for PriorOptions {
    fn default() -> Self {
        PriorOptions {
            grid: DEFAULT_GRID,
            bins: DEFAULT_BINS,
            epsilon: DEFAULT_EPSILON,
            multiplicity: false,
        }
    }
}

/// All three priors for a fixed category list. Categories without usable
/// instances have no location or shape entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    pub categories: Vec<String>,
    pub location: BTreeMap<String, LocationPrior>,
    pub shape: BTreeMap<String, ShapePrior>,
    pub relation: RelationPrior,
}

impl PriorSet {
    pub fn estimate(
        records: &[SceneRecord],
        categories: &[String],
        opts: &PriorOptions,
    ) -> Result<Self, EvalError> {
        let mut location = BTreeMap::new();
        let mut shape = BTreeMap::new();
        for c in categories {
            match location_prior(records, c, opts.grid, opts.epsilon) {
                Ok(p) => {
                    location.insert(c.clone(), p);
                }
                Err(EvalError::NoInstances(_)) => {}
                Err(e) => return Err(e),
            }
            match shape_prior(records, c, opts.bins, opts.epsilon) {
                Ok(p) => {
                    shape.insert(c.clone(), p);
                }
                Err(EvalError::NoInstances(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(PriorSet {
            categories: categories.to_vec(),
            location,
            shape,
            relation: relation_prior(records, categories, opts.multiplicity, opts.epsilon),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryKl {
    pub category: String,
    pub location: Option<f64>,
    pub shape: Option<f64>,
    pub relation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KlSummary {
    pub location: Option<f64>,
    pub shape: Option<f64>,
    pub relation: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-category `KL(p‖q)` and category averages. Entries where either side
/// lacks the category are left empty and excluded from the averages.
pub fn compare_priors(
    p: &PriorSet,
    q: &PriorSet,
) -> Result<(Vec<CategoryKl>, KlSummary), EvalError> {
    if p.categories != q.categories {
        return Err(EvalError::InvalidOption(
            "prior sets use different category lists".into(),
        ));
    }
    let mut rows = Vec::with_capacity(p.categories.len());
    for (i, c) in p.categories.iter().enumerate() {
        let location = match (p.location.get(c), q.location.get(c)) {
            (Some(a), Some(b)) => Some(kl_divergence(&a.grid, &b.grid)?),
            _ => None,
        };
        let shape = match (p.shape.get(c), q.shape.get(c)) {
            (Some(a), Some(b)) => Some(kl_divergence(&a.bins, &b.bins)?),
            _ => None,
        };
        let present = p.location.contains_key(c) && q.location.contains_key(c);
        let relation = if present && p.categories.len() > 1 {
            Some(kl_divergence(
                &p.relation.off_diagonal_row(i),
                &q.relation.off_diagonal_row(i),
            )?)
        } else {
            None
        };
        rows.push(CategoryKl {
            category: c.clone(),
            location,
            shape,
            relation,
        });
    }
    let summary = KlSummary {
        location: mean(rows.iter().filter_map(|r| r.location)),
        shape: mean(rows.iter().filter_map(|r| r.shape)),
        relation: mean(rows.iter().filter_map(|r| r.relation)),
    };
    Ok((rows, summary))
}

/// One generated sequence; a sequence cut off before EOS fails Format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generated {
    pub text: String,
    pub reached_eos: bool,
}

impl Generated {
    pub fn complete(text: impl Into<String>) -> Self {
        Generated {
            text: text.into(),
            reached_eos: true,
        }
    }

    /// The decoded record when the sequence passes both Format and Matching.
    pub fn record(&self) -> Option<SceneRecord> {
        if !self.reached_eos {
            return None;
        }
        parse(&self.text).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub format: f64,
    pub matching: f64,
}

/// Fraction of sequences that are well-formed, and of those also count-consistent.
pub fn quality_metrics(sequences: &[Generated]) -> Quality {
    if sequences.is_empty() {
        return Quality {
            format: 0.0,
            matching: 0.0,
        };
    }
    let (mut f, mut m) = (0usize, 0usize);
    for s in sequences {
        if !s.reached_eos {
            continue;
        }
        let (_, report) = parse(&s.text);
        if report.format_ok {
            f += 1;
            if report.matching_ok {
                m += 1;
            }
        }
    }
    let n = sequences.len() as f64;
    Quality {
        format: f as f64 / n,
        matching: m as f64 / n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Controllability {
    pub size: f64,
    pub count: f64,
}

/// Agreement of decoded scenes with the flags they were prompted with.
/// Sequences that fail to decode count against both rates.
pub fn controllability_metrics(
    sequences: &[Generated],
    requested: &[Option<PromptSpec>],
) -> Result<Controllability, EvalError> {
    if requested.len() < sequences.len() {
        return Err(EvalError::MissingSidecar(requested.len()));
    }
    let (mut size, mut count) = (0usize, 0usize);
    for (i, s) in sequences.iter().enumerate() {
        let spec = requested[i].as_ref().ok_or(EvalError::MissingSidecar(i))?;
        if let Some(rec) = s.record() {
            if classify_size(&rec.instances).ok() == Some(spec.size) {
                size += 1;
            }
            if rec.instances.len() == spec.count as usize {
                count += 1;
            }
        }
    }
    let n = sequences.len().max(1) as f64;
    Ok(Controllability {
        size: size as f64 / n,
        count: count as f64 / n,
    })
}

/// Anything that answers an evaluation prompt with a sequence.
pub trait SequenceSource {
    fn generate(&mut self, prompt: &PromptSpec, seed: u64) -> Result<Generated, EvalError>;
}

/// Samples from a trained model.
pub struct ModelSource<'a> {
    pub params: &'a Parameters<f32>,
    pub vocab: &'a Vocabulary,
    pub options: SampleOptions,
}

impl SequenceSource for ModelSource<'_> {
    fn generate(&mut self, prompt: &PromptSpec, seed: u64) -> Result<Generated, EvalError> {
        let opts = SampleOptions {
            seed,
            ..self.options.clone()
        };
        let s = sample(self.params, self.vocab, &prompt.text(), &opts)?;
        Ok(Generated {
            text: s.text,
            reached_eos: s.reached_eos,
        })
    }
}

/// Replays ground-truth scenes containing the prompted category, cycling
/// through them in a seeded order. An ideal model for self-consistency checks.
pub struct ReplaySource {
    by_category: BTreeMap<String, Vec<String>>,
    cursor: BTreeMap<String, usize>,
}

impl ReplaySource {
    pub fn new(records: &[SceneRecord], template: Template, seed: u64) -> Self {
        let mut by_category: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let cats: BTreeSet<&str> = r.instances.iter().map(|x| x.category.as_str()).collect();
            let Ok(seq) = serialize(r, template, seed.wrapping_add(i as u64)) else {
                continue;
            };
            for c in cats {
                by_category
                    .entry(c.to_string())
                    .or_default()
                    .push(seq.text.clone());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in by_category.values_mut() {
            rand::seq::SliceRandom::shuffle(v.as_mut_slice(), &mut rng);
        }
        ReplaySource {
            by_category,
            cursor: BTreeMap::new(),
        }
    }
}

impl SequenceSource for ReplaySource {
    fn generate(&mut self, prompt: &PromptSpec, _seed: u64) -> Result<Generated, EvalError> {
        let pool = self
            .by_category
            .get(&prompt.category)
            .ok_or_else(|| EvalError::NoInstances(prompt.category.clone()))?;
        let i = self.cursor.entry(prompt.category.clone()).or_insert(0);
        let text = pool[*i % pool.len()].clone();
        *i += 1;
        Ok(Generated::complete(text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub priors: PriorOptions,
    /// Valid sequences required per category.
    pub per_category: usize,
    /// Attempts allowed per category, as a multiple of `per_category`.
    pub retry_factor: usize,
    /// When false, categories short of their minimum are reported instead of failing.
    pub require_minimum: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            priors: PriorOptions::default(),
            per_category: 80,
            retry_factor: 4,
            require_minimum: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kl: KlSummary,
    pub per_category: Vec<CategoryKl>,
    pub quality: Quality,
    pub controllability: Controllability,
    pub generated: usize,
    pub valid: usize,
    /// Categories that missed their minimum (only when the minimum is not required).
    pub short_categories: Vec<String>,
    /// Categories whose KL entries could not be computed.
    pub skipped: Vec<String>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// `key = value` lines followed by a tab-separated per-category table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kl_location = {}", opt(self.kl.location));
        let _ = writeln!(s, "kl_shape = {}", opt(self.kl.shape));
        let _ = writeln!(s, "kl_relation = {}", opt(self.kl.relation));
        let _ = writeln!(s, "format_accuracy = {:.6}", self.quality.format);
        let _ = writeln!(s, "matching_accuracy = {:.6}", self.quality.matching);
        let _ = writeln!(s, "size_accuracy = {:.6}", self.controllability.size);
        let _ = writeln!(s, "count_accuracy = {:.6}", self.controllability.count);
        let _ = writeln!(s, "generated = {}", self.generated);
        let _ = writeln!(s, "valid = {}", self.valid);
        let _ = writeln!(s, "short_categories = {}", self.short_categories.join(","));
        let _ = writeln!(s, "skipped = {}", self.skipped.join(","));
        let _ = writeln!(s, "\ncategory\tlocation\tshape\trelation");
        for r in &self.per_category {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                r.category,
                opt(r.location),
                opt(r.shape),
                opt(r.relation)
            );
        }
        s
    }
}

/// Full protocol: draw prompts per category until each has `per_category`
/// valid sequences, estimate priors from the valid samples, compare them
/// against the ground truth, and score quality and controllability over
/// every generated sequence.
pub fn evaluate<S: SequenceSource>(
    source: &mut S,
    ground_truth: &[SceneRecord],
    generator: &PromptGenerator,
    opts: &EvalOptions,
) -> Result<(EvalReport, PriorSet, PriorSet), EvalError> {
    let categories = &generator.categories;
    if categories.is_empty() || opts.per_category == 0 {
        return Err(EvalError::InvalidOption("nothing to evaluate".into()));
    }
    for c in categories {
        if !ground_truth
            .iter()
            .any(|r| r.instances.iter().any(|i| &i.category == c))
        {
            return Err(EvalError::NoInstances(c.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut sequences = Vec::new();
    let mut requested = Vec::new();
    let mut records = Vec::new();
    let mut short = Vec::new();
    let budget = opts.per_category * opts.retry_factor.max(1);
    for c in categories {
        let mut valid = 0;
        let mut attempts = 0;
        while valid < opts.per_category && attempts < budget {
            let spec = generator.draw(c, &mut rng);
            let g = source.generate(&spec, sample_seed(opts.seed, sequences.len()))?;
            if let Some(r) = g.record() {
                records.push(r);
                valid += 1;
            }
            sequences.push(g);
            requested.push(Some(spec));
            attempts += 1;
        }
        if valid < opts.per_category {
            if opts.require_minimum {
                return Err(EvalError::InsufficientValidSamples {
                    category: c.clone(),
                    got: valid,
                    needed: opts.per_category,
                });
            }
            short.push(c.clone());
        }
    }
    let p = PriorSet::estimate(ground_truth, categories, &opts.priors)?;
    let q = PriorSet::estimate(&records, categories, &opts.priors)?;
    let (per_category, kl) = compare_priors(&p, &q)?;
    let skipped = per_category
        .iter()
        .filter(|r| r.location.is_none() || r.shape.is_none())
        .map(|r| r.category.clone())
        .collect();
    let report = EvalReport {
        kl,
        per_category,
        quality: quality_metrics(&sequences),
        controllability: controllability_metrics(&sequences, &requested)?,
        generated: sequences.len(),
        valid: records.len(),
        short_categories: short,
        skipped,
    };
    Ok((report, p, q))
}
