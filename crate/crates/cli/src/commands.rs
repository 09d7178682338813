//! One function per subcommand. Primary outputs are written under the run's
//! output directory and never contain timestamps.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use layoutprior::annotations::{
    load_annotations, quantize_scene, AnnotationError, QuantizeOptions,
};
use layoutprior::evalsuite::{evaluate, EvalOptions, ModelSource, PriorOptions, PriorSet};
use layoutprior::grammar::{
    parse_with, serialize_with, ParseOptions, SerializeOptions, ViolationKind,
};
use layoutprior::model::{
    load_checkpoint_expecting, save_checkpoint, Batcher, ModelConfig, OptimConfig, TrainState,
};
use layoutprior::render::{record_hash, render_heatmap, render_histogram, render_svg, RenderStyle};
use layoutprior::sampler::{
    batch_sample, sample, sample_seed, PromptGenerator, SampleMeta, SampleOptions,
};
use layoutprior::tokenizer::{encode, VocabOptions};
use layoutprior::{SceneRecord, Template, Vocabulary};

use crate::config::{RunConfig, TemplateMix};
use crate::error::CliError;

pub const CORPUS_FILE: &str = "corpus.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const SAMPLES_FILE: &str = "samples.txt";
pub const SAMPLES_META_FILE: &str = "samples.meta.jsonl";
pub const LAYOUTS_FILE: &str = "layouts.jsonl";
pub const DECODE_REPORT_FILE: &str = "decode_report.txt";
pub const EVAL_REPORT_FILE: &str = "eval_report.txt";

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the named random stream derived from the global seed.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ fnv1a(name.as_bytes()))
}

/// Splits `total` by `proportions` with the largest-remainder rule; ties go
/// to the earlier entry.
pub fn allocate(total: usize, proportions: &[f64]) -> Vec<usize> {
    let sum: f64 = proportions.iter().sum();
    if proportions.is_empty() || sum <= 0.0 {
        return vec![0; proportions.len()];
    }
    let quotas: Vec<f64> = proportions.iter().map(|p| total as f64 * p / sum).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = total.saturating_sub(alloc.iter().sum());
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        alloc[i] += 1;
        left -= 1;
    }
    alloc
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path.display(), e))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path.display(), e))
}

/// Reads a layout file: one JSON-encoded record per non-empty line.
pub fn read_layouts(path: &Path) -> Result<Vec<SceneRecord>, CliError> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::Data(AnnotationError::MalformedFile(format!(
                    "{} line {}: {e}",
                    path.display(),
                    i + 1
                )))
            })
        })
        .collect()
}

fn layout_lines(records: &[SceneRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

fn vocab_options(cfg: &RunConfig) -> VocabOptions {
    VocabOptions {
        special_words: cfg.corpus.special_words,
        mask_points: cfg.corpus.mask_points,
    }
}

pub fn ingest(cfg: &RunConfig) -> Result<String, CliError> {
    if cfg.datasets.is_empty() {
        return Err(CliError::Config(
            "ingest needs at least one [[dataset]]".into(),
        ));
    }
    let mix = cfg.corpus.template_mix()?;
    let mut pools: Vec<Vec<(u64, SceneRecord)>> = Vec::new();
    let mut reports = Vec::new();
    for d in &cfg.datasets {
        let loaded = load_annotations(&d.path, d.annotation_kind()?)?;
        let opts = QuantizeOptions {
            data_type: d.data_type()?,
            mask_points: cfg.corpus.mask_points,
        };
        let mut pool = Vec::new();
        let mut failed = 0;
        for raw in &loaded.images {
            match quantize_scene(raw, &opts) {
                Ok(q) => pool.push((raw.image_id, q.record)),
                Err(_) => failed += 1,
            }
        }
        reports.push(json!({
            "name": d.name,
            "images_total": loaded.report.images_total,
            "images_kept": loaded.report.images_kept,
            "instances_total": loaded.report.instances_total,
            "instances_kept": loaded.report.instances_kept,
            "dropped_few_keypoints": loaded.report.dropped_few_keypoints,
            "dropped_unsupported": loaded.report.dropped_unsupported,
            "dropped_degenerate": loaded.report.dropped_degenerate,
            "scenes": pool.len(),
            "scenes_failed": failed,
        }));
        pools.push(pool);
    }
    let total = cfg
        .corpus
        .lines
        .unwrap_or_else(|| pools.iter().map(Vec::len).sum());
    let proportions: Vec<f64> = cfg.datasets.iter().map(|d| d.proportion).collect();
    let alloc = allocate(total, &proportions);

    let mut entries: Vec<(usize, usize)> = Vec::with_capacity(total);
    for (i, (&n, pool)) in alloc.iter().zip(&pools).enumerate() {
        if n == 0 {
            continue;
        }
        if pool.is_empty() {
            return Err(AnnotationError::EmptyDataset.into());
        }
        let name = format!("ingest/{}", cfg.datasets[i].name);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &name));
        let mut order: Vec<usize> = Vec::new();
        while entries.iter().filter(|e| e.0 == i).count() < n {
            if order.is_empty() {
                order = (0..pool.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            entries.push((i, order.pop().expect("refilled")));
        }
    }
    entries.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
        cfg.seed, "shuffle",
    )));

    let mut coin = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "template"));
    let order_seed = stream_seed(cfg.seed, "order");
    let mut corpus = String::new();
    let mut records = Vec::with_capacity(entries.len());
    let mut manifest_entries = Vec::with_capacity(entries.len());
    for (line, &(d, r)) in entries.iter().enumerate() {
        let template = match mix {
            TemplateMix::OnlyA => Template::A,
            TemplateMix::Mixed => {
                if coin.random_bool(0.5) {
                    Template::A
                } else {
                    Template::B
                }
            }
        };
        let (image_id, record) = &pools[d][r];
        let opts = SerializeOptions {
            template,
            special_words: cfg.corpus.special_words,
            seed: order_seed ^ line as u64,
        };
        let text = serialize_with(record, &opts)
            .map_err(|e| CliError::Data(AnnotationError::InvalidInput(e.to_string())))?;
        corpus.push_str(&text.text);
        corpus.push('\n');
        records.push(record.clone());
        manifest_entries.push(json!({
            "line": line,
            "dataset": cfg.datasets[d].name,
            "image_id": image_id,
            "template": template.to_string(),
        }));
    }
    let vocab = Vocabulary::build(corpus.lines(), &vocab_options(cfg))?;
    let manifest = json!({
        "seed": cfg.seed,
        "lines": entries.len(),
        "templates": cfg.corpus.templates,
        "special_words": cfg.corpus.special_words,
        "mask_points": cfg.corpus.mask_points,
        "vocabulary_size": vocab.len(),
        "allocation": cfg.datasets.iter().zip(&alloc).zip(&pools).map(|((d, n), p)| json!({
            "name": d.name,
            "proportion": d.proportion,
            "lines": n,
            "available": p.len(),
        })).collect::<Vec<_>>(),
        "datasets": reports,
        "entries": manifest_entries,
    });

    let out = &cfg.out_dir;
    ensure_dir(out)?;
    write(&out.join(CORPUS_FILE), &corpus)?;
    write(&out.join(RECORDS_FILE), layout_lines(&records))?;
    vocab.save(&out.join(VOCAB_FILE))?;
    write(
        &out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(format!(
        "ok command=ingest lines={} vocabulary={}",
        entries.len(),
        vocab.len()
    ))
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary, CliError> {
    Ok(Vocabulary::load(&cfg.out_dir.join(VOCAB_FILE))?)
}

pub fn train(cfg: &RunConfig) -> Result<String, CliError> {
    let out = &cfg.out_dir;
    let vocab = load_vocab(cfg)?;
    let corpus = read(&out.join(CORPUS_FILE))?;
    let context = cfg.model.context_window;
    let mut dropped = 0;
    let seqs: Vec<Vec<u32>> = corpus
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| encode(l, &vocab).ids)
        .filter(|ids| {
            let fits = ids.len() <= context + 1;
            dropped += usize::from(!fits);
            fits
        })
        .collect();
    if seqs.is_empty() {
        return Err(CliError::Config(
            "no corpus line fits the context window".into(),
        ));
    }
    let ckpt = out.join(CHECKPOINT_FILE);
    let loss_path = out.join(LOSS_FILE);
    let resuming = cfg.train.resume && ckpt.exists();
    let mut state = if resuming {
        load_checkpoint_expecting(&ckpt, vocab.len())?
    } else {
        let model = ModelConfig {
            vocab_size: vocab.len(),
            context_window: context,
            layers: cfg.model.layers,
            heads: cfg.model.heads,
            embed_dim: cfg.model.embed_dim,
            dropout: cfg.model.dropout,
            seed: stream_seed(cfg.seed, "train"),
        };
        TrainState::new(
            &model,
            OptimConfig::for_run(cfg.train.learning_rate, cfg.train.steps),
        )?
    };
    let mut batcher = Batcher::new(
        seqs,
        cfg.train.batch_size,
        stream_seed(cfg.seed, "train/batches"),
    );
    // Replay the batch order so a resumed run continues where the last one stopped.
    for _ in 0..state.step {
        batcher.next_batch();
    }
    let mut log = if resuming && loss_path.exists() {
        fs::OpenOptions::new()
            .append(true)
            .open(&loss_path)
            .map_err(|e| CliError::io(loss_path.display(), e))?
    } else {
        let mut f =
            fs::File::create(&loss_path).map_err(|e| CliError::io(loss_path.display(), e))?;
        writeln!(f, "step,loss").map_err(|e| CliError::io(loss_path.display(), e))?;
        f
    };
    let start_step = state.step;
    let mut last = None;
    while state.step < cfg.train.steps {
        let loss = state.train_step(&batcher.next_batch())?;
        writeln!(log, "{},{loss}", state.step).map_err(|e| CliError::io(loss_path.display(), e))?;
        last = Some(loss);
        let every = cfg.train.checkpoint_every;
        if every > 0 && state.step % every == 0 {
            save_checkpoint(
                &state,
                &out.join(format!("checkpoint-{:08}.bin", state.step)),
            )?;
        }
    }
    save_checkpoint(&state, &ckpt)?;
    Ok(format!(
        "ok command=train steps={} from={} last_loss={} dropped_lines={dropped}",
        state.step,
        start_step,
        last.map_or_else(|| "none".to_string(), |l| format!("{l:.6}"))
    ))
}

fn sample_options(
    cfg: &RunConfig,
    context: usize,
    constrained: bool,
) -> Result<SampleOptions, CliError> {
    let s = &cfg.sample;
    Ok(SampleOptions {
        temperature: s.temperature,
        top_k: (s.top_k > 0).then_some(s.top_k),
        top_p: s.top_p,
        max_tokens: s.max_tokens.unwrap_or(context),
        constrained,
        seed: stream_seed(cfg.seed, "sample"),
        template: s.template()?,
        special_words: cfg.corpus.special_words,
        mask_points: cfg.corpus.mask_points as u16,
    })
}

pub enum PromptSource {
    Generator,
    Single(String),
    File(PathBuf),
}

pub fn sample_cmd(cfg: &RunConfig, prompts: PromptSource) -> Result<String, CliError> {
    let out = &cfg.out_dir;
    let vocab = load_vocab(cfg)?;
    let state = load_checkpoint_expecting(&out.join(CHECKPOINT_FILE), vocab.len())?;
    let params = &state.params;
    let opts = sample_options(cfg, params.config().context_window, cfg.sample.constrained)?;
    let results = match prompts {
        PromptSource::Single(p) => {
            batch_sample(params, &vocab, None, &p, cfg.sample.count.max(1), &opts)?
        }
        PromptSource::Generator => {
            let cats: Vec<String> = vocab.categories().iter().map(|c| c.to_string()).collect();
            let g = PromptGenerator::new(cats, cfg.sample.per_category);
            if g.total() == 0 {
                return Err(CliError::Config("no categories to prompt".into()));
            }
            batch_sample(params, &vocab, Some(&g), "", g.total(), &opts)?
        }
        PromptSource::File(path) => {
            let text = read(&path)?;
            let mut v = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let o = SampleOptions {
                    seed: sample_seed(opts.seed, i),
                    ..opts.clone()
                };
                let s = sample(params, &vocab, line, &o)?;
                let meta = SampleMeta {
                    line: i,
                    prompt: line.to_string(),
                    requested: None,
                    options: o,
                    reached_eos: s.reached_eos,
                };
                v.push((s, meta));
            }
            v
        }
    };
    let mut texts = String::new();
    let mut metas = String::new();
    for (s, m) in &results {
        texts.push_str(&s.text);
        texts.push('\n');
        metas.push_str(&serde_json::to_string(m).expect("metadata serializes"));
        metas.push('\n');
    }
    write(&out.join(SAMPLES_FILE), texts)?;
    write(&out.join(SAMPLES_META_FILE), metas)?;
    let complete = results.iter().filter(|(s, _)| s.reached_eos).count();
    Ok(format!(
        "ok command=sample sequences={} reached_eos={complete}",
        results.len()
    ))
}

pub fn decode_cmd(cfg: &RunConfig, input: Option<PathBuf>) -> Result<String, CliError> {
    let out = &cfg.out_dir;
    let input = input.unwrap_or_else(|| out.join(SAMPLES_FILE));
    let text = read(&input)?;
    let (mut n, mut format, mut matching) = (0usize, 0usize, 0usize);
    let (mut v_format, mut v_matching) = (0usize, 0usize);
    let mut records = Vec::new();
    let parse_opts = ParseOptions {
        closed_categories: None,
        mask_points: cfg.corpus.mask_points,
    };
    for line in text.lines() {
        n += 1;
        let (rec, report) = parse_with(line, &parse_opts);
        format += usize::from(report.format_ok);
        matching += usize::from(report.format_ok && report.matching_ok);
        for v in &report.violations {
            match v.kind {
                ViolationKind::Format => v_format += 1,
                ViolationKind::Matching => v_matching += 1,
            }
        }
        records.extend(rec);
    }
    ensure_dir(out)?;
    write(&out.join(LAYOUTS_FILE), layout_lines(&records))?;
    let summary = format!(
        "sequences = {n}\nformat_ok = {format}\nmatching_ok = {matching}\ndecoded = {}\nformat_violations = {v_format}\nmatching_violations = {v_matching}\n",
        records.len()
    );
    write(&out.join(DECODE_REPORT_FILE), &summary)?;
    Ok(format!(
        "ok command=decode sequences={n} decoded={}",
        records.len()
    ))
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn write_priors(dir: &Path, priors: &PriorSet) -> Result<(), CliError> {
    ensure_dir(dir)?;
    for (c, p) in &priors.location {
        write(
            &dir.join(format!("location_{}.txt", slug(c))),
            p.to_text() + "\n",
        )?;
        write(
            &dir.join(format!("location_{}.svg", slug(c))),
            render_heatmap(p, 256),
        )?;
    }
    for (c, p) in &priors.shape {
        write(
            &dir.join(format!("shape_{}.txt", slug(c))),
            p.to_text() + "\n",
        )?;
        write(
            &dir.join(format!("shape_{}.svg", slug(c))),
            render_histogram(p, 300, 120),
        )?;
    }
    write(&dir.join("relation.txt"), priors.relation.to_text() + "\n")
}

pub fn eval_cmd(cfg: &RunConfig, ground_truth: Option<PathBuf>) -> Result<String, CliError> {
    let out = &cfg.out_dir;
    let gt_path = ground_truth.unwrap_or_else(|| out.join(RECORDS_FILE));
    let truth = read_layouts(&gt_path)?;
    let vocab = load_vocab(cfg)?;
    let state = load_checkpoint_expecting(&out.join(CHECKPOINT_FILE), vocab.len())?;
    let categories: Vec<String> = if cfg.eval.categories.is_empty() {
        truth
            .iter()
            .flat_map(|r| r.instances.iter().map(|i| i.category.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    } else {
        cfg.eval.categories.clone()
    };
    if let Some(c) = categories.iter().find(|c| vocab.id(c).is_none()) {
        return Err(CliError::Config(format!(
            "category '{c}' is not in the vocabulary"
        )));
    }
    let mut source = ModelSource {
        params: &state.params,
        vocab: &vocab,
        options: sample_options(
            cfg,
            state.params.config().context_window,
            cfg.eval.constrained,
        )?,
    };
    let generator = PromptGenerator::new(categories, cfg.eval.per_category);
    let opts = EvalOptions {
        priors: PriorOptions {
            grid: cfg.eval.grid,
            bins: cfg.eval.bins,
            epsilon: cfg.eval.epsilon,
            multiplicity: cfg.eval.multiplicity,
        },
        per_category: cfg.eval.per_category,
        retry_factor: cfg.eval.retry_factor,
        require_minimum: cfg.eval.require_minimum,
        seed: stream_seed(cfg.seed, "eval"),
    };
    let (report, p, q) = evaluate(&mut source, &truth, &generator, &opts)?;
    write(&out.join(EVAL_REPORT_FILE), report.to_text())?;
    write_priors(&out.join("priors").join("ground_truth"), &p)?;
    write_priors(&out.join("priors").join("model"), &q)?;
    let mut s = String::from("ok command=eval");
    let f = |v: Option<f64>| v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"));
    let _ = write!(
        s,
        " kl_location={} kl_shape={} kl_relation={} format={:.4} matching={:.4}",
        f(report.kl.location),
        f(report.kl.shape),
        f(report.kl.relation),
        report.quality.format,
        report.quality.matching
    );
    Ok(s)
}

pub fn render_cmd(cfg: &RunConfig, input: Option<PathBuf>) -> Result<String, CliError> {
    let out = &cfg.out_dir;
    let input = input.unwrap_or_else(|| out.join(LAYOUTS_FILE));
    let records = read_layouts(&input)?;
    let style = RenderStyle {
        stroke_width: cfg.render.stroke_width,
        font_size: cfg.render.font_size,
        ..Default::default()
    };
    let dir = out.join("render");
    ensure_dir(&dir)?;
    let mut files = BTreeSet::new();
    for r in &records {
        let name = format!("{}.svg", record_hash(r));
        write(&dir.join(&name), render_svg(r, &style))?;
        files.insert(name);
    }
    Ok(format!(
        "ok command=render records={} files={}",
        records.len(),
        files.len()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder() {
        assert_eq!(allocate(1000, &[0.5, 0.5]), [500, 500]);
        assert_eq!(allocate(10, &[1.0 / 3.0; 3]), [4, 3, 3]);
        assert_eq!(allocate(7, &[0.15, 0.25, 0.6]), [1, 2, 4]);
        assert_eq!(allocate(0, &[0.3, 0.7]), [0, 0]);
        for total in 0..50 {
            assert_eq!(
                allocate(total, &[0.2, 0.3, 0.5]).iter().sum::<usize>(),
                total
            );
        }
    }

    #[test]
    fn streams_are_distinct_and_stable() {
        assert_eq!(stream_seed(1, "train"), stream_seed(1, "train"));
        assert_ne!(stream_seed(1, "train"), stream_seed(1, "sample"));
        assert_ne!(stream_seed(1, "train"), stream_seed(2, "train"));
    }
}
