use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use layoutprior::grammar::parse;
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_layoutprior"))
}

fn run(args: &[&str], config: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], config: &Path) -> String {
    let out = run(args, config);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// COCO-style box file with `images` images, two or three boxes each.
fn box_fixture(path: &Path, images: u64, cats: [&str; 2]) {
    let mut anns = Vec::new();
    for id in 1..=images {
        for j in 0..(2 + id % 2) {
            let x = 10.0 + 37.0 * j as f64 + id as f64;
            anns.push(json!({
                "image_id": id,
                "category_id": 1 + (j % 2),
                "bbox": [x, 20.0 + 11.0 * j as f64, 40.0 + id as f64, 30.0 + 5.0 * j as f64],
            }));
        }
    }
    let file = json!({
        "images": (1..=images).map(|id| json!({"id": id, "width": 640, "height": 480})).collect::<Vec<_>>(),
        "annotations": anns,
        "categories": [{"id": 1, "name": cats[0]}, {"id": 2, "name": cats[1]}],
    });
    fs::write(path, serde_json::to_string(&file).unwrap()).unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        box_fixture(&root.join("a.json"), 5, ["cat", "dog"]);
        box_fixture(&root.join("b.json"), 4, ["bus", "car"]);
        Fixture { _dir: dir, root }
    }

    /// Writes a config named `name` with output directory `out` and extra TOML appended.
    fn config(&self, name: &str, out: &str, datasets: &str, extra: &str) -> PathBuf {
        let text = format!(
            "seed = 7\nout_dir = \"{out}\"\n{extra}\n{datasets}\n\
             [model]\ncontext_window = 256\nlayers = 1\nheads = 2\nembed_dim = 16\n"
        );
        let path = self.root.join(name);
        fs::write(&path, text).unwrap();
        path
    }
}

const ONE_DATASET: &str =
    "[[dataset]]\nname = \"a\"\npath = \"a.json\"\nkind = \"box\"\nproportion = 1.0\n";
const TWO_DATASETS: &str =
    "[[dataset]]\nname = \"a\"\npath = \"a.json\"\nkind = \"box\"\nproportion = 0.5\n\
     [[dataset]]\nname = \"b\"\npath = \"b.json\"\nkind = \"box\"\nproportion = 0.5\n";

const SMALL_RUN: &str = "[train]\nsteps = 3\nbatch_size = 4\n\
     [sample]\nper_category = 2\n\
     [eval]\nper_category = 3\nretry_factor = 2\nconstrained = true\ngrid = 8\nbins = 5\n";

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn equal_proportions_split_exactly() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "out", TWO_DATASETS, "[corpus]\nlines = 1000\n");
    ok(&["ingest"], &cfg);
    let m = manifest(&f.root.join("out"));
    let mut per: BTreeMap<String, usize> = BTreeMap::new();
    for e in m["entries"].as_array().unwrap() {
        *per.entry(e["dataset"].as_str().unwrap().to_string())
            .or_default() += 1;
    }
    assert_eq!(per["a"], 500);
    assert_eq!(per["b"], 500);
    let lines = fs::read_to_string(f.root.join("out/corpus.txt")).unwrap();
    assert_eq!(lines.lines().count(), 1000);
}

#[test]
fn five_image_fixture_gives_five_parseable_lines() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "out", ONE_DATASET, "");
    ok(&["ingest"], &cfg);
    let corpus = fs::read_to_string(f.root.join("out/corpus.txt")).unwrap();
    let lines: Vec<&str> = corpus.lines().collect();
    assert_eq!(lines.len(), 5);
    for l in lines {
        let (rec, report) = parse(l);
        assert!(report.format_ok && report.matching_ok, "{l}: {report:?}");
        assert!(rec.is_some());
    }
    let vocab = fs::read_to_string(f.root.join("out/vocab.txt")).unwrap();
    assert!(vocab.lines().any(|t| t == "cat"));
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn pipeline(cfg: &Path) {
    for cmd in ["ingest", "train", "sample", "decode", "eval", "render"] {
        ok(&[cmd], cfg);
    }
}

#[test]
fn full_pipeline_is_byte_deterministic() {
    let f = Fixture::new();
    let c1 = f.config("one.toml", "run1", TWO_DATASETS, SMALL_RUN);
    let c2 = f.config("two.toml", "run2", TWO_DATASETS, SMALL_RUN);
    pipeline(&c1);
    pipeline(&c2);
    let a = files(&f.root.join("run1"));
    let b = files(&f.root.join("run2"));
    for name in [
        "corpus.txt",
        "vocab.txt",
        "manifest.json",
        "checkpoint.bin",
        "loss.csv",
        "samples.txt",
        "samples.meta.jsonl",
        "layouts.jsonl",
        "eval_report.txt",
    ] {
        assert!(a.contains_key(Path::new(name)), "missing {name}");
    }
    assert!(a.keys().any(|k| k.starts_with("render")));
    assert!(a.keys().any(|k| k.starts_with("priors")));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(v == &b[k], "{} differs", k.display());
    }
}

#[test]
fn seed_override_changes_the_corpus() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "out", TWO_DATASETS, "[corpus]\nlines = 40\n");
    ok(&["ingest"], &cfg);
    let first = fs::read(f.root.join("out/corpus.txt")).unwrap();
    let out2 = f.root.join("out2");
    let o = bin()
        .args(["ingest", "--seed", "8", "--out"])
        .arg(&out2)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_ne!(first, fs::read(out2.join("corpus.txt")).unwrap());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let f = Fixture::new();
    let short = f.config(
        "short.toml",
        "res",
        ONE_DATASET,
        "[train]\nsteps = 4\nbatch_size = 2\n",
    );
    let resumed = f.config(
        "resumed.toml",
        "res",
        ONE_DATASET,
        "[train]\nsteps = 8\nbatch_size = 2\nresume = true\ncheckpoint_every = 2\n",
    );
    let straight = f.config(
        "straight.toml",
        "full",
        ONE_DATASET,
        "[train]\nsteps = 8\nbatch_size = 2\n",
    );
    ok(&["ingest"], &short);
    ok(&["train"], &short);
    let summary = ok(&["train"], &resumed);
    assert!(summary.contains("steps=8 from=4"), "{summary}");
    ok(&["ingest"], &straight);
    ok(&["train"], &straight);

    let log = fs::read_to_string(f.root.join("res/loss.csv")).unwrap();
    let steps: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5", "6", "7", "8"]);
    assert_eq!(
        log,
        fs::read_to_string(f.root.join("full/loss.csv")).unwrap()
    );
    assert_eq!(
        fs::read(f.root.join("res/checkpoint.bin")).unwrap(),
        fs::read(f.root.join("full/checkpoint.bin")).unwrap()
    );
    assert!(f.root.join("res/checkpoint-00000006.bin").exists());
    assert!(f.root.join("res/checkpoint-00000008.bin").exists());
}

#[test]
fn zero_step_training_writes_the_initial_checkpoint() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "out", ONE_DATASET, "[train]\nsteps = 0\n");
    ok(&["ingest"], &cfg);
    let summary = ok(&["train"], &cfg);
    assert!(summary.contains("steps=0"), "{summary}");
    assert!(f.root.join("out/checkpoint.bin").exists());
    let log = fs::read_to_string(f.root.join("out/loss.csv")).unwrap();
    assert_eq!(log, "step,loss\n");
}

#[test]
fn decoding_an_empty_file_succeeds() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "out", ONE_DATASET, "");
    let empty = f.root.join("empty.txt");
    fs::write(&empty, "").unwrap();
    let s = ok(&["decode", "--input", empty.to_str().unwrap()], &cfg);
    assert!(s.contains("sequences=0"), "{s}");
    assert_eq!(
        fs::read_to_string(f.root.join("out/layouts.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn decode_reports_violations_and_keeps_valid_lines() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "out", ONE_DATASET, "");
    ok(&["ingest"], &cfg);
    let corpus = fs::read_to_string(f.root.join("out/corpus.txt")).unwrap();
    let input = f.root.join("mixed.txt");
    fs::write(&input, format!("{}box; oops\n", corpus)).unwrap();
    let s = ok(&["decode", "--input", input.to_str().unwrap()], &cfg);
    assert!(s.contains("sequences=6 decoded=5"), "{s}");
    let report = fs::read_to_string(f.root.join("out/decode_report.txt")).unwrap();
    assert!(report.contains("format_ok = 5"), "{report}");
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn failures_map_to_exit_codes() {
    let f = Fixture::new();
    let usage = bin().arg("ingest").output().unwrap();
    assert_eq!(code(&usage), 2);

    let missing = run(&["ingest"], &f.root.join("nope.toml"));
    assert_eq!(code(&missing), 3);
    let stderr = String::from_utf8(missing.stderr).unwrap();
    assert!(
        stderr.starts_with("error family=config code=3 message="),
        "{stderr}"
    );

    let bad_sum = f.config(
        "sum.toml",
        "out",
        "[[dataset]]\nname = \"a\"\npath = \"a.json\"\nkind = \"box\"\nproportion = 0.7\n",
        "",
    );
    assert_eq!(code(&run(&["ingest"], &bad_sum)), 3);

    let cfg = f.config("c.toml", "out", ONE_DATASET, "");
    let absent = f.root.join("absent.txt");
    assert_eq!(
        code(&run(&["decode", "--input", absent.to_str().unwrap()], &cfg)),
        4
    );

    fs::write(f.root.join("broken.json"), "{ not json").unwrap();
    let broken = f.config(
        "broken.toml",
        "out",
        "[[dataset]]\nname = \"x\"\npath = \"broken.json\"\nkind = \"box\"\nproportion = 1.0\n",
        "",
    );
    let o = run(&["ingest"], &broken);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8(o.stderr).unwrap().contains("family=data"));

    let fresh = f.config("fresh.toml", "fresh", ONE_DATASET, "");
    assert_eq!(code(&run(&["train"], &fresh)), 6);

    ok(&["ingest"], &fresh);
    assert_eq!(code(&run(&["sample"], &fresh)), 7);
}

#[test]
fn sampling_with_a_single_prompt_respects_it() {
    let f = Fixture::new();
    let cfg = f.config(
        "c.toml",
        "out",
        ONE_DATASET,
        "[train]\nsteps = 2\nbatch_size = 2\n[sample]\ncount = 3\n",
    );
    ok(&["ingest"], &cfg);
    ok(&["train"], &cfg);
    let prompt = "box; multiple instances; small; 2; 0; cat,";
    ok(&["sample", "--prompt", prompt], &cfg);
    let samples = fs::read_to_string(f.root.join("out/samples.txt")).unwrap();
    assert_eq!(samples.lines().count(), 3);
    for l in samples.lines() {
        assert!(l.starts_with(prompt), "{l}");
        let (_, report) = parse(l);
        assert!(report.format_ok, "{l}: {report:?}");
    }
    let meta = fs::read_to_string(f.root.join("out/samples.meta.jsonl")).unwrap();
    assert_eq!(meta.lines().count(), 3);

    let illegal = run(&["sample", "--prompt", "box; box;"], &cfg);
    assert_eq!(code(&illegal), 8);
}
