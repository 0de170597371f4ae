mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{schema, tiny_config};
use mer_core::report::{
    sha256_hex, RunManifest, Summary, BASELINE_HEADER, PER_QUERY_HEADER, SUMMARY_SCHEMA,
};
use mer_core::trainer::TrainConfig;
use serde_json::Value;
use tempfile::TempDir;

fn mer(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mer"))
        .current_dir(cwd)
        .args(args)
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> Output {
    let out = mer(cwd, args);
    assert!(
        out.status.success(),
        "mer {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Workspace {
    dir: TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new(cfg: &TrainConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.cfg");
        std::fs::write(&config, cfg.to_text()).unwrap();
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, verb: &str, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let mut args = vec![
            verb,
            "--config",
            self.config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        mer(self.dir.path(), &args)
    }

    fn run_ok(&self, verb: &str, out: &str, extra: &[&str]) {
        let o = self.run(verb, out, extra);
        assert!(
            o.status.success(),
            "{verb}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

fn listing(dir: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p.clone());
            }
            out.insert(p.strip_prefix(dir).unwrap().to_path_buf());
        }
    }
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mer(
        tmp.path(),
        &["train", "--config", "missing.cfg", "--out", "o"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cfg"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn unknown_flags_and_bad_values_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--out", "o", "--bogus"][..],
        &["train"][..],
        &["train", "--out", "o", "--lambda", "1.5"][..],
        &["train", "--out", "o", "--loss-mode", "triplet"][..],
        &["train", "--out", "o", "--encoder-music", "cnn"][..],
    ] {
        assert_eq!(mer(tmp.path(), args).status.code(), Some(1), "{args:?}");
    }
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "# mer-config v1\nlearning_rat = 0.1\n").unwrap();
    let out = mer(
        tmp.path(),
        &["train", "--config", cfg.to_str().unwrap(), "--out", "o"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn help_lists_every_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let top = ok(tmp.path(), &["--help"]);
    let text = String::from_utf8_lossy(&top.stdout);
    for verb in [
        "prepare", "synth", "train", "evaluate", "sweep", "baseline", "report",
    ] {
        assert!(text.contains(verb), "{verb}");
        let help = ok(tmp.path(), &[verb, "--help"]);
        let help = String::from_utf8_lossy(&help.stdout);
        for flag in [
            "--config",
            "--out",
            "--seed",
            "--sessions",
            "--lambda",
            "--alpha",
            "--loss-mode",
            "--encoder-music",
            "--encoder-emotion",
            "--dataset",
            "--fraction",
        ] {
            assert!(help.contains(flag), "{verb} help lacks {flag}");
        }
    }
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &["synth", "--n", "250", "--seed", "7", "--out", "a"],
    );
    ok(
        tmp.path(),
        &["synth", "--n", "250", "--seed", "7", "--out", "b"],
    );
    ok(
        tmp.path(),
        &["synth", "--n", "250", "--seed", "8", "--out", "c"],
    );
    let read = |d: &str| {
        let root = tmp.path().join(d);
        listing(&root)
            .into_iter()
            .filter(|p| root.join(p).is_file())
            .map(|p| (p.clone(), std::fs::read(root.join(p)).unwrap()))
            .collect::<Vec<_>>()
    };
    let (a, b, c) = (read("a"), read("b"), read("c"));
    assert_eq!(
        a.iter().filter(|(p, _)| p.starts_with("music")).count(),
        250
    );
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn sweep_has_eleven_rows_in_tenth_steps() {
    let mut cfg = tiny_config();
    cfg.sessions = 1;
    cfg.epochs = 2;
    let ws = Workspace::new(&cfg);
    ws.run_ok("sweep", "sweep", &[]);
    let rows = csv_rows(&ws.path("sweep/sweep.csv"));
    let lambdas: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(
        lambdas,
        ["0.0", "0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9", "1.0"]
    );
    let json: Vec<Value> =
        serde_json::from_str(&std::fs::read_to_string(ws.path("sweep/sweep.json")).unwrap())
            .unwrap();
    assert_eq!(json.len(), 11);
}

#[test]
fn report_files_match_their_schemas() {
    let cfg = tiny_config();
    let ws = Workspace::new(&cfg);
    ws.run_ok("report", "rep", &[]);

    let text = std::fs::read_to_string(ws.path("rep/summary.json")).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    let schema_text = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/summary.schema.json"),
    )
    .unwrap();
    let schema_doc: Value = serde_json::from_str(&schema_text).unwrap();
    assert_eq!(schema_doc["$id"], SUMMARY_SCHEMA);
    schema::validate(&schema_doc, &doc).unwrap();
    let summary: Summary = serde_json::from_str(&text).unwrap();
    assert_eq!(mer_core::report::to_json(&summary), text);
    assert_eq!(summary.m2e.sessions.len(), cfg.sessions);

    // The validator is strict: extra, missing and ill-typed fields fail.
    let mut extra = doc.clone();
    extra["m2e"]["median"] = Value::from(0.5);
    assert!(schema::validate(&schema_doc, &extra).is_err());
    let mut missing = doc.clone();
    missing["e2m"].as_object_mut().unwrap().remove("ar");
    assert!(schema::validate(&schema_doc, &missing).is_err());
    let mut wrong = doc.clone();
    wrong["m2e"]["sessions"][0]["queries"] = Value::from(2.5);
    assert!(schema::validate(&schema_doc, &wrong).is_err());
    let mut hash = doc.clone();
    hash["config_sha256"] = Value::from("ABC");
    assert!(schema::validate(&schema_doc, &hash).is_err());

    let per_query = std::fs::read_to_string(ws.path("rep/per_query.csv")).unwrap();
    assert_eq!(per_query.lines().next(), Some(PER_QUERY_HEADER));
    let queries: usize = summary
        .m2e
        .sessions
        .iter()
        .chain(&summary.e2m.sessions)
        .map(|s| s.queries)
        .sum();
    assert_eq!(per_query.lines().count() - 1, queries);
    assert_eq!(queries, 2 * cfg.sessions * 8);

    let trace = csv_rows(&ws.path("rep/loss_trace.csv"));
    assert_eq!(trace.len(), cfg.sessions * cfg.epochs);
}

#[test]
fn manifest_alone_reconstructs_the_run() {
    let ws = Workspace::new(&tiny_config());
    ws.run_ok("train", "first", &["--seed", "5", "--lambda", "0.3"]);
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(ws.path("first/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest.verb, "train");
    assert_eq!(manifest.seed, 5);
    assert_eq!(
        manifest.config_sha256,
        sha256_hex(manifest.config.as_bytes())
    );
    for (name, digest) in &manifest.files {
        assert_eq!(
            &sha256_hex(&std::fs::read(ws.path("first").join(name)).unwrap()),
            digest,
            "{name}"
        );
    }
    let cfg = TrainConfig::parse(&manifest.config).unwrap();
    assert_eq!((cfg.seed, cfg.lambda), (5, 0.3));

    let replay = ws.path("replay.cfg");
    std::fs::write(&replay, &manifest.config).unwrap();
    let out = ws.path("second");
    ok(
        ws.dir.path(),
        &[
            "train",
            "--config",
            replay.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    for name in ["checkpoint.json", "loss_trace.csv", "manifest.json"] {
        assert_eq!(
            std::fs::read(ws.path("first").join(name)).unwrap(),
            std::fs::read(out.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn train_then_evaluate_uses_the_held_out_split() {
    let cfg = tiny_config();
    let ws = Workspace::new(&cfg);
    ws.run_ok("train", "run", &[]);
    ws.run_ok("evaluate", "run", &[]);
    let summary: Summary =
        serde_json::from_str(&std::fs::read_to_string(ws.path("run/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary.m2e.sessions.len(), 1);
    assert_eq!(summary.m2e.sessions[0].queries, 8);
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(ws.path("run/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest.verb, "evaluate");
    assert!(manifest.files.contains_key("checkpoint.json"));

    // Without a checkpoint there is nothing to evaluate.
    let o = ws.run("evaluate", "empty", &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_dataset_is_a_data_error() {
    let ws = Workspace::new(&tiny_config());
    let manifest = ws.path("empty.txt");
    std::fs::write(
        &manifest,
        "# mer-manifest v1\ndataset=pmemo\nrange=unit\nprepared=true\n",
    )
    .unwrap();
    for verb in ["report", "train", "baseline"] {
        let o = ws.run(verb, verb, &["--dataset", manifest.to_str().unwrap()]);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{verb}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn unwritable_output_is_a_data_error() {
    let ws = Workspace::new(&tiny_config());
    std::fs::write(ws.path("blocker"), "not a directory").unwrap();
    let o = ws.run("train", "blocker/out", &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn commands_write_only_under_their_output_directory() {
    let ws = Workspace::new(&tiny_config());
    let before = listing(ws.dir.path());
    ws.run_ok("synth", "out/data", &[]);
    ws.run_ok(
        "train",
        "out/train",
        &[
            "--dataset",
            ws.path("out/data/manifest.txt").to_str().unwrap(),
        ],
    );
    ws.run_ok("baseline", "out/base", &[]);
    let after: BTreeSet<PathBuf> = listing(ws.dir.path())
        .into_iter()
        .filter(|p| !p.starts_with("out"))
        .collect();
    let mut expected = before;
    expected.remove(Path::new("out"));
    assert_eq!(after, expected);

    let rows = csv_rows(&ws.path("out/base/baselines.csv"));
    assert_eq!(
        std::fs::read_to_string(ws.path("out/base/baselines.csv"))
            .unwrap()
            .lines()
            .next(),
        Some(BASELINE_HEADER)
    );
    let names: BTreeSet<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(
        names,
        ["RegBiGRU-E2M", "RegBiGRU-M2E", "RegMLP-E2M", "RegMLP-M2E"]
            .into_iter()
            .collect()
    );
}

#[test]
fn prepare_matches_independently_computed_checksums() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let tmp = tempfile::tempdir().unwrap();
    for name in ["pmemo", "deam"] {
        let raw = fixtures.join(name).join("raw/manifest.txt");
        let out = tmp.path().join(name);
        ok(
            tmp.path(),
            &[
                "prepare",
                "--dataset",
                raw.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
        );
        let expected =
            std::fs::read_to_string(fixtures.join(name).join("expected.sha256")).unwrap();
        let mut listed = BTreeSet::new();
        for line in expected.lines() {
            let (digest, path) = line.split_once("  ").unwrap();
            assert_eq!(
                sha256_hex(&std::fs::read(out.join(path)).unwrap()),
                digest,
                "{name}/{path}"
            );
            listed.insert(PathBuf::from(path));
        }
        let written: BTreeSet<PathBuf> = listing(&out)
            .into_iter()
            .filter(|p| out.join(p).is_file() && p != Path::new("manifest.json"))
            .collect();
        assert_eq!(written, listed, "{name}: unexpected files");

        // A prepared dataset is not prepared twice.
        let again = mer(
            tmp.path(),
            &[
                "prepare",
                "--dataset",
                out.join("manifest.txt").to_str().unwrap(),
                "--out",
                "x",
            ],
        );
        assert_eq!(again.status.code(), Some(2));
    }
}
