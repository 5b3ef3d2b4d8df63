use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lorafuse::config::RunConfig;
use lorafuse::fusion::render;
use lorafuse::model::greedy_decode;
use lorafuse::pipeline::Layout;

const SMALL: &str = "\
synth_docs_per_domain = 30
model_dim = 12
clusters = 3
base_lr = 0.5
base_epochs = 4
lora_lr = 0.5
lora_epochs = 4
encoder_lr = 0.5
encoder_epochs = 4
doc_max_len = 32
";

struct Run {
    root: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        fs::write(root.path().join("small.conf"), SMALL).unwrap();
        Run { root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn cli(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_lorafuse"))
            .arg("--config")
            .arg(self.path("small.conf"))
            .arg("--model-dir")
            .arg(self.path("model"))
            .arg("--data-dir")
            .arg(self.path("data"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cli(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn config(&self) -> RunConfig {
        let mut cfg = RunConfig::from_file(&self.path("small.conf")).unwrap();
        cfg.model_dir = self.path("model");
        cfg.data_dir = self.path("data");
        cfg
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(tree(&path));
        } else {
            let bytes = fs::read(&path).unwrap();
            out.push((path.strip_prefix(dir).unwrap().to_path_buf(), bytes));
        }
    }
    out.sort();
    out
}

#[test]
fn gen_corpus_is_deterministic_with_stratified_counts() {
    let (a, b) = (Run::new(), Run::new());
    a.ok(&["gen-corpus"]);
    b.ok(&["gen-corpus"]);
    assert_eq!(tree(&a.path("data")), tree(&b.path("data")));
    let counts: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path("data/splits.json")).unwrap()).unwrap();
    for (split, want) in [("train", 24), ("valid", 3), ("test", 3)] {
        let per_domain = counts[split].as_object().unwrap();
        assert_eq!(per_domain.len(), 4);
        assert!(
            per_domain.values().all(|n| n.as_u64() == Some(want)),
            "{split}: {per_domain:?}"
        );
    }
    let lines = fs::read_to_string(a.path("data/corpus.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 120);
}

#[test]
fn unknown_configuration_key_exits_with_two() {
    let run = Run::new();
    let out = run.cli(&["--set", "no_such_key=1", "gen-corpus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn eval_scores_identical_files_at_one_hundred() {
    let run = Run::new();
    let texts = "the cat sat on the mat\na b c d e f\n";
    fs::write(run.path("out.txt"), texts).unwrap();
    let csv = run.ok(&[
        "eval",
        "--outputs",
        run.path("out.txt").to_str().unwrap(),
        "--references",
        run.path("out.txt").to_str().unwrap(),
        "--metrics",
        "rouge1,s_bleu,d_bleu",
        "--json",
        run.path("summary.json").to_str().unwrap(),
    ]);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        let value: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((value - 100.0).abs() < 1e-9, "{row}");
    }
    assert!(fs::read_to_string(run.path("summary.json"))
        .unwrap()
        .contains("\"documents\": 2"));
}

#[test]
fn sari_without_sources_exits_with_two() {
    let run = Run::new();
    fs::write(run.path("out.txt"), "a b\n").unwrap();
    let p = run.path("out.txt");
    let out = run.cli(&[
        "eval",
        "--outputs",
        p.to_str().unwrap(),
        "--references",
        p.to_str().unwrap(),
        "--metrics",
        "sari",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("SARI"));
}

#[test]
fn diverging_training_exits_with_four() {
    let run = Run::new();
    let out = run.cli(&["--set", "base_lr=1000", "train", "base"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("did not decrease"));
}

#[test]
fn trained_pipeline_end_to_end() {
    let run = Run::new();
    let log = run.ok(&["train", "all"]);
    assert!(log.lines().any(|l| l.starts_with("base: loss")));
    let model_dir = run.path("model");
    let first = tree(&model_dir);
    assert_eq!(fs::read_dir(model_dir.join("adapters")).unwrap().count(), 2 * 4);
    assert_eq!(fs::read_dir(model_dir.join("signatures")).unwrap().count(), 2 * 4);

    // staged retraining reproduces the same bytes
    for stage in ["base", "domain-loras", "unified-lora", "encoder", "signatures"] {
        run.ok(&["train", stage]);
    }
    assert_eq!(tree(&model_dir), first);

    // beta = 0 decodes with the unified adapter alone
    let cfg = run.config();
    let artifacts = Layout::new(&cfg).load_all().unwrap();
    let data = lorafuse::pipeline::prepare_data(&cfg).unwrap();
    let sources: Vec<String> = data.splits.test.records().map(|r| r.source.clone()).collect();
    fs::write(run.path("sources.txt"), sources.join("\n") + "\n").unwrap();
    let generated = run.ok(&[
        "--beta",
        "0",
        "paraphrase",
        "--input",
        run.path("sources.txt").to_str().unwrap(),
    ]);
    let unified = artifacts.registry.unified().unwrap().dense_delta();
    let want: Vec<String> = sources
        .iter()
        .map(|s| {
            let ids = greedy_decode(
                &artifacts.model,
                Some(&unified),
                &artifacts.model.vocab().prompt(s),
                cfg.doc_max_len,
            )
            .unwrap();
            render(&artifacts.model, &ids)
        })
        .collect();
    assert_eq!(generated.lines().collect::<Vec<_>>(), want);
    assert_eq!(
        run.ok(&["paraphrase", "--input", run.path("sources.txt").to_str().unwrap()]),
        run.ok(&["paraphrase", "--input", run.path("sources.txt").to_str().unwrap()])
    );

    let table = run.ok(&["ablate", "--output", run.path("ablation.csv").to_str().unwrap()]);
    assert!(table.contains("full"));
    let csv = fs::read_to_string(run.path("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);

    let trained = run.ok(&["export-embeddings", "--split", "test"]);
    let initial = run.ok(&["export-embeddings", "--split", "test", "--initial"]);
    let rows: Vec<&str> = trained.lines().collect();
    assert_eq!(rows.len(), 1 + data.splits.test.len());
    assert!(rows.iter().all(|r| r.split(',').count() == cfg.encoder_dim + 2));
    assert_ne!(trained, initial);
}
