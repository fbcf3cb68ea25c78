#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

use scaffold_core::data::{write_scaffold_jsonl, CitationInstance, LabelSet};
use scaffold_core::synthetic::{scaffold_corpus, ScaffoldCorpusSpec};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_citescaffold"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("failed to launch citescaffold")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn fixture_corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/scaffold_corpus.jsonl")
}

pub fn write_citations(path: &Path, data: &[CitationInstance], labels: &LabelSet) {
    let lines: Vec<String> = data
        .iter()
        .map(|i| json!({"id": i.id, "string": i.text, "label": labels.name(i.label)}).to_string())
        .collect();
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

/// Writes a small synthetic run (main splits, both auxiliary sets and a
/// config with tiny dimensions) into `dir`; returns the config path.
pub fn small_run(dir: &Path, extra_train: &str) -> PathBuf {
    let spec = ScaffoldCorpusSpec {
        train: 48,
        dev: 24,
        test: 24,
        scaffold: 96,
        seed: 5,
        ..Default::default()
    };
    let c = scaffold_corpus(&spec);
    write_citations(&dir.join("train.jsonl"), &c.train, &c.labels);
    write_citations(&dir.join("dev.jsonl"), &c.dev, &c.labels);
    write_citations(&dir.join("test.jsonl"), &c.test, &c.labels);
    write_scaffold_jsonl(&dir.join("worthiness.jsonl"), &c.worthiness).unwrap();
    write_scaffold_jsonl(&dir.join("section.jsonl"), &c.section).unwrap();
    let config = dir.join("run.toml");
    std::fs::write(
        &config,
        format!(
            "[data]\nlabels = \"scicite\"\ntrain = \"train.jsonl\"\ndev = \"dev.jsonl\"\ntest = \"test.jsonl\"\n\
             worthiness = \"worthiness.jsonl\"\nsection = \"section.jsonl\"\n\n\
             [train]\nembedding_dim = 8\nd2 = 6\nmlp_hidden = 6\nmax_epochs = 4\npatience = 2\n{extra_train}\n\n\
             [output]\ndir = \"out\"\n"
        ),
    )
    .unwrap();
    config
}
