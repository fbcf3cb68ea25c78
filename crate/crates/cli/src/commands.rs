use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use serde_json::{json, Value};

use scaffold_core::annotate::{aggregate_pipeline, read_annotations_jsonl, read_gold_jsonl};
use scaffold_core::checkpoint::Checkpoint;
use scaffold_core::checks::{self, Scope};
use scaffold_core::data::{
    encode_citations, load_contextual_sidecar, read_citations_jsonl, read_texts_jsonl, tokenize,
    write_scaffold_jsonl, LabelSet, ScaffoldInstance, Sidecar,
};
use scaffold_core::eval::{export_attention, per_class_prf, ClassificationReport};
use scaffold_core::model::{Example, ScaffoldModel, TaskId};
use scaffold_core::scaffold::{make_section_dataset, make_worthiness_dataset, read_corpus_jsonl};
use scaffold_core::trainer::{self, GridMode, GridSpec, TrainData, TrainHistory};

use crate::config::RunConfig;
use crate::pipeline::{prepare, Prepared};
use crate::{CheckScope, GridModeArg, ScaffoldTask};

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn write_jsonl(path: &Path, rows: impl IntoIterator<Item = Value>) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

fn report(model: &ScaffoldModel, data: &[Example]) -> anyhow::Result<ClassificationReport> {
    let preds = trainer::predict_all(model, data)?;
    let golds: Vec<usize> = data.iter().map(|e| e.label).collect();
    Ok(per_class_prf(&golds, &preds, &model.tasks.main().labels)?)
}

fn write_report(dir: &Path, stem: &str, r: &ClassificationReport) -> anyhow::Result<()> {
    write_file(&dir.join(format!("{stem}.txt")), r.to_string())?;
    write_json(&dir.join(format!("{stem}.json")), r)
}

fn train_data<'d>(p: &'d Prepared, scaffolds: &'d [&'d [Example]]) -> TrainData<'d> {
    TrainData {
        main: &p.train,
        scaffolds,
        dev: &p.dev,
    }
}

/// Log layout: a header line carrying everything run-dependent (wall-clock
/// start, per-epoch seconds), then one deterministic line per epoch, then a
/// summary line.
fn write_train_log(
    path: &Path,
    cfg: &RunConfig,
    model: &ScaffoldModel,
    history: &TrainHistory,
    started: u64,
) -> anyhow::Result<()> {
    let task_names: Vec<&str> = model.tasks.iter().map(|(_, t)| t.name.as_str()).collect();
    let header = json!({
        "seed": cfg.train.seed,
        "started_unix": started,
        "epoch_seconds": history.epochs.iter().map(|e| e.seconds).collect::<Vec<_>>(),
        "config": cfg,
    });
    let epochs = history.epochs.iter().map(|e| {
        let losses: serde_json::Map<String, Value> = task_names
            .iter()
            .zip(&e.train_loss)
            .map(|(n, l)| (n.to_string(), json!(l)))
            .collect();
        json!({"epoch": e.epoch, "train_loss": losses, "dev_macro_f1": e.dev_macro_f1})
    });
    let summary = json!({"best_epoch": history.best_epoch, "best_dev_f1": history.best_dev_f1});
    write_jsonl(
        path,
        std::iter::once(header).chain(epochs).chain(std::iter::once(summary)),
    )
}

pub fn train(config: &Path, overrides: &[String]) -> anyhow::Result<ExitCode> {
    let cfg = RunConfig::load(config, overrides)?;
    cfg.check_inputs()?;
    println!("seed {}", cfg.train.seed);
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let data = prepare(&cfg)?;
    let mut model = data.model(&cfg.train)?;
    let scaffolds = [data.worthiness.as_slice(), data.section.as_slice()];
    let history = trainer::train(&mut model, train_data(&data, &scaffolds), &cfg.train, |e| {
        println!("epoch {:>3}  dev macro F1 {:.1}", e.epoch, 100.0 * e.dev_macro_f1);
    })?;
    println!(
        "best epoch {} with dev macro F1 {:.1}",
        history.best_epoch,
        100.0 * history.best_dev_f1
    );

    let out = &cfg.output.dir;
    create_dir(out)?;
    Checkpoint {
        model: model.clone(),
        vocab: data.vocab.clone(),
        metadata: json!({
            "train": cfg.train,
            "best_epoch": history.best_epoch,
            "best_dev_f1": history.best_dev_f1,
        }),
    }
    .save(&out.join("model.ckpt"))?;
    write_train_log(&out.join("train_log.jsonl"), &cfg, &model, &history, started)?;
    write_report(out, "dev_report", &report(&model, &data.dev)?)?;
    if let Some(test) = &data.test {
        let r = report(&model, test)?;
        println!("test macro F1 {:.1}", 100.0 * r.macro_f1);
        write_report(out, "test_report", &r)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn load_sidecar(model: &ScaffoldModel, path: Option<&Path>) -> anyhow::Result<Option<Sidecar>> {
    match (model.config.sidecar_dim, path) {
        (0, None) => Ok(None),
        (0, Some(_)) => bail!("this model was trained without contextual vectors; drop --sidecar"),
        (_, None) => bail!("this model needs contextual vectors; pass --sidecar"),
        (dim, Some(p)) => {
            let s = load_contextual_sidecar(p)?;
            if s.dim != dim {
                bail!("sidecar width {} but the model expects {dim}", s.dim);
            }
            Ok(Some(s))
        }
    }
}

fn main_labels(model: &ScaffoldModel) -> anyhow::Result<LabelSet> {
    Ok(LabelSet::new(model.tasks.main().labels.iter().cloned())?)
}

pub fn evaluate(
    checkpoint: &Path,
    test: &Path,
    report_dir: &Path,
    sidecar: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let side = load_sidecar(&ckpt.model, sidecar)?;
    let labels = main_labels(&ckpt.model)?;
    let data = read_citations_jsonl(test, &labels)?;
    let examples = encode_citations(&data, &ckpt.vocab, side.as_ref(), TaskId::MAIN)?;
    if examples.is_empty() {
        bail!("{} contains no instances", test.display());
    }
    let r = report(&ckpt.model, &examples)?;
    print!("{r}");
    create_dir(report_dir)?;
    write_report(report_dir, "report", &r)?;
    Ok(ExitCode::SUCCESS)
}

/// File-system-safe rendering of an instance id.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn predict(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    attention: Option<&Path>,
    sidecar: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = &ckpt.model;
    let side = load_sidecar(model, sidecar)?;
    let labels = main_labels(model)?;
    let records = read_texts_jsonl(input)?;
    if let Some(dir) = attention {
        create_dir(dir)?;
    }
    let mut rows = Vec::with_capacity(records.len());
    for rec in &records {
        let tokens = tokenize(&rec.text);
        if tokens.is_empty() {
            bail!("{}: instance {} has no tokens", input.display(), rec.id);
        }
        let context = match &side {
            Some(s) => Some(s.lookup(&rec.id, tokens.len())?),
            None => None,
        };
        let f = model.forward(&ckpt.vocab.encode(&tokens), context, TaskId::MAIN, None)?;
        let class = scaffold_core::model::argmax(&f.probs);
        let predicted = labels.name(class);
        let gold = rec
            .label
            .as_deref()
            .map(|l| labels.index_of(l).map_or(l, |i| labels.name(i)));
        let probs: serde_json::Map<String, Value> = labels
            .names()
            .iter()
            .zip(&f.probs)
            .map(|(n, p)| (n.clone(), json!(p)))
            .collect();
        let mut row = json!({"id": rec.id, "label": predicted, "probabilities": probs});
        if let Some(g) = gold {
            row["gold"] = json!(g);
        }
        rows.push(row);
        if let Some(dir) = attention {
            let a = export_attention(&rec.id, &tokens, &f.attention, predicted, gold)?;
            let stem = file_stem(&rec.id);
            write_json(&dir.join(format!("{stem}.json")), &a)?;
            write_file(&dir.join(format!("{stem}.svg")), a.to_svg())?;
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_jsonl(out, rows)?;
    println!("{} predictions written to {}", records.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn label_counts(data: &[ScaffoldInstance]) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::new();
    for inst in data {
        *counts.entry(inst.label.name()).or_default() += 1;
    }
    counts
}

pub fn gen_scaffolds(
    corpus: &Path,
    out_dir: &Path,
    task: ScaffoldTask,
    seed: u64,
    balance: bool,
) -> anyhow::Result<ExitCode> {
    let sentences = read_corpus_jsonl(corpus)?;
    create_dir(out_dir)?;
    let mut stats = serde_json::Map::new();
    stats.insert("sentences".into(), json!(sentences.len()));
    stats.insert("seed".into(), json!(seed));
    let mut emit = |name: &str, data: Vec<ScaffoldInstance>| -> anyhow::Result<()> {
        let path = out_dir.join(format!("{name}.jsonl"));
        write_scaffold_jsonl(&path, &data)?;
        let counts = label_counts(&data);
        println!("{name}: {} instances {counts:?}", data.len());
        stats.insert(name.into(), json!({"total": data.len(), "labels": counts}));
        Ok(())
    };
    if matches!(task, ScaffoldTask::Worthiness | ScaffoldTask::Both) {
        emit("worthiness", make_worthiness_dataset(&sentences, balance, seed))?;
    }
    if matches!(task, ScaffoldTask::Section | ScaffoldTask::Both) {
        // Section labels come from citation contexts, i.e. sentences that
        // carry a citation marker.
        let contexts: Vec<_> = sentences.iter().filter(|s| s.has_marker()).cloned().collect();
        emit("section", make_section_dataset(&contexts))?;
    }
    write_json(&out_dir.join("stats.json"), &stats)?;
    Ok(ExitCode::SUCCESS)
}

fn stats_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "aggregate".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.stats.json"))
}

pub fn aggregate(annotations: &Path, gold: &Path, out: &Path) -> anyhow::Result<ExitCode> {
    let anns = read_annotations_jsonl(annotations)?;
    let gold = read_gold_jsonl(gold)?;
    let result = aggregate_pipeline(&anns, &gold)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_jsonl(
        out,
        result
            .kept
            .iter()
            .map(|k| json!({"id": k.instance_id, "label": k.label, "confidence": k.confidence})),
    )?;
    write_json(
        &stats_path(out),
        &json!({"stats": result.stats, "workers": result.trust}),
    )?;
    let s = &result.stats;
    println!(
        "{} of {} instances kept; discarded: {} low confidence, {} tie, {} other, {} without qualified annotators",
        s.kept, s.instances, s.discarded_low_confidence, s.discarded_tie, s.discarded_other, s.no_qualified_annotations
    );
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(scope: CheckScope, seed: u64) -> anyhow::Result<ExitCode> {
    let scope = match scope {
        CheckScope::Ops => Some(Scope::Ops),
        CheckScope::Layers => Some(Scope::Layers),
        CheckScope::Model => Some(Scope::Model),
        CheckScope::All => None,
    };
    let results = checks::run(scope, seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        let scope = serde_json::to_value(r.scope)?;
        println!(
            "{:<7} {:<40} max rel error {:.3e} over {:>5} entries  {status}",
            scope.as_str().unwrap_or_default(),
            r.component,
            r.max_rel_error,
            r.entries
        );
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!(
        "{} components, {failed} failed, worst {worst:.3e} (tolerance {:e})",
        results.len(),
        checks::TOLERANCE
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

pub fn grid(
    config: &Path,
    step: f64,
    max: f64,
    mode: GridModeArg,
    overrides: &[String],
) -> anyhow::Result<ExitCode> {
    let cfg = RunConfig::load(config, overrides)?;
    cfg.check_inputs()?;
    if cfg.data.worthiness.is_none() || cfg.data.section.is_none() {
        bail!("grid search needs both data.worthiness and data.section");
    }
    let spec = GridSpec {
        step,
        max,
        mode: match mode {
            GridModeArg::Full => GridMode::Full,
            GridModeArg::AxisAligned => GridMode::AxisAligned,
        },
    };
    println!("seed {}", cfg.train.seed);
    let data = prepare(&cfg)?;
    let scaffolds = [data.worthiness.as_slice(), data.section.as_slice()];
    let result = trainer::grid_search_lambda(&spec, |l2, l3| {
        let mut tc = cfg.train.clone();
        tc.lambda_worthiness = l2;
        tc.lambda_section = l3;
        let mut model = data.model(&tc)?;
        let h = trainer::train(&mut model, train_data(&data, &scaffolds), &tc, |_| {})?;
        println!("λ worthiness {l2:.3}  λ section {l3:.3}  dev macro F1 {:.1}", 100.0 * h.best_dev_f1);
        Ok(h.best_dev_f1)
    })?;

    let values = spec.values()?;
    let mut table = format!("{:>8}", "λ2\\λ3");
    for l3 in &values {
        table.push_str(&format!(" {l3:>6.3}"));
    }
    table.push('\n');
    for &l2 in &values {
        table.push_str(&format!("{l2:>8.3}"));
        for &l3 in &values {
            match result
                .points
                .iter()
                .find(|p| p.lambda_worthiness == l2 && p.lambda_section == l3)
            {
                Some(p) => table.push_str(&format!(" {:>6.1}", 100.0 * p.dev_macro_f1)),
                None => table.push_str(&format!(" {:>6}", "-")),
            }
        }
        table.push('\n');
    }
    print!("{table}");
    println!(
        "best: λ worthiness {} λ section {} dev macro F1 {:.1}",
        result.best.lambda_worthiness,
        result.best.lambda_section,
        100.0 * result.best.dev_macro_f1
    );
    create_dir(&cfg.output.dir)?;
    write_file(&cfg.output.dir.join("grid.txt"), table)?;
    write_json(&cfg.output.dir.join("grid.json"), &result)?;
    Ok(ExitCode::SUCCESS)
}
