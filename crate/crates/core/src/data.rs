//! Tokenization, vocabulary, label sets and the JSONL / text readers for
//! citation datasets, scaffold datasets, word vectors and contextual vectors.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use rand::SeedableRng;
use regex::Regex;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{TokenEmbeddingTable, PAD, UNK};
use crate::model::{Example, TaskId};
use crate::scaffold::SectionCategory;
use crate::tensor::Tensor;
use crate::Rng;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

static BRACKET_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[\s*\d+(?:\s*[-–,;]\s*\d+)*\s*\]").unwrap());

/// Lowercases, splits on whitespace and peels leading/trailing punctuation
/// off each word as separate tokens. Bracketed numeric citation markers such
/// as `[4]` or `[1, 3-5]` stay whole (internal spaces removed).
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut last = 0;
    for m in BRACKET_MARKER.find_iter(&lower) {
        split_plain(&lower[last..m.start()], &mut out);
        out.push(m.as_str().chars().filter(|c| !c.is_whitespace()).collect());
        last = m.end();
    }
    split_plain(&lower[last..], &mut out);
    out
}

fn split_plain(s: &str, out: &mut Vec<String>) {
    for chunk in s.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        while start < chars.len() && !chars[start].is_alphanumeric() {
            out.push(chars[start].to_string());
            start += 1;
        }
        let mut end = chars.len();
        while end > start && !chars[end - 1].is_alphanumeric() {
            end -= 1;
        }
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(chars[end..].iter().map(char::to_string));
    }
}

/// Token ↔ index map with PAD at 0 and UNK at 1. Other entries are ordered
/// by descending frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'t, I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'t [S]>,
        S: AsRef<str> + 't,
    {
        if min_count < 1 {
            return Err(Error::contract("min_count must be at least 1"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = [PAD_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(kept.into_iter().map(|(t, _)| t))
            .map(str::to_string)
            .collect();
        Vocabulary::from_tokens(tokens)
    }

    /// Restores a vocabulary from its index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::format("vocabulary must start with <pad>, <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.get(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Ordered class names of one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::contract("empty label set"));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].iter().any(|m| m.eq_ignore_ascii_case(n)) {
                return Err(Error::contract(format!("duplicate label {n:?}")));
            }
        }
        Ok(LabelSet { names })
    }

    /// SciCite: background, method, result comparison.
    pub fn scicite() -> Self {
        LabelSet::new(["background", "method", "result"]).unwrap()
    }

    /// ACL-ARC's six intents, using the released dataset's spellings.
    pub fn acl_arc() -> Self {
        LabelSet::new([
            "Background",
            "Extends",
            "Uses",
            "Motivation",
            "CompareOrContrast",
            "Future",
        ])
        .unwrap()
    }

    pub fn worthiness() -> Self {
        LabelSet::new(["false", "true"]).unwrap()
    }

    pub fn sections() -> Self {
        LabelSet::new(SectionCategory::ALL.iter().map(|c| c.as_str())).unwrap()
    }

    /// `scicite`, `acl-arc`, or a comma-separated list of names.
    pub fn parse(spec: &str) -> Result<Self> {
        match spec.trim().to_ascii_lowercase().as_str() {
            "scicite" => Ok(LabelSet::scicite()),
            "acl-arc" | "acl_arc" | "aclarc" => Ok(LabelSet::acl_arc()),
            _ => LabelSet::new(spec.split(',').map(str::trim).filter(|s| !s.is_empty())),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Exact match first, then case-insensitive, then ignoring
    /// non-alphanumerics.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        let squash = |s: &str| -> String {
            s.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect()
        };
        self.names
            .iter()
            .position(|n| n == label)
            .or_else(|| self.names.iter().position(|n| n.eq_ignore_ascii_case(label)))
            .or_else(|| {
                let l = squash(label);
                self.names.iter().position(|n| squash(n) == l)
            })
    }
}

/// One labeled citation context.
#[derive(Clone, Debug, PartialEq)]
pub struct CitationInstance {
    pub id: String,
    pub text: String,
    /// Index into the label set the instance was read with.
    pub label: usize,
    pub section_name: Option<String>,
    pub source_paper_id: Option<String>,
    /// Wider context around the citation; loaded but not used by the model.
    pub extended_context: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaffoldLabel {
    Worthiness(bool),
    Section(SectionCategory),
}

impl ScaffoldLabel {
    pub fn task(self) -> TaskId {
        match self {
            ScaffoldLabel::Worthiness(_) => TaskId::WORTHINESS,
            ScaffoldLabel::Section(_) => TaskId::SECTION,
        }
    }

    /// Name as it appears in scaffold JSONL files.
    pub fn name(self) -> &'static str {
        match self {
            ScaffoldLabel::Worthiness(true) => "true",
            ScaffoldLabel::Worthiness(false) => "false",
            ScaffoldLabel::Section(c) => c.as_str(),
        }
    }
}

/// One auxiliary-task example.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaffoldInstance {
    pub id: String,
    pub text: String,
    pub label: ScaffoldLabel,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn value_to_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn field<'v>(obj: &'v Map<String, Value>, names: &[&str]) -> Option<&'v Value> {
    names
        .iter()
        .find_map(|n| obj.get(*n))
        .filter(|v| !v.is_null())
}

/// Parses one JSONL citation record. `lineno` is 1-based and used for the
/// default id.
pub fn parse_citation(line: &str, labels: &LabelSet, lineno: usize) -> Result<CitationInstance> {
    let obj: Map<String, Value> =
        serde_json::from_str(line).map_err(|e| Error::format(format!("malformed record: {e}")))?;
    let text = field(&obj, &["string", "text"])
        .and_then(Value::as_str)
        .ok_or_else(|| Error::format("missing string field \"string\""))?
        .to_string();
    let raw_label = field(&obj, &["label", "intent"])
        .and_then(value_to_string)
        .ok_or_else(|| Error::format("missing field \"label\""))?;
    let label = labels.index_of(&raw_label).ok_or_else(|| {
        Error::data(format!(
            "unknown label {raw_label:?} (expected one of {:?})",
            labels.names()
        ))
    })?;
    if tokenize(&text).is_empty() {
        return Err(Error::data("citation context is empty after tokenization"));
    }
    let opt = |names: &[&str]| field(&obj, names).and_then(value_to_string);
    Ok(CitationInstance {
        id: opt(&["id", "unique_id"]).unwrap_or_else(|| format!("line-{lineno}")),
        text,
        label,
        section_name: opt(&["sectionName", "section_name"]),
        source_paper_id: opt(&["citingPaperId", "citing_paper_id", "source_paper_id"]),
        extended_context: opt(&["extended_context", "extendedContext"]),
    })
}

/// Reads a citation dataset: one JSON object per line with `"string"` and
/// `"label"`, optionally `"sectionName"` and `"id"`. Blank lines are skipped;
/// file order is preserved.
pub fn read_citations_jsonl(path: &Path, labels: &LabelSet) -> Result<Vec<CitationInstance>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_citation(&line, labels, i + 1).map_err(|e| e.at(path, i + 1))?);
    }
    Ok(out)
}

/// Input for prediction: like a citation record, but the label is optional.
#[derive(Clone, Debug, PartialEq)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
    pub label: Option<String>,
}

pub fn read_texts_jsonl(path: &Path) -> Result<Vec<TextRecord>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: Map<String, Value> = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("malformed record: {e}")).at(path, i + 1))?;
        let text = field(&obj, &["string", "text"])
            .and_then(Value::as_str)
            .ok_or_else(|| Error::format("missing string field \"string\"").at(path, i + 1))?;
        out.push(TextRecord {
            id: field(&obj, &["id", "unique_id"])
                .and_then(value_to_string)
                .unwrap_or_else(|| format!("line-{}", i + 1)),
            text: text.to_string(),
            label: field(&obj, &["label", "intent"]).and_then(value_to_string),
        });
    }
    Ok(out)
}

/// Writes scaffold instances in the citation reader's format.
pub fn write_scaffold_jsonl(path: &Path, instances: &[ScaffoldInstance]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let rec = serde_json::json!({
            "id": inst.id,
            "string": inst.text,
            "label": inst.label.name(),
        });
        writeln!(w, "{rec}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads word vectors in the whitespace-separated text format
/// `token f1 … fD`. In-vocabulary rows are copied from the file; rows for
/// vocabulary entries absent from the file are uniform `[-0.1, 0.1]` from
/// `seed`; PAD and UNK are zero.
pub fn load_word_vectors(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<TokenEmbeddingTable> {
    let mut dim: Option<usize> = None;
    let mut found: HashMap<usize, Vec<f64>> = HashMap::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(format!("bad float: {e}")).at(path, i + 1))?;
        match dim {
            None if values.is_empty() => {
                return Err(Error::format("line has no vector values").at(path, i + 1))
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::format(format!(
                    "expected {d} values, found {}",
                    values.len()
                ))
                .at(path, i + 1))
            }
            Some(_) => {}
        }
        if let Some(idx) = vocab.get(token) {
            if idx != PAD && idx != UNK {
                found.entry(idx).or_insert(values);
            }
        }
    }
    let dim = dim.ok_or_else(|| Error::Format {
        path: Some(path.into()),
        line: None,
        message: "no vectors in file".into(),
    })?;
    let mut rng = Rng::seed_from_u64(seed);
    let mut table = TokenEmbeddingTable::random(vocab.len(), dim, &mut rng);
    for (idx, values) in found {
        table.rows.data_mut()[idx * dim..(idx + 1) * dim].copy_from_slice(&values);
    }
    log::info!(
        "loaded {dim}-dim vectors from {}; {} vocabulary entries",
        path.display(),
        vocab.len()
    );
    Ok(table)
}

/// Precomputed per-token contextual vectors keyed by instance id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sidecar {
    pub dim: usize,
    vectors: HashMap<String, Tensor>,
}

impl Sidecar {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, id: String, t: Tensor) -> Result<()> {
        if t.rank() != 2 || (self.dim != 0 && t.shape()[1] != self.dim) {
            return Err(Error::format(format!(
                "contextual vectors for {id} have shape {:?}, expected n×{}",
                t.shape(),
                self.dim
            )));
        }
        self.dim = t.shape()[1];
        self.vectors.insert(id, t);
        Ok(())
    }

    /// Vectors for `id`, which must cover exactly `n_tokens` tokens.
    pub fn lookup(&self, id: &str, n_tokens: usize) -> Result<&Tensor> {
        let t = self
            .vectors
            .get(id)
            .ok_or_else(|| Error::data(format!("no contextual vectors for instance {id}")))?;
        if t.shape()[0] != n_tokens {
            return Err(Error::data(format!(
                "instance {id}: {} contextual vectors for {n_tokens} tokens",
                t.shape()[0]
            )));
        }
        Ok(t)
    }
}

/// Reads contextual vectors from JSONL records `{"id": …, "vectors": [[…], …]}`.
pub fn load_contextual_sidecar(path: &Path) -> Result<Sidecar> {
    #[derive(serde::Deserialize)]
    struct Record {
        id: String,
        vectors: Vec<Vec<f64>>,
    }
    let mut sidecar = Sidecar::default();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("malformed record: {e}")).at(path, i + 1))?;
        let t = Tensor::from_rows(&rec.vectors)
            .map_err(|_| Error::format(format!("ragged vectors for {}", rec.id)).at(path, i + 1))?;
        sidecar
            .insert(rec.id, t)
            .map_err(|e| e.at(path, i + 1))?;
    }
    Ok(sidecar)
}

/// Tokenizes and indexes citation instances for a task.
pub fn encode_citations(
    instances: &[CitationInstance],
    vocab: &Vocabulary,
    sidecar: Option<&Sidecar>,
    task: TaskId,
) -> Result<Vec<Example>> {
    instances
        .iter()
        .map(|inst| {
            let toks = tokenize(&inst.text);
            let side = match sidecar {
                Some(s) => Some(s.lookup(&inst.id, toks.len())?.clone()),
                None => None,
            };
            Ok(Example {
                id: inst.id.clone(),
                tokens: vocab.encode(&toks),
                sidecar: side,
                task,
                label: inst.label,
            })
        })
        .collect()
}
