//! Crowd-annotation quality control: annotator qualification on gold test
//! questions and trust-weighted label aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum gold-question accuracy for an annotator to be kept.
pub const QUALIFICATION_THRESHOLD: f64 = 0.75;
/// Aggregated labels at or below this confidence are discarded.
pub const CONFIDENCE_THRESHOLD: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Choice {
    Label(String),
    Other,
}

impl Choice {
    /// `"other"` in any case is the catch-all choice.
    pub fn parse(s: &str) -> Self {
        if s.trim().eq_ignore_ascii_case("other") {
            Choice::Other
        } else {
            Choice::Label(s.trim().to_string())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Annotation {
    pub worker_id: String,
    pub instance_id: String,
    pub choice: Choice,
    pub trust: f64,
}

impl Annotation {
    pub fn new(worker: &str, instance: &str, choice: &str, trust: f64) -> Self {
        Annotation {
            worker_id: worker.into(),
            instance_id: instance.into(),
            choice: Choice::parse(choice),
            trust,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Qualification {
    pub qualified: bool,
    pub trust: f64,
    pub correct: usize,
    pub total: usize,
}

/// Scores one annotator against the gold questions (`question id → label`).
/// Unanswered gold questions count as wrong; answers to other instances are
/// ignored. Qualified iff accuracy ≥ 0.75.
pub fn qualify_annotator(
    gold: &BTreeMap<String, String>,
    responses: &[Annotation],
) -> Result<Qualification> {
    if gold.is_empty() {
        return Err(Error::contract("gold question set is empty"));
    }
    let mut answered = BTreeSet::new();
    let mut correct = 0;
    for r in responses {
        let Some(want) = gold.get(&r.instance_id) else { continue };
        if !answered.insert(r.instance_id.as_str()) {
            continue;
        }
        if matches!(&r.choice, Choice::Label(l) if l.eq_ignore_ascii_case(want))
            || (r.choice == Choice::Other && Choice::parse(want) == Choice::Other)
        {
            correct += 1;
        }
    }
    let total = gold.len();
    Ok(Qualification {
        // Integer comparison so 0.75 exactly is never lost to rounding.
        qualified: 4 * correct >= 3 * total,
        trust: correct as f64 / total as f64,
        correct,
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscardReason {
    Tie,
    Other,
    LowConfidence,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Aggregate {
    Kept { label: String, confidence: f64 },
    Discarded { reason: DiscardReason, confidence: f64 },
}

/// Trust-weighted plurality: `score(L) = Σ_{choice = L} trust / Σ trust`.
/// The top label is kept when it is unique, not OTHER, and its score
/// exceeds 0.7.
pub fn aggregate_annotations(annotations: &[Annotation]) -> Result<Aggregate> {
    if annotations.is_empty() {
        return Err(Error::contract("no annotations to aggregate"));
    }
    if let Some(a) = annotations.iter().find(|a| !(0.0..=1.0).contains(&a.trust)) {
        return Err(Error::contract(format!(
            "trust {} of worker {} outside [0, 1]",
            a.trust, a.worker_id
        )));
    }
    let total: f64 = annotations.iter().map(|a| a.trust).sum();
    if total <= 0.0 {
        return Err(Error::contract("annotations carry zero total trust"));
    }
    let mut scores: BTreeMap<&Choice, f64> = BTreeMap::new();
    for a in annotations {
        *scores.entry(&a.choice).or_default() += a.trust;
    }
    let best = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let leaders: Vec<&Choice> = scores
        .iter()
        .filter(|&(_, &s)| best - s <= 1e-12 * total)
        .map(|(c, _)| *c)
        .collect();
    let confidence = best / total;
    let discard = |reason| Ok(Aggregate::Discarded { reason, confidence });
    match leaders.as_slice() {
        [_, _, ..] => discard(DiscardReason::Tie),
        [Choice::Other] => discard(DiscardReason::Other),
        [Choice::Label(_)] if confidence <= CONFIDENCE_THRESHOLD => {
            discard(DiscardReason::LowConfidence)
        }
        [Choice::Label(l)] => Ok(Aggregate::Kept {
            label: l.clone(),
            confidence,
        }),
        [] => unreachable!("non-empty annotations give at least one score"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeptInstance {
    pub instance_id: String,
    pub label: String,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AggregationStats {
    pub workers: usize,
    pub qualified_workers: usize,
    pub instances: usize,
    pub kept: usize,
    pub discarded_low_confidence: usize,
    pub discarded_tie: usize,
    pub discarded_other: usize,
    /// Instances whose annotators were all disqualified.
    pub no_qualified_annotations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregationResult {
    pub kept: Vec<KeptInstance>,
    pub stats: AggregationStats,
    pub trust: BTreeMap<String, Qualification>,
}

/// Full pipeline: qualify each worker on the gold questions, then aggregate
/// qualified workers' answers on every non-gold instance. Output is ordered
/// by instance id.
pub fn aggregate_pipeline(
    annotations: &[Annotation],
    gold: &BTreeMap<String, String>,
) -> Result<AggregationResult> {
    let mut by_worker: BTreeMap<&str, Vec<Annotation>> = BTreeMap::new();
    for a in annotations {
        by_worker.entry(&a.worker_id).or_default().push(a.clone());
    }
    let mut trust = BTreeMap::new();
    for (w, answers) in &by_worker {
        trust.insert(w.to_string(), qualify_annotator(gold, answers)?);
    }

    let mut by_instance: BTreeMap<&str, Vec<Annotation>> = BTreeMap::new();
    for a in annotations.iter().filter(|a| !gold.contains_key(&a.instance_id)) {
        by_instance.entry(&a.instance_id).or_default();
        let q = &trust[&a.worker_id];
        if q.qualified {
            let mut a = a.clone();
            a.trust = q.trust;
            by_instance.get_mut(a.instance_id.as_str()).unwrap().push(a);
        }
    }

    let mut stats = AggregationStats {
        workers: trust.len(),
        qualified_workers: trust.values().filter(|q| q.qualified).count(),
        instances: by_instance.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for (id, anns) in by_instance {
        if anns.is_empty() {
            stats.no_qualified_annotations += 1;
            continue;
        }
        match aggregate_annotations(&anns)? {
            Aggregate::Kept { label, confidence } => {
                stats.kept += 1;
                kept.push(KeptInstance {
                    instance_id: id.to_string(),
                    label,
                    confidence,
                });
            }
            Aggregate::Discarded { reason, .. } => match reason {
                DiscardReason::Tie => stats.discarded_tie += 1,
                DiscardReason::Other => stats.discarded_other += 1,
                DiscardReason::LowConfidence => stats.discarded_low_confidence += 1,
            },
        }
    }
    Ok(AggregationResult { kept, stats, trust })
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("malformed record: {e}")).at(path, i + 1))?,
        );
    }
    Ok(out)
}

/// Reads `{"instance_id", "worker_id", "choice"}` records; trust starts at 1.
pub fn read_annotations_jsonl(path: &Path) -> Result<Vec<Annotation>> {
    #[derive(Deserialize)]
    struct Raw {
        instance_id: String,
        worker_id: String,
        choice: String,
    }
    Ok(read_jsonl::<Raw>(path)?
        .into_iter()
        .map(|r| Annotation::new(&r.worker_id, &r.instance_id, &r.choice, 1.0))
        .collect())
}

/// Reads gold test questions `{"question_id", "label"}`.
pub fn read_gold_jsonl(path: &Path) -> Result<BTreeMap<String, String>> {
    #[derive(Deserialize)]
    struct Raw {
        #[serde(alias = "instance_id")]
        question_id: String,
        label: String,
    }
    Ok(read_jsonl::<Raw>(path)?
        .into_iter()
        .map(|r| (r.question_id, r.label))
        .collect())
}
