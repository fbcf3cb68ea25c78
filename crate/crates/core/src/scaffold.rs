//! Scaffold dataset construction: citation-marker detection and stripping,
//! section-title normalization, and the worthiness / section datasets.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::{ScaffoldInstance, ScaffoldLabel};
use crate::error::{Error, Result};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SectionCategory {
    Introduction,
    #[serde(rename = "related work")]
    RelatedWork,
    Method,
    Experiments,
    Conclusion,
}

impl SectionCategory {
    pub const ALL: [SectionCategory; 5] = [
        SectionCategory::Introduction,
        SectionCategory::RelatedWork,
        SectionCategory::Method,
        SectionCategory::Experiments,
        SectionCategory::Conclusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SectionCategory::Introduction => "introduction",
            SectionCategory::RelatedWork => "related work",
            SectionCategory::Method => "method",
            SectionCategory::Experiments => "experiments",
            SectionCategory::Conclusion => "conclusion",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for SectionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarkerKind {
    NumericBracket,
    NameYear,
}

/// A detected citation marker. Offsets are byte offsets into the sentence,
/// so `&sentence[start..end]` is the marker text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MarkerSpan {
    pub start: usize,
    pub end: usize,
    pub kind: MarkerKind,
}

const NAME: &str = r"(?:(?:van|von|de|der|den|di|da|du|del|la|le)\s+)*\b\p{Lu}[\p{L}'’\-]+";
const YEAR: &str = r"(?:18|19|20)\d{2}[a-z]?";

fn authors() -> String {
    format!(r"{NAME}(?:\s+et\s+al\.?|\s+(?:and|&)\s+{NAME})?")
}

static NUMERIC: LazyLock<Regex> = LazyLock::new(|| {
    let list = |d: &str| format!(r"\s*{d}(?:\s*[-–,;]\s*{d})*\s*");
    Regex::new(&format!(
        r"\[{}\]|\({}\)",
        list(r"\d{1,4}"),
        list(r"\d{1,3}")
    ))
    .unwrap()
});

static NAME_YEAR: LazyLock<[Regex; 3]> = LazyLock::new(|| {
    let a = authors();
    let years = format!(r"{YEAR}(?:\s*[,;]\s*{YEAR})*");
    [
        // Lee et al (2010), Lee and Kim (2010), Lee (2010a, 2011)
        Regex::new(&format!(r"{a},?\s*\(\s*{years}\s*\)")).unwrap(),
        // Lee et al., 2010
        Regex::new(&format!(r"{NAME}\s+et\s+al\.?,?\s+{YEAR}")).unwrap(),
        // (Lee, 2010; Kim et al., 2012), (e.g., Lee 2010)
        Regex::new(&format!(
            r"\(\s*(?:(?:e\.g\.|i\.e\.|see|cf\.),?\s*)?{a},?\s+{years}(?:\s*;\s*{a},?\s+{years})*\s*\)"
        ))
        .unwrap(),
    ]
});

/// Words after which a bracketed number is a cross-reference, not a citation.
static CROSS_REFERENCE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:eqs?\.?|equations?|tables?|tab\.|figures?|figs?\.?|sections?|sec\.|steps?|lines?|algorithms?|appendix|chapters?)\s*$")
        .unwrap()
});

/// Finds numeric (`[12]`, `[1-4]`, `[3,5]`, `(12)`) and name-year
/// (`Lee et al (2010)`, `Lee et al., 2010`, `(Lee, 2010)`,
/// `Lee and Kim (2010)`) citation markers. Overlapping candidates resolve to
/// the longest; the result is sorted and non-overlapping.
pub fn detect_citation_markers(sentence: &str) -> Vec<MarkerSpan> {
    let mut candidates: Vec<MarkerSpan> = NUMERIC
        .find_iter(sentence)
        .filter(|m| !CROSS_REFERENCE.is_match(&sentence[..m.start()]))
        .map(|m| MarkerSpan {
            start: m.start(),
            end: m.end(),
            kind: MarkerKind::NumericBracket,
        })
        .collect();
    for re in NAME_YEAR.iter() {
        candidates.extend(re.find_iter(sentence).map(|m| MarkerSpan {
            start: m.start(),
            end: m.end(),
            kind: MarkerKind::NameYear,
        }));
    }
    candidates.sort_by(|a, b| {
        (b.end - b.start)
            .cmp(&(a.end - a.start))
            .then(a.start.cmp(&b.start))
    });
    let mut chosen: Vec<MarkerSpan> = Vec::new();
    for c in candidates {
        if chosen.iter().all(|s| c.end <= s.start || c.start >= s.end) {
            chosen.push(c);
        }
    }
    chosen.sort_by_key(|s| s.start);
    chosen
}

static EMPTY_BRACKETS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\(\s*[,;]?\s*\)|\[\s*[,;]?\s*\]").unwrap());
static SPACE_BEFORE_PUNCT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\s+([.,;:!?)\]])").unwrap());
static SPACE_AFTER_OPEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([(\[])\s+").unwrap());
static MULTI_SPACE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s{2,}").unwrap());

fn strip_once(sentence: &str) -> String {
    let mut out = String::with_capacity(sentence.len());
    let mut last = 0;
    for span in detect_citation_markers(sentence) {
        out.push_str(&sentence[last..span.start]);
        out.push(' ');
        last = span.end;
    }
    out.push_str(&sentence[last..]);
    let out = EMPTY_BRACKETS.replace_all(&out, " ");
    let out = SPACE_AFTER_OPEN.replace_all(&out, "$1");
    let out = SPACE_BEFORE_PUNCT.replace_all(&out, "$1");
    let out = MULTI_SPACE.replace_all(&out, " ");
    out.trim().to_string()
}

/// Removes citation markers, empty brackets left behind, whitespace before
/// punctuation, and doubled whitespace. Repeats until nothing changes, so the
/// result contains no detectable marker and stripping it again is a no-op.
/// Text without markers passes through unchanged.
pub fn strip_markers(sentence: &str) -> String {
    if detect_citation_markers(sentence).is_empty() {
        return sentence.to_string();
    }
    let mut cur = strip_once(sentence);
    loop {
        let next = strip_once(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

static SECTION_NUMBERING: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?:[\d.\-–:)(\s]+|(?:[ivxlc]+|[a-h])[.):]\s*|[ivxlc]+\s+)").unwrap()
});

static SECTION_TABLE: LazyLock<Vec<(Regex, SectionCategory)>> = LazyLock::new(|| {
    use SectionCategory::*;
    let rows: [(&str, SectionCategory); 5] = [
        (
            r"conclusions?|concluding remarks|summary|summary and conclusions?|discussions? and conclusions?|conclusions? and (?:discussion|future work|outlook)",
            Conclusion,
        ),
        (
            r"related works?|background|background and related work|prior work|previous work|related research|literature review",
            RelatedWork,
        ),
        (
            r"experiments?|results|evaluation|experimental results|experiments and results|results and discussion|experimental (?:setup|set-up|settings?|evaluation|design)|empirical evaluation",
            Experiments,
        ),
        (
            r"methods?|methodology|models?|approach|our approach|proposed (?:method|approach|model)|architecture|model architecture|materials and methods|methods and materials",
            Method,
        ),
        (r"introduction|intro", Introduction),
    ];
    rows.into_iter()
        .map(|(p, c)| (Regex::new(&format!("^(?:{p})$")).unwrap(), c))
        .collect()
});

/// Maps a raw section header (e.g. `"5. Experiments"`, `"II) RELATED WORK"`)
/// to one of the five categories, or `None` when no pattern applies.
pub fn normalize_section_title(raw: &str) -> Option<SectionCategory> {
    let lower = raw.trim().to_lowercase();
    let mut title = lower.as_str();
    while let Some(m) = SECTION_NUMBERING.find(title) {
        if m.end() == 0 || m.end() == title.len() {
            break;
        }
        title = &title[m.end()..];
    }
    let title = title.trim_end_matches(|c: char| !c.is_alphanumeric()).trim();
    let title = MULTI_SPACE.replace_all(title, " ");
    SECTION_TABLE
        .iter()
        .find(|(re, _)| re.is_match(&title))
        .map(|&(_, c)| c)
}

/// One record of a sentence corpus: `{"text", "section", "paper_id"}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSentence {
    #[serde(default)]
    pub id: Option<String>,
    pub text: String,
    #[serde(default)]
    pub section: Option<String>,
    #[serde(default)]
    pub paper_id: Option<String>,
}

impl CorpusSentence {
    pub fn new(text: impl Into<String>, section: Option<&str>) -> Self {
        CorpusSentence {
            id: None,
            text: text.into(),
            section: section.map(str::to_string),
            paper_id: None,
        }
    }

    /// Explicit id, else `{paper_id}:{index}`, else `s{index}`.
    pub fn id_or(&self, index: usize) -> String {
        match (&self.id, &self.paper_id) {
            (Some(id), _) => id.clone(),
            (None, Some(p)) => format!("{p}:{index}"),
            (None, None) => format!("s{index}"),
        }
    }

    pub fn has_marker(&self) -> bool {
        !detect_citation_markers(&self.text).is_empty()
    }
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<CorpusSentence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusSentence = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("malformed corpus record: {e}")).at(path, i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

/// Citation-worthiness examples: sentences with a marker become positives
/// with the markers stripped, the rest negatives verbatim. The output order
/// is a seeded shuffle. With `balance`, the larger class is truncated to the
/// size of the smaller one after shuffling.
pub fn make_worthiness_dataset(
    sentences: &[CorpusSentence],
    balance: bool,
    seed: u64,
) -> Vec<ScaffoldInstance> {
    let mut out: Vec<ScaffoldInstance> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cited = s.has_marker();
            ScaffoldInstance {
                id: s.id_or(i),
                text: if cited { strip_markers(&s.text) } else { s.text.clone() },
                label: ScaffoldLabel::Worthiness(cited),
            }
        })
        .filter(|inst| !inst.text.trim().is_empty())
        .collect();
    let mut rng = Rng::seed_from_u64(seed);
    out.shuffle(&mut rng);
    if balance {
        let pos = out
            .iter()
            .filter(|s| s.label == ScaffoldLabel::Worthiness(true))
            .count();
        let cap = pos.min(out.len() - pos);
        let (mut kept_pos, mut kept_neg) = (0, 0);
        out.retain(|s| {
            let slot = if s.label == ScaffoldLabel::Worthiness(true) {
                &mut kept_pos
            } else {
                &mut kept_neg
            };
            *slot += 1;
            *slot <= cap
        });
    }
    out
}

/// Section-title examples from citation contexts: keeps those whose header
/// normalizes, text unchanged, input order preserved.
pub fn make_section_dataset(contexts: &[CorpusSentence]) -> Vec<ScaffoldInstance> {
    contexts
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let cat = normalize_section_title(s.section.as_deref()?)?;
            Some(ScaffoldInstance {
                id: s.id_or(i),
                text: s.text.clone(),
                label: ScaffoldLabel::Section(cat),
            })
        })
        .collect()
}
