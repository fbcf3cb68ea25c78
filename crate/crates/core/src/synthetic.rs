//! Synthetic corpora for sanity checks and small-scale experiments.
//!
//! Sentences are random "noise" words plus one class cue word. In the
//! scaffold corpus the main training split only ever shows a few cue words
//! per class, while the auxiliary corpora use all of them with labels that
//! correlate with the intent class, so an encoder shared with the auxiliary
//! tasks can learn the unseen cues.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};

use crate::data::{CitationInstance, LabelSet, ScaffoldInstance, ScaffoldLabel};
use crate::scaffold::SectionCategory;
use crate::Rng;

fn noise_word(i: usize) -> String {
    format!("n{i}")
}

fn cue_word(class: usize, j: usize) -> String {
    format!("k{class}x{j}")
}

fn sentence(rng: &mut Rng, noise_vocab: usize, len: (usize, usize), cue: Option<&str>) -> String {
    let n = rng.gen_range(len.0..=len.1);
    let mut words: Vec<String> = (0..n).map(|_| noise_word(rng.gen_range(0..noise_vocab))).collect();
    if let Some(c) = cue {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, c.to_string());
    }
    words.join(" ")
}

/// `n` instances over three classes, each a random noise sequence holding
/// one fixed cue word for its class. Labels cycle so classes are balanced.
pub fn cue_token_dataset(n: usize, seed: u64) -> (Vec<CitationInstance>, LabelSet) {
    let labels = LabelSet::scicite();
    let mut rng = Rng::seed_from_u64(seed);
    let data = (0..n)
        .map(|i| {
            let class = i % labels.len();
            CitationInstance {
                id: format!("cue-{i}"),
                text: sentence(&mut rng, 40, (4, 10), Some(&cue_word(class, 0))),
                label: class,
                section_name: None,
                source_paper_id: None,
                extended_context: None,
            }
        })
        .collect();
    (data, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaffoldCorpusSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Instances per auxiliary task.
    pub scaffold: usize,
    pub cues_per_class: usize,
    /// Cue words per class that appear in the main training split.
    pub seen_cues: usize,
    pub noise_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ScaffoldCorpusSpec {
    fn default() -> Self {
        ScaffoldCorpusSpec {
            train: 200,
            dev: 100,
            test: 200,
            scaffold: 2000,
            cues_per_class: 12,
            seen_cues: 2,
            noise_vocab: 60,
            min_len: 5,
            max_len: 10,
            seed: 13370,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaffoldCorpus {
    pub labels: LabelSet,
    pub train: Vec<CitationInstance>,
    pub dev: Vec<CitationInstance>,
    pub test: Vec<CitationInstance>,
    pub worthiness: Vec<ScaffoldInstance>,
    pub section: Vec<ScaffoldInstance>,
}

/// Section each intent class is written in.
const CLASS_SECTION: [SectionCategory; 3] = [
    SectionCategory::RelatedWork,
    SectionCategory::Method,
    SectionCategory::Experiments,
];

/// Three intent classes with `cues_per_class` cue words each. Training
/// instances draw cues from the first `seen_cues`; dev and test from all.
/// Section examples carry a cue and the section of its class; worthiness
/// positives carry a cue, negatives are pure noise.
pub fn scaffold_corpus(spec: &ScaffoldCorpusSpec) -> ScaffoldCorpus {
    let labels = LabelSet::scicite();
    let k = labels.len();
    let mut rng = Rng::seed_from_u64(spec.seed);
    let len = (spec.min_len, spec.max_len);

    let main = |n: usize, cues: usize, prefix: &str, rng: &mut Rng| -> Vec<CitationInstance> {
        let mut out: Vec<CitationInstance> = (0..n)
            .map(|i| {
                let class = i % k;
                let cue = cue_word(class, rng.gen_range(0..cues));
                CitationInstance {
                    id: format!("{prefix}-{i}"),
                    text: sentence(rng, spec.noise_vocab, len, Some(&cue)),
                    label: class,
                    section_name: Some(CLASS_SECTION[class].as_str().to_string()),
                    source_paper_id: None,
                    extended_context: None,
                }
            })
            .collect();
        out.shuffle(rng);
        out
    };
    let train = main(spec.train, spec.seen_cues, "train", &mut rng);
    let dev = main(spec.dev, spec.cues_per_class, "dev", &mut rng);
    let test = main(spec.test, spec.cues_per_class, "test", &mut rng);

    let section = (0..spec.scaffold)
        .map(|i| {
            let class = i % k;
            let cue = cue_word(class, rng.gen_range(0..spec.cues_per_class));
            ScaffoldInstance {
                id: format!("sec-{i}"),
                text: sentence(&mut rng, spec.noise_vocab, len, Some(&cue)),
                label: ScaffoldLabel::Section(CLASS_SECTION[class]),
            }
        })
        .collect();
    let worthiness = (0..spec.scaffold)
        .map(|i| {
            let cited = i % 2 == 0;
            let cue = cited.then(|| cue_word(rng.gen_range(0..k), rng.gen_range(0..spec.cues_per_class)));
            ScaffoldInstance {
                id: format!("cw-{i}"),
                text: sentence(&mut rng, spec.noise_vocab, len, cue.as_deref()),
                label: ScaffoldLabel::Worthiness(cited),
            }
        })
        .collect();

    ScaffoldCorpus {
        labels,
        train,
        dev,
        test,
        worthiness,
        section,
    }
}
