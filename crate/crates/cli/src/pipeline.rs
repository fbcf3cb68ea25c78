//! Loading a run's data and building a model for it.

use std::path::Path;

use scaffold_core::data::{
    encode_citations, load_contextual_sidecar, load_word_vectors, read_citations_jsonl, tokenize,
    CitationInstance, LabelSet, Sidecar, Vocabulary,
};
use scaffold_core::model::{Example, ModelConfig, ScaffoldModel, TaskId, TaskSet};
use scaffold_core::layers::TokenEmbeddingTable;
use scaffold_core::trainer::TrainConfig;

use crate::config::RunConfig;

pub struct Prepared {
    pub labels: LabelSet,
    pub vocab: Vocabulary,
    pub vectors: Option<TokenEmbeddingTable>,
    pub sidecar_dim: usize,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Option<Vec<Example>>,
    pub worthiness: Vec<Example>,
    pub section: Vec<Example>,
}

fn read(path: &Path, labels: &LabelSet) -> anyhow::Result<Vec<CitationInstance>> {
    let data = read_citations_jsonl(path, labels)?;
    log::info!("{}: {} instances", path.display(), data.len());
    Ok(data)
}

/// Reads every dataset named in the config, builds the vocabulary from the
/// training and auxiliary texts, and encodes everything.
pub fn prepare(cfg: &RunConfig) -> anyhow::Result<Prepared> {
    let d = &cfg.data;
    let labels = LabelSet::parse(&d.labels)?;
    let train = read(&d.train, &labels)?;
    let dev = read(&d.dev, &labels)?;
    let test = d.test.as_deref().map(|p| read(p, &labels)).transpose()?;
    let worthiness = d
        .worthiness
        .as_deref()
        .map(|p| read(p, &LabelSet::worthiness()))
        .transpose()?
        .unwrap_or_default();
    let section = d
        .section
        .as_deref()
        .map(|p| read(p, &LabelSet::sections()))
        .transpose()?
        .unwrap_or_default();

    let corpus: Vec<Vec<String>> = train
        .iter()
        .chain(&worthiness)
        .chain(&section)
        .map(|i| tokenize(&i.text))
        .collect();
    let vocab = Vocabulary::build(corpus.iter().map(Vec::as_slice), cfg.train.min_count)?;
    log::info!("vocabulary: {} entries", vocab.len());

    let vectors = d
        .word_vectors
        .as_deref()
        .map(|p| load_word_vectors(p, &vocab, cfg.train.seed))
        .transpose()?;
    let sidecar: Option<Sidecar> = d.sidecar.as_deref().map(load_contextual_sidecar).transpose()?;
    let side = sidecar.as_ref();
    let enc = |data: &[CitationInstance], task| encode_citations(data, &vocab, side, task);
    Ok(Prepared {
        train: enc(&train, TaskId::MAIN)?,
        dev: enc(&dev, TaskId::MAIN)?,
        test: test.as_deref().map(|t| enc(t, TaskId::MAIN)).transpose()?,
        worthiness: enc(&worthiness, TaskId::WORTHINESS)?,
        section: enc(&section, TaskId::SECTION)?,
        sidecar_dim: sidecar.map_or(0, |s| s.dim),
        labels,
        vocab,
        vectors,
    })
}

impl Prepared {
    /// Fresh model for the given training config; pretrained vectors, when
    /// present, replace the random embedding table and fix `d1_static`.
    pub fn model(&self, cfg: &TrainConfig) -> scaffold_core::error::Result<ScaffoldModel> {
        let tasks = TaskSet::standard(
            self.labels.names(),
            cfg.lambda_worthiness,
            cfg.lambda_section,
        )?;
        let config = ModelConfig {
            vocab_size: self.vocab.len(),
            d1_static: self.vectors.as_ref().map_or(cfg.embedding_dim, |v| v.dim()),
            sidecar_dim: self.sidecar_dim,
            d2: cfg.d2,
            mlp_hidden: cfg.mlp_hidden,
            dropout: cfg.dropout,
            fine_tune_embeddings: cfg.fine_tune_embeddings,
        };
        let mut model = ScaffoldModel::new(config, tasks, cfg.seed)?;
        if let Some(v) = &self.vectors {
            model.params.embedding = TokenEmbeddingTable {
                rows: v.rows.clone(),
                trainable: cfg.fine_tune_embeddings,
            };
        }
        model.validate()?;
        Ok(model)
    }
}
