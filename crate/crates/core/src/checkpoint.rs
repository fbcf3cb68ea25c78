//! Single-file model checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (config, tasks, vocabulary, tensor names and shapes, free-form metadata),
//! then every tensor's data as little-endian `f64` in header order. Values are
//! stored raw, so a save/load round trip is bitwise exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::gradcheck::Parameters;
use crate::model::{ModelConfig, ScaffoldModel, TaskSet};

const MAGIC: &[u8; 8] = b"CITESCF1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tasks: TaskSet,
    vocab: Vec<String>,
    vocab_sha256: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ScaffoldModel,
    pub vocab: Vocabulary,
    /// Caller-defined JSON, e.g. the training configuration.
    pub metadata: Value,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let named = self.model.params.named_tensors();
        let header = Header {
            config: self.model.config.clone(),
            tasks: self.model.tasks.clone(),
            vocab: self.vocab.tokens().to_vec(),
            vocab_sha256: self.vocab.fingerprint(),
            tensors: named
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (_, t) in &named {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let bad = |m: String| Error::Format {
            path: Some(path.into()),
            line: None,
            message: m,
        };
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;

        let vocab = Vocabulary::from_tokens(header.vocab)?;
        if vocab.fingerprint() != header.vocab_sha256 {
            return Err(bad("vocabulary hash mismatch".into()));
        }
        let mut model = ScaffoldModel::new(header.config, header.tasks, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let stored: Vec<(String, Vec<usize>)> =
            header.tensors.into_iter().map(|e| (e.name, e.shape)).collect();
        if expected != stored {
            return Err(bad("tensor layout does not match the model config".into()));
        }
        let mut buf = [0u8; 8];
        for t in model.params.tensors_mut() {
            for v in t.data_mut() {
                r.read_exact(&mut buf).map_err(io)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        if r.read(&mut buf).map_err(io)? != 0 {
            return Err(bad("trailing bytes after tensor data".into()));
        }
        model.params.embedding.trainable = model.config.fine_tune_embeddings;
        Ok(Checkpoint {
            model,
            vocab,
            metadata: header.metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    #[test]
    fn round_trip_is_bitwise() {
        let corpus = [tokenize("we use the method of [4] for parsing")];
        let vocab = Vocabulary::build(corpus.iter().map(Vec::as_slice), 1).unwrap();
        let config = ModelConfig {
            vocab_size: vocab.len(),
            d1_static: 5,
            sidecar_dim: 0,
            d2: 4,
            mlp_hidden: 6,
            dropout: 0.2,
            fine_tune_embeddings: true,
        };
        let labels: Vec<String> = ["background", "method", "result"].map(String::from).to_vec();
        let tasks = TaskSet::standard(&labels, 0.1, 0.05).unwrap();
        let mut model = ScaffoldModel::new(config, tasks, 99).unwrap();
        model.params.attention.w.data_mut()[0] = std::f64::consts::PI * 1e-300;
        let ck = Checkpoint {
            model,
            vocab,
            metadata: serde_json::json!({"seed": 13370}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let bits = |c: &Checkpoint| -> Vec<u64> {
            c.model.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&ck));

        let path2 = dir.path().join("again.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"hello world, not a model").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }
}
