//! The multitask scaffold model: one shared encoder, one head per task, and
//! the λ-weighted joint loss.

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, NodeId};
use crate::error::{Error, Result};
use crate::gradcheck::Parameters;
use crate::layers::{
    attention_pool, bilstm_encode, cross_entropy, embed_sequence, mlp_head_forward,
    AttentionQuery, LstmParams, MlpHead, TokenEmbeddingTable, MLP_HIDDEN,
};
use crate::tensor::Tensor;
use crate::Rng;

/// 1-based task index; task 1 is citation intent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub usize);

impl TaskId {
    pub const MAIN: TaskId = TaskId(1);
    pub const WORTHINESS: TaskId = TaskId(2);
    pub const SECTION: TaskId = TaskId(3);

    pub fn index(self) -> usize {
        self.0 - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub labels: Vec<String>,
    /// Loss weight; always 1 for the main task.
    pub lambda: f64,
}

/// Ordered task registry. Position `i` holds task id `i + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TaskSpec>", into = "Vec<TaskSpec>")]
pub struct TaskSet {
    tasks: Vec<TaskSpec>,
}

impl TaskSet {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::contract("at least the main task is required"));
        }
        if tasks[0].lambda != 1.0 {
            return Err(Error::contract("the main task's lambda is fixed at 1"));
        }
        for t in &tasks {
            if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
                return Err(Error::contract(format!(
                    "task {} has invalid lambda {}",
                    t.name, t.lambda
                )));
            }
            if t.labels.is_empty() {
                return Err(Error::contract(format!("task {} has no labels", t.name)));
            }
        }
        Ok(TaskSet { tasks })
    }

    /// Main task plus the worthiness and section scaffolds.
    pub fn standard(main_labels: &[String], lambda_worthiness: f64, lambda_section: f64) -> Result<Self> {
        TaskSet::new(vec![
            TaskSpec {
                name: "intent".into(),
                labels: main_labels.to_vec(),
                lambda: 1.0,
            },
            TaskSpec {
                name: "worthiness".into(),
                labels: crate::data::LabelSet::worthiness().names().to_vec(),
                lambda: lambda_worthiness,
            },
            TaskSpec {
                name: "section".into(),
                labels: crate::data::LabelSet::sections().names().to_vec(),
                lambda: lambda_section,
            },
        ])
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, id: TaskId) -> Result<&TaskSpec> {
        if id.0 == 0 {
            return Err(Error::contract("task ids start at 1"));
        }
        self.tasks
            .get(id.index())
            .ok_or_else(|| Error::contract(format!("unknown task id {}", id.0)))
    }

    pub fn main(&self) -> &TaskSpec {
        &self.tasks[0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaskId, &TaskSpec)> {
        self.tasks.iter().enumerate().map(|(i, t)| (TaskId(i + 1), t))
    }

    /// Replaces the scaffold weights `λ₂..λₙ`.
    pub fn set_lambdas(&mut self, lambdas: &[f64]) -> Result<()> {
        if lambdas.len() != self.tasks.len() - 1 {
            return Err(Error::contract(format!(
                "expected {} scaffold lambdas, got {}",
                self.tasks.len() - 1,
                lambdas.len()
            )));
        }
        let mut next = self.tasks.clone();
        for (t, &l) in next[1..].iter_mut().zip(lambdas) {
            t.lambda = l;
        }
        *self = TaskSet::new(next)?;
        Ok(())
    }
}

impl TryFrom<Vec<TaskSpec>> for TaskSet {
    type Error = Error;
    fn try_from(v: Vec<TaskSpec>) -> Result<Self> {
        TaskSet::new(v)
    }
}

impl From<TaskSet> for Vec<TaskSpec> {
    fn from(t: TaskSet) -> Self {
        t.tasks
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Width of the static word vectors.
    pub d1_static: usize,
    /// Width of precomputed contextual vectors; 0 when none are used.
    #[serde(default)]
    pub sidecar_dim: usize,
    /// LSTM hidden size per direction.
    pub d2: usize,
    #[serde(default = "default_hidden")]
    pub mlp_hidden: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub fine_tune_embeddings: bool,
}

fn default_hidden() -> usize {
    MLP_HIDDEN
}

fn default_dropout() -> f64 {
    0.2
}

impl ModelConfig {
    pub fn d1(&self) -> usize {
        self.d1_static + self.sidecar_dim
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d1_static == 0 || self.d2 == 0 || self.mlp_hidden == 0 {
            return Err(Error::contract(format!("model dimensions must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// All learnable weights. The encoder exists once and is shared by every head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embedding: TokenEmbeddingTable,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub attention: AttentionQuery,
    pub heads: Vec<MlpHead>,
}

impl ModelParams {
    /// Stable `(name, tensor)` listing used by checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding.rows)];
        for (dir, p) in [("forward", &self.forward), ("backward", &self.backward)] {
            for (n, t) in LstmParams::NAMES.iter().zip(p.tensors()) {
                out.push((format!("{dir}.{n}"), t));
            }
        }
        out.push(("attention.w".into(), &self.attention.w));
        for (i, h) in self.heads.iter().enumerate() {
            for (n, t) in MlpHead::NAMES.iter().zip(h.tensors()) {
                out.push((format!("heads.{i}.{n}"), t));
            }
        }
        out
    }
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding.rows];
        out.extend(self.forward.tensors_mut());
        out.extend(self.backward.tensors_mut());
        out.push(&mut self.attention.w);
        for h in &mut self.heads {
            out.extend(h.tensors_mut());
        }
        out
    }
}

/// Deterministic initialization: equal `(config, tasks, seed)` give bitwise
/// equal parameters.
pub fn init_params(config: &ModelConfig, tasks: &TaskSet, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let mut embedding = TokenEmbeddingTable::random(config.vocab_size, config.d1_static, &mut rng);
    embedding.trainable = config.fine_tune_embeddings;
    let forward = LstmParams::init(config.d1(), config.d2, &mut rng);
    let backward = LstmParams::init(config.d1(), config.d2, &mut rng);
    let attention = AttentionQuery::init(2 * config.d2, &mut rng);
    let heads = tasks
        .iter()
        .map(|(_, t)| MlpHead::init(2 * config.d2, config.mlp_hidden, t.labels.len(), config.dropout, &mut rng))
        .collect();
    Ok(ModelParams {
        embedding,
        forward,
        backward,
        attention,
        heads,
    })
}

/// A tokenized, label-indexed training or evaluation instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<usize>,
    /// Per-token contextual vectors, `tokens.len() × sidecar_dim`.
    pub sidecar: Option<Tensor>,
    pub task: TaskId,
    pub label: usize,
}

/// Output of a single forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub attention: Vec<f64>,
    /// Pooled encoder output.
    pub pooled: Vec<f64>,
}

/// How a class is chosen from the main task's distribution.
#[derive(Debug)]
pub enum Inference<'r> {
    /// Highest probability, ties to the lowest class index.
    Argmax,
    /// Draw from the output distribution.
    Sample(&'r mut Rng),
}

/// Loss node of a batch plus per-task unweighted cross-entropy sums.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: NodeId,
    pub per_task: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaffoldModel {
    pub config: ModelConfig,
    pub tasks: TaskSet,
    pub params: ModelParams,
}

impl ScaffoldModel {
    pub fn new(config: ModelConfig, tasks: TaskSet, seed: u64) -> Result<Self> {
        let params = init_params(&config, &tasks, seed)?;
        Ok(ScaffoldModel {
            config,
            tasks,
            params,
        })
    }

    /// Checks that the parameters agree with the config and task set.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let p = &self.params;
        let d2 = self.config.d2;
        let ok = p.embedding.rows.shape() == [self.config.vocab_size, self.config.d1_static]
            && p.forward.hidden_dim() == d2
            && p.backward.hidden_dim() == d2
            && p.forward.input_dim() == self.config.d1()
            && p.attention.w.shape() == [2 * d2]
            && p.heads.len() == self.tasks.len()
            && p
                .heads
                .iter()
                .zip(self.tasks.iter())
                .all(|(h, (_, t))| h.num_classes() == t.labels.len());
        if ok {
            Ok(())
        } else {
            Err(Error::contract("model parameters do not match config/tasks"))
        }
    }

    /// Shared encoder: embedding → BiLSTM → attention. Returns `(z, alpha)`.
    pub fn encode<'a>(
        &'a self,
        g: &mut Graph<'a>,
        tokens: &[usize],
        sidecar: Option<&Tensor>,
        id: &str,
    ) -> Result<(NodeId, NodeId)> {
        if tokens.is_empty() {
            return Err(Error::data(format!("instance {id} has no tokens")));
        }
        if sidecar.is_some() != (self.config.sidecar_dim > 0) {
            return Err(Error::data(format!(
                "instance {id}: contextual vectors {} but the model expects {}",
                if sidecar.is_some() { "given" } else { "missing" },
                if self.config.sidecar_dim > 0 { "them" } else { "none" }
            )));
        }
        let p = &self.params;
        let x = embed_sequence(g, &p.embedding, tokens, sidecar, id)?;
        let h = bilstm_encode(g, x, &p.forward, &p.backward)?;
        attention_pool(g, h, &p.attention)
    }

    /// Logits of one task's head on the pooled vector.
    pub fn head_logits<'a>(
        &'a self,
        g: &mut Graph<'a>,
        z: NodeId,
        task: TaskId,
        rng: Option<&mut Rng>,
    ) -> Result<NodeId> {
        self.tasks.get(task)?;
        mlp_head_forward(g, z, &self.params.heads[task.index()], rng)
    }

    /// Class probabilities `softmax(MLP_task(z))` and attention weights.
    pub fn forward(
        &self,
        tokens: &[usize],
        sidecar: Option<&Tensor>,
        task: TaskId,
        rng: Option<&mut Rng>,
    ) -> Result<Forward> {
        self.tasks.get(task)?;
        let mut g = Graph::new();
        let (z, alpha) = self.encode(&mut g, tokens, sidecar, "")?;
        let logits = self.head_logits(&mut g, z, task, rng)?;
        let logits = g.value(logits).data().to_vec();
        Ok(Forward {
            probs: softmax(&logits),
            logits,
            attention: g.value(alpha).data().to_vec(),
            pooled: g.value(z).data().to_vec(),
        })
    }

    /// Joint loss `Σ_{D₁} L₁ + Σᵢ λᵢ Σ_{Dᵢ} Lᵢ` over a mixed batch. Each
    /// instance passes only through its own task's head. Dropout is active
    /// when `rng` is given.
    pub fn batch_loss<'a>(
        &'a self,
        g: &mut Graph<'a>,
        batch: &[Example],
        mut rng: Option<&mut Rng>,
    ) -> Result<BatchLoss> {
        let n_tasks = self.tasks.len();
        let mut per_task = vec![0.0; n_tasks];
        let mut counts = vec![0; n_tasks];
        let mut terms = Vec::with_capacity(batch.len());
        for ex in batch {
            let spec = self.tasks.get(ex.task)?;
            if ex.label >= spec.labels.len() {
                return Err(Error::data(format!(
                    "instance {}: label {} outside the {} labels of task {}",
                    ex.id,
                    ex.label,
                    spec.labels.len(),
                    spec.name
                )));
            }
            let (z, _) = self.encode(g, &ex.tokens, ex.sidecar.as_ref(), &ex.id)?;
            let logits = self.head_logits(g, z, ex.task, rng.as_deref_mut())?;
            let ce = cross_entropy(g, logits, ex.label)?;
            per_task[ex.task.index()] += g.value(ce).item();
            counts[ex.task.index()] += 1;
            terms.push(if ex.task == TaskId::MAIN {
                ce
            } else {
                g.scale(ce, spec.lambda)
            });
        }
        let total = if terms.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            g.add_n(&terms)?
        };
        Ok(BatchLoss {
            total,
            per_task,
            counts,
        })
    }

    /// Scalar value of [`ScaffoldModel::batch_loss`] without dropout.
    pub fn batch_loss_value(&self, batch: &[Example]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.batch_loss(&mut g, batch, None)?;
        Ok(g.value(loss.total).item())
    }

    /// Main-task prediction and the attention weights that produced it.
    pub fn predict(&self, tokens: &[usize], sidecar: Option<&Tensor>) -> Result<(usize, Vec<f64>)> {
        self.predict_with(tokens, sidecar, Inference::Argmax)
    }

    pub fn predict_with(
        &self,
        tokens: &[usize],
        sidecar: Option<&Tensor>,
        mode: Inference<'_>,
    ) -> Result<(usize, Vec<f64>)> {
        let out = self.forward(tokens, sidecar, TaskId::MAIN, None)?;
        let class = match mode {
            Inference::Argmax => argmax(&out.probs),
            Inference::Sample(rng) => sample(&out.probs, rng),
        };
        Ok((class, out.attention))
    }
}

impl Parameters for ScaffoldModel {
    fn tensors(&self) -> Vec<&Tensor> {
        self.params.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.tensors_mut()
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
