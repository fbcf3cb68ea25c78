//! Finite-difference gradient-check suites over every op, every layer and
//! the full multi-task model.

use rand::{Rng as _, SeedableRng};
use serde::Serialize;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheck, Parameters};
use crate::layers::{
    attention_pool, bilstm_encode, cross_entropy, embed_sequence, lstm_step, mlp_head_forward,
    AttentionQuery, LstmParams, MlpHead, TokenEmbeddingTable,
};
use crate::model::{Example, ModelConfig, ScaffoldModel, TaskSet};
use crate::tensor::Tensor;
use crate::Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Layers,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub scope: Scope,
    pub component: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Fills every parameter with uniform `[-1, 1]` values so that gates and
/// activations leave their near-linear regime.
fn spread<P: Parameters>(p: &mut P, rng: &mut Rng) {
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..=1.0);
        }
    }
}

/// Reduces any node to a scalar through a fixed random weighting, so that
/// every output entry gets a distinct upstream gradient.
fn project<'a>(g: &mut Graph<'a>, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut Rng::seed_from_u64(seed)));
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn record(scope: Scope, name: &str, r: GradCheck) -> CheckResult {
    CheckResult {
        scope,
        component: name.to_string(),
        max_rel_error: r.max_rel_error,
        entries: r.entries,
    }
}

type OpFn = for<'a> fn(&mut Graph<'a>, &'a Vec<Tensor>) -> Result<NodeId>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    fn p<'a>(g: &mut Graph<'a>, ps: &'a [Tensor]) -> Vec<NodeId> {
        ps.iter().map(|t| g.param(t)).collect()
    }
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, ps| {
            let x = p(g, ps);
            let y = g.matmul(x[0], x[1])?;
            project(g, y, 1)
        }),
        ("matvec", vec![vec![3, 4], vec![4]], |g, ps| {
            let x = p(g, ps);
            let y = g.matvec(x[0], x[1])?;
            project(g, y, 2)
        }),
        ("vecmat", vec![vec![3], vec![3, 5]], |g, ps| {
            let x = p(g, ps);
            let y = g.vecmat(x[0], x[1])?;
            project(g, y, 3)
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, ps| {
            let x = p(g, ps);
            let y = g.add(x[0], x[1])?;
            project(g, y, 4)
        }),
        ("sub", vec![vec![5], vec![5]], |g, ps| {
            let x = p(g, ps);
            let y = g.sub(x[0], x[1])?;
            project(g, y, 5)
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, ps| {
            let x = p(g, ps);
            let y = g.mul(x[0], x[1])?;
            project(g, y, 6)
        }),
        ("add_bias", vec![vec![3, 4], vec![4]], |g, ps| {
            let x = p(g, ps);
            let y = g.add_bias(x[0], x[1])?;
            project(g, y, 7)
        }),
        ("scale", vec![vec![6]], |g, ps| {
            let x = p(g, ps);
            let y = g.scale(x[0], -2.5);
            project(g, y, 8)
        }),
        ("tanh", vec![vec![7]], |g, ps| {
            let x = p(g, ps);
            let y = g.tanh(x[0]);
            project(g, y, 9)
        }),
        ("sigmoid", vec![vec![7]], |g, ps| {
            let x = p(g, ps);
            let y = g.sigmoid(x[0]);
            project(g, y, 10)
        }),
        ("relu", vec![vec![7]], |g, ps| {
            let x = p(g, ps);
            let y = g.relu(x[0]);
            project(g, y, 11)
        }),
        ("softmax", vec![vec![3, 4]], |g, ps| {
            let x = p(g, ps);
            let y = g.softmax(x[0])?;
            project(g, y, 12)
        }),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, ps| {
            let x = p(g, ps);
            let y = g.concat(x[0], x[1])?;
            project(g, y, 13)
        }),
        ("row", vec![vec![4, 3]], |g, ps| {
            let x = p(g, ps);
            let y = g.row(x[0], 2)?;
            project(g, y, 14)
        }),
        ("stack", vec![vec![3], vec![3]], |g, ps| {
            let x = p(g, ps);
            let y = g.stack(&[x[1], x[0], x[1]])?;
            project(g, y, 15)
        }),
        ("gather", vec![vec![5, 3]], |g, ps| {
            let x = p(g, ps);
            let y = g.gather(x[0], &[4, 0, 4, 2])?;
            project(g, y, 16)
        }),
        ("sum", vec![vec![2, 2]], |g, ps| {
            let x = p(g, ps);
            let y = g.tanh(x[0]);
            Ok(g.sum(y))
        }),
        ("add_n", vec![vec![4], vec![4], vec![4]], |g, ps| {
            let x = p(g, ps);
            let y = g.add_n(&x)?;
            project(g, y, 17)
        }),
        ("cross_entropy", vec![vec![5]], |g, ps| {
            let x = p(g, ps);
            g.cross_entropy(x[0], 3)
        }),
    ]
}

pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let mut params: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
            Ok(record(Scope::Ops, name, grad_check(&mut params, STEP, f)?))
        })
        .collect()
}

struct Encoder {
    table: TokenEmbeddingTable,
    fwd: LstmParams,
    bwd: LstmParams,
    query: AttentionQuery,
    head: MlpHead,
}

impl Parameters for Encoder {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.table.rows];
        v.extend(self.fwd.tensors());
        v.extend(self.bwd.tensors());
        v.push(&self.query.w);
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.table.rows];
        v.extend(self.fwd.tensors_mut());
        v.extend(self.bwd.tensors_mut());
        v.push(&mut self.query.w);
        v.extend(self.head.tensors_mut());
        v
    }
}

pub fn check_layers(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut table = TokenEmbeddingTable::random(7, 3, &mut rng);
    table.trainable = true;
    let mut p = Encoder {
        table,
        fwd: LstmParams::init(5, 2, &mut rng),
        bwd: LstmParams::init(5, 2, &mut rng),
        query: AttentionQuery::init(4, &mut rng),
        head: MlpHead::init(4, 6, 3, 0.0, &mut rng),
    };
    spread(&mut p, &mut rng);
    let ids = [2usize, 6, 3, 2, 5];
    let side = rand_tensor(&[ids.len(), 2], &mut rng);
    let side = &side;
    let x0 = rand_tensor(&[5], &mut rng);
    let x0 = &x0;
    let h_seq = rand_tensor(&[4, 4], &mut rng);
    let h_seq = &h_seq;
    let z0 = rand_tensor(&[4], &mut rng);
    let z0 = &z0;

    let mut out = Vec::new();
    out.push(record(
        Scope::Layers,
        "embed_sequence",
        grad_check(&mut p, STEP, |g, p| {
            let x = embed_sequence(g, &p.table, &ids, Some(side), "gc")?;
            project(g, x, 21)
        })?,
    ));
    out.push(record(
        Scope::Layers,
        "lstm_step",
        grad_check(&mut p, STEP, |g, p| {
            let x = g.constant(x0.clone());
            let h = g.constant(Tensor::vector(vec![0.3, -0.6]));
            let c = g.constant(Tensor::vector(vec![-0.9, 0.4]));
            let (h, c) = lstm_step(g, x, h, c, &p.fwd)?;
            let both = g.concat(h, c)?;
            project(g, both, 22)
        })?,
    ));
    out.push(record(
        Scope::Layers,
        "bilstm_encode",
        grad_check(&mut p, STEP, |g, p| {
            let x = embed_sequence(g, &p.table, &ids, Some(side), "gc")?;
            let h = bilstm_encode(g, x, &p.fwd, &p.bwd)?;
            project(g, h, 23)
        })?,
    ));
    out.push(record(
        Scope::Layers,
        "attention_pool",
        grad_check(&mut p, STEP, |g, p| {
            let h = g.constant(h_seq.clone());
            let (z, alpha) = attention_pool(g, h, &p.query)?;
            let both = g.concat(z, alpha)?;
            project(g, both, 24)
        })?,
    ));
    out.push(record(
        Scope::Layers,
        "mlp_head",
        grad_check(&mut p, STEP, |g, p| {
            let z = g.constant(z0.clone());
            let logits = mlp_head_forward(g, z, &p.head, None)?;
            project(g, logits, 25)
        })?,
    ));
    out.push(record(
        Scope::Layers,
        "encoder+head+cross_entropy",
        grad_check(&mut p, STEP, |g, p| {
            let x = embed_sequence(g, &p.table, &ids, Some(side), "gc")?;
            let h = bilstm_encode(g, x, &p.fwd, &p.bwd)?;
            let (z, _) = attention_pool(g, h, &p.query)?;
            let logits = mlp_head_forward(g, z, &p.head, None)?;
            cross_entropy(g, logits, 2)
        })?,
    ));
    Ok(out)
}

/// The three-task model with fine-tuned embeddings; `sidecar_dim > 0` adds
/// contextual vectors. Parameters are spread over `[-1, 1]`.
pub fn tiny_model(sidecar_dim: usize, seed: u64) -> Result<ScaffoldModel> {
    let config = ModelConfig {
        vocab_size: 9,
        d1_static: 3,
        sidecar_dim,
        d2: 3,
        mlp_hidden: 4,
        dropout: 0.2,
        fine_tune_embeddings: true,
    };
    let labels: Vec<String> = ["background", "method", "result"].map(String::from).to_vec();
    let tasks = TaskSet::standard(&labels, 0.1, 0.05)?;
    let mut m = ScaffoldModel::new(config, tasks, seed)?;
    spread(&mut m, &mut Rng::seed_from_u64(seed + 1));
    Ok(m)
}

/// A mixed batch with `per_task` instances from each of the three tasks.
pub fn tiny_batch(model: &ScaffoldModel, per_task: usize, seed: u64) -> Vec<Example> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (task, spec) in model.tasks.iter() {
        for i in 0..per_task {
            let n = rng.gen_range(2..=5);
            let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..model.config.vocab_size)).collect();
            let sidecar = (model.config.sidecar_dim > 0)
                .then(|| rand_tensor(&[n, model.config.sidecar_dim], &mut rng));
            out.push(Example {
                id: format!("t{}-{i}", task.0),
                tokens,
                sidecar,
                task,
                label: rng.gen_range(0..spec.labels.len()),
            });
        }
    }
    out
}

pub fn check_model(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, side) in [("scaffold model (3 tasks)", 0), ("scaffold model + contextual vectors", 2)] {
        let mut m = tiny_model(side, seed)?;
        let batch = tiny_batch(&m, 2, seed + 7);
        let batch = &batch;
        let r = grad_check(&mut m, STEP, |g, m| {
            Ok(m.batch_loss(g, batch, None)?.total)
        })?;
        out.push(record(Scope::Model, name, r));
    }
    Ok(out)
}

pub fn run(scope: Option<Scope>, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if scope.is_none_or(|s| s == Scope::Ops) {
        out.extend(check_ops(seed)?);
    }
    if scope.is_none_or(|s| s == Scope::Layers) {
        out.extend(check_layers(seed)?);
    }
    if scope.is_none_or(|s| s == Scope::Model) {
        out.extend(check_model(seed)?);
    }
    Ok(out)
}
