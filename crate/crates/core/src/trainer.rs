//! Mixed-task mini-batching, AdaDelta with entrywise clipping, early stopping
//! on dev macro F1, and the λ grid search.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::eval::macro_f1;
use crate::gradcheck::Parameters;
use crate::model::{Example, ScaffoldModel, TaskId};
use crate::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Static embedding width when no word-vector file is given.
    pub embedding_dim: usize,
    pub d2: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub fine_tune_embeddings: bool,
    pub lambda_worthiness: f64,
    pub lambda_section: f64,
    /// Instances drawn from each task per batch.
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub clip: f64,
    pub rho: f64,
    pub eps: f64,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embedding_dim: 100,
            d2: 50,
            mlp_hidden: crate::layers::MLP_HIDDEN,
            dropout: 0.2,
            fine_tune_embeddings: false,
            lambda_worthiness: 0.1,
            lambda_section: 0.05,
            batch_size: 8,
            patience: 5,
            max_epochs: 50,
            seed: 13370,
            clip: 5.0,
            rho: 0.95,
            eps: 1e-6,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::contract(m.to_string()));
        if self.patience < 1 {
            return fail("patience must be at least 1");
        }
        if !(self.clip > 0.0) {
            return fail("clip threshold must be positive");
        }
        if !(self.lambda_worthiness >= 0.0 && self.lambda_section >= 0.0) {
            return fail("lambdas must be non-negative");
        }
        if self.batch_size < 1 || self.max_epochs < 1 || self.d2 < 1 || self.embedding_dim < 1 {
            return fail("batch_size, max_epochs, d2 and embedding_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return fail("rho must be in [0, 1) and eps positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if self.min_count < 1 {
            return fail("min_count must be at least 1");
        }
        Ok(())
    }
}

/// AdaDelta accumulators `E[g²]` and `E[Δx²]`, one buffer per parameter
/// tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub sq_grad: Vec<Vec<f64>>,
    pub sq_update: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        OptimizerState {
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }
}

/// Clamps every entry to `[-threshold, threshold]`.
pub fn clip_gradients(grads: &mut [f64], threshold: f64) -> Result<()> {
    if !(threshold > 0.0) {
        return Err(Error::contract("clip threshold must be positive"));
    }
    for g in grads {
        *g = g.clamp(-threshold, threshold);
    }
    Ok(())
}

/// One AdaDelta update over a flat buffer.
pub fn adadelta_update(x: &mut [f64], g: &[f64], sq_grad: &mut [f64], sq_update: &mut [f64], rho: f64, eps: f64) {
    for i in 0..x.len() {
        let gi = g[i];
        sq_grad[i] = rho * sq_grad[i] + (1.0 - rho) * gi * gi;
        let delta = -((sq_update[i] + eps).sqrt() / (sq_grad[i] + eps).sqrt()) * gi;
        sq_update[i] = rho * sq_update[i] + (1.0 - rho) * delta * delta;
        x[i] += delta;
    }
}

/// Applies AdaDelta to every parameter tensor. `None` marks a tensor that
/// received no gradient (e.g. frozen embeddings); it and its state are left
/// untouched.
pub fn adadelta_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &[Option<Vec<f64>>],
    state: &mut OptimizerState,
    rho: f64,
    eps: f64,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() || tensors.len() != state.sq_grad.len() {
        return Err(Error::contract("optimizer state does not match parameters"));
    }
    for (i, t) in tensors.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        if g.len() != t.len() || state.sq_grad[i].len() != t.len() {
            return Err(Error::Dimension {
                op: "adadelta_step",
                left: t.shape().to_vec(),
                right: vec![g.len()],
            });
        }
        adadelta_update(
            t.data_mut(),
            g,
            &mut state.sq_grad[i],
            &mut state.sq_update[i],
            rho,
            eps,
        );
    }
    Ok(())
}

/// Draws indices without replacement, reshuffling when exhausted.
#[derive(Clone, Debug)]
struct CyclingSampler {
    order: Vec<usize>,
    pos: usize,
}

impl CyclingSampler {
    fn new(len: usize) -> Self {
        CyclingSampler {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Indices into each task's dataset; `per_task[0]` is the main task. Every
/// task contributes the same number of instances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub per_task: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.per_task.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Produces mixed batches epoch by epoch. The main dataset is covered once
/// per epoch; auxiliary datasets cycle across epochs.
#[derive(Clone, Debug)]
pub struct MixedBatcher {
    main_len: usize,
    aux: Vec<CyclingSampler>,
}

impl MixedBatcher {
    /// `sizes[0]` is the main dataset, the rest auxiliary datasets.
    pub fn new(sizes: &[usize]) -> Result<Self> {
        match sizes {
            [] | [0, ..] => Err(Error::contract("main dataset is empty")),
            [main, aux @ ..] => {
                if aux.contains(&0) {
                    return Err(Error::contract("auxiliary dataset is empty"));
                }
                Ok(MixedBatcher {
                    main_len: *main,
                    aux: aux.iter().map(|&n| CyclingSampler::new(n)).collect(),
                })
            }
        }
    }

    /// One epoch: `⌈|D₁|/b⌉` batches, each with `b` main instances (fewer in
    /// the last) and as many from every auxiliary task.
    pub fn epoch(&mut self, b: usize, rng: &mut Rng) -> Result<Vec<BatchPlan>> {
        if b == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        let mut order: Vec<usize> = (0..self.main_len).collect();
        order.shuffle(rng);
        Ok(order
            .chunks(b)
            .map(|chunk| {
                let mut per_task = vec![chunk.to_vec()];
                for s in &mut self.aux {
                    per_task.push((0..chunk.len()).map(|_| s.next(rng)).collect());
                }
                BatchPlan { per_task }
            })
            .collect())
    }
}

/// One-shot convenience over [`MixedBatcher`] for a single epoch.
pub fn make_mixed_batches(sizes: &[usize], b: usize, rng: &mut Rng) -> Result<Vec<BatchPlan>> {
    MixedBatcher::new(sizes)?.epoch(b, rng)
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch's score; true when it is a new best.
    pub fn update(&mut self, epoch: usize, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy per instance for each task; `None` for tasks not
    /// trained (λ = 0).
    pub train_loss: Vec<Option<f64>>,
    pub dev_macro_f1: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
}

/// Training data: the main set, one set per auxiliary task (task 2, 3, …),
/// and a main-task dev set.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'d> {
    pub main: &'d [Example],
    pub scaffolds: &'d [&'d [Example]],
    pub dev: &'d [Example],
}

/// Main-task argmax predictions, computed in parallel chunks.
pub fn predict_all(model: &ScaffoldModel, examples: &[Example]) -> Result<Vec<usize>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = examples.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|ex| model.predict(&ex.tokens, ex.sidecar.as_ref()).map(|(c, _)| c))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(examples.len());
        for h in handles {
            out.extend(h.join().expect("prediction thread panicked")?);
        }
        Ok(out)
    })
}

/// Main-task dev macro F1.
pub fn evaluate_macro_f1(model: &ScaffoldModel, examples: &[Example]) -> Result<f64> {
    let preds = predict_all(model, examples)?;
    let golds: Vec<usize> = examples.iter().map(|e| e.label).collect();
    macro_f1(&golds, &preds, &model.tasks.main().labels)
}

/// Loss, backward and per-tensor gradients for one batch.
fn batch_gradients(
    model: &ScaffoldModel,
    batch: &[Example],
    rng: &mut Rng,
) -> Result<(Vec<Option<Vec<f64>>>, Vec<f64>)> {
    let mut g = Graph::new();
    let loss = model.batch_loss(&mut g, batch, Some(rng))?;
    g.backward(loss.total)?;
    let grads = model
        .tensors()
        .into_iter()
        .map(|t| g.param_grad(t).map(<[f64]>::to_vec))
        .collect();
    Ok((grads, loss.per_task))
}

/// Trains with mixed batches, AdaDelta and early stopping on dev macro F1.
/// Auxiliary tasks with λ = 0 are left out of the batches. On return the
/// model holds the parameters of the best dev epoch. `on_epoch` sees each
/// epoch record as it is produced.
pub fn train(
    model: &mut ScaffoldModel,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.dev.is_empty() {
        return Err(Error::contract("dev set is empty"));
    }
    if data.scaffolds.len() + 1 != model.tasks.len() {
        return Err(Error::contract(format!(
            "{} auxiliary datasets for {} auxiliary tasks",
            data.scaffolds.len(),
            model.tasks.len() - 1
        )));
    }
    let mut sets: Vec<(TaskId, &[Example])> = vec![(TaskId::MAIN, data.main)];
    for (i, &d) in data.scaffolds.iter().enumerate() {
        let id = TaskId(i + 2);
        if model.tasks.get(id)?.lambda > 0.0 {
            sets.push((id, d));
        }
    }
    let sizes: Vec<usize> = sets.iter().map(|(_, d)| d.len()).collect();
    let mut batcher = MixedBatcher::new(&sizes)?;

    let mut shuffle_rng = Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = OptimizerState::new(model);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params.clone();
    let mut history = TrainHistory::default();
    let n_tasks = model.tasks.len();

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let mut loss_sum = vec![0.0; n_tasks];
        let mut count = vec![0usize; n_tasks];
        for plan in batcher.epoch(cfg.batch_size, &mut shuffle_rng)? {
            let batch: Vec<Example> = plan
                .per_task
                .iter()
                .zip(&sets)
                .flat_map(|(idx, (_, d))| idx.iter().map(|&i| d[i].clone()))
                .collect();
            let (mut grads, per_task) = batch_gradients(model, &batch, &mut dropout_rng)?;
            for (t, (id, _)) in sets.iter().enumerate() {
                loss_sum[id.index()] += per_task[id.index()];
                count[id.index()] += plan.per_task[t].len();
            }
            for g in grads.iter_mut().flatten() {
                clip_gradients(g, cfg.clip)?;
            }
            adadelta_step(model, &grads, &mut state, cfg.rho, cfg.eps)?;
        }
        let dev_f1 = evaluate_macro_f1(model, data.dev)?;
        if stopper.update(epoch, dev_f1) {
            best = model.params.clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum
                .iter()
                .zip(&count)
                .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
                .collect(),
            dev_macro_f1: dev_f1,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:?} dev macro F1 {:.4}",
            record.train_loss,
            dev_f1
        );
        on_epoch(&record);
        history.epochs.push(record);
        if stopper.should_stop() {
            log::info!("no improvement for {} epochs; stopping", cfg.patience);
            break;
        }
    }
    model.params = best;
    history.best_epoch = stopper.best_epoch;
    history.best_dev_f1 = stopper.best.unwrap_or(0.0);
    Ok(history)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridMode {
    /// Every (λ₂, λ₃) pair.
    Full,
    /// λ₂ with λ₃ = 0, then λ₃ with λ₂ fixed at its best value.
    AxisAligned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub step: f64,
    pub max: f64,
    pub mode: GridMode,
}

impl GridSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        grid_values(self.step, self.max)
    }
}

/// `0, step, 2·step, …` up to `max`, rounded to 9 decimals so that e.g.
/// 0.08 and 0.09 come out exact.
pub fn grid_values(step: f64, max: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(0.0..=0.3 + 1e-12).contains(&max) {
        return Err(Error::contract("grid needs step > 0 and max within [0, 0.3]"));
    }
    let n = (max / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda_worthiness: f64,
    pub lambda_section: f64,
    pub dev_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub points: Vec<GridPoint>,
    pub best: GridPoint,
}

fn better(a: &GridPoint, b: &GridPoint) -> bool {
    let key = |p: &GridPoint| (p.lambda_worthiness + p.lambda_section, p.lambda_worthiness);
    a.dev_macro_f1 > b.dev_macro_f1 || (a.dev_macro_f1 == b.dev_macro_f1 && key(a) < key(b))
}

/// Runs `train_fn(λ₂, λ₃) → dev macro F1` over the grid and picks the best
/// point; ties go to the smaller λ.
pub fn grid_search_lambda(
    spec: &GridSpec,
    mut train_fn: impl FnMut(f64, f64) -> Result<f64>,
) -> Result<GridResult> {
    let values = spec.values()?;
    let mut points: Vec<GridPoint> = Vec::new();
    let mut run = |l2: f64, l3: f64, points: &mut Vec<GridPoint>| -> Result<GridPoint> {
        if let Some(p) = points
            .iter()
            .find(|p| p.lambda_worthiness == l2 && p.lambda_section == l3)
        {
            return Ok(*p);
        }
        let p = GridPoint {
            lambda_worthiness: l2,
            lambda_section: l3,
            dev_macro_f1: train_fn(l2, l3)?,
        };
        log::info!("grid λ₂={l2} λ₃={l3}: dev macro F1 {:.4}", p.dev_macro_f1);
        points.push(p);
        Ok(p)
    };
    match spec.mode {
        GridMode::Full => {
            for &l2 in &values {
                for &l3 in &values {
                    run(l2, l3, &mut points)?;
                }
            }
        }
        GridMode::AxisAligned => {
            let mut best2: Option<GridPoint> = None;
            for &l2 in &values {
                let p = run(l2, 0.0, &mut points)?;
                if best2.is_none_or(|b| better(&p, &b)) {
                    best2 = Some(p);
                }
            }
            let l2 = best2.map_or(0.0, |p| p.lambda_worthiness);
            for &l3 in &values {
                run(l2, l3, &mut points)?;
            }
        }
    }
    let best = points
        .iter()
        .copied()
        .reduce(|b, p| if better(&p, &b) { p } else { b })
        .ok_or_else(|| Error::contract("empty grid"))?;
    Ok(GridResult { points, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TaskSet};
    use crate::tensor::Tensor;
    use crate::Rng;
    use proptest::prelude::*;

    #[test]
    fn adadelta_first_step() {
        let (rho, eps) = (0.95, 1e-6);
        let mut x = [0.0];
        let (mut eg, mut ed) = ([0.0], [0.0]);
        adadelta_update(&mut x, &[1.0], &mut eg, &mut ed, rho, eps);
        let want = -(1e-6f64 / (0.05 + 1e-6)).sqrt();
        assert!((x[0] - want).abs() < 1e-15);
        assert!((x[0] + 0.0044719).abs() < 1e-6);
        assert!((eg[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn adadelta_zero_gradient_is_a_no_op() {
        let mut params = vec![Tensor::vector(vec![0.3, -0.7])];
        let mut state = OptimizerState::new(&params);
        let before = (params.clone(), state.clone());
        adadelta_step(&mut params, &[Some(vec![0.0, 0.0])], &mut state, 0.95, 1e-6).unwrap();
        assert_eq!((params, state), before);
    }

    #[test]
    fn adadelta_skips_tensors_without_gradient() {
        let mut params = vec![Tensor::vector(vec![1.0]), Tensor::vector(vec![1.0])];
        let mut state = OptimizerState::new(&params);
        adadelta_step(&mut params, &[None, Some(vec![1.0])], &mut state, 0.95, 1e-6).unwrap();
        assert_eq!(params[0].data(), &[1.0]);
        assert!(params[1].data()[0] < 1.0);
        assert!(adadelta_step(&mut params, &[None], &mut state, 0.95, 1e-6).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![7.3, -0.2, 10.0, -10.0];
        clip_gradients(&mut g, 5.0).unwrap();
        assert_eq!(g, [5.0, -0.2, 5.0, -5.0]);
        assert!(clip_gradients(&mut g, 0.0).is_err());
    }

    #[test]
    fn batch_composition() {
        let mut rng = Rng::seed_from_u64(0);
        let plans = make_mixed_batches(&[20, 50, 7], 8, &mut rng).unwrap();
        assert_eq!(plans.len(), 3);
        for p in &plans {
            let n = p.per_task[0].len();
            assert!(p.per_task.iter().all(|t| t.len() == n));
        }
        assert_eq!(plans.iter().map(|p| p.len()).sum::<usize>(), 60);

        let plans = make_mixed_batches(&[10, 100, 100], 8, &mut rng).unwrap();
        assert_eq!(plans.len(), 2);
        assert_eq!(plans[0].len(), 24);
        assert_eq!(plans[1].per_task.iter().map(Vec::len).collect::<Vec<_>>(), [2, 2, 2]);

        let plans = make_mixed_batches(&[5], 2, &mut rng).unwrap();
        assert!(plans.iter().all(|p| p.per_task.len() == 1));
        assert!(make_mixed_batches(&[0, 3], 2, &mut rng).is_err());
    }

    #[test]
    fn auxiliary_sampler_cycles_without_replacement() {
        let mut rng = Rng::seed_from_u64(4);
        let mut b = MixedBatcher::new(&[6, 4]).unwrap();
        let mut seen = Vec::new();
        for _ in 0..2 {
            for p in b.epoch(2, &mut rng).unwrap() {
                seen.extend(p.per_task[1].clone());
            }
        }
        assert_eq!(seen.len(), 12);
        for window in seen.chunks(4).take(3) {
            let mut w = window.to_vec();
            w.sort();
            assert_eq!(w, [0, 1, 2, 3]);
        }
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let mut s = EarlyStopping::new(5);
        let scores = [0.4, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.9];
        let mut stopped_at = None;
        for (i, &f) in scores.iter().enumerate() {
            s.update(i + 1, f);
            if s.should_stop() {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(7));
        assert_eq!(s.best_epoch, 2);
    }

    #[test]
    fn grid_values_and_counts() {
        let v = grid_values(0.01, 0.3).unwrap();
        assert_eq!(v.len(), 31);
        for want in [0.08, 0.09, 0.1, 0.05] {
            assert!(v.contains(&want), "{want}");
        }
        assert_eq!(grid_values(0.05, 0.3).unwrap().len(), 7);
        let spec = GridSpec { step: 0.05, max: 0.3, mode: GridMode::Full };
        let mut calls = 0;
        let r = grid_search_lambda(&spec, |_, _| {
            calls += 1;
            Ok(0.5)
        })
        .unwrap();
        assert_eq!(calls, 49);
        assert_eq!((r.best.lambda_worthiness, r.best.lambda_section), (0.0, 0.0));
        assert!(grid_values(0.1, 0.5).is_err());
    }

    #[test]
    fn grid_picks_argmax_and_zero_grid_is_baseline() {
        let spec = GridSpec { step: 0.01, max: 0.3, mode: GridMode::AxisAligned };
        let r = grid_search_lambda(&spec, |l2, l3| {
            Ok(1.0 - (l2 - 0.08f64).abs() - (l3 - 0.09f64).abs())
        })
        .unwrap();
        assert_eq!((r.best.lambda_worthiness, r.best.lambda_section), (0.08, 0.09));
        assert_eq!(r.points.len(), 31 + 30);

        let spec = GridSpec { step: 0.1, max: 0.0, mode: GridMode::Full };
        let r = grid_search_lambda(&spec, |_, _| Ok(0.3)).unwrap();
        assert_eq!(r.points.len(), 1);
    }

    fn toy() -> (ScaffoldModel, Vec<Example>, Vec<Example>, Vec<Example>) {
        let config = ModelConfig {
            vocab_size: 12,
            d1_static: 4,
            sidecar_dim: 0,
            d2: 3,
            mlp_hidden: 5,
            dropout: 0.2,
            fine_tune_embeddings: false,
        };
        let labels: Vec<String> = ["a", "b"].map(String::from).to_vec();
        let tasks = TaskSet::standard(&labels, 0.1, 0.0).unwrap();
        let model = ScaffoldModel::new(config, tasks, 5).unwrap();
        let ex = |i: usize, task: TaskId, label: usize| Example {
            id: format!("{i}"),
            tokens: vec![2 + i % 10, 2 + (i * 7) % 10, 2 + label],
            sidecar: None,
            task,
            label,
        };
        let main: Vec<_> = (0..10).map(|i| ex(i, TaskId::MAIN, i % 2)).collect();
        let worth: Vec<_> = (0..6).map(|i| ex(i, TaskId::WORTHINESS, i % 2)).collect();
        let sect: Vec<_> = (0..6).map(|i| ex(i, TaskId::SECTION, i % 5)).collect();
        (model, main, worth, sect)
    }

    #[test]
    fn training_is_deterministic_and_returns_best_snapshot() {
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 4,
            patience: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut model, main, worth, sect) = toy();
            let scaffolds = [worth.as_slice(), sect.as_slice()];
            let data = TrainData { main: &main, scaffolds: &scaffolds, dev: &main };
            let hist = train(&mut model, data, &cfg, |_| {}).unwrap();
            (model, hist)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(m1, m2);
        let losses = |h: &TrainHistory| h.epochs.iter().map(|e| e.train_loss.clone()).collect::<Vec<_>>();
        assert_eq!(losses(&h1), losses(&h2));
        // λ₃ = 0: the section task never enters a batch.
        assert!(h1.epochs.iter().all(|e| e.train_loss[2].is_none() && e.train_loss[1].is_some()));
        let (_, main, _, _) = toy();
        let best = h1.epochs.iter().map(|e| e.dev_macro_f1).fold(f64::MIN, f64::max);
        assert_eq!(h1.best_dev_f1, best);
        assert_eq!(evaluate_macro_f1(&m1, &main).unwrap(), best);
    }

    #[test]
    fn zero_lambdas_give_scaffold_heads_zero_gradient() {
        let (mut model, main, worth, sect) = toy();
        model.tasks.set_lambdas(&[0.0, 0.0]).unwrap();
        let mut batch = main[..3].to_vec();
        batch.extend(worth[..3].iter().cloned());
        batch.extend(sect[..3].iter().cloned());
        let mut rng = Rng::seed_from_u64(1);
        let (grads, _) = batch_gradients(&model, &batch, &mut rng).unwrap();
        let names: Vec<String> = model.params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (n, g) in names.iter().zip(&grads) {
            if n.starts_with("heads.1.") || n.starts_with("heads.2.") {
                assert!(g.as_ref().is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{n}");
            }
        }
    }

    proptest! {
        #[test]
        fn clip_bounds_entries(mut g in proptest::collection::vec(-1e3f64..1e3, 0..50)) {
            clip_gradients(&mut g, 5.0).unwrap();
            prop_assert!(g.iter().all(|v| v.abs() <= 5.0));
        }

        #[test]
        fn adadelta_descends(g in -100f64..100.0, x0 in -1f64..1.0) {
            prop_assume!(g != 0.0);
            let mut x = [x0];
            adadelta_update(&mut x, &[g], &mut [0.0], &mut [0.0], 0.95, 1e-6);
            prop_assert_eq!((x[0] - x0).signum(), -g.signum());
        }

        #[test]
        fn every_main_instance_once_per_epoch(n in 1usize..60, b in 1usize..10, seed in any::<u64>()) {
            let mut rng = Rng::seed_from_u64(seed);
            let plans = make_mixed_batches(&[n, 13, 5], b, &mut rng).unwrap();
            prop_assert_eq!(plans.len(), n.div_ceil(b));
            let mut seen: Vec<usize> = plans.iter().flat_map(|p| p.per_task[0].clone()).collect();
            seen.sort();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            for p in &plans {
                prop_assert!(p.per_task.iter().all(|t| t.len() == p.per_task[0].len()));
            }
        }
    }
}
