//! Entropy-driven test-time adaptation of merging coefficients, plus the
//! straight-through binary singular-value mask.
//!
//! Everything here runs on a small tanh network so gradients are exact and
//! cheap. Merged parameters always come from [`merge::merge`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{svd, LowRankFactor};
use crate::merge::{merge, CoefficientTable, Coefficients, Delta, TaskVectorSet};
use crate::rng::{stream, StreamRng};
use crate::suites::{gaussian, gaussian_vector, random_orthonormal};
use crate::tensor_store::{DenseTensor, Dtype, TensorMap};

pub const DEFAULT_INIT_LAMBDA: f64 = 0.3;
pub const DEFAULT_LR: f64 = 1e-2;
pub const DEFAULT_ITERS: usize = 100;

/// One unlabeled test input, routed through the head of `task`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestInput {
    pub task: usize,
    pub x: DVector<f64>,
}

/// Backbone `x ← tanh(W_l x)` for every layer but the last, which is linear,
/// followed by a fixed per-task head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassifier {
    layers: Vec<String>,
    heads: Vec<DMatrix<f64>>,
}

impl ToyClassifier {
    pub fn new(layers: Vec<String>, heads: Vec<DMatrix<f64>>) -> Result<Self> {
        if layers.is_empty() || heads.is_empty() {
            return Err(Error::Param("classifier needs at least one layer and one head".into()));
        }
        Ok(Self { layers, heads })
    }

    /// Layer names `layer0.weight`, `layer1.weight`, ...
    pub fn layer_names(count: usize) -> Vec<String> {
        (0..count).map(|l| format!("layer{l}.weight")).collect()
    }

    pub fn layers(&self) -> &[String] {
        &self.layers
    }

    pub fn heads(&self) -> &[DMatrix<f64>] {
        &self.heads
    }

    pub fn tasks(&self) -> usize {
        self.heads.len()
    }

    /// Pulls the backbone weights out of `params` and checks that shapes chain.
    pub fn weights(&self, params: &TensorMap) -> Result<Vec<DMatrix<f64>>> {
        let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len());
        for name in &self.layers {
            let w = params
                .get(name)
                .and_then(DenseTensor::to_matrix)
                .ok_or_else(|| Error::ArchitectureMismatch(format!("missing matrix layer `{name}`")))?;
            if let Some(prev) = out.last() {
                if w.ncols() != prev.nrows() {
                    return Err(Error::ArchitectureMismatch(format!(
                        "`{name}` expects {} inputs, previous layer yields {}",
                        w.ncols(),
                        prev.nrows()
                    )));
                }
            }
            out.push(w);
        }
        let features = out.last().map_or(0, DMatrix::nrows);
        if let Some(t) = self.heads.iter().position(|h| h.ncols() != features) {
            return Err(Error::ArchitectureMismatch(format!("head {t} does not read {features} features")));
        }
        Ok(out)
    }

    pub fn logits(&self, weights: &[DMatrix<f64>], input: &TestInput) -> Result<DVector<f64>> {
        Ok(self.forward(weights, input)?.1)
    }

    /// Activations per layer input (`acts[0] = x`) and the head logits.
    fn forward(&self, weights: &[DMatrix<f64>], input: &TestInput) -> Result<(Vec<DVector<f64>>, DVector<f64>)> {
        let head = self
            .heads
            .get(input.task)
            .ok_or(Error::Index { index: input.task, len: self.heads.len() })?;
        if input.x.len() != weights[0].ncols() {
            return Err(Error::Shape(format!("input has {} entries, expected {}", input.x.len(), weights[0].ncols())));
        }
        let mut acts = Vec::with_capacity(weights.len() + 1);
        acts.push(input.x.clone());
        for (l, w) in weights.iter().enumerate() {
            let z = w * &acts[l];
            acts.push(if l + 1 < weights.len() { z.map(f64::tanh) } else { z });
        }
        let logits = head * acts.last().expect("nonempty");
        Ok((acts, logits))
    }
}

fn log_softmax(z: &DVector<f64>) -> DVector<f64> {
    let max = z.max();
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.map(|v| v - lse)
}

/// Shannon entropy of `softmax(z)` and its gradient with respect to `z`.
pub fn entropy_with_grad(z: &DVector<f64>) -> (f64, DVector<f64>) {
    let logp = log_softmax(z);
    let p = logp.map(f64::exp);
    let h = -p.dot(&logp);
    let grad = DVector::from_fn(z.len(), |c, _| -p[c] * (logp[c] + h));
    (h.max(0.0), grad)
}

/// Mean softmax entropy over the batch.
pub fn entropy_loss(model: &ToyClassifier, params: &TensorMap, batch: &[TestInput]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let weights = model.weights(params)?;
    let mut total = 0.0;
    for input in batch {
        total += entropy_with_grad(&model.logits(&weights, input)?).0;
    }
    Ok(total / batch.len() as f64)
}

/// Mean entropy and its gradient with respect to every backbone weight.
fn entropy_and_weight_grads(
    model: &ToyClassifier,
    weights: &[DMatrix<f64>],
    batch: &[TestInput],
) -> Result<(f64, Vec<DMatrix<f64>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut grads: Vec<DMatrix<f64>> = weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
    let mut total = 0.0;
    for input in batch {
        let (acts, logits) = model.forward(weights, input)?;
        let (h, g_logits) = entropy_with_grad(&logits);
        total += h;
        let mut g = model.heads[input.task].tr_mul(&g_logits);
        for l in (0..weights.len()).rev() {
            if l + 1 < weights.len() {
                // tanh' = 1 − tanh²
                g.component_mul_assign(&acts[l + 1].map(|a| 1.0 - a * a));
            }
            grads[l] += &g * acts[l].transpose();
            g = weights[l].tr_mul(&g);
        }
    }
    let n = batch.len() as f64;
    for g in grads.iter_mut() {
        *g /= n;
    }
    Ok((total / n, grads))
}

/// The merged parameters for `table`, built by the merge engine.
pub fn merged_params(tvs: &TaskVectorSet, table: &CoefficientTable) -> Result<TensorMap> {
    merge(tvs, &Coefficients::PerTaskLayer(table.clone()), Execution::Sequential)
}

/// Position of each table layer in the model backbone, if it has one.
fn layer_slots(model: &ToyClassifier, tvs: &TaskVectorSet) -> Result<Vec<Option<usize>>> {
    let tvs_layers: Vec<&str> = tvs.matrix_layers().collect();
    if let Some(missing) = model.layers.iter().find(|l| !tvs_layers.contains(&l.as_str())) {
        return Err(Error::ArchitectureMismatch(format!("model layer `{missing}` has no task vectors")));
    }
    if model.tasks() != tvs.task_count() {
        return Err(Error::ArchitectureMismatch(format!(
            "model has {} heads, task vectors cover {} tasks",
            model.tasks(),
            tvs.task_count()
        )));
    }
    Ok(tvs_layers.iter().map(|name| model.layers.iter().position(|l| l == name)).collect())
}

fn table_for(tvs: &TaskVectorSet, value: f64) -> CoefficientTable {
    CoefficientTable::filled(tvs.matrix_layers().map(str::to_string).collect(), tvs.task_count(), value)
}

/// Dense deltas in table order, computed once per adaptation run.
struct DenseDeltas(Vec<Vec<DMatrix<f64>>>);

impl DenseDeltas {
    fn new(tvs: &TaskVectorSet) -> Self {
        Self(
            tvs.matrix_layers()
                .map(|l| tvs.layer_deltas(l).expect("listed layer").iter().map(Delta::to_dense).collect())
                .collect(),
        )
    }
}

fn gradient_with(
    table: &CoefficientTable,
    tvs: &TaskVectorSet,
    dense: &DenseDeltas,
    slots: &[Option<usize>],
    model: &ToyClassifier,
    batch: &[TestInput],
) -> Result<(f64, CoefficientTable)> {
    let merged = merged_params(tvs, table)?;
    let weights = model.weights(&merged)?;
    let (entropy, grads) = entropy_and_weight_grads(model, &weights, batch)?;
    let mut out = table.clone();
    for (j, slot) in slots.iter().enumerate() {
        for t in 0..table.tasks() {
            let g = slot.map_or(0.0, |s| grads[s].dot(&dense.0[j][t]));
            out.set(t, j, g);
        }
    }
    Ok((entropy, out))
}

/// Exact `∂ entropy / ∂ λ_t^l`: back-propagate to each merged weight `W^l`,
/// then `∂/∂λ_t^l = ⟨∂/∂W^l, Δ_t^l⟩`. Layers outside the model get zero.
pub fn coefficient_gradient(
    table: &CoefficientTable,
    tvs: &TaskVectorSet,
    model: &ToyClassifier,
    batch: &[TestInput],
) -> Result<CoefficientTable> {
    let slots = layer_slots(model, tvs)?;
    Ok(gradient_with(table, tvs, &DenseDeltas::new(tvs), &slots, model, batch)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub lr: f64,
    pub iters: usize,
    pub init_lambda: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { lr: DEFAULT_LR, iters: DEFAULT_ITERS, init_lambda: DEFAULT_INIT_LAMBDA }
    }
}

impl AdaptConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) || !self.init_lambda.is_finite() {
            return Err(Error::Param(format!("lr must be positive and finite, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdaptLogRecord {
    pub iter: usize,
    pub entropy: f64,
    pub mean_lambda: f64,
}

/// Log lines in iteration order; the last one is the state after the final update.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AdaptLog {
    pub records: Vec<AdaptLogRecord>,
}

impl AdaptLog {
    pub fn initial_entropy(&self) -> Option<f64> {
        self.records.first().map(|r| r.entropy)
    }

    pub fn final_entropy(&self) -> Option<f64> {
        self.records.last().map(|r| r.entropy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,entropy,mean_lambda\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{}", r.iter, r.entropy, r.mean_lambda);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub table: CoefficientTable,
    pub log: AdaptLog,
}

fn check_finite(values: &[Vec<f64>], iter: usize) -> Result<()> {
    if values.iter().flatten().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite gradient at iteration {iter}")))
    }
}

/// Plain full-batch gradient descent on entropy over every `λ_t^l`.
pub fn adapt_coefficients(
    tvs: &TaskVectorSet,
    model: &ToyClassifier,
    batch: &[TestInput],
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let slots = layer_slots(model, tvs)?;
    let dense = DenseDeltas::new(tvs);
    let mut table = table_for(tvs, cfg.init_lambda);
    let mut log = AdaptLog::default();
    for iter in 0..cfg.iters {
        let (entropy, grad) = gradient_with(&table, tvs, &dense, &slots, model, batch)?;
        log.records.push(AdaptLogRecord { iter, entropy, mean_lambda: table.mean() });
        check_finite(grad.values(), iter)?;
        for (j, _) in grad.layers().iter().enumerate() {
            for t in 0..table.tasks() {
                table.set(t, j, table.values()[t][j] - cfg.lr * grad.values()[t][j]);
            }
        }
    }
    let entropy = entropy_loss(model, &merged_params(tvs, &table)?, batch)?;
    log.records.push(AdaptLogRecord { iter: cfg.iters, entropy, mean_lambda: table.mean() });
    Ok(AdaptOutcome { table, log })
}

pub fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// `[sigmoid(a) > 0.5]`, strict, so a zero logit is off.
pub fn hard_mask(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&a| sigmoid(a) > 0.5).collect()
}

fn same_len(s: &[f64], logits: &[f64]) -> Result<()> {
    if s.len() == logits.len() {
        Ok(())
    } else {
        Err(Error::Shape(format!("{} singular values but {} mask logits", s.len(), logits.len())))
    }
}

/// Forward value of the straight-through mask: `H ⊙ s`.
pub fn ste_masked_singulars(s: &[f64], logits: &[f64]) -> Result<Vec<f64>> {
    same_len(s, logits)?;
    Ok(hard_mask(logits).iter().zip(s).map(|(&h, &v)| if h { v } else { 0.0 }).collect())
}

/// Backward pass of the straight-through mask: the gradient of the soft path
/// `sigmoid(A) ⊙ s`, given the upstream gradient on the masked singulars.
pub fn ste_backward(s: &[f64], logits: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    same_len(s, logits)?;
    same_len(s, upstream)?;
    Ok(logits
        .iter()
        .zip(s)
        .zip(upstream)
        .map(|((&a, &v), &g)| {
            let m = sigmoid(a);
            g * v * m * (1.0 - m)
        })
        .collect())
}

/// Mask logits per layer, per task; one logit per singular triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteMask {
    pub logits: BTreeMap<String, Vec<Vec<f64>>>,
}

impl SteMask {
    /// `+1` on the leading `init_k` triples, `−1` after.
    pub fn top_k(ranks: &BTreeMap<String, Vec<usize>>, init_k: usize) -> Self {
        let logits = ranks
            .iter()
            .map(|(l, rs)| {
                let per_task = rs.iter().map(|&r| (0..r).map(|i| if i < init_k { 1.0 } else { -1.0 }).collect()).collect();
                (l.clone(), per_task)
            })
            .collect();
        Self { logits }
    }

    /// Number of triples the hard mask keeps, per layer and task.
    pub fn retained_ranks(&self) -> BTreeMap<String, Vec<usize>> {
        self.logits
            .iter()
            .map(|(l, ts)| (l.clone(), ts.iter().map(|a| hard_mask(a).iter().filter(|&&h| h).count()).collect()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaRankConfig {
    pub lr: f64,
    /// Step size for the mask logits; defaults to `lr`.
    pub mask_lr: Option<f64>,
    pub iters: usize,
    pub init_k: usize,
    pub init_lambda: f64,
}

impl Default for AdaRankConfig {
    fn default() -> Self {
        Self { lr: DEFAULT_LR, mask_lr: None, iters: DEFAULT_ITERS, init_k: 1, init_lambda: DEFAULT_INIT_LAMBDA }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaRankOutcome {
    pub mask: SteMask,
    pub table: CoefficientTable,
    pub log: AdaptLog,
}

/// Task vectors with every triple's singular value replaced by its hard-masked value.
fn masked_task_vectors(
    tvs: &TaskVectorSet,
    factors: &BTreeMap<String, Vec<LowRankFactor>>,
    mask: &SteMask,
) -> Result<TaskVectorSet> {
    let mut deltas = BTreeMap::new();
    for (layer, fs) in factors {
        let masked = fs
            .iter()
            .zip(&mask.logits[layer])
            .map(|(f, a)| Ok(Delta::Factored(f.with_singulars(ste_masked_singulars(f.singulars(), a)?)?)))
            .collect::<Result<Vec<_>>>()?;
        deltas.insert(layer.clone(), masked);
    }
    TaskVectorSet::from_parts(tvs.origin().clone(), deltas, tvs.nonmatrix_mean().clone())
}

/// Joint descent on mask logits and coefficients. Each delta is replaced by
/// `U diag(H ⊙ s) Vᵀ`; the masks receive straight-through gradients.
pub fn adarank_adapt(
    tvs: &TaskVectorSet,
    model: &ToyClassifier,
    batch: &[TestInput],
    cfg: &AdaRankConfig,
) -> Result<AdaRankOutcome> {
    AdaptConfig { lr: cfg.lr, iters: cfg.iters, init_lambda: cfg.init_lambda }.validate()?;
    let mask_lr = cfg.mask_lr.unwrap_or(cfg.lr);
    if !(mask_lr.is_finite() && mask_lr > 0.0) {
        return Err(Error::Param(format!("mask lr must be positive, got {mask_lr}")));
    }
    let slots = layer_slots(model, tvs)?;
    let mut factors = BTreeMap::new();
    for layer in tvs.matrix_layers() {
        let fs = tvs.layer_deltas(layer).expect("listed layer").iter().map(Delta::factored).collect::<Result<Vec<_>>>()?;
        if let Some(f) = fs.iter().find(|f| f.rank() < cfg.init_k) {
            return Err(Error::Rank { k: cfg.init_k, max: f.rank() });
        }
        factors.insert(layer.to_string(), fs);
    }
    let ranks = factors.iter().map(|(l, fs)| (l.clone(), fs.iter().map(LowRankFactor::rank).collect())).collect();
    let mut mask = SteMask::top_k(&ranks, cfg.init_k);
    let mut table = table_for(tvs, cfg.init_lambda);
    let mut log = AdaptLog::default();

    for iter in 0..=cfg.iters {
        let masked = masked_task_vectors(tvs, &factors, &mask)?;
        let merged = merged_params(&masked, &table)?;
        let weights = model.weights(&merged)?;
        let (entropy, grads) = entropy_and_weight_grads(model, &weights, batch)?;
        log.records.push(AdaptLogRecord { iter, entropy, mean_lambda: table.mean() });
        if iter == cfg.iters {
            break;
        }
        let mut lambda_grad = table.clone();
        let mut mask_grad = mask.clone();
        for (j, (layer, fs)) in factors.iter().enumerate() {
            for (t, f) in fs.iter().enumerate() {
                let a = &mask.logits[layer][t];
                // u_iᵀ G v_i for every triple; zero when the layer is not in the model.
                let proj: Vec<f64> = match slots[j] {
                    Some(s) => {
                        let gv = &grads[s] * f.right().transpose();
                        (0..f.rank()).map(|i| f.left().column(i).dot(&gv.column(i))).collect()
                    }
                    None => vec![0.0; f.rank()],
                };
                let hard = ste_masked_singulars(f.singulars(), a)?;
                lambda_grad.set(t, j, proj.iter().zip(&hard).map(|(p, h)| p * h).sum());
                let lambda = table.values()[t][j];
                let upstream: Vec<f64> = proj.iter().map(|p| lambda * p).collect();
                mask_grad.logits.get_mut(layer).expect("layer")[t] = ste_backward(f.singulars(), a, &upstream)?;
            }
        }
        check_finite(lambda_grad.values(), iter)?;
        for gs in mask_grad.logits.values() {
            check_finite(gs, iter)?;
        }
        for j in 0..table.layers().len() {
            for t in 0..table.tasks() {
                table.set(t, j, table.values()[t][j] - cfg.lr * lambda_grad.values()[t][j]);
            }
        }
        for (layer, ts) in mask.logits.iter_mut() {
            for (a, g) in ts.iter_mut().zip(&mask_grad.logits[layer]) {
                for (ai, gi) in a.iter_mut().zip(g) {
                    *ai -= mask_lr * gi;
                }
            }
        }
    }
    Ok(AdaRankOutcome { mask, table, log })
}

/// Entropy with every (task, layer) delta truncated to its top `k` triples
/// by a hard mask, at a uniform coefficient. Oracle for rank choices.
pub fn entropy_at_hard_rank(
    tvs: &TaskVectorSet,
    model: &ToyClassifier,
    batch: &[TestInput],
    k: usize,
    lambda: f64,
) -> Result<f64> {
    let mut factors = BTreeMap::new();
    let mut ranks = BTreeMap::new();
    for layer in tvs.matrix_layers() {
        let fs = tvs.layer_deltas(layer).expect("listed layer").iter().map(Delta::factored).collect::<Result<Vec<_>>>()?;
        ranks.insert(layer.to_string(), fs.iter().map(LowRankFactor::rank).collect::<Vec<_>>());
        factors.insert(layer.to_string(), fs);
    }
    let masked = masked_task_vectors(tvs, &factors, &SteMask::top_k(&ranks, k))?;
    entropy_loss(model, &merged_params(&masked, &table_for(tvs, lambda))?, batch)
}

/// A toy classifier, its origin weights, task vectors and an unlabeled batch.
#[derive(Debug, Clone)]
pub struct AdaptationSuite {
    pub model: ToyClassifier,
    pub tvs: TaskVectorSet,
    pub batch: Vec<TestInput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyShape {
    pub width: usize,
    pub classes: usize,
    pub tasks: usize,
    pub per_task: usize,
}

impl Default for ToyShape {
    fn default() -> Self {
        Self { width: 8, classes: 4, tasks: 2, per_task: 64 }
    }
}

fn scaled_gaussian(rng: &mut StreamRng, rows: usize, cols: usize) -> DMatrix<f64> {
    gaussian(rng, rows, cols) / (cols as f64).sqrt()
}

fn toy_base(shape: ToyShape, rng: &mut StreamRng) -> (ToyClassifier, TensorMap, Vec<TestInput>) {
    let ToyShape { width, classes, tasks, per_task } = shape;
    let names = ToyClassifier::layer_names(2);
    let mut origin = TensorMap::new();
    for name in &names {
        origin.insert(name.clone(), DenseTensor::from_matrix(&scaled_gaussian(rng, width, width), Dtype::F64));
    }
    let heads = (0..tasks).map(|_| scaled_gaussian(rng, classes, width)).collect();
    let batch = (0..tasks)
        .flat_map(|task| (0..per_task).map(move |_| task))
        .map(|task| TestInput { task, x: gaussian_vector(rng, width) })
        .collect();
    (ToyClassifier { layers: names, heads }, origin, batch)
}

impl AdaptationSuite {
    /// Random origin and deltas of the given scale; for gradient checks.
    pub fn random(shape: ToyShape, delta_scale: f64, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "adapt-random");
        let (model, origin, batch) = toy_base(shape, &mut rng);
        let mut deltas = BTreeMap::new();
        for name in model.layers() {
            let ds = (0..shape.tasks)
                .map(|_| Delta::Dense(scaled_gaussian(&mut rng, shape.width, shape.width) * delta_scale))
                .collect();
            deltas.insert(name.clone(), ds);
        }
        let tvs = TaskVectorSet::from_parts(origin, deltas, BTreeMap::new())?;
        Ok(Self { model, tvs, batch })
    }

    /// Two tasks. Task 0's delta amplifies the origin (`0.6 θ₀`), sharpening
    /// every posterior. Task 1's delta is Gaussian noise at scale 0.2 whose
    /// sign, per layer, is chosen so that it raises entropy at λ = 0.
    pub fn signal_vs_noise(seed: u64) -> Result<Self> {
        let shape = ToyShape::default();
        let mut rng = stream(seed, "adapt-signal-noise");
        let (model, origin, batch) = toy_base(shape, &mut rng);
        let mut deltas = BTreeMap::new();
        for name in model.layers() {
            let w = origin.get(name).and_then(DenseTensor::to_matrix).expect("origin layer");
            let noise = scaled_gaussian(&mut rng, shape.width, shape.width) * 0.2;
            deltas.insert(name.clone(), vec![Delta::Dense(w * 0.6), Delta::Dense(noise)]);
        }
        let mut tvs = TaskVectorSet::from_parts(origin, deltas, BTreeMap::new())?;
        let grad = coefficient_gradient(&table_for(&tvs, 0.0), &tvs, &model, &batch)?;
        let mut deltas = BTreeMap::new();
        for (j, layer) in grad.layers().iter().enumerate() {
            let mut ds = tvs.layer_deltas(layer).expect("layer").to_vec();
            if grad.values()[1][j] < 0.0 {
                ds[1] = Delta::Dense(-ds[1].to_dense());
            }
            deltas.insert(layer.clone(), ds);
        }
        tvs = TaskVectorSet::from_parts(tvs.origin().clone(), deltas, BTreeMap::new())?;
        Ok(Self { model, tvs, batch })
    }

    /// Two tasks whose deltas, per layer, are `0.6×` the origin's top
    /// `signal_rank` triples plus `noise_rank` weaker triples in the
    /// orthogonal complement. Each noise triple's sign is set so that, with
    /// only the signal kept and λ = 0.3, switching it on raises entropy.
    pub fn trailing_noise(seed: u64, signal_rank: usize, noise_rank: usize) -> Result<Self> {
        let shape = ToyShape::default();
        let width = shape.width;
        if signal_rank + noise_rank > width || signal_rank == 0 {
            return Err(Error::Param(format!("ranks {signal_rank} + {noise_rank} do not fit width {width}")));
        }
        let mut rng = stream(seed, "adapt-trailing-noise");
        let (model, origin, batch) = toy_base(shape, &mut rng);
        let rank = signal_rank + noise_rank;
        let mut factors = BTreeMap::new();
        for name in model.layers() {
            let w = svd(&origin.get(name).and_then(DenseTensor::to_matrix).expect("origin layer"))?;
            let floor = 0.6 * w.singulars()[signal_rank - 1];
            let mut per_task = Vec::new();
            for _ in 0..shape.tasks {
                let uc = w.left().columns(signal_rank, width - signal_rank)
                    * random_orthonormal(&mut rng, width - signal_rank, noise_rank);
                let vc = w.right().rows(signal_rank, width - signal_rank).transpose()
                    * random_orthonormal(&mut rng, width - signal_rank, noise_rank);
                let mut left = DMatrix::zeros(width, rank);
                let mut right = DMatrix::zeros(rank, width);
                left.columns_mut(0, signal_rank).copy_from(&w.left().columns(0, signal_rank));
                left.columns_mut(signal_rank, noise_rank).copy_from(&uc);
                right.rows_mut(0, signal_rank).copy_from(&w.right().rows(0, signal_rank));
                right.rows_mut(signal_rank, noise_rank).copy_from(&vc.transpose());
                let mut s: Vec<f64> = w.singulars()[..signal_rank].iter().map(|v| 0.6 * v).collect();
                s.extend((0..noise_rank).map(|i| {
                    let frac = if noise_rank > 1 { i as f64 / (noise_rank - 1) as f64 } else { 0.0 };
                    0.3 * floor * (0.9 - 0.4 * frac)
                }));
                per_task.push(LowRankFactor::from_parts(left, s, right)?);
            }
            factors.insert(name.clone(), per_task);
        }

        // Orient noise triples against the signal-only model.
        let ranks: BTreeMap<String, Vec<usize>> =
            factors.iter().map(|(l, fs)| (l.clone(), vec![rank; fs.len()])).collect();
        let probe_tvs = TaskVectorSet::from_parts(
            origin.clone(),
            factors.iter().map(|(l, fs)| (l.clone(), fs.iter().cloned().map(Delta::Factored).collect())).collect(),
            BTreeMap::new(),
        )?;
        let signal_only = masked_task_vectors(&probe_tvs, &factors, &SteMask::top_k(&ranks, signal_rank))?;
        let merged = merged_params(&signal_only, &table_for(&probe_tvs, DEFAULT_INIT_LAMBDA))?;
        let weights = model.weights(&merged)?;
        let (_, grads) = entropy_and_weight_grads(&model, &weights, &batch)?;
        let mut deltas = BTreeMap::new();
        for (name, fs) in factors {
            let slot = model.layers().iter().position(|l| *l == name).expect("model layer");
            let mut ds = Vec::new();
            for f in fs {
                let mut left = f.left().clone();
                for i in signal_rank..rank {
                    let dir = left.column(i) * f.right().row(i);
                    if grads[slot].dot(&dir) < 0.0 {
                        left.column_mut(i).neg_mut();
                    }
                }
                ds.push(Delta::Factored(LowRankFactor::from_parts(left, f.singulars().to_vec(), f.right().clone())?));
            }
            deltas.insert(name, ds);
        }
        let tvs = TaskVectorSet::from_parts(origin, deltas, BTreeMap::new())?;
        Ok(Self { model, tvs, batch })
    }

    pub fn entropy_at(&self, table: &CoefficientTable) -> Result<f64> {
        entropy_loss(&self.model, &merged_params(&self.tvs, table)?, &self.batch)
    }

    pub fn table(&self, value: f64) -> CoefficientTable {
        table_for(&self.tvs, value)
    }
}

/// Mean over layers of each task's coefficient.
pub fn task_means(table: &CoefficientTable) -> Vec<f64> {
    (0..table.tasks()).map(|t| table.task_mean(t)).collect()
}
