//! Task vectors, rank pruning and task-arithmetic merging.
//!
//! A merged matrix layer is `origin + Σ_t λ_t · delta_t`, where each delta
//! may be rank-reduced by truncated SVD. Non-matrix parameters (biases,
//! norms, degenerate strips) are always the plain mean of the finetuned
//! checkpoints.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{reconstruct, svd, truncate, LowRankFactor};
use crate::origin::{select_origin, weight_average, OriginMode};
use crate::tensor_store::{validate_aligned, DenseTensor, ParamClass, ParamClassifier, TensorMap};

/// One task's deviation from the origin in one matrix layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Delta {
    Dense(DMatrix<f64>),
    Factored(LowRankFactor),
}

impl Delta {
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Delta::Dense(m) => m.clone(),
            Delta::Factored(f) => reconstruct(f),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Delta::Dense(m) => m.shape(),
            Delta::Factored(f) => f.shape(),
        }
    }

    pub fn norm(&self) -> f64 {
        match self {
            Delta::Dense(m) => m.norm(),
            Delta::Factored(f) => f.norm(),
        }
    }

    /// Full SVD form; dense deltas are decomposed, factors pass through.
    pub fn factored(&self) -> Result<LowRankFactor> {
        match self {
            Delta::Dense(m) => svd(m),
            Delta::Factored(f) => Ok(f.clone()),
        }
    }
}

/// An origin plus, for every matrix layer, one delta per task.
#[derive(Debug, Clone)]
pub struct TaskVectorSet {
    origin: TensorMap,
    /// layer name -> per-task deltas, in task order.
    deltas: BTreeMap<String, Vec<Delta>>,
    /// Averages of the finetuned non-matrix parameters.
    nonmatrix_mean: BTreeMap<String, DenseTensor>,
    tasks: usize,
}

impl TaskVectorSet {
    /// Assembles a set directly from parts; every layer needs one delta per
    /// task, shaped like the origin tensor.
    pub fn from_parts(
        origin: TensorMap,
        deltas: BTreeMap<String, Vec<Delta>>,
        nonmatrix_mean: BTreeMap<String, DenseTensor>,
    ) -> Result<Self> {
        let tasks = deltas.values().next().map_or(0, Vec::len);
        for (name, ds) in &deltas {
            let t = origin.get(name).ok_or_else(|| Error::ArchitectureMismatch(name.clone()))?;
            if ds.len() != tasks {
                return Err(Error::ArchitectureMismatch(name.clone()));
            }
            if ds.iter().any(|d| [d.shape().0, d.shape().1] != t.shape()) {
                return Err(Error::ArchitectureMismatch(name.clone()));
            }
        }
        Ok(Self { origin, deltas, nonmatrix_mean, tasks })
    }

    pub fn origin(&self) -> &TensorMap {
        &self.origin
    }

    pub fn task_count(&self) -> usize {
        self.tasks
    }

    pub fn matrix_layers(&self) -> impl Iterator<Item = &str> {
        self.deltas.keys().map(String::as_str)
    }

    pub fn layer_deltas(&self, layer: &str) -> Option<&[Delta]> {
        self.deltas.get(layer).map(Vec::as_slice)
    }

    pub fn delta(&self, task: usize, layer: &str) -> Option<&Delta> {
        self.deltas.get(layer)?.get(task)
    }

    pub fn nonmatrix_mean(&self) -> &BTreeMap<String, DenseTensor> {
        &self.nonmatrix_mean
    }

    fn map_deltas<F>(&self, exec: Execution, f: F) -> Result<Self>
    where
        F: Fn(&Delta) -> Result<Delta> + Sync + Send,
    {
        let layers: Vec<(&String, &Vec<Delta>)> = self.deltas.iter().collect();
        let mapped = exec.try_map(&layers, |(_, ds)| ds.iter().map(&f).collect::<Result<Vec<_>>>())?;
        let deltas = layers.iter().map(|(n, _)| (*n).clone()).zip(mapped).collect();
        Ok(Self {
            origin: self.origin.clone(),
            deltas,
            nonmatrix_mean: self.nonmatrix_mean.clone(),
            tasks: self.tasks,
        })
    }

    /// Replaces every delta with its full SVD so later pruning only truncates.
    pub fn factorize(&self, exec: Execution) -> Result<Self> {
        self.map_deltas(exec, |d| d.factored().map(Delta::Factored))
    }
}

pub fn build_task_vectors(
    origin: &TensorMap,
    finetuned: &[TensorMap],
    classifier: &ParamClassifier,
) -> Result<TaskVectorSet> {
    if finetuned.is_empty() {
        return Err(Error::EmptyInput("no finetuned checkpoints".into()));
    }
    let mut all: Vec<&TensorMap> = vec![origin];
    all.extend(finetuned.iter());
    validate_aligned(&all)?;

    let mut deltas = BTreeMap::new();
    let mut nonmatrix = BTreeMap::new();
    for (name, base) in &origin.entries {
        if classifier.classify(name, base) == ParamClass::Matrix {
            let base = base.to_matrix().expect("matrix class implies 2-D");
            let ds = finetuned
                .iter()
                .map(|m| Delta::Dense(m.entries[name].to_matrix().unwrap() - &base))
                .collect();
            deltas.insert(name.clone(), ds);
        }
    }
    let average = weight_average(finetuned)?;
    for (name, t) in average.entries {
        if !deltas.contains_key(&name) {
            nonmatrix.insert(name, t);
        }
    }
    Ok(TaskVectorSet { origin: origin.clone(), deltas, nonmatrix_mean: nonmatrix, tasks: finetuned.len() })
}

/// `⌈ratio · min(m, n)⌉`, clamped to the valid range. A tiny slack keeps
/// products such as `0.16 · 25` from rounding up past an integer.
pub fn pruning_rank(ratio: f64, rows: usize, cols: usize) -> usize {
    let full = rows.min(cols);
    let k = (ratio * full as f64 - 1e-9).ceil().max(0.0) as usize;
    k.min(full)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..=1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::Param(format!("rank ratio must lie in [0, 1], got {ratio}")))
    }
}

/// Rank-reduces every delta to `pruning_rank(ratio, m, n)`.
pub fn prune_ranks(tvs: &TaskVectorSet, ratio: f64, exec: Execution) -> Result<TaskVectorSet> {
    check_ratio(ratio)?;
    tvs.map_deltas(exec, |d| {
        let (m, n) = d.shape();
        let k = pruning_rank(ratio, m, n);
        let f = d.factored()?;
        Ok(Delta::Factored(truncate(&f, k.min(f.rank()))?))
    })
}

/// Per-task, per-layer merge coefficients; `values[t][j]` scales task `t`
/// in layer `layers[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTable {
    layers: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl CoefficientTable {
    pub fn new(layers: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let mut sorted = layers.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != layers.len() {
            return Err(Error::Plan("duplicate layer in coefficient table".into()));
        }
        if let Some(row) = values.iter().find(|r| r.len() != layers.len()) {
            return Err(Error::Plan(format!(
                "coefficient row has {} entries for {} layers",
                row.len(),
                layers.len()
            )));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Plan("coefficients must be finite".into()));
        }
        Ok(Self { layers, values })
    }

    pub fn filled(layers: Vec<String>, tasks: usize, value: f64) -> Self {
        let values = vec![vec![value; layers.len()]; tasks];
        Self { layers, values }
    }

    pub fn layers(&self) -> &[String] {
        &self.layers
    }

    pub fn tasks(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn get(&self, task: usize, layer: &str) -> Option<f64> {
        let j = self.layers.iter().position(|l| l == layer)?;
        self.values.get(task).map(|row| row[j])
    }

    pub fn set(&mut self, task: usize, layer_index: usize, value: f64) {
        self.values[task][layer_index] = value;
    }

    pub fn mean(&self) -> f64 {
        let n = self.values.iter().map(Vec::len).sum::<usize>();
        if n == 0 {
            return 0.0;
        }
        self.values.iter().flatten().sum::<f64>() / n as f64
    }

    /// Mean coefficient of one task across layers.
    pub fn task_mean(&self, task: usize) -> f64 {
        let row = &self.values[task];
        row.iter().sum::<f64>() / row.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficients {
    Global(f64),
    PerTaskLayer(CoefficientTable),
}

impl Coefficients {
    fn lookup(&self, task: usize, layer: &str) -> Result<f64> {
        match self {
            Coefficients::Global(l) => Ok(*l),
            Coefficients::PerTaskLayer(table) => table
                .get(task, layer)
                .ok_or_else(|| Error::Plan(format!("no coefficient for task {task}, layer `{layer}`"))),
        }
    }
}

/// `origin + Σ_t λ_t^l · delta_t^l` on matrix layers; averaged non-matrix
/// parameters everywhere else. Output dtypes follow the origin.
pub fn merge(tvs: &TaskVectorSet, coefficients: &Coefficients, exec: Execution) -> Result<TensorMap> {
    if let Coefficients::PerTaskLayer(table) = coefficients {
        if table.tasks() != tvs.tasks {
            return Err(Error::Plan(format!(
                "coefficient table has {} tasks, task vectors have {}",
                table.tasks(),
                tvs.tasks
            )));
        }
        if let Some(extra) = table.layers().iter().find(|l| !tvs.deltas.contains_key(*l)) {
            return Err(Error::Plan(format!("coefficient table names unknown layer `{extra}`")));
        }
    }
    let layers: Vec<(&String, &Vec<Delta>)> = tvs.deltas.iter().collect();
    let merged = exec.try_map(&layers, |(name, ds)| {
        let base = &tvs.origin.entries[*name];
        let mut acc = base.to_matrix().expect("matrix layer");
        for (t, d) in ds.iter().enumerate() {
            let lambda = coefficients.lookup(t, name)?;
            if lambda != 0.0 {
                acc += d.to_dense() * lambda;
            }
        }
        Ok(DenseTensor::from_matrix(&acc, base.dtype()))
    })?;

    let mut out = TensorMap::new();
    out.metadata = tvs.origin.metadata.clone();
    for ((name, _), t) in layers.into_iter().zip(merged) {
        out.insert(name.clone(), t);
    }
    for (name, t) in &tvs.nonmatrix_mean {
        out.insert(name.clone(), t.clone());
    }
    Ok(out)
}

/// Full merge recipe: origin choice, rank ratio and coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub origin_mode: OriginMode,
    pub rank_ratio: f64,
    pub coefficients: Coefficients,
}

impl MergePlan {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.rank_ratio)
    }

    pub fn run(
        &self,
        pretrained: &TensorMap,
        finetuned: &[TensorMap],
        classifier: &ParamClassifier,
        exec: Execution,
    ) -> Result<TensorMap> {
        self.validate()?;
        let origin = select_origin(&self.origin_mode, pretrained, finetuned, classifier, exec)?.origin;
        let tvs = build_task_vectors(&origin, finetuned, classifier)?;
        let tvs = if self.rank_ratio < 1.0 { prune_ranks(&tvs, self.rank_ratio, exec)? } else { tvs };
        merge(&tvs, &self.coefficients, exec)
    }
}

/// Centered arithmetic with rank-reduced task vectors and a global λ.
pub fn cart_merge(
    pretrained: &TensorMap,
    finetuned: &[TensorMap],
    rank_ratio: f64,
    lambda: f64,
    classifier: &ParamClassifier,
    exec: Execution,
) -> Result<TensorMap> {
    MergePlan {
        origin_mode: OriginMode::Mean,
        rank_ratio,
        coefficients: Coefficients::Global(lambda),
    }
    .run(pretrained, finetuned, classifier, exec)
}

/// Per-task reconstruction: weight average plus task `task_index`'s pruned
/// delta. Non-matrix parameters are that task's own values.
pub fn cart_indexing(
    pretrained: &TensorMap,
    finetuned: &[TensorMap],
    rank_ratio: f64,
    task_index: usize,
    classifier: &ParamClassifier,
    exec: Execution,
) -> Result<TensorMap> {
    check_ratio(rank_ratio)?;
    if task_index >= finetuned.len() {
        return Err(Error::Index { index: task_index, len: finetuned.len() });
    }
    let origin = select_origin(&OriginMode::Mean, pretrained, finetuned, classifier, exec)?.origin;
    let tvs = build_task_vectors(&origin, finetuned, classifier)?;
    let tvs = prune_ranks(&tvs, rank_ratio, exec)?;
    let layers: Vec<String> = tvs.matrix_layers().map(str::to_string).collect();
    let mut table = CoefficientTable::filled(layers, finetuned.len(), 0.0);
    for j in 0..table.layers().len() {
        table.set(task_index, j, 1.0);
    }
    let mut out = merge(&tvs, &Coefficients::PerTaskLayer(table), exec)?;
    for name in tvs.nonmatrix_mean.keys() {
        out.insert(name.clone(), finetuned[task_index].entries[name].clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StorageCost {
    pub mask_bits: u64,
    pub lowrank_bits: u64,
    pub ranks: Vec<usize>,
}

/// Bits needed to store `tasks` per-task models as binary masks versus as
/// rank-k factors (`U`, `σ`, `Vᵀ`) at `float_bits` per value.
pub fn storage_cost(
    tasks: usize,
    layer_dims: &[(usize, usize)],
    rank_ratio: f64,
    float_bits: u64,
) -> Result<StorageCost> {
    check_ratio(rank_ratio)?;
    if layer_dims.iter().any(|&(m, n)| m == 0 || n == 0) {
        return Err(Error::Param("layer dims must be positive".into()));
    }
    let t = tasks as u64;
    let ranks: Vec<usize> = layer_dims.iter().map(|&(m, n)| pruning_rank(rank_ratio, m, n)).collect();
    let mask_bits = t * layer_dims.iter().map(|&(m, n)| (m * n) as u64).sum::<u64>();
    let lowrank_bits = float_bits
        * t
        * layer_dims
            .iter()
            .zip(&ranks)
            .map(|(&(m, n), &k)| ((m + n) * k + k) as u64)
            .sum::<u64>();
    Ok(StorageCost { mask_bits, lowrank_bits, ranks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::Dtype;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn checkpoint(rng: &mut ChaCha8Rng) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("a.weight", DenseTensor::from_matrix(&random(rng, 4, 3), Dtype::F64));
        m.insert("b.weight", DenseTensor::from_matrix(&random(rng, 5, 5), Dtype::F64));
        m.insert(
            "b.bias",
            DenseTensor::from_f64(vec![5], Dtype::F64, (0..5).map(|_| rng.random()).collect())
                .unwrap(),
        );
        m
    }

    fn suite(seed: u64, tasks: usize) -> (TensorMap, Vec<TensorMap>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pre = checkpoint(&mut rng);
        let tuned = (0..tasks).map(|_| checkpoint(&mut rng)).collect();
        (pre, tuned)
    }

    fn close(a: &TensorMap, b: &TensorMap, tol: f64) -> bool {
        a.max_abs_diff(b).is_some_and(|d| d <= tol)
    }

    const SEQ: Execution = Execution::Sequential;

    #[test]
    fn deltas_from_same_checkpoint_are_zero() {
        let (pre, _) = suite(1, 1);
        let tvs = build_task_vectors(&pre, std::slice::from_ref(&pre), &Default::default()).unwrap();
        for layer in tvs.matrix_layers() {
            assert_eq!(tvs.delta(0, layer).unwrap().norm(), 0.0);
        }
        assert!(tvs.nonmatrix_mean().contains_key("b.bias"));
    }

    #[test]
    fn centered_pair_is_antisymmetric() {
        let (_, tuned) = suite(2, 2);
        let avg = weight_average(&tuned).unwrap();
        let tvs = build_task_vectors(&avg, &tuned, &Default::default()).unwrap();
        for layer in tvs.matrix_layers() {
            let a = tvs.delta(0, layer).unwrap().to_dense();
            let b = tvs.delta(1, layer).unwrap().to_dense();
            assert!((a + b).amax() < 1e-15);
        }
    }

    #[test]
    fn rank_one_update_recovered_exactly() {
        let (pre, _) = suite(3, 1);
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.25]);
        let v = DVector::from_vec(vec![0.5, 1.0, -1.0]);
        let uv = &u * v.transpose();
        let mut tuned = pre.clone();
        let w = pre.get("a.weight").unwrap().to_matrix().unwrap();
        tuned.insert("a.weight", DenseTensor::from_matrix(&(w + &uv), Dtype::F64));
        let tvs = build_task_vectors(&pre, &[tuned], &Default::default()).unwrap();
        assert!((tvs.delta(0, "a.weight").unwrap().to_dense() - uv).amax() < 1e-15);
    }

    #[test]
    fn pruning_rank_arithmetic() {
        assert_eq!(pruning_rank(0.08, 768, 768), 62);
        assert_eq!(pruning_rank(0.08, 1024, 1024), 82);
        assert_eq!(pruning_rank(0.16, 25, 40), 4);
        assert_eq!(pruning_rank(0.0, 10, 10), 0);
        assert_eq!(pruning_rank(1.0, 10, 7), 7);
    }

    #[test]
    fn ratio_zero_merge_is_origin_on_matrices() {
        let (pre, tuned) = suite(4, 3);
        let tvs = build_task_vectors(&pre, &tuned, &Default::default()).unwrap();
        let pruned = prune_ranks(&tvs, 0.0, SEQ).unwrap();
        let out = merge(&pruned, &Coefficients::Global(0.7), SEQ).unwrap();
        for layer in ["a.weight", "b.weight"] {
            assert_eq!(out.get(layer), pre.get(layer));
        }
    }

    #[test]
    fn full_ratio_centered_merge_is_weight_average() {
        let (pre, tuned) = suite(5, 3);
        let avg = weight_average(&tuned).unwrap();
        for lambda in [0.0, 0.5, 2.0] {
            let out = cart_merge(&pre, &tuned, 1.0, lambda, &Default::default(), SEQ).unwrap();
            assert!(close(&out, &avg, 1e-12));
            let pruned_full = {
                let tvs = build_task_vectors(&avg, &tuned, &Default::default()).unwrap();
                merge(&prune_ranks(&tvs, 1.0, SEQ).unwrap(), &Coefficients::Global(lambda), SEQ)
                    .unwrap()
            };
            assert!(close(&pruned_full, &avg, 1e-6));
        }
        assert!(close(&cart_merge(&pre, &tuned, 0.0, 1.3, &Default::default(), SEQ).unwrap(), &avg, 1e-12));
    }

    #[test]
    fn global_lambda_one_over_t_is_average() {
        let (pre, tuned) = suite(6, 4);
        let plan = MergePlan {
            origin_mode: OriginMode::Mean,
            rank_ratio: 1.0,
            coefficients: Coefficients::Global(0.25),
        };
        let out = plan.run(&pre, &tuned, &Default::default(), SEQ).unwrap();
        assert!(close(&out, &weight_average(&tuned).unwrap(), 1e-12));
    }

    #[test]
    fn plain_task_arithmetic() {
        let (pre, tuned) = suite(7, 2);
        let plan = MergePlan {
            origin_mode: OriginMode::Pretrained,
            rank_ratio: 1.0,
            coefficients: Coefficients::Global(1.0),
        };
        let out = plan.run(&pre, &tuned, &Default::default(), SEQ).unwrap();
        let w = |m: &TensorMap| m.get("b.weight").unwrap().to_matrix().unwrap();
        let expect = w(&tuned[0]) + w(&tuned[1]) - w(&pre);
        assert!((w(&out) - expect).amax() < 1e-12);
        let zero = MergePlan { coefficients: Coefficients::Global(0.0), ..plan };
        let out = zero.run(&pre, &tuned, &Default::default(), SEQ).unwrap();
        assert_eq!(out.get("b.weight"), pre.get("b.weight"));
    }

    #[test]
    fn missing_or_unknown_coefficients_rejected() {
        let (pre, tuned) = suite(8, 2);
        let tvs = build_task_vectors(&pre, &tuned, &Default::default()).unwrap();
        let partial = CoefficientTable::filled(vec!["a.weight".into()], 2, 1.0);
        assert!(matches!(
            merge(&tvs, &Coefficients::PerTaskLayer(partial), SEQ),
            Err(Error::Plan(_))
        ));
        let wrong_t = CoefficientTable::filled(vec!["a.weight".into(), "b.weight".into()], 3, 1.0);
        assert!(matches!(
            merge(&tvs, &Coefficients::PerTaskLayer(wrong_t), SEQ),
            Err(Error::Plan(_))
        ));
        assert!(CoefficientTable::new(vec!["x".into()], vec![vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn linearity_and_permutation() {
        let (pre, tuned) = suite(9, 3);
        let tvs = build_task_vectors(&pre, &tuned, &Default::default()).unwrap();
        let layers = vec!["a.weight".to_string(), "b.weight".to_string()];
        let lam = CoefficientTable::new(layers.clone(), vec![vec![0.1, 0.2], vec![0.3, -0.4], vec![1.0, 0.5]]).unwrap();
        let mu = CoefficientTable::new(layers.clone(), vec![vec![0.7, 0.0], vec![-0.3, 0.1], vec![0.2, 0.2]]).unwrap();
        let sum_vals: Vec<Vec<f64>> = lam
            .values()
            .iter()
            .zip(mu.values())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let sum = CoefficientTable::new(layers.clone(), sum_vals).unwrap();
        let ml = merge(&tvs, &Coefficients::PerTaskLayer(lam.clone()), SEQ).unwrap();
        let mm = merge(&tvs, &Coefficients::PerTaskLayer(mu), SEQ).unwrap();
        let ms = merge(&tvs, &Coefficients::PerTaskLayer(sum), SEQ).unwrap();
        for layer in &layers {
            let g = |m: &TensorMap| m.get(layer).unwrap().to_matrix().unwrap();
            let lhs = g(&ml) + g(&mm) - g(&pre);
            assert!((lhs - g(&ms)).amax() < 1e-9);
        }

        let perm = [2usize, 0, 1];
        let tuned_p: Vec<TensorMap> = perm.iter().map(|&i| tuned[i].clone()).collect();
        let lam_p = CoefficientTable::new(layers, perm.iter().map(|&i| lam.values()[i].clone()).collect()).unwrap();
        let tvs_p = build_task_vectors(&pre, &tuned_p, &Default::default()).unwrap();
        let mp = merge(&tvs_p, &Coefficients::PerTaskLayer(lam_p), SEQ).unwrap();
        assert!(close(&ml, &mp, 1e-12));
    }

    #[test]
    fn pruning_contracts_norms() {
        let (pre, tuned) = suite(10, 3);
        let tvs = build_task_vectors(&pre, &tuned, &Default::default()).unwrap();
        for ratio in [0.0, 0.2, 0.5, 0.9] {
            let pruned = prune_ranks(&tvs, ratio, SEQ).unwrap();
            for layer in tvs.matrix_layers() {
                for t in 0..3 {
                    let full = tvs.delta(t, layer).unwrap().norm();
                    assert!(pruned.delta(t, layer).unwrap().norm() <= full + 1e-12);
                }
            }
        }
        assert!(prune_ranks(&tvs, 1.5, SEQ).is_err());
    }

    #[test]
    fn parallel_and_sequential_merges_agree() {
        let (pre, tuned) = suite(11, 3);
        let a = cart_merge(&pre, &tuned, 0.4, 1.0, &Default::default(), Execution::Parallel).unwrap();
        let b = cart_merge(&pre, &tuned, 0.4, 1.0, &Default::default(), SEQ).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indexing_endpoints() {
        let (pre, tuned) = suite(12, 3);
        let cls = ParamClassifier::default();
        for t in 0..3 {
            let full = cart_indexing(&pre, &tuned, 1.0, t, &cls, SEQ).unwrap();
            assert!(close(&full, &tuned[t], 1e-6));
            let none = cart_indexing(&pre, &tuned, 0.0, t, &cls, SEQ).unwrap();
            let avg = weight_average(&tuned).unwrap();
            for layer in ["a.weight", "b.weight"] {
                assert_eq!(none.get(layer), avg.get(layer));
            }
        }
        assert!(matches!(cart_indexing(&pre, &tuned, 0.5, 3, &cls, SEQ), Err(Error::Index { index: 3, len: 3 })));
    }

    #[test]
    fn storage_cost_examples() {
        let c = storage_cost(1, &[(1024, 1024)], 0.08, 32).unwrap();
        assert_eq!(c.mask_bits, 1_048_576);
        assert_eq!(c.ranks, vec![82]);
        assert_eq!(c.lowrank_bits, 32 * (2 * 1024 * 82 + 82));
        assert_eq!(c.lowrank_bits, 5_376_576);
        assert_eq!(storage_cost(3, &[(10, 20)], 0.0, 32).unwrap().lowrank_bits, 0);
        for m in [2usize, 16, 64, 512] {
            let c = storage_cost(2, &[(m, m)], 1.0, 32).unwrap();
            assert!(c.lowrank_bits > c.mask_bits);
        }
    }

    #[test]
    fn plan_json_shape() {
        let plan = MergePlan {
            origin_mode: OriginMode::Mean,
            rank_ratio: 0.08,
            coefficients: Coefficients::Global(1.0),
        };
        let json = serde_json::to_value(&plan).unwrap();
        assert_eq!(json["origin_mode"]["mode"], "mean");
        assert_eq!(json["coefficients"]["global"], 1.0);
        let back: MergePlan = serde_json::from_value(json).unwrap();
        assert_eq!(back, plan);
    }
}
