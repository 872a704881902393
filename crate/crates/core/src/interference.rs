//! Diagnostics over sets of task vectors: row-space interference I(k),
//! reconstruction error R(k), singular spectra, rank sweeps, and a
//! sample-size calculator for subset experiments.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{reconstruct, svd, truncate, LowRankFactor};
use crate::merge::{build_task_vectors, merge, prune_ranks, Coefficients};
use crate::origin::{select_origin, weight_average, OriginMode};
use crate::tensor_store::{ParamClass, ParamClassifier, TensorMap};

/// Default rank-ratio grid for sweeps and analysis.
pub const DEFAULT_RATIOS: [f64; 8] = [0.0, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.0];

/// Row-space interference from precomputed full SVDs.
///
/// Each task contributes `W_t = Ṽ_t Σ̃_t` (n×k), where the columns of `Ṽ_t`
/// are the top-k right singular vectors and `Σ̃_t` holds the matching
/// singular values divided by the task vector's Frobenius norm. Returns
/// `Σ_i Σ_{j≠i} ‖W_iᵀ W_j‖_F`. Internally `P_t = W_tᵀ` is kept row-major.
pub fn interference_from_factors(factors: &[LowRankFactor], k: usize) -> Result<f64> {
    if factors.len() < 2 {
        return Err(Error::InsufficientTasks(factors.len()));
    }
    let max = factors.iter().map(LowRankFactor::rank).min().unwrap_or(0);
    if k == 0 || k > max {
        return Err(Error::Rank { k, max });
    }
    let mut projected = Vec::with_capacity(factors.len());
    for (task, f) in factors.iter().enumerate() {
        let norm = f.norm();
        if norm == 0.0 {
            return Err(Error::ZeroTaskVector { task, layer: String::new() });
        }
        let mut p = f.right().rows(0, k).into_owned();
        for (i, s) in f.singulars()[..k].iter().enumerate() {
            p.row_mut(i).scale_mut(s / norm);
        }
        projected.push(p);
    }
    let mut total = 0.0;
    for i in 0..projected.len() {
        for j in i + 1..projected.len() {
            total += 2.0 * (&projected[i] * projected[j].transpose()).norm();
        }
    }
    Ok(total)
}

/// I(k) for a list of task-vector matrices.
pub fn row_space_interference(deltas: &[DMatrix<f64>], k: usize) -> Result<f64> {
    let factors = deltas.iter().map(svd).collect::<Result<Vec<_>>>()?;
    interference_from_factors(&factors, k)
}

fn residual_energy(tau: &DMatrix<f64>, f: &LowRankFactor, k: usize) -> Result<f64> {
    Ok((tau - reconstruct(&truncate(f, k)?)).norm_squared())
}

/// R(k) = `Σ_t ‖τ_t − SVD_k(τ_t)‖_F²` with `τ_t = θ_t − origin`.
pub fn reconstruction_error(thetas: &[DMatrix<f64>], origin: &DMatrix<f64>, k: usize) -> Result<f64> {
    let mut total = 0.0;
    for theta in thetas {
        if theta.shape() != origin.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", theta.shape(), origin.shape())));
        }
        let tau = theta - origin;
        let f = svd(&tau)?;
        total += residual_energy(&tau, &f, k)?;
    }
    Ok(total)
}

/// Minimum number of sampled subsets so that a z-level confidence interval on
/// the mean has half-width `epsilon`, with the standard deviation bounded by
/// `(b − a) / 2` for a metric confined to `[a, b]`.
pub fn sample_size(a: f64, b: f64, epsilon: f64, z: f64) -> Result<u64> {
    if !(b > a) {
        return Err(Error::Range(format!("need b > a, got a={a}, b={b}")));
    }
    if !(epsilon > 0.0) || !(z > 0.0) {
        return Err(Error::Range(format!("epsilon and z must be positive, got {epsilon}, {z}")));
    }
    let sigma = (b - a) / 2.0;
    Ok(((z * sigma / epsilon).powi(2)).ceil().max(1.0) as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KValue {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    /// I(k) over ordered task pairs, for every requested k ≥ 1.
    pub interference: Vec<KValue>,
    pub reconstruction: Vec<KValue>,
    /// Full singular spectrum per task.
    pub spectra: Vec<Vec<f64>>,
}

/// I(k), R(k) and spectra for every matrix layer under one origin choice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterferenceReport {
    pub origin: String,
    pub layers: BTreeMap<String, LayerReport>,
}

impl InterferenceReport {
    /// Long format: `origin,layer,k,interference,reconstruction`; I is empty at k=0.
    pub fn to_csv_rows(&self, out: &mut String) {
        for (name, layer) in &self.layers {
            for r in &layer.reconstruction {
                let i = layer
                    .interference
                    .iter()
                    .find(|kv| kv.k == r.k)
                    .map(|kv| kv.value.to_string())
                    .unwrap_or_default();
                out.push_str(&format!("{},{},{},{},{}\n", self.origin, name, r.k, i, r.value));
            }
        }
    }
}

pub const REPORT_CSV_HEADER: &str = "origin,layer,k,interference,reconstruction\n";

/// Analyzes one layer's task vectors at each requested rank.
pub fn analyze_deltas(deltas: &[DMatrix<f64>], ks: &[usize]) -> Result<LayerReport> {
    let factors = deltas.iter().map(svd).collect::<Result<Vec<_>>>()?;
    let full = factors.iter().map(LowRankFactor::rank).min().unwrap_or(0);
    let mut interference = Vec::new();
    let mut reconstruction = Vec::new();
    for &k in ks.iter().filter(|&&k| k <= full) {
        let mut r = 0.0;
        for (tau, f) in deltas.iter().zip(&factors) {
            r += residual_energy(tau, f, k)?;
        }
        reconstruction.push(KValue { k, value: r });
        if k >= 1 && deltas.len() >= 2 {
            interference.push(KValue { k, value: interference_from_factors(&factors, k)? });
        }
    }
    let spectra = factors.iter().map(|f| f.singulars().to_vec()).collect();
    Ok(LayerReport { interference, reconstruction, spectra })
}

/// Per-layer analysis of task vectors measured from `origin`. `ks` empty
/// means the default ratio grid mapped to ranks per layer.
pub fn analyze(
    origin_label: &str,
    origin: &TensorMap,
    finetuned: &[TensorMap],
    classifier: &ParamClassifier,
    ks: &[usize],
    exec: Execution,
) -> Result<InterferenceReport> {
    let tvs = build_task_vectors(origin, finetuned, classifier)?;
    let names: Vec<String> = tvs.matrix_layers().map(str::to_string).collect();
    let reports = exec.try_map(&names, |name| {
        let deltas: Vec<DMatrix<f64>> =
            tvs.layer_deltas(name).unwrap().iter().map(|d| d.to_dense()).collect();
        let (m, n) = deltas[0].shape();
        let mut layer_ks: Vec<usize> = if ks.is_empty() {
            DEFAULT_RATIOS.iter().map(|&r| crate::merge::pruning_rank(r, m, n)).collect()
        } else {
            ks.to_vec()
        };
        layer_ks.sort_unstable();
        layer_ks.dedup();
        analyze_deltas(&deltas, &layer_ks).map_err(|e| match e {
            Error::ZeroTaskVector { task, .. } => Error::ZeroTaskVector { task, layer: name.clone() },
            other => other,
        })
    })?;
    Ok(InterferenceReport { origin: origin_label.to_string(), layers: names.into_iter().zip(reports).collect() })
}

/// Analysis under both the centered (mean) and the pretrained origin.
pub fn analyze_checkpoints(
    pretrained: &TensorMap,
    finetuned: &[TensorMap],
    classifier: &ParamClassifier,
    ks: &[usize],
    exec: Execution,
) -> Result<Vec<InterferenceReport>> {
    let mut all = vec![pretrained];
    all.extend(finetuned.iter());
    crate::tensor_store::validate_aligned(&all)?;
    let average = weight_average(finetuned)?;
    Ok(vec![
        analyze("centered", &average, finetuned, classifier, ks, exec)?,
        analyze("pretrained", pretrained, finetuned, classifier, ks, exec)?,
    ])
}

/// Number of matrix parameters per checkpoint under `classifier`.
pub fn matrix_layer_count(map: &TensorMap, classifier: &ParamClassifier) -> usize {
    map.entries.iter().filter(|(n, t)| classifier.classify(n, t) == ParamClass::Matrix).count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub lambda: f64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub origin: OriginMode,
    pub weight_average: Vec<f64>,
    pub pretrained: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// `ratio,lambda,task,accuracy`, one line per task per grid cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ratio,lambda,task,accuracy\n");
        for row in &self.rows {
            for (t, acc) in row.accuracies.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", row.ratio, row.lambda, t, acc));
            }
        }
        out
    }

    /// Best row whose ratio lies strictly inside (0, 1).
    pub fn best_interior(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.ratio > 0.0 && r.ratio < 1.0)
            .max_by(|a, b| a.mean.total_cmp(&b.mean))
    }

    pub fn rows_at(&self, ratio: f64) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.ratio == ratio)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn checked_eval<E>(evaluator: &E, model: &TensorMap, tasks: usize) -> Result<Vec<f64>>
where
    E: Fn(&TensorMap) -> Result<Vec<f64>> + Sync,
{
    let acc = evaluator(model).map_err(|e| match e {
        Error::Evaluation(m) => Error::Evaluation(m),
        other => Error::Evaluation(other.to_string()),
    })?;
    if acc.len() != tasks || acc.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Evaluation(format!(
            "evaluator returned {acc:?}, expected {tasks} accuracies in [0, 1]"
        )));
    }
    Ok(acc)
}

/// Evaluates the merged model on every `(ratio, λ)` cell, in ratio-major
/// grid order, and checks the rank-zero and full-rank endpoint identities.
#[allow(clippy::too_many_arguments)]
pub fn rank_sweep<E>(
    pretrained: &TensorMap,
    finetuned: &[TensorMap],
    evaluator: &E,
    lambdas: &[f64],
    ratios: &[f64],
    origin_mode: &OriginMode,
    classifier: &ParamClassifier,
    exec: Execution,
) -> Result<SweepTable>
where
    E: Fn(&TensorMap) -> Result<Vec<f64>> + Sync,
{
    let tasks = finetuned.len();
    let average = weight_average(finetuned)?;
    let weight_average_acc = checked_eval(evaluator, &average, tasks)?;
    let pretrained_acc = checked_eval(evaluator, pretrained, tasks)?;

    let origin = select_origin(origin_mode, pretrained, finetuned, classifier, exec)?.origin;
    let factored = build_task_vectors(&origin, finetuned, classifier)?.factorize(exec)?;
    let pruned = exec.try_map(ratios, |&r| prune_ranks(&factored, r, Execution::Sequential))?;

    let cells: Vec<(usize, f64)> =
        (0..ratios.len()).flat_map(|i| lambdas.iter().map(move |&l| (i, l))).collect();
    let rows = exec.try_map(&cells, |&(i, lambda)| {
        let model = merge(&pruned[i], &Coefficients::Global(lambda), Execution::Sequential)?;
        let accuracies = checked_eval(evaluator, &model, tasks)?;
        Ok::<_, Error>(SweepRow { ratio: ratios[i], lambda, mean: mean(&accuracies), accuracies })
    })?;

    for row in &rows {
        let expected = match origin_mode {
            OriginMode::Mean if row.ratio == 0.0 || row.ratio == 1.0 => &weight_average_acc,
            OriginMode::Pretrained if row.ratio == 0.0 => &pretrained_acc,
            _ => continue,
        };
        if row.accuracies != *expected {
            return Err(Error::Evaluation(format!(
                "endpoint identity failed at ratio {} lambda {}: {:?} vs {:?}",
                row.ratio, row.lambda, row.accuracies, expected
            )));
        }
    }
    Ok(SweepTable {
        origin: *origin_mode,
        weight_average: weight_average_acc,
        pretrained: pretrained_acc,
        rows,
    })
}
