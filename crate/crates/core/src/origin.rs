//! Choosing the point task vectors are measured from: the pretrained
//! checkpoint, the elementwise mean (the minimizer of the summed pairwise
//! task-vector similarity), or a nuclear-norm minimizing origin found by
//! subgradient descent.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{frobenius_inner, nuclear_norm, nuclear_subgradient, numerical_rank, singular_values};
use crate::tensor_store::{validate_aligned, DenseTensor, ParamClass, ParamClassifier, TensorMap};

pub const DEFAULT_RANKMIN_STEPS: usize = 200;

/// Parameters of the nuclear-norm origin search. `step_size = None` picks
/// `0.1 ×` the mean nonzero singular value of the warm-start task vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRankMin")]
pub struct RankMinConfig {
    steps: usize,
    step_size: Option<f64>,
}

#[derive(Deserialize)]
struct RawRankMin {
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default)]
    step_size: Option<f64>,
}

fn default_steps() -> usize {
    DEFAULT_RANKMIN_STEPS
}

impl TryFrom<RawRankMin> for RankMinConfig {
    type Error = Error;
    fn try_from(raw: RawRankMin) -> Result<Self> {
        RankMinConfig::new(raw.steps, raw.step_size)
    }
}

impl RankMinConfig {
    pub fn new(steps: usize, step_size: Option<f64>) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Param("RankMin needs at least one step".into()));
        }
        if let Some(eta) = step_size {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::Param(format!("RankMin step size must be positive, got {eta}")));
            }
        }
        Ok(Self { steps, step_size })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step_size(&self) -> Option<f64> {
        self.step_size
    }
}

impl Default for RankMinConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_RANKMIN_STEPS, step_size: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum OriginMode {
    Pretrained,
    #[default]
    Mean,
    #[serde(rename = "rankmin")]
    RankMin(RankMinConfig),
}

impl std::str::FromStr for OriginMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(OriginMode::Pretrained),
            "mean" => Ok(OriginMode::Mean),
            "rankmin" => Ok(OriginMode::RankMin(RankMinConfig::default())),
            other => Err(Error::Param(format!("unknown origin mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub nuclear_sum: f64,
    pub fip_abs_sum: f64,
}

/// Objective history of one RankMin run. Record 0 is the warm start.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolverTrace {
    pub records: Vec<TraceRecord>,
}

impl SolverTrace {
    pub fn first(&self) -> Option<&TraceRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn best_nuclear(&self) -> Option<f64> {
        self.records.iter().map(|r| r.nuclear_sum).reduce(f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,nuclear_sum,fip_abs_sum\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.step, r.nuclear_sum, r.fip_abs_sum));
        }
        out
    }
}

fn check_shapes(layers: &[DMatrix<f64>]) -> Result<()> {
    let first = layers.first().ok_or_else(|| Error::EmptyInput("no layers".into()))?;
    if let Some(bad) = layers.iter().find(|l| l.shape() != first.shape()) {
        return Err(Error::Shape(format!("{:?} vs {:?}", bad.shape(), first.shape())));
    }
    Ok(())
}

pub fn mean_origin(layers: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    check_shapes(layers)?;
    let mut sum = layers[0].clone();
    for l in &layers[1..] {
        sum += l;
    }
    Ok(sum / layers.len() as f64)
}

/// `Σ_t Σ_{t'<t} ⟨θ_t − origin, θ_{t'} − origin⟩_F`.
pub fn simmin_objective(origin: &DMatrix<f64>, layers: &[DMatrix<f64>]) -> Result<f64> {
    if layers.len() < 2 {
        return Err(Error::InsufficientTasks(layers.len()));
    }
    check_shapes(layers)?;
    let taus: Vec<DMatrix<f64>> = layers.iter().map(|l| l - origin).collect();
    let mut total = 0.0;
    for t in 1..taus.len() {
        for s in 0..t {
            total += frobenius_inner(&taus[t], &taus[s])?;
        }
    }
    Ok(total)
}

/// `Σ_t ‖θ_t − origin‖_*`.
pub fn rankmin_objective(origin: &DMatrix<f64>, layers: &[DMatrix<f64>]) -> Result<f64> {
    layers.iter().map(|l| nuclear_norm(&(l - origin))).sum()
}

/// `Σ_t Σ_{t'<t} |⟨θ_t − origin, θ_{t'} − origin⟩_F|`.
pub fn fip_abs_objective(origin: &DMatrix<f64>, layers: &[DMatrix<f64>]) -> Result<f64> {
    let taus: Vec<DMatrix<f64>> = layers.iter().map(|l| l - origin).collect();
    let mut total = 0.0;
    for t in 1..taus.len() {
        for s in 0..t {
            total += frobenius_inner(&taus[t], &taus[s])?.abs();
        }
    }
    Ok(total)
}

/// Subgradient descent on `Σ_t ‖θ_t − θ‖_*`, warm-started at the mean,
/// with step `η / √s` at step `s`. Returns the best iterate seen.
pub fn rankmin_origin(
    layers: &[DMatrix<f64>],
    config: &RankMinConfig,
) -> Result<(DMatrix<f64>, SolverTrace)> {
    let mut theta = mean_origin(layers)?;
    let mut trace = SolverTrace::default();
    if layers.len() == 1 {
        return Ok((theta, trace));
    }
    let record = |step: usize, theta: &DMatrix<f64>| -> Result<TraceRecord> {
        Ok(TraceRecord {
            step,
            nuclear_sum: rankmin_objective(theta, layers)?,
            fip_abs_sum: fip_abs_objective(theta, layers)?,
        })
    };
    let initial = record(0, &theta)?;
    trace.records.push(initial);
    if initial.nuclear_sum == 0.0 {
        return Ok((theta, trace));
    }

    let eta = match config.step_size {
        Some(eta) => eta,
        None => {
            let mut spectrum = Vec::new();
            for l in layers {
                let s = singular_values(&(l - &theta))?;
                let r = numerical_rank(&s);
                spectrum.extend_from_slice(&s[..r]);
            }
            if spectrum.is_empty() {
                return Ok((theta, trace));
            }
            0.1 * spectrum.iter().sum::<f64>() / spectrum.len() as f64
        }
    };

    let inv_t = 1.0 / layers.len() as f64;
    let mut best = (initial.nuclear_sum, theta.clone());
    for step in 1..=config.steps {
        let mut direction = DMatrix::zeros(theta.nrows(), theta.ncols());
        for l in layers {
            direction += nuclear_subgradient(&(l - &theta))?;
        }
        theta += direction * (inv_t * eta / (step as f64).sqrt());
        let rec = record(step, &theta)?;
        if !rec.nuclear_sum.is_finite() || rec.nuclear_sum > 10.0 * initial.nuclear_sum {
            return Err(Error::Divergence {
                step,
                objective: rec.nuclear_sum,
                initial: initial.nuclear_sum,
            });
        }
        if rec.nuclear_sum < best.0 {
            best = (rec.nuclear_sum, theta.clone());
        }
        trace.records.push(rec);
    }
    Ok((best.1, trace))
}

/// A chosen origin plus the per-layer RankMin traces (empty otherwise).
#[derive(Debug, Clone)]
pub struct OriginSelection {
    pub origin: TensorMap,
    pub traces: BTreeMap<String, SolverTrace>,
}

fn elementwise_mean(tensors: &[&DenseTensor]) -> DenseTensor {
    let mut acc = tensors[0].to_f64();
    for t in &tensors[1..] {
        acc.iter_mut().zip(t.to_f64()).for_each(|(a, b)| *a += b);
    }
    let n = tensors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    DenseTensor::from_f64(tensors[0].shape().to_vec(), tensors[0].dtype(), acc)
        .expect("shape taken from an existing tensor")
}

/// Elementwise mean of whole checkpoints, keeping the stored dtype.
pub fn weight_average(finetuned: &[TensorMap]) -> Result<TensorMap> {
    let first = finetuned.first().ok_or_else(|| Error::EmptyInput("no checkpoints".into()))?;
    if finetuned.len() > 1 {
        validate_aligned(&finetuned.iter().collect::<Vec<_>>())?;
    }
    let mut out = TensorMap::new();
    for name in first.names() {
        let group: Vec<&DenseTensor> = finetuned.iter().map(|m| &m.entries[name]).collect();
        out.insert(name, elementwise_mean(&group));
    }
    Ok(out)
}

pub fn select_origin(
    mode: &OriginMode,
    pretrained: &TensorMap,
    finetuned: &[TensorMap],
    classifier: &ParamClassifier,
    exec: Execution,
) -> Result<OriginSelection> {
    if finetuned.is_empty() {
        return Err(Error::EmptyInput("no finetuned checkpoints".into()));
    }
    let mut all: Vec<&TensorMap> = vec![pretrained];
    all.extend(finetuned.iter());
    validate_aligned(&all)?;

    let config = match mode {
        OriginMode::Pretrained => {
            return Ok(OriginSelection { origin: pretrained.clone(), traces: BTreeMap::new() })
        }
        OriginMode::Mean => {
            return Ok(OriginSelection { origin: weight_average(finetuned)?, traces: BTreeMap::new() })
        }
        OriginMode::RankMin(config) => config,
    };

    let mut origin = weight_average(finetuned)?;
    let matrix_names: Vec<String> = pretrained
        .entries
        .iter()
        .filter(|(name, t)| classifier.classify(name, t) == ParamClass::Matrix)
        .map(|(name, _)| name.clone())
        .collect();
    let solved = exec.try_map(&matrix_names, |name| {
        let layers: Vec<DMatrix<f64>> = finetuned
            .iter()
            .map(|m| m.entries[name].to_matrix().expect("matrix class implies 2-D"))
            .collect();
        rankmin_origin(&layers, config)
    })?;
    let mut traces = BTreeMap::new();
    for (name, (theta, trace)) in matrix_names.into_iter().zip(solved) {
        let dtype = pretrained.entries[&name].dtype();
        origin.insert(name.clone(), DenseTensor::from_matrix(&theta, dtype));
        traces.insert(name, trace);
    }
    Ok(OriginSelection { origin, traces })
}
