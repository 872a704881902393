//! Seeded synthetic multi-task instances used by sweeps, analysis and tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};
use crate::tensor_store::{DenseTensor, Dtype, TensorMap};

pub const WEIGHT: &str = "proj.weight";
pub const BIAS: &str = "proj.bias";

pub fn gaussian(rng: &mut StreamRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector(rng: &mut StreamRng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// `rows × cols` matrix with orthonormal columns, Haar-distributed.
pub fn random_orthonormal(rng: &mut StreamRng, rows: usize, cols: usize) -> DMatrix<f64> {
    assert!(cols <= rows, "cannot fit {cols} orthonormal columns in {rows} dims");
    let qr = gaussian(rng, rows, cols).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Uniform sample from the closed ball of `radius` in `dim` dimensions.
pub fn uniform_ball(rng: &mut StreamRng, dim: usize, radius: f64) -> DVector<f64> {
    // Always draws, so a zero radius leaves the stream where a positive one would.
    let mut v = gaussian_vector(rng, dim);
    let scale: f64 = rng.random::<f64>().powf(1.0 / dim as f64);
    let norm = v.norm();
    if norm == 0.0 || radius == 0.0 {
        return DVector::zeros(dim);
    }
    v *= radius * scale / norm;
    v
}

/// Low-rank-signal classification tasks sharing one linear layer.
///
/// Task `t`'s finetuned weight is `θ_pre + L_t + N_t`, with `L_t` a rank
/// `signal_rank` update acting on the task's own input subspace and `N_t`
/// small full-rank noise. Labels are the finetuned model's predictions
/// through a fixed per-task head, so accuracy measures agreement with the
/// task expert.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassificationParams {
    pub dim: usize,
    pub classes: usize,
    pub tasks: usize,
    pub signal_rank: usize,
    pub signal_strength: f64,
    pub noise_scale: f64,
    pub pretrained_scale: f64,
    pub samples: usize,
    pub input_noise: f64,
}

impl Default for ClassificationParams {
    fn default() -> Self {
        Self {
            dim: 64,
            classes: 8,
            tasks: 4,
            signal_rank: 4,
            signal_strength: 3.0,
            noise_scale: 0.3,
            pretrained_scale: 1.0,
            samples: 200,
            input_noise: 0.1,
        }
    }
}

impl ClassificationParams {
    fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.classes < 2 || self.tasks < 1 || self.samples < 1 {
            return Err(Error::Param(format!("degenerate classification suite {self:?}")));
        }
        if self.signal_rank == 0 || self.signal_rank > self.dim {
            return Err(Error::Param(format!("signal rank must be in 1..={}", self.dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationSuite {
    pub params: ClassificationParams,
    pub pretrained: TensorMap,
    pub finetuned: Vec<TensorMap>,
    heads: Vec<DMatrix<f64>>,
    /// Per task, samples as columns (dim × samples).
    inputs: Vec<DMatrix<f64>>,
    labels: Vec<Vec<usize>>,
}

fn checkpoint(weight: &DMatrix<f64>, bias: &DVector<f64>) -> TensorMap {
    let mut m = TensorMap::new();
    m.insert(WEIGHT, DenseTensor::from_matrix(weight, Dtype::F64));
    m.insert(
        BIAS,
        DenseTensor::from_f64(vec![bias.len()], Dtype::F64, bias.as_slice().to_vec()).unwrap(),
    );
    m
}

fn argmax(col: nalgebra::DVectorView<'_, f64>) -> usize {
    col.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

impl ClassificationSuite {
    pub fn generate(params: ClassificationParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = stream(seed, "classification-suite");
        let d = params.dim;
        let sqrt_d = (d as f64).sqrt();
        let theta_pre = gaussian(&mut rng, d, d) * (params.pretrained_scale / sqrt_d);
        let bias_pre = gaussian_vector(&mut rng, d) * 0.1;

        let mut finetuned = Vec::with_capacity(params.tasks);
        let mut heads = Vec::with_capacity(params.tasks);
        let mut inputs = Vec::with_capacity(params.tasks);
        let mut labels = Vec::with_capacity(params.tasks);
        for _ in 0..params.tasks {
            let r = params.signal_rank;
            let v = random_orthonormal(&mut rng, d, r);
            let u = random_orthonormal(&mut rng, d, r);
            let s: Vec<f64> =
                (0..r).map(|_| params.signal_strength * (1.0 + 0.5 * rng.random::<f64>())).collect();
            let signal = &u * crate::linalg::diag(&s) * v.transpose();
            let noise = gaussian(&mut rng, d, d) * (params.noise_scale / sqrt_d);
            let weight = &theta_pre + signal + noise;
            let bias = &bias_pre + gaussian_vector(&mut rng, d) * 0.05;
            let head = gaussian(&mut rng, params.classes, d) / sqrt_d;
            let x = &v * gaussian(&mut rng, r, params.samples)
                + gaussian(&mut rng, d, params.samples) * params.input_noise;
            let y = Self::predict(&head, &weight, &bias, &x);
            finetuned.push(checkpoint(&weight, &bias));
            heads.push(head);
            inputs.push(x);
            labels.push(y);
        }
        Ok(Self {
            params,
            pretrained: checkpoint(&theta_pre, &bias_pre),
            finetuned,
            heads,
            inputs,
            labels,
        })
    }

    fn predict(head: &DMatrix<f64>, weight: &DMatrix<f64>, bias: &DVector<f64>, x: &DMatrix<f64>) -> Vec<usize> {
        let mut features = weight * x;
        for mut col in features.column_iter_mut() {
            col += bias;
        }
        let logits = head * features;
        logits.column_iter().map(argmax).collect()
    }

    /// Per-task agreement with the task experts' labels.
    pub fn evaluate(&self, model: &TensorMap) -> Result<Vec<f64>> {
        let weight = model
            .get(WEIGHT)
            .and_then(DenseTensor::to_matrix)
            .ok_or_else(|| Error::Evaluation(format!("model lacks 2-D `{WEIGHT}`")))?;
        let bias = model
            .get(BIAS)
            .map(|t| DVector::from_vec(t.to_f64()))
            .ok_or_else(|| Error::Evaluation(format!("model lacks `{BIAS}`")))?;
        if weight.shape() != (self.params.dim, self.params.dim) || bias.len() != self.params.dim {
            return Err(Error::Evaluation("model shapes do not match the suite".into()));
        }
        Ok((0..self.params.tasks)
            .map(|t| {
                let pred = Self::predict(&self.heads[t], &weight, &bias, &self.inputs[t]);
                let hits = pred.iter().zip(&self.labels[t]).filter(|(a, b)| a == b).count();
                hits as f64 / pred.len() as f64
            })
            .collect())
    }
}

/// Task vectors `τ_t = S + L_t` with a shared component `S` plus task-specific
/// low-rank parts; the finetuned layers are `θ_pre + τ_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedComponentParams {
    pub rows: usize,
    pub cols: usize,
    pub tasks: usize,
    pub task_rank: usize,
    pub shared_rank: usize,
    pub shared_scale: f64,
    pub task_scale: f64,
}

impl Default for SharedComponentParams {
    fn default() -> Self {
        Self { rows: 32, cols: 32, tasks: 4, task_rank: 3, shared_rank: 4, shared_scale: 2.0, task_scale: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct SharedComponentInstance {
    pub pretrained: DMatrix<f64>,
    pub shared: DMatrix<f64>,
    pub task_parts: Vec<DMatrix<f64>>,
    pub finetuned: Vec<DMatrix<f64>>,
}

fn low_rank(rng: &mut StreamRng, rows: usize, cols: usize, rank: usize, scale: f64) -> DMatrix<f64> {
    let u = random_orthonormal(rng, rows, rank);
    let v = random_orthonormal(rng, cols, rank);
    let s: Vec<f64> = (0..rank).map(|_| scale * (0.5 + rng.random::<f64>())).collect();
    u * crate::linalg::diag(&s) * v.transpose()
}

impl SharedComponentInstance {
    pub fn generate(p: SharedComponentParams, seed: u64) -> Result<Self> {
        let full = p.rows.min(p.cols);
        if p.tasks < 2 || p.task_rank == 0 || p.task_rank > full || p.shared_rank > full {
            return Err(Error::Param(format!("invalid shared-component params {p:?}")));
        }
        let mut rng = stream(seed, "shared-component");
        let pretrained = gaussian(&mut rng, p.rows, p.cols) / (p.cols as f64).sqrt();
        let shared = if p.shared_rank == 0 {
            DMatrix::zeros(p.rows, p.cols)
        } else {
            low_rank(&mut rng, p.rows, p.cols, p.shared_rank, p.shared_scale)
        };
        let task_parts: Vec<DMatrix<f64>> =
            (0..p.tasks).map(|_| low_rank(&mut rng, p.rows, p.cols, p.task_rank, p.task_scale)).collect();
        let finetuned = task_parts.iter().map(|l| &pretrained + &shared + l).collect();
        Ok(Self { pretrained, shared, task_parts, finetuned })
    }

    pub fn pretrained_deltas(&self) -> Vec<DMatrix<f64>> {
        self.finetuned.iter().map(|f| f - &self.pretrained).collect()
    }

    pub fn centered_deltas(&self) -> Vec<DMatrix<f64>> {
        let mean = crate::origin::mean_origin(&self.finetuned).expect("nonempty");
        self.finetuned.iter().map(|f| f - &mean).collect()
    }
}
