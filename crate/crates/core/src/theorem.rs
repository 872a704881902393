//! Linear multi-task instances for checking the bound relating task
//! interference `L` to row-space interference `I`:
//!
//! `L ≤ n (k₃ I + T(T−1) k₄ η)²`, with `k₃ = s_max² c · r s_max² / α²` and
//! `k₄ = s_max`.
//!
//! Each task `t` has a square update `τ_t` whose nonzero singular values lie
//! in `[α, s_max]`, and inputs `x = V_t a + ε` that sit near `τ_t`'s row
//! space (`‖a‖ ≤ c·s_max`, `‖ε‖ ≤ η`).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::interference::interference_from_factors;
use crate::linalg::{diag, numerical_rank, svd};
use crate::rng::stream;
use crate::suites::{gaussian, random_orthonormal, uniform_ball};

const TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteParams {
    pub d: usize,
    pub tasks: usize,
    pub n: usize,
    pub r: usize,
    pub alpha: f64,
    pub s_max: f64,
    pub c: f64,
    pub eta: f64,
}

impl SuiteParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(msg));
        if self.tasks <= 2 {
            return bad(format!("need more than 2 tasks, got {}", self.tasks));
        }
        if self.n == 0 || self.d == 0 {
            return bad("d and n must be positive".into());
        }
        if self.r == 0 || self.r > self.d {
            return bad(format!("rank {} must lie in 1..={}", self.r, self.d));
        }
        if !(self.alpha > 0.0 && self.alpha <= self.s_max && self.s_max.is_finite()) {
            return bad(format!("need 0 < alpha <= s_max, got {} and {}", self.alpha, self.s_max));
        }
        if !(self.c > 0.0 && self.c.is_finite()) || !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("need c > 0 and eta >= 0, got {} and {}", self.c, self.eta));
        }
        Ok(())
    }

    /// Random small parameters for batch certification: d ≤ 8, T ∈ {3, 4}, n ≤ 5.
    pub fn random(seed: u64) -> Self {
        let mut rng = stream(seed, "theorem-params");
        let d = rng.random_range(2..=8);
        let s_max = rng.random_range(0.5..3.0);
        let c = rng.random_range(0.1..2.0);
        Self {
            d,
            tasks: rng.random_range(3..=4),
            n: rng.random_range(1..=5),
            r: rng.random_range(1..=d),
            alpha: s_max * rng.random_range(0.1..=1.0),
            s_max,
            c,
            eta: c * s_max * rng.random_range(0.0..0.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSamples {
    /// Row-space basis of the task update (d × rank).
    pub basis: DMatrix<f64>,
    /// Coordinates `a_i` in that basis.
    pub coords: Vec<DVector<f64>>,
    /// Off-subspace perturbations `ε_i`.
    pub noise: Vec<DVector<f64>>,
}

impl TaskSamples {
    pub fn inputs(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.coords.iter().zip(&self.noise).map(|(a, e)| &self.basis * a + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSuite {
    pub params: SuiteParams,
    pub theta0: DMatrix<f64>,
    pub taus: Vec<DMatrix<f64>>,
    pub samples: Vec<TaskSamples>,
}

pub fn generate_suite(params: SuiteParams, seed: u64) -> Result<SyntheticTaskSuite> {
    params.validate()?;
    let mut rng = stream(seed, "theorem-suite");
    let SuiteParams { d, r, n, .. } = params;
    let theta0 = gaussian(&mut rng, d, d);
    let mut taus = Vec::with_capacity(params.tasks);
    let mut samples = Vec::with_capacity(params.tasks);
    for _ in 0..params.tasks {
        let u = random_orthonormal(&mut rng, d, r);
        let v = random_orthonormal(&mut rng, d, r);
        let s: Vec<f64> =
            (0..r).map(|_| rng.random_range(params.alpha..=params.s_max)).collect();
        taus.push(&u * diag(&s) * v.transpose());
        let coords = (0..n).map(|_| uniform_ball(&mut rng, r, params.c * params.s_max)).collect();
        let noise = (0..n).map(|_| uniform_ball(&mut rng, d, params.eta)).collect();
        samples.push(TaskSamples { basis: v, coords, noise });
    }
    Ok(SyntheticTaskSuite { params, theta0, taus, samples })
}

impl SyntheticTaskSuite {
    /// Checks every assumption of the bound, within a small relative slack.
    pub fn check_invariants(&self) -> Result<()> {
        let p = &self.params;
        p.validate()?;
        if self.taus.len() != p.tasks || self.samples.len() != p.tasks {
            return Err(Error::Invariant("task count mismatch".into()));
        }
        for (t, (tau, s)) in self.taus.iter().zip(&self.samples).enumerate() {
            if tau.shape() != (p.d, p.d) {
                return Err(Error::Invariant(format!("task {t} update is not {0}x{0}", p.d)));
            }
            let sv = svd(tau)?.singulars().to_vec();
            let rank = numerical_rank(&sv);
            if rank > p.r {
                return Err(Error::Invariant(format!("task {t} has rank {rank} > r = {}", p.r)));
            }
            if sv[..rank].iter().any(|&x| x < p.alpha * (1.0 - TOL) || x > p.s_max * (1.0 + TOL)) {
                return Err(Error::Invariant(format!("task {t} singular values {sv:?} leave [{}, {}]", p.alpha, p.s_max)));
            }
            if s.coords.len() != p.n || s.noise.len() != p.n {
                return Err(Error::Invariant(format!("task {t} does not have n = {} samples", p.n)));
            }
            let gram = s.basis.transpose() * &s.basis;
            if (gram - DMatrix::<f64>::identity(s.basis.ncols(), s.basis.ncols())).amax() > 1e-8 {
                return Err(Error::Invariant(format!("task {t} basis is not orthonormal")));
            }
            // The basis must span the update's row space.
            let outside = tau - tau * &s.basis * s.basis.transpose();
            if outside.norm() > 1e-8 * tau.norm().max(1.0) {
                return Err(Error::Invariant(format!("task {t} basis misses its row space")));
            }
            if s.coords.iter().any(|a| a.norm() > p.c * p.s_max * (1.0 + TOL)) {
                return Err(Error::Invariant(format!("task {t} has ‖a‖ > c·s_max")));
            }
            if s.noise.iter().any(|e| e.norm() > p.eta * (1.0 + TOL)) {
                return Err(Error::Invariant(format!("task {t} has ‖ε‖ > eta")));
            }
        }
        Ok(())
    }

    /// Largest numerical rank among the task updates.
    pub fn max_rank(&self) -> Result<usize> {
        let mut best = 0;
        for tau in &self.taus {
            best = best.max(numerical_rank(svd(tau)?.singulars()));
        }
        Ok(best)
    }
}

/// `L = Σ_t Σ_i ‖θ_MTL x_{t,i} − (θ₀ + τ_t) x_{t,i}‖²`, computed in the
/// cancelled form `Σ_t Σ_i ‖Σ_{s≠t} τ_s x_{t,i}‖²` (θ₀ drops out exactly).
pub fn task_interference(suite: &SyntheticTaskSuite) -> f64 {
    let mut total = 0.0;
    for (t, samples) in suite.samples.iter().enumerate() {
        let others = suite
            .taus
            .iter()
            .enumerate()
            .filter(|(s, _)| *s != t)
            .fold(DMatrix::zeros(suite.params.d, suite.params.d), |acc, (_, tau)| acc + tau);
        for x in samples.inputs() {
            total += (&others * x).norm_squared();
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCertificate {
    #[serde(rename = "L")]
    pub l_value: f64,
    #[serde(rename = "I")]
    pub i_value: f64,
    #[serde(rename = "bound")]
    pub bound_value: f64,
    pub k3: f64,
    pub k4: f64,
    pub holds: bool,
}

/// Evaluates both sides of the bound. `k_for_i` defaults to the largest task
/// rank and may not be smaller, so I covers the full row spaces.
pub fn certify_bound(suite: &SyntheticTaskSuite, k_for_i: Option<usize>) -> Result<BoundCertificate> {
    suite.check_invariants()?;
    let p = &suite.params;
    let factors = suite.taus.iter().map(svd).collect::<Result<Vec<_>>>()?;
    let r = factors.iter().map(|f| numerical_rank(f.singulars())).max().unwrap_or(0);
    let k = k_for_i.unwrap_or(r);
    if k < r {
        return Err(Error::Precondition(format!("k = {k} is below the max task rank {r}")));
    }
    let i_value = interference_from_factors(&factors, k)?;
    let l_value = task_interference(suite);
    let k3 = p.s_max.powi(2) * p.c * (r as f64 * p.s_max.powi(2) / p.alpha.powi(2));
    let k4 = p.s_max;
    let t = p.tasks as f64;
    let bound_value = p.n as f64 * (k3 * i_value + t * (t - 1.0) * k4 * p.eta).powi(2);
    Ok(BoundCertificate { l_value, i_value, bound_value, k3, k4, holds: l_value <= bound_value })
}

/// One line of a certification run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CertificateRecord {
    pub seed: u64,
    pub d: usize,
    #[serde(rename = "T")]
    pub tasks: usize,
    pub n: usize,
    pub r: usize,
    pub alpha: f64,
    pub s_max: f64,
    pub c: f64,
    pub eta: f64,
    #[serde(rename = "L")]
    pub l_value: f64,
    #[serde(rename = "I")]
    pub i_value: f64,
    pub bound: f64,
    pub holds: bool,
}

pub fn certify_seed(seed: u64) -> Result<CertificateRecord> {
    let params = SuiteParams::random(seed);
    let suite = generate_suite(params, seed)?;
    let cert = certify_bound(&suite, None)?;
    Ok(CertificateRecord {
        seed,
        d: params.d,
        tasks: params.tasks,
        n: params.n,
        r: params.r,
        alpha: params.alpha,
        s_max: params.s_max,
        c: params.c,
        eta: params.eta,
        l_value: cert.l_value,
        i_value: cert.i_value,
        bound: cert.bound_value,
        holds: cert.holds,
    })
}

/// Certifies `count` random suites with seeds `base_seed, base_seed + 1, …`.
pub fn certify_many(base_seed: u64, count: usize, exec: Execution) -> Result<Vec<CertificateRecord>> {
    let seeds: Vec<u64> = (0..count as u64).map(|i| base_seed.wrapping_add(i)).collect();
    exec.try_map(&seeds, |&s| certify_seed(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(d: usize, r: usize, alpha: f64, s_max: f64, eta: f64) -> SuiteParams {
        SuiteParams { d, tasks: 3, n: 4, r, alpha, s_max, c: 1.0, eta }
    }

    /// Literal `θ_MTL` residuals, one matrix-vector product at a time.
    fn brute_force_l(suite: &SyntheticTaskSuite) -> f64 {
        let mtl = suite.taus.iter().fold(suite.theta0.clone(), |acc, t| acc + t);
        let mut total = 0.0;
        for (t, s) in suite.samples.iter().enumerate() {
            let expert = &suite.theta0 + &suite.taus[t];
            for x in s.inputs() {
                total += (&mtl * &x - &expert * &x).norm_squared();
            }
        }
        total
    }

    #[test]
    fn zero_noise_inputs_lie_in_row_space() {
        let suite = generate_suite(params(6, 2, 0.5, 1.0, 0.0), 1).unwrap();
        for s in &suite.samples {
            let proj = &s.basis * s.basis.transpose();
            for x in s.inputs() {
                assert!((&x - &proj * &x).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn full_rank_flat_spectrum() {
        let suite = generate_suite(params(5, 5, 2.0, 2.0, 0.1), 2).unwrap();
        for tau in &suite.taus {
            for s in svd(tau).unwrap().singulars() {
                assert!((s - 2.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = params(6, 3, 0.3, 1.5, 0.05);
        assert_eq!(generate_suite(p, 9).unwrap(), generate_suite(p, 9).unwrap());
        assert_ne!(generate_suite(p, 9).unwrap(), generate_suite(p, 10).unwrap());
    }

    #[test]
    fn parameter_validation() {
        let mut p = params(4, 2, 0.5, 1.0, 0.0);
        p.tasks = 2;
        assert!(matches!(generate_suite(p, 0), Err(Error::Param(_))));
        assert!(generate_suite(params(4, 5, 0.5, 1.0, 0.0), 0).is_err());
        assert!(generate_suite(params(4, 2, 2.0, 1.0, 0.0), 0).is_err());
        assert!(generate_suite(params(4, 2, 0.0, 1.0, 0.0), 0).is_err());
    }

    /// Disjoint coordinate blocks: every cross product is exactly zero.
    fn orthogonal_suite() -> SyntheticTaskSuite {
        let d = 6;
        let mut taus = Vec::new();
        let mut samples = Vec::new();
        for t in 0..3 {
            let mut tau = DMatrix::zeros(d, d);
            tau[(2 * t, 2 * t)] = 1.5;
            tau[(2 * t + 1, 2 * t + 1)] = 1.0;
            let mut basis = DMatrix::zeros(d, 2);
            basis[(2 * t, 0)] = 1.0;
            basis[(2 * t + 1, 1)] = 1.0;
            taus.push(tau);
            let coords = vec![DVector::from_vec(vec![0.5, -0.3]), DVector::from_vec(vec![0.1, 0.9])];
            samples.push(TaskSamples { basis, coords, noise: vec![DVector::zeros(d); 2] });
        }
        SyntheticTaskSuite {
            params: SuiteParams { d, tasks: 3, n: 2, r: 2, alpha: 1.0, s_max: 1.5, c: 1.0, eta: 0.0 },
            theta0: DMatrix::identity(d, d),
            taus,
            samples,
        }
    }

    #[test]
    fn orthogonal_suite_has_no_interference() {
        let suite = orthogonal_suite();
        assert_eq!(task_interference(&suite), 0.0);
        let cert = certify_bound(&suite, None).unwrap();
        assert_eq!(cert.l_value, 0.0);
        assert!(cert.i_value < 1e-12);
        assert!(cert.bound_value < 1e-20);
        assert!(cert.holds);
    }

    #[test]
    fn zero_updates_have_no_interference() {
        let mut suite = generate_suite(params(5, 2, 0.5, 1.0, 0.1), 3).unwrap();
        for tau in suite.taus.iter_mut() {
            tau.fill(0.0);
        }
        assert_eq!(task_interference(&suite), 0.0);
    }

    #[test]
    fn matches_brute_force_and_ignores_theta0() {
        let mut suite = generate_suite(params(6, 3, 0.4, 1.2, 0.1), 4).unwrap();
        let l = task_interference(&suite);
        assert!((l - brute_force_l(&suite)).abs() <= 1e-9 * l);
        suite.theta0 = suite.theta0.map(|x| 3.0 * x - 1.0);
        assert!((l - brute_force_l(&suite)).abs() <= 1e-9 * l);
    }

    #[test]
    fn invariant_under_orthogonal_basis_change() {
        let suite = generate_suite(params(5, 3, 0.4, 1.2, 0.1), 5).unwrap();
        let mut rng = stream(5, "rotation");
        let rot = random_orthonormal(&mut rng, 5, 5);
        let mut rotated = suite.clone();
        for tau in rotated.taus.iter_mut() {
            *tau = &*tau * rot.transpose();
        }
        for s in rotated.samples.iter_mut() {
            s.basis = &rot * &s.basis;
            for e in s.noise.iter_mut() {
                *e = &rot * &*e;
            }
        }
        let (a, b) = (task_interference(&suite), task_interference(&rotated));
        assert!((a - b).abs() < 1e-9 * a.max(1.0));
        rotated.check_invariants().unwrap();
    }

    #[test]
    fn bound_grows_with_eta() {
        let mut prev = 0.0;
        for eta in [0.0, 0.05, 0.1, 0.2] {
            let suite = generate_suite(params(6, 2, 0.5, 1.0, eta), 6).unwrap();
            let cert = certify_bound(&suite, None).unwrap();
            assert!(cert.holds);
            assert!(cert.bound_value >= prev);
            prev = cert.bound_value;
        }
    }

    #[test]
    fn rescaled_suite_still_certifies() {
        let mut suite = generate_suite(params(6, 3, 0.5, 1.0, 0.05), 7).unwrap();
        for tau in suite.taus.iter_mut() {
            *tau *= 2.0;
        }
        suite.params.s_max *= 2.0;
        suite.params.alpha *= 2.0;
        assert!(certify_bound(&suite, None).unwrap().holds);
    }

    #[test]
    fn rank_below_task_rank_rejected() {
        let suite = generate_suite(params(6, 3, 0.5, 1.0, 0.0), 8).unwrap();
        assert!(matches!(certify_bound(&suite, Some(2)), Err(Error::Precondition(_))));
        assert!(certify_bound(&suite, Some(6)).unwrap().holds);
    }

    #[test]
    fn invariant_violations_reported() {
        let mut suite = generate_suite(params(6, 3, 0.5, 1.0, 0.0), 9).unwrap();
        suite.taus[0] *= 3.0;
        assert!(matches!(certify_bound(&suite, None), Err(Error::Invariant(_))));
        let mut suite = generate_suite(params(6, 3, 0.5, 1.0, 0.01), 9).unwrap();
        suite.samples[1].noise[0] *= 10.0;
        assert!(matches!(certify_bound(&suite, None), Err(Error::Invariant(_))));
    }

    #[test]
    fn random_batch_holds() {
        let records = certify_many(0, 200, Execution::Parallel).unwrap();
        assert!(records.iter().all(|r| r.holds));
        assert_eq!(records, certify_many(0, 200, Execution::Sequential).unwrap());
    }
}
