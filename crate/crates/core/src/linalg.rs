//! Dense kernels: SVD with a canonical ordering and sign, rank truncation,
//! Frobenius inner products and the nuclear norm with its subgradient.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};

/// Relative threshold below which a singular value counts as zero.
pub const ZERO_SINGULAR_RTOL: f64 = 1e-10;

/// Relative residual above which a backend factorization is rejected.
const SVD_CHECK_RTOL: f64 = 1e-8;

/// Thin SVD triple `left · diag(singulars) · right`, possibly truncated.
///
/// `left` is m×k with orthonormal columns, `right` is k×n with orthonormal
/// rows, and `singulars` is nonincreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    left: DMatrix<f64>,
    singulars: Vec<f64>,
    right: DMatrix<f64>,
}

impl LowRankFactor {
    /// Assembles a factor from parts. Callers are responsible for
    /// orthonormality; shapes and ordering are checked.
    pub fn from_parts(left: DMatrix<f64>, singulars: Vec<f64>, right: DMatrix<f64>) -> Result<Self> {
        let k = singulars.len();
        if left.ncols() != k || right.nrows() != k {
            return Err(Error::Shape(format!(
                "factor parts {}x{}, {k}, {}x{} disagree on rank",
                left.nrows(),
                left.ncols(),
                right.nrows(),
                right.ncols()
            )));
        }
        Ok(Self { left, singulars, right })
    }

    pub fn rank(&self) -> usize {
        self.singulars.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.left.nrows(), self.right.ncols())
    }

    pub fn left(&self) -> &DMatrix<f64> {
        &self.left
    }

    pub fn singulars(&self) -> &[f64] {
        &self.singulars
    }

    pub fn right(&self) -> &DMatrix<f64> {
        &self.right
    }

    /// Same singular vectors, replaced singular values. Used by masking.
    pub fn with_singulars(&self, singulars: Vec<f64>) -> Result<Self> {
        Self::from_parts(self.left.clone(), singulars, self.right.clone())
    }

    /// Frobenius norm, from the spectrum.
    pub fn norm(&self) -> f64 {
        self.singulars.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

fn ensure_finite(a: &DMatrix<f64>) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("matrix has non-finite entries".into()))
    }
}

/// Full thin SVD with k = min(m, n).
///
/// Singular triples are sorted by decreasing value (stable, so ties keep
/// the backend's order) and each left vector is flipped so its
/// largest-magnitude entry is nonnegative.
pub fn svd(a: &DMatrix<f64>) -> Result<LowRankFactor> {
    ensure_finite(a)?;
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Ok(LowRankFactor {
            left: DMatrix::zeros(m, 0),
            singulars: Vec::new(),
            right: DMatrix::zeros(0, n),
        });
    }
    let raw = to_faer(a)
        .thin_svd()
        .map_err(|e| Error::Numeric(format!("SVD of {m}x{n} matrix failed: {e:?}")))?;
    let u = raw.U();
    let v = raw.V();
    let values: Vec<f64> = raw.S().column_vector().iter().copied().collect();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));

    let mut left = DMatrix::zeros(m, k);
    let mut right = DMatrix::zeros(k, n);
    let mut singulars = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut ucol = DVector::from_fn(m, |i, _| u[(i, src)]);
        let mut vrow = RowDVector::from_fn(n, |_, j| v[(j, src)]);
        let pivot = ucol.iter().enumerate().fold(0, |best, (i, x)| {
            if x.abs() > ucol[best].abs() { i } else { best }
        });
        if ucol[pivot] < 0.0 {
            ucol.neg_mut();
            vrow.neg_mut();
        }
        left.set_column(dst, &ucol);
        right.set_row(dst, &vrow);
        singulars.push(values[src].max(0.0));
    }
    let out = LowRankFactor { left, singulars, right };
    let scale = a.norm();
    let residual = (reconstruct(&out) - a).norm();
    let energy: f64 = out.singulars.iter().map(|s| s * s).sum::<f64>().sqrt();
    if residual > SVD_CHECK_RTOL * scale.max(f64::MIN_POSITIVE)
        || (energy - scale).abs() > SVD_CHECK_RTOL * scale
    {
        return Err(Error::Numeric(format!(
            "SVD of {m}x{n} matrix is inconsistent (residual {residual:e}, norm {scale:e})"
        )));
    }
    Ok(out)
}

/// Keeps the `k` leading singular triples.
pub fn truncate(f: &LowRankFactor, k: usize) -> Result<LowRankFactor> {
    if k > f.rank() {
        return Err(Error::Rank { k, max: f.rank() });
    }
    Ok(LowRankFactor {
        left: f.left.columns(0, k).into_owned(),
        singulars: f.singulars[..k].to_vec(),
        right: f.right.rows(0, k).into_owned(),
    })
}

pub fn reconstruct(f: &LowRankFactor) -> DMatrix<f64> {
    let mut scaled = f.left.clone();
    for (j, s) in f.singulars.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*s);
    }
    scaled * &f.right
}

pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.dot(b))
}

pub fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    ensure_finite(a)?;
    if a.is_empty() {
        return Ok(Vec::new());
    }
    let mut s: Vec<f64> = to_faer(a)
        .singular_values()
        .map_err(|e| Error::Numeric(format!("singular values failed: {e:?}")))?
        .into_iter()
        .map(|x| x.max(0.0))
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub fn nuclear_norm(a: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(a)?.iter().sum())
}

/// Number of singular values above `ZERO_SINGULAR_RTOL · σ_max`.
pub fn numerical_rank(singulars: &[f64]) -> usize {
    let Some(&top) = singulars.first() else { return 0 };
    if top <= 0.0 {
        return 0;
    }
    singulars.iter().filter(|&&s| s > ZERO_SINGULAR_RTOL * top).count()
}

/// `U_r · V_rᵀ` over the numerically nonzero singular triples, which is a
/// subgradient of the nuclear norm at `a` (zero at the zero matrix).
pub fn nuclear_subgradient(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let f = svd(a)?;
    let r = numerical_rank(&f.singulars);
    let f = truncate(&f, r)?;
    Ok(&f.left * &f.right)
}

/// Tail energy `Σ_{i>k} σ_i²`, the squared rank-k truncation residual.
pub fn tail_energy(singulars: &[f64], k: usize) -> f64 {
    singulars.iter().skip(k).map(|s| s * s).sum()
}

fn to_faer(a: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

pub fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(values))
}
