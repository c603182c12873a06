//! Projection matrices of the covariate space and the second and quartic
//! moment matrices of a restricted design.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::design_space::Assignment;
use crate::error::{Error, Result};

/// Default cap on `n` for dense moment storage.
pub const DEFAULT_DENSE_CAP: usize = 2000;

/// Reciprocal condition number (of the column-normalized Gram matrix) below
/// which a covariate matrix is treated as rank deficient.
pub const SINGULAR_RCOND: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct ProjectionCache {
    n: usize,
    x_perp: DMatrix<f64>,
    p: DMatrix<f64>,
    i_minus_p: DMatrix<f64>,
}

/// Orthogonalizes the columns of `x`, returning `X (X'X)^{-1/2}` or a
/// singular-design error naming the columns involved in the near dependence.
pub fn orthogonalize(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = x.shape();
    if p == 0 {
        return Err(Error::InvalidDimension("covariate matrix has no columns".into()));
    }
    if n == 0 {
        return Err(Error::InvalidDimension("covariate matrix has no rows".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("covariate matrix contains non-finite values".into()));
    }
    let norms: Vec<f64> = x.column_iter().map(|c| c.norm()).collect();
    let zero: Vec<usize> = (0..p).filter(|&j| norms[j] == 0.0).collect();
    if !zero.is_empty() {
        return Err(Error::SingularDesign { columns: zero, rcond: 0.0 });
    }
    if p > n {
        return Err(Error::SingularDesign {
            columns: (0..p).collect(),
            rcond: 0.0,
        });
    }
    let mut normalized = x.clone();
    for (j, mut col) in normalized.column_iter_mut().enumerate() {
        col /= norms[j];
    }
    let svd = normalized.svd(true, true);
    let sv = &svd.singular_values;
    let (imin, smin) = sv.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &s)| {
        if s < acc.1 {
            (i, s)
        } else {
            acc
        }
    });
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let rcond = (smin / smax).powi(2);
    if !(rcond >= SINGULAR_RCOND) {
        let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
        let null = v_t.row(imin);
        let peak = null.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let columns = (0..p).filter(|&j| null[j].abs() >= 0.1 * peak).collect();
        return Err(Error::SingularDesign { columns, rcond });
    }
    // X = U S V' gives X (X'X)^{-1/2} = U V'; column scaling does not change it
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    Ok(u * v_t)
}

impl ProjectionCache {
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if n > DEFAULT_DENSE_CAP {
            return Err(Error::Capacity {
                what: "n for dense moments",
                value: n,
                cap: DEFAULT_DENSE_CAP,
            });
        }
        let x_perp = orthogonalize(x)?;
        let p = &x_perp * x_perp.transpose();
        let i_minus_p = DMatrix::identity(n, n) - &p;
        Ok(ProjectionCache {
            n,
            x_perp,
            p,
            i_minus_p,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn x_perp(&self) -> &DMatrix<f64> {
        &self.x_perp
    }

    pub fn projector(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn residual_projector(&self) -> &DMatrix<f64> {
        &self.i_minus_p
    }

    /// `X_perp' v` for a ±1 vector.
    pub fn coordinates(&self, w: &[i8]) -> Vec<f64> {
        self.x_perp
            .column_iter()
            .map(|c| c.iter().zip(w).map(|(&a, &b)| a * b as f64).sum())
            .collect()
    }

    /// `w'Pw = |X_perp' w|^2`.
    pub fn quad(&self, w: &[i8]) -> f64 {
        self.coordinates(w).iter().map(|c| c * c).sum()
    }
}

/// Running sums of `ww'` (kept as exact integers) and `(w'Pw) ww'` over a
/// prefix of assignments.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyMoments {
    n: usize,
    s: usize,
    counts: Vec<i64>,
    d_sum: DMatrix<f64>,
}

impl StrategyMoments {
    pub fn empty(n: usize) -> Self {
        StrategyMoments {
            n,
            s: 0,
            counts: vec![0; n * n],
            d_sum: DMatrix::zeros(n, n),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.s
    }

    /// Adds one assignment in place.
    pub fn push(&mut self, w: &Assignment, cache: &ProjectionCache) -> Result<()> {
        if w.len() != self.n || cache.n() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: w.len(),
                context: "assignment length vs moments",
            });
        }
        let e = w.as_slice();
        let q = cache.quad(e);
        let n = self.n;
        for j in 0..n {
            let wj = e[j] as i64;
            let col = &mut self.counts[j * n..(j + 1) * n];
            for i in 0..n {
                col[i] += e[i] as i64 * wj;
            }
            let qj = q * wj as f64;
            let mut dcol = self.d_sum.column_mut(j);
            for i in 0..n {
                dcol[i] += qj * e[i] as f64;
            }
        }
        self.s += 1;
        Ok(())
    }

    /// Integer matrix `sum ww'`, column-major.
    pub fn counts(&self) -> &[i64] {
        &self.counts
    }

    pub fn sigma_w(&self) -> DMatrix<f64> {
        let s = self.s as f64;
        DMatrix::from_column_slice(self.n, self.n, &self.counts.iter().map(|&c| c as f64 / s).collect::<Vec<_>>())
    }

    pub fn d(&self) -> DMatrix<f64> {
        &self.d_sum / self.s as f64
    }

    /// `Sigma_W 1`, computed from the exact integer sums.
    pub fn sigma_w_row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.counts[j * self.n + i]).sum::<i64>() as f64 / self.s as f64)
            .collect()
    }

    /// True when every assignment in the prefix sums to zero, checked on the
    /// exact integer sums: `1' (sum ww') 1 = sum (w'1)^2`.
    pub fn is_forced_balance(&self) -> bool {
        self.counts.iter().sum::<i64>() == 0
    }
}

/// `Sigma_W` and `D` of the first `s` entries of `assignments`.
pub fn moments_from_prefix(
    assignments: &[Assignment],
    s: usize,
    cache: &ProjectionCache,
) -> Result<StrategyMoments> {
    if s == 0 || s > assignments.len() {
        return Err(Error::Index {
            index: s,
            len: assignments.len(),
        });
    }
    let mut m = StrategyMoments::empty(cache.n());
    for w in &assignments[..s] {
        m.push(w, cache)?;
    }
    Ok(m)
}

/// Returns a new snapshot with `w` added.
pub fn increment_moments(
    m: &StrategyMoments,
    w: &Assignment,
    cache: &ProjectionCache,
) -> Result<StrategyMoments> {
    let mut out = m.clone();
    out.push(w, cache)?;
    Ok(out)
}

/// Matrices and scalar summaries entering every tail criterion.
#[derive(Clone, Debug)]
pub struct CriterionMatrices {
    pub sigma_w: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// `G = (I-P) Sigma_W (I-P)` and `R = G + (2/n) D`, both symmetrized.
pub fn criterion_matrices(m: &StrategyMoments, cache: &ProjectionCache) -> Result<CriterionMatrices> {
    if m.s() == 0 {
        return Err(Error::EmptyPool);
    }
    if m.n() != cache.n() {
        return Err(Error::DimensionMismatch {
            expected: cache.n(),
            found: m.n(),
            context: "moments vs projection",
        });
    }
    let n = m.n() as f64;
    let sigma_w = m.sigma_w();
    let d = m.d();
    let ip = cache.residual_projector();
    let g = symmetrize(&(ip * &sigma_w * ip));
    let r = symmetrize(&(&g + &d * (2.0 / n)));
    Ok(CriterionMatrices { sigma_w, d, g, r })
}

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(symmetrize(a)).eigenvalues
}

/// Trace of `A B` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(AB) = sum_ij A_ij B_ji
    a.iter()
        .zip(b.transpose().iter())
        .map(|(x, y)| x * y)
        .sum()
}

/// Scalar building blocks of the kurtosis-adjusted tail criterion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriterionScalars {
    /// `tr(X_perp' Sigma_W X_perp)`
    pub bal: f64,
    /// `|(I-P) Sigma_W|_F^2`
    pub rand2: f64,
    pub tr_gd: f64,
    pub tr_d2: f64,
    /// `sum_i R_ii^2`
    pub ss: f64,
}

pub fn criterion_scalars(mats: &CriterionMatrices, cache: &ProjectionCache) -> CriterionScalars {
    let xp = cache.x_perp();
    let bal = (xp.transpose() * &mats.sigma_w * xp).trace();
    let rand2 = (cache.residual_projector() * &mats.sigma_w).norm_squared();
    let tr_gd = trace_of_product(&mats.g, &mats.d);
    let tr_d2 = mats.d.norm_squared();
    let ss = mats.r.diagonal().iter().map(|v| v * v).sum();
    CriterionScalars {
        bal,
        rand2,
        tr_gd,
        tr_d2,
        ss,
    }
}
