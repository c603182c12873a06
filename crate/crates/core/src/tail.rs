//! Mean, standard error and tail quantile of the estimator MSE over a
//! distribution on the unobserved covariates `z`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::distributions::{chi2_quantile, empirical_quantile, normal_quantile};
use crate::error::{Error, Result};
use crate::moments::{
    criterion_matrices, criterion_scalars, symmetric_eigenvalues, CriterionMatrices, CriterionScalars,
    ProjectionCache, StrategyMoments,
};
use crate::parallel;
use crate::rng::{stream_rng, StreamRng};

/// Smallest Monte Carlo draw count accepted by the exact strategy.
pub const MIN_DRAWS: usize = 100;

const DRAW_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ZFamily {
    Gaussian,
    Laplace,
    StudentT { dof: f64 },
    /// Entries resampled independently from a table of values.
    Custom { values: Vec<f64> },
    /// The same vector on every draw.
    Fixed { z: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZSampler {
    pub family: ZFamily,
    /// Rescale to mean zero and unit variance where the variance exists.
    pub standardized: bool,
}

impl ZSampler {
    pub fn gaussian() -> Self {
        ZSampler {
            family: ZFamily::Gaussian,
            standardized: true,
        }
    }

    pub fn laplace() -> Self {
        ZSampler {
            family: ZFamily::Laplace,
            standardized: true,
        }
    }

    pub fn student_t(dof: f64) -> Self {
        ZSampler {
            family: ZFamily::StudentT { dof },
            standardized: true,
        }
    }

    pub fn fixed(z: Vec<f64>) -> Self {
        ZSampler {
            family: ZFamily::Fixed { z },
            standardized: false,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match &self.family {
            ZFamily::StudentT { dof } if !(*dof > 0.0 && dof.is_finite()) => Err(Error::Parameter(
                format!("student t degrees of freedom must be positive, got {dof}"),
            )),
            ZFamily::Custom { values } if values.is_empty() => {
                Err(Error::Parameter("custom z table is empty".into()))
            }
            ZFamily::Custom { values } if values.iter().any(|v| !v.is_finite()) => {
                Err(Error::Parameter("custom z table has non-finite values".into()))
            }
            ZFamily::Custom { values } if self.standardized && population_sd(values) == 0.0 => {
                Err(Error::Parameter("custom z table is constant and cannot be standardized".into()))
            }
            ZFamily::Fixed { z } if z.len() != n => Err(Error::DimensionMismatch {
                expected: n,
                found: z.len(),
                context: "fixed z length",
            }),
            _ => Ok(()),
        }
    }

    /// Excess kurtosis of one entry, where finite.
    pub fn excess_kurtosis(&self) -> Option<f64> {
        match &self.family {
            ZFamily::Gaussian => Some(0.0),
            ZFamily::Laplace => Some(3.0),
            ZFamily::StudentT { dof } if *dof > 4.0 => Some(6.0 / (dof - 4.0)),
            ZFamily::StudentT { .. } => None,
            ZFamily::Custom { values } => {
                let m = values.iter().sum::<f64>() / values.len() as f64;
                let m2 = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
                let m4 = values.iter().map(|v| (v - m).powi(4)).sum::<f64>() / values.len() as f64;
                (m2 > 0.0).then(|| m4 / (m2 * m2) - 3.0)
            }
            ZFamily::Fixed { .. } => None,
        }
    }

    /// One length-`n` draw.
    pub fn draw(&self, n: usize, rng: &mut StreamRng) -> Vec<f64> {
        match &self.family {
            ZFamily::Gaussian => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
            ZFamily::Laplace => {
                let b = if self.standardized { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
                (0..n)
                    .map(|_| {
                        let u: f64 = rng.random::<f64>() - 0.5;
                        -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
                    })
                    .collect()
            }
            ZFamily::StudentT { dof } => {
                let t = StudentT::new(*dof).expect("validated degrees of freedom");
                let scale = if self.standardized && *dof > 2.0 {
                    ((dof - 2.0) / dof).sqrt()
                } else {
                    1.0
                };
                (0..n).map(|_| scale * t.sample(rng)).collect()
            }
            ZFamily::Custom { values } => {
                let (shift, scale) = if self.standardized {
                    let m = values.iter().sum::<f64>() / values.len() as f64;
                    (m, 1.0 / population_sd(values))
                } else {
                    (0.0, 1.0)
                };
                (0..n)
                    .map(|_| (values[rng.random_range(0..values.len())] - shift) * scale)
                    .collect()
            }
            ZFamily::Fixed { z } => z.clone(),
        }
    }
}

fn population_sd(values: &[f64]) -> f64 {
    let m = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

impl fmt::Display for ZSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            ZFamily::Gaussian => f.write_str("gaussian"),
            ZFamily::Laplace => f.write_str("laplace"),
            ZFamily::StudentT { dof } => write!(f, "t:{dof}"),
            ZFamily::Custom { values } => write!(f, "custom[{}]", values.len()),
            ZFamily::Fixed { .. } => f.write_str("fixed"),
        }
    }
}

impl FromStr for ZSampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let sampler = match s {
            "gaussian" => ZSampler::gaussian(),
            "laplace" => ZSampler::laplace(),
            other => match other.strip_prefix("t:") {
                Some(d) => ZSampler::student_t(
                    d.parse()
                        .map_err(|_| Error::Parse(format!("bad t degrees of freedom {d:?}")))?,
                ),
                None => {
                    return Err(Error::Parse(format!(
                        "unknown z distribution {other:?}; expected gaussian, laplace or t:<dof>"
                    )))
                }
            },
        };
        sampler.validate(0).or_else(|e| match e {
            Error::DimensionMismatch { .. } => Ok(()),
            e => Err(e),
        })?;
        Ok(sampler)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum TailStrategy {
    ExactMc {
        sampler: ZSampler,
        n_z: usize,
        smoothing: bool,
    },
    NormalHbe,
    KurtosisApprox {
        kappa: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailSpec {
    pub q: f64,
    pub strategy: TailStrategy,
    pub seed: u64,
}

impl TailSpec {
    pub fn normal_hbe(q: f64) -> Self {
        TailSpec {
            q,
            strategy: TailStrategy::NormalHbe,
            seed: 0,
        }
    }

    pub fn kurtosis(q: f64, kappa: f64) -> Self {
        TailSpec {
            q,
            strategy: TailStrategy::KurtosisApprox { kappa },
            seed: 0,
        }
    }

    pub fn exact(q: f64, sampler: ZSampler, n_z: usize, seed: u64) -> Self {
        TailSpec {
            q,
            strategy: TailStrategy::ExactMc {
                sampler,
                n_z,
                smoothing: false,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_q(self.q)?;
        match &self.strategy {
            TailStrategy::ExactMc { n_z, .. } if *n_z < MIN_DRAWS => Err(Error::Parameter(format!(
                "exact Monte Carlo needs at least {MIN_DRAWS} z draws, got {n_z}"
            ))),
            TailStrategy::KurtosisApprox { kappa } if !(*kappa >= -2.0) => Err(Error::Parameter(
                format!("excess kurtosis must be at least -2, got {kappa}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn smoothing(&self) -> bool {
        matches!(self.strategy, TailStrategy::ExactMc { smoothing: true, .. })
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Parameter(format!("quantile level {q} must lie in (0, 1)")));
    }
    Ok(())
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa >= -2.0) {
        return Err(Error::Parameter(format!("excess kurtosis must be at least -2, got {kappa}")));
    }
    Ok(())
}

fn check_len(expected: usize, found: usize, context: &'static str) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            expected,
            found,
            context,
        });
    }
    Ok(())
}

fn quad(a: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(a * v))
}

/// `(1/n^2) z'Rz`.
pub fn mse_lr_given_z(r: &DMatrix<f64>, z: &[f64]) -> Result<f64> {
    check_len(r.nrows(), z.len(), "z length vs determining matrix")?;
    let n = z.len() as f64;
    Ok(quad(r, &DVector::from_column_slice(z)) / (n * n))
}

/// `(1/n^2) (X beta + z)' Sigma_W (X beta + z)`.
pub fn mse_dm_given_z(sigma_w: &DMatrix<f64>, x: &DMatrix<f64>, beta: &[f64], z: &[f64]) -> Result<f64> {
    check_len(x.ncols(), beta.len(), "beta length vs covariate columns")?;
    check_len(x.nrows(), z.len(), "z length vs covariate rows")?;
    check_len(sigma_w.nrows(), z.len(), "z length vs Sigma_W")?;
    let v = x * DVector::from_column_slice(beta) + DVector::from_column_slice(z);
    let n = z.len() as f64;
    Ok(quad(sigma_w, &v) / (n * n))
}

/// `sigma^2/n + (sigma^2/n^2) tr(X_perp' Sigma_W X_perp)`.
pub fn expected_mse_lr(m: &StrategyMoments, cache: &ProjectionCache, sigma2: f64) -> Result<f64> {
    let n = m.n() as f64;
    let xp = cache.x_perp();
    let bal = (xp.transpose() * m.sigma_w() * xp).trace();
    Ok(sigma2 / n + sigma2 / (n * n) * bal)
}

fn x_beta(x: &DMatrix<f64>, beta: &[f64]) -> Result<DVector<f64>> {
    check_len(x.ncols(), beta.len(), "beta length vs covariate columns")?;
    Ok(x * DVector::from_column_slice(beta))
}

/// `BAL_1 = beta'X' Sigma_W X beta` and `BAL_2 = beta'X' Sigma_W^2 X beta`.
pub fn dm_balance_terms(sigma_w: &DMatrix<f64>, x: &DMatrix<f64>, beta: &[f64]) -> Result<(f64, f64)> {
    let xb = x_beta(x, beta)?;
    let sx = sigma_w * &xb;
    Ok((xb.dot(&sx), sx.norm_squared()))
}

/// `sigma^2/n + (1/n^2) beta'X' Sigma_W X beta`.
pub fn expected_mse_dm(m: &StrategyMoments, x: &DMatrix<f64>, beta: &[f64], sigma2: f64) -> Result<f64> {
    let n = m.n() as f64;
    let (bal1, _) = dm_balance_terms(&m.sigma_w(), x, beta)?;
    Ok(sigma2 / n + bal1 / (n * n))
}

/// Standard error of the DM squared error over `z`.
pub fn se_mse_dm(m: &StrategyMoments, x: &DMatrix<f64>, beta: &[f64], sigma2: f64, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    if !m.is_forced_balance() {
        return Err(Error::Precondition(
            "the DM standard error needs a forced-balance pool".into(),
        ));
    }
    let n = m.n() as f64;
    let sw = m.sigma_w();
    let (_, bal2) = dm_balance_terms(&sw, x, beta)?;
    let inner = n * kappa + 2.0 * sw.norm_squared() + 4.0 / sigma2 * bal2;
    Ok(sigma2 / (n * n) * inner.max(0.0).sqrt())
}

/// The variance expression under the square root of the LR standard error and
/// of the kurtosis-adjusted tail criterion.
fn lr_spread(sc: &CriterionScalars, n: f64, kappa: f64) -> f64 {
    2.0 * sc.rand2 + 8.0 * sc.tr_gd / n + 8.0 * sc.tr_d2 / (n * n) + kappa * sc.ss
}

/// Standard error of the LR squared error over `z`.
pub fn se_mse_lr(m: &StrategyMoments, cache: &ProjectionCache, sigma2: f64, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    let mats = criterion_matrices(m, cache)?;
    let sc = criterion_scalars(&mats, cache);
    let n = m.n() as f64;
    Ok(sigma2 / (n * n) * lr_spread(&sc, n, kappa).max(0.0).sqrt())
}

/// Hall-Buckley-Eagleson approximation to the `q` quantile of
/// `sum_i lambda_i chi2_1`: a scaled and shifted chi-square with the same
/// first three cumulants.
pub fn hbe_quantile(lambdas: &[f64], q: f64) -> Result<f64> {
    check_q(q)?;
    if lambdas.iter().any(|l| !l.is_finite()) {
        return Err(Error::DegenerateDistribution("non-finite eigenvalue".into()));
    }
    let total_abs: f64 = lambdas.iter().map(|l| l.abs()).sum();
    let negative: f64 = lambdas.iter().filter(|&&l| l < 0.0).map(|l| -l).sum();
    if negative > 1e-6 * total_abs {
        log::warn!(
            "clamped {negative:.3e} of negative eigenvalue mass ({:.2e} of the total)",
            negative / total_abs
        );
    }
    let (mut m1, mut m2, mut m3) = (0.0, 0.0, 0.0);
    for &l in lambdas {
        let l = l.max(0.0);
        m1 += l;
        m2 += l * l;
        m3 += l * l * l;
    }
    if m3 <= 0.0 || m2 <= 0.0 {
        return Err(Error::DegenerateDistribution(
            "all eigenvalues are zero; the quadratic form is identically zero".into(),
        ));
    }
    let a = m3 / m2;
    let nu = m2 * m2 * m2 / (m3 * m3);
    let b = m1 - a * nu;
    Ok(a * chi2_quantile(q, nu)? + b)
}

pub fn tail_normal_lr(mats: &CriterionMatrices, q: f64) -> Result<f64> {
    let ev = symmetric_eigenvalues(&mats.r);
    hbe_quantile(ev.as_slice(), q)
}

/// `BAL + c sqrt(2 RAND^2 + 8 tr(GD)/n + 8 tr(D^2)/n^2 + kappa SS)` with `c`
/// the standard normal `q` quantile.
pub fn tail_approx_lr(sc: &CriterionScalars, n: usize, q: f64, kappa: f64) -> Result<f64> {
    check_q(q)?;
    check_kappa(kappa)?;
    let c = normal_quantile(q);
    Ok(sc.bal + c * lr_spread(sc, n as f64, kappa).max(0.0).sqrt())
}

/// The DM tail criterion given `beta`, with design-independent terms dropped.
pub fn q_prime_dm(
    m: &StrategyMoments,
    x: &DMatrix<f64>,
    beta: &[f64],
    sigma2: f64,
    q: f64,
    kappa: f64,
) -> Result<f64> {
    check_q(q)?;
    check_kappa(kappa)?;
    let n = m.n() as f64;
    let sw = m.sigma_w();
    let (bal1, bal2) = dm_balance_terms(&sw, x, beta)?;
    let c = normal_quantile(q);
    let inner = n * kappa + 2.0 * sw.norm_squared() + 4.0 / sigma2 * bal2;
    Ok(bal1 + c * sigma2 * inner.max(0.0).sqrt())
}

/// Empirical `q` quantile of `z'Rz` over the rows of `draws`.
pub fn tail_exact_from_draws(r: &DMatrix<f64>, draws: &DMatrix<f64>, q: f64) -> Result<f64> {
    check_len(r.nrows(), draws.ncols(), "z draws vs determining matrix")?;
    let mut values = quadratic_forms(r, draws);
    empirical_quantile(&mut values, q)
}

/// `z_i' R z_i` for every row `z_i` of `draws`, in row order.
pub fn quadratic_forms(r: &DMatrix<f64>, draws: &DMatrix<f64>) -> Vec<f64> {
    let rows = draws.nrows();
    let chunks = rows.div_ceil(DRAW_CHUNK);
    parallel::map_indexed(chunks, |c| {
        let start = c * DRAW_CHUNK;
        let len = DRAW_CHUNK.min(rows - start);
        let block = draws.rows(start, len);
        let zr = block * r;
        (0..len)
            .map(|i| zr.row(i).iter().zip(block.row(i).iter()).map(|(a, b)| a * b).sum())
            .collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// `n_z` draws of length `n`, one row each; row `i` comes from stream `i`.
pub fn draw_matrix(sampler: &ZSampler, n: usize, n_z: usize, seed: u64) -> Result<DMatrix<f64>> {
    sampler.validate(n)?;
    let rows = parallel::map_indexed(n_z, |i| sampler.draw(n, &mut stream_rng(seed, i as u64)));
    Ok(DMatrix::from_fn(n_z, n, |i, j| rows[i][j]))
}

pub fn tail_exact_lr(
    mats: &CriterionMatrices,
    q: f64,
    sampler: &ZSampler,
    n_z: usize,
    seed: u64,
) -> Result<f64> {
    check_q(q)?;
    if n_z < MIN_DRAWS {
        return Err(Error::Parameter(format!(
            "exact Monte Carlo needs at least {MIN_DRAWS} z draws, got {n_z}"
        )));
    }
    let draws = draw_matrix(sampler, mats.r.nrows(), n_z, seed)?;
    tail_exact_from_draws(&mats.r, &draws, q)
}

/// A tail specification bound to a problem size. The exact strategy draws its
/// `z` sample once so that every prefix is scored against the same draws.
#[derive(Clone, Debug)]
pub struct TailEvaluator {
    spec: TailSpec,
    n: usize,
    draws: Option<DMatrix<f64>>,
}

impl TailEvaluator {
    pub fn new(spec: &TailSpec, n: usize) -> Result<Self> {
        spec.validate()?;
        let draws = match &spec.strategy {
            TailStrategy::ExactMc { sampler, n_z, .. } => Some(draw_matrix(sampler, n, *n_z, spec.seed)?),
            _ => None,
        };
        Ok(TailEvaluator {
            spec: spec.clone(),
            n,
            draws,
        })
    }

    pub fn spec(&self) -> &TailSpec {
        &self.spec
    }

    pub fn evaluate(&self, m: &StrategyMoments, cache: &ProjectionCache) -> Result<f64> {
        check_len(self.n, m.n(), "moments vs tail evaluator")?;
        let mats = criterion_matrices(m, cache)?;
        match &self.spec.strategy {
            TailStrategy::NormalHbe => tail_normal_lr(&mats, self.spec.q),
            TailStrategy::KurtosisApprox { kappa } => {
                tail_approx_lr(&criterion_scalars(&mats, cache), self.n, self.spec.q, *kappa)
            }
            TailStrategy::ExactMc { .. } => {
                let draws = self.draws.as_ref().expect("draws prepared for the exact strategy");
                tail_exact_from_draws(&mats.r, draws, self.spec.q)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design_space::{enumerate_balanced, mirror_close, sample_bcrd, Assignment};
    use crate::distributions::chi2_quantile;
    use crate::moments::moments_from_prefix;

    fn random_x(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream_rng(seed, 0);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    fn setup(n: usize, p: usize, s: usize, seed: u64) -> (DMatrix<f64>, ProjectionCache, StrategyMoments) {
        let x = random_x(n, p, seed);
        let cache = ProjectionCache::new(&x).unwrap();
        let pool = mirror_close(&sample_bcrd(n, s, seed).unwrap());
        let m = moments_from_prefix(pool.assignments(), pool.len(), &cache).unwrap();
        (x, cache, m)
    }

    fn sample_sd(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    }

    #[test]
    fn hbe_reductions() {
        for &q in &[0.5, 0.9, 0.95] {
            let ones = vec![1.0; 7];
            let got = hbe_quantile(&ones, q).unwrap();
            assert!((got - chi2_quantile(q, 7.0).unwrap()).abs() < 1e-12 * got);
            let got = hbe_quantile(&[2.0], q).unwrap();
            assert!((got - 2.0 * chi2_quantile(q, 1.0).unwrap()).abs() < 1e-12 * got);
        }
        assert!(matches!(hbe_quantile(&[0.0, 0.0], 0.9), Err(Error::DegenerateDistribution(_))));
        assert!(matches!(hbe_quantile(&[-1e-9, 0.0], 0.9), Err(Error::DegenerateDistribution(_))));
    }

    #[test]
    fn hbe_is_homogeneous() {
        let l = [0.3, 1.7, 2.2, 0.05];
        let base = hbe_quantile(&l, 0.95).unwrap();
        let scaled: Vec<f64> = l.iter().map(|v| v * 3.5).collect();
        assert!((hbe_quantile(&scaled, 0.95).unwrap() - 3.5 * base).abs() < 1e-12 * base);
    }

    #[test]
    fn hbe_reference_value() {
        let got = hbe_quantile(&[1.0, 2.0, 3.0], 0.95).unwrap();
        assert!((got - 16.541319265281473).abs() < 1e-9);
    }

    #[test]
    fn mse_given_z_edge_cases() {
        let (x, cache, m) = setup(8, 2, 20, 1);
        let mats = criterion_matrices(&m, &cache).unwrap();
        assert_eq!(mse_lr_given_z(&mats.r, &[0.0; 8]).unwrap(), 0.0);
        assert!(mse_lr_given_z(&mats.r, &[0.0; 7]).is_err());
        let xz: Vec<f64> = x.column(0).iter().cloned().collect();
        let gz = quad(&mats.g, &DVector::from_vec(xz));
        assert!(gz.abs() < 1e-10);
        assert_eq!(mse_dm_given_z(&mats.sigma_w, &x, &[0.0, 0.0], &[0.0; 8]).unwrap(), 0.0);
    }

    #[test]
    fn dm_mse_matches_enumeration() {
        let n = 8;
        let x = random_x(n, 2, 2);
        let cache = ProjectionCache::new(&x).unwrap();
        let pool = enumerate_balanced(n).unwrap();
        let m = moments_from_prefix(pool.assignments(), pool.len(), &cache).unwrap();
        let beta = [0.7, -1.1];
        let z: Vec<f64> = random_x(n, 1, 3).iter().cloned().collect();
        let v = &x * DVector::from_column_slice(&beta) + DVector::from_column_slice(&z);
        let direct = pool
            .assignments()
            .iter()
            .map(|w| (DVector::from_vec(w.to_f64()).dot(&v) / n as f64).powi(2))
            .sum::<f64>()
            / pool.len() as f64;
        let got = mse_dm_given_z(&m.sigma_w(), &x, &beta, &z).unwrap();
        assert!((got - direct).abs() < 1e-10);

        let w = Assignment::new(vec![1, -1, 1, -1, 1, -1, 1, -1]).unwrap();
        let pair = moments_from_prefix(&[w.clone(), w.negated()], 2, &cache).unwrap();
        let expect = (DVector::from_vec(w.to_f64()).dot(&v) / n as f64).powi(2);
        assert!((mse_dm_given_z(&pair.sigma_w(), &x, &beta, &z).unwrap() - expect).abs() < 1e-12);
    }

    fn enumerated_kept(x: &DMatrix<f64>, bound: f64) -> (ProjectionCache, Vec<Assignment>) {
        let n = x.nrows();
        let cache = ProjectionCache::new(x).unwrap();
        let kept = enumerate_balanced(n)
            .unwrap()
            .assignments()
            .iter()
            .filter(|w| cache.quad(w.as_slice()) / (n as f64) < bound)
            .cloned()
            .collect();
        (cache, kept)
    }

    #[test]
    fn lr_mse_averaged_over_z_matches_enumeration() {
        // E_z of the exact squared error is sigma^2 E_w[w'(I-P)w / (n - w'Pw)^2]
        let n = 8;
        for seed in 0..5 {
            let x = random_x(n, 1, 200 + seed);
            let (cache, kept) = enumerated_kept(&x, 0.5);
            let m = moments_from_prefix(&kept, kept.len(), &cache).unwrap();
            let mats = criterion_matrices(&m, &cache).unwrap();
            let ip = cache.residual_projector();
            let exact = kept
                .iter()
                .map(|w| {
                    let wv = DVector::from_vec(w.to_f64());
                    quad(ip, &wv) / (n as f64 - cache.quad(w.as_slice())).powi(2)
                })
                .sum::<f64>()
                / kept.len() as f64;
            let approx = mats.r.trace() / (n * n) as f64;
            assert!((approx - exact).abs() < 0.05 * exact, "seed {seed}: {approx} vs {exact}");
        }
    }

    #[test]
    fn lr_mse_matches_enumerated_exact_error_per_z() {
        // pointwise in z the second-order term is only accurate for tight designs
        let n = 8;
        let x = DMatrix::from_column_slice(n, 1, &[0.9, -0.4, 1.3, -1.1, 0.2, -0.6, 0.5, -0.8]);
        let (cache, kept) = enumerated_kept(&x, 0.05);
        let m = moments_from_prefix(&kept, kept.len(), &cache).unwrap();
        let mats = criterion_matrices(&m, &cache).unwrap();
        let mut worst: f64 = 0.0;
        for seed in 0..50 {
            let z: Vec<f64> = random_x(n, 1, 100 + seed).iter().cloned().collect();
            let rz = cache.residual_projector() * DVector::from_column_slice(&z);
            let exact = kept
                .iter()
                .map(|w| {
                    let wv = DVector::from_vec(w.to_f64());
                    (wv.dot(&rz) / (n as f64 - cache.quad(w.as_slice()))).powi(2)
                })
                .sum::<f64>()
                / kept.len() as f64;
            let approx = mse_lr_given_z(&mats.r, &z).unwrap();
            worst = worst.max((approx - exact).abs() / exact);
        }
        assert!(worst < 0.05, "worst relative error {worst}");
    }

    #[test]
    fn expected_values_against_monte_carlo() {
        let (x, cache, m) = setup(10, 2, 40, 4);
        let mats = criterion_matrices(&m, &cache).unwrap();
        let beta = [0.5, -0.3];
        let n = 10.0;
        let draws = draw_matrix(&ZSampler::gaussian(), 10, 10_000, 5).unwrap();
        let lr: Vec<f64> = quadratic_forms(&mats.r, &draws).iter().map(|v| v / (n * n)).collect();
        let mean = lr.iter().sum::<f64>() / lr.len() as f64;
        let se = sample_sd(&lr) / (lr.len() as f64).sqrt();
        let expect = expected_mse_lr(&m, &cache, 1.0).unwrap();
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect} (se {se})");
        assert!((expect - mats.r.trace() / (n * n)).abs() < 1e-12);

        let dm: Vec<f64> = (0..draws.nrows())
            .map(|i| {
                let z: Vec<f64> = draws.row(i).iter().cloned().collect();
                mse_dm_given_z(&mats.sigma_w, &x, &beta, &z).unwrap()
            })
            .collect();
        let mean = dm.iter().sum::<f64>() / dm.len() as f64;
        let se = sample_sd(&dm) / (dm.len() as f64).sqrt();
        let expect = expected_mse_dm(&m, &x, &beta, 1.0).unwrap();
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect} (se {se})");
        assert_eq!(expected_mse_dm(&m, &x, &[0.0, 0.0], 2.0).unwrap(), 2.0 / n);
    }

    #[test]
    fn expected_dm_under_full_enumeration() {
        let n = 6;
        let x = random_x(n, 1, 6);
        let cache = ProjectionCache::new(&x).unwrap();
        let pool = enumerate_balanced(n).unwrap();
        let m = moments_from_prefix(pool.assignments(), pool.len(), &cache).unwrap();
        let beta = [1.3];
        let xb: Vec<f64> = x.column(0).iter().map(|v| v * beta[0]).collect();
        // Sigma_W = (n/(n-1)) (I - 11'/n)
        let nf = n as f64;
        let sum: f64 = xb.iter().sum();
        let ss: f64 = xb.iter().map(|v| v * v).sum();
        let bal = nf / (nf - 1.0) * (ss - sum * sum / nf);
        let expect = 1.0 / nf + bal / (nf * nf);
        assert!((expected_mse_dm(&m, &x, &beta, 1.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn standard_errors_against_monte_carlo() {
        let (x, cache, m) = setup(8, 1, 24, 7);
        let mats = criterion_matrices(&m, &cache).unwrap();
        let beta = [0.8];
        let draws = draw_matrix(&ZSampler::gaussian(), 8, 100_000, 8).unwrap();
        let lr: Vec<f64> = quadratic_forms(&mats.r, &draws).iter().map(|v| v / 64.0).collect();
        let se_lr = se_mse_lr(&m, &cache, 1.0, 0.0).unwrap();
        let sd = sample_sd(&lr);
        assert!((sd - se_lr).abs() < 0.05 * sd, "lr: mc {sd} vs formula {se_lr}");

        let dm: Vec<f64> = (0..draws.nrows())
            .map(|i| {
                let z: Vec<f64> = draws.row(i).iter().cloned().collect();
                mse_dm_given_z(&mats.sigma_w, &x, &beta, &z).unwrap()
            })
            .collect();
        let se_dm = se_mse_dm(&m, &x, &beta, 1.0, 0.0).unwrap();
        let sd = sample_sd(&dm);
        assert!((sd - se_dm).abs() < 0.05 * sd, "dm: mc {sd} vs formula {se_dm}");
    }

    #[test]
    fn standard_error_edge_cases() {
        let (x, cache, m) = setup(8, 2, 20, 9);
        let se0 = se_mse_dm(&m, &x, &[0.0, 0.0], 1.0, 0.0).unwrap();
        assert!((se0 - 2f64.sqrt() * m.sigma_w().norm() / 64.0).abs() < 1e-15);
        assert!(se_mse_dm(&m, &x, &[0.0, 0.0], 1.0, 3.0).unwrap() > se0);
        assert!(se_mse_lr(&m, &cache, 1.0, 3.0).unwrap() > se_mse_lr(&m, &cache, 1.0, 0.0).unwrap());
        assert!(se_mse_dm(&m, &x, &[0.0, 0.0], 1.0, -3.0).is_err());
    }

    #[test]
    fn dm_standard_error_single_vector() {
        let x = random_x(4, 1, 10);
        let cache = ProjectionCache::new(&x).unwrap();
        let mut m = StrategyMoments::empty(4);
        m.push(&Assignment::new(vec![1, -1, 1, -1]).unwrap(), &cache).unwrap();
        assert!(se_mse_dm(&m, &x, &[1.0], 1.0, 0.0).is_ok());
    }

    #[test]
    fn approx_matches_printed_expression() {
        let (_, cache, m) = setup(10, 2, 30, 11);
        let mats = criterion_matrices(&m, &cache).unwrap();
        let n = 10.0;
        let ip = cache.residual_projector();
        let xp = cache.x_perp();
        let bal = (xp.transpose() * &mats.sigma_w * xp).trace();
        let rand2 = (ip * &mats.sigma_w).map(|v| v * v).sum();
        let gd = (&mats.g * &mats.d).trace();
        let d2 = (&mats.d * &mats.d).trace();
        let ss: f64 = (0..10).map(|i| mats.r[(i, i)].powi(2)).sum();
        for kappa in [0.0, 3.0] {
            let c = normal_quantile(0.95);
            let expect = bal + c * (2.0 * rand2 + 8.0 * gd / n + 8.0 * d2 / (n * n) + kappa * ss).sqrt();
            let got = tail_approx_lr(&criterion_scalars(&mats, &cache), 10, 0.95, kappa).unwrap();
            assert!((got - expect).abs() < 1e-10 * expect);
        }
        let sc = criterion_scalars(&mats, &cache);
        assert!(tail_approx_lr(&sc, 10, 0.95, 3.0).unwrap() >= tail_approx_lr(&sc, 10, 0.95, 0.0).unwrap());
        assert!((normal_quantile(0.95) - 1.645).abs() < 1e-3);
    }

    #[test]
    fn dm_criterion_recombines() {
        let (x, _, m) = setup(10, 2, 30, 12);
        let beta = [0.4, 1.2];
        let sigma2 = 2.0;
        let q = 0.9;
        let n = 10.0;
        let qp = q_prime_dm(&m, &x, &beta, sigma2, q, 0.0).unwrap();
        let combined = expected_mse_dm(&m, &x, &beta, sigma2).unwrap()
            + normal_quantile(q) * se_mse_dm(&m, &x, &beta, sigma2, 0.0).unwrap();
        assert!((combined - (sigma2 / n + qp / (n * n))).abs() < 1e-12);

        let sw = m.sigma_w();
        let (bal1, bal2) = dm_balance_terms(&sw, &x, &beta).unwrap();
        assert!(bal2 <= n * bal1 + 1e-10);
        let zero = q_prime_dm(&m, &x, &[0.0, 0.0], sigma2, q, 0.0).unwrap();
        let expect = normal_quantile(q) * sigma2 * (2.0 * sw.norm_squared()).sqrt();
        assert!((zero - expect).abs() < 1e-12);
    }

    #[test]
    fn normal_tail_properties() {
        let (_, cache, m) = setup(12, 2, 40, 13);
        let mats = criterion_matrices(&m, &cache).unwrap();
        let lo = tail_normal_lr(&mats, 0.5).unwrap();
        let hi = tail_normal_lr(&mats, 0.99).unwrap();
        assert!(lo <= hi);
        let draws = draw_matrix(&ZSampler::gaussian(), 12, 100_000, 14).unwrap();
        let mc = tail_exact_from_draws(&mats.r, &draws, 0.95).unwrap();
        let hbe = tail_normal_lr(&mats, 0.95).unwrap();
        assert!((mc - hbe).abs() < 0.03 * mc, "mc {mc} vs hbe {hbe}");
    }

    #[test]
    fn pair_order_does_not_matter() {
        let x = random_x(6, 1, 15);
        let cache = ProjectionCache::new(&x).unwrap();
        let w = Assignment::new(vec![1, 1, -1, -1, 1, -1]).unwrap();
        let a = moments_from_prefix(&[w.clone(), w.negated()], 2, &cache).unwrap();
        let b = moments_from_prefix(&[w.negated(), w.clone()], 2, &cache).unwrap();
        let ta = tail_normal_lr(&criterion_matrices(&a, &cache).unwrap(), 0.95).unwrap();
        let tb = tail_normal_lr(&criterion_matrices(&b, &cache).unwrap(), 0.95).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn exact_strategy_determinism_and_degenerate_sampler() {
        let (_, cache, m) = setup(8, 1, 20, 16);
        let mats = criterion_matrices(&m, &cache).unwrap();
        let a = tail_exact_lr(&mats, 0.9, &ZSampler::laplace(), 500, 3).unwrap();
        let b = tail_exact_lr(&mats, 0.9, &ZSampler::laplace(), 500, 3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let seq = parallel::sequential(|| tail_exact_lr(&mats, 0.9, &ZSampler::laplace(), 500, 3).unwrap());
        assert_eq!(a.to_bits(), seq.to_bits());

        let z0 = vec![0.3, -1.0, 0.2, 0.8, -0.5, 1.1, 0.0, -0.4];
        let expect = quad(&mats.r, &DVector::from_vec(z0.clone()));
        for q in [0.1, 0.5, 0.99] {
            let got = tail_exact_lr(&mats, q, &ZSampler::fixed(z0.clone()), 100, 0).unwrap();
            assert!((got - expect).abs() < 1e-12 * expect.abs().max(1.0));
        }
        assert!(tail_exact_lr(&mats, 0.9, &ZSampler::gaussian(), 50, 0).is_err());
    }

    #[test]
    fn sampler_moments() {
        for sampler in [ZSampler::gaussian(), ZSampler::laplace(), ZSampler::student_t(6.0)] {
            let d = draw_matrix(&sampler, 10, 20_000, 17).unwrap();
            let v: Vec<f64> = d.iter().cloned().collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            assert!(mean.abs() < 0.03, "{sampler}: mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "{sampler}: var {var}");
        }
        let custom = ZSampler {
            family: ZFamily::Custom { values: vec![1.0, 2.0, 6.0] },
            standardized: true,
        };
        let d = draw_matrix(&custom, 5, 1000, 1).unwrap();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!("t:0".parse::<ZSampler>().is_err());
        assert_eq!("t:2".parse::<ZSampler>().unwrap().to_string(), "t:2");
        assert_eq!(ZSampler::laplace().excess_kurtosis(), Some(3.0));
    }

    #[test]
    fn strategies_agree_on_dominated_pairs() {
        // a design that mixes in extra BCRD spread is worse on both balance and randomness terms
        let n = 10;
        let x = random_x(n, 2, 18);
        let cache = ProjectionCache::new(&x).unwrap();
        let pool = mirror_close(&sample_bcrd(n, 400, 18).unwrap());
        let ranked = crate::balance::rank_with(&crate::balance::Imbalance::mahalanobis(&cache), &pool).unwrap();
        let closed = ranked.closed_prefixes();
        let small = closed[closed.len() / 5];
        let good = moments_from_prefix(ranked.assignments(), small, &cache).unwrap();
        let bad = moments_from_prefix(&ranked.assignments()[ranked.len() - small..], small, &cache).unwrap();
        let specs = [
            TailSpec::normal_hbe(0.95),
            TailSpec::kurtosis(0.95, 0.0),
            TailSpec::kurtosis(0.95, 3.0),
            TailSpec::exact(0.95, ZSampler::gaussian(), 2000, 1),
        ];
        for spec in &specs {
            let ev = TailEvaluator::new(spec, n).unwrap();
            let g = ev.evaluate(&good, &cache).unwrap();
            let b = ev.evaluate(&bad, &cache).unwrap();
            assert!(g < b, "{spec:?}: {g} vs {b}");
        }
    }
}
