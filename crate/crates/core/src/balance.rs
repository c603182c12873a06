//! Imbalance metrics and pool ranking.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design_space::{Assignment, AssignmentPool};
use crate::error::{Error, Result};
use crate::moments::{symmetric_eigenvalues, ProjectionCache};
use crate::parallel;

/// Largest exponent the exponential kernel evaluates before clamping.
pub const DEFAULT_EXPONENT_CAP: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Kernel {
    Linear,
    Exponential,
    /// `exp(-|xi - xj|^2 / bandwidth)`; `None` picks the median pairwise
    /// squared distance.
    Gaussian { bandwidth: Option<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "kebab-case")]
pub enum BalanceMetric {
    Mahalanobis,
    Kernel { kernel: Kernel },
}

impl Default for BalanceMetric {
    fn default() -> Self {
        BalanceMetric::Mahalanobis
    }
}

impl BalanceMetric {
    pub fn validate(&self) -> Result<()> {
        if let BalanceMetric::Kernel {
            kernel: Kernel::Gaussian { bandwidth: Some(b) },
        } = self
        {
            if !(*b > 0.0 && b.is_finite()) {
                return Err(Error::Parameter(format!(
                    "gaussian bandwidth must be positive, got {b}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for BalanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BalanceMetric::Mahalanobis => f.write_str("mahalanobis"),
            BalanceMetric::Kernel { kernel } => match kernel {
                Kernel::Linear => f.write_str("kernel-linear"),
                Kernel::Exponential => f.write_str("kernel-exponential"),
                Kernel::Gaussian { bandwidth: None } => f.write_str("kernel-gaussian"),
                Kernel::Gaussian { bandwidth: Some(b) } => write!(f, "kernel-gaussian:{b}"),
            },
        }
    }
}

impl FromStr for BalanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let metric = match s {
            "mahalanobis" => BalanceMetric::Mahalanobis,
            "kernel-linear" => BalanceMetric::Kernel { kernel: Kernel::Linear },
            "kernel-exponential" => BalanceMetric::Kernel { kernel: Kernel::Exponential },
            "kernel-gaussian" => BalanceMetric::Kernel {
                kernel: Kernel::Gaussian { bandwidth: None },
            },
            other => match other.strip_prefix("kernel-gaussian:") {
                Some(b) => {
                    let bandwidth: f64 = b
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad gaussian bandwidth {b:?}")))?;
                    BalanceMetric::Kernel {
                        kernel: Kernel::Gaussian {
                            bandwidth: Some(bandwidth),
                        },
                    }
                }
                None => {
                    return Err(Error::Parse(format!(
                        "unknown metric {other:?}; expected mahalanobis, kernel-linear, \
                         kernel-exponential or kernel-gaussian[:bandwidth]"
                    )))
                }
            },
        };
        metric.validate()?;
        Ok(metric)
    }
}

/// `(1/n) w'Pw` with `P` the projector onto the columns of `x`.
pub fn mahalanobis_imbalance(x: &DMatrix<f64>, w: &Assignment) -> Result<f64> {
    if x.nrows() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: w.len(),
            context: "assignment length vs covariate rows",
        });
    }
    let cache = ProjectionCache::new(x)?;
    Ok(cache.quad(w.as_slice()) / w.len() as f64)
}

fn check_gram(k: &DMatrix<f64>) -> Result<()> {
    if !k.is_square() {
        return Err(Error::InvalidGram(format!(
            "gram matrix is {}x{}, expected square",
            k.nrows(),
            k.ncols()
        )));
    }
    let scale = k.abs().max().max(1e-300);
    let asym = (k - k.transpose()).abs().max();
    if asym > 1e-10 * scale {
        return Err(Error::InvalidGram(format!(
            "gram matrix is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    Ok(())
}

fn quad_form(k: &DMatrix<f64>, w: &[i8]) -> f64 {
    let mut total = 0.0;
    for (j, col) in k.column_iter().enumerate() {
        let inner: f64 = col.iter().zip(w).map(|(&a, &b)| a * b as f64).sum();
        total += inner * w[j] as f64;
    }
    total
}

/// `(1/n) w'Kw`.
pub fn kernel_imbalance(k: &DMatrix<f64>, w: &Assignment) -> Result<f64> {
    check_gram(k)?;
    if k.nrows() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: k.nrows(),
            found: w.len(),
            context: "assignment length vs gram matrix",
        });
    }
    Ok(quad_form(k, w.as_slice()) / w.len() as f64)
}

fn squared_distance(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(x.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Median of the pairwise squared distances between rows of `x`.
pub fn median_heuristic_bandwidth(x: &DMatrix<f64>) -> Result<f64> {
    let n = x.nrows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(squared_distance(x, i, j));
        }
    }
    if d.is_empty() {
        return Err(Error::Parameter("bandwidth heuristic needs at least two rows".into()));
    }
    let median = crate::distributions::empirical_quantile(&mut d, 0.5)?;
    if median <= 0.0 {
        return Err(Error::Parameter(
            "median pairwise distance is zero; supply a gaussian bandwidth".into(),
        ));
    }
    Ok(median)
}

/// Gram matrix plus the number of exponential-kernel entries that were clamped.
#[derive(Clone, Debug)]
pub struct Gram {
    pub matrix: DMatrix<f64>,
    pub clamped: usize,
}

pub fn gram_matrix(x: &DMatrix<f64>, kernel: &Kernel) -> Result<DMatrix<f64>> {
    Ok(gram_matrix_with_cap(x, kernel, DEFAULT_EXPONENT_CAP)?.matrix)
}

pub fn gram_matrix_with_cap(x: &DMatrix<f64>, kernel: &Kernel, exponent_cap: f64) -> Result<Gram> {
    let n = x.nrows();
    let inner = || x * x.transpose();
    let (matrix, clamped) = match *kernel {
        Kernel::Linear => (crate::moments::symmetrize(&inner()), 0),
        Kernel::Exponential => {
            let ip = inner();
            let mut clamped = 0;
            let m = DMatrix::from_fn(n, n, |i, j| {
                let v = 0.5 * (ip[(i, j)] + ip[(j, i)]);
                if v > exponent_cap {
                    clamped += 1;
                    exponent_cap.exp()
                } else {
                    v.exp()
                }
            });
            if clamped > 0 {
                log::warn!(
                    "exponential kernel: {clamped} gram entries clamped at exp({exponent_cap})"
                );
            }
            (m, clamped)
        }
        Kernel::Gaussian { bandwidth } => {
            let bw = match bandwidth {
                Some(b) if b > 0.0 && b.is_finite() => b,
                Some(b) => {
                    return Err(Error::Parameter(format!(
                        "gaussian bandwidth must be positive, got {b}"
                    )))
                }
                None => median_heuristic_bandwidth(x)?,
            };
            let mut m = DMatrix::zeros(n, n);
            for j in 0..n {
                m[(j, j)] = 1.0;
                for i in 0..j {
                    let v = (-squared_distance(x, i, j) / bw).exp();
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            (m, 0)
        }
    };
    Ok(Gram { matrix, clamped })
}

/// A metric bound to a covariate matrix, ready to score assignments.
#[derive(Clone, Debug)]
pub struct Imbalance {
    metric: BalanceMetric,
    n: usize,
    inner: Prepared,
}

#[derive(Clone, Debug)]
enum Prepared {
    Mahalanobis(Box<ProjectionCache>),
    Kernel(DMatrix<f64>),
}

impl Imbalance {
    pub fn new(x: &DMatrix<f64>, metric: &BalanceMetric) -> Result<Self> {
        metric.validate()?;
        let inner = match metric {
            BalanceMetric::Mahalanobis => Prepared::Mahalanobis(Box::new(ProjectionCache::new(x)?)),
            BalanceMetric::Kernel { kernel } => {
                let k = gram_matrix(x, kernel)?;
                check_gram(&k)?;
                Prepared::Kernel(k)
            }
        };
        Ok(Imbalance {
            metric: *metric,
            n: x.nrows(),
            inner,
        })
    }

    /// Reuses an existing projection for the Mahalanobis metric.
    pub fn mahalanobis(cache: &ProjectionCache) -> Self {
        Imbalance {
            metric: BalanceMetric::Mahalanobis,
            n: cache.n(),
            inner: Prepared::Mahalanobis(Box::new(cache.clone())),
        }
    }

    pub fn metric(&self) -> &BalanceMetric {
        &self.metric
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn value(&self, w: &Assignment) -> Result<f64> {
        if w.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: w.len(),
                context: "assignment length vs covariate rows",
            });
        }
        let nf = self.n as f64;
        Ok(match &self.inner {
            Prepared::Mahalanobis(cache) => cache.quad(w.as_slice()) / nf,
            Prepared::Kernel(k) => quad_form(k, w.as_slice()) / nf,
        })
    }

    /// The matrix `M` with imbalance `(1/n) w'Mw`.
    pub fn form(&self) -> DMatrix<f64> {
        match &self.inner {
            Prepared::Mahalanobis(cache) => cache.projector().clone(),
            Prepared::Kernel(k) => k.clone(),
        }
    }

    /// Minimum eigenvalue of the quadratic form, for PSD diagnostics.
    pub fn min_eigenvalue(&self) -> f64 {
        symmetric_eigenvalues(&self.form()).min()
    }
}

#[derive(Clone, Debug)]
pub struct RankedPool {
    pool: AssignmentPool,
    imbalances: Vec<f64>,
    source_index: Vec<usize>,
}

impl RankedPool {
    pub fn pool(&self) -> &AssignmentPool {
        &self.pool
    }

    pub fn assignments(&self) -> &[Assignment] {
        self.pool.assignments()
    }

    pub fn imbalances(&self) -> &[f64] {
        &self.imbalances
    }

    /// Position of each ranked entry in the unranked input pool.
    pub fn source_index(&self) -> &[usize] {
        &self.source_index
    }

    pub fn len(&self) -> usize {
        self.imbalances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imbalances.is_empty()
    }

    /// Prefix lengths `s` whose first `s` ranked entries are closed under
    /// `w -> -w`, in ascending order.
    pub fn closed_prefixes(&self) -> Vec<usize> {
        let mut open = 0i64;
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for (i, w) in self.assignments().iter().enumerate() {
            if seen.contains(&w.negated()) {
                open -= 1;
            } else {
                open += 1;
            }
            seen.insert(w.clone());
            if open == 0 {
                out.push(i + 1);
            }
        }
        out
    }
}

/// Scores every assignment and sorts ascending. Ties are broken so that `w`
/// and `-w` sit next to each other, then by input position.
pub fn rank_with(evaluator: &Imbalance, pool: &AssignmentPool) -> Result<RankedPool> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let values = parallel::try_map_indexed(pool.len(), |i| {
        evaluator.value(&pool.assignments()[i].canonical())
    })?;
    let mut first_of_pair: HashMap<Assignment, usize> = HashMap::with_capacity(pool.len());
    let pair_key: Vec<usize> = pool
        .assignments()
        .iter()
        .enumerate()
        .map(|(i, w)| *first_of_pair.entry(w.canonical()).or_insert(i))
        .collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .total_cmp(&values[b])
            .then(pair_key[a].cmp(&pair_key[b]))
            .then(a.cmp(&b))
    });
    Ok(RankedPool {
        pool: pool.permuted(&order),
        imbalances: order.iter().map(|&i| values[i]).collect(),
        source_index: order,
    })
}

pub fn rank_pool(x: &DMatrix<f64>, pool: &AssignmentPool, metric: &BalanceMetric) -> Result<RankedPool> {
    rank_with(&Imbalance::new(x, metric)?, pool)
}
