//! Desk-scale simulation studies: design strategy comparison, agreement of
//! tail strategies, and the optimal threshold as the covariate count grows.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::balance::{BalanceMetric, RankedPool};
use crate::covariates::standardize;
use crate::design_space::{sample_bcrd, Assignment, AssignmentPool};
use crate::distributions::empirical_quantile;
use crate::error::{Error, Result};
use crate::inference::LrFit;
use crate::optimizer::{DesignResult, SearchMode, Sweep};
use crate::parallel;
use crate::rng::{derive_seed, stream_rng, StreamRng};
use crate::tail::{TailSpec, TailStrategy, ZFamily, ZSampler};

const LABEL_X: u64 = 1;
const LABEL_BETA: u64 = 2;
const LABEL_POOL: u64 = 3;
const LABEL_Z: u64 = 4;
const LABEL_INNER: u64 = 5;
const LABEL_EXACT: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StrategyKind {
    Bcrd,
    Good,
    Opt,
    Det,
    Bad,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Bcrd,
        StrategyKind::Good,
        StrategyKind::Opt,
        StrategyKind::Det,
        StrategyKind::Bad,
    ];
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::Bcrd => "BCRD",
            StrategyKind::Good => "GOOD",
            StrategyKind::Opt => "OPT",
            StrategyKind::Det => "DET",
            StrategyKind::Bad => "BAD",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    /// BCRD draws before mirror closure.
    pub s: usize,
    pub q: f64,
    pub beta_t: f64,
    /// Share of the non-treatment response variance explained by `X beta`.
    pub r2_target: f64,
    pub z_family: ZSampler,
    pub outer_draws: usize,
    pub inner_draws: usize,
    pub seed: u64,
    pub strategies: Vec<StrategyKind>,
    /// Criterion used to pick the OPT design.
    pub tail: TailSpec,
    pub mode: SearchMode,
    /// Monte Carlo draws for the exact traces of the agreement study.
    pub exact_draws: usize,
    /// Grid size for the agreement study.
    pub grid_points: usize,
    pub p_list: Vec<usize>,
    /// Draw gaussian z in orthogonal blocks of n (exact marginals, lower
    /// variance across the outer loop).
    pub coupled_z: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 50,
            p: 5,
            s: 2000,
            q: 0.95,
            beta_t: 1.0,
            r2_target: 0.1,
            z_family: ZSampler::gaussian(),
            outer_draws: 500,
            inner_draws: 300,
            seed: 0,
            strategies: StrategyKind::ALL.to_vec(),
            tail: TailSpec::normal_hbe(0.95),
            mode: SearchMode::default(),
            exact_draws: 10_000,
            grid_points: 64,
            p_list: vec![1, 2, 5, 10, 20],
            coupled_z: true,
        }
    }
}

impl SimConfig {
    pub fn paper_scale() -> Self {
        SimConfig {
            n: 100,
            p: 10,
            s: 25_000,
            outer_draws: 3000,
            inner_draws: 1000,
            p_list: vec![1, 2, 5, 10, 20, 50],
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n < 4 || self.n % 2 != 0 {
            return bad(format!("n = {} must be even and at least 4", self.n));
        }
        if self.p == 0 || self.p >= self.n {
            return bad(format!("p = {} must lie in 1..n", self.p));
        }
        if self.s < 100 {
            return bad(format!("pool size {} must be at least 100", self.s));
        }
        if !(self.r2_target > 0.0 && self.r2_target < 1.0) {
            return bad(format!("r2_target {} must lie in (0, 1)", self.r2_target));
        }
        if self.outer_draws < 100 || self.inner_draws < 100 {
            return bad("outer and inner draw counts must be at least 100".into());
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return bad(format!("q = {} must lie in (0, 1)", self.q));
        }
        if !self.beta_t.is_finite() {
            return bad("beta_t must be finite".into());
        }
        if self.grid_points < 3 {
            return bad("grid_points must be at least 3".into());
        }
        self.z_family.validate(self.n)?;
        self.tail.validate()?;
        self.mode.validate()
    }

    /// `sd(z) / sd(X beta)` implied by the target share.
    pub fn noise_ratio(&self) -> f64 {
        ((1.0 - self.r2_target) / self.r2_target).sqrt()
    }
}

/// Covariates, coefficients and pool shared by every design in a study.
#[derive(Clone, Debug)]
pub struct Study {
    pub x: DMatrix<f64>,
    pub beta: Vec<f64>,
    pub xb: Vec<f64>,
    pub sigma_z: f64,
    pub pool: AssignmentPool,
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

impl Study {
    /// Builds the study with the first `p` of `p_max` master covariate columns,
    /// so studies over several `p` share covariates.
    pub fn with_columns(config: &SimConfig, p: usize, p_max: usize) -> Result<Self> {
        if p == 0 || p > p_max {
            return Err(Error::Parameter(format!("p = {p} outside 1..={p_max}")));
        }
        let n = config.n;
        let master = gaussian_matrix(n, p_max, &mut stream_rng(derive_seed(config.seed, LABEL_X), 0));
        let x = standardize(&master.columns(0, p).into_owned(), &[])?;
        let mut rng = stream_rng(derive_seed(config.seed, LABEL_BETA), 0);
        let beta_all: Vec<f64> = (0..p_max).map(|_| StandardNormal.sample(&mut rng)).collect();
        let beta = beta_all[..p].to_vec();
        let xb: Vec<f64> = (&x * DVector::from_column_slice(&beta)).iter().copied().collect();
        let sigma_z = config.noise_ratio() * sample_sd(&xb);
        let pool = sample_bcrd(n, config.s, derive_seed(config.seed, LABEL_POOL))?;
        Ok(Study {
            x,
            beta,
            xb,
            sigma_z,
            pool,
        })
    }

    pub fn new(config: &SimConfig) -> Result<Self> {
        Study::with_columns(config, config.p, config.p)
    }

    /// `count` draws of `z`, scaled to `sigma_z`, one row each.
    pub fn draw_z(&self, config: &SimConfig, count: usize) -> Result<DMatrix<f64>> {
        let n = config.n;
        let seed = derive_seed(config.seed, LABEL_Z);
        let rows: Vec<Vec<f64>> = if config.coupled_z && config.z_family.family == ZFamily::Gaussian {
            let blocks = count.div_ceil(n);
            let per_block = parallel::map_indexed(blocks, |b| orthogonal_block(n, &mut stream_rng(seed, b as u64)));
            per_block.into_iter().flatten().take(count).collect()
        } else {
            config.z_family.validate(n)?;
            parallel::map_indexed(count, |i| config.z_family.draw(n, &mut stream_rng(seed, i as u64)))
        };
        Ok(DMatrix::from_fn(count, n, |i, j| self.sigma_z * rows[i][j]))
    }
}

/// `n` gaussian vectors: the columns of a Haar orthogonal matrix with
/// independent chi(n) lengths.
fn orthogonal_block(n: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let g = gaussian_matrix(n, n, rng);
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    (0..n)
        .map(|k| {
            let sign = if r[(k, k)] < 0.0 { -1.0 } else { 1.0 };
            let radius = (0..n)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    e * e
                })
                .sum::<f64>()
                .sqrt();
            q.column(k).iter().map(|v| sign * radius * v).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub kind: StrategyKind,
    /// Number of assignments in the design.
    pub size: usize,
    /// Largest imbalance in the design.
    pub threshold: f64,
    /// Per-z average squared error of the LR estimate.
    pub mse: Vec<f64>,
    pub mean: f64,
    pub quantile: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub q: f64,
    pub pool_size: usize,
    pub design: DesignResult,
    pub strategies: Vec<StrategySummary>,
}

impl StrategyComparison {
    pub fn get(&self, kind: StrategyKind) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.kind == kind)
    }
}

/// Squared error of the LR estimate for one response draw.
pub fn lr_squared_error(fit: &LrFit, base: &[f64], beta_t: f64, w: &Assignment) -> Result<f64> {
    let y: Vec<f64> = base
        .iter()
        .zip(w.as_slice())
        .map(|(b, &e)| b + beta_t * e as f64)
        .collect();
    let e = fit.estimate(&y, w)? - beta_t;
    Ok(e * e)
}

fn strategy_range(kind: StrategyKind, m: usize, s_star: usize) -> std::ops::Range<usize> {
    let fifth = (m / 5).max(1);
    match kind {
        StrategyKind::Bcrd => 0..m,
        StrategyKind::Good => 0..fifth,
        StrategyKind::Opt => 0..s_star,
        StrategyKind::Det => 0..1,
        StrategyKind::Bad => m - fifth..m,
    }
}

/// Nested Monte Carlo of the LR squared error for each design built from one
/// ranked pool: outer draws of `z`, inner draws of `w` from the design.
pub fn run_strategy_comparison(config: &SimConfig) -> Result<StrategyComparison> {
    config.validate()?;
    let study = Study::new(config)?;
    let sweep = Sweep::new(&study.x, &study.pool, &BalanceMetric::Mahalanobis, &config.tail)?;
    let ranked: RankedPool = sweep.ranked().clone();
    let fit = LrFit::from_cache(sweep.cache());
    let design = sweep.run(&config.mode)?;
    let m = ranked.len();
    let z = study.draw_z(config, config.outer_draws)?;
    let inner_seed = derive_seed(config.seed, LABEL_INNER);
    let kinds = &config.strategies;
    let ranges: Vec<_> = kinds.iter().map(|&k| strategy_range(k, m, design.s_star)).collect();

    let per_z = parallel::try_map_indexed(config.outer_draws, |i| {
        let base: Vec<f64> = study.xb.iter().zip(z.row(i).iter()).map(|(a, b)| a + b).collect();
        ranges
            .iter()
            .map(|range| {
                if range.len() == 1 {
                    return lr_squared_error(&fit, &base, config.beta_t, &ranked.assignments()[range.start]);
                }
                // common inner stream across designs
                let mut rng = stream_rng(inner_seed, i as u64);
                let mut acc = 0.0;
                for _ in 0..config.inner_draws {
                    let idx = range.start + rng.random_range(0..range.len());
                    acc += lr_squared_error(&fit, &base, config.beta_t, &ranked.assignments()[idx])?;
                }
                Ok(acc / config.inner_draws as f64)
            })
            .collect::<Result<Vec<f64>>>()
    })?;

    let mut strategies = Vec::with_capacity(kinds.len());
    for (k, (&kind, range)) in kinds.iter().zip(&ranges).enumerate() {
        let mse: Vec<f64> = per_z.iter().map(|row| row[k]).collect();
        let mean = mse.iter().sum::<f64>() / mse.len() as f64;
        let quantile = empirical_quantile(&mut mse.clone(), config.q)?;
        strategies.push(StrategySummary {
            kind,
            size: range.len(),
            threshold: ranked.imbalances()[range.end - 1],
            mse,
            mean,
            quantile,
        });
    }
    Ok(StrategyComparison {
        q: config.q,
        pool_size: m,
        design,
        strategies,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailTrace {
    pub label: String,
    pub spec: TailSpec,
    /// Criterion values divided by the value at the full pool.
    pub normalized: Vec<f64>,
    /// Grid position of the minimum.
    pub best: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailAgreement {
    pub s: Vec<usize>,
    pub a: Vec<f64>,
    pub traces: Vec<TailTrace>,
}

impl TailAgreement {
    pub fn trace(&self, label: &str) -> Option<&TailTrace> {
        self.traces.iter().find(|t| t.label == label)
    }

    /// Distance in grid steps between the minimizers of two traces.
    pub fn step_gap(&self, a: &str, b: &str) -> Option<usize> {
        Some(self.trace(a)?.best.abs_diff(self.trace(b)?.best))
    }
}

/// The tail strategies compared by [`run_tail_strategy_agreement`], labelled.
pub fn agreement_specs(config: &SimConfig) -> Vec<(String, TailSpec)> {
    let q = config.q;
    let exact_seed = derive_seed(config.seed, LABEL_EXACT);
    let exact = |sampler: ZSampler| TailSpec {
        q,
        strategy: TailStrategy::ExactMc {
            sampler,
            n_z: config.exact_draws,
            smoothing: true,
        },
        seed: exact_seed,
    };
    vec![
        ("exact-gaussian".into(), exact(ZSampler::gaussian())),
        ("exact-laplace".into(), exact(ZSampler::laplace())),
        ("exact-t2".into(), exact(ZSampler::student_t(2.0))),
        ("normal-hbe".into(), TailSpec::normal_hbe(q)),
        ("kurtosis-0".into(), TailSpec::kurtosis(q, 0.0)),
        ("kurtosis-3".into(), TailSpec::kurtosis(q, 3.0)),
    ]
}

/// Criterion traces over a common log-spaced grid of prefixes, one per tail
/// strategy, each normalized to 1 at the full pool.
pub fn run_tail_strategy_agreement(config: &SimConfig) -> Result<TailAgreement> {
    config.validate()?;
    let study = Study::new(config)?;
    let mode = SearchMode::Grid {
        points: config.grid_points,
        refine: false,
    };
    let mut grid: Option<(Vec<usize>, Vec<f64>)> = None;
    let mut traces = Vec::new();
    for (label, spec) in agreement_specs(config) {
        let result = Sweep::new(&study.x, &study.pool, &BalanceMetric::Mahalanobis, &spec)?.run(&mode)?;
        let s: Vec<usize> = result.trace.iter().map(|t| t.s).collect();
        let a: Vec<f64> = result.trace.iter().map(|t| t.a).collect();
        match &grid {
            None => grid = Some((s, a)),
            Some((s0, _)) if *s0 != s => {
                return Err(Error::Validation("tail strategies evaluated different grids".into()))
            }
            _ => {}
        }
        let values: Vec<f64> = result.trace.iter().map(|t| t.q()).collect();
        let full = *values.last().ok_or(Error::EmptyPool)?;
        let best = values
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v < values[b] { i } else { b });
        traces.push(TailTrace {
            label,
            spec,
            normalized: values.iter().map(|v| v / full).collect(),
            best,
        });
    }
    let (s, a) = grid.ok_or(Error::EmptyPool)?;
    Ok(TailAgreement { s, a, traces })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub p: usize,
    pub a_star: f64,
    pub s_star: usize,
    /// Fraction of pool imbalances at or below `a_star`.
    pub rank: f64,
}

/// Optimal threshold for each covariate count, on nested covariate sets and a
/// common pool.
pub fn run_threshold_vs_p(config: &SimConfig, p_list: &[usize]) -> Result<Vec<ThresholdRow>> {
    config.validate()?;
    let p_max = p_list.iter().copied().max().ok_or_else(|| Error::Parameter("empty p list".into()))?;
    if p_max >= config.n {
        return Err(Error::Parameter(format!("largest p = {p_max} must be below n = {}", config.n)));
    }
    let mut rows = Vec::with_capacity(p_list.len());
    for &p in p_list {
        let study = Study::with_columns(config, p, p_max)?;
        let sweep = Sweep::new(&study.x, &study.pool, &BalanceMetric::Mahalanobis, &config.tail)?;
        let imbalances = sweep.ranked().imbalances().to_vec();
        let result = sweep.run(&config.mode)?;
        let below = imbalances.iter().filter(|&&v| v <= result.a_star).count();
        rows.push(ThresholdRow {
            p,
            a_star: result.a_star,
            s_star: result.s_star,
            rank: below as f64 / imbalances.len() as f64,
        });
    }
    Ok(rows)
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::File {
        path,
        message: e.to_string(),
    })
}

#[derive(Serialize)]
struct MseRow {
    strategy: StrategyKind,
    draw: usize,
    mse: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    strategy: StrategyKind,
    size: usize,
    threshold: f64,
    mean: f64,
    quantile: f64,
}

impl StrategyComparison {
    /// `strategy,draw,mse`.
    pub fn samples_csv(&self) -> Result<String> {
        csv_string(self.strategies.iter().flat_map(|s| {
            s.mse.iter().enumerate().map(move |(i, &v)| MseRow {
                strategy: s.kind,
                draw: i,
                mse: v,
            })
        }))
    }

    /// `strategy,size,threshold,mean,quantile`.
    pub fn summary_csv(&self) -> Result<String> {
        csv_string(self.strategies.iter().map(|s| SummaryRow {
            strategy: s.kind,
            size: s.size,
            threshold: s.threshold,
            mean: s.mean,
            quantile: s.quantile,
        }))
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        write_file(dir, "strategy_mse.csv", &self.samples_csv()?)?;
        write_file(dir, "strategy_summary.csv", &self.summary_csv()?)
    }
}

impl TailAgreement {
    /// `s,a,<label>...` with normalized criterion values.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["s".to_string(), "a".to_string()];
        header.extend(self.traces.iter().map(|t| t.label.clone()));
        let err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(&header).map_err(err)?;
        for (i, (s, a)) in self.s.iter().zip(&self.a).enumerate() {
            let mut row = vec![s.to_string(), a.to_string()];
            row.extend(self.traces.iter().map(|t| t.normalized[i].to_string()));
            w.write_record(&row).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        write_file(dir, "tail_agreement.csv", &self.to_csv()?)
    }
}

/// `p,a_star,s_star,rank`.
pub fn threshold_csv(rows: &[ThresholdRow]) -> Result<String> {
    csv_string(rows.iter())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    StrategyComparison,
    TailAgreement,
    ThresholdVsP,
}

impl FromStr for StudyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strategy-comparison" => Ok(StudyKind::StrategyComparison),
            "tail-agreement" => Ok(StudyKind::TailAgreement),
            "threshold-vs-p" => Ok(StudyKind::ThresholdVsP),
            other => Err(Error::Parse(format!(
                "unknown study {other:?}; expected strategy-comparison, tail-agreement or threshold-vs-p"
            ))),
        }
    }
}
