//! Threshold search: sweep the ranked pool and minimize the tail criterion
//! over mirror-closed prefixes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::balance::{rank_with, BalanceMetric, Imbalance, RankedPool};
use crate::design_space::{mirror_close, Assignment, AssignmentPool};
use crate::error::{Error, Result};
use crate::moments::{ProjectionCache, StrategyMoments};
use crate::parallel;
use crate::smoothing::smooth_series;
use crate::tail::{TailEvaluator, TailSpec};

/// Points in the default logarithmic grid.
pub const DEFAULT_GRID_POINTS: usize = 64;
/// Points in the coarse grid that cross-checks the ternary search.
pub const BINARY_CHECK_POINTS: usize = 16;
/// Designs with fewer retained assignments than this multiple of `n` are
/// flagged as too small for reliable randomization inference.
pub const FRAGILE_FACTOR: usize = 10;

const SNAPSHOT_BUDGET_BYTES: usize = 512 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SearchMode {
    Exhaustive,
    /// Logarithmically spaced prefixes, optionally followed by an exhaustive
    /// pass between the neighbours of the best grid point.
    Grid { points: usize, refine: bool },
    /// Ternary search down to a window of `tolerance` candidate prefixes.
    Binary { tolerance: usize },
}

impl Default for SearchMode {
    fn default() -> Self {
        SearchMode::Grid {
            points: DEFAULT_GRID_POINTS,
            refine: true,
        }
    }
}

impl SearchMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SearchMode::Grid { points, .. } if points < 2 => Err(Error::Parameter(format!(
                "grid mode needs at least 2 points, got {points}"
            ))),
            SearchMode::Binary { tolerance } if tolerance < 1 => Err(Error::Parameter(
                "binary mode tolerance must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SearchMode::Exhaustive => f.write_str("exhaustive"),
            SearchMode::Grid { points, refine: true } => write!(f, "grid:{points}"),
            SearchMode::Grid { points, refine: false } => write!(f, "grid:{points}:coarse"),
            SearchMode::Binary { tolerance } => write!(f, "binary:{tolerance}"),
        }
    }
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let number = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Parse(format!("bad search mode parameter {v:?}")))
        };
        let mode = match parts.as_slice() {
            ["exhaustive"] => SearchMode::Exhaustive,
            ["grid"] => SearchMode::default(),
            ["grid", p] => SearchMode::Grid {
                points: number(p)?,
                refine: true,
            },
            ["grid", p, "coarse"] => SearchMode::Grid {
                points: number(p)?,
                refine: false,
            },
            ["binary"] => SearchMode::Binary { tolerance: 8 },
            ["binary", t] => SearchMode::Binary { tolerance: number(t)? },
            _ => {
                return Err(Error::Parse(format!(
                    "unknown search mode {s:?}; expected exhaustive, grid[:points[:coarse]] or binary[:tolerance]"
                )))
            }
        };
        mode.validate()?;
        Ok(mode)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub s: usize,
    pub a: f64,
    pub q_raw: f64,
    pub q_smoothed: Option<f64>,
}

impl TracePoint {
    /// The value used for selection.
    pub fn q(&self) -> f64 {
        self.q_smoothed.unwrap_or(self.q_raw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    pub n: usize,
    pub s_star: usize,
    pub a_star: f64,
    pub q_star: f64,
    pub w_star: Vec<Assignment>,
    pub trace: Vec<TracePoint>,
    /// Size of the mirror-closed ranked pool.
    pub pool_size: usize,
    pub pool_seed: u64,
    pub inference_fragile: bool,
    pub metric: BalanceMetric,
    pub tail: TailSpec,
    pub mode: SearchMode,
}

/// Indices into `0..m` at roughly logarithmic spacing, always including both
/// ends.
pub fn log_grid(m: usize, points: usize) -> Vec<usize> {
    if m == 0 {
        return Vec::new();
    }
    if points >= m {
        return (0..m).collect();
    }
    let top = (m as f64).ln();
    let mut out: Vec<usize> = (0..points)
        .map(|i| {
            let v = (top * i as f64 / (points - 1) as f64).exp().round() as usize;
            v.clamp(1, m) - 1
        })
        .collect();
    out.dedup();
    out
}

/// A ranked, mirror-closed pool bound to a tail criterion, with memoized
/// criterion values at candidate prefixes.
pub struct Sweep {
    ranked: RankedPool,
    cache: ProjectionCache,
    tail: TailEvaluator,
    metric: BalanceMetric,
    candidates: Vec<usize>,
    values: BTreeMap<usize, f64>,
    checkpoints: BTreeMap<usize, StrategyMoments>,
    checkpoint_every: usize,
    pool_seed: u64,
}

impl Sweep {
    pub fn new(x: &DMatrix<f64>, pool: &AssignmentPool, metric: &BalanceMetric, tail: &TailSpec) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        if x.nrows() != pool.n() {
            return Err(Error::DimensionMismatch {
                expected: pool.n(),
                found: x.nrows(),
                context: "covariate rows vs pool n",
            });
        }
        let closed;
        let pool = if pool.mirror_closed() {
            pool
        } else {
            closed = mirror_close(pool);
            &closed
        };
        let cache = ProjectionCache::new(x)?;
        let evaluator = match metric {
            BalanceMetric::Mahalanobis => Imbalance::mahalanobis(&cache),
            other => Imbalance::new(x, other)?,
        };
        let ranked = rank_with(&evaluator, pool)?;
        let candidates = ranked.closed_prefixes();
        let tail = TailEvaluator::new(tail, pool.n())?;
        let checkpoint_every = (ranked.len() / 16).max(64);
        Ok(Sweep {
            ranked,
            cache,
            tail,
            metric: *metric,
            candidates,
            values: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            checkpoint_every,
            pool_seed: pool.seed(),
        })
    }

    pub fn ranked(&self) -> &RankedPool {
        &self.ranked
    }

    pub fn cache(&self) -> &ProjectionCache {
        &self.cache
    }

    /// Mirror-closed prefix lengths, ascending.
    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    /// Criterion values computed so far, keyed by candidate index.
    pub fn values(&self) -> &BTreeMap<usize, f64> {
        &self.values
    }

    fn batch_size(&self) -> usize {
        let n = self.cache.n();
        (SNAPSHOT_BUDGET_BYTES / (16 * n * n).max(1)).clamp(1, 32)
    }

    /// Evaluates the criterion at the given candidate indices.
    pub fn evaluate(&mut self, indices: &[usize]) -> Result<()> {
        let mut todo: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|i| !self.values.contains_key(i))
            .collect();
        if let Some(&bad) = todo.iter().find(|&&i| i >= self.candidates.len()) {
            return Err(Error::Index {
                index: bad,
                len: self.candidates.len(),
            });
        }
        todo.sort_unstable();
        todo.dedup();
        if todo.is_empty() {
            return Ok(());
        }
        let first_s = self.candidates[todo[0]];
        let (mut acc, mut at) = match self.checkpoints.range(..=first_s).next_back() {
            Some((&s, m)) => (m.clone(), s),
            None => (StrategyMoments::empty(self.cache.n()), 0),
        };
        let batch = self.batch_size();
        let mut pending: Vec<(usize, StrategyMoments)> = Vec::with_capacity(batch);
        for idx in todo {
            let target = self.candidates[idx];
            while at < target {
                acc.push(&self.ranked.assignments()[at], &self.cache)?;
                at += 1;
                if at % self.checkpoint_every == 0 && !self.checkpoints.contains_key(&at) {
                    self.checkpoints.insert(at, acc.clone());
                }
            }
            pending.push((idx, acc.clone()));
            if pending.len() == batch {
                self.flush(&mut pending)?;
            }
        }
        self.flush(&mut pending)
    }

    fn flush(&mut self, pending: &mut Vec<(usize, StrategyMoments)>) -> Result<()> {
        let tail = &self.tail;
        let cache = &self.cache;
        let results = parallel::map_slice(pending, |(_, m)| tail.evaluate(m, cache));
        for ((idx, m), r) in pending.drain(..).zip(results) {
            let v = r.map_err(|e| e.at_prefix(m.s()))?;
            self.values.insert(idx, v);
        }
        Ok(())
    }

    fn value(&mut self, idx: usize) -> Result<f64> {
        self.evaluate(&[idx])?;
        Ok(self.values[&idx])
    }

    /// Runs the search and assembles the result from every evaluated prefix.
    pub fn run(mut self, mode: &SearchMode) -> Result<DesignResult> {
        mode.validate()?;
        let m = self.candidates.len();
        match *mode {
            SearchMode::Exhaustive => {
                let all: Vec<usize> = (0..m).collect();
                self.evaluate(&all)?;
            }
            SearchMode::Grid { points, refine } => {
                let grid = log_grid(m, points);
                self.evaluate(&grid)?;
                if refine {
                    let best = grid
                        .iter()
                        .enumerate()
                        .min_by(|a, b| self.values[a.1].total_cmp(&self.values[b.1]).then(a.0.cmp(&b.0)))
                        .map(|(i, _)| i)
                        .expect("grid is non-empty");
                    let lo = grid[best.saturating_sub(1)];
                    let hi = grid[(best + 1).min(grid.len() - 1)];
                    let window: Vec<usize> = (lo..=hi).collect();
                    self.evaluate(&window)?;
                }
            }
            SearchMode::Binary { tolerance } => {
                let (mut lo, mut hi) = (0, m - 1);
                while hi - lo > tolerance.max(2) {
                    let m1 = lo + (hi - lo) / 3;
                    let m2 = hi - (hi - lo) / 3;
                    self.evaluate(&[m1, m2])?;
                    if self.value(m1)? <= self.value(m2)? {
                        hi = m2;
                    } else {
                        lo = m1;
                    }
                }
                let window: Vec<usize> = (lo..=hi).collect();
                self.evaluate(&window)?;
                self.evaluate(&log_grid(m, BINARY_CHECK_POINTS))?;
            }
        }
        self.finish(mode)
    }

    fn finish(self, mode: &SearchMode) -> Result<DesignResult> {
        let imbalances = self.ranked.imbalances();
        let mut trace: Vec<TracePoint> = self
            .values
            .iter()
            .map(|(&idx, &q)| {
                let s = self.candidates[idx];
                TracePoint {
                    s,
                    a: imbalances[s - 1],
                    q_raw: q,
                    q_smoothed: None,
                }
            })
            .collect();
        if self.tail.spec().smoothing() && trace.len() >= 4 {
            let a: Vec<f64> = trace.iter().map(|t| t.a).collect();
            let q: Vec<f64> = trace.iter().map(|t| t.q_raw).collect();
            let smoothed = smooth_series(&a, &q)?;
            for (t, v) in trace.iter_mut().zip(smoothed) {
                t.q_smoothed = Some(v);
            }
        }
        let best = trace
            .iter()
            .fold(None::<&TracePoint>, |acc, t| match acc {
                Some(b) if b.q() <= t.q() => Some(b),
                _ => Some(t),
            })
            .copied()
            .ok_or(Error::EmptyPool)?;
        let n = self.cache.n();
        Ok(DesignResult {
            n,
            s_star: best.s,
            a_star: best.a,
            q_star: best.q(),
            w_star: self.ranked.assignments()[..best.s].to_vec(),
            trace,
            pool_size: self.ranked.len(),
            pool_seed: self.pool_seed,
            inference_fragile: best.s < FRAGILE_FACTOR * n,
            metric: self.metric,
            tail: self.tail.spec().clone(),
            mode: *mode,
        })
    }
}

/// Finds the prefix of the ranked pool that minimizes the tail criterion.
pub fn optimize(
    x: &DMatrix<f64>,
    pool: &AssignmentPool,
    metric: &BalanceMetric,
    tail: &TailSpec,
    mode: &SearchMode,
) -> Result<DesignResult> {
    let result = Sweep::new(x, pool, metric, tail)?.run(mode)?;
    if result.inference_fragile {
        log::warn!(
            "optimal design keeps only {} assignments (< {} n); randomization inference will be coarse",
            result.s_star,
            FRAGILE_FACTOR
        );
    }
    Ok(result)
}

/// CSV with columns `s,a,q_raw,q_smoothed`, one row per evaluated prefix.
pub fn sweep_trace_export(result: &DesignResult) -> Result<String> {
    if result.trace.is_empty() {
        return Err(Error::Input("design has an empty sweep trace".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in &result.trace {
        w.serialize(t).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn sweep_trace_import(text: &str) -> Result<Vec<TracePoint>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(format!("trace csv: {e}"))))
        .collect()
}
