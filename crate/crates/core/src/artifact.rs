//! Versioned design artifacts: the chosen retained set plus everything needed
//! to audit and reuse it.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::balance::{BalanceMetric, Imbalance};
use crate::design_space::{Assignment, Generator};
use crate::error::{Error, Result};
use crate::moments::{ProjectionCache, StrategyMoments};
use crate::optimizer::{DesignResult, SearchMode};
use crate::rng::stream_rng;
use crate::tail::TailSpec;

pub const SCHEMA_VERSION: u32 = 1;

/// Settings that produced a design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub covariates_path: Option<String>,
    pub n: usize,
    pub p: usize,
    /// BCRD draws before mirror closure.
    pub pool_draws: usize,
    /// Greedy pair-switch members added to the pool.
    pub greedy: usize,
    pub generator: Generator,
    pub seed: u64,
    pub metric: BalanceMetric,
    pub tail: TailSpec,
    pub mode: SearchMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignArtifact {
    pub schema_version: u32,
    pub created_unix: u64,
    pub config: DesignConfig,
    pub covariate_names: Vec<String>,
    /// Standardized covariates, one row per subject.
    pub covariates: Vec<Vec<f64>>,
    pub result: DesignResult,
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set.
pub fn timestamp_now() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        return v;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl DesignArtifact {
    pub fn new(
        config: DesignConfig,
        covariate_names: Vec<String>,
        x: &DMatrix<f64>,
        result: DesignResult,
        created_unix: u64,
    ) -> Result<Self> {
        let art = DesignArtifact {
            schema_version: SCHEMA_VERSION,
            created_unix,
            config,
            covariate_names,
            covariates: x.row_iter().map(|r| r.iter().copied().collect()).collect(),
            result,
        };
        art.validate()?;
        Ok(art)
    }

    pub fn x(&self) -> DMatrix<f64> {
        let n = self.covariates.len();
        let p = self.covariates.first().map_or(0, Vec::len);
        DMatrix::from_fn(n, p, |i, j| self.covariates[i][j])
    }

    pub fn w_star(&self) -> &[Assignment] {
        &self.result.w_star
    }

    /// One assignment drawn uniformly from the retained set.
    pub fn sample_assignment(&self, seed: u64) -> &Assignment {
        let w = &self.result.w_star;
        &w[stream_rng(seed, 0).random_range(0..w.len())]
    }

    /// Structural consistency: dimensions, retained-set size and trace.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        let r = &self.result;
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema {
                expected: SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        if r.n != self.config.n {
            return fail(format!("result n = {} but config n = {}", r.n, self.config.n));
        }
        if let Some((i, w)) = r.w_star.iter().enumerate().find(|(_, w)| w.len() != r.n) {
            return fail(format!("assignment {} has length {}, expected n = {}", i + 1, w.len(), r.n));
        }
        if r.w_star.len() != r.s_star {
            return fail(format!("s_star = {} but {} assignments stored", r.s_star, r.w_star.len()));
        }
        if r.s_star == 0 || r.s_star > r.pool_size {
            return fail(format!("s_star = {} outside 1..={}", r.s_star, r.pool_size));
        }
        if self.covariates.len() != r.n || self.covariates.iter().any(|row| row.len() != self.config.p) {
            return fail(format!("covariates are not {} x {}", r.n, self.config.p));
        }
        if self.covariate_names.len() != self.config.p {
            return fail(format!("{} covariate names for p = {}", self.covariate_names.len(), self.config.p));
        }
        match r.trace.iter().find(|t| t.s == r.s_star) {
            Some(t) if t.q() == r.q_star && t.a == r.a_star => {}
            _ => return fail("trace has no point matching (s_star, a_star, q_star)".into()),
        }
        if r.trace.iter().any(|t| t.q() < r.q_star) {
            return fail("q_star is not the minimum of the trace".into());
        }
        Ok(())
    }

    /// Recomputes the statistical invariants of the retained set.
    pub fn invariant_checks(&self) -> Result<Vec<Check>> {
        self.validate()?;
        let r = &self.result;
        let w = &r.w_star;
        let mut checks = Vec::new();
        let set: HashSet<&Assignment> = w.iter().collect();
        checks.push(Check {
            name: "distinct",
            passed: set.len() == w.len(),
            detail: format!("{} distinct of {}", set.len(), w.len()),
        });
        let missing = w.iter().filter(|v| !set.contains(&v.negated())).count();
        checks.push(Check {
            name: "mirror-closed",
            passed: missing == 0,
            detail: format!("{missing} assignments without their mirror"),
        });

        let x = self.x();
        let cache = ProjectionCache::new(&x)?;
        let mut m = StrategyMoments::empty(r.n);
        for v in w {
            m.push(v, &cache)?;
        }
        let s = w.len() as i64;
        let diag_ok = (0..r.n).all(|i| m.counts()[i * r.n + i] == s);
        checks.push(Check {
            name: "unit-diagonal",
            passed: diag_ok,
            detail: "diag of the second-moment matrix equals 1".into(),
        });
        let rows = m.sigma_w_row_sums();
        checks.push(Check {
            name: "forced-balance",
            passed: m.is_forced_balance() && rows.iter().all(|&v| v == 0.0),
            detail: "second-moment matrix annihilates the ones vector".into(),
        });

        let eval = match &r.metric {
            BalanceMetric::Mahalanobis => Imbalance::mahalanobis(&cache),
            other => Imbalance::new(&x, other)?,
        };
        let mut worst = f64::NEG_INFINITY;
        for v in w {
            worst = worst.max(eval.value(v)?);
        }
        let tol = 1e-9 * r.a_star.abs().max(1.0);
        checks.push(Check {
            name: "threshold",
            passed: worst <= r.a_star + tol && worst >= r.a_star - tol,
            detail: format!("largest retained imbalance {worst:.6e}, a_star {:.6e}", r.a_star),
        });
        Ok(checks)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("design artifact: {e}")))?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Parse("design artifact has no schema_version".into()))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(Error::Schema {
                expected: SCHEMA_VERSION,
                found: u32::try_from(found).unwrap_or(u32::MAX),
            });
        }
        let art: DesignArtifact =
            serde_json::from_value(value).map_err(|e| Error::Parse(format!("design artifact: {e}")))?;
        art.validate()?;
        Ok(art)
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_design(artifact: &DesignArtifact, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    artifact.validate()?;
    let text = artifact.to_json()?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let file_err = |e: std::io::Error| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(file_err)?;
    let written = f
        .write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .and_then(|_| f.sync_all());
    if let Err(e) = written {
        let _ = std::fs::remove_file(&tmp);
        return Err(file_err(e));
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        file_err(e)
    })
}

pub fn load_design(path: impl AsRef<Path>) -> Result<DesignArtifact> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    DesignArtifact::from_json(&text).map_err(|e| match e {
        Error::Parse(m) | Error::Validation(m) => Error::File {
            path: path.to_path_buf(),
            message: m,
        },
        other => other,
    })
}
