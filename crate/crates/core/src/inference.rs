//! Treatment-effect estimators and randomization inference over a design.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::design_space::Assignment;
use crate::error::{Error, Result};
use crate::moments::{orthogonalize, ProjectionCache};
use crate::parallel;
use crate::rng::stream_rng;

/// Smallest replicate cap accepted by the randomization test.
pub const MIN_REPLICATES: usize = 100;
/// Default number of hypothesized effects scanned by [`confidence_interval`].
pub const DEFAULT_CI_POINTS: usize = 201;
/// Half-width of the default CI grid, in null-distribution standard deviations.
pub const DEFAULT_CI_HALF_WIDTH: f64 = 5.0;

const COLLINEAR_GAP: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Dm,
    Lr,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Dm => "dm",
            EstimatorKind::Lr => "lr",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dm" => Ok(EstimatorKind::Dm),
            "lr" => Ok(EstimatorKind::Lr),
            other => Err(Error::Parse(format!("unknown estimator {other:?}; expected dm or lr"))),
        }
    }
}

fn check_y(y: &[f64], w: &Assignment) -> Result<()> {
    if y.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            found: y.len(),
            context: "responses vs assignment length",
        });
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("response {} is not finite", i + 1)));
    }
    Ok(())
}

/// Half the difference in arm means, `w'y / n`.
pub fn estimate_dm(y: &[f64], w: &Assignment) -> Result<f64> {
    check_y(y, w)?;
    Ok(w.dot(y) / w.len() as f64)
}

/// Regression adjustment: `w'(I-P)y / (n - w'Pw)` evaluated through the
/// orthogonalized covariates.
#[derive(Clone, Debug)]
pub struct LrFit {
    x_perp: DMatrix<f64>,
}

impl LrFit {
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        Ok(LrFit {
            x_perp: orthogonalize(x)?,
        })
    }

    pub fn from_cache(cache: &ProjectionCache) -> Self {
        LrFit {
            x_perp: cache.x_perp().clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.x_perp.nrows()
    }

    pub fn estimate(&self, y: &[f64], w: &Assignment) -> Result<f64> {
        check_y(y, w)?;
        if w.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                found: w.len(),
                context: "assignment length vs covariate rows",
            });
        }
        let e = w.as_slice();
        let mut wy = 0.0;
        for (a, b) in e.iter().zip(y) {
            wy += *a as f64 * b;
        }
        let mut cross = 0.0;
        let mut quad = 0.0;
        for col in self.x_perp.column_iter() {
            let mut cw = 0.0;
            let mut cy = 0.0;
            for ((c, a), b) in col.iter().zip(e).zip(y) {
                cw += c * *a as f64;
                cy += c * b;
            }
            cross += cw * cy;
            quad += cw * cw;
        }
        let gap = self.n() as f64 - quad;
        if gap < COLLINEAR_GAP {
            return Err(Error::CollinearDesign { gap });
        }
        Ok((wy - cross) / gap)
    }
}

pub fn estimate_lr(x: &DMatrix<f64>, y: &[f64], w: &Assignment) -> Result<f64> {
    LrFit::new(x)?.estimate(y, w)
}

#[derive(Clone, Debug)]
pub enum Estimator {
    Dm,
    Lr(LrFit),
}

impl Estimator {
    /// Builds the estimator; `x` is required for regression adjustment.
    pub fn new(kind: EstimatorKind, x: Option<&DMatrix<f64>>) -> Result<Self> {
        match kind {
            EstimatorKind::Dm => Ok(Estimator::Dm),
            EstimatorKind::Lr => {
                let x = x.ok_or_else(|| Error::Input("the lr estimator needs covariates".into()))?;
                Ok(Estimator::Lr(LrFit::new(x)?))
            }
        }
    }

    pub fn kind(&self) -> EstimatorKind {
        match self {
            Estimator::Dm => EstimatorKind::Dm,
            Estimator::Lr(_) => EstimatorKind::Lr,
        }
    }

    pub fn estimate(&self, y: &[f64], w: &Assignment) -> Result<f64> {
        match self {
            Estimator::Dm => estimate_dm(y, w),
            Estimator::Lr(fit) => fit.estimate(y, w),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub w_exp: Assignment,
    pub y: Vec<f64>,
    pub estimator: EstimatorKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestVariant {
    /// Compare absolute values of the centered statistic.
    #[default]
    Absolute,
    /// Equal-tailed: twice the smaller one-sided add-one p-value.
    QuantileRegion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestOptions {
    /// Replicate cap `R`.
    pub replicates: usize,
    pub alpha: f64,
    pub seed: u64,
    pub variant: TestVariant,
}

impl Default for TestOptions {
    fn default() -> Self {
        TestOptions {
            replicates: 10_000,
            alpha: 0.05,
            seed: 0,
            variant: TestVariant::Absolute,
        }
    }
}

impl TestOptions {
    fn validate(&self) -> Result<()> {
        if self.replicates < MIN_REPLICATES {
            return Err(Error::Parameter(format!(
                "replicate cap must be at least {MIN_REPLICATES}, got {}",
                self.replicates
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Parameter(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub estimate: f64,
    pub p_value: f64,
    pub null_estimates: Vec<f64>,
    pub r_used: usize,
    pub alpha: f64,
    pub reject: bool,
}

/// Replicate assignments: every member of `w_star` other than `w_exp` if
/// there are at most `cap`, otherwise `cap` of them drawn without replacement.
pub fn select_replicates<'a>(
    w_star: &'a [Assignment],
    w_exp: &Assignment,
    cap: usize,
    seed: u64,
) -> Result<Vec<&'a Assignment>> {
    let pos = w_star.iter().position(|w| w == w_exp).ok_or_else(|| {
        Error::DesignMismatch("the realized assignment is not in the design's retained set".into())
    })?;
    let others: Vec<&Assignment> = w_star
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != pos)
        .map(|(_, w)| w)
        .collect();
    if others.len() <= cap {
        return Ok(others);
    }
    let mut picked = index::sample(&mut stream_rng(seed, 0), others.len(), cap).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| others[i]).collect())
}

fn add_one_p(observed: f64, stats: impl Iterator<Item = f64>, variant: TestVariant) -> f64 {
    // near-ties count against rejection
    let slack = 1e-10 * observed.abs().max(f64::MIN_POSITIVE);
    let (mut abs_hits, mut lower, mut upper, mut r) = (0usize, 0usize, 0usize, 0usize);
    for t in stats {
        r += 1;
        if t.abs() >= observed.abs() - slack {
            abs_hits += 1;
        }
        if t <= observed + slack {
            lower += 1;
        }
        if t >= observed - slack {
            upper += 1;
        }
    }
    let denom = (1 + r) as f64;
    match variant {
        TestVariant::Absolute => (1 + abs_hits) as f64 / denom,
        TestVariant::QuantileRegion => (2.0 * (1 + lower.min(upper)) as f64 / denom).min(1.0),
    }
}

/// Randomization test of the sharp null of no effect, with replicates drawn
/// only from the design's retained assignments.
pub fn randomization_test(
    w_star: &[Assignment],
    record: &ExperimentRecord,
    estimator: &Estimator,
    opts: &TestOptions,
) -> Result<TestResult> {
    opts.validate()?;
    if estimator.kind() != record.estimator {
        return Err(Error::Input(format!(
            "record asks for the {} estimator but {} was supplied",
            record.estimator,
            estimator.kind()
        )));
    }
    let reps = select_replicates(w_star, &record.w_exp, opts.replicates, opts.seed)?;
    let estimate = estimator.estimate(&record.y, &record.w_exp)?;
    let null_estimates = parallel::try_map_indexed(reps.len(), |i| estimator.estimate(&record.y, reps[i]))?;
    let p_value = add_one_p(estimate, null_estimates.iter().copied(), opts.variant);
    Ok(TestResult {
        estimate,
        p_value,
        r_used: null_estimates.len(),
        null_estimates,
        alpha: opts.alpha,
        reject: p_value <= opts.alpha,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    /// Retained effects at the ends of the grid: the interval may extend
    /// beyond it.
    pub touches_grid_edge: bool,
    pub grid_points: usize,
}

/// Scans hypothesized effects `delta`; under each, the counterfactual
/// responses for a replicate `w_r` are `y - delta w_exp + delta w_r`.
pub struct InversionScan {
    estimate: f64,
    /// Estimate on the observed responses under each replicate.
    a: Vec<f64>,
    /// Estimate on the response vector `w_exp` under each replicate.
    b: Vec<f64>,
    variant: TestVariant,
}

impl InversionScan {
    pub fn new(
        w_star: &[Assignment],
        record: &ExperimentRecord,
        estimator: &Estimator,
        opts: &TestOptions,
    ) -> Result<Self> {
        opts.validate()?;
        let reps = select_replicates(w_star, &record.w_exp, opts.replicates, opts.seed)?;
        let estimate = estimator.estimate(&record.y, &record.w_exp)?;
        let w_exp = record.w_exp.to_f64();
        let pairs = parallel::try_map_indexed(reps.len(), |i| {
            Ok::<_, Error>((
                estimator.estimate(&record.y, reps[i])?,
                estimator.estimate(&w_exp, reps[i])?,
            ))
        })?;
        let (a, b) = pairs.into_iter().unzip();
        Ok(InversionScan {
            estimate,
            a,
            b,
            variant: opts.variant,
        })
    }

    pub fn estimate(&self) -> f64 {
        self.estimate
    }

    /// p-value of the sharp null "effect = delta". Both estimators map
    /// `w_r` to exactly 1 under replicate `w_r`, so the replicate statistic
    /// centered at `delta` is `a_r - delta b_r`.
    pub fn p_value(&self, delta: f64) -> f64 {
        let stats = self.a.iter().zip(&self.b).map(|(a, b)| a - delta * b);
        add_one_p(self.estimate - delta, stats, self.variant)
    }

    /// Standard deviation of the null estimates, the default grid scale.
    pub fn null_sd(&self) -> f64 {
        let r = self.a.len() as f64;
        if r < 2.0 {
            return 0.0;
        }
        let mean = self.a.iter().sum::<f64>() / r;
        (self.a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
    }

    /// `points` effects centered on the estimate, `half_width` null standard
    /// deviations either side.
    pub fn default_grid(&self, points: usize, half_width: f64) -> Vec<f64> {
        let sd = self.null_sd();
        let scale = if sd > 0.0 { sd } else { self.estimate.abs().max(1.0) };
        let half = (points / 2) as f64;
        let step = half_width * scale / half.max(1.0);
        (0..points)
            .map(|i| self.estimate + (i as f64 - half) * step)
            .collect()
    }

    pub fn interval(&self, grid: &[f64], alpha: f64) -> Result<ConfidenceInterval> {
        if grid.is_empty() {
            return Err(Error::Input("confidence grid is empty".into()));
        }
        if grid.windows(2).any(|p| p[1] < p[0]) {
            return Err(Error::Input("confidence grid must be ascending".into()));
        }
        let p: Vec<f64> = grid.iter().map(|&d| self.p_value(d)).collect();
        let kept: Vec<usize> = (0..grid.len()).filter(|&i| p[i] > alpha).collect();
        let (first, last) = match (kept.first(), kept.last()) {
            (Some(&f), Some(&l)) => (f, l),
            _ => {
                return Err(Error::GridExcludesRetained {
                    lower_p: p[0],
                    upper_p: p[grid.len() - 1],
                })
            }
        };
        let touches = first == 0 || last == grid.len() - 1;
        if touches {
            log::warn!("confidence interval reaches the edge of the effect grid; widen the grid");
        }
        Ok(ConfidenceInterval {
            estimate: self.estimate,
            lower: grid[first],
            upper: grid[last],
            level: 1.0 - alpha,
            touches_grid_edge: touches,
            grid_points: grid.len(),
        })
    }
}

/// Test-inversion confidence interval. With `grid = None` the default grid of
/// [`DEFAULT_CI_POINTS`] effects spanning the estimate plus or minus
/// [`DEFAULT_CI_HALF_WIDTH`] null standard deviations is used.
pub fn confidence_interval(
    w_star: &[Assignment],
    record: &ExperimentRecord,
    estimator: &Estimator,
    opts: &TestOptions,
    grid: Option<&[f64]>,
) -> Result<ConfidenceInterval> {
    let scan = InversionScan::new(w_star, record, estimator, opts)?;
    match grid {
        Some(g) => scan.interval(g, opts.alpha),
        None => scan.interval(&scan.default_grid(DEFAULT_CI_POINTS, DEFAULT_CI_HALF_WIDTH), opts.alpha),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design_space::{mirror_close, sample_bcrd};
    use nalgebra::DVector;
    use rand_distr::{Distribution, StandardNormal};

    fn random_x(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream_rng(seed, 0);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        random_x(n, 1, seed).iter().cloned().collect()
    }

    #[test]
    fn dm_hand_cases() {
        let w = Assignment::new(vec![1, -1]).unwrap();
        assert_eq!(estimate_dm(&[3.0, 1.0], &w).unwrap(), 1.0);
        let w4 = Assignment::new(vec![1, -1, -1, 1]).unwrap();
        assert_eq!(estimate_dm(&[2.5; 4], &w4).unwrap(), 0.0);
        let y = [0.3, 1.2, -0.7, 2.0];
        assert_eq!(estimate_dm(&y, &w4.negated()).unwrap(), -estimate_dm(&y, &w4).unwrap());
        assert!(estimate_dm(&[1.0], &w4).is_err());
    }

    #[test]
    fn lr_matches_normal_equations() {
        for seed in 0..10 {
            let n = 10;
            let x = random_x(n, 2, seed);
            let w = crate::design_space::bcrd_draw(n, seed, 0);
            let y = random_vec(n, 100 + seed);
            // regress y on [w | X]
            let mut design = DMatrix::zeros(n, 3);
            design.set_column(0, &DVector::from_vec(w.to_f64()));
            design.columns_mut(1, 2).copy_from(&x);
            let yv = DVector::from_vec(y.clone());
            let coef = (design.transpose() * &design)
                .cholesky()
                .unwrap()
                .solve(&(design.transpose() * yv));
            let got = estimate_lr(&x, &y, &w).unwrap();
            assert!((got - coef[0]).abs() < 1e-8, "{got} vs {}", coef[0]);
        }
    }

    #[test]
    fn lr_exact_recovery_and_covariate_invariance() {
        let n = 12;
        let x = random_x(n, 3, 1);
        let fit = LrFit::new(&x).unwrap();
        let w = crate::design_space::bcrd_draw(n, 1, 0);
        let y: Vec<f64> = w.to_f64().iter().map(|v| 2.5 * v).collect();
        assert!((fit.estimate(&y, &w).unwrap() - 2.5).abs() < 1e-12);
        let base = random_vec(n, 2);
        let shift = &x * DVector::from_vec(vec![1.0, -4.0, 0.5]);
        let shifted: Vec<f64> = base.iter().zip(shift.iter()).map(|(a, b)| a + b).collect();
        let d = fit.estimate(&base, &w).unwrap() - fit.estimate(&shifted, &w).unwrap();
        assert!(d.abs() < 1e-10);
    }

    #[test]
    fn lr_collinear_assignment() {
        let w = Assignment::new(vec![1, -1, 1, -1]).unwrap();
        let x = DMatrix::from_column_slice(4, 1, &w.to_f64());
        assert!(matches!(estimate_lr(&x, &[1.0, 2.0, 3.0, 4.0], &w), Err(Error::CollinearDesign { .. })));
    }

    fn design(n: usize, s: usize, seed: u64) -> Vec<Assignment> {
        mirror_close(&sample_bcrd(n, s, seed).unwrap()).assignments().to_vec()
    }

    #[test]
    fn constant_response_gives_p_one() {
        let w_star = design(10, 200, 3);
        let record = ExperimentRecord {
            w_exp: w_star[5].clone(),
            y: vec![4.0; 10],
            estimator: EstimatorKind::Dm,
        };
        let t = randomization_test(&w_star, &record, &Estimator::Dm, &TestOptions::default()).unwrap();
        assert_eq!(t.p_value, 1.0);
        assert!(t.null_estimates.iter().all(|&v| v == 0.0));
        assert_eq!(t.r_used, w_star.len() - 1);
    }

    #[test]
    fn p_value_bounds_and_replicate_cap() {
        let n = 12;
        let x = random_x(n, 2, 4);
        let w_star = design(n, 600, 4);
        let est = Estimator::new(EstimatorKind::Lr, Some(&x)).unwrap();
        for seed in 0..5 {
            let record = ExperimentRecord {
                w_exp: w_star[seed as usize].clone(),
                y: random_vec(n, 50 + seed),
                estimator: EstimatorKind::Lr,
            };
            let opts = TestOptions {
                replicates: 150,
                seed,
                ..TestOptions::default()
            };
            let t = randomization_test(&w_star, &record, &est, &opts).unwrap();
            assert_eq!(t.r_used, 150);
            assert!(t.p_value >= 1.0 / 151.0 && t.p_value <= 1.0);
            let again = randomization_test(&w_star, &record, &est, &opts).unwrap();
            assert_eq!(t, again);
        }
    }

    #[test]
    fn replicates_are_distinct_and_exclude_w_exp() {
        let w_star = design(10, 400, 5);
        let reps = select_replicates(&w_star, &w_star[0], 120, 9).unwrap();
        assert_eq!(reps.len(), 120);
        assert!(!reps.contains(&&w_star[0]));
        let set: std::collections::HashSet<_> = reps.iter().collect();
        assert_eq!(set.len(), 120);
    }

    #[test]
    fn mismatch_and_parameter_errors() {
        let w_star = design(8, 50, 6);
        let outside = crate::design_space::enumerate_balanced(8)
            .unwrap()
            .assignments()
            .iter()
            .find(|w| !w_star.contains(w))
            .unwrap()
            .clone();
        let record = ExperimentRecord {
            w_exp: outside,
            y: vec![1.0; 8],
            estimator: EstimatorKind::Dm,
        };
        assert!(matches!(
            randomization_test(&w_star, &record, &Estimator::Dm, &TestOptions::default()),
            Err(Error::DesignMismatch(_))
        ));
        let opts = TestOptions {
            replicates: 10,
            ..TestOptions::default()
        };
        assert!(matches!(
            randomization_test(&w_star, &record, &Estimator::Dm, &opts),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn interval_contains_estimate_and_grows_with_grid() {
        let n = 16;
        let w_star = design(n, 800, 7);
        let w_exp = w_star[3].clone();
        let z = random_vec(n, 8);
        let y: Vec<f64> = w_exp.to_f64().iter().zip(&z).map(|(w, z)| 0.8 * w + z).collect();
        let record = ExperimentRecord {
            w_exp,
            y,
            estimator: EstimatorKind::Dm,
        };
        let opts = TestOptions::default();
        let scan = InversionScan::new(&w_star, &record, &Estimator::Dm, &opts).unwrap();
        assert_eq!(scan.p_value(scan.estimate()), 1.0);
        let grid = scan.default_grid(DEFAULT_CI_POINTS, DEFAULT_CI_HALF_WIDTH);
        assert_eq!(grid[DEFAULT_CI_POINTS / 2], scan.estimate());
        let ci = scan.interval(&grid, 0.05).unwrap();
        assert!(ci.lower <= ci.estimate && ci.estimate <= ci.upper);
        assert!(!ci.touches_grid_edge);

        let narrow: Vec<f64> = grid[60..141].to_vec();
        let small = scan.interval(&narrow, 0.05).unwrap();
        assert!(small.lower >= ci.lower && small.upper <= ci.upper);

        let far: Vec<f64> = (0..10).map(|i| 1e3 + i as f64).collect();
        assert!(matches!(scan.interval(&far, 0.05), Err(Error::GridExcludesRetained { .. })));

        let direct = confidence_interval(&w_star, &record, &Estimator::Dm, &opts, None).unwrap();
        assert_eq!(direct, ci);
    }

    #[test]
    fn shifted_null_matches_direct_recomputation() {
        let n = 10;
        let x = random_x(n, 2, 9);
        let w_star = design(n, 300, 9);
        let est = Estimator::new(EstimatorKind::Lr, Some(&x)).unwrap();
        let record = ExperimentRecord {
            w_exp: w_star[0].clone(),
            y: random_vec(n, 10),
            estimator: EstimatorKind::Lr,
        };
        let opts = TestOptions {
            replicates: 100,
            ..TestOptions::default()
        };
        let scan = InversionScan::new(&w_star, &record, &est, &opts).unwrap();
        let delta = 0.37;
        let reps = select_replicates(&w_star, &record.w_exp, 100, 0).unwrap();
        let obs = scan.estimate() - delta;
        let mut hits = 0;
        for w in &reps {
            let y_r: Vec<f64> = record
                .y
                .iter()
                .zip(record.w_exp.as_slice())
                .zip(w.as_slice())
                .map(|((y, a), b)| y - delta * *a as f64 + delta * *b as f64)
                .collect();
            let t = est.estimate(&y_r, w).unwrap() - delta;
            if t.abs() >= obs.abs() - 1e-9 {
                hits += 1;
            }
        }
        let expect = (1 + hits) as f64 / (1 + reps.len()) as f64;
        assert!((scan.p_value(delta) - expect).abs() < 1e-12, "{} vs {expect}", scan.p_value(delta));
    }

    #[test]
    fn quantile_region_variant() {
        let w_star = design(10, 300, 11);
        let record = ExperimentRecord {
            w_exp: w_star[1].clone(),
            y: random_vec(10, 12),
            estimator: EstimatorKind::Dm,
        };
        let opts = TestOptions {
            variant: TestVariant::QuantileRegion,
            ..TestOptions::default()
        };
        let t = randomization_test(&w_star, &record, &Estimator::Dm, &opts).unwrap();
        assert!(t.p_value > 0.0 && t.p_value <= 1.0);
    }

    #[test]
    fn mirror_average_is_unbiased() {
        let n = 12;
        let x = random_x(n, 2, 13);
        let w_star = design(n, 100, 13);
        let xb = &x * DVector::from_vec(vec![1.5, -0.5]);
        let z = random_vec(n, 14);
        let v: Vec<f64> = xb.iter().zip(&z).map(|(a, b)| a + b).collect();
        let mean = w_star.iter().map(|w| w.dot(&v) / n as f64).sum::<f64>() / w_star.len() as f64;
        assert!(mean.abs() < 1e-12);
    }
}
