//! Acceptance criteria 1-9. Runs as a plain binary so every criterion prints
//! one PASS/FAIL line; exits non-zero if any fails.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use rerand::artifact::{DesignArtifact, DesignConfig};
use rerand::balance::BalanceMetric;
use rerand::covariates::standardize;
use rerand::design_space::{enumerate_balanced, mirror_close, sample_bcrd, Assignment, Generator};
use rerand::distributions::empirical_quantile;
use rerand::inference::{
    confidence_interval, estimate_dm, randomization_test, Estimator, EstimatorKind, ExperimentRecord, LrFit,
    TestOptions,
};
use rerand::moments::{
    criterion_matrices, moments_from_prefix, symmetric_eigenvalues, trace_of_product,
    ProjectionCache,
};
use rerand::optimizer::{optimize, DesignResult, SearchMode, Sweep};
use rerand::parallel;
use rerand::rng::stream_rng;
use rerand::sim::{run_strategy_comparison, run_tail_strategy_agreement, SimConfig, StrategyKind, Study};
use rerand::tail::{hbe_quantile, TailSpec, ZSampler};

type Outcome = Result<String, String>;

fn gaussian(rows: usize, cols: usize, seed: u64, stream: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, stream);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_identities() -> Outcome {
    let mut worst_trace = 0.0f64;
    let mut worst_d = 0.0f64;
    for inst in 0..50u64 {
        let mut rng = stream_rng(101, inst);
        let n = 2 * rng.random_range(3..=25usize);
        let p = rng.random_range(1..=5usize.min(n - 2));
        let x = standardize(&gaussian(n, p, 102, inst), &[]).map_err(|e| e.to_string())?;
        let cache = ProjectionCache::new(&x).map_err(|e| e.to_string())?;
        let pool = mirror_close(&sample_bcrd(n, rng.random_range(20..200), inst).map_err(|e| e.to_string())?);
        let m = moments_from_prefix(pool.assignments(), pool.len(), &cache).map_err(|e| e.to_string())?;
        let sw = m.sigma_w();
        ensure((0..n).all(|i| sw[(i, i)] == 1.0), || format!("instance {inst}: diag(Sigma_W) != 1"))?;
        ensure(m.sigma_w_row_sums().iter().all(|&v| v == 0.0), || {
            format!("instance {inst}: Sigma_W 1 != 0")
        })?;
        let mats = criterion_matrices(&m, &cache).map_err(|e| e.to_string())?;
        let nf = n as f64;
        let xp = cache.x_perp();
        let bal = (xp.transpose() * &sw * xp).trace();
        let lhs = (&mats.g + &mats.d * (2.0 / nf)).trace();
        let e1 = rel(lhs, nf + bal);
        worst_trace = worst_trace.max(e1);
        ensure(e1 <= 1e-8, || format!("instance {inst}: trace identity off by {e1:.2e}"))?;
        let tr_psw = trace_of_product(cache.projector(), &sw);
        let e2 = rel(mats.d.trace(), nf * tr_psw);
        worst_d = worst_d.max(e2);
        ensure(e2 <= 1e-10, || format!("instance {inst}: tr(D) identity off by {e2:.2e}"))?;
        let tr_d2 = mats.d.norm_squared();
        let tr_g2 = mats.g.norm_squared();
        let tr_gd = trace_of_product(&mats.g, &mats.d);
        ensure(tr_d2 <= mats.d.trace().powi(2) * (1.0 + 1e-8), || {
            format!("instance {inst}: tr(D^2) > tr(D)^2")
        })?;
        ensure(tr_gd <= (tr_g2 * tr_d2).sqrt() * (1.0 + 1e-8), || {
            format!("instance {inst}: Cauchy-Schwarz bound on tr(GD) fails")
        })?;
    }
    Ok(format!(
        "50 instances; worst relative error {worst_trace:.1e} (trace identity), {worst_d:.1e} (tr D)"
    ))
}

fn c2_estimators() -> Outcome {
    let mut worst = 0.0f64;
    for inst in 0..100u64 {
        let mut rng = stream_rng(201, inst);
        let n = 2 * rng.random_range(3..=25usize);
        let p = rng.random_range(1..=5usize.min(n - 2));
        let x = gaussian(n, p, 202, inst);
        let y: Vec<f64> = gaussian(n, 1, 203, inst).iter().copied().collect();
        let w = rerand::design_space::bcrd_draw(n, 204, inst);
        let mut design = DMatrix::zeros(n, p + 1);
        design.set_column(0, &DVector::from_vec(w.to_f64()));
        design.columns_mut(1, p).copy_from(&x);
        let coef = (design.transpose() * &design)
            .cholesky()
            .ok_or("normal equations not positive definite")?
            .solve(&(design.transpose() * DVector::from_vec(y.clone())));
        let got = rerand::inference::estimate_lr(&x, &y, &w).map_err(|e| e.to_string())?;
        worst = worst.max((got - coef[0]).abs());
    }
    ensure(worst <= 1e-8, || format!("LR vs normal equations: max abs error {worst:.2e}"))?;

    let mut worst_mean = 0.0f64;
    for inst in 0..20u64 {
        let n = 20 + 2 * (inst as usize % 10);
        let x = gaussian(n, 3, 205, inst);
        let beta = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let z = gaussian(n, 1, 206, inst);
        let v: Vec<f64> = (&x * beta + z).iter().copied().collect();
        let pool = mirror_close(&sample_bcrd(n, 150, inst).map_err(|e| e.to_string())?);
        let mut total = 0.0;
        for w in pool.assignments() {
            total += estimate_dm(&v, w).map_err(|e| e.to_string())?;
        }
        worst_mean = worst_mean.max((total / pool.len() as f64).abs());
    }
    ensure(worst_mean <= 1e-12, || format!("DM mirror average {worst_mean:.2e}"))?;
    Ok(format!(
        "LR max error {worst:.1e} over 100 instances; DM mirror average {worst_mean:.1e}"
    ))
}

fn mc_quantiles(lambdas: &[f64], draws: usize, seed: u64, qs: &[f64]) -> Vec<f64> {
    const CHUNK: usize = 10_000;
    let chunks = draws / CHUNK;
    let mut sums: Vec<f64> = parallel::map_indexed(chunks, |c| {
        let mut rng = stream_rng(seed, c as u64);
        (0..CHUNK)
            .map(|_| {
                lambdas
                    .iter()
                    .map(|l| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        l * e * e
                    })
                    .sum()
            })
            .collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect();
    qs.iter().map(|&q| empirical_quantile(&mut sums, q).unwrap()).collect()
}

fn c3_hbe() -> Outcome {
    let qs = [0.9, 0.95, 0.99];
    let mut worst = 0.0f64;
    for set in 0..20u64 {
        let mut rng = stream_rng(301, set);
        let k = rng.random_range(5..=100usize);
        let lambdas: Vec<f64> = (0..k)
            .map(|_| match set % 4 {
                0 => rng.random_range(0.0..1.0),
                1 => -rng.random_range(f64::MIN_POSITIVE..1.0f64).ln(),
                2 => rng.random_range(0.5..2.0),
                _ => {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    e * e
                }
            })
            .collect();
        let mc = mc_quantiles(&lambdas, 1_000_000, 302 + set, &qs);
        for (&q, &m) in qs.iter().zip(&mc) {
            let h = hbe_quantile(&lambdas, q).map_err(|e| e.to_string())?;
            let e = rel(h, m);
            worst = worst.max(e);
            ensure(e <= 0.02, || format!("set {set} (k = {k}), q = {q}: HBE {h:.5} vs MC {m:.5}"))?;
        }
    }
    let mut worst_eq = 0.0f64;
    for (k, q, expect) in [
        (1usize, 0.95, 3.841_458_820_694_124),
        (5, 0.9, 9.236_356_899_781_123),
        (10, 0.99, 23.209_251_158_954_36),
    ] {
        let scale = 2.5;
        let h = hbe_quantile(&vec![scale; k], q).map_err(|e| e.to_string())?;
        let e = rel(h, scale * expect);
        worst_eq = worst_eq.max(e);
        ensure(e <= 1e-10, || format!("equal eigenvalues k = {k}: {h} vs {}", scale * expect))?;
    }
    Ok(format!(
        "20 sets x 3 levels; worst relative error {:.2}% vs 1e6-draw Monte Carlo; pure chi-square {worst_eq:.1e}",
        100.0 * worst
    ))
}

fn c4_agreement() -> Outcome {
    let cfg = SimConfig::default();
    let out = run_tail_strategy_agreement(&cfg).map_err(|e| e.to_string())?;
    let hk = out.step_gap("normal-hbe", "kurtosis-0").ok_or("missing trace")?;
    let he = out.step_gap("normal-hbe", "exact-gaussian").ok_or("missing trace")?;
    let msg = format!(
        "grid of {} prefixes; normal-HBE vs kappa=0: {hk} step(s); normal-HBE vs exact gaussian (N_z = {}): {he} step(s)",
        out.s.len(),
        cfg.exact_draws
    );
    ensure(hk <= 1 && he <= 2, || msg.clone())?;
    Ok(msg)
}

/// From-scratch criterion at a prefix, with no shared code beyond the HBE
/// quantile.
fn brute_force_criterion(x: &DMatrix<f64>, ws: &[Vec<f64>], q: f64) -> f64 {
    let n = x.nrows();
    let nf = n as f64;
    let xtx = x.transpose() * x;
    let p = x * xtx.try_inverse().unwrap() * x.transpose();
    let ip = DMatrix::identity(n, n) - &p;
    let mut sw = DMatrix::zeros(n, n);
    let mut d = DMatrix::zeros(n, n);
    for w in ws {
        let wv = DVector::from_column_slice(w);
        let outer = &wv * wv.transpose();
        let quad = (wv.transpose() * &p * &wv)[0];
        sw += &outer;
        d += outer * quad;
    }
    let s = ws.len() as f64;
    sw /= s;
    d /= s;
    let g = &ip * sw * &ip;
    let r = g + d * (2.0 / nf);
    let ev = symmetric_eigenvalues(&r);
    hbe_quantile(ev.as_slice(), q).unwrap()
}

fn c5_optimizer() -> Outcome {
    let n = 8;
    let x = standardize(&gaussian(n, 1, 501, 0), &[]).map_err(|e| e.to_string())?;
    let pool = enumerate_balanced(n).map_err(|e| e.to_string())?;
    let tail = TailSpec::normal_hbe(0.95);
    let result = optimize(&x, &pool, &BalanceMetric::Mahalanobis, &tail, &SearchMode::Exhaustive)
        .map_err(|e| e.to_string())?;

    // independent ranking: squared projection on x, pairs adjacent, then pool order
    let xv: Vec<f64> = x.column(0).iter().copied().collect();
    let xx: f64 = xv.iter().map(|v| v * v).sum();
    let ws: Vec<Vec<f64>> = pool.assignments().iter().map(Assignment::to_f64).collect();
    let score = |w: &Vec<f64>| {
        let c: f64 = w.iter().zip(&xv).map(|(a, b)| a * b).sum();
        c * c / xx
    };
    let mut order: Vec<usize> = (0..ws.len()).collect();
    let pair_first = |i: usize| {
        let neg: Vec<f64> = ws[i].iter().map(|v| -v).collect();
        let j = ws.iter().position(|w| *w == neg).unwrap();
        i.min(j)
    };
    order.sort_by(|&a, &b| {
        score(&ws[a])
            .partial_cmp(&score(&ws[b]))
            .unwrap()
            .then(pair_first(a).cmp(&pair_first(b)))
            .then(a.cmp(&b))
    });
    let mut best = (f64::INFINITY, 0usize);
    let mut evaluated = 0;
    for s in (2..=ws.len()).step_by(2) {
        let prefix: Vec<Vec<f64>> = order[..s].iter().map(|&i| ws[i].clone()).collect();
        let v = brute_force_criterion(&x, &prefix, 0.95);
        let traced = result
            .trace
            .iter()
            .find(|t| t.s == s)
            .ok_or_else(|| format!("prefix {s} missing from the exhaustive trace"))?;
        ensure(rel(v, traced.q_raw) <= 1e-9, || {
            format!("prefix {s}: sweep {} vs brute force {v}", traced.q_raw)
        })?;
        evaluated += 1;
        if v < best.0 {
            best = (v, s);
        }
    }
    ensure(result.trace.len() == evaluated, || {
        format!("trace has {} points, expected {evaluated}", result.trace.len())
    })?;
    ensure(best.1 == result.s_star, || {
        format!("s* = {} but brute force gives {}", result.s_star, best.1)
    })?;
    Ok(format!("{evaluated} prefixes match; s* = {} of {}", result.s_star, ws.len()))
}

fn c6_figure() -> Outcome {
    let mut mean_ok = 0;
    let mut tail_ok = 0;
    let mut detail = Vec::new();
    for seed in 0..10u64 {
        let cfg = SimConfig {
            seed,
            ..SimConfig::default()
        };
        let out = run_strategy_comparison(&cfg).map_err(|e| e.to_string())?;
        let m = |k| out.get(k).map(|s| s.mean).unwrap();
        let q = |k| out.get(k).map(|s| s.quantile).unwrap();
        use StrategyKind::*;
        let ordered = m(Det) <= m(Opt) && m(Opt) <= m(Bcrd) && m(Bcrd) <= m(Bad);
        let tail = q(Opt) <= q(Det);
        mean_ok += usize::from(ordered);
        tail_ok += usize::from(tail);
        if !ordered || !tail {
            detail.push(format!("seed {seed}: mean order {ordered}, tail order {tail}"));
        }
    }
    let msg = format!(
        "mean DET<=OPT<=BCRD<=BAD in {mean_ok}/10 runs; 95% quantile OPT<=DET in {tail_ok}/10 {}",
        detail.join("; ")
    );
    ensure(mean_ok >= 9 && tail_ok >= 9, || msg.clone())?;
    Ok(msg)
}

fn c7_inference() -> Outcome {
    let cfg = SimConfig::default();
    let study = Study::new(&cfg).map_err(|e| e.to_string())?;
    let design = optimize(
        &study.x,
        &study.pool,
        &BalanceMetric::Mahalanobis,
        &TailSpec::normal_hbe(0.95),
        &SearchMode::default(),
    )
    .map_err(|e| e.to_string())?;
    let est = Estimator::Lr(LrFit::new(&study.x).map_err(|e| e.to_string())?);
    let w_star = &design.w_star;
    let n = cfg.n;
    let experiment = |e: usize, beta_t: f64, salt: u64| {
        let mut rng = stream_rng(700 + salt, e as u64);
        let w_exp = w_star[rng.random_range(0..w_star.len())].clone();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                beta_t * w_exp.as_slice()[i] as f64 + study.xb[i] + study.sigma_z * z
            })
            .collect();
        (
            ExperimentRecord {
                w_exp,
                y,
                estimator: EstimatorKind::Lr,
            },
            TestOptions {
                seed: e as u64,
                ..TestOptions::default()
            },
        )
    };
    let rejections: Vec<bool> = parallel::try_map_indexed(2000, |e| {
        let (record, opts) = experiment(e, 0.0, 0);
        randomization_test(w_star, &record, &est, &opts).map(|t| t.reject)
    })
    .map_err(|e| e.to_string())?;
    let size = rejections.iter().filter(|&&r| r).count() as f64 / 2000.0;
    let beta_t = 1.0;
    let covered: Vec<bool> = parallel::try_map_indexed(1000, |e| {
        let (record, opts) = experiment(e, beta_t, 1);
        confidence_interval(w_star, &record, &est, &opts, None).map(|ci| ci.lower <= beta_t && beta_t <= ci.upper)
    })
    .map_err(|e| e.to_string())?;
    let coverage = covered.iter().filter(|&&c| c).count() as f64 / 1000.0;
    let msg = format!(
        "|W*| = {}; size {size:.4} over 2000 sharp-null experiments; coverage {coverage:.3} over 1000",
        w_star.len()
    );
    ensure((0.03..=0.07).contains(&size) && (0.92..=0.98).contains(&coverage), || msg.clone())?;
    Ok(msg)
}

fn c8_affine() -> Outcome {
    let n = 40;
    let p = 4;
    let raw = gaussian(n, p, 801, 0);
    let pool = sample_bcrd(n, 600, 802).map_err(|e| e.to_string())?;
    let tail = TailSpec::normal_hbe(0.95);
    let mode = SearchMode::default();
    let base_x = standardize(&raw, &[]).map_err(|e| e.to_string())?;
    let base = Sweep::new(&base_x, &pool, &BalanceMetric::Mahalanobis, &tail).map_err(|e| e.to_string())?;
    let base_order = base.ranked().source_index().to_vec();
    let base_result = base.run(&mode).map_err(|e| e.to_string())?;
    for t in 0..5u64 {
        let a = gaussian(p, p, 803, t);
        let shift = gaussian(1, p, 804, t);
        let moved = &raw * &a + DMatrix::from_fn(n, p, |_, j| 10.0 * shift[(0, j)]);
        let x = standardize(&moved, &[]).map_err(|e| e.to_string())?;
        let sweep = Sweep::new(&x, &pool, &BalanceMetric::Mahalanobis, &tail).map_err(|e| e.to_string())?;
        ensure(sweep.ranked().source_index() == base_order.as_slice(), || {
            format!("transform {t}: ranking differs")
        })?;
        let r = sweep.run(&mode).map_err(|e| e.to_string())?;
        same_design(&base_result, &r).map_err(|e| format!("transform {t}: {e}"))?;
    }
    Ok(format!(
        "5 transforms; identical ranking, s* = {} and W*; scalars agree to 1e-9",
        base_result.s_star
    ))
}

fn same_design(a: &DesignResult, b: &DesignResult) -> Result<(), String> {
    ensure(a.s_star == b.s_star && a.w_star == b.w_star, || "retained sets differ".into())?;
    ensure(a.trace.len() == b.trace.len(), || "traces differ in length".into())?;
    for (u, v) in a.trace.iter().zip(&b.trace) {
        ensure(u.s == v.s && rel(u.a, v.a) <= 1e-9 && rel(u.q(), v.q()) <= 1e-9, || {
            format!("trace differs at s = {}", u.s)
        })?;
    }
    ensure(rel(a.a_star, b.a_star) <= 1e-9 && rel(a.q_star, b.q_star) <= 1e-9, || {
        "a* or Q* differs".into()
    })
}

fn c9_reproducible() -> Outcome {
    let run = || -> Result<(String, f64, f64, f64), String> {
        let n = 30;
        let raw = gaussian(n, 3, 901, 0);
        let x = standardize(&raw, &[]).map_err(|e| e.to_string())?;
        let pool = sample_bcrd(n, 1500, 902).map_err(|e| e.to_string())?;
        let mut tail = TailSpec::exact(0.95, ZSampler::gaussian(), 2000, 903);
        if let rerand::tail::TailStrategy::ExactMc { smoothing, .. } = &mut tail.strategy {
            *smoothing = true;
        }
        let mode = SearchMode::default();
        let metric = BalanceMetric::Mahalanobis;
        let result = optimize(&x, &pool, &metric, &tail, &mode).map_err(|e| e.to_string())?;
        let config = DesignConfig {
            covariates_path: None,
            n,
            p: 3,
            pool_draws: 1500,
            greedy: 0,
            generator: Generator::Bcrd,
            seed: 902,
            metric,
            tail,
            mode,
        };
        let names = vec!["a".into(), "b".into(), "c".into()];
        let art = DesignArtifact::new(config, names, &x, result, 0).map_err(|e| e.to_string())?;
        let json = art.to_json().map_err(|e| e.to_string())?;
        let w_exp = art.w_star()[0].clone();
        let y: Vec<f64> = gaussian(n, 1, 904, 0)
            .iter()
            .zip(w_exp.as_slice())
            .map(|(z, &w)| z + 0.3 * w as f64)
            .collect();
        let est = Estimator::new(EstimatorKind::Lr, Some(&x)).map_err(|e| e.to_string())?;
        let record = ExperimentRecord {
            w_exp,
            y,
            estimator: EstimatorKind::Lr,
        };
        let opts = TestOptions {
            replicates: 200,
            seed: 905,
            ..TestOptions::default()
        };
        let t = randomization_test(art.w_star(), &record, &est, &opts).map_err(|e| e.to_string())?;
        let ci = confidence_interval(art.w_star(), &record, &est, &opts, None).map_err(|e| e.to_string())?;
        Ok((json, t.p_value, ci.lower, ci.upper))
    };
    let reference = parallel::with_threads(1, run)?;
    for threads in [2, 8] {
        let other = parallel::with_threads(threads, run)?;
        ensure(other.0 == reference.0, || format!("{threads} workers: artifact bytes differ"))?;
        ensure(other.1.to_bits() == reference.1.to_bits(), || format!("{threads} workers: p-value differs"))?;
        ensure(
            other.2.to_bits() == reference.2.to_bits() && other.3.to_bits() == reference.3.to_bits(),
            || format!("{threads} workers: confidence interval differs"),
        )?;
    }
    let seq = parallel::sequential(run)?;
    ensure(seq == reference, || "sequential fallback differs".into())?;
    Ok(format!(
        "1/2/8 workers and sequential: identical {}-byte artifact, p = {:.4}",
        reference.0.len(),
        reference.1
    ))
}

fn main() {
    // the standard test harness flags are accepted and ignored
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "moment identities and trace bounds", c1_identities),
        (2, "estimator oracles", c2_estimators),
        (3, "HBE quantile accuracy", c3_hbe),
        (4, "tail strategy agreement", c4_agreement),
        (5, "exhaustive optimizer vs brute force", c5_optimizer),
        (6, "design strategy ordering", c6_figure),
        (7, "randomization test size and CI coverage", c7_inference),
        (8, "affine invariance", c8_affine),
        (9, "reproducibility across worker counts", c9_reproducible),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        let key = format!("criterion_{id}");
        if !filter.is_empty() && !filter.iter().any(|p| key.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {id} PASS ({name}, {secs:.1}s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id} FAIL ({name}, {secs:.1}s): {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
