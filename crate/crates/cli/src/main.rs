use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use rerand::artifact::{load_design, save_design, timestamp_now, DesignArtifact, DesignConfig};
use rerand::balance::{BalanceMetric, Imbalance};
use rerand::covariates::{ingest_covariates, read_responses};
use rerand::design_space::{
    augment_greedy, enumerate_balanced, sample_bcrd, Assignment, Generator, DEFAULT_GREEDY_ITERATION_CAP,
};
use rerand::inference::{
    confidence_interval, randomization_test, Estimator, EstimatorKind, ExperimentRecord, TestOptions, TestVariant,
};
use rerand::optimizer::{optimize, sweep_trace_export, SearchMode};
use rerand::parallel;
use rerand::sim::{
    run_strategy_comparison, run_tail_strategy_agreement, run_threshold_vs_p, threshold_csv, SimConfig, StudyKind,
};
use rerand::tail::{TailSpec, TailStrategy, ZSampler};
use rerand::Error;

/// Optimal rerandomization designs and randomization inference.
#[derive(Parser)]
#[command(name = "rerand", version)]
struct Cli {
    /// Worker thread cap.
    #[arg(long, env = "RERAND_THREADS", global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for the optimal threshold and write a design artifact.
    Design(DesignArgs),
    /// Print one assignment drawn from a design's retained set.
    Assign {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Randomization test (and optional confidence interval) for a run experiment.
    Test(TestArgs),
    /// Run a simulation study and write its CSV tables.
    Simulate(SimulateArgs),
    /// Check a design artifact's invariants.
    Validate {
        #[arg(long)]
        design: PathBuf,
    },
}

#[derive(Args)]
struct DesignArgs {
    /// Covariate table: one row per subject, comma, tab, semicolon or space separated.
    #[arg(long)]
    covariates: PathBuf,
    /// The covariate file has no header row.
    #[arg(long)]
    no_header: bool,
    /// BCRD draws in the candidate pool.
    #[arg(long, default_value_t = 2000)]
    pool: usize,
    /// Use every forced-balance assignment instead of sampling (small n only).
    #[arg(long, conflicts_with = "pool")]
    enumerate: bool,
    /// Greedy pair-switch assignments added to the pool.
    #[arg(long, default_value_t = 0)]
    greedy: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// mahalanobis, kernel-linear, kernel-exponential or kernel-gaussian[:bandwidth].
    #[arg(long, default_value = "mahalanobis")]
    metric: String,
    /// normal-hbe, kurtosis:<kappa> or exact:<gaussian|laplace|t:dof>:<draws>[:smooth].
    #[arg(long, default_value = "normal-hbe")]
    tail: String,
    /// Quantile level of the tail criterion.
    #[arg(long, default_value_t = 0.95)]
    q: f64,
    /// exhaustive, grid:<points>[:coarse] or binary:<prefix tolerance>.
    #[arg(long, default_value = "grid:64")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write the criterion trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    design: PathBuf,
    /// Responses, one per line in subject order.
    #[arg(long)]
    y: PathBuf,
    /// The assignment that was run, in '+'/'-' line format.
    #[arg(long)]
    w: PathBuf,
    #[arg(long, default_value = "lr")]
    estimator: String,
    /// Replicate cap.
    #[arg(long = "R", default_value_t = 10_000)]
    replicates: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also invert the test into a confidence interval.
    #[arg(long)]
    ci: bool,
    /// Equal-tailed quantile region instead of the absolute-value test.
    #[arg(long)]
    quantile_region: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// strategy-comparison, tail-agreement or threshold-vs-p.
    study: String,
    /// JSON configuration; missing fields take desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the larger published-scale defaults.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
}

fn parse_tail(s: &str, q: f64, seed: u64) -> anyhow::Result<TailSpec> {
    if s == "normal-hbe" {
        return Ok(TailSpec::normal_hbe(q));
    }
    if let Some(k) = s.strip_prefix("kurtosis:") {
        let kappa: f64 = k.parse().with_context(|| format!("bad kurtosis {k:?}"))?;
        return Ok(TailSpec::kurtosis(q, kappa));
    }
    if let Some(rest) = s.strip_prefix("exact:") {
        let (rest, smoothing) = match rest.strip_suffix(":smooth") {
            Some(r) => (r, true),
            None => (rest, false),
        };
        let (sampler, draws) = rest
            .rsplit_once(':')
            .with_context(|| format!("exact tail needs <sampler>:<draws>, got {rest:?}"))?;
        let sampler: ZSampler = sampler.parse()?;
        let n_z: usize = draws.parse().with_context(|| format!("bad draw count {draws:?}"))?;
        let mut spec = TailSpec::exact(q, sampler, n_z, seed);
        if let TailStrategy::ExactMc { smoothing: s, .. } = &mut spec.strategy {
            *s = smoothing;
        }
        return Ok(spec);
    }
    bail!("unknown tail strategy {s:?}; expected normal-hbe, kurtosis:<kappa> or exact:<sampler>:<draws>[:smooth]")
}

fn design(args: DesignArgs) -> anyhow::Result<()> {
    let table = ingest_covariates(&args.covariates, !args.no_header)?;
    let x = &table.standardized;
    let n = table.n();
    let metric: BalanceMetric = args.metric.parse()?;
    let tail = parse_tail(&args.tail, args.q, args.seed)?;
    tail.validate()?;
    let mode: SearchMode = args.mode.parse()?;
    let (mut pool, mut generator) = if args.enumerate {
        (enumerate_balanced(n)?, Generator::Enumerated)
    } else {
        (sample_bcrd(n, args.pool, args.seed)?, Generator::Bcrd)
    };
    if args.greedy > 0 {
        let evaluator = Imbalance::new(x, &metric)?;
        pool = augment_greedy(&pool, &evaluator, args.greedy, DEFAULT_GREEDY_ITERATION_CAP)?;
        generator = Generator::BcrdGreedy;
    }
    let result = optimize(x, &pool, &metric, &tail, &mode)?;
    if let Some(path) = &args.trace {
        std::fs::write(path, sweep_trace_export(&result)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let config = DesignConfig {
        covariates_path: Some(args.covariates.display().to_string()),
        n,
        p: table.p(),
        pool_draws: if args.enumerate { pool.len() } else { args.pool },
        greedy: args.greedy,
        generator,
        seed: args.seed,
        metric,
        tail,
        mode,
    };
    let summary = format!(
        "n = {n}, pool = {}, s* = {}, a* = {:.6}, Q* = {:.6}{}",
        result.pool_size,
        result.s_star,
        result.a_star,
        result.q_star,
        if result.inference_fragile {
            " (fragile: s* < 10 n)"
        } else {
            ""
        }
    );
    let art = DesignArtifact::new(config, table.names.clone(), x, result, timestamp_now())?;
    save_design(&art, &args.out)?;
    println!("{summary}");
    println!("wrote {}", args.out.display());
    Ok(())
}

fn read_assignment(path: &Path) -> anyhow::Result<Assignment> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .with_context(|| format!("{}: no assignment line", path.display()))?;
    Assignment::decode(line).with_context(|| format!("{}: bad assignment line", path.display()))
}

fn responses(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let header = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.trim().parse::<f64>().is_err());
    Ok(read_responses(path, header)?)
}

fn test(args: TestArgs) -> anyhow::Result<()> {
    let art = load_design(&args.design)?;
    let y = responses(&args.y)?;
    let w_exp = read_assignment(&args.w)?;
    let kind: EstimatorKind = args.estimator.parse()?;
    let estimator = Estimator::new(kind, Some(&art.x()))?;
    let record = ExperimentRecord {
        w_exp,
        y,
        estimator: kind,
    };
    let opts = TestOptions {
        replicates: args.replicates,
        alpha: args.alpha,
        seed: args.seed,
        variant: if args.quantile_region {
            TestVariant::QuantileRegion
        } else {
            TestVariant::Absolute
        },
    };
    let result = randomization_test(art.w_star(), &record, &estimator, &opts)?;
    let mut out = serde_json::json!({
        "estimator": kind.to_string(),
        "estimate": result.estimate,
        "p_value": result.p_value,
        "replicates": result.r_used,
        "alpha": result.alpha,
        "reject": result.reject,
    });
    if args.ci {
        let ci = confidence_interval(art.w_star(), &record, &estimator, &opts, None)?;
        out["ci"] = serde_json::to_value(&ci)?;
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let study: StudyKind = args.study.parse()?;
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let base = if args.paper_scale {
                serde_json::to_value(SimConfig::paper_scale())?
            } else {
                serde_json::to_value(SimConfig::default())?
            };
            let mut merged = base;
            let overrides: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let Some(fields) = overrides.as_object() else {
                bail!("{}: the configuration must be a JSON object", path.display());
            };
            for (k, v) in fields {
                merged[k] = v.clone();
            }
            serde_json::from_value(merged).with_context(|| format!("{}: invalid configuration", path.display()))?
        }
        None if args.paper_scale => SimConfig::paper_scale(),
        None => SimConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    std::fs::write(args.out_dir.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    match study {
        StudyKind::StrategyComparison => {
            let out = run_strategy_comparison(&config)?;
            out.write_csv(&args.out_dir)?;
            for s in &out.strategies {
                println!(
                    "{:<5} size {:>6}  mean {:.5}  q{:.2} {:.5}",
                    s.kind.to_string(),
                    s.size,
                    s.mean,
                    config.q,
                    s.quantile
                );
            }
        }
        StudyKind::TailAgreement => {
            let out = run_tail_strategy_agreement(&config)?;
            out.write_csv(&args.out_dir)?;
            for t in &out.traces {
                println!("{:<15} a* = {:.5} (grid {})", t.label, out.a[t.best], t.best);
            }
        }
        StudyKind::ThresholdVsP => {
            let rows = run_threshold_vs_p(&config, &config.p_list)?;
            std::fs::write(args.out_dir.join("threshold_vs_p.csv"), threshold_csv(&rows)?)?;
            for r in &rows {
                println!("p {:>3}  a* {:.5}  s* {:>6}  rank {:.4}", r.p, r.a_star, r.s_star, r.rank);
            }
        }
    }
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn validate(path: &Path) -> anyhow::Result<()> {
    let art = load_design(path)?;
    let checks = art.invariant_checks()?;
    let mut failed = Vec::new();
    for c in &checks {
        println!("{:<15} {}  {}", c.name, if c.passed { "ok" } else { "FAILED" }, c.detail);
        if !c.passed {
            failed.push(c.name);
        }
    }
    if !failed.is_empty() {
        return Err(Error::Validation(format!("{}: failed checks {}", path.display(), failed.join(", "))).into());
    }
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Design(a) => design(a).context("design"),
        Command::Assign { design, seed } => {
            let art = load_design(&design).context("assign")?;
            println!("{}", art.sample_assignment(seed));
            Ok(())
        }
        Command::Test(a) => test(a).context("test"),
        Command::Simulate(a) => simulate(a).context("simulate"),
        Command::Validate { design } => validate(&design).context("validate"),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.threads {
        Some(t) if t > 0 => parallel::with_threads(t, || run(cli.command)),
        _ => run(cli.command),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
