use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actorflow::algorithms::{build_plan, run_plan, Algo, AlgorithmConfig, PlanError};
use actorflow::bench::{available_cores, bench_compose, bench_sampling, SamplingBenchConfig};
use actorflow::metrics::{format_float, write_metrics, MetricsRecord, OutputFormat};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(name = "actorflow", version, about = "Run and benchmark RL dataflow plans on a toy chain environment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with one of the plans and write per-iteration metrics.
    Run(RunArgs),
    /// Steady-state sampling throughput with a one-parameter policy.
    BenchSampling(SamplingArgs),
    /// Two-trainer composition time against the prediction from its parts.
    BenchCompose(ComposeArgs),
    /// List the available plans.
    ListAlgos,
}

#[derive(Clone, Copy, ValueEnum)]
enum Env {
    Chain,
}

#[derive(Args)]
struct Common {
    /// Environment; only the chain environment exists.
    #[arg(long, value_enum)]
    env: Option<Env>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    num_async: Option<usize>,
    /// Write results here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<OutputFormat>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_parser = parse_algo)]
    algo: Option<Algo>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    train_batch_size: Option<usize>,
    #[arg(long)]
    buffer_capacity: Option<usize>,
    /// JSON object of config fields; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SamplingArgs {
    /// Worker counts to measure, e.g. `1,2,4`.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    workers: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    warmup_s: f64,
    #[arg(long, default_value_t = 3.0)]
    measure_s: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    workers: Option<usize>,
    /// Timed record pairs per repeat.
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    #[arg(long, default_value_t = 7)]
    repeats: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    train_batch_size: Option<usize>,
    #[arg(long)]
    buffer_capacity: Option<usize>,
    #[command(flatten)]
    common: Common,
}

fn parse_algo(s: &str) -> Result<Algo, String> {
    s.parse()
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    s.parse()
}

/// Invalid input; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn is_usage_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some() || matches!(c.downcast_ref::<PlanError>(), Some(PlanError::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::BenchSampling(args) => cmd_bench_sampling(args),
        Command::BenchCompose(args) => cmd_bench_compose(args),
        Command::ListAlgos => cmd_list_algos(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}

const RUN_KEYS: [&str; 5] = ["algo", "env", "iters", "out", "format"];

fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(usage(format!("{}: config must be a JSON object", path.display()))),
        Err(e) => Err(usage(format!("{}: {e}", path.display()))),
    }
}

fn file_str<'a>(file: &'a Map<String, Value>, key: &str) -> Result<Option<&'a str>> {
    match file.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(usage(format!("config key {key:?} must be a string, got {other}"))),
    }
}

fn check_env(name: &str) -> Result<()> {
    if name == "chain" {
        Ok(())
    } else {
        Err(usage(format!("unknown environment {name:?} (expected chain)")))
    }
}

/// Everything `run` needs, resolved as flags > config file > per-plan defaults.
struct RunConfig {
    algo: Algo,
    cfg: AlgorithmConfig,
    iters: usize,
    out: Option<PathBuf>,
    format: OutputFormat,
}

fn resolve_run(args: &RunArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(p) => read_config_file(p)?,
        None => Map::new(),
    };
    let algo = match (args.algo, file_str(&file, "algo")?) {
        (Some(a), _) => a,
        (None, Some(name)) => name.parse::<Algo>().map_err(usage)?,
        (None, None) => return Err(usage("--algo is required (see list-algos)")),
    };
    if args.common.env.is_none() {
        if let Some(name) = file_str(&file, "env")? {
            check_env(name)?;
        }
    }
    let iters = match (args.iters, file.get("iters")) {
        (Some(n), _) => n,
        (None, Some(v)) => v
            .as_u64()
            .ok_or_else(|| usage(format!("config key \"iters\" must be a non-negative integer, got {v}")))?
            as usize,
        (None, None) => 100,
    };
    let out = args.common.out.clone().or_else(|| file_str(&file, "out").ok().flatten().map(PathBuf::from));
    let format = match (args.common.format, file_str(&file, "format")?) {
        (Some(f), _) => f,
        (None, Some(name)) => name.parse().map_err(usage)?,
        (None, None) => format_from_extension(out.as_deref()),
    };

    let mut merged = match serde_json::to_value(AlgorithmConfig::for_algo(algo))? {
        Value::Object(m) => m,
        _ => unreachable!("config serializes to an object"),
    };
    for (k, v) in file {
        if RUN_KEYS.contains(&k.as_str()) {
            continue;
        }
        if !merged.contains_key(&k) {
            return Err(usage(format!("unknown config key {k:?}")));
        }
        merged.insert(k, v);
    }
    let mut cfg: AlgorithmConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("config: {e}")))?;

    if let Some(v) = args.workers {
        cfg.num_workers = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.train_batch_size {
        cfg.train_batch_size = v;
    }
    if let Some(v) = args.buffer_capacity {
        cfg.buffer_capacity = v;
    }
    apply_common(&mut cfg, &args.common);
    cfg.validate(algo)?;
    Ok(RunConfig {
        algo,
        cfg,
        iters,
        out,
        format,
    })
}

fn apply_common(cfg: &mut AlgorithmConfig, common: &Common) {
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = common.num_async {
        cfg.num_async = v;
    }
}

fn format_from_extension(out: Option<&Path>) -> OutputFormat {
    match out.and_then(Path::extension).and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => OutputFormat::Jsonl,
        _ => OutputFormat::Csv,
    }
}

/// Writes to `out`, or stdout when no path is given.
fn emit(out: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    match out {
        Some(path) => {
            let mut f = io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
            write(&mut f).and_then(|_| f.flush()).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock).and_then(|_| lock.flush()).context("writing to stdout")
        }
    }
}

fn summary(algo: Algo, records: &[MetricsRecord]) -> String {
    match records.last() {
        None => format!("{algo}: 0 iterations"),
        Some(r) => format!(
            "{algo}: {} iterations, {} steps sampled, {} trained, learner version {}, mean episode reward {}, {:.2}s",
            records.len(),
            r.steps_sampled,
            r.steps_trained,
            r.learner_version,
            r.mean_episode_reward.map_or("n/a".to_string(), format_float),
            r.wall_time_s
        ),
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let rc = resolve_run(&args)?;
    let mut plan = build_plan(rc.algo, &rc.cfg)?;
    let (records, failure) = match run_plan(&mut plan, rc.iters) {
        Ok(records) => (records, None),
        Err(e) => (e.records, Some(e.error)),
    };
    drop(plan);
    emit(rc.out.as_deref(), |mut w| write_metrics(&records, &mut w, rc.format))?;
    let line = summary(rc.algo, &records);
    if rc.out.is_some() {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
    if let Some(e) = failure {
        bail!("stream failed after {} records: {e}", records.len());
    }
    Ok(())
}

fn cmd_bench_sampling(args: SamplingArgs) -> Result<()> {
    if args.workers.contains(&0) {
        return Err(usage("--workers must be at least 1"));
    }
    let defaults = SamplingBenchConfig::default();
    let cores = available_cores();
    eprintln!("host cores: {cores}");
    let mut reports = Vec::new();
    for &workers in &args.workers {
        let cfg = SamplingBenchConfig {
            workers,
            horizon: args.common.horizon.unwrap_or(defaults.horizon),
            num_async: args.common.num_async.unwrap_or(defaults.num_async),
            warmup_s: args.warmup_s,
            measure_s: args.measure_s,
            seed: args.common.seed.unwrap_or(defaults.seed),
            ..defaults.clone()
        };
        let r = bench_sampling(&cfg)?;
        eprintln!("workers {}: {} steps/s", r.workers, format_float(r.steps_per_s));
        reports.push(r);
    }
    let base = reports[0].steps_per_s;
    let format = args.common.format.unwrap_or_else(|| format_from_extension(args.common.out.as_deref()));
    emit(args.common.out.as_deref(), |w| {
        match format {
            OutputFormat::Csv => {
                writeln!(w, "# cores={cores}")?;
                writeln!(w, "workers,cores,policy_params,steps,seconds,steps_per_s,speedup")?;
                for r in &reports {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{}",
                        r.workers,
                        r.cores,
                        r.policy_params,
                        r.steps,
                        format_float(r.seconds),
                        format_float(r.steps_per_s),
                        format_float(r.steps_per_s / base)
                    )?;
                }
            }
            OutputFormat::Jsonl => {
                for r in &reports {
                    let mut v = serde_json::to_value(r)?;
                    v["speedup"] = (r.steps_per_s / base).into();
                    writeln!(w, "{v}")?;
                }
            }
        }
        Ok(())
    })
}

fn cmd_bench_compose(args: ComposeArgs) -> Result<()> {
    let mut cfg = AlgorithmConfig::for_algo(Algo::TwoTrainer);
    if let Some(v) = args.workers {
        cfg.num_workers = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.train_batch_size {
        cfg.train_batch_size = v;
    }
    if let Some(v) = args.buffer_capacity {
        cfg.buffer_capacity = v;
    }
    apply_common(&mut cfg, &args.common);
    cfg.validate(Algo::TwoTrainer)?;
    if args.iters == 0 {
        return Err(usage("--iters must be at least 1"));
    }
    let cores = available_cores();
    eprintln!("host cores: {cores}");
    let r = bench_compose(&cfg, args.iters, args.warmup, args.repeats)?;
    eprintln!(
        "measured {} s per record pair, predicted {} s, ratio {}",
        format_float(r.measured_pair_s),
        format_float(r.predicted_pair_s),
        format_float(r.ratio)
    );
    let format = args.common.format.unwrap_or_else(|| format_from_extension(args.common.out.as_deref()));
    emit(args.common.out.as_deref(), |w| {
        match format {
            OutputFormat::Csv => {
                writeln!(w, "# cores={cores}")?;
                writeln!(w, "cores,rounds,rollout_s,ppo_s,dqn_s,predicted_pair_s,measured_pair_s,ratio")?;
                let cells = [r.rollout_s, r.ppo_s, r.dqn_s, r.predicted_pair_s, r.measured_pair_s, r.ratio]
                    .map(format_float)
                    .join(",");
                writeln!(w, "{},{},{cells}", r.cores, r.rounds)?;
            }
            OutputFormat::Jsonl => writeln!(w, "{}", serde_json::to_string(&r)?)?,
        }
        Ok(())
    })
}

fn cmd_list_algos() -> Result<()> {
    let mut out = io::stdout().lock();
    for a in Algo::ALL {
        writeln!(out, "{:<12} {}", a.name(), a.description())?;
    }
    Ok(())
}
