//! `autosam`: data preparation, training, evaluation and analysis runs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure, 1 anything else.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use autosam::dataset::{
    build_sequences, filter_min_count, generate_synthetic, load_dataset, load_tsv, save_dataset, split, Catalog,
    Dataset, SplitMode, SplitSpec, SplitViews, SyntheticSpec,
};
use autosam::evaluation::{
    evaluate, evaluate_multi_step, flops_estimate, multi_step_csv, relax_sweep, sampler_quality, sweep_csv, CostModel,
    EvalOptions, Recommender,
};
use autosam::sampler::SamplingStrategy;
use autosam::training::{load_checkpoint, save_checkpoint, TrainConfig, TrainState};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "autosam", version, about = "Sequential recommendation with a learned behavior sampler")]
struct Cli {
    /// Seed for every random stream; overrides the seed in any config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a raw TSV log and store it as a dataset directory.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// Minimum interactions per user and per item.
        #[arg(long, default_value_t = 10)]
        min_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a labeled synthetic log.
    Synth {
        /// JSON file with `SyntheticSpec` fields; missing fields use defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a recommender and, for `auto`, its sampler.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Loo)]
        split: SplitArg,
        /// Continue from `<out>/checkpoint` if it exists.
        #[arg(long)]
        resume: bool,
        /// Write the run manifest with the resolved config and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Loo)]
        mode: SplitArg,
        /// Test windows for multistep mode, e.g. `1..5` or `1,3,5`.
        #[arg(long, default_value = "1..5")]
        steps: String,
        #[arg(long, default_value = "10,20")]
        k: String,
        /// Inference selection to use instead of the trained strategy.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Retrain AutoSAM for each relax factor and tabulate rate, metrics and cost.
    SweepB {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "-0.5,0,0.5,1,1.5,2", allow_hyphen_values = true)]
        b_list: String,
        #[arg(long, default_value = "10,20")]
        k: String,
    },
    /// Kept and dropped behavior types and signal separation of a trained sampler.
    AnalyzeSampler {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inference FLOPs for a sample rate and its spread.
    Flops {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        mu: f64,
        /// Standard deviation of the per-user sample rate.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// History length; defaults to the model window.
        #[arg(long)]
        seq_len: Option<f64>,
        #[arg(long)]
        num_items: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Named starting point: `synthetic` or a `paper-*` benchmark preset.
    #[arg(long)]
    preset: Option<String>,
    /// JSON overrides applied on top of the preset (or the defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sampling strategy: auto, full, random:R, last:R or popular:R.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Loo,
    Multistep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain joined with `: `, skipping causes a message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use autosam::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Config(_) | E::Json(_) => 2,
                E::Numerical(_) => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Preprocess { input, min_count, out } => preprocess(&input, min_count, &out, seed),
        Command::Synth { spec, out } => synth(spec.as_deref(), &out, seed),
        Command::Train {
            config,
            data,
            out,
            split,
            resume,
            dry_run,
        } => train(&config, &data, &out, split, resume, dry_run, seed),
        Command::Eval {
            checkpoint,
            data,
            out,
            mode,
            steps,
            k,
            strategy,
        } => eval(&checkpoint, &data, &out, mode, &steps, &k, strategy.as_deref()),
        Command::SweepB {
            config,
            data,
            out,
            b_list,
            k,
        } => sweep(&config, &data, &out, &b_list, &k, seed),
        Command::AnalyzeSampler { checkpoint, data, out } => analyze(&checkpoint, &data, &out),
        Command::Flops {
            config,
            mu,
            sigma,
            seq_len,
            num_items,
            out,
        } => flops(&config, mu, sigma, seq_len, num_items, &out, seed),
    }
}

/// Recursively overlays `patch` onto `base`. Tagged objects (a `kind`
/// field) replace rather than merge, so switching variants drops stale fields.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !p.contains_key("kind") => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| autosam::Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| autosam::Error::config(format!("{}: {e}", path.display())).into())
}

fn parse_strategy(s: &str) -> Result<SamplingStrategy> {
    let rate = |r: &str| -> Result<f64> {
        r.parse()
            .map_err(|_| autosam::Error::config(format!("strategy rate `{r}` is not a number")).into())
    };
    let strategy = match s.split_once(':') {
        None if s == "auto" => SamplingStrategy::Auto,
        None if s == "full" => SamplingStrategy::Full,
        Some(("random", r)) => SamplingStrategy::Random { rate: rate(r)? },
        Some(("last", r)) => SamplingStrategy::Last { rate: rate(r)? },
        Some(("popular", r)) => SamplingStrategy::Popular { rate: rate(r)? },
        _ => {
            return Err(autosam::Error::config(format!(
                "unknown strategy `{s}`; expected auto, full, random:R, last:R or popular:R"
            ))
            .into())
        }
    };
    strategy.validate()?;
    Ok(strategy)
}

fn resolve_config(args: &ConfigArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let base = match &args.preset {
        Some(p) => TrainConfig::preset(p)?,
        None => TrainConfig::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    if let Some(path) = &args.config {
        merge(&mut value, read_json(path)?);
    }
    let mut cfg: TrainConfig =
        serde_json::from_value(value).map_err(|e| autosam::Error::config(format!("config: {e}")))?;
    if let Some(s) = &args.strategy {
        cfg.strategy = parse_strategy(s)?;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| autosam::Error::config(format!("{what}: `{x}` is not a number")).into())
        })
        .collect()
}

fn parse_steps(s: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (
            a.trim().parse().map_err(|_| autosam::Error::config(format!("steps: bad range `{s}`")))?,
            b.trim().parse().map_err(|_| autosam::Error::config(format!("steps: bad range `{s}`")))?,
        );
        if a == 0 || a > b {
            bail!(autosam::Error::config(format!("steps: empty range `{s}`")));
        }
        return Ok((a..=b).collect());
    }
    parse_list("steps", s)
}

fn views(ds: &Dataset, mode: SplitArg, max_len: usize) -> Result<SplitViews> {
    let mode = match mode {
        SplitArg::Loo => SplitMode::LeaveOneOut,
        SplitArg::Multistep => SplitMode::MultiStep { steps: 1 },
    };
    let v = split(&ds.sequences, SplitSpec { mode, max_len })?;
    if v.train.is_empty() {
        bail!(autosam::Error::data("no user is long enough for this split"));
    }
    if v.excluded > 0 {
        eprintln!("note: {} users are too short for the split and were skipped", v.excluded);
    }
    Ok(v)
}

fn load(data: &Path) -> Result<Dataset> {
    load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))
}

fn preprocess(input: &Path, min_count: usize, out: &Path, seed: Option<u64>) -> Result<()> {
    let config = json!({ "input": input, "min_count": min_count });
    let mut m = RunManifest::begin("preprocess", seed.unwrap_or(0), config, None, out)?;
    let rows = load_tsv(input)?;
    let (rows, stats) = filter_min_count(rows, min_count);
    let catalog = Catalog::from_interactions(&rows);
    let ds = Dataset::new(catalog.clone(), build_sequences(&rows, &catalog))?;
    m.dataset_fingerprint = Some(save_dataset(&ds, out)?);
    let report = serde_json::to_string_pretty(&json!({
        "users": ds.sequences.len(),
        "items": catalog.num_items,
        "filter": stats,
    }))?;
    println!("{report}");
    m.output("preprocess.json", report)?;
    m.finish()
}

fn synth(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut value = serde_json::to_value(SyntheticSpec::default())?;
    if let Some(p) = spec {
        merge(&mut value, read_json(p)?);
    }
    let mut spec: SyntheticSpec =
        serde_json::from_value(value).map_err(|e| autosam::Error::config(format!("spec: {e}")))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let mut m = RunManifest::begin("synth", spec.seed, serde_json::to_value(&spec)?, None, out)?;
    let (sequences, catalog, report) = generate_synthetic(&spec)?;
    let ds = Dataset::new(catalog, sequences)?;
    m.dataset_fingerprint = Some(save_dataset(&ds, out)?);
    let report = serde_json::to_string_pretty(&json!({
        "users": ds.sequences.len(),
        "items": ds.catalog.num_items,
        "interactions": report.interactions,
        "noise_interactions": report.noise_interactions,
        "noise_fraction": report.noise_fraction,
    }))?;
    println!("{report}");
    m.output("synth.json", report)?;
    m.finish()
}

fn train(
    args: &ConfigArgs,
    data: &Path,
    out: &Path,
    split_mode: SplitArg,
    resume: bool,
    dry_run: bool,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = resolve_config(args, seed)?;
    let ds = load(data)?;
    let mut resolved = serde_json::to_value(&cfg)?;
    merge(
        &mut resolved,
        json!({ "split": match split_mode { SplitArg::Loo => "loo", SplitArg::Multistep => "multistep" } }),
    );
    let mut m = RunManifest::begin("train", cfg.seed, resolved, Some(ds.fingerprint()), out)?;
    if dry_run {
        return m.finish();
    }
    let v = views(&ds, split_mode, cfg.backbone.max_len)?;
    let ckpt = out.join("checkpoint");
    let mut state = if resume && ckpt.join("manifest.json").exists() {
        let s = load_checkpoint(&ckpt, Some(&cfg))?;
        eprintln!("resuming after epoch {}", s.epoch);
        s
    } else {
        TrainState::new(cfg, ds.catalog.num_items)?
    };
    let mut log = String::new();
    state.train(&v.train, &ds.catalog, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  sample rate {:.3}  reward {:+.4}",
            e.epoch, e.mean_loss, e.sample_rate, e.mean_reward
        );
        log.push_str(&serde_json::to_string(e).expect("stats serialize"));
        log.push('\n');
    })?;
    save_checkpoint(&state, &ckpt)?;
    m.record(ckpt);
    m.output("epochs.jsonl", log)?;
    m.finish()
}

fn eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    mode: SplitArg,
    steps: &str,
    k: &str,
    strategy: Option<&str>,
) -> Result<()> {
    let state = load_checkpoint(checkpoint, None)?;
    let ds = load(data)?;
    let options = EvalOptions {
        ks: parse_list("k", k)?,
    };
    let mut rec = Recommender::from_state(&state);
    if let Some(s) = strategy {
        rec = rec.with_strategy(parse_strategy(s)?);
    }
    let config = json!({
        "checkpoint": checkpoint,
        "mode": match mode { SplitArg::Loo => "loo", SplitArg::Multistep => "multistep" },
        "steps": steps,
        "ks": options.ks,
        "strategy": rec.strategy,
    });
    let mut m = RunManifest::begin("eval", state.config.seed, config, Some(ds.fingerprint()), out)?;
    match mode {
        SplitArg::Loo => {
            let v = views(&ds, mode, state.config.backbone.max_len)?;
            let report = evaluate(&rec, &v.test, &ds.catalog, &options)?;
            println!("{}", report.to_json());
            m.output("metrics.json", report.to_json())?;
            m.output("metrics.csv", report.to_csv())?;
        }
        SplitArg::Multistep => {
            let rows = evaluate_multi_step(&rec, &ds.sequences, &ds.catalog, &parse_steps(steps)?, &options)?;
            let csv = multi_step_csv(&rows);
            print!("{csv}");
            m.output("multistep.json", serde_json::to_string_pretty(&rows)?)?;
            m.output("multistep.csv", csv)?;
        }
    }
    m.finish()
}

fn sweep(args: &ConfigArgs, data: &Path, out: &Path, b_list: &str, k: &str, seed: Option<u64>) -> Result<()> {
    let cfg = resolve_config(args, seed)?;
    let relax: Vec<f64> = parse_list("b-list", b_list)?;
    let options = EvalOptions {
        ks: parse_list("k", k)?,
    };
    let ds = load(data)?;
    let config = json!({ "train": cfg, "relax": relax, "ks": options.ks });
    let mut m = RunManifest::begin("sweep-b", cfg.seed, config, Some(ds.fingerprint()), out)?;
    let v = views(&ds, SplitArg::Loo, cfg.backbone.max_len)?;
    let rows = relax_sweep(&cfg, &relax, &v.train, &v.test, &ds.catalog, &options, |r| {
        eprintln!("b {:+.2}  sample rate {:.3}  mflops {:.4}", r.relax, r.sample_rate, r.mflops);
    })?;
    let csv = sweep_csv(&rows);
    print!("{csv}");
    m.output("sweep.csv", csv)?;
    m.output("sweep.json", serde_json::to_string_pretty(&rows)?)?;
    m.finish()
}

fn analyze(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let state = load_checkpoint(checkpoint, None)?;
    let ds = load(data)?;
    let config = json!({ "checkpoint": checkpoint });
    let mut m = RunManifest::begin("analyze-sampler", state.config.seed, config, Some(ds.fingerprint()), out)?;
    let v = views(&ds, SplitArg::Loo, state.config.backbone.max_len)?;
    let rec = Recommender::from_state(&state).with_strategy(SamplingStrategy::Auto);
    match sampler_quality(&rec, &v.train)? {
        Some(q) => {
            let report = serde_json::to_string_pretty(&q)?;
            println!("{report}");
            m.output("sampler_quality.json", report)?;
        }
        None => eprintln!("note: the dataset has no behavior labels; nothing to analyze"),
    }
    m.finish()
}

fn flops(
    args: &ConfigArgs,
    mu: f64,
    sigma: f64,
    seq_len: Option<f64>,
    num_items: usize,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = resolve_config(args, seed)?;
    let model = CostModel {
        layers: cfg.backbone.layers,
        seq_len: seq_len.unwrap_or(cfg.backbone.max_len as f64),
        mu,
        sigma2: sigma * sigma,
        d: cfg.backbone.d,
        hidden: cfg.backbone.hidden,
        num_items,
        sampler: cfg.strategy == SamplingStrategy::Auto,
    };
    let mut m = RunManifest::begin("flops", cfg.seed, serde_json::to_value(model)?, None, out)?;
    let estimate = flops_estimate(&model)?;
    let report = serde_json::to_string_pretty(&estimate)?;
    println!("{report}");
    m.output("flops.json", report)?;
    m.finish()
}
