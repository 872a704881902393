mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use taskmerge_core::adaptation::{adapt_coefficients, adarank_adapt, AdaRankConfig, AdaptConfig, AdaptationSuite};
use taskmerge_core::interference::{analyze_checkpoints, rank_sweep, sample_size, REPORT_CSV_HEADER, DEFAULT_RATIOS};
use taskmerge_core::merge::{cart_indexing, storage_cost, CoefficientTable, Coefficients, MergePlan};
use taskmerge_core::origin::{OriginMode, RankMinConfig};
use taskmerge_core::suites::ClassificationSuite;
use taskmerge_core::tensor_store::{load_checkpoint, save_checkpoint, ParamClass, ParamClassifier, TensorMap};
use taskmerge_core::theorem::certify_many;
use taskmerge_core::Execution;

use config::FileConfig;

const DEFAULT_RATIO: f64 = 0.08;
const DEFAULT_LAMBDA: f64 = 1.0;
const DEFAULT_CERTIFY_COUNT: usize = 100;

#[derive(Parser, Debug)]
#[command(name = "taskmerge", version, about = "Merge fine-tuned checkpoints with centered, rank-reduced task vectors")]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Glob patterns forcing 2-D parameters to be treated as matrices.
    #[arg(long, global = true, value_delimiter = ',')]
    matrix_include: Vec<String>,
    /// Glob patterns forcing parameters to be treated as non-matrix.
    #[arg(long, global = true, value_delimiter = ',')]
    matrix_exclude: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Merge fine-tuned checkpoints into one.
    Merge(MergeArgs),
    /// Rebuild one task's model from the average plus its pruned task vector.
    Index(IndexArgs),
    /// Row-space interference, reconstruction error and spectra.
    Analyze(AnalyzeArgs),
    /// Rank-ratio sweep on the synthetic classification suite.
    Sweep(SweepArgs),
    /// Check the interference bound on random linear suites.
    Certify(CertifyArgs),
    /// Entropy-based test-time adaptation on a synthetic suite.
    Adapt(AdaptArgs),
    /// Samples needed to estimate a bounded metric's mean.
    Samplesize(SampleSizeArgs),
}

#[derive(Args, Debug)]
struct Inputs {
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Fine-tuned checkpoints, in task order.
    finetuned: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_parser = parse_origin)]
    origin: Option<OriginMode>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long, conflicts_with = "coefficients")]
    lambda: Option<f64>,
    /// JSON coefficient table (`layers`, `values[task][layer]`).
    #[arg(long)]
    coefficients: Option<PathBuf>,
    #[arg(long)]
    rankmin_steps: Option<usize>,
    #[arg(long)]
    rankmin_step_size: Option<f64>,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    task: Option<usize>,
    #[arg(long)]
    ratio: Option<f64>,
    /// Bits per stored float in the storage report.
    #[arg(long)]
    float_bits: Option<u64>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Ranks to evaluate; defaults to a ratio grid per layer.
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    ratios: Vec<f64>,
    #[arg(long, value_parser = parse_origin)]
    origin: Option<OriginMode>,
}

#[derive(Args, Debug)]
struct CertifyArgs {
    #[arg(long)]
    count: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum AdaptMethod {
    Coefficients,
    Adarank,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long, value_enum)]
    method: Option<AdaptMethod>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    init_lambda: Option<f64>,
    #[arg(long)]
    init_k: Option<usize>,
    #[arg(long)]
    mask_lr: Option<f64>,
}

#[derive(Args, Debug)]
struct SampleSizeArgs {
    #[arg(long, allow_hyphen_values = true)]
    a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    b: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    z: Option<f64>,
}

fn parse_origin(s: &str) -> Result<OriginMode, String> {
    s.parse::<OriginMode>().map_err(|e| e.to_string())
}

/// Bad invocation detected after parsing; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Global settings after merging flags, config file and defaults.
struct RunContext {
    seed: u64,
    out_dir: PathBuf,
    classifier: ParamClassifier,
    file: FileConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let file = match &cli.config {
        Some(p) => config::load(p).map_err(usage)?,
        None => FileConfig::default(),
    };
    let include = pick_vec(cli.matrix_include, file.matrix_include.clone());
    let exclude = pick_vec(cli.matrix_exclude, file.matrix_exclude.clone());
    let classifier = ParamClassifier::with_patterns(&include, &exclude).map_err(|e| usage(e.to_string()))?;
    let out_dir = cli.out_dir.or_else(|| file.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    if out_dir.as_os_str().is_empty() {
        return Err(usage("--out-dir must not be empty"));
    }
    let ctx = RunContext { seed: cli.seed.or(file.seed).unwrap_or(0), out_dir, classifier, file };
    match cli.command {
        Command::Merge(a) => cmd_merge(&ctx, a),
        Command::Index(a) => cmd_index(&ctx, a),
        Command::Analyze(a) => cmd_analyze(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Certify(a) => cmd_certify(&ctx, a),
        Command::Adapt(a) => cmd_adapt(&ctx, a),
        Command::Samplesize(a) => cmd_samplesize(&ctx, a),
    }
}

fn pick_vec<T>(flag: Vec<T>, file: Option<Vec<T>>) -> Vec<T> {
    if flag.is_empty() {
        file.unwrap_or_default()
    } else {
        flag
    }
}

fn origin_from(flag: Option<OriginMode>, file: Option<&str>, default: OriginMode) -> Result<OriginMode> {
    match (flag, file) {
        (Some(o), _) => Ok(o),
        (None, Some(s)) => s.parse().map_err(|e: taskmerge_core::Error| usage(e.to_string())),
        (None, None) => Ok(default),
    }
}

struct Loaded {
    pretrained: TensorMap,
    finetuned: Vec<TensorMap>,
    /// Every input path with its SHA-256, pretrained first.
    hashes: Vec<InputHash>,
}

#[derive(Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

fn load_inputs(inputs: Inputs, file_pre: Option<PathBuf>, file_ft: Option<Vec<PathBuf>>) -> Result<Loaded> {
    let pretrained = inputs.pretrained.or(file_pre).ok_or_else(|| usage("--pretrained is required"))?;
    let finetuned = pick_vec(inputs.finetuned, file_ft);
    if finetuned.len() < 2 {
        return Err(usage("at least two fine-tuned checkpoints are required"));
    }
    let mut hashes = Vec::new();
    let mut load = |p: &Path| -> Result<TensorMap> {
        if p.as_os_str().is_empty() {
            return Err(usage("checkpoint paths must not be empty"));
        }
        let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        hashes.push(InputHash { path: p.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) });
        Ok(load_checkpoint(p)?)
    };
    let pre = load(&pretrained)?;
    let fts = finetuned.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    Ok(Loaded { pretrained: pre, finetuned: fts, hashes })
}

fn write(ctx: &RunContext, name: &str, contents: &[u8]) -> Result<PathBuf> {
    std::fs::create_dir_all(&ctx.out_dir).with_context(|| format!("creating {}", ctx.out_dir.display()))?;
    let path = ctx.out_dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_json<T: Serialize>(ctx: &RunContext, name: &str, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(ctx, name, text.as_bytes())
}

fn check_ratio(r: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&r) {
        Ok(r)
    } else {
        Err(usage(format!("ratio must lie in [0, 1], got {r}")))
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    version: &'static str,
    seed: u64,
    inputs: &'a [InputHash],
    plan: &'a MergePlan,
    output: String,
}

fn cmd_merge(ctx: &RunContext, a: MergeArgs) -> Result<ExitCode> {
    let f = &ctx.file.merge;
    let mut origin = origin_from(a.origin, f.origin.as_deref(), OriginMode::Mean)?;
    if let OriginMode::RankMin(cfg) = origin {
        let steps = a.rankmin_steps.or(f.rankmin_steps).unwrap_or(cfg.steps());
        let step_size = a.rankmin_step_size.or(f.rankmin_step_size).or(cfg.step_size());
        origin = OriginMode::RankMin(RankMinConfig::new(steps, step_size).map_err(|e| usage(e.to_string()))?);
    }
    let ratio = check_ratio(a.ratio.or(f.ratio).unwrap_or(DEFAULT_RATIO))?;
    let coefficients = match (a.lambda, a.coefficients.or(f.coefficients.clone())) {
        (Some(l), _) => Coefficients::Global(l),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let table: CoefficientTable = serde_json::from_str(&text)
                .map_err(|e| usage(format!("invalid coefficient table {}: {e}", path.display())))?;
            Coefficients::PerTaskLayer(table)
        }
        (None, None) => Coefficients::Global(f.lambda.unwrap_or(DEFAULT_LAMBDA)),
    };
    let loaded = load_inputs(a.inputs, f.pretrained.clone(), f.finetuned.clone())?;
    let plan = MergePlan { origin_mode: origin, rank_ratio: ratio, coefficients };
    let merged = plan.run(&loaded.pretrained, &loaded.finetuned, &ctx.classifier, Execution::Parallel)?;
    std::fs::create_dir_all(&ctx.out_dir)?;
    let out = ctx.out_dir.join("merged.safetensors");
    save_checkpoint(&merged, &out)?;
    let manifest = Manifest {
        command: "merge",
        version: env!("CARGO_PKG_VERSION"),
        seed: ctx.seed,
        inputs: &loaded.hashes,
        plan: &plan,
        output: out.display().to_string(),
    };
    write_json(ctx, "manifest.json", &manifest)?;
    println!("{}", out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct StorageReport<'a> {
    task: usize,
    tasks: usize,
    rank_ratio: f64,
    float_bits: u64,
    layers: Vec<String>,
    ranks: &'a [usize],
    mask_bits: u64,
    lowrank_bits: u64,
    inputs: &'a [InputHash],
}

fn cmd_index(ctx: &RunContext, a: IndexArgs) -> Result<ExitCode> {
    let f = &ctx.file.index;
    let task = a.task.or(f.task).ok_or_else(|| usage("--task is required"))?;
    let ratio = check_ratio(a.ratio.or(f.ratio).unwrap_or(DEFAULT_RATIO))?;
    let float_bits = a.float_bits.or(f.float_bits).unwrap_or(32);
    let loaded = load_inputs(a.inputs, f.pretrained.clone(), f.finetuned.clone())?;
    let model = cart_indexing(&loaded.pretrained, &loaded.finetuned, ratio, task, &ctx.classifier, Execution::Parallel)?;
    std::fs::create_dir_all(&ctx.out_dir)?;
    let out = ctx.out_dir.join(format!("task{task}.safetensors"));
    save_checkpoint(&model, &out)?;

    let (layers, dims): (Vec<String>, Vec<(usize, usize)>) = loaded.finetuned[0]
        .entries
        .iter()
        .filter(|(n, t)| ctx.classifier.classify(n, t) == ParamClass::Matrix)
        .map(|(n, t)| (n.clone(), (t.shape()[0], t.shape()[1])))
        .unzip();
    let cost = storage_cost(loaded.finetuned.len(), &dims, ratio, float_bits)?;
    let report = StorageReport {
        task,
        tasks: loaded.finetuned.len(),
        rank_ratio: ratio,
        float_bits,
        layers,
        ranks: &cost.ranks,
        mask_bits: cost.mask_bits,
        lowrank_bits: cost.lowrank_bits,
        inputs: &loaded.hashes,
    };
    write_json(ctx, "storage.json", &report)?;
    println!("{}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(ctx: &RunContext, a: AnalyzeArgs) -> Result<ExitCode> {
    let f = &ctx.file.analyze;
    let ks = pick_vec(a.ks, f.ks.clone());
    let loaded = load_inputs(a.inputs, f.pretrained.clone(), f.finetuned.clone())?;
    let reports = analyze_checkpoints(&loaded.pretrained, &loaded.finetuned, &ctx.classifier, &ks, Execution::Parallel)?;
    let mut csv = String::from(REPORT_CSV_HEADER);
    for r in &reports {
        r.to_csv_rows(&mut csv);
    }
    write(ctx, "analysis.csv", csv.as_bytes())?;
    write_json(ctx, "analysis.json", &reports)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(ctx: &RunContext, a: SweepArgs) -> Result<ExitCode> {
    let f = &ctx.file.sweep;
    let lambdas = pick_vec(a.lambdas, f.lambdas.clone());
    let lambdas = if lambdas.is_empty() { vec![DEFAULT_LAMBDA] } else { lambdas };
    let ratios = pick_vec(a.ratios, f.ratios.clone());
    let ratios = if ratios.is_empty() { DEFAULT_RATIOS.to_vec() } else { ratios };
    for &r in &ratios {
        check_ratio(r)?;
    }
    let origin = origin_from(a.origin, f.origin.as_deref(), OriginMode::Mean)?;
    let suite = ClassificationSuite::generate(f.suite.unwrap_or_default(), ctx.seed)?;
    let table = rank_sweep(
        &suite.pretrained,
        &suite.finetuned,
        &|m: &TensorMap| suite.evaluate(m),
        &lambdas,
        &ratios,
        &origin,
        &ctx.classifier,
        Execution::Parallel,
    )?;
    write(ctx, "sweep.csv", table.to_csv().as_bytes())?;
    write_json(ctx, "sweep.json", &table)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_certify(ctx: &RunContext, a: CertifyArgs) -> Result<ExitCode> {
    let count = a.count.or(ctx.file.certify.count).unwrap_or(DEFAULT_CERTIFY_COUNT);
    let records = certify_many(ctx.seed, count, Execution::Parallel)?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write(ctx, "certify.jsonl", lines.as_bytes())?;
    let failed = records.iter().filter(|r| !r.holds).count();
    println!("{}/{} certificates hold", count - failed, count);
    if failed > 0 {
        anyhow::bail!("{failed} certificate(s) violate the bound");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_adapt(ctx: &RunContext, a: AdaptArgs) -> Result<ExitCode> {
    let f = &ctx.file.adapt;
    let method = match (a.method, f.method.as_deref()) {
        (Some(m), _) => m,
        (None, Some(s)) => AdaptMethod::from_str(s, true).map_err(|e| usage(format!("adapt method: {e}")))?,
        (None, None) => AdaptMethod::Coefficients,
    };
    match method {
        AdaptMethod::Coefficients => {
            let d = AdaptConfig::default();
            let cfg = AdaptConfig {
                lr: a.lr.or(f.lr).unwrap_or(d.lr),
                iters: a.iters.or(f.iters).unwrap_or(d.iters),
                init_lambda: a.init_lambda.or(f.init_lambda).unwrap_or(d.init_lambda),
            };
            let suite = AdaptationSuite::signal_vs_noise(ctx.seed)?;
            let out = adapt_coefficients(&suite.tvs, &suite.model, &suite.batch, &cfg)?;
            write(ctx, "adapt_log.csv", out.log.to_csv().as_bytes())?;
            write_json(ctx, "adapt_table.json", &out.table)?;
        }
        AdaptMethod::Adarank => {
            let base = f.adarank.unwrap_or(AdaRankConfig { init_k: 5, ..AdaRankConfig::default() });
            let cfg = AdaRankConfig {
                lr: a.lr.or(f.lr).unwrap_or(base.lr),
                mask_lr: a.mask_lr.or(base.mask_lr),
                iters: a.iters.or(f.iters).unwrap_or(base.iters),
                init_k: a.init_k.unwrap_or(base.init_k),
                init_lambda: a.init_lambda.or(f.init_lambda).unwrap_or(base.init_lambda),
            };
            let suite = AdaptationSuite::trailing_noise(ctx.seed, 3, 3)?;
            let out = adarank_adapt(&suite.tvs, &suite.model, &suite.batch, &cfg)?;
            write(ctx, "adapt_log.csv", out.log.to_csv().as_bytes())?;
            write_json(ctx, "adapt_table.json", &out.table)?;
            write_json(ctx, "adapt_masks.json", &out.mask)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_samplesize(ctx: &RunContext, a: SampleSizeArgs) -> Result<ExitCode> {
    let f = &ctx.file.samplesize;
    let n = sample_size(
        a.a.or(f.a).unwrap_or(0.0),
        a.b.or(f.b).unwrap_or(1.0),
        a.eps.or(f.eps).unwrap_or(0.05),
        a.z.or(f.z).unwrap_or(1.96),
    )?;
    println!("{n}");
    Ok(ExitCode::SUCCESS)
}
