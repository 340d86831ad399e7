//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::analysis::{benchmark, model_flops, model_report, param_bytes, EffReport};
use crate::checkpoint::{load_model, model_meta, save_model, Archive};
use crate::config::RunConfig;
use crate::distill::{evaluate, train, ToyData, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{build_teacher, derive_student};
use crate::qlinear::QuantPolicy;
use crate::sla::{attention_flops, AttentionVariant};

pub const OUT_ENV: &str = "LT3R_OUT";
pub const CHECKPOINT_FILE: &str = "student.lt3r";
pub const EXPORT_FILE: &str = "student_fp8.lt3r";

#[derive(Debug, Parser)]
#[command(name = "lite3r", version, about = "Sparse linear attention + FP8 QAT on toy transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (LT3R_OUT takes precedence).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for ablation variants; bench always uses one.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distill and QAT-train an SLA student; writes a checkpoint and logs.
    Train,
    /// Convert a checkpoint's policy-matched layers to weight-only FP8.
    Export { checkpoint: PathBuf },
    /// Efficiency report for dense, SLA and SLA+FP8 models.
    Bench,
    /// Per-layer quantization sensitivity of a checkpoint.
    Sensitivity { checkpoint: PathBuf },
    /// The four-way SLA / QAT ablation.
    Ablate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Export { .. } => "export",
            Command::Bench => "bench",
            Command::Sensitivity { .. } => "sensitivity",
            Command::Ablate => "ablate",
        }
    }
}

/// Parse `args`, run, and map the outcome to an exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    Ok(cfg)
}

fn resolve_out(cli: &Cli) -> PathBuf {
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cli.out.clone().unwrap_or_else(|| {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        PathBuf::from("runs").join(format!("{}-{stamp}", cli.command.name()))
    })
}

/// Everything is validated and loaded before the output directory is created,
/// so a bad config or checkpoint leaves no files behind.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve_config(cli)?;
    let input = match &cli.command {
        Command::Export { checkpoint } | Command::Sensitivity { checkpoint } => Some(Archive::load(checkpoint)?),
        _ => None,
    };
    let out = resolve_out(cli);
    match (&cli.command, &input) {
        (Command::Export { .. }, Some(a)) => cmd_export(a, &out)?,
        (Command::Sensitivity { .. }, Some(a)) => cmd_sensitivity(a, &out)?,
        (Command::Train, _) => cmd_train(&cfg, &out)?,
        (Command::Bench, _) => cmd_bench(&cfg, &out)?,
        (Command::Ablate, _) => cmd_ablate(&cfg, cli.threads, &out)?,
        _ => unreachable!("checkpoint commands always load their input"),
    }
    Ok(out)
}

struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new() -> Self {
        Outputs { files: Vec::new() }
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.files.push((name.into(), bytes));
        Ok(())
    }

    fn text(&mut self, name: &str, text: String) {
        self.files.push((name.into(), text.into_bytes()));
    }

    fn archive(&mut self, name: &str, a: &Archive) -> Result<()> {
        self.files.push((name.into(), a.to_bytes()?));
        Ok(())
    }

    fn write(self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in self.files {
            let path = dir.join(&name);
            let tmp = dir.join(format!(".{name}.partial"));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    seed: u64,
    total_params: usize,
    trainable_params: usize,
    trainable_fraction: f64,
    quantized_layers: usize,
    eval_mse_start: f32,
    eval_mse_end: f32,
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let run = train(cfg.model, &cfg.train, cfg.seed)?;
    let first = run.log.evals.first().map_or(f32::NAN, |e| e.eval_mse);
    let last = run.log.last_eval().map_or(f32::NAN, |e| e.eval_mse);
    let summary = TrainSummary {
        seed: cfg.seed,
        total_params: run.student.num_params(),
        trainable_params: run.student.num_trainable(),
        trainable_fraction: run.student.trainable_fraction(),
        quantized_layers: run.converted_layers,
        eval_mse_start: first,
        eval_mse_end: last,
    };
    let ckpt = save_model(&run.student, checkpoint_extra(&cfg.train))?;
    let mut o = Outputs::new();
    o.json("config.json", cfg)?;
    o.archive(CHECKPOINT_FILE, &ckpt)?;
    o.json("train_log.json", &run.log)?;
    o.text("train_steps.csv", run.log.steps_csv()?);
    o.text("train_evals.csv", run.log.evals_csv()?);
    o.json("timings.json", &run.log.timings)?;
    o.json("summary.json", &summary)?;
    o.write(out)
}

fn checkpoint_extra(t: &TrainConfig) -> serde_json::Value {
    json!({ "policy": t.policy, "enable_act_quant": t.enable_act_quant })
}

#[derive(Debug, Serialize)]
struct ExportSummary {
    exported_layers: usize,
    weight_only_layers: usize,
    input_bytes: usize,
    output_bytes: usize,
}

pub fn cmd_export(input: &Archive, out: &Path) -> Result<()> {
    let meta = model_meta(input)?;
    let policy: QuantPolicy = match meta.extra.get("policy") {
        Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Archive(format!("bad stored policy: {e}")))?,
        None => QuantPolicy::default(),
    };
    let mut model = load_model(input)?;
    model.apply_policy(&policy, false);
    let exported_layers = model.export_weight_only()?;
    let archive = save_model(&model, meta.extra)?;
    let bytes = archive.to_bytes()?;
    let summary = ExportSummary {
        exported_layers,
        weight_only_layers: model.linears().iter().filter(|l| l.is_quantized()).count(),
        input_bytes: input.to_bytes()?.len(),
        output_bytes: bytes.len(),
    };
    let mut o = Outputs::new();
    o.files.push((EXPORT_FILE.into(), bytes));
    o.json("export.json", &summary)?;
    o.write(out)
}

pub const BENCH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct FlopCheck {
    pub seq_len: u64,
    pub d_model: u64,
    pub keep_ratio: f32,
    pub dense: u64,
    pub sla: u64,
    pub ratio: f64,
}

#[derive(Debug, Serialize)]
struct BenchOutput {
    schema_version: u32,
    threads: usize,
    attention_flop_check: FlopCheck,
    reports: Vec<EffReport>,
}

pub fn attention_flop_check(n: u64, d: u64, keep_ratio: f32) -> FlopCheck {
    let dense = attention_flops(n, d, keep_ratio, AttentionVariant::Dense);
    let sla = attention_flops(n, d, keep_ratio, AttentionVariant::Sla);
    FlopCheck {
        seq_len: n,
        d_model: d,
        keep_ratio,
        dense,
        sla,
        ratio: dense as f64 / sla as f64,
    }
}

#[derive(Debug, Serialize)]
struct BenchRow<'a> {
    variant: &'a str,
    seq_len: usize,
    keep_ratio: f32,
    attention_flops: u64,
    linear_flops: u64,
    total_flops: u64,
    param_bytes_full: u64,
    param_bytes_deployed: u64,
    peak_bytes: u64,
    mean_latency_s: f64,
    min_latency_s: f64,
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let b = &cfg.bench;
    let teacher = build_teacher(cfg.model, cfg.seed)?;
    let sla = derive_student(&teacher, cfg.train.keep_ratio)?;
    let mut fp8 = sla.clone();
    fp8.apply_policy(&cfg.train.policy, false);
    fp8.export_weight_only()?;
    let reports = vec![
        benchmark(&teacher, "dense", b.seq_len, b.repeats, b.warmup, cfg.seed)?,
        benchmark(&sla, "sla", b.seq_len, b.repeats, b.warmup, cfg.seed)?,
        benchmark(&fp8, "sla_fp8", b.seq_len, b.repeats, b.warmup, cfg.seed)?,
    ];
    let check = attention_flop_check(b.flop_seq_len as u64, cfg.model.d_model as u64, cfg.train.keep_ratio);
    let rows: Vec<BenchRow> = reports
        .iter()
        .map(|r| BenchRow {
            variant: &r.variant,
            seq_len: r.seq_len,
            keep_ratio: r.keep_ratio,
            attention_flops: r.attention_flops,
            linear_flops: r.linear_flops,
            total_flops: r.total_flops,
            param_bytes_full: r.param_bytes.full,
            param_bytes_deployed: r.param_bytes.deployed,
            peak_bytes: r.peak_bytes,
            mean_latency_s: r.mean_latency_s,
            min_latency_s: r.min_latency_s,
        })
        .collect();
    let mut o = Outputs::new();
    o.json("config.json", cfg)?;
    o.text("bench.csv", crate::distill::to_csv(&rows)?);
    o.json(
        "bench.json",
        &BenchOutput {
            schema_version: BENCH_SCHEMA_VERSION,
            threads: 1,
            attention_flop_check: check,
            reports,
        },
    )?;
    o.write(out)
}

pub fn cmd_sensitivity(input: &Archive, out: &Path) -> Result<()> {
    let model = load_model(input)?;
    let report = model_report(&model)?;
    let mut o = Outputs::new();
    o.text("sensitivity.csv", report.to_csv()?);
    o.json("sensitivity.json", &report)?;
    o.write(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub sla: bool,
    pub qat: bool,
    pub keep_ratio: f32,
    pub eval_mse_start: f32,
    pub eval_mse_end: f32,
    pub attention_flops: u64,
    pub param_bytes_deployed: u64,
    pub trainable_params: usize,
}

pub const ABLATION_VARIANTS: [&str; 4] = ["full", "sla_no_qat", "no_sla_qat", "original"];

fn ablation_variant(cfg: &RunConfig, variant: &str) -> Result<AblationRow> {
    let n = cfg.model.seq_len as u64;
    if variant == "original" {
        let teacher = build_teacher(cfg.model, cfg.seed)?;
        let data = ToyData::generate(&teacher, &cfg.train, cfg.seed)?;
        let mse = evaluate(&teacher, &data)?;
        return Ok(AblationRow {
            variant: variant.into(),
            sla: false,
            qat: false,
            keep_ratio: 1.0,
            eval_mse_start: mse,
            eval_mse_end: mse,
            attention_flops: model_flops(&teacher, n).0,
            param_bytes_deployed: param_bytes(&teacher).deployed,
            trainable_params: 0,
        });
    }
    let mut t = cfg.train.clone();
    let sla = variant != "no_sla_qat";
    match variant {
        "full" => {}
        "sla_no_qat" => t.qat = false,
        // Without SLA sparsity the student keeps every key.
        "no_sla_qat" => t.keep_ratio = 1.0,
        other => return Err(Error::InvalidArgument(format!("unknown ablation variant {other}"))),
    }
    let mut run = train(cfg.model, &t, cfg.seed)?;
    if t.qat {
        run.student.export_weight_only()?;
    }
    Ok(AblationRow {
        variant: variant.into(),
        sla,
        qat: t.qat,
        keep_ratio: t.keep_ratio,
        eval_mse_start: run.log.evals.first().map_or(f32::NAN, |e| e.eval_mse),
        eval_mse_end: run.log.last_eval().map_or(f32::NAN, |e| e.eval_mse),
        attention_flops: model_flops(&run.student, n).0,
        param_bytes_deployed: param_bytes(&run.student).deployed,
        trainable_params: run.student.num_trainable(),
    })
}

pub fn run_ablation(cfg: &RunConfig, threads: usize) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ABLATION_VARIANTS.len());
    for chunk in ABLATION_VARIANTS.chunks(threads.max(1)) {
        let results: Vec<Result<AblationRow>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|v| s.spawn(move || ablation_variant(cfg, v))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidArgument("ablation worker panicked".into()))))
                .collect()
        });
        for r in results {
            rows.push(r?);
        }
    }
    Ok(rows)
}

pub fn cmd_ablate(cfg: &RunConfig, threads: usize, out: &Path) -> Result<()> {
    let rows = run_ablation(cfg, threads)?;
    let mut o = Outputs::new();
    o.json("config.json", cfg)?;
    o.text("ablation.csv", crate::distill::to_csv(&rows)?);
    o.json("ablation.json", &rows)?;
    o.write(out)
}
