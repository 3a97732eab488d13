//! Command-line front end. [`run_from`] parses arguments, runs one command and
//! returns the process exit code: 0 on success, 2 for usage, parse and I/O
//! errors, 3 for numerical degeneracy.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::datapath::{full_precision_bits, ExecOptions, MAX_T};
use crate::error::{Error, Result};
use crate::minifloat::Fp8Format;
use crate::netgraph::{
    infer_quantized, load_model, load_qmodel, load_tensors, save_model, save_qmodel, save_tensors, write_atomic,
    ErrorReport, Shape, Tensor,
};
use crate::perfmodel::{
    compile_schedule, parse_np_sweep, schedule_text, simulate_network, sweep_np, write_layer_csv, write_sweep_csv,
    NetworkPerf, PerfConfig, SweepRow,
};
use crate::quantizer::{collect_stats, quantize_network, QuantizationReport, StatsMode};
use crate::toy;

#[derive(Debug, Parser)]
#[command(name = "phoenix", version, about = "FP8 CNN quantization, datapath emulation and accelerator cycle model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize, merge and quantize an fp32 model.
    Quantize(QuantizeArgs),
    /// Run a quantized model on the emulated datapath.
    Infer(InferArgs),
    /// Quantize and evaluate the model in all eight formats.
    SweepFormats(SweepArgs),
    /// Cycle-level performance report.
    Simulate(SimulateArgs),
    /// Write a seeded synthetic model and input set.
    Toy(ToyArgs),
}

fn parse_batch(s: &str) -> std::result::Result<usize, String> {
    match s {
        "1" => Ok(1),
        "100" => Ok(100),
        _ => Err(format!("batch must be 1 or 100, got {s}")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long, default_value = "second_moment")]
    pub stats_mode: StatsMode,
    /// Calibration images used for statistics: 1 or 100.
    #[arg(long, default_value = "1", value_parser = parse_batch)]
    pub batch: usize,
}

#[derive(Debug, Clone, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, default_value = "M4E3")]
    pub format: Fp8Format,
    #[command(flatten)]
    pub stats: StatsArgs,
    /// Quantized model path; the JSON report goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub qmodel: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 14)]
    pub t: u32,
    /// fp32 model to compare against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Held-out evaluation inputs; defaults to the calibration images not
    /// used for statistics, or all of them if none are left.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Evaluate only this format.
    #[arg(long)]
    pub format: Option<Fp8Format>,
    /// Truncation width for every format; by default each format uses its
    /// full product width, capped at the widest supported window.
    #[arg(long)]
    pub t: Option<u32>,
    #[command(flatten)]
    pub stats: StatsArgs,
    /// CSV path; a JSON copy goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "default")]
    pub preset: String,
    /// Np sweep such as `Np=1..128x2`.
    #[arg(long)]
    pub sweep: Option<String>,
    /// Also write the block-level schedule, one instruction per line.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// JSON report path; the per-layer CSV goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToyKind {
    /// Random DAG with a residual add and a concat.
    Random,
    /// One 3x3 conv, 64 to 64 channels, 16x16.
    Conv,
    /// Four-layer conv chain.
    Vgg,
    /// AlexNet conv geometry (zero weights).
    Alexnet,
}

#[derive(Debug, Clone, Args)]
pub struct ToyArgs {
    #[arg(long, value_enum, default_value = "random")]
    pub kind: ToyKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write this many N(0,1) inputs here.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
}

/// What produced an artifact; embedded in every JSON report.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

#[derive(Debug, Serialize)]
pub struct QuantizeOutput {
    pub manifest: RunManifest,
    pub report: QuantizationReport,
}

pub fn cmd_quantize(a: &QuantizeArgs) -> Result<QuantizeOutput> {
    let net = load_model(&a.model)?;
    let calib = load_tensors(&a.calib)?;
    let stats = collect_stats(&net, &calib, a.stats.stats_mode, a.stats.batch)?;
    let (q, report) = quantize_network(&net, &stats, &calib, a.format)?;
    save_qmodel(&a.out, &q)?;
    let report_path = sibling(&a.out, "json");
    let out = QuantizeOutput {
        manifest: RunManifest {
            command: "quantize".into(),
            inputs: vec![path_str(&a.model), path_str(&a.calib)],
            format: Some(a.format.to_string()),
            outputs: vec![path_str(&a.out), path_str(&report_path)],
            ..Default::default()
        },
        report,
    };
    write_json(&report_path, &out)?;
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct InferResult {
    pub values: Vec<f64>,
    pub codes: Vec<u8>,
    pub saturated_products: u64,
    pub overflow: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorReport>,
}

#[derive(Debug, Serialize)]
pub struct InferOutput {
    pub manifest: RunManifest,
    pub format: Fp8Format,
    pub h_act: i32,
    pub output_shape: Shape,
    pub results: Vec<InferResult>,
}

pub fn cmd_infer(a: &InferArgs) -> Result<InferOutput> {
    let q = load_qmodel(&a.qmodel)?;
    let inputs = load_tensors(&a.input)?;
    let reference = a.reference.as_ref().map(load_model).transpose()?;
    let opts = ExecOptions::new(a.t);
    crate::datapath::TruncationWindow::new(a.t, q.format)?;
    let results = inputs
        .iter()
        .map(|x| {
            let r = infer_quantized(&q, x, &opts, reference.as_ref())?;
            let out = r.output();
            Ok(InferResult {
                values: out.values(),
                codes: out.codes.iter().map(|c| c.0).collect(),
                saturated_products: r.saturated_products.iter().sum(),
                overflow: r.overflow.iter().any(|&o| o),
                error: r.report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut in_paths = vec![path_str(&a.qmodel), path_str(&a.input)];
    in_paths.extend(a.reference.as_deref().map(path_str));
    let out = InferOutput {
        manifest: RunManifest {
            command: "infer".into(),
            inputs: in_paths,
            format: Some(q.format.to_string()),
            t: Some(a.t),
            outputs: vec![path_str(&a.out)],
            ..Default::default()
        },
        format: q.format,
        h_act: q.h_act,
        output_shape: q.validate()?.last().copied().unwrap_or(q.topology.input_shape),
        results,
    };
    write_json(&a.out, &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormatRow {
    pub format: String,
    pub t: u32,
    pub status: String,
    pub h_act: Option<i32>,
    pub output_rel_l2_pct: Option<f64>,
    pub mean_rel_l2_pct: Option<f64>,
}

fn sweep_width(fmt: Fp8Format, t: Option<u32>) -> u32 {
    t.unwrap_or_else(|| full_precision_bits(fmt).min(MAX_T))
}

/// Quantizes with `fmt` and returns the held-out errors averaged over inputs.
fn evaluate_format(
    net: &crate::netgraph::NetworkGraph,
    calib: &[Tensor],
    held_out: &[Tensor],
    fmt: Fp8Format,
    stats: &StatsArgs,
    t: u32,
) -> Result<(i32, f64, f64)> {
    let s = collect_stats(net, calib, stats.stats_mode, stats.batch)?;
    let (q, _) = quantize_network(net, &s, calib, fmt)?;
    let opts = ExecOptions::new(t);
    let reports = held_out
        .iter()
        .map(|x| {
            infer_quantized(&q, x, &opts, Some(net)).map(|r| r.report.expect("reference supplied"))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = reports.len() as f64;
    Ok((
        q.h_act,
        reports.iter().map(|r| r.output_rel_l2_pct).sum::<f64>() / n,
        reports.iter().map(|r| r.mean_rel_l2_pct).sum::<f64>() / n,
    ))
}

pub fn cmd_sweep_formats(a: &SweepArgs) -> Result<Vec<FormatRow>> {
    let net = load_model(&a.model)?;
    let calib = load_tensors(&a.calib)?;
    if calib.is_empty() {
        return Err(Error::Unsupported("empty calibration set".into()));
    }
    let held_out = match &a.input {
        Some(p) => load_tensors(p)?,
        None if calib.len() > a.stats.batch => calib[a.stats.batch..].to_vec(),
        None => calib.clone(),
    };
    if held_out.is_empty() {
        return Err(Error::Unsupported("no evaluation inputs".into()));
    }
    let formats: Vec<Fp8Format> = match a.format {
        Some(f) => vec![f],
        None => Fp8Format::ALL.to_vec(),
    };
    let rows: Vec<FormatRow> = formats
        .par_iter()
        .map(|&fmt| match evaluate_format(&net, &calib, &held_out, fmt, &a.stats, sweep_width(fmt, a.t)) {
            Ok((h, out, mean)) => FormatRow {
                format: fmt.to_string(),
                t: sweep_width(fmt, a.t),
                status: "ok".into(),
                h_act: Some(h),
                output_rel_l2_pct: Some(out),
                mean_rel_l2_pct: Some(mean),
            },
            Err(e) => FormatRow {
                format: fmt.to_string(),
                t: sweep_width(fmt, a.t),
                status: format!("error: {e}"),
                h_act: None,
                output_rel_l2_pct: None,
                mean_rel_l2_pct: None,
            },
        })
        .collect();

    let mut csv_out = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        csv_out.serialize(r)?;
    }
    let bytes = csv_out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&a.out, &bytes)?;

    #[derive(Serialize)]
    struct SweepOutput<'a> {
        manifest: RunManifest,
        rows: &'a [FormatRow],
    }
    let json_path = sibling(&a.out, "json");
    let mut inputs = vec![path_str(&a.model), path_str(&a.calib)];
    inputs.extend(a.input.as_deref().map(path_str));
    write_json(
        &json_path,
        &SweepOutput {
            manifest: RunManifest {
                command: "sweep-formats".into(),
                inputs,
                format: a.format.map(|f| f.to_string()),
                t: a.t,
                outputs: vec![path_str(&a.out), path_str(&json_path)],
                ..Default::default()
            },
            rows: &rows,
        },
    )?;
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct SimulateOutput {
    pub manifest: RunManifest,
    pub report: NetworkPerf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepRow>>,
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<SimulateOutput> {
    let cfg = PerfConfig::preset(&a.preset)?;
    let sweep_values = a.sweep.as_deref().map(parse_np_sweep).transpose()?;
    let net = load_model(&a.model)?;
    let report = simulate_network(&net.topology, &cfg)?;
    let csv_path = sibling(&a.out, "csv");
    let mut outputs = vec![path_str(&a.out), path_str(&csv_path)];

    let mut buf = Vec::new();
    write_layer_csv(&report, &mut buf)?;
    write_atomic(&csv_path, &buf)?;

    let sweep = match sweep_values {
        Some(nps) => {
            let rows = sweep_np(&net.topology, &cfg, &nps)?;
            let p = a.out.with_file_name(format!(
                "{}.sweep.csv",
                a.out.file_stem().map_or("perf".into(), |s| s.to_string_lossy())
            ));
            let mut buf = Vec::new();
            write_sweep_csv(&rows, &mut buf)?;
            write_atomic(&p, &buf)?;
            outputs.push(path_str(&p));
            Some(rows)
        }
        None => None,
    };
    if let Some(p) = &a.schedule {
        let text = schedule_text(&compile_schedule(&net.topology, &cfg)?);
        write_atomic(p, text.as_bytes())?;
        outputs.push(path_str(p));
    }
    let out = SimulateOutput {
        manifest: RunManifest {
            command: "simulate".into(),
            inputs: vec![path_str(&a.model)],
            preset: Some(a.preset.clone()),
            outputs,
            ..Default::default()
        },
        report,
        sweep,
    };
    write_json(&a.out, &out)?;
    Ok(out)
}

pub fn cmd_toy(a: &ToyArgs) -> Result<()> {
    let net = match a.kind {
        ToyKind::Random => toy::random_network(a.seed),
        ToyKind::Conv => toy::conv_layer(a.seed, 64, 64, 3, 16),
        ToyKind::Vgg => toy::vgg_like(a.seed, Shape::new(3, 32, 32), &[64, 64, 128, 128]),
        ToyKind::Alexnet => toy::alexnet_convs(),
    };
    save_model(&a.out, &net)?;
    if let Some(p) = &a.calib {
        let mut rng = toy::rng(a.seed ^ 0x5eed);
        save_tensors(p, &toy::gaussian_tensors(&mut rng, net.input_shape(), 1.0, a.count))?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Quantize(a) => cmd_quantize(a).map(|_| ()),
        Command::Infer(a) => cmd_infer(a).map(|_| ()),
        Command::SweepFormats(a) => cmd_sweep_formats(a).map(|_| ()),
        Command::Simulate(a) => cmd_simulate(a).map(|_| ()),
        Command::Toy(a) => cmd_toy(a),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

/// Caps the global thread pool at `PHOENIX_THREADS` if set.
pub fn init_threads() {
    if let Some(n) = std::env::var("PHOENIX_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("phoenix: {e}");
            exit_code(&e)
        }
    }
}
