use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gemmsca::{
    analyze, apply_obfuscation, conv_to_gemm, read_probe_log, synthesize, write_probe_log,
    AnalysisConfig, AnalysisInput, AnalysisReport, BlockingConstants, ConvGeometry, FilterConfig,
    GroundTruth, KnownGeometry, LoopSet, ObfuscationPlan, ProbeConfig, SyntheticExecutor,
    TimingModel,
};
use rayon::prelude::*;
use serde::Serialize;

/// Input-dimension recovery from cache probe traces of blocked GEMM.
#[derive(Parser)]
#[command(name = "gemmsca", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic probe trace and its ground-truth sidecar.
    Synth(SynthArgs),
    /// Recover loop properties, GEMM dimensions and the input dimension.
    Analyze(AnalyzeArgs),
    /// Analyze a batch of traces against their sidecars.
    Report(ReportArgs),
}

fn parse_constants(s: &str) -> Result<BlockingConstants, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [p, q, u] = parts.as_slice() else {
        return Err("expected P,Q,UNROLL".into());
    };
    let num = |v: &str| v.parse::<u64>().map_err(|e| format!("{v:?}: {e}"));
    BlockingConstants::new(num(p)?, num(q)?, num(u)?).map_err(|e| e.to_string())
}

#[derive(Args)]
struct SynthArgs {
    /// Input image side length.
    #[arg(long)]
    id: u64,
    #[arg(long)]
    kernel: u32,
    #[arg(long)]
    stride: u32,
    #[arg(long)]
    pad: u32,
    #[arg(long, default_value_t = 3)]
    channels: u32,
    #[arg(long, default_value_t = 64)]
    out_channels: u32,
    /// Trace CSV; the sidecar is written next to it with a .json extension.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative standard deviation of iteration durations.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Duplicate observation probability.
    #[arg(long, default_value_t = 0.0)]
    dup: f64,
    /// Dropped observation probability.
    #[arg(long, default_value_t = 0.0)]
    drop: f64,
    /// Spurious hits per 1000 slots.
    #[arg(long, default_value_t = 0.0)]
    spurious: f64,
    #[arg(long, default_value_t = 0)]
    dummy_rows: u64,
    #[arg(long, default_value_t = 0)]
    dummy_cols: u64,
    #[arg(long, value_parser = parse_constants, default_value = "320,320,4")]
    constants: BlockingConstants,
    /// Slots per row of an m block per element of k depth.
    #[arg(long, default_value_t = 4.0)]
    unit: f64,
}

/// Options shared by `analyze` and `report`.
#[derive(Args)]
struct PipelineArgs {
    #[arg(long, value_parser = parse_constants, default_value = "320,320,4")]
    constants: BlockingConstants,
    /// Latencies below this are hits.
    #[arg(long, default_value_t = 100)]
    threshold: u64,
    /// Duplicate window in slots.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    window: u64,
    /// Disable the short itcopy interval rule.
    #[arg(long)]
    no_interval_rule: bool,
    /// Timing unit of the synthetic calibration run.
    #[arg(long, default_value_t = 4.0)]
    unit: f64,
    /// Seed of the calibration run.
    #[arg(long, default_value_t = 0)]
    calibration_seed: u64,
}

impl PipelineArgs {
    fn config(&self, geometry: KnownGeometry) -> AnalysisConfig {
        AnalysisConfig {
            constants: self.constants,
            probe: ProbeConfig {
                hit_threshold: self.threshold,
            },
            filter: FilterConfig {
                duplicate_window: self.window,
                itcopy_interval_rule: !self.no_interval_rule,
                ..Default::default()
            },
            geometry,
        }
    }

    fn executor(&self) -> SyntheticExecutor {
        SyntheticExecutor {
            constants: self.constants,
            timing: TimingModel {
                unit: self.unit,
                ..Default::default()
            },
            seed: self.calibration_seed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["trace", "props"]))]
struct AnalyzeArgs {
    /// Probe log CSV (slot,func,latency).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Loop properties JSON: {"L1": {"N", "ST", "AT"}, "L2": ..., "L3": ...}.
    #[arg(long)]
    props: Option<PathBuf>,
    #[arg(long)]
    stride: u32,
    #[arg(long)]
    pad: u32,
    #[arg(long, default_value_t = 3)]
    channels: u32,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Glob of trace CSV files.
    #[arg(long)]
    glob: String,
    /// Directory of sidecars; defaults to each trace's own directory.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Also write the table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Largest |estimate - truth| counted as a hit.
    #[arg(long, default_value_t = 1)]
    tolerance: u64,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

/// Bad input exits 2, a failed analysis exits 3.
enum Failure {
    Input(anyhow::Error),
    Analysis(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Analysis(e)) => {
            eprintln!("analysis failed: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn sidecar_path(trace: &Path, dir: Option<&Path>) -> PathBuf {
    let side = trace.with_extension("json");
    match (dir, side.file_name()) {
        (Some(d), Some(name)) => d.join(name),
        _ => side,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<(), Failure> {
    let geometry = ConvGeometry::new(a.kernel, a.stride, a.pad, a.channels, a.out_channels)
        .map_err(|e| anyhow!(e))?;
    let timing = TimingModel {
        unit: a.unit,
        jitter: a.jitter,
        duplicate_prob: a.dup,
        drop_prob: a.drop,
        spurious_rate: a.spurious,
        ..Default::default()
    };
    timing.validate().map_err(|e| anyhow!(e))?;
    let plan = ObfuscationPlan {
        dummy_rows: a.dummy_rows,
        dummy_cols: a.dummy_cols,
    };
    let dims = apply_obfuscation(
        &conv_to_gemm(&geometry, a.id).map_err(|e| anyhow!(e))?,
        &plan,
    );
    let samples = synthesize(&dims, &a.constants, &timing, a.seed);

    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    write_probe_log(&mut w, &samples).context("writing trace")?;
    w.flush().context("writing trace")?;
    let truth = GroundTruth {
        dims,
        geometry,
        id: a.id,
        seed: a.seed,
        timing_model: timing,
        constants: a.constants,
        obfuscation: plan,
    };
    write_json(&sidecar_path(&a.out, None), &truth)?;
    Ok(())
}

fn load_samples(path: &Path) -> Result<Vec<gemmsca::ProbeSample>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_probe_log(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<(), Failure> {
    let input = match (&a.trace, &a.props) {
        (Some(t), _) => AnalysisInput::Samples(load_samples(t)?),
        (None, Some(p)) => {
            let file = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let loops: LoopSet = serde_json::from_reader(BufReader::new(file))
                .with_context(|| format!("parsing {}", p.display()))?;
            AnalysisInput::Properties(loops)
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    let geometry = KnownGeometry {
        stride: a.stride,
        padding: a.pad,
        in_channels: a.channels,
    };
    if geometry.stride == 0 || geometry.in_channels == 0 {
        return Err(anyhow!("stride and channels must be >= 1").into());
    }
    let cfg = a.pipeline.config(geometry);
    let mut exec = a.pipeline.executor();
    let report = analyze(input, &cfg, Some(&mut exec)).map_err(|e| Failure::Analysis(e.into()))?;

    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n",
        Format::Text => report.to_string(),
    };
    match &a.out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => io::stdout()
            .write_all(text.as_bytes())
            .context("writing stdout")?,
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportRow {
    trace: String,
    truth: Option<u64>,
    estimate: Option<i64>,
    id_raw: Option<f64>,
    abs_error: Option<u64>,
    hit: bool,
    /// Why the row has no verdict, if it has none.
    note: Option<String>,
}

#[derive(Debug, Serialize)]
struct BatchReport {
    tolerance: u64,
    rows: Vec<ReportRow>,
    scored: usize,
    hits: usize,
    hit_rate: Option<f64>,
}

fn report_row(path: &Path, a: &ReportArgs) -> ReportRow {
    let mut row = ReportRow {
        trace: path.display().to_string(),
        truth: None,
        estimate: None,
        id_raw: None,
        abs_error: None,
        hit: false,
        note: None,
    };
    let side = sidecar_path(path, a.truth.as_deref());
    let truth: GroundTruth = match std::fs::read(&side)
        .map_err(anyhow::Error::from)
        .and_then(|b| serde_json::from_slice(&b).map_err(anyhow::Error::from))
    {
        Ok(t) => t,
        Err(e) => {
            row.note = Some(format!("no sidecar {}: {e}", side.display()));
            return row;
        }
    };
    row.truth = Some(truth.id);
    let analyzed: Result<AnalysisReport> = load_samples(path).and_then(|samples| {
        let cfg = a.pipeline.config(KnownGeometry::from(&truth.geometry));
        let mut exec = a.pipeline.executor();
        Ok(analyze(
            AnalysisInput::Samples(samples),
            &cfg,
            Some(&mut exec),
        )?)
    });
    match analyzed {
        Ok(r) => {
            let est = r.estimates.id_rounded;
            let err = est.abs_diff(truth.id as i64);
            row.estimate = Some(est);
            row.id_raw = Some(r.estimates.id_raw);
            row.abs_error = Some(err);
            row.hit = err <= a.tolerance;
        }
        Err(e) => row.note = Some(format!("{e:#}")),
    }
    row
}

fn render_table(report: &BatchReport) -> String {
    let dash = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    let cells: Vec<[String; 6]> = report
        .rows
        .iter()
        .map(|r| {
            [
                r.trace.clone(),
                dash(r.truth.map(|v| v.to_string())),
                dash(r.estimate.map(|v| v.to_string())),
                dash(r.id_raw.map(|v| format!("{v:.1}"))),
                dash(r.abs_error.map(|v| v.to_string())),
                match (&r.note, r.hit) {
                    (Some(n), _) => n.clone(),
                    (None, true) => "hit".into(),
                    (None, false) => "miss".into(),
                },
            ]
        })
        .collect();
    let header = ["trace", "truth", "estimate", "id_raw", "abs_err", "verdict"];
    let width = |i: usize| {
        cells
            .iter()
            .map(|c| c[i].len())
            .chain([header[i].len()])
            .max()
            .unwrap_or(0)
    };
    let w: Vec<usize> = (0..5).map(width).collect();
    let mut out = String::new();
    let mut line = |c: [&str; 6]| {
        out.push_str(&format!(
            "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}  {:>w4$}  {}\n",
            c[0],
            c[1],
            c[2],
            c[3],
            c[4],
            c[5],
            w0 = w[0],
            w1 = w[1],
            w2 = w[2],
            w3 = w[3],
            w4 = w[4]
        ));
    };
    line(header);
    for c in &cells {
        line([&c[0], &c[1], &c[2], &c[3], &c[4], &c[5]]);
    }
    let rate = report
        .hit_rate
        .map_or_else(|| "-".to_string(), |r| format!("{r:.3}"));
    out.push_str(&format!(
        "hit-rate (|err| <= {}): {}/{} = {}\n",
        report.tolerance, report.hits, report.scored, rate
    ));
    out
}

fn cmd_report(a: &ReportArgs) -> Result<(), Failure> {
    let mut paths: Vec<PathBuf> = glob::glob(&a.glob)
        .map_err(|e| anyhow!("bad glob {:?}: {e}", a.glob))?
        .collect::<Result<_, _>>()
        .context("listing traces")?;
    paths.sort();
    let rows: Vec<ReportRow> = paths.par_iter().map(|p| report_row(p, a)).collect();
    let scored = rows.iter().filter(|r| r.truth.is_some()).count();
    let hits = rows.iter().filter(|r| r.hit).count();
    let report = BatchReport {
        tolerance: a.tolerance,
        scored,
        hits,
        hit_rate: (scored > 0).then(|| hits as f64 / scored as f64),
        rows,
    };
    print!("{}", render_table(&report));
    if let Some(path) = &a.json {
        write_json(path, &report)?;
    }
    Ok(())
}
