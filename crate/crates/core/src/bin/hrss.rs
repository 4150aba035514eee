//! `hrss`: gradient checks, scan timing, contribution maps and model reports.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use hrss::blocks::BlockVariant;
use hrss::layers::{Init, Initializer};
use hrss::net::{check_input, count_flops, count_params, HrssNet, ModelConfig};
use hrss::tensor::{pairwise_sum, Tensor};
use hrss::tooling::bench::{self, BenchRecord};
use hrss::tooling::contrib::{self, ContribConfig};
use hrss::tooling::{run_suite, FdCheckReport, FdConfig, Suite};
use hrss::{macs, rng, Error, Module};

#[derive(Parser)]
#[command(name = "hrss", version, about = "Selective-scan vision kernels: verification and reporting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks; CSV on stdout, exit 1 if any row fails.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one analytic gradient to exercise the failure path.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Time the naive and chunked scans on one instance; CSV on stdout.
    ScanBench {
        #[arg(long = "B", default_value_t = 1)]
        b: usize,
        #[arg(long = "L")]
        l: usize,
        #[arg(long = "C")]
        c: usize,
        #[arg(long = "N")]
        n: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        chunks: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-direction contribution maps of one query token.
    ContribMap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        query_row: usize,
        #[arg(long)]
        query_col: usize,
        /// Output path; `<stem>_d{k}.pgm` and `<stem>_d{k}.csv` are written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a model and report branch shapes, parameters and FLOPs.
    Forward {
        /// Model configuration file; overrides the preset chosen by --variant.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "S")]
        variant: String,
        /// N,3,H,W with H and W multiples of 32.
        #[arg(long, value_parser = parse_shape)]
        input_shape: [usize; 4],
        #[arg(long)]
        ablation: Option<BlockVariant>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(
                e.downcast_ref::<Error>(),
                Some(Error::Shape { .. } | Error::InvalidArgument { .. } | Error::Config(_))
            );
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn parse_shape(s: &str) -> Result<[usize; 4], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|e| format!("'{d}': {e}")))
        .collect::<Result<_, _>>()?;
    dims.try_into().map_err(|d: Vec<usize>| format!("expected N,3,H,W, got {} values", d.len()))
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("HRSS_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().with_context(|| format!("HRSS_THREADS must be a positive integer, got '{v}'"))?;
    if n == 0 {
        bail!("HRSS_THREADS must be a positive integer, got '{v}'");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// `Ok(false)` when the command ran but its checks failed.
fn run(cmd: Command) -> anyhow::Result<bool> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cmd {
        Command::Gradcheck { module, seed, inject_fault } => {
            let cfg = FdConfig { inject_fault, ..FdConfig::new(seed) };
            let reports = run_suite(module, &cfg)?;
            writeln!(out, "{}", FdCheckReport::CSV_HEADER)?;
            for r in &reports {
                writeln!(out, "{}", r.csv_row())?;
            }
            let failed = reports.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", reports.len());
            }
            Ok(failed == 0)
        }
        Command::ScanBench { b, l, c, n, chunks, runs, seed } => {
            let report = bench::run(b, l, c, n, &chunks, runs, seed)?;
            writeln!(out, "{}", BenchRecord::CSV_HEADER)?;
            for r in &report.records {
                writeln!(out, "{}", r.csv_row())?;
            }
            if !report.agree() {
                eprintln!("chunked output differs from naive by {:e}", report.max_abs_diff);
            }
            Ok(report.agree())
        }
        Command::ContribMap { config, query_row, query_col, out: path } => {
            let cfg = ContribConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let maps = contrib::direction_maps(&cfg, query_row, query_col)?;
            let stem = path.with_extension("");
            let written = contrib::write_maps(&maps, &stem).with_context(|| format!("writing maps to {}_d*", stem.display()))?;
            for p in written {
                writeln!(out, "{}", p.display())?;
            }
            Ok(true)
        }
        Command::Forward { config, variant, input_shape, ablation, seed } => {
            let mut cfg = match &config {
                Some(p) => ModelConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
                None => ModelConfig::preset(&variant)?,
            };
            if let Some(v) = ablation {
                cfg.block = v;
            }
            let [nb, ch, h, w] = input_shape;
            if nb == 0 || ch != 3 {
                return Err(Error::Shape {
                    op: "forward",
                    dim: "input".into(),
                    detail: format!("expected N,3,H,W with N >= 1, got {nb},{ch},{h},{w}"),
                }
                .into());
            }
            check_input(h, w)?;
            forward(&mut out, &cfg, [nb, ch, h, w], seed)?;
            Ok(true)
        }
    }
}

fn forward(out: &mut impl Write, cfg: &ModelConfig, shape: [usize; 4], seed: u64) -> anyhow::Result<()> {
    let model = HrssNet::new(cfg, &Initializer::new(seed, Init::Standard))?;
    let x = Tensor::randn(shape.to_vec(), 1.0, &mut rng::stream(seed, "forward.input"));
    let (result, measured) = macs::measure(|| model.infer(&x));
    let (branches, logits) = result?;
    let [nb, _, h, w] = shape;
    writeln!(out, "variant: {}", cfg.variant)?;
    writeln!(out, "block: {}", cfg.block.name())?;
    writeln!(out, "input: {nb}x3x{h}x{w}")?;
    for (i, b) in branches.iter().enumerate() {
        let s = b.shape();
        writeln!(out, "branch{i}: {}@{}x{} (shape {:?})", s[1], s[2], s[3], s)?;
    }
    writeln!(out, "logits: {:?}", logits.shape())?;
    writeln!(out, "params: {}", model.num_params())?;
    writeln!(out, "params_backbone: {}", model.backbone_params())?;
    writeln!(out, "params_analytic: {}", count_params(cfg))?;
    writeln!(out, "flops_analytic_per_image: {}", count_flops(cfg, h, w))?;
    writeln!(out, "flops_measured_batch: {measured}")?;
    writeln!(out, "flops_analytic_256x256: {}", count_flops(cfg, 256, 256))?;
    writeln!(out, "checksum: {:.10e}", pairwise_sum(logits.data()))?;
    Ok(())
}
