//! `laver` command line: train the micro multimodal model, diagnose
//! checkpoints or feature dumps, verify gradients, inspect attention
//! layouts, and compare metric logs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use laver_core::checkpoint::load_checkpoint;
use laver_core::compare::{compare, load_metrics};
use laver_core::config::load_config;
use laver_core::diagnostics::{cka, cknna, inner_product_kernel, mean_pairwise_cosine};
use laver_core::layout::{build_mixed_layout, build_packed_layout, parse_segments, SegmentKind};
use laver_core::tensor::read_lvtd;
use laver_core::train::{diagnose, grad_check, run_training, Mode, TrainConfig};
use laver_core::{Error, Tensor};

#[derive(Parser)]
#[command(name = "laver", version, about = "Masked latent visual reconstruction training kit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the micro model and write metrics + checkpoint.
    Train {
        /// Flat key-value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Loss mode: baseline | mim_only | mim_ga | laver.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for metrics.jsonl and checkpoint.lvck.
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe a checkpoint (profiles, alignment metrics, PCA maps) or
    /// compute metrics over raw LVTD feature dumps.
    Diagnose {
        #[arg(long, conflicts_with = "features")]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        probe_seed: u64,
        #[arg(long, default_value_t = 64)]
        probe_count: usize,
        /// Neighborhood size for the nearest-neighbor alignment metric.
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Feature matrix dump [N, D] to analyze directly.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Second feature dump; enables the alignment metrics.
        #[arg(long, requires = "features")]
        features_b: Option<PathBuf>,
    },
    /// Verify analytic loss gradients against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Print the attention allow-matrix for a segment list.
    MaskDemo {
        /// Comma-separated segments, e.g. "vision:2x2,text:3".
        #[arg(long)]
        segments: String,
        /// Build the packed (diagonally blocked) layout instead of the
        /// mixed multimodal one.
        #[arg(long)]
        packed: bool,
        /// Packed sequence length including padding.
        #[arg(long)]
        pad_to: Option<usize>,
    },
    /// Compare two metrics JSONL files step by step.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train {
            config,
            mode,
            seed,
            out,
        } => {
            let mut cfg = match config {
                Some(path) => load_config(&path)?,
                None => TrainConfig::default(),
            };
            if let Some(mode) = mode {
                cfg.mode = Mode::parse(&mode)?;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let cfg = cfg.normalize();
            eprintln!(
                "training: mode={} steps={} seed={} d_model={} grid={}x{}",
                cfg.mode.name(),
                cfg.steps,
                cfg.seed,
                cfg.model.d_model,
                cfg.model.grid_rows,
                cfg.model.grid_cols
            );
            let started = std::time::Instant::now();
            let summary = run_training(cfg, &out)?;
            eprintln!(
                "done in {:.1}s: accuracy={:.4} deep-layer cosine={:.4} attention-allocation={:.4}",
                started.elapsed().as_secs_f64(),
                summary.final_accuracy,
                summary.final_cosine_deep,
                summary.final_allocation_mean
            );
            println!("{}", summary.metrics_path.display());
            println!("{}", summary.checkpoint_path.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Diagnose {
            ckpt,
            probe_seed,
            probe_count,
            k,
            out,
            features,
            features_b,
        } => {
            if let Some(features) = features {
                let a = read_lvtd(&features)?;
                let report = dump_report(&a, features_b.map(|p| read_lvtd(p)).transpose()?, k)?;
                let json = serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
                if let Some(out) = out {
                    std::fs::create_dir_all(&out)
                        .map_err(|e| Error::io(out.display().to_string(), e))?;
                    let path = out.join("report.json");
                    std::fs::write(&path, &json)
                        .map_err(|e| Error::io(path.display().to_string(), e))?;
                }
                println!("{json}");
                return Ok(ExitCode::SUCCESS);
            }
            let ckpt = ckpt.ok_or_else(|| {
                Error::Config("diagnose needs --ckpt or --features".to_string())
            })?;
            let (config, params, _teacher) = load_checkpoint(&ckpt)?;
            let report = diagnose(&config, &params, probe_seed, probe_count, k, out.as_deref())?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
            println!("{json}");
            Ok(ExitCode::SUCCESS)
        }

        Command::GradCheck { tol, seeds } => {
            let report = grad_check(tol, seeds)?;
            println!("loss-level gradient oracle (tolerance {:.1e}):", report.tolerance);
            for c in &report.loss_level {
                println!(
                    "  {:<4} max rel err {:.3e}  {}{}",
                    c.loss,
                    c.max_rel_err,
                    if c.pass { "PASS" } else { "FAIL" },
                    if c.excluded_entries.is_empty() {
                        String::new()
                    } else {
                        format!("  ({} clip-boundary entries excluded)", c.excluded_entries.len())
                    }
                );
            }
            println!(
                "parameter-level spot checks through the tiny model (tolerance {:.1e}, f32 storage):",
                report.param_tolerance
            );
            for c in &report.param_level {
                println!(
                    "  {:<4} max rel err {:.3e}  {}",
                    c.loss,
                    c.max_rel_err,
                    if c.pass { "PASS" } else { "FAIL" }
                );
            }
            Ok(if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }

        Command::MaskDemo {
            segments,
            packed,
            pad_to,
        } => {
            let segs = parse_segments(&segments)?;
            let layout = if packed {
                let total: usize = segs.iter().map(|s| s.length).sum();
                build_packed_layout(&segs, pad_to.unwrap_or(total))?
            } else {
                build_mixed_layout(&segs)?
            };
            // legend: position kinds along the axis
            let mut kinds = String::new();
            for seg in &segs {
                let ch = match seg.kind {
                    SegmentKind::Vision { .. } => 'v',
                    SegmentKind::Text => 't',
                    SegmentKind::Pad => 'p',
                };
                for _ in 0..seg.length {
                    kinds.push(ch);
                }
            }
            while kinds.len() < layout.len() {
                kinds.push('p');
            }
            println!("   {kinds}");
            for (q, line) in layout.render_ascii().lines().enumerate() {
                println!("{} {line}", kinds.as_bytes()[q] as char);
            }
            println!("rows: queries, cols: keys, '#': allowed, '.': blocked");
            let (rope_rows, rope_cols) = (&layout.row_index, &layout.col_index);
            println!("rope row idx: {rope_rows:?}");
            println!("rope col idx: {rope_cols:?}");
            Ok(ExitCode::SUCCESS)
        }

        Command::Compare { a, b } => {
            let ra = load_metrics(&a)?;
            let rb = load_metrics(&b)?;
            let report = compare(&ra, &rb)?;
            println!(
                "compared {} aligned records (steps {}..{})",
                report.steps.len(),
                report.steps.first().unwrap_or(&0),
                report.steps.last().unwrap_or(&0)
            );
            print!("{}", report.render_table());
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[derive(serde::Serialize)]
struct DumpReport {
    rows: usize,
    dims: usize,
    mean_pairwise_cosine: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    cka: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cknna: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
}

fn dump_report(a: &Tensor, b: Option<Tensor>, k: usize) -> Result<DumpReport, Error> {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let cos = mean_pairwise_cosine(a)?;
    let (mut cka_v, mut cknna_v, mut k_used) = (None, None, None);
    if let Some(b) = b {
        let ka = Tensor::from_vec(
            &[n, n],
            inner_product_kernel(a)?.iter().map(|&v| v as f32).collect(),
        )?;
        let nb = b.shape()[0];
        let kb = Tensor::from_vec(
            &[nb, nb],
            inner_product_kernel(&b)?.iter().map(|&v| v as f32).collect(),
        )?;
        cka_v = Some(cka(&ka, &kb)?);
        cknna_v = Some(cknna(a, &b, k)?);
        k_used = Some(k);
    }
    Ok(DumpReport {
        rows: n,
        dims: d,
        mean_pairwise_cosine: cos,
        cka: cka_v,
        cknna: cknna_v,
        k: k_used,
    })
}
