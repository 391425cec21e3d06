use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use attnmask::attention::AttentionVariant;
use attnmask::gradsuite::{run_group, SuiteGroup, SUITE_EPS, SUITE_SEEDS, SUITE_TOL};
use attnmask::metrics::{coco_thresholds, format_table, map_report, EvalParams};
use attnmask::pipeline::coco::{detections_for, parse_detections, CocoGt};
use attnmask::pipeline::config::{resolve_seed, RunConfig};
use attnmask::pipeline::run::{compare, run_toy, variant_label};
use attnmask::pipeline::train::write_trace_csv;

#[derive(Parser)]
#[command(name = "attnmask", version, about = "Attention-augmented Mask R-CNN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score COCO-style detections against ground truth.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        det: PathBuf,
        /// Comma-separated IoU thresholds; `coco` expands to 0.50:0.05:0.95.
        #[arg(long, default_value = "coco")]
        thresholds: String,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one variant on synthetic data and self-evaluate it.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "cbam")]
        attention: AttentionVariant,
        /// Overridden by ATTNMASK_SEED when set.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate all four variants on identical data.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overridden by ATTNMASK_SEED when set.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient suites.
    Gradcheck {
        /// all, attention, backbone, roialign or losses.
        #[arg(long, default_value = "all")]
        module: String,
    },
}

fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part == "coco" {
            out.extend(coco_thresholds());
        } else {
            let t: f64 = part.parse().with_context(|| format!("bad IoU threshold {part:?}"))?;
            out.push(t);
        }
    }
    if out.is_empty() {
        bail!("no IoU thresholds given");
    }
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    Ok(out)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("config {}", p.display()))
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn evaluate(gt: &Path, det: &Path, thresholds: &str, out: Option<&Path>) -> Result<()> {
    let gt_text = fs::read_to_string(gt).with_context(|| format!("reading {}", gt.display()))?;
    let det_text = fs::read_to_string(det).with_context(|| format!("reading {}", det.display()))?;
    let gt_data = CocoGt::parse(&gt_text).with_context(|| format!("ground truth {}", gt.display()))?;
    let dets = parse_detections(&det_text).with_context(|| format!("detections {}", det.display()))?;
    let dets = detections_for(&dets, &gt_data).with_context(|| format!("detections {}", det.display()))?;
    let params = EvalParams { iou_thresholds: parse_thresholds(thresholds)?, ..EvalParams::default() };
    let report = map_report(&dets, &gt_data.records()?, &params)?;
    let name = det.file_stem().map_or_else(|| "detections".to_string(), |s| s.to_string_lossy().into_owned());
    print!("{}", format_table("Evaluation Results", &[(name, &report)]));
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn train_toy(config: Option<&Path>, attention: AttentionVariant, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = resolve_seed(seed)?;
    fs::create_dir_all(out)?;
    let total = cfg.train.total_steps();
    let run = run_toy(&cfg, attention, seed, |r| {
        if r.step % 25 == 0 || r.step + 1 == total {
            eprintln!("step {:>4}/{total}  loss {:.4}  lr {}", r.step, r.l_total, r.lr);
        }
    })?;
    let mut csv = fs::File::create(out.join("loss.csv"))?;
    write_trace_csv(&run.trace, &mut csv)?;
    csv.flush()?;
    write_json(&out.join("checkpoint.json"), &run.model.checkpoint())?;
    write_json(&out.join("summary.json"), &run.summary)?;
    write_json(&out.join("detections.json"), &run.detections)?;
    print!(
        "{}",
        format_table("Held-out Evaluation", &[(variant_label(attention).to_string(), &run.summary.report)])
    );
    Ok(())
}

fn compare_cmd(config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = resolve_seed(seed)?;
    fs::create_dir_all(out)?;
    let total = cfg.train.total_steps();
    let cmp = compare(&cfg, seed, |v, r| {
        if r.step + 1 == total {
            eprintln!("{}: final loss {:.4}", v.name(), r.l_total);
        }
    })?;
    let table = cmp.table();
    fs::write(out.join("table.txt"), &table)?;
    write_json(&out.join("comparison.json"), &cmp)?;
    print!("{table}");
    Ok(())
}

fn gradcheck(module: &str) -> Result<bool> {
    let groups = if module == "all" { SuiteGroup::ALL.to_vec() } else { vec![module.parse()?] };
    println!("central differences, eps {SUITE_EPS:e}, tolerance {SUITE_TOL:e}, {SUITE_SEEDS} seeds");
    let mut ok = true;
    for g in groups {
        for o in run_group(g, SUITE_SEEDS)? {
            println!(
                "{:<4} {:<14} failures {}/{}  worst rel err {:.3e} (seed {})",
                if o.passed() { "PASS" } else { "FAIL" },
                o.name,
                o.failures,
                o.seeds,
                o.worst.max_rel_err,
                o.worst_seed
            );
            ok &= o.passed();
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Evaluate { gt, det, thresholds, out } => evaluate(gt, det, thresholds, out.as_deref()).map(|_| true),
        Command::TrainToy { config, attention, seed, out } => {
            train_toy(config.as_deref(), *attention, *seed, out).map(|_| true)
        }
        Command::Compare { config, seed, out } => compare_cmd(config.as_deref(), *seed, out).map(|_| true),
        Command::Gradcheck { module } => gradcheck(module),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
