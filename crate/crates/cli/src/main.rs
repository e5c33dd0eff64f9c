//! `atrium`: phantom generation, training, refinement, prediction and
//! evaluation from one JSON config.

mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atrium_core::autodiff::GradCheckReport;
use atrium_core::dataset::{generate_dataset, load_dataset, write_dataset, Split};
use atrium_core::gradsuite::run_gradient_suite;
use atrium_core::inference::{detect_roi, expand_maps, finalize_mask, predict_cascade, prepare_input};
use atrium_core::metrics::{evaluate_case, MetricsReport};
use atrium_core::net3d::{build_unet, Checkpoint, Network};
use atrium_core::pipeline::{run_ablation, tiling_for};
use atrium_core::trainer::{prepare_cases, refine, train};
use atrium_core::volcore::{load_mask, load_volume, save_mask, save_volume, write_atomic};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use error::{CliError, Result};

#[derive(Parser)]
#[command(name = "atrium", version, about = "Volumetric segmentation toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Global seed; replaces every sub-seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (`paths.out`; for `gen`, the dataset directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset and its manifest.
    Gen,
    /// Train the level-0 network on the train split.
    Train,
    /// Train refinement levels on top of the level-0 checkpoint.
    Refine,
    /// Print the detected region of interest as `x0 y0 z0 x1 y1 z1`
    /// (lower corner inclusive, upper exclusive).
    Roi { volume: PathBuf },
    /// Run the checkpoint cascade on volumes; writes probability, threshold
    /// and mask files per input.
    Predict {
        #[arg(required = true)]
        volumes: Vec<PathBuf>,
    },
    /// Score `<pred>/<case>_pred.hdr` masks against the dataset.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Train and score the full loss ladder plus refinement levels.
    Ablate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let c = &cli.common;
    let mut cfg = RunConfig::resolve(c.config.as_deref(), &c.sets, c.seed)?;
    if let (Some(out), false) = (&c.out, matches!(cli.command, Command::Gen)) {
        cfg.paths.out = out.clone();
    }
    match cli.command {
        Command::Gen => {
            let dir = c.out.clone().unwrap_or_else(|| cfg.paths.data.clone());
            let ds = generate_dataset(&cfg.dataset)?;
            let manifest = write_dataset(&dir, &ds)?;
            echo_config(&dir, &cfg)?;
            println!("wrote {} cases, manifest {}", ds.cases.len(), manifest.display());
        }
        Command::Train => {
            let out = &cfg.paths.out;
            echo_config(out, &cfg)?;
            let cases = prepare_cases(&split_cases(&cfg, Split::Train)?, &cfg.roi)?;
            let net = build_unet(&cfg.unet, cfg.init_seed)?;
            let ck_path = out.join("level0.ckpt.json");
            let (_, log) = train(net, &cases, &cfg.train, Some(&ck_path))?;
            log.save_csv(&out.join("level0.log.csv"))?;
            let window = log.rows.len().min(100);
            if let Some((start, end)) = log.start_end_means(window) {
                println!("mean loss {start:.4} -> {end:.4} over {window}-step windows");
            }
            println!("checkpoint {}", ck_path.display());
        }
        Command::Refine => {
            let out = &cfg.paths.out;
            echo_config(out, &cfg)?;
            let base = match cfg.paths.checkpoints.first() {
                Some(p) => p.clone(),
                None => out.join("level0.ckpt.json"),
            };
            let level0 = Checkpoint::load(&base)?;
            let cases = prepare_cases(&split_cases(&cfg, Split::Train)?, &cfg.roi)?;
            let tiling = tiling_for(&cfg.train.loss, &cfg.tiling);
            for (ck, log) in refine(&level0, &cases, &cfg.rrs, &cfg.train, &tiling)? {
                let path = out.join(format!("level{}.ckpt.json", ck.level));
                ck.save(&path)?;
                log.save_csv(&out.join(format!("level{}.log.csv", ck.level)))?;
                println!("level {} checkpoint {}", ck.level, path.display());
            }
        }
        Command::Roi { volume } => {
            let b = detect_roi(&load_volume(&volume)?, &cfg.roi)?;
            println!(
                "{} {} {} {} {} {}",
                b.lo[0], b.lo[1], b.lo[2], b.hi[0], b.hi[1], b.hi[2]
            );
        }
        Command::Predict { volumes } => {
            let out = &cfg.paths.out;
            echo_config(out, &cfg)?;
            let levels = load_cascade(&cfg)?;
            let tiling = tiling_for(&cfg.train.loss, &cfg.tiling);
            for path in volumes {
                let raw = load_volume(&path)?;
                let prep = prepare_input(&raw, &cfg.roi)?;
                let maps = predict_cascade(&levels, &prep.image, &tiling)?;
                let last = maps.last().expect("cascade has a level");
                let full = expand_maps(&prep, last, raw.spacing())?;
                let mask = finalize_mask(&prep, last, &tiling, raw.spacing())?;
                let stem = output_stem(&path);
                save_volume(&out.join(format!("{stem}_prob.hdr")), &full.prob)?;
                save_volume(&out.join(format!("{stem}_tm.hdr")), &full.tm)?;
                save_mask(&out.join(format!("{stem}_pred.hdr")), &mask)?;
                println!("{stem}: {} foreground voxels", mask.count());
            }
        }
        Command::Eval { pred, split } => {
            let out = &cfg.paths.out;
            echo_config(out, &cfg)?;
            let ds = load_dataset(&cfg.paths.data)?;
            let mut rows = Vec::new();
            for case in ds.cases.iter().filter(|c| match split {
                SplitArg::Train => c.split == Split::Train,
                SplitArg::Test => c.split == Split::Test,
                SplitArg::All => true,
            }) {
                let p = load_mask(&pred.join(format!("{}_pred.hdr", case.id)))?;
                rows.push(evaluate_case(&case.id, &p, &case.mask)?);
            }
            if rows.is_empty() {
                return Err(CliError::Usage("no cases in the selected split".into()));
            }
            let report = MetricsReport::new("eval", rows);
            report.save(&out.join("metrics.csv"), &out.join("metrics.json"))?;
            print!("{}", report.to_csv());
        }
        Command::Gradcheck => {
            let reports = run_gradient_suite(cfg.seed.unwrap_or(0))?;
            for r in &reports {
                println!(
                    "{:<36} max rel err {:.3e}  {}",
                    r.name,
                    r.max_rel_error(),
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            let worst = reports.iter().map(GradCheckReport::max_rel_error).fold(0.0, f64::max);
            let passed = reports.iter().all(|r| r.passed);
            if c.out.is_some() {
                let out = &cfg.paths.out;
                echo_config(out, &cfg)?;
                write_atomic(
                    &out.join("gradcheck.json"),
                    serde_json::to_string_pretty(&reports)?.as_bytes(),
                )?;
            }
            println!("{} checks, worst relative error {worst:.3e}", reports.len());
            if !passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate => {
            let out = &cfg.paths.out;
            echo_config(out, &cfg)?;
            let ds = load_dataset(&cfg.paths.data)?;
            let run = run_ablation(
                &ds.split(Split::Train),
                &ds.split(Split::Test),
                &cfg.ablation(),
                Some(out),
                |line| eprintln!("{line}"),
            )?;
            print!("{}", run.table.to_csv());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn split_cases(cfg: &RunConfig, split: Split) -> Result<Vec<atrium_core::dataset::Case>> {
    let cases = load_dataset(&cfg.paths.data)?.split(split);
    if cases.is_empty() {
        return Err(CliError::Usage(format!("dataset has no {split:?} cases")));
    }
    Ok(cases)
}

/// Explicit checkpoint list, else `level0..` found in the output directory.
fn load_cascade(cfg: &RunConfig) -> Result<Vec<Network>> {
    let paths: Vec<PathBuf> = if cfg.paths.checkpoints.is_empty() {
        (0..)
            .map(|k| cfg.paths.out.join(format!("level{k}.ckpt.json")))
            .take_while(|p| p.exists())
            .collect()
    } else {
        cfg.paths.checkpoints.clone()
    };
    if paths.is_empty() {
        return Err(CliError::Usage(format!(
            "no checkpoints: set paths.checkpoints or train into {}",
            cfg.paths.out.display()
        )));
    }
    paths.iter().map(|p| Ok(Checkpoint::load(p)?.network)).collect()
}

/// `case007_image.hdr` -> `case007`.
fn output_stem(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.strip_suffix("_image").map(str::to_string).unwrap_or(stem)
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(
        &dir.join("resolved_config.json"),
        serde_json::to_string_pretty(cfg)?.as_bytes(),
    )?;
    Ok(())
}
