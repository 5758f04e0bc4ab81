use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moad::gradcheck::{run_suite, DEFAULT_INSTANCES};
use moad::harness::cv::{ablate, format_table, run_cv};
use moad::harness::heatmap::export_heatmap;
use moad::harness::synth::{write_synthetic, SyntheticSpec};
use moad::harness::train::{train, TrainedModel};
use moad::harness::{Dataset, RunConfig, Task};
use moad::{Error, Result};

#[derive(Parser)]
#[command(name = "moad", version, about = "Dual-fusion multimodal MIL: data, training and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-signal synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        slides: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Omic groups; patch groups are classes / omic groups.
        #[arg(long, default_value_t = 2)]
        omic_groups: usize,
        #[arg(long, default_value = "subtype")]
        task: String,
        #[arg(long, default_value_t = 64)]
        omic_features: usize,
        #[arg(long, default_value_t = 32)]
        patch_dim: usize,
        #[arg(long, default_value_t = 50)]
        min_patches: usize,
        #[arg(long, default_value_t = 200)]
        max_patches: usize,
        #[arg(long, default_value_t = 0.1)]
        signal_fraction: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
    },
    /// Cross-validate, then fit a final model on all slides.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip cross-validation.
        #[arg(long)]
        no_cv: bool,
    },
    /// Score a trained model on a dataset.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Cross-validate early/late/dual × {moab, cat, kp}.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Export per-patch attention for one slide.
    Heatmap {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        slide: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pgm: bool,
        /// Dataset directory; defaults to the one recorded at training time.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
    },
}

fn parse_task(s: &str) -> Result<Task> {
    match s {
        "subtype" => Ok(Task::Subtype),
        "survival" => Ok(Task::Survival),
        other => Err(Error::Config(format!("unknown task '{other}'"))),
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serialisable"));
}

fn write_report(path: &Path, report: &moad::harness::MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("serialisable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            classes,
            slides,
            seed,
            omic_groups,
            task,
            omic_features,
            patch_dim,
            min_patches,
            max_patches,
            signal_fraction,
            noise,
        } => {
            if omic_groups == 0 || classes % omic_groups != 0 {
                return Err(Error::Parameter(format!(
                    "{classes} classes are not divisible into {omic_groups} omic groups"
                )));
            }
            let spec = SyntheticSpec {
                task: parse_task(&task)?,
                classes,
                omic_groups,
                patch_groups: classes / omic_groups,
                slides,
                omic_features,
                patch_dim,
                min_patches,
                max_patches,
                signal_fraction,
                noise,
                seed,
                ..SyntheticSpec::default()
            };
            let data = write_synthetic(&spec, &out)?;
            println!("wrote {} slides to {}", data.bags.len(), out.display());
        }
        Command::Train { config, data, out, no_cv } => {
            let cfg = RunConfig::load(&config)?;
            let ds = Dataset::load(&data)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            if !no_cv {
                let cv = run_cv(&cfg, &ds)?;
                for (k, fold) in cv.folds.iter().enumerate() {
                    fold.model.save(&out.join(format!("fold_{k}")))?;
                }
                write_report(&out.join("report.json"), &cv.report)?;
                print_json(&cv.report);
            }
            let all: Vec<usize> = (0..ds.len()).collect();
            let (mut model, log) = train(&cfg, &ds, &all)?;
            model.meta.data_dir = Some(data.canonicalize().unwrap_or(data));
            model.save(&out)?;
            log::info!("final model: {} steps, last loss {:.6}", log.steps, log.final_loss);
        }
        Command::Eval { run, data } => {
            let model = TrainedModel::load(&run)?;
            let ds = Dataset::load(&data)?;
            let all: Vec<usize> = (0..ds.len()).collect();
            print_json(&model.evaluate(&ds, &all)?.metrics);
        }
        Command::Ablate { config, data } => {
            let cfg = RunConfig::load(&config)?;
            let ds = Dataset::load(&data)?;
            let rows = ablate(&cfg, &ds)?;
            print!("{}", format_table(&rows));
        }
        Command::Heatmap {
            run,
            slide,
            out,
            pgm,
            data,
        } => {
            let model = TrainedModel::load(&run)?;
            let dir = data
                .or_else(|| model.meta.data_dir.clone())
                .ok_or_else(|| Error::Config("no --data given and the run records no dataset".into()))?;
            let ds = Dataset::load(&dir)?;
            let sample = ds
                .find(&slide)
                .ok_or_else(|| Error::Data(format!("slide '{slide}' not in {}", dir.display())))?;
            let summary = export_heatmap(&model, sample, &out, pgm)?;
            println!(
                "{} patches, attention sum {:.12}{}",
                summary.patches,
                summary.attention_sum,
                if summary.wrote_pgm { ", PGM written" } else { "" }
            );
        }
        Command::Gradcheck { seed, instances } => {
            let report = run_suite(seed, instances)?;
            for case in &report.cases {
                println!(
                    "{:<24} {:>3} instances  max rel err {:.3e}  {}",
                    case.name,
                    case.instances,
                    case.max_rel_error,
                    if case.passed { "ok" } else { "FAIL" }
                );
            }
            println!("{} cases in {:.2}s", report.cases.len(), report.seconds);
            if !report.all_passed() {
                return Err(Error::Numerical("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
