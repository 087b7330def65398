//! `projnet`: verification, parameter audits, pretraining, transfer, and
//! projection from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use projnet::format::{load_model, save_model};
use projnet::harness::experiment::DEFAULT_EPOCHS;
use projnet::harness::{
    gen_synthetic, load_idx, run_experiment, Augmentation, Dataset, Schedule, Split, Task, TrainConfig,
};
use projnet::model::{build_backbone, stream_seed, ArchSpec};
use projnet::projection::{count_params, project_model, Regime};
use projnet::verify::run_full_suite;

#[derive(Parser)]
#[command(name = "projnet", version, about = "Generalized FFN/CNN nodes and model projection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the verification suite and write a JSON report
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the trainable/frozen parameter audit of a model
    Params {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Accepted for uniformity; the audit is deterministic
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a backbone from an architecture file and train it from scratch
    Pretrain {
        #[arg(long)]
        arch: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EPOCHS)]
        epochs: usize,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Replace the head of a pretrained model and train it under a regime
    Transfer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, required_unless_present = "two_stage")]
        regime: Option<RegimeArg>,
        #[arg(long, value_parser = ["lr+ft", "proj+ft", "proj+proj"])]
        two_stage: Option<String>,
        #[arg(long, default_value_t = DEFAULT_EPOCHS, conflicts_with = "two_stage")]
        epochs: usize,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        metrics: PathBuf,
        /// Where to save the trained model
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Project every separable node of a model and save the result
    Project {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Accepted for uniformity; projection is deterministic
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RegimeArg {
    Lr,
    Ft,
    Projection,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Lr => Regime::Lr,
            RegimeArg::Ft => Regime::Ft,
            RegimeArg::Projection => Regime::Projection,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataSource {
    /// Procedural images: task A for pretraining, shifted task B for transfer
    Synthetic,
    /// MNIST-style IDX files given by the --train-*/--test-* flags
    Idx,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum)]
    data: DataSource,
    #[arg(long)]
    train_images: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// Synthetic training-set size (default 10000 for pretrain, 2000 for transfer)
    #[arg(long)]
    train_samples: Option<usize>,
    /// Synthetic test-set size
    #[arg(long, default_value_t = 1000)]
    test_samples: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = projnet::harness::experiment::DEFAULT_BATCH)]
    batch_size: usize,
    /// Horizontal flips with probability 0.5
    #[arg(long)]
    hflip: bool,
    /// Keep the training set in file order
    #[arg(long)]
    no_shuffle: bool,
    /// Write 0 in the wall_ms column so the CSV depends only on the inputs
    #[arg(long)]
    no_timing: bool,
}

impl TrainArgs {
    fn config(&self, schedule: Schedule, seed: u64) -> TrainConfig {
        let mut tc = TrainConfig::new(schedule, seed);
        tc.batch_size = self.batch_size;
        tc.augmentation = if self.hflip { Augmentation::Hflip } else { Augmentation::None };
        tc.shuffle = !self.no_shuffle;
        tc.timing = !self.no_timing;
        tc
    }
}

/// Loads the train/test pair. Synthetic sets use `task` with seeds derived
/// from `seeds`.
fn load_data(args: &DataArgs, task: Task, default_train: usize, seeds: [u64; 2]) -> Result<(Dataset, Dataset)> {
    match args.data {
        DataSource::Synthetic => {
            let split = if task == Task::A { Split::Pretrain } else { Split::Train };
            let n = args.train_samples.unwrap_or(default_train);
            let train = gen_synthetic(task, n, seeds[0], split)?;
            let test = gen_synthetic(task, args.test_samples, seeds[1], Split::Test)?;
            Ok((train, test))
        }
        DataSource::Idx => {
            let path = |p: &Option<PathBuf>, flag: &str| p.clone().with_context(|| format!("--data idx needs {flag}"));
            let train = load_idx(
                path(&args.train_images, "--train-images")?,
                path(&args.train_labels, "--train-labels")?,
                Split::Train,
            )?;
            let test = load_idx(
                path(&args.test_images, "--test-images")?,
                path(&args.test_labels, "--test-labels")?,
                Split::Test,
            )?;
            Ok((train, test))
        }
    }
}

fn load(path: &Path) -> Result<projnet::model::Model> {
    load_model(path).with_context(|| format!("loading {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify { seed, out } => {
            let report = run_full_suite(seed)?;
            let checks = report.checks.iter().map(|r| (r, if r.pass { "PASS" } else { "FAIL" }));
            let controls = report
                .controls
                .iter()
                .map(|r| (r, if r.pass { "CONTROL PASSED (unexpected)" } else { "CONTROL FAILED (expected)" }));
            for (row, status) in checks.chain(controls) {
                println!(
                    "{:<5} {:<40} n={:<5} max={:.3e} tol={:.1e}",
                    status, row.name, row.instances, row.max_deviation, row.tolerance
                );
            }
            println!("overall: {}", if report.overall_pass { "PASS" } else { "FAIL" });
            if let Some(path) = out {
                write_file(&path, &report.to_json()?)?;
            }
            Ok(report.overall_pass)
        }
        Command::Params { model, csv, seed: _ } => {
            let model = load(&model)?;
            let audit = count_params(&model);
            println!("{audit}");
            if let Some(path) = csv {
                write_file(&path, &audit.to_csv_string()?)?;
            }
            Ok(true)
        }
        Command::Pretrain { arch, data, out, epochs, metrics, train } => {
            let text = std::fs::read_to_string(&arch).with_context(|| format!("reading {}", arch.display()))?;
            let mut spec: ArchSpec = serde_json::from_str(&text).context("parsing architecture file")?;
            let seed = train.seed;
            spec.seed = stream_seed(&[seed, 5]);
            let (train_set, test_set) =
                load_data(&data, Task::A, 10_000, [stream_seed(&[seed, 1]), stream_seed(&[seed, 4])])?;
            let model = build_backbone(&spec)?;
            let tc = train.config(Schedule::Single { regime: Regime::Ft, epochs }, stream_seed(&[seed, 7]));
            println!("{}", serde_json::to_string(&tc)?);
            let result = run_experiment(&tc, model, &train_set, &test_set)?;
            if let Some(path) = metrics {
                result.log.save_csv(&path)?;
            }
            save_model(&result.model, &out).with_context(|| format!("saving {}", out.display()))?;
            if let Some(last) = result.log.final_row() {
                println!("final test accuracy {:.4}", last.test_acc);
            }
            Ok(true)
        }
        Command::Transfer { model, regime, two_stage, epochs, data, metrics, out, train } => {
            let schedule = match (&two_stage, regime) {
                (Some(name), r) => {
                    let s = Schedule::two_stage(name)?;
                    if let (Some(r), Schedule::TwoStage { first, .. }) = (r, &s) {
                        if Regime::from(r) != *first {
                            bail!(
                                "--regime {} does not match the first stage of --two-stage {name}",
                                Regime::from(r).as_str()
                            );
                        }
                    }
                    s
                }
                (None, Some(r)) => Schedule::Single { regime: r.into(), epochs },
                (None, None) => bail!("either --regime or --two-stage is required"),
            };
            let seed = train.seed;
            let (train_set, test_set) =
                load_data(&data, Task::BShifted, 2_000, [stream_seed(&[seed, 2]), stream_seed(&[seed, 3])])?;
            let backbone = load(&model)?.with_new_head(train_set.classes, stream_seed(&[seed, 6]))?;
            let tc = train.config(schedule, stream_seed(&[seed, 8]));
            println!("{}", serde_json::to_string(&tc)?);
            let result = run_experiment(&tc, backbone, &train_set, &test_set)?;
            result.log.save_csv(&metrics)?;
            if let Some(path) = out {
                save_model(&result.model, &path).with_context(|| format!("saving {}", path.display()))?;
            }
            if let Some(last) = result.log.final_row() {
                println!("final test accuracy {:.4}", last.test_acc);
            }
            Ok(true)
        }
        Command::Project { model, out, seed: _ } => {
            let projected = project_model(load(&model)?);
            save_model(&projected, &out).with_context(|| format!("saving {}", out.display()))?;
            println!("{}", count_params(&projected));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
