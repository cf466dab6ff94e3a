//! Command-line entry points: dataset generation, training, single-sample
//! calibration, evaluation, and gradient checking.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

use crate::config::{ConfigError, RunConfig};
use crate::eval::{dump_debug_images, evaluate};
use crate::fragments::{corrupted_control, registry, run_fragments, DEFAULT_CHECK_SEED};
use crate::fusion::iterate_calibration;
use crate::geometry::{calibration_error, rad_to_deg, sample_miscalibration, EulerAngles};
use crate::kernels::checkpoint::Checkpoint;
use crate::model::{CalibNet, ModelError, SceneParams};
use crate::synthdata::{
    generate_dataset, read_dataset, write_dataset, DatasetError, GenConfig, RadarNoiseModel,
};
use crate::train::{TrainError, TrainInputs, Trainer};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("invalid noise profile '{0}' (expected standard, clean, or heavy)")]
    BadProfile(String),
    #[error("{0}")]
    Data(#[from] DatasetError),
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Checkpoint(#[from] crate::kernels::checkpoint::CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("sample index {0} out of range ({1} samples)")]
    BadSampleIndex(usize, usize),
    #[error("invalid range '{0}' (expected r1 or r2)")]
    BadRange(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::BadProfile(_) | CliError::BadRange(_) => 2,
            CliError::Data(_)
            | CliError::Model(_)
            | CliError::Checkpoint(_)
            | CliError::Io(_)
            | CliError::BadSampleIndex(..) => 3,
            CliError::GradCheck(_) => 4,
            CliError::Train(e) => match e {
                TrainError::NumericalFailure { .. } => 4,
                _ => 3,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "radcam", about = "Online radar-camera extrinsic calibration on synthetic scenes", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset split.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Calibrate a single sample and print the iteration trace.
    Calibrate(CalibrateArgs),
    /// Evaluate a checkpoint over a dataset split.
    Eval(EvalArgs),
    /// Finite-difference checks of every registered differentiable fragment.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "standard")]
    pub noise_profile: String,
    #[arg(long, default_value_t = 4000)]
    pub lidar_points: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Validation split directory; defaults to a 10% holdout of --data.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Resume from a training-state checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory holding the sample.
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Initial miscalibration rotation range, degrees.
    #[arg(long, default_value_t = 10.0)]
    pub init_rot: f64,
    /// Initial miscalibration translation range, meters.
    #[arg(long, default_value_t = 0.25)]
    pub init_trans: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Miscalibration range: r1 (10 deg, 0.25 m) or r2 (20 deg, 1.5 m).
    #[arg(long, default_value = "r1")]
    pub range: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the full JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Dump debug rasters and attention heatmaps for the first samples.
    #[arg(long)]
    pub dump_debug: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check a single fragment by name; all when omitted.
    #[arg(long)]
    pub module: Option<String>,
    /// Tolerance override for every fragment.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_CHECK_SEED)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let noise = RadarNoiseModel::profile(&args.noise_profile)
        .ok_or_else(|| CliError::BadProfile(args.noise_profile.clone()))?;
    let config = GenConfig {
        noise,
        lidar_points: args.lidar_points,
        ..GenConfig::default()
    };
    let samples = generate_dataset(args.seed, args.samples, &config);
    let manifest = write_dataset(&args.out, args.seed, &config, &samples)?;
    let radar_total: usize = manifest.samples.iter().map(|s| s.radar_points).sum();
    let lidar_total: usize = manifest.samples.iter().map(|s| s.lidar_points).sum();
    println!(
        "wrote {} samples to {} (radar points {}, lidar points {}, profile {})",
        manifest.samples.len(),
        args.out.display(),
        radar_total,
        lidar_total,
        args.noise_profile
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let (manifest, all) = read_dataset(&args.data)?;
    let scene = SceneParams::from_manifest(&manifest);
    let (train_set, val_set): (Vec<_>, Vec<_>) = match &args.val_data {
        Some(dir) => {
            let (_, val) = read_dataset(dir)?;
            (all, val)
        }
        None => {
            let holdout = (all.len() / 10).max(1).min(all.len().saturating_sub(1));
            let split = all.len() - holdout;
            let mut train = all;
            let val = train.split_off(split);
            (train, val)
        }
    };
    let trainer = Trainer {
        config: &config,
        ledger: Some(args.out.with_extension("ledger.jsonl")),
        best_path: Some(args.out.clone()),
        state_path: Some(args.out.with_extension("state")),
        resume_from: args.resume.clone(),
        quiet: false,
    };
    let outcome = trainer.run(&TrainInputs {
        train: &train_set,
        val: &val_set,
        scene,
    })?;
    println!(
        "trained {} epochs; best val (epoch {}) saved to {}",
        outcome.records.len(),
        outcome.best_epoch,
        args.out.display()
    );
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let model = CalibNet::from_checkpoint(&Checkpoint::load(&args.ckpt)?)?;
    let (manifest, samples) = read_dataset(&args.sample)?;
    let data = samples
        .get(args.index)
        .ok_or(CliError::BadSampleIndex(args.index, samples.len()))?;
    let scene = SceneParams::from_manifest(&manifest);
    let delta = sample_miscalibration(args.init_rot, args.init_trans, args.seed);
    let t_init = data.t_gt.compose(&delta);
    let initial = calibration_error(&t_init, &data.t_gt);
    println!(
        "sample {}  initial error: rot {:.3} deg  trans {:.2} cm",
        data.id,
        rad_to_deg(initial.mean_rotation()),
        initial.mean_translation() * 100.0
    );
    let prepared = model.prepare_sample(data, scene);
    let pred = iterate_calibration(&model, &prepared, t_init, model.config.iterations);
    for (k, (step, t)) in pred.steps.iter().zip(&pred.t_after).enumerate() {
        let err = calibration_error(t, &data.t_gt);
        let euler = EulerAngles::from_matrix(&t.rotation);
        println!(
            "iter {}: step rot {:.4} rad, trans {:.3} m -> estimate euler ({:.3}, {:.3}, {:.3}) deg, t ({:.3}, {:.3}, {:.3}) m | err rot {:.3} deg trans {:.2} cm",
            k + 1,
            step.rot_vec.angle(),
            step.trans.norm(),
            rad_to_deg(euler.roll),
            rad_to_deg(euler.pitch),
            rad_to_deg(euler.yaw),
            t.translation.x,
            t.translation.y,
            t.translation.z,
            rad_to_deg(err.mean_rotation()),
            err.mean_translation() * 100.0
        );
    }
    let final_err = calibration_error(&pred.final_t, &data.t_gt);
    println!(
        "final error: rot {:.3} deg  trans {:.2} cm",
        rad_to_deg(final_err.mean_rotation()),
        final_err.mean_translation() * 100.0
    );
    Ok(())
}

fn parse_range(s: &str) -> Result<(f64, f64), CliError> {
    match s.to_ascii_lowercase().as_str() {
        "r1" => Ok(crate::geometry::RANGE_R1),
        "r2" => Ok(crate::geometry::RANGE_R2),
        other => Err(CliError::BadRange(other.to_string())),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let range = parse_range(&args.range)?;
    let model = CalibNet::from_checkpoint(&Checkpoint::load(&args.ckpt)?)?;
    let (manifest, samples) = read_dataset(&args.data)?;
    let scene = SceneParams::from_manifest(&manifest);
    let report = evaluate(&model, &samples, scene, range, args.seed);
    print!("{}", report.table());
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_json())?;
        println!("report written to {}", path.display());
    }
    if let Some(dir) = &args.dump_debug {
        for data in samples.iter().take(2) {
            let mseed = crate::eval::miscal_seed(args.seed, data.id);
            let t_init = data
                .t_gt
                .compose(&sample_miscalibration(range.0, range.1, mseed));
            dump_debug_images(&model, data, scene, &t_init, &dir.join(format!("sample_{:05}", data.id)))?;
        }
        println!("debug dumps written to {}", dir.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    if let Some(name) = &args.module {
        if !registry().iter().any(|s| s.name == name) {
            let names: Vec<_> = registry().iter().map(|s| s.name).collect();
            return Err(CliError::GradCheck(format!(
                "unknown fragment '{name}'; available: {}",
                names.join(", ")
            )));
        }
    }
    let reports = run_fragments(args.module.as_deref(), args.tol, args.seed);
    let mut all_passed = true;
    for report in &reports {
        println!("{report}");
        all_passed &= report.passed();
    }
    // Negative control: a deliberately corrupted backward must fail.
    let control = corrupted_control(args.seed);
    println!("{control}  (negative control, expected FAIL)");
    if control.passed() {
        return Err(CliError::GradCheck(
            "negative control unexpectedly passed".into(),
        ));
    }
    if !all_passed {
        let failures: Vec<_> = reports
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.fragment.clone())
            .collect();
        return Err(CliError::GradCheck(format!(
            "fragments failed: {}",
            failures.join(", ")
        )));
    }
    Ok(())
}
