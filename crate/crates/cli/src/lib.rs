//! The `opunet` command-line pipeline: synthesize data, train, evaluate,
//! predict, gradient-check and inspect Operational U-Net models.
//!
//! Every command is a plain function so it can be driven from tests; the
//! binary only parses arguments and maps [`CliError`] to an exit code.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use opunet::data::{
    load_patch, prepare, read_manifest, save_patch, split_dataset, synth_generate, Sample,
    SynthConfig,
};
use opunet::gradcheck::GroupReport;
use opunet::model::{load_checkpoint, save_checkpoint, threshold_mask};
use opunet::optim::{evaluate, train, TrainOutcome};
use opunet::{ConfusionCounts, Error, OpUNet, Rule, Scores, Tensor};

pub mod config;
pub mod error;
pub mod pgm;
pub mod sweep;

pub use config::{DataConfig, OutputConfig, RunConfig};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "opunet",
    version,
    about = "Operational U-Net active-fire segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic fire patches and 40/10/50 manifests.
    Synth(SynthArgs),
    /// Train from a JSON run configuration.
    Train(TrainArgs),
    /// Score a checkpoint on the patches of a manifest.
    Eval(EvalArgs),
    /// Segment one patch into a PGM mask.
    Predict(PredictArgs),
    /// Compare backpropagation against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the layer plan and parameter counts.
    Info(InfoArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub min_blobs: usize,
    #[arg(long, default_value_t = 4)]
    pub max_blobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Resample patches to the model's input size.
    #[arg(long)]
    pub resize: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the probability map, quantized to 0..=255.
    #[arg(long)]
    pub prob: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub resize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Layer,
    Model,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scope::Layer)]
    pub scope: Scope,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale one backward rule's gradient (negative control).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct InfoArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Run one parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a.config, out).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| ()),
        Command::Predict(a) => cmd_predict(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out).map(|_| ()),
        Command::Info(a) => cmd_info(a.config.as_deref(), out),
    }
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.min_blobs > a.max_blobs {
        return Err(CliError::Usage(format!(
            "--min-blobs {} exceeds --max-blobs {}",
            a.min_blobs, a.max_blobs
        )));
    }
    let config = SynthConfig {
        size: a.size,
        blob_count: a.min_blobs..=a.max_blobs,
    };
    let patches = synth_generate(a.seed, a.count, &config)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let mut files = Vec::with_capacity(patches.len());
    for p in &patches {
        let name = format!("{}.ls8p", p.id);
        save_patch(p, &a.out.join(&name))?;
        files.push(name);
    }
    let manifest = split_dataset(&files, a.seed)?;
    manifest.write(&a.out)?;
    writeln!(
        out,
        "wrote {} patches to {} (train {}, val {}, test {})",
        files.len(),
        a.out.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len()
    )?;
    Ok(())
}

/// Load and prepare every patch listed in a manifest.
pub fn load_samples(manifest: &Path, resize_to: Option<usize>) -> CliResult<Vec<Sample>> {
    let paths = read_manifest(manifest)?;
    paths
        .iter()
        .map(|p| Ok(prepare(&load_patch(p)?, resize_to)?))
        .collect()
}

fn check_sizes(samples: &[Sample], model: &OpUNet, manifest: &Path) -> CliResult<()> {
    let s = model.config().input_size;
    match samples.iter().find(|x| x.input.shape()[1..] != [s, s]) {
        Some(bad) => Err(Error::Shape {
            op: "load_samples",
            detail: format!(
                "patch {} in {} is {:?}, model expects {s}x{s} (use resizing to resample)",
                bad.id,
                manifest.display(),
                &bad.input.shape()[1..]
            ),
        }
        .into()),
        None => Ok(()),
    }
}

pub fn cmd_train(config_path: &Path, out: &mut dyn Write) -> CliResult<TrainOutcome> {
    let rc = RunConfig::load(config_path)?;
    let data = rc
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("config has no \"data\" section".into()))?;
    let resize = data.resize.then_some(rc.model.input_size);
    let train_set = load_samples(&data.train_manifest, resize)?;
    let val_set = load_samples(&data.val_manifest, resize)?;
    let mut model = OpUNet::build(&rc.model, rc.seed)?;
    check_sizes(&train_set, &model, &data.train_manifest)?;
    check_sizes(&val_set, &model, &data.val_manifest)?;

    let mut log = String::new();
    let mut write_err = None;
    let outcome = train(&mut model, &train_set, &val_set, &rc.train, |record| {
        log.push_str(&format!("{record}\n"));
        if let Err(e) = writeln!(out, "{record}") {
            write_err.get_or_insert(e);
        }
    });
    fs::write(&rc.output.log, &log).map_err(|e| CliError::io(&rc.output.log, e))?;
    let outcome = outcome?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    save_checkpoint(&model, &rc.output.checkpoint)?;
    writeln!(
        out,
        "best epoch {} of {}: {}\ncheckpoint {}",
        outcome.best_epoch,
        outcome.epochs.len(),
        outcome.best,
        rc.output.checkpoint.display()
    )?;
    Ok(outcome)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<Scores> {
    let model = load_checkpoint(&a.checkpoint)?;
    let samples = load_samples(&a.manifest, a.resize.then_some(model.config().input_size))?;
    check_sizes(&samples, &model, &a.manifest)?;
    let counts = if samples.is_empty() {
        ConfusionCounts::new()
    } else {
        evaluate(&model, &samples, a.threshold, 8)?
    };
    let scores = counts.scores();
    if scores.degenerate {
        eprintln!(
            "warning: degenerate scores (a zero denominator over {} pixels)",
            counts.total()
        );
    }
    writeln!(out, "P\tR\tIoU\tF1\n{}", scores.report_line())?;
    Ok(scores)
}

pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let sample = prepare(
        &load_patch(&a.input)?,
        a.resize.then_some(model.config().input_size),
    )?;
    check_sizes(std::slice::from_ref(&sample), &model, &a.input)?;
    let (h, w) = (sample.input.shape()[1], sample.input.shape()[2]);
    let x = sample.input.reshape([1, 3, h, w])?;
    let probs = model.forward(&x)?;
    let mask = threshold_mask(&probs, a.threshold)?;
    let pixels: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v == 1.0 { 255 } else { 0 })
        .collect();
    pgm::write_pgm(&a.out, w, h, &pixels)?;
    if let Some(path) = &a.prob {
        let levels: Vec<u8> = probs.data().iter().map(|&p| pgm::quantize(p)).collect();
        pgm::write_pgm(path, w, h, &levels)?;
    }
    let fire = pixels.iter().filter(|&&p| p == 255).count();
    writeln!(
        out,
        "{}: {fire} of {} pixels fire -> {}",
        sample.id,
        w * h,
        a.out.display()
    )?;
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult<Vec<GroupReport>> {
    let fault = match &a.corrupt {
        None => None,
        Some(name) => {
            let rule = Rule::from_name(name)
                .ok_or_else(|| CliError::Usage(format!("unknown rule {name:?}")))?;
            Some((rule, 1.5))
        }
    };
    let (reports, tolerance) = match a.scope {
        Scope::Layer => (sweep::layer_sweep(a.seed, fault)?, sweep::LAYER_TOLERANCE),
        Scope::Model => (sweep::model_sweep(a.seed, fault)?, sweep::MODEL_TOLERANCE),
    };
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.max_rel_error < tolerance;
        writeln!(
            out,
            "{}\t{:.3e}\t{}",
            r.name,
            r.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        )?;
        if !ok {
            failed.push(r.name.clone());
        }
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    writeln!(
        out,
        "{} groups, worst {worst:.3e}, tolerance {tolerance:e}",
        reports.len()
    )?;
    if failed.is_empty() {
        Ok(reports)
    } else {
        let mut names = failed
            .iter()
            .take(3)
            .cloned()
            .collect::<Vec<_>>()
            .join(", ");
        if failed.len() > 3 {
            names.push_str(&format!(" and {} more", failed.len() - 3));
        }
        Err(CliError::GradcheckFailed(names))
    }
}

/// `4131445` → `"4,131,445"`.
pub fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut s = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            s.push(',');
        }
        s.push(c);
    }
    s
}

pub fn cmd_info(config: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let model_config = match config {
        Some(p) => RunConfig::load(p)?.model,
        None => Default::default(),
    };
    let model = OpUNet::<f32>::skeleton(&model_config)?;
    let q = model_config.q;
    writeln!(
        out,
        "layer\tkind\tchannels\tkernel\tweights\tresolution\tparams"
    )?;
    for row in model.summary() {
        let (kind, weights) = if row.transposed {
            (
                "tconv",
                format!(
                    "{q}x{}x{}x{k}x{k}",
                    row.in_channels,
                    row.out_channels,
                    k = row.kernel
                ),
            )
        } else {
            (
                "conv",
                format!(
                    "{q}x{}x{}x{k}x{k}",
                    row.out_channels,
                    row.in_channels,
                    k = row.kernel
                ),
            )
        };
        writeln!(
            out,
            "{}\t{kind}\t{}->{}\t{}\t{weights}\t{}->{}\t{}",
            row.name,
            row.in_channels,
            row.out_channels,
            row.kernel,
            row.in_resolution,
            row.out_resolution,
            group_thousands(row.params)
        )?;
    }
    let total = model.count_params();
    writeln!(
        out,
        "total\t{} (≈{:.2}M)",
        group_thousands(total),
        total as f64 / 1e6
    )?;
    Ok(())
}

/// Re-threshold a written mask: PGM bytes back to a 0/1 tensor.
pub fn mask_from_pgm(path: &Path) -> CliResult<Tensor<f32>> {
    let (w, h, pixels) = pgm::read_pgm(path)?;
    Ok(Tensor::new(
        [1, 1, h, w],
        pixels.iter().map(|&p| (p == 255) as u8 as f32).collect(),
    )?)
}
