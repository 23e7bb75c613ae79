//! `rsan`: train, evaluate, predict, generate synthetic data, self-test.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use rsan::data::{crop_to, load_gray, load_image, pad_to, DatasetSpec, Sample};
use rsan::metrics::{evaluate, render_table, score_predictions, write_csv, Aggregation, DEFAULT_THRESHOLD};
use rsan::net::SIZE_MULTIPLE;
use rsan::synth::{synth_vessels, SynthConfig};
use rsan::train::{train, write_loss_csv, TrainConfig};
use rsan::{checkpoint, selftest, DropBlockConfig, Error, Network, NetworkConfig, Tensor, Variant};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "rsan",
    version,
    about = "Residual spatial attention network for vessel segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on the training split of a dataset manifest.
    Train(TrainArgs),
    /// Score a checkpoint, or saved probability maps, against a dataset split.
    Eval(EvalArgs),
    /// Write probability and binary mask PNGs at each input's original size.
    Predict(PredictArgs),
    /// Generate a synthetic vessel dataset directory.
    Synth(SynthArgs),
    /// Run the built-in verification suite.
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with any of the flag names below (underscored); flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// backbone, backbone_dropblock or rsan.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    keep_prob: Option<f64>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    phase1_epochs: Option<usize>,
    #[arg(long)]
    lr_phase1: Option<f64>,
    #[arg(long)]
    lr_phase2: Option<f64>,
    /// Training images held out to pick the best checkpoint.
    #[arg(long)]
    validation_count: Option<usize>,
    /// Width of the first stage; later stages double it.
    #[arg(long)]
    base_channels: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    variant: Option<Variant>,
    keep_prob: Option<f64>,
    block_size: Option<usize>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    phase1_epochs: Option<usize>,
    lr_phase1: Option<f64>,
    lr_phase2: Option<f64>,
    validation_count: Option<usize>,
    base_channels: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Pooled,
    MeanPerImage,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of `<id>_prob.png` maps at original size, as written by `predict`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "pooled")]
    aggregation: AggregationArg,
    /// Writes `metrics.csv` here as well as printing the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Predict every image of this split instead of the listed files.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Standard deviation of additive pixel noise.
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    /// Trailing images assigned to the test split.
    #[arg(long, default_value_t = 0)]
    test_count: usize,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } => EXIT_NUMERICAL,
            Error::Io(_) | Error::Image { .. } | Error::UnsupportedFormat(_) => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn resolve_train(a: TrainArgs) -> Result<(NetworkConfig, TrainConfig, PathBuf, PathBuf), Failure> {
    let file: TrainFile = match &a.config {
        Some(p) => {
            serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| config_error(format!("{}: {e}", p.display())))?
        }
        None => TrainFile::default(),
    };
    let manifest = a
        .manifest
        .or(file.manifest)
        .ok_or_else(|| config_error("--manifest is required"))?;
    let out = a.out.or(file.out).ok_or_else(|| config_error("--out is required"))?;
    let seed = a.seed.or(file.seed).ok_or_else(|| config_error("--seed is required"))?;
    let variant = a.variant.or(file.variant).unwrap_or(Variant::Rsan);
    let defaults = NetworkConfig::new(variant);
    let mut keep_prob = a.keep_prob.or(file.keep_prob).unwrap_or(defaults.dropblock.keep_prob);
    if variant == Variant::Backbone && keep_prob != 1.0 {
        eprintln!("note: backbone has no DropBlock, using keep_prob 1");
        keep_prob = 1.0;
    }
    let block_size = a
        .block_size
        .or(file.block_size)
        .unwrap_or(defaults.dropblock.block_size);
    let base = a
        .base_channels
        .or(file.base_channels)
        .unwrap_or(defaults.stage_channels[0]);
    if base == 0 {
        return Err(config_error("--base-channels must be positive"));
    }
    let net = NetworkConfig {
        stage_channels: [base, 2 * base, 4 * base, 8 * base],
        dropblock: DropBlockConfig::new(block_size, keep_prob)?,
        ..defaults
    };
    net.validate()?;
    let d = TrainConfig::drive();
    let cfg = TrainConfig {
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        total_epochs: a.epochs.or(file.epochs).unwrap_or(d.total_epochs),
        phase1_epochs: a.phase1_epochs.or(file.phase1_epochs).unwrap_or(d.phase1_epochs),
        lr_phase1: a.lr_phase1.or(file.lr_phase1).unwrap_or(d.lr_phase1),
        lr_phase2: a.lr_phase2.or(file.lr_phase2).unwrap_or(d.lr_phase2),
        validation_count: a
            .validation_count
            .or(file.validation_count)
            .unwrap_or(d.validation_count),
        seed,
        ..d
    };
    cfg.validate()?;
    Ok((net, cfg, manifest, out))
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let (net_cfg, cfg, manifest, out) = resolve_train(a)?;
    let mut data = DatasetSpec::load(&manifest)?;
    if cfg.validation_count > 0 {
        data = data.with_validation(cfg.seed, cfg.validation_count)?;
    }
    let (train_set, val_set) = (data.select(&data.train), data.select(&data.val));
    let mut net = Network::<f32>::build(net_cfg.clone(), cfg.seed)?;
    eprintln!(
        "{} ({} parameters) on {}: {} train / {} validation images",
        net_cfg.variant,
        net.parameter_count(),
        data.name,
        train_set.len(),
        val_set.len()
    );
    let total = cfg.total_epochs;
    let outcome = train(&mut net, &train_set, &val_set, &cfg, |r| {
        let val = r.val_loss.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        eprintln!(
            "epoch {}/{total} lr {:.0e} train {:.6} val {val}",
            r.epoch + 1,
            r.lr,
            r.train_loss
        );
    });
    let outcome = outcome.map_err(|e| {
        if matches!(e, Error::NonFiniteLoss { .. }) {
            eprintln!("training aborted: the loss left the finite range; try a lower --lr-phase1");
        }
        e
    })?;
    fs::create_dir_all(&out)?;
    write_loss_csv(
        &outcome.history,
        BufWriter::new(fs::File::create(out.join("loss.csv"))?),
    )?;
    checkpoint::save(&net, out.join("final.ckpt"))?;
    if let Some(best) = &outcome.best {
        checkpoint::save(&best.network, out.join("best.ckpt"))?;
        eprintln!("best validation loss {:.6} at epoch {}", best.val_loss, best.epoch + 1);
    }
    let resolved = serde_json::json!({ "network": net_cfg, "train": cfg, "manifest": manifest });
    fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&resolved).map_err(Error::from)?,
    )?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn split_samples(data: &DatasetSpec, split: Split) -> Vec<Sample> {
    match split {
        Split::Train => data.select(&[data.train.as_slice(), &data.val].concat()),
        Split::Test => data.select(&data.test),
        Split::All => data.samples.clone(),
    }
}

fn check_threshold(t: f64) -> Outcome {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(config_error(format!("--threshold must be in [0, 1], got {t}")))
    }
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    check_threshold(a.threshold)?;
    let data = DatasetSpec::load(&a.manifest)?;
    let samples = split_samples(&data, a.split);
    if samples.is_empty() {
        return Err(config_error("the selected split is empty"));
    }
    let aggregation = match a.aggregation {
        AggregationArg::Pooled => Aggregation::Pooled,
        AggregationArg::MeanPerImage => Aggregation::MeanPerImage,
    };
    let eval = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => evaluate(&checkpoint::load(ckpt)?, &samples, a.threshold, aggregation)?,
        (None, Some(dir)) => {
            let maps = samples
                .iter()
                .map(|s| load_gray(dir.join(format!("{}_prob.png", s.id))))
                .collect::<rsan::Result<Vec<_>>>()?;
            score_predictions(&samples, &maps, a.threshold, aggregation)?
        }
        (None, None) => return Err(config_error("pass --checkpoint or --predictions")),
    };
    print!("{}", render_table(&eval));
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write_csv(&eval, BufWriter::new(fs::File::create(out.join("metrics.csv"))?))?;
    }
    Ok(())
}

/// Pads to the next size the encoder accepts, predicts, crops back.
fn predict_original(net: &Network<f32>, image: &Tensor, original: (usize, usize)) -> rsan::Result<Tensor> {
    let round_up = |v: usize| v.div_ceil(SIZE_MULTIPLE).max(2) * SIZE_MULTIPLE;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let padded = pad_to(image, (round_up(h), round_up(w)))?;
    crop_to(&net.predict(&padded)?, original)
}

fn write_outputs(out: &Path, stem: &str, prob: &Tensor, threshold: f64) -> rsan::Result<()> {
    rsan::data::save_gray(out.join(format!("{stem}_prob.png")), prob)?;
    let binary = prob.map(|p| if p as f64 >= threshold { 1.0 } else { 0.0 });
    rsan::data::save_gray(out.join(format!("{stem}_mask.png")), &binary)
}

fn cmd_predict(a: PredictArgs) -> Outcome {
    check_threshold(a.threshold)?;
    let net = checkpoint::load(&a.checkpoint)?;
    fs::create_dir_all(&a.out)?;
    if let Some(manifest) = &a.manifest {
        if !a.images.is_empty() {
            return Err(config_error("pass either --manifest or image files, not both"));
        }
        let data = DatasetSpec::load(manifest)?;
        for s in split_samples(&data, a.split) {
            let prob = crop_to(&net.predict(&s.image)?, s.original_size)?;
            write_outputs(&a.out, &s.id, &prob, a.threshold)?;
        }
        return Ok(());
    }
    if a.images.is_empty() {
        return Err(config_error("no images given"));
    }
    let mut failures: Option<Failure> = None;
    let mut written = 0;
    for path in &a.images {
        let stem = path
            .file_stem()
            .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let result = load_image(path).and_then(|img| {
            let original = (img.shape()[0], img.shape()[1]);
            let prob = predict_original(&net, &img, original)?;
            write_outputs(&a.out, &stem, &prob, a.threshold)
        });
        match result {
            Ok(()) => written += 1,
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                failures.get_or_insert(e.into());
            }
        }
    }
    match failures {
        Some(f) if written == 0 => Err(f),
        _ => Ok(()),
    }
}

fn cmd_synth(a: SynthArgs) -> Outcome {
    let data = synth_vessels(&SynthConfig {
        noise_level: a.noise,
        test_count: a.test_count,
        ..SynthConfig::new(a.count, a.height, a.width, a.seed)
    })?;
    let manifest = data.save(&a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_selftest() -> Outcome {
    let outcomes = selftest::run_all()?;
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("{failed} checks failed"),
        })
    }
}
