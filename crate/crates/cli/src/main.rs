//! `pitsep`: synthetic mixing, training, separation and evaluation from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use pitsep_core::config::RunConfig;
use pitsep_core::corpus::{build_dataset, load_split, manifest_path, write_dataset, Split};
use pitsep_core::dsp::read_wav;
use pitsep_core::inference::{separate, write_separation, AssignmentMode};
use pitsep_core::metrics::{aggregate, eval_report, write_report};
use pitsep_core::model::{load_checkpoint, save_checkpoint, Model};
use pitsep_core::training::{train, Criterion};
use pitsep_core::{Error, ErrorClass, Result};

const THREADS_ENV: &str = "PITSEP_THREADS";
const LOG_ENV: &str = "PITSEP_LOG";

#[derive(Parser)]
#[command(
    name = "pitsep",
    version,
    about = "Permutation invariant training for speech separation"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no file is given: desk or full-scale.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/valid/test-cc/test-oc manifests and audio.
    Mix(MixArgs),
    /// Train a model and write its checkpoint and learning curve.
    Train(TrainArgs),
    /// Separate a WAV file or every mixture in a manifest.
    Separate(SeparateArgs),
    /// Score checkpoints on a manifest and write report CSVs.
    Eval(EvalArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sources: Option<usize>,
    #[arg(long)]
    num_train: Option<usize>,
    #[arg(long)]
    num_valid: Option<usize>,
    /// Mixtures in each of test-cc and test-oc.
    #[arg(long)]
    num_test: Option<usize>,
    #[arg(long)]
    train_speakers: Option<usize>,
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `mix`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    /// Learning-curve CSV; defaults to the checkpoint path with a `.curve.csv` suffix.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Continue training from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_parser = parse_criterion)]
    criterion: Option<Criterion>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    input_frames: Option<usize>,
    #[arg(long)]
    output_frames: Option<usize>,
    /// Training meta-frame shift in frames.
    #[arg(long)]
    shift: Option<usize>,
    /// Meta-frames drawn afresh each epoch.
    #[arg(long)]
    epoch_metaframes: Option<usize>,
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(
        long,
        conflicts_with = "manifest",
        required_unless_present = "manifest"
    )]
    wav: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AssignmentMode>,
    #[arg(long)]
    shift: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_trace: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// One or more checkpoints; each contributes its own window configuration.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated assignment modes.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    modes: Option<Vec<AssignmentMode>>,
    #[arg(long)]
    shift: Option<usize>,
    #[arg(long)]
    with_irm: bool,
    #[arg(long)]
    out: PathBuf,
    /// Report file stem.
    #[arg(long, default_value = "report")]
    stem: String,
}

fn parse_criterion(s: &str) -> std::result::Result<Criterion, String> {
    Criterion::parse(s).ok_or_else(|| format!("unknown criterion '{s}' (pit, conventional)"))
}

fn parse_mode(s: &str) -> std::result::Result<AssignmentMode, String> {
    AssignmentMode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = AssignmentMode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode '{s}' ({})", names.join(", "))
    })
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&cli.preset)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset '{}'", cli.preset)))?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn set<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_mix(mut cfg: RunConfig, args: MixArgs) -> Result<()> {
    let c = &mut cfg.corpus;
    set(&mut c.sources, args.sources);
    set(&mut c.num_train, args.num_train);
    set(&mut c.num_valid, args.num_valid);
    set(&mut c.num_test_cc, args.num_test);
    set(&mut c.num_test_oc, args.num_test);
    set(&mut c.train_speakers, args.train_speakers);
    set(&mut c.duration, args.duration);
    cfg.validate()?;
    create_dir(&args.out)?;
    let dataset = build_dataset(&cfg.corpus, cfg.seed)?;
    write_dataset(&dataset, &args.out)?;
    cfg.save(&args.out.join("config.toml"))?;
    for split in &dataset.splits {
        println!(
            "{:<8} {:>6} mixtures",
            split.manifest.split.name(),
            split.samples.len()
        );
    }
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, args: TrainArgs) -> Result<()> {
    let t = &mut cfg.training;
    set(&mut t.criterion, args.criterion);
    set(&mut t.epochs, args.epochs);
    set(&mut t.learning_rate, args.learning_rate);
    set(&mut t.batch_size, args.batch_size);
    set(&mut t.shift, args.shift);
    if args.epoch_metaframes.is_some() {
        t.epoch_metaframes = args.epoch_metaframes;
    }
    set(&mut cfg.model.input_frames, args.input_frames);
    set(&mut cfg.model.output_frames, args.output_frames);
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    if let Some(m) = &resume {
        cfg.model.input_frames = m.layout.input_frames;
        cfg.model.output_frames = m.layout.output_frames;
        cfg.model.hidden = m.hidden();
        cfg.dsp = m.stft;
    }
    cfg.validate()?;
    let (_, train_samples) = load_split(&manifest_path(&args.data, Split::Train))?;
    let (_, valid_samples) = load_split(&manifest_path(&args.data, Split::Valid))?;
    info!(
        "training on {} mixtures, validating on {}",
        train_samples.len(),
        valid_samples.len()
    );
    let (model, curve) = train(
        &cfg.train_config(),
        &cfg.dsp,
        &train_samples,
        &valid_samples,
        resume,
    )?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_checkpoint(&model, &args.out)?;
    let curve_path = args.curve.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".curve.csv");
        p.into()
    });
    curve.write_csv(&curve_path)?;
    match curve.epochs.last() {
        Some(last) => println!(
            "epoch {} train {:.5} valid {:.5} -> {}",
            last.epoch,
            last.train_mse,
            last.valid_mse,
            args.out.display()
        ),
        None => println!("initialized model -> {}", args.out.display()),
    }
    Ok(())
}

fn cmd_separate(mut cfg: RunConfig, args: SeparateArgs) -> Result<()> {
    set(&mut cfg.inference.mode, args.mode);
    set(&mut cfg.inference.shift, args.shift);
    if args.no_trace {
        cfg.inference.write_trace = false;
    }
    cfg.validate()?;
    let inf = &cfg.inference;
    let model = load_checkpoint(&args.checkpoint)?;
    if let Some(wav) = &args.wav {
        if inf.mode.needs_references() {
            return Err(Error::MissingReferences.context("a single WAV input has no references"));
        }
        let mixture = read_wav(wav)?;
        let sep = separate(&model, &mixture, inf.shift, inf.mode, None)?;
        let id = wav
            .file_stem()
            .map_or("mixture".into(), |s| s.to_string_lossy().into_owned());
        write_separation(&sep, &args.out, &id, inf.write_trace)?;
        println!(
            "{id}: {} streams -> {}",
            sep.waveforms.len(),
            args.out.display()
        );
        return Ok(());
    }
    let manifest = args
        .manifest
        .as_deref()
        .expect("clap enforces wav or manifest");
    let (records, samples) = load_split(manifest)?;
    use rayon::prelude::*;
    records
        .par_iter()
        .zip(&samples)
        .try_for_each(|(record, sample)| -> Result<()> {
            let refs = inf
                .mode
                .needs_references()
                .then_some(&sample.references[..]);
            let sep = separate(&model, &sample.mixture, inf.shift, inf.mode, refs)
                .map_err(|e| e.context(format!("sample {}", record.id)))?;
            write_separation(&sep, &args.out, &record.id, inf.write_trace)
        })?;
    println!("{} mixtures -> {}", records.len(), args.out.display());
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, args: EvalArgs) -> Result<()> {
    set(&mut cfg.metrics.modes, args.modes);
    set(&mut cfg.metrics.shift, args.shift);
    if args.with_irm {
        cfg.metrics.with_irm = true;
    }
    cfg.validate()?;
    let models = args
        .checkpoint
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<Model>>>()?;
    let streams = models[0].layout.streams;
    if models.iter().any(|m| m.layout.streams != streams) {
        return Err(Error::InvalidConfig(
            "all checkpoints must separate the same number of streams".into(),
        ));
    }
    let (records, samples) = load_split(&args.manifest)?;
    let split = args
        .manifest
        .file_stem()
        .map_or("test".into(), |s| s.to_string_lossy().into_owned());
    let labeled: Vec<(String, _)> = records.into_iter().map(|r| r.id).zip(samples).collect();
    let refs: Vec<&Model> = models.iter().collect();
    let report = eval_report(&refs, &split, &labeled, &cfg.metrics)?;
    write_report(&report, streams, &args.out, &args.stem)?;
    for a in aggregate(&report) {
        let window = match (a.in_window, a.out_window) {
            (Some(i), Some(o)) => format!("{i}\\{o}"),
            _ => "-".into(),
        };
        println!(
            "{:<8} {:<8} {:>7} n={:<5} sdri {:>6.2} dB mse {:.5}",
            a.split,
            a.mode.name(),
            window,
            a.count,
            a.sdri,
            a.mse
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = base_config(&cli)?;
    match cli.command {
        Command::Mix(a) => cmd_mix(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Separate(a) => cmd_separate(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(threads) = std::env::var(THREADS_ENV) {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got '{threads}'");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
