//! Command-line entry points tying generation, noise injection, training,
//! probing, gradient auditing, and theory verification into reproducible
//! runs.
//!
//! Exit codes: 0 on success, 1 on a domain error (bad config, failed check,
//! enumeration guard), 2 on a usage error. Artifacts are written atomically
//! (temp file plus rename) and every run summary embeds its full resolved
//! config, so a run can be reproduced from its own artifacts.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use crate::artifact::write_atomic;
use crate::artifact::file_hash;
use crate::data;
use crate::error::{Error, Result};
use crate::info;
use crate::model;
use crate::train::{self, EpochRecord, TrainConfig};

#[derive(Parser)]
#[command(
    name = "ctrr",
    about = "Contrastive-regularized training robust to noisy labels",
    long_about = "Desk-scale training, noise injection, gradient auditing, and exact \
                  information-theoretic verification. CTRR_THREADS caps internal \
                  parallelism (default: all cores); all runs are deterministic in \
                  their configured seeds."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Gaussian-blobs dataset
    GenData(GenDataArgs),
    /// Inject label noise into a dataset file
    InjectNoise(InjectNoiseArgs),
    /// Train from a JSON run config
    Train(TrainArgs),
    /// Linear-probe a frozen checkpoint from a JSON probe config
    Probe(ProbeArgs),
    /// Audit reverse-mode gradients against finite differences
    GradCheck(GradCheckArgs),
    /// Verify the information-theoretic bounds by exhaustive enumeration
    VerifyTheory(VerifyTheoryArgs),
    /// Summarize a finished run from its summary file
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long)]
    spread: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also export the dataset as CSV to this path
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct InjectNoiseArgs {
    #[arg(long)]
    input: PathBuf,
    /// symmetric | asymmetric-pairs | next-class
    #[arg(long)]
    kind: String,
    #[arg(long)]
    rate: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Class map for asymmetric-pairs noise, e.g. "9:1,2:0,4:7,3:5,5:3"
    #[arg(long)]
    map: Option<String>,
    /// Use the standard 10-class pair map
    #[arg(long, default_value_t = false)]
    cifar10_map: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyTheoryArgs {
    #[arg(long)]
    out: PathBuf,
    /// Verify a single distribution from a JSON spec instead of the built-in
    /// family
    #[arg(long)]
    dist: Option<PathBuf>,
    /// Representation codomain for the exhaustive search (defaults to the
    /// class count)
    #[arg(long)]
    codomain: Option<usize>,
    /// Single custom family instance: class count
    #[arg(long)]
    classes: Option<usize>,
    /// Single custom family instance: background count
    #[arg(long)]
    backgrounds: Option<usize>,
    /// Single custom family instance: comma-separated per-background flip
    /// probabilities
    #[arg(long)]
    flip_probs: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    summary: PathBuf,
}

// --- config file schemas ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataPaths {
    pub train_path: String,
    pub test_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfigFile {
    pub arch: model::ArchSpec,
    pub train: TrainConfig,
    pub data: DataPaths,
    pub out_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfigFile {
    pub checkpoint: String,
    pub probe: TrainConfig,
    pub data: DataPaths,
    pub out_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHashes {
    pub train: String,
    pub test: String,
}

/// Run summary: the full resolved config, content hashes of the input
/// datasets, and the final plus best-epoch metric records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary<C> {
    pub command: String,
    pub config: C,
    pub dataset_hash: DatasetHashes,
    pub epochs: usize,
    pub final_epoch: EpochRecord,
    pub best_by_test_accuracy: EpochRecord,
}

/// Distribution spec: an explicit table or a named generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistSpec {
    Table { x: usize, y: usize, yt: usize, p: Vec<f64> },
    Generator(info::FamilySpec),
}

// --- entry point ------------------------------------------------------------------

/// Parses and runs. Returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{}", e);
            return 0;
        }
        Err(e) => {
            eprint!("{}", e);
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::InjectNoise(args) => inject_noise(args),
        Command::Train(args) => train_cmd(args),
        Command::Probe(args) => probe_cmd(args),
        Command::GradCheck(args) => grad_check(args),
        Command::VerifyTheory(args) => verify_theory(args),
        Command::Report(args) => report_cmd(args),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn gen_data(args: GenDataArgs) -> Result<i32> {
    let ds = data::gen_blobs(args.classes, args.per_class, args.dim, args.spread, args.seed)?;
    data::save_dataset(&args.out, &ds)?;
    #[derive(Serialize)]
    struct Meta {
        command: &'static str,
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        seed: u64,
        examples: usize,
        hash: String,
    }
    let meta = Meta {
        command: "gen-data",
        classes: args.classes,
        dim: args.dim,
        per_class: args.per_class,
        spread: args.spread,
        seed: args.seed,
        examples: ds.len(),
        hash: file_hash(&args.out)?,
    };
    write_json(&args.out.with_extension("meta.json"), &meta)?;
    if let Some(csv_path) = &args.csv {
        write_atomic(csv_path, data::dataset_to_csv(&ds)?.as_bytes())?;
    }
    println!("wrote {} examples to {}", ds.len(), args.out.display());
    Ok(0)
}

fn parse_class_map(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut map = Vec::new();
    for part in text.split(',') {
        let (from, to) = part
            .split_once(':')
            .ok_or_else(|| Error::InvalidInput(format!("bad map entry '{}', expected from:to", part)))?;
        let from = from.trim().parse::<usize>().map_err(|e| Error::InvalidInput(e.to_string()))?;
        let to = to.trim().parse::<usize>().map_err(|e| Error::InvalidInput(e.to_string()))?;
        map.push((from, to));
    }
    Ok(map)
}

fn inject_noise(args: InjectNoiseArgs) -> Result<i32> {
    let ds = data::load_dataset(&args.input)?;
    let out = match args.kind.as_str() {
        "symmetric" => data::inject_symmetric(&ds, args.rate, args.seed)?,
        "next-class" => data::inject_next_class(&ds, args.rate, args.seed)?,
        "asymmetric-pairs" => {
            let map = if args.cifar10_map {
                data::cifar10_class_map()
            } else {
                parse_class_map(args.map.as_deref().ok_or_else(|| {
                    Error::InvalidInput("asymmetric-pairs needs --map or --cifar10-map".into())
                })?)?
            };
            data::inject_asymmetric_pairs(&ds, args.rate, &map, args.seed)?
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown noise kind '{}'; expected symmetric, asymmetric-pairs, or next-class",
                other
            )))
        }
    };
    data::save_dataset(&args.out, &out)?;
    let selected = (args.rate * ds.len() as f64).round() as usize;
    #[derive(Serialize)]
    struct Meta {
        command: &'static str,
        input: String,
        kind: String,
        rate: f64,
        seed: u64,
        selected: usize,
        changed: usize,
        hash: String,
    }
    let meta = Meta {
        command: "inject-noise",
        input: args.input.display().to_string(),
        kind: args.kind.clone(),
        rate: args.rate,
        seed: args.seed,
        selected,
        changed: out.flipped_count(),
        hash: file_hash(&args.out)?,
    };
    write_json(&args.out.with_extension("meta.json"), &meta)?;
    println!(
        "selected {} of {} examples, changed {} labels, wrote {}",
        selected,
        ds.len(),
        out.flipped_count(),
        args.out.display()
    );
    Ok(0)
}

fn load_data_pair(paths: &DataPaths) -> Result<(data::Dataset, data::Dataset, DatasetHashes)> {
    let train = data::load_dataset(Path::new(&paths.train_path))?;
    let test = data::load_dataset(Path::new(&paths.test_path))?;
    let hashes = DatasetHashes {
        train: file_hash(Path::new(&paths.train_path))?,
        test: file_hash(Path::new(&paths.test_path))?,
    };
    Ok((train, test, hashes))
}

fn summarize<C: Serialize>(
    command: &str,
    config: C,
    hashes: DatasetHashes,
    metrics: &train::RunMetrics,
) -> Result<RunSummary<C>> {
    let final_epoch = *metrics
        .final_record()
        .ok_or_else(|| Error::InvalidInput("run produced no epochs".into()))?;
    let best = *metrics.best_by_test_accuracy().expect("non-empty records");
    Ok(RunSummary {
        command: command.to_string(),
        config,
        dataset_hash: hashes,
        epochs: metrics.records.len(),
        final_epoch,
        best_by_test_accuracy: best,
    })
}

fn train_cmd(args: TrainArgs) -> Result<i32> {
    let cfg: RunConfigFile = serde_json::from_slice(&std::fs::read(&args.config)?)?;
    let (train_ds, test_ds, hashes) = load_data_pair(&cfg.data)?;
    let (params, metrics) = train::train_run(&cfg.train, &train_ds, &test_ds, &cfg.arch)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    write_atomic(&out_dir.join("metrics.csv"), metrics.to_csv()?.as_bytes())?;
    model::save_checkpoint(&out_dir.join("checkpoint.bin"), &cfg.arch, &params)?;
    let summary = summarize("train", cfg.clone(), hashes, &metrics)?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    println!(
        "trained {} epochs; final test accuracy {:.4}; artifacts in {}",
        summary.epochs, summary.final_epoch.test_accuracy, out_dir.display()
    );
    Ok(0)
}

fn probe_cmd(args: ProbeArgs) -> Result<i32> {
    let cfg: ProbeConfigFile = serde_json::from_slice(&std::fs::read(&args.config)?)?;
    let (arch, frozen) = model::load_checkpoint(Path::new(&cfg.checkpoint))?;
    let (train_ds, test_ds, hashes) = load_data_pair(&cfg.data)?;
    let (params, metrics) = train::linear_probe(&frozen, &arch, &train_ds, &test_ds, &cfg.probe)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    write_atomic(&out_dir.join("metrics.csv"), metrics.to_csv()?.as_bytes())?;
    model::save_checkpoint(&out_dir.join("checkpoint.bin"), &arch, &params)?;
    let summary = summarize("probe", cfg.clone(), hashes, &metrics)?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    println!(
        "probed {} epochs; final test accuracy {:.4}; artifacts in {}",
        summary.epochs, summary.final_epoch.test_accuracy, out_dir.display()
    );
    Ok(0)
}

fn grad_check(args: GradCheckArgs) -> Result<i32> {
    let report = crate::audit::run_grad_audit(args.samples, args.seed)?;
    write_json(&args.out, &report)?;
    println!(
        "max relative error {:.3e} over {} samples; linear form: {}; log form: {}",
        report.max_rel_error, args.samples, report.closed_forms.linear_matched, report.closed_forms.log_matched
    );
    Ok(if report.passed { 0 } else { 1 })
}

fn parse_flip_probs(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::InvalidInput(e.to_string())))
        .collect()
}

fn verify_theory(args: VerifyTheoryArgs) -> Result<i32> {
    let report = if let Some(dist_path) = &args.dist {
        let spec: DistSpec = serde_json::from_slice(&std::fs::read(dist_path)?)?;
        let (name, joint) = match &spec {
            DistSpec::Table { x, y, yt, p } => {
                ("table".to_string(), info::DiscreteJoint::from_table(*x, *y, *yt, p.clone())?)
            }
            DistSpec::Generator(fam) => (fam.name(), fam.build()?),
        };
        let m = args.codomain.unwrap_or(joint.ny());
        let instance = info::verify_joint(&name, None, &joint, m)?;
        info::TheoryReport {
            tolerance: info::CHECK_TOL,
            instance_count: 1,
            all_passed: instance.passed,
            lemma1_denominator_note: info::LEMMA1_NOTE.to_string(),
            instances: vec![instance],
        }
    } else if args.classes.is_some() || args.backgrounds.is_some() || args.flip_probs.is_some() {
        let spec = info::FamilySpec {
            classes: args.classes.ok_or_else(|| Error::InvalidInput("--classes required".into()))?,
            backgrounds: args
                .backgrounds
                .ok_or_else(|| Error::InvalidInput("--backgrounds required".into()))?,
            flip_probs: parse_flip_probs(
                args.flip_probs
                    .as_deref()
                    .ok_or_else(|| Error::InvalidInput("--flip-probs required".into()))?,
            )?,
        };
        let m = args.codomain.unwrap_or(spec.classes);
        let instance = info::verify_instance(&spec, m)?;
        info::TheoryReport {
            tolerance: info::CHECK_TOL,
            instance_count: 1,
            all_passed: instance.passed,
            lemma1_denominator_note: info::LEMMA1_NOTE.to_string(),
            instances: vec![instance],
        }
    } else {
        info::verify_family(&info::default_family())?
    };
    write_json(&args.out, &report)?;
    println!(
        "{} of {} instances passed (tolerance {:.0e})",
        report.instances.iter().filter(|i| i.passed).count(),
        report.instance_count,
        report.tolerance
    );
    Ok(if report.all_passed { 0 } else { 1 })
}

fn report_cmd(args: ReportArgs) -> Result<i32> {
    let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(&args.summary)?)?;
    let command = raw
        .get("command")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Format("summary has no command field".into()))?;
    let epochs = raw
        .get("epochs")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("summary has no epochs field".into()))?;
    let fetch = |key: &str| -> Result<EpochRecord> {
        serde_json::from_value(
            raw.get(key)
                .cloned()
                .ok_or_else(|| Error::Format(format!("summary has no {} field", key)))?,
        )
        .map_err(Error::from)
    };
    let final_epoch = fetch("final_epoch")?;
    let best = fetch("best_by_test_accuracy")?;
    println!("command: {}", command);
    println!("epochs: {}", epochs);
    println!(
        "final:  epoch {:>4}  loss {:.6}  test_acc {:.4}  memorization {:.4}",
        final_epoch.epoch, final_epoch.train_loss, final_epoch.test_accuracy, final_epoch.memorization
    );
    println!(
        "best:   epoch {:>4}  loss {:.6}  test_acc {:.4}  memorization {:.4}",
        best.epoch, best.train_loss, best.test_accuracy, best.memorization
    );
    Ok(0)
}
