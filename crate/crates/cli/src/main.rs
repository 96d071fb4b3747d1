//! `roomeq`: batch front end for IR analysis, EQ modelling, compensation,
//! room simulation and dataset augmentation.
//!
//! Data goes to files or stdout, diagnostics to stderr. Exit status is 0 on
//! success (including partial failure), 1 when nothing succeeded or the run
//! errored, 2 on a usage error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use roomeq::augment::{build_augmented_dataset, AugmentConfig, SnrChoice};
use roomeq::compensate::batch_compensate;
use roomeq::dataset::{scan_directory, split_manifest, EntryKind, Manifest, ManifestEntry};
use roomeq::eq_model::{fit_gmm_with, load_model, sample_eq, save_model, FitOptions};
use roomeq::eq_table::{analyze_manifest, load_eq_table, save_eq_table, write_eq_table, EqRow};
use roomeq::fir_design::design_eq_filter;
use roomeq::room_sim::{parse_room_records, simulate_batch, DATASET_T60_RANGE};
use roomeq::seed::rng_from_seed;
use roomeq::SampleFormat;

#[derive(Parser)]
#[command(
    name = "roomeq",
    version,
    about = "Room EQ analysis, compensation and augmentation"
)]
struct Cli {
    /// Worker threads. Never changes output, only wall time.
    #[arg(long, global = true, default_value_t = default_workers())]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Subcommand)]
enum Command {
    /// Build a manifest from every WAVE file under a directory.
    Scan(ScanArgs),
    /// Measure the sub-band EQ of every IR in a manifest.
    AnalyzeEq(AnalyzeArgs),
    /// Fit a Gaussian mixture to an EQ table.
    FitGmm(FitArgs),
    /// Draw EQ vectors from a fitted model.
    SampleEq(SampleArgs),
    /// Design the 511-tap FIR for eight band gains and dump its taps.
    DesignFilter(DesignArgs),
    /// Simulate shoebox-room IRs from a JSON-lines file of room specs.
    SimulateIr(SimulateArgs),
    /// Re-equalize IRs to EQs drawn from a model.
    Compensate(CompensateArgs),
    /// Reverberate and mix speech with noise.
    Augment(AugmentArgs),
    /// Split a manifest into train, validation and test parts.
    Split(SplitArgs),
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value = "ir")]
    kind: EntryKind,
    /// Output manifest; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long, default_value_t = roomeq::eq_model::DEFAULT_COMPONENTS)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DesignArgs {
    /// Eight comma-separated gains in dB, 62.5 Hz to 8 kHz.
    #[arg(long, value_parser = parse_list::<f64, 8>, allow_hyphen_values = true)]
    gains: [f64; 8],
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON-lines room specs: id, dims, source, mic, optional t60 and max_length.
    #[arg(long)]
    rooms: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DATASET_T60_RANGE.0)]
    t60_min: f64,
    #[arg(long, default_value_t = DATASET_T60_RANGE.1)]
    t60_max: f64,
}

#[derive(Args)]
struct CompensateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-IR report; defaults to `<out-dir>/report.jsonl`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    speech: PathBuf,
    #[arg(long)]
    irs: PathBuf,
    #[arg(long)]
    noises: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed SNR in dB; overrides the range.
    #[arg(long, allow_negative_numbers = true)]
    snr: Option<f64>,
    #[arg(long, default_value_t = roomeq::augment::DEFAULT_SNR_RANGE.0, allow_negative_numbers = true)]
    snr_min: f64,
    #[arg(long, default_value_t = roomeq::augment::DEFAULT_SNR_RANGE.1, allow_negative_numbers = true)]
    snr_max: f64,
    #[arg(long, default_value_t = 0)]
    point_noises: usize,
    #[arg(long)]
    no_ambient: bool,
    #[arg(long, default_value = "pcm16")]
    format: SampleFormat,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Sizes of the three parts.
    #[arg(long, value_parser = parse_list::<usize, 3>)]
    counts: [usize; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_parser = parse_list::<String, 3>, default_value = "train,valid,test")]
    names: [String; 3],
    /// File of ids (one per line) to drop before splitting.
    #[arg(long)]
    exclude: Option<PathBuf>,
}

/// Exactly `N` comma-separated values.
fn parse_list<T: std::str::FromStr, const N: usize>(s: &str) -> Result<[T; N], String>
where
    T::Err: std::fmt::Display,
{
    let items = s
        .split(',')
        .map(|v| v.trim().parse::<T>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    let n = items.len();
    items
        .try_into()
        .map_err(|_| format!("expected {N} comma-separated values, got {n}"))
}

/// What a command achieved, for the exit status.
enum Outcome {
    Done,
    AllFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::AllFailed) => {
            log::error!("every item failed");
            ExitCode::from(1)
        }
        Err(e) => {
            log::error!("{}", describe(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain joined with `: `, skipping causes the outer message
/// already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(cli: Cli) -> Result<Outcome> {
    let workers = cli.workers.max(1);
    match cli.command {
        Command::Scan(a) => scan(a),
        Command::AnalyzeEq(a) => analyze(a, workers),
        Command::FitGmm(a) => fit(a),
        Command::SampleEq(a) => sample(a),
        Command::DesignFilter(a) => design(a),
        Command::SimulateIr(a) => simulate(a, workers),
        Command::Compensate(a) => compensate(a, workers),
        Command::Augment(a) => augment(a, workers),
        Command::Split(a) => split(a),
    }
}

/// `out` or stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .context("writing to stdout"),
    }
}

fn create_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    dir.canonicalize()
        .with_context(|| format!("resolving {}", dir.display()))
}

/// Rewrite entry paths relative to `base` where possible, so the manifest
/// can be moved together with its directory.
fn relative_to(manifest: &Manifest, base: &Path) -> Result<Manifest> {
    let entries = manifest
        .entries()
        .iter()
        .map(|e| {
            let abs = std::path::absolute(manifest.resolve(e))?;
            let path = abs.strip_prefix(base).unwrap_or(&abs);
            let mut out = ManifestEntry::new(&e.id, path, e.kind);
            out.metadata = e.metadata.clone();
            Ok(out)
        })
        .collect::<std::io::Result<_>>()?;
    Ok(Manifest::new(entries)?)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn scan(a: ScanArgs) -> Result<Outcome> {
    let m = scan_directory(&a.root, a.kind)?;
    log::info!("{} files under {}", m.len(), a.root.display());
    match a.out {
        Some(out) => {
            let base = out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map(create_dir)
                .transpose()?
                .unwrap_or(std::env::current_dir()?);
            relative_to(&m, &base)?.save(&out)?;
        }
        None => emit(None, &m.to_jsonl())?,
    }
    Ok(Outcome::Done)
}

fn analyze(a: AnalyzeArgs, workers: usize) -> Result<Outcome> {
    let m = load_manifest(&a.manifest)?;
    let (rows, failures) = analyze_manifest(&m, workers)?;
    log::info!("analyzed {} IRs, {} failed", rows.len(), failures.len());
    match &a.out {
        Some(p) => save_eq_table(&rows, p)?,
        None => write_eq_table(&rows, std::io::stdout().lock())?,
    }
    Ok(if rows.is_empty() && !failures.is_empty() {
        Outcome::AllFailed
    } else {
        Outcome::Done
    })
}

fn fit(a: FitArgs) -> Result<Outcome> {
    let rows = load_eq_table(&a.table)?;
    let eqs: Vec<_> = rows.into_iter().map(|r| r.eq).collect();
    let mut opts = FitOptions::new(a.k, a.seed);
    opts.restarts = a.restarts.max(1);
    let fit = fit_gmm_with(&eqs, &opts)?;
    if !fit.converged {
        log::warn!("EM hit the iteration limit before converging");
    }
    log::info!(
        "k={} on {} rows, mean log-likelihood {:.4} after {} steps",
        a.k,
        eqs.len(),
        fit.final_log_likelihood(),
        fit.trace.len()
    );
    save_model(&fit.model, &a.out)?;
    Ok(Outcome::Done)
}

fn sample(a: SampleArgs) -> Result<Outcome> {
    let model = load_model(&a.model)?;
    let mut rng = rng_from_seed(a.seed);
    let rows: Vec<EqRow> = (0..a.count)
        .map(|i| EqRow {
            id: format!("draw-{i:06}"),
            eq: sample_eq(&model, &mut rng),
        })
        .collect();
    match &a.out {
        Some(p) => save_eq_table(&rows, p)?,
        None => write_eq_table(&rows, std::io::stdout().lock())?,
    }
    Ok(Outcome::Done)
}

fn design(a: DesignArgs) -> Result<Outcome> {
    let fir = design_eq_filter(&a.gains)?;
    if fir.clamped() {
        log::warn!("gains clamped to {:?}", fir.design_gains_db());
    }
    log::info!("designed for gains {:?} dB", fir.design_gains_db());
    emit(a.out.as_deref(), &fir.to_text())?;
    Ok(Outcome::Done)
}

fn simulate(a: SimulateArgs, workers: usize) -> Result<Outcome> {
    if !(a.t60_min > 0.0 && a.t60_min <= a.t60_max) {
        bail!("bad T60 range {}..{}", a.t60_min, a.t60_max);
    }
    let text = std::fs::read_to_string(&a.rooms)
        .with_context(|| format!("reading {}", a.rooms.display()))?;
    let records = parse_room_records(&text)?;
    let out_dir = create_dir(&a.out_dir)?;
    let m = simulate_batch(&records, &out_dir, a.seed, (a.t60_min, a.t60_max), workers)?;
    log::info!("simulated {} of {} rooms", m.len(), records.len());
    relative_to(&m, &out_dir)?.save(out_dir.join("manifest.jsonl"))?;
    Ok(if m.is_empty() && !records.is_empty() {
        Outcome::AllFailed
    } else {
        Outcome::Done
    })
}

fn compensate(a: CompensateArgs, workers: usize) -> Result<Outcome> {
    let m = load_manifest(&a.manifest)?;
    let model = load_model(&a.model)?;
    let out_dir = create_dir(&a.out_dir)?;
    let report = batch_compensate(&m, &model, &out_dir, a.seed, workers)?;
    log::info!(
        "compensated {} IRs, {} failed",
        report.lines.len(),
        report.failures.len()
    );
    let report_path = a.report.unwrap_or_else(|| out_dir.join("report.jsonl"));
    emit(Some(&report_path), &report.to_jsonl(&m))?;
    relative_to(&report.output_manifest()?, &out_dir)?.save(out_dir.join("manifest.jsonl"))?;
    Ok(if report.all_failed() {
        Outcome::AllFailed
    } else {
        Outcome::Done
    })
}

fn augment(a: AugmentArgs, workers: usize) -> Result<Outcome> {
    let snr = match a.snr {
        Some(s) => SnrChoice::Fixed(s),
        None if a.snr_min <= a.snr_max => SnrChoice::Uniform {
            min: a.snr_min,
            max: a.snr_max,
        },
        None => bail!("--snr-min {} exceeds --snr-max {}", a.snr_min, a.snr_max),
    };
    let config = AugmentConfig {
        snr,
        ambient: !a.no_ambient,
        point_noises: a.point_noises,
        format: a.format,
        workers,
    };
    let speech = load_manifest(&a.speech)?;
    let irs = load_manifest(&a.irs)?;
    let noises = load_manifest(&a.noises)?;
    let out_dir = create_dir(&a.out_dir)?;
    let mut report = build_augmented_dataset(&speech, &irs, &noises, &config, a.seed, &out_dir)?;
    log::info!(
        "augmented {} utterances, {} failed",
        report.records.len(),
        report.failures.len()
    );
    for r in &mut report.records {
        if let Ok(rel) = Path::new(&r.output_path).strip_prefix(&out_dir) {
            r.output_path = rel.to_string_lossy().into_owned();
        }
    }
    emit(Some(&out_dir.join("manifest.jsonl")), &report.to_jsonl())?;
    Ok(if report.all_failed() {
        Outcome::AllFailed
    } else {
        Outcome::Done
    })
}

fn split(a: SplitArgs) -> Result<Outcome> {
    let mut m = load_manifest(&a.manifest)?;
    if let Some(path) = &a.exclude {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let before = m.len();
        m = m.exclude(text.lines().map(str::trim).filter(|l| !l.is_empty()));
        log::info!("excluded {} entries", before - m.len());
    }
    let out_dir = create_dir(&a.out_dir)?;
    let parts = split_manifest(&m, a.counts, a.seed)?;
    for (part, name) in parts.iter().zip(&a.names) {
        let path = out_dir.join(format!("{name}.jsonl"));
        relative_to(part, &out_dir)?.save(&path)?;
        log::info!("{}: {} entries", path.display(), part.len());
    }
    Ok(Outcome::Done)
}
