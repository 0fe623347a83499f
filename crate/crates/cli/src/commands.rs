//! Implementations of the six workbench commands.
//!
//! Shared conventions: every command validates its inputs before touching the
//! output directory, refuses a non-empty output directory unless `--force` is
//! given, writes a `manifest.json` before any long computation, and keeps all
//! artifacts under that one directory. Commands never modify their inputs.

use std::path::{Path, PathBuf};

use clap::Args;
use cycden_core::metrics::{evaluate_case, EvalConfig};
use cycden_core::trainer::{
    denoise_volume, load_checkpoint, AblationVariant, TrainCase, TrainConfig, Trainer, RunOutputs,
};
use cycden_core::nets::ModelParams;
use cycden_core::volume::{load_volume, min_max_normalize, normalize_with, write_volume};
use cycden_core::{Error, Result};

use crate::config::{ExperimentConfig, ExperimentManifest, Split};
use crate::dataset::{
    self, generate_dataset, hash_file, load_index, load_pair, scan_volume_dir, write_atomic,
    DatasetIndex,
};
use crate::eval::{format_summary_table, summarize, EvalReport, MetricRow, SummaryRow};
use crate::report;
use crate::svg;

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Globals {
    /// TOML experiment config; defaults are used when absent.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config's dataset and training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for this command's artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory, overwriting own artifacts.
    #[arg(long, global = true)]
    pub force: bool,
    /// Pin internal parallelism to one thread. Results are identical either
    /// way (all parallel reductions are ordered); this pins scheduling too.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

impl Globals {
    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("this command needs --out".into()))
    }
}

/// Creates `out`, refusing to reuse a non-empty directory without `--force`.
fn claim_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(Error::InvalidArgument(format!(
                "{} exists and is not a directory",
                out.display()
            )));
        }
        if out.read_dir()?.next().is_some() && !force {
            return Err(Error::InvalidArgument(format!(
                "output directory {} is not empty; pass --force to reuse it",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Total number of cases (overrides the config).
    #[arg(long)]
    pub n_cases: Option<usize>,
    /// Validation cases held out of training.
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Test cases held out of training.
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Dose fractions to simulate, e.g. `1/4,1/10,1/24`.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<String>>,
    /// Volume shape as `nz,ny,nx`.
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    /// Expected counts per unit activity at full dose.
    #[arg(long)]
    pub counts: Option<f64>,
    /// Lesions per case.
    #[arg(long)]
    pub tumors: Option<usize>,
    /// Lesion activity multiplier.
    #[arg(long)]
    pub tumor_contrast: Option<f64>,
}

pub fn generate(globals: &Globals, args: &GenerateArgs) -> Result<()> {
    let out = globals.out_dir()?;
    let cfg = ExperimentConfig::load(globals.config.as_deref())?;
    let mut ds = cfg.dataset.clone();
    if let Some(seed) = globals.seed {
        ds.seed = seed;
    }
    if let Some(n) = args.n_cases {
        ds.n_cases = n;
    }
    if let Some(n) = args.n_val {
        ds.n_val = n;
    }
    if let Some(n) = args.n_test {
        ds.n_test = n;
    }
    if let Some(f) = &args.fractions {
        ds.fractions = f.clone();
    }
    if let Some(s) = &args.shape {
        ds.shape = match s.as_slice() {
            [a, b, c] => [*a, *b, *c],
            other => {
                return Err(Error::InvalidArgument(format!(
                    "--shape needs three comma-separated sizes, got {other:?}"
                )))
            }
        };
    }
    if let Some(c) = args.counts {
        ds.counts_per_unit = c;
    }
    if let Some(t) = args.tumors {
        ds.tumors_per_case = t;
    }
    if let Some(t) = args.tumor_contrast {
        ds.tumor_contrast = t;
    }
    ds.validate()?;

    claim_out_dir(out, globals.force)?;
    let mut manifest =
        ExperimentManifest::new(cfg.resolved_id("generate", ds.seed), "generate", ds.seed, globals.deterministic);
    manifest.layout.insert("index".into(), "index.json".into());
    manifest.layout.insert("cases".into(), "cases/".into());
    manifest.write(out)?;

    let index = generate_dataset(&ds, out, |case| {
        println!(
            "  {}  {:<5}  {} dose level(s)",
            case.id,
            format!("{:?}", case.split).to_lowercase(),
            case.low.len()
        );
    })?;

    manifest.dataset_fingerprint = Some(index.fingerprint.clone());
    manifest.write(out)?;

    let n_train = index.split_cases(Split::Train).len();
    let n_val = index.split_cases(Split::Val).len();
    let n_test = index.split_cases(Split::Test).len();
    println!(
        "generated {} cases ({n_train} train / {n_val} val / {n_test} test) under {}",
        index.cases.len(),
        out.display()
    );
    println!("fingerprint {}", index.fingerprint);
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (from `generate`).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Dose level to train against; optional when the dataset has one.
    #[arg(long)]
    pub fraction: Option<String>,
    /// Total epochs (overrides the config; extends a resumed run).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    pub resume: bool,
}

pub fn train(globals: &Globals, args: &TrainArgs) -> Result<()> {
    let out = globals.out_dir()?;
    let index = load_index(&args.data)?;
    let fraction = index.resolve_fraction(args.fraction.as_deref())?;

    let mut trainer = if args.resume {
        let ckpt = out.join("last.ckpt");
        require_file(&ckpt, "checkpoint")?;
        if globals.config.is_some() {
            eprintln!("note: --resume takes its configuration from the checkpoint; --config is ignored");
        }
        let mut t = Trainer::from_checkpoint(&ckpt)?;
        if let Some(epochs) = args.epochs {
            t.set_total_epochs(epochs)?;
        }
        t
    } else {
        let cfg = ExperimentConfig::load(globals.config.as_deref())?;
        let mut tc = cfg.train.clone();
        if let Some(seed) = globals.seed {
            tc.seed = seed;
        }
        if let Some(epochs) = args.epochs {
            tc.epochs = epochs;
        }
        claim_out_dir(out, globals.force)?;
        Trainer::new(tc)?
    };

    let cases = dataset::load_split(&args.data, &index, Split::Train, &fraction.label)?;
    let val_cases = dataset::load_split(&args.data, &index, Split::Val, &fraction.label)?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument(
            "dataset has no training cases".into(),
        ));
    }

    let cfg_id = ExperimentConfig::load(globals.config.as_deref())
        .map(|c| c.resolved_id("train", trainer.config.seed))
        .unwrap_or_else(|_| format!("train-seed{}", trainer.config.seed));
    let mut manifest =
        ExperimentManifest::new(cfg_id, "train", trainer.config.seed, globals.deterministic);
    manifest.dataset_fingerprint = Some(index.fingerprint.clone());
    manifest.train = Some(trainer.config.clone());
    manifest.layout.insert("loss_log".into(), "loss_log.csv".into());
    manifest.layout.insert("val_log".into(), "val_log.csv".into());
    manifest.layout.insert("checkpoint".into(), "last.ckpt".into());
    manifest.write(out)?;

    run_training(&mut trainer, &cases, &val_cases, out, false)?;
    println!(
        "trained to epoch {} on {} cases (dose {}); artifacts in {}",
        trainer.config.epochs,
        cases.len(),
        fraction.label,
        out.display()
    );
    Ok(())
}

/// Runs all remaining epochs, logging to `dir`; prints progress lines unless
/// `quiet`.
fn run_training(
    trainer: &mut Trainer,
    cases: &[TrainCase],
    val_cases: &[TrainCase],
    dir: &Path,
    quiet: bool,
) -> Result<()> {
    let outputs = RunOutputs::new(dir)?;
    let total = trainer.config.epochs;
    let mut on_epoch = |record: &cycden_core::trainer::EpochRecord,
                        val: Option<&cycden_core::trainer::ValRecord>| {
        if quiet {
            return;
        }
        let t = &record.terms;
        let mut line = format!(
            "epoch {:>4}/{total}  gan {:.4}  cyc {:.4}  id {:.4}  sup {:.4}  pln {:.4}  D {:.4}/{:.4}",
            record.epoch, t[0], t[1], t[2], t[3], t[4], record.disc_low, record.disc_full
        );
        if let Some(v) = val {
            line.push_str(&format!("  val psnr {:.2} ssim {:.4}", v.psnr, v.ssim));
        }
        println!("{line}");
    };
    trainer.run(cases, val_cases, Some(&outputs), Some(&mut on_epoch))
}

// ---------------------------------------------------------------------------
// denoise

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    /// Trained checkpoint file.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// A `.cdnvol` file, or a dataset directory (from `generate`).
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Dose level to denoise in dataset mode.
    #[arg(long)]
    pub fraction: Option<String>,
    /// Which split to denoise in dataset mode: train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
}

pub fn denoise(globals: &Globals, args: &DenoiseArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    let state = load_checkpoint(&args.checkpoint)?;
    let out = globals.out_dir()?;

    if args.input.is_file() {
        // single-volume mode: normalize by the file's own range
        let low = load_volume(&args.input)?;
        let (low_n, scale) = min_max_normalize(&low)?;
        let mut den = denoise_volume(&state.params, &low_n)?;
        den.meta.insert("norm_min".into(), scale.min.to_string());
        den.meta.insert("norm_max".into(), scale.max.to_string());
        let path = single_output_path(out, &args.input)?;
        write_volume(&path, &den)?;
        println!("denoised {} -> {}", args.input.display(), path.display());
        return Ok(());
    }

    let index = load_index(&args.input)?;
    let fraction = index.resolve_fraction(args.fraction.as_deref())?;
    claim_out_dir(out, globals.force)?;
    let splits: Vec<Split> = match args.split.as_str() {
        "all" => vec![Split::Train, Split::Val, Split::Test],
        s => vec![Split::parse(s)?],
    };
    let mut written = Vec::new();
    for split in splits {
        for case in index.split_cases(split) {
            let path = denoise_case(&state.params, &args.input, &index, case.id.as_str(), &fraction.label, out)?;
            println!("  {}  -> {}", case.id, path.display());
            written.push((case.id.clone(), path));
        }
    }
    if written.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split {:?} has no cases",
            args.split
        )));
    }
    write_denoised_listing(out, &index, &fraction.label, &written)?;
    println!("denoised {} volume(s) into {}", written.len(), out.display());
    Ok(())
}

fn single_output_path(out: &Path, input: &Path) -> Result<PathBuf> {
    if out.extension().and_then(|e| e.to_str()) == Some("cdnvol") {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        return Ok(out.to_path_buf());
    }
    std::fs::create_dir_all(out)?;
    let stem = input
        .file_name()
        .and_then(|n| n.to_str())
        .map(dataset::id_of_filename)
        .unwrap_or("volume");
    Ok(out.join(format!("{stem}.denoised.cdnvol")))
}

/// Denoises one dataset case on its training scale (the clean volume's
/// range) and writes `<id>.denoised.cdnvol` into `out`.
fn denoise_case(
    params: &ModelParams,
    root: &Path,
    index: &DatasetIndex,
    id: &str,
    label: &str,
    out: &Path,
) -> Result<PathBuf> {
    let case = index.case(id)?;
    let (full, low) = load_pair(root, case, label)?;
    let (_, scale) = min_max_normalize(&full)?;
    let low_n = normalize_with(&low, &scale, true)?;
    let mut den = denoise_volume(params, &low_n)?;
    den.meta.insert("norm_min".into(), scale.min.to_string());
    den.meta.insert("norm_max".into(), scale.max.to_string());
    den.meta.insert("dose_fraction".into(), label.to_string());
    let path = out.join(format!("{id}.denoised.cdnvol"));
    write_volume(&path, &den)?;
    Ok(path)
}

/// Provenance listing for a denoised directory.
fn write_denoised_listing(
    out: &Path,
    index: &DatasetIndex,
    label: &str,
    written: &[(String, PathBuf)],
) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Entry {
        id: String,
        path: String,
        sha256: String,
    }
    #[derive(serde::Serialize)]
    struct Listing<'a> {
        format: &'a str,
        dataset_fingerprint: &'a str,
        fraction: &'a str,
        cases: Vec<Entry>,
    }
    let mut cases = Vec::with_capacity(written.len());
    for (id, path) in written {
        cases.push(Entry {
            id: id.clone(),
            path: path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string(),
            sha256: hash_file(path)?,
        });
    }
    let listing = Listing {
        format: "cycden-denoised-v1",
        dataset_fingerprint: &index.fingerprint,
        fraction: label,
        cases,
    };
    let mut text = serde_json::to_string_pretty(&listing)
        .map_err(|e| Error::InvalidArgument(format!("listing serialization: {e}")))?;
    text.push('\n');
    write_atomic(&out.join("denoised.json"), text.as_bytes())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of denoised volumes; case ids come from file stems.
    #[arg(long, value_name = "DIR")]
    pub denoised: PathBuf,
    /// Dataset directory: pairs by index, adds the low-dose arm and lesion
    /// metrics. Exactly one of --data / --reference is required.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Plain directory of reference volumes, paired by file stem.
    #[arg(long, value_name = "DIR")]
    pub reference: Option<PathBuf>,
    /// Dose level for the low-dose arm in dataset mode.
    #[arg(long)]
    pub fraction: Option<String>,
    /// Run label on every row; defaults from the denoised path.
    #[arg(long)]
    pub run_id: Option<String>,
}

pub fn evaluate(globals: &Globals, args: &EvaluateArgs) -> Result<()> {
    let out = globals.out_dir()?;
    let run_id = args
        .run_id
        .clone()
        .unwrap_or_else(|| default_run_id(&args.denoised));

    let rows = match (&args.data, &args.reference) {
        (Some(data), None) => {
            let index = load_index(data)?;
            let fraction = index.resolve_fraction(args.fraction.as_deref())?;
            let pairs = scan_volume_dir(&args.denoised)?;
            claim_out_dir(out, globals.force)?;
            let mut manifest = ExperimentManifest::new(
                run_id.clone(),
                "evaluate",
                globals.seed.unwrap_or(0),
                globals.deterministic,
            );
            manifest.dataset_fingerprint = Some(index.fingerprint.clone());
            manifest.layout.insert("report".into(), "report.json".into());
            manifest.write(out)?;
            evaluate_pairs_dataset(&run_id, data, &index, &fraction.label, &pairs)?
        }
        (None, Some(reference)) => {
            let pairs = scan_volume_dir(&args.denoised)?;
            let refs = scan_volume_dir(reference)?;
            claim_out_dir(out, globals.force)?;
            ExperimentManifest::new(
                run_id.clone(),
                "evaluate",
                globals.seed.unwrap_or(0),
                globals.deterministic,
            )
            .write(out)?;
            evaluate_pairs_plain(&run_id, &pairs, &refs)?
        }
        _ => {
            return Err(Error::InvalidArgument(
                "pass exactly one of --data (dataset mode) or --reference (directory mode)"
                    .into(),
            ))
        }
    };

    let report = EvalReport::new(rows);
    report.write(out, "report")?;
    print!("{}", format_summary_table(&report.summary));
    println!("report written to {}", out.display());
    Ok(())
}

/// Run label for rows: the last path component, or its parent's name when
/// the directory is just called `denoised`.
fn default_run_id(denoised: &Path) -> String {
    let mut comps: Vec<String> = denoised
        .components()
        .filter_map(|c| match c {
            std::path::Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect();
    match comps.pop() {
        Some(last) if last != "denoised" => last,
        Some(_) => comps.pop().unwrap_or_else(|| "eval".into()),
        None => "eval".into(),
    }
}

/// Dataset-mode evaluation: for each denoised file, score it and the raw
/// low-dose volume against the clean reference on the clean volume's scale.
fn evaluate_pairs_dataset(
    run_id: &str,
    root: &Path,
    index: &DatasetIndex,
    label: &str,
    pairs: &[(String, PathBuf)],
) -> Result<Vec<MetricRow>> {
    let cfg = EvalConfig::default();
    let mut rows = Vec::with_capacity(2 * pairs.len());
    for (id, path) in pairs {
        let case = index.case(id)?;
        let (full, low) = load_pair(root, case, label)?;
        let (full_n, scale) = min_max_normalize(&full)?;
        let low_n = normalize_with(&low, &scale, true)?;
        let den = load_volume(path)?;
        let m_den = evaluate_case(&den, &full_n, Some(&case.spec), &cfg)?;
        let m_low = evaluate_case(&low_n, &full_n, Some(&case.spec), &cfg)?;
        rows.push(MetricRow::from_metrics(run_id, id, "denoised", &m_den));
        rows.push(MetricRow::from_metrics(run_id, id, "low", &m_low));
    }
    Ok(rows)
}

/// Directory-mode evaluation: both volumes go onto the reference's scale.
fn evaluate_pairs_plain(
    run_id: &str,
    pairs: &[(String, PathBuf)],
    refs: &[(String, PathBuf)],
) -> Result<Vec<MetricRow>> {
    let cfg = EvalConfig::default();
    let mut rows = Vec::new();
    for (id, path) in pairs {
        let Some((_, ref_path)) = refs.iter().find(|(rid, _)| rid == id) else {
            return Err(Error::InvalidArgument(format!(
                "no reference volume for case {id:?}"
            )));
        };
        let reference = load_volume(ref_path)?;
        let (ref_n, scale) = min_max_normalize(&reference)?;
        let x = load_volume(path)?;
        let x_n = normalize_with(&x, &scale, false)?;
        let m = evaluate_case(&x_n, &ref_n, None, &cfg)?;
        rows.push(MetricRow::from_metrics(run_id, id, "denoised", &m));
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(
            "no case overlaps between the two directories".into(),
        ));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset directory (from `generate`).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Dose level; optional when the dataset has one.
    #[arg(long)]
    pub fraction: Option<String>,
    /// Variants to run (default: all six), e.g. `full,no_sup`.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Epochs per variant (overrides the config).
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// One line of the ablation comparison.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<SummaryRow>,
}

pub fn ablate(globals: &Globals, args: &AblateArgs) -> Result<()> {
    let out = globals.out_dir()?;
    let index = load_index(&args.data)?;
    let fraction = index.resolve_fraction(args.fraction.as_deref())?;
    let cfg = ExperimentConfig::load(globals.config.as_deref())?;
    let mut base = cfg.train.clone();
    if let Some(seed) = globals.seed {
        base.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        base.epochs = epochs;
    }
    base.validate()?;
    let variants: Vec<AblationVariant> = match &args.variants {
        None => AblationVariant::all().to_vec(),
        Some(labels) => labels
            .iter()
            .map(|l| AblationVariant::parse(l))
            .collect::<Result<_>>()?,
    };

    claim_out_dir(out, globals.force)?;
    let mut manifest = ExperimentManifest::new(
        cfg.resolved_id("ablate", base.seed),
        "ablate",
        base.seed,
        globals.deterministic,
    );
    manifest.dataset_fingerprint = Some(index.fingerprint.clone());
    manifest.train = Some(base.clone());
    manifest.layout.insert("variants".into(), "variants/".into());
    manifest.layout.insert("table".into(), "ablation.json".into());
    manifest.write(out)?;

    let cases = dataset::load_split(&args.data, &index, Split::Train, &fraction.label)?;
    let val_cases = dataset::load_split(&args.data, &index, Split::Val, &fraction.label)?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument(
            "dataset has no training cases".into(),
        ));
    }

    let mut table = Vec::with_capacity(variants.len());
    let mut failures: Vec<(String, Error)> = Vec::new();
    for variant in &variants {
        let label = variant.label();
        println!("=== variant {label} ===");
        match run_variant(variant, &base, &args.data, &index, &fraction.label, &cases, &val_cases, out) {
            Ok(summary) => table.push(AblationRow {
                variant: label.to_string(),
                status: "ok".into(),
                error: None,
                summary: Some(summary),
            }),
            Err(e) => {
                eprintln!("variant {label} failed: {e}");
                table.push(AblationRow {
                    variant: label.to_string(),
                    status: "failed".into(),
                    error: Some(e.to_string()),
                    summary: None,
                });
                failures.push((label.to_string(), e));
            }
        }
    }

    write_ablation_table(out, &base, &table)?;
    print!("{}", format_ablation_table(&table));
    println!("ablation artifacts in {}", out.display());

    if !failures.is_empty() {
        eprintln!(
            "{} of {} ablation runs failed (see {}/ablation.json)",
            failures.len(),
            variants.len(),
            out.display()
        );
        // a runtime failure outranks a validation one for the exit code
        let idx = failures
            .iter()
            .position(|(_, e)| !e.is_validation())
            .unwrap_or(0);
        return Err(failures.swap_remove(idx).1);
    }
    Ok(())
}

/// Trains, denoises and scores one variant; returns its denoised-arm summary.
#[allow(clippy::too_many_arguments)]
fn run_variant(
    variant: &AblationVariant,
    base: &TrainConfig,
    root: &Path,
    index: &DatasetIndex,
    label: &str,
    cases: &[TrainCase],
    val_cases: &[TrainCase],
    out: &Path,
) -> Result<SummaryRow> {
    let vlabel = variant.label();
    let vdir = out.join("variants").join(vlabel);
    std::fs::create_dir_all(&vdir)?;
    let cfg = variant.apply(base);
    let mut manifest = ExperimentManifest::new(
        format!("ablate-{vlabel}-seed{}", cfg.seed),
        "ablate",
        cfg.seed,
        false,
    );
    manifest.dataset_fingerprint = Some(index.fingerprint.clone());
    manifest.train = Some(cfg.clone());
    manifest.write(&vdir)?;

    let mut trainer = Trainer::new(cfg)?;
    run_training(&mut trainer, cases, val_cases, &vdir, false)?;

    let den_dir = vdir.join("denoised");
    std::fs::create_dir_all(&den_dir)?;
    let mut pairs = Vec::new();
    for case in index.split_cases(Split::Test) {
        let path = denoise_case(&trainer.params, root, index, &case.id, label, &den_dir)?;
        pairs.push((case.id.clone(), path));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("dataset has no test cases".into()));
    }

    let rows = evaluate_pairs_dataset(vlabel, root, index, label, &pairs)?;
    let report = EvalReport::new(rows);
    report.write(&vdir, "report")?;
    report
        .summary
        .iter()
        .find(|s| s.arm == "denoised")
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("variant produced no denoised rows".into()))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_ablation_table(out: &Path, base: &TrainConfig, rows: &[AblationRow]) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Table<'a> {
        format: &'a str,
        base: &'a TrainConfig,
        rows: &'a [AblationRow],
    }
    let mut json = serde_json::to_string_pretty(&Table {
        format: "cycden-ablation-v1",
        base,
        rows,
    })
    .map_err(|e| Error::InvalidArgument(format!("table serialization: {e}")))?;
    json.push('\n');
    write_atomic(&out.join("ablation.json"), json.as_bytes())?;

    let mut csv = String::from(
        "variant,status,n,psnr_mean,psnr_std,ssim_mean,ssim_std,nrmse_mean,nrmse_std,\
         epi_mean,cnr_mean,hausdorff_mean,error\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        match &r.summary {
            Some(s) => csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},\n",
                r.variant,
                r.status,
                s.n,
                s.psnr_mean,
                opt(s.psnr_std),
                s.ssim_mean,
                opt(s.ssim_std),
                s.nrmse_mean,
                opt(s.nrmse_std),
                s.epi_mean,
                opt(s.cnr_mean),
                opt(s.hausdorff_mean),
            )),
            None => csv.push_str(&format!(
                "{},{},,,,,,,,,,,{}\n",
                r.variant,
                r.status,
                csv_field(r.error.as_deref().unwrap_or("")),
            )),
        }
    }
    write_atomic(&out.join("ablation.csv"), csv.as_bytes())?;

    let bars: Vec<svg::Bar> = rows
        .iter()
        .filter_map(|r| {
            r.summary.as_ref().map(|s| svg::Bar {
                label: r.variant.clone(),
                value: s.psnr_mean,
                err: s.psnr_std,
            })
        })
        .collect();
    let chart = svg::bar_chart("test PSNR by variant", "PSNR (dB)", &bars);
    write_atomic(&out.join("ablation_psnr.svg"), chart.as_bytes())
}

fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:<7} {:>16} {:>16} {:>16} {:>8} {:>8} {:>9}\n",
        "variant", "status", "psnr", "ssim", "nrmse", "epi", "cnr", "hausdorff"
    ));
    let pm = |m: f64, s: Option<f64>| match s {
        Some(s) => format!("{m:.3} ± {s:.3}"),
        None => format!("{m:.3}"),
    };
    let o2 = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    for r in rows {
        match &r.summary {
            Some(s) => out.push_str(&format!(
                "{:<14} {:<7} {:>16} {:>16} {:>16} {:>8} {:>8} {:>9}\n",
                r.variant,
                r.status,
                pm(s.psnr_mean, s.psnr_std),
                pm(s.ssim_mean, s.ssim_std),
                pm(s.nrmse_mean, s.nrmse_std),
                format!("{:.3}", s.epi_mean),
                o2(s.cnr_mean),
                o2(s.hausdorff_mean),
            )),
            None => out.push_str(&format!(
                "{:<14} {:<7} {}\n",
                r.variant,
                r.status,
                r.error.as_deref().unwrap_or(""),
            )),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories (evaluate/ablate-variant outputs and/or train runs).
    #[arg(required = true, value_name = "RUN_DIR")]
    pub runs: Vec<PathBuf>,
}

pub fn report_cmd(globals: &Globals, args: &ReportArgs) -> Result<()> {
    let out = globals.out_dir()?;
    claim_out_dir(out, globals.force)?;
    let merged = report::merge_runs(&args.runs, out)?;
    if !merged.rows.is_empty() {
        print!("{}", format_summary_table(&summarize(&merged.rows)));
    }
    println!("merged report for {} run(s) in {}", args.runs.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_defaults_skip_bare_denoised_dirs() {
        assert_eq!(default_run_id(Path::new("runs/full/denoised")), "full");
        assert_eq!(default_run_id(Path::new("runs/outputs")), "outputs");
        assert_eq!(default_run_id(Path::new("denoised")), "eval");
    }

    #[test]
    fn csv_fields_with_commas_are_quoted() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn out_dir_claim_refuses_nonempty_without_force() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x"), b"y").unwrap();
        assert!(claim_out_dir(dir.path(), false).is_err());
        claim_out_dir(dir.path(), true).unwrap();
    }
}
