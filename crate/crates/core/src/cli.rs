//! The `dosepet` command line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, SliceMetrics};
use crate::nn::{ModelParams, Tensor};
use crate::phantom::{self, Dataset, DatasetSpec, DRFS};
use crate::train::{self, EpochLog, PredictionModel, TrainConfig};

pub const CONFIG_ECHO: &str = "config.toml";
pub const PRETRAIN_STEM: &str = "pretrain";

/// Settings of one training or evaluation run, loadable from TOML. Every
/// field can be overridden on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Pre-trained checkpoint stem (or run directory) for the prediction phase.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: None,
            pretrained: None,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::invalid("no dataset directory given (use --data)"))
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::invalid("no output directory given (use --out)"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "dosepet", version, about = "Multi-dose-level low-dose PET reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a paired LPET/SPET dataset.
    Generate(GenerateArgs),
    /// Pre-train PretrainNet on reconstruction plus dose classification.
    Pretrain(RunArgs),
    /// Train CPNet and RefineNet end to end.
    Train(TrainArgs),
    /// Score a trained model on the test split.
    Evaluate(EvaluateArgs),
    /// Reconstruct a single LPET slice and export PNG panels.
    Infer(InferArgs),
    /// Run the four ablation variants on identical data and seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = DatasetSpec::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = DatasetSpec::default().train_subjects)]
    train_subjects: u32,
    #[arg(long, default_value_t = DatasetSpec::default().test_subjects)]
    test_subjects: u32,
    #[arg(long, default_value_t = DatasetSpec::default().slices_per_subject)]
    slices: u32,
    #[arg(long, default_value_t = DatasetSpec::default().size)]
    size: usize,
    /// Expected counts of a unit-intensity pixel at full dose.
    #[arg(long, default_value_t = DatasetSpec::default().total_counts)]
    counts: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shuffle: Option<bool>,
    #[arg(long)]
    detach_residual_target: Option<bool>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    freeze_encoder: Option<bool>,
    #[arg(long)]
    use_refinenet: Option<bool>,
    #[arg(long)]
    fixed_lambda: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(epochs, lr, batch_size, beta, seed, shuffle, detach_residual_target, base_channels, freeze_encoder, use_refinenet);
        if self.fixed_lambda.is_some() {
            c.fixed_lambda = self.fixed_lambda;
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pre-trained checkpoint stem, or a pretrain run directory.
    #[arg(long, conflicts_with = "no_pretrain")]
    pretrained: Option<PathBuf>,
    /// Train from random initialization.
    #[arg(long)]
    no_pretrain: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory holding the trained `cpnet` (and `refinenet`) checkpoints.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report directory; defaults to the model directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-slice metric CSV of a baseline; adds paired t-test p-values.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Square LPET slice as raw little-endian f32.
    #[arg(long)]
    lpet: PathBuf,
    /// Matching SPET slice; enables the error map and sets the display window.
    #[arg(long)]
    spet: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Training seeds; results are averaged over them.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Pre-training epochs, when different from the prediction phase.
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Pre-training learning rate, when different from the prediction phase.
    #[arg(long)]
    pretrain_lr: Option<f64>,
    /// Run the variants of each seed on parallel threads.
    #[arg(long)]
    parallel: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 2 for invalid input, 1 for everything that failed while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Shape { .. } | Error::InvalidArgument(_) => 2,
        Error::NonFinite(_) | Error::Io { .. } | Error::Format { .. } => 1,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let spec = DatasetSpec {
        seed: a.seed,
        train_subjects: a.train_subjects,
        test_subjects: a.test_subjects,
        slices_per_subject: a.slices,
        size: a.size,
        total_counts: a.counts,
    };
    let manifest = phantom::build_dataset(&spec, &a.out)?;
    manifest.validate(&a.out)?;
    println!(
        "wrote {} files for {} subjects to {}",
        manifest.files.len(),
        manifest.subjects.len(),
        a.out.display()
    );
    Ok(())
}

fn resolve(run: &RunArgs) -> Result<RunConfig> {
    let mut c = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if run.data.is_some() {
        c.data = run.data.clone();
    }
    if run.out.is_some() {
        c.out = run.out.clone();
    }
    run.train.apply(&mut c.train);
    c.train.validate()?;
    Ok(c)
}

fn start_run(config: &RunConfig) -> Result<(Dataset, PathBuf)> {
    let data = Dataset::load(config.data_dir()?)?;
    let out = config.out_dir()?.to_path_buf();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join(CONFIG_ECHO), &config.to_toml())?;
    Ok((data, out))
}

fn progress(phase: &'static str) -> impl FnMut(&EpochLog) {
    move |l: &EpochLog| eprintln!("{phase} epoch {:>3}  total {:.5}  ({:.1}s)", l.epoch, l.total, l.seconds)
}

fn cmd_pretrain(a: RunArgs) -> Result<()> {
    let config = resolve(&a)?;
    let (data, out) = start_run(&config)?;
    let outcome = train::run_pretrain_observed(&data.train, &config.train, progress("pretrain"))?;
    outcome.save(&out.join(PRETRAIN_STEM))?;
    write(&out.join("pretrain_log.csv"), &train::logs_to_csv(&outcome.logs))?;
    let acc = train::classification_accuracy(&outcome.net, &outcome.params, &data.test)?;
    let report = format!("test_slices = {}\ntest_accuracy = {acc:?}\n", data.test.len());
    write(&out.join("pretrain_report.toml"), &report)?;
    println!("test dose classification accuracy: {:.4}", acc);
    println!("run directory: {}", out.display());
    Ok(())
}

/// Accepts a checkpoint stem or a directory containing `pretrain.*`.
fn pretrained_stem(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(PRETRAIN_STEM)
    } else {
        path.to_path_buf()
    }
}

fn load_pretrained_params(path: &Path) -> Result<ModelParams<f32>> {
    Ok(train::load_pretrained(&pretrained_stem(path))?.1)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut config = resolve(&a.run)?;
    if a.pretrained.is_some() {
        config.pretrained = a.pretrained.clone();
    }
    if a.no_pretrain {
        config.pretrained = None;
    } else if config.pretrained.is_none() {
        return Err(Error::invalid("pass --pretrained <checkpoint> or --no-pretrain"));
    }
    let (data, out) = start_run(&config)?;
    let pre = config
        .pretrained
        .as_deref()
        .map(load_pretrained_params)
        .transpose()?;
    let outcome = train::run_prediction_phase_observed(&data.train, pre.as_ref(), &config.train, progress("train"))?;
    outcome.model.save(&out)?;
    write(&out.join("train_log.csv"), &train::logs_to_csv(&outcome.logs))?;
    let report = evaluate_into(&outcome.model, &data, &out, None)?;
    print!("{}", report.to_table());
    println!("run directory: {}", out.display());
    Ok(())
}

/// Scores `model` on the test split and writes `report.txt`, `report.csv`,
/// `slices.csv` and the raw-LPET reference `lpet_slices.csv` into `out`.
pub fn evaluate_into(
    model: &PredictionModel,
    data: &Dataset,
    out: &Path,
    baseline: Option<(&str, &[SliceMetrics])>,
) -> Result<MetricsReport> {
    let slices = metrics::evaluate_model(model, &data.test)?;
    let report = MetricsReport::from_slices("RPET", &slices, baseline)?;
    let lpet = metrics::score_lpet(&data.test)?;
    let lpet_report = MetricsReport::from_slices("LPET", &lpet, None)?;
    write(&out.join("report.txt"), &format!("{}\n{}", report.to_table(), lpet_report.to_table()))?;
    write(&out.join("report.csv"), &format!("{}{}", report.to_csv(), lpet_report.to_csv().lines().skip(1).map(|l| format!("{l}\n")).collect::<String>()))?;
    write(&out.join("slices.csv"), &metrics::slices_to_csv(&slices))?;
    write(&out.join("lpet_slices.csv"), &metrics::slices_to_csv(&lpet))?;
    Ok(report)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let model = PredictionModel::load(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let out = a.out.clone().unwrap_or_else(|| a.model.clone());
    let base = a.baseline.as_deref().map(metrics::read_slice_csv).transpose()?;
    let name = a
        .baseline
        .as_deref()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    let report = evaluate_into(&model, &data, &out, base.as_deref().map(|b| (name.as_str(), b)))?;
    print!("{}", report.to_table());
    println!("reports written to {}", out.display());
    Ok(())
}

fn read_square(path: &Path) -> Result<(Vec<f32>, usize)> {
    let v = phantom::read_f32_file(path, None)?;
    let side = (v.len() as f64).sqrt().round() as usize;
    if side * side != v.len() || side == 0 {
        return Err(Error::shape("infer", "square image", format!("{} values", v.len())));
    }
    Ok((v, side))
}

/// Display window: SPET min-max when available, otherwise the RPET's.
fn window(values: &[f32]) -> (f32, f32) {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

/// Maps `[lo, hi]` onto 0..=255.
pub fn to_gray(values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    values
        .iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Signed values on a mid-gray background: 0 maps to 128, `±width` to the
/// ends of the range.
pub fn to_signed_gray(values: &[f32], width: f32) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (128.0 + v / width * 127.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn save_png(path: &Path, pixels: Vec<u8>, side: usize) -> Result<()> {
    let img = image::GrayImage::from_raw(side as u32, side as u32, pixels)
        .expect("pixel count matches image size");
    img.save(path).map_err(|e| Error::format(path, e))
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let model = PredictionModel::load(&a.model)?;
    let (lpet, side) = read_square(&a.lpet)?;
    let spet = match &a.spet {
        Some(p) => {
            let (s, n) = read_square(p)?;
            if n != side {
                return Err(Error::shape("infer", format!("{side}x{side} SPET"), format!("{n}x{n}")));
            }
            Some(s)
        }
        None => None,
    };
    let input = Tensor::new(vec![1, 1, side, side], lpet.clone())?;
    let pred = model.predict(&input)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    phantom::write_f32_file(&a.out.join("rpet.f32"), pred.rpet.data())?;
    let (lo, hi) = window(spet.as_deref().unwrap_or(pred.rpet.data()));
    save_png(&a.out.join("lpet.png"), to_gray(&lpet, lo, hi), side)?;
    save_png(&a.out.join("coarse.png"), to_gray(pred.coarse.data(), lo, hi), side)?;
    if let Some(r) = &pred.residual {
        save_png(&a.out.join("residual.png"), to_signed_gray(r.data(), hi - lo), side)?;
    }
    save_png(&a.out.join("rpet.png"), to_gray(pred.rpet.data(), lo, hi), side)?;
    if let Some(s) = &spet {
        let err: Vec<f32> = pred.rpet.data().iter().zip(s).map(|(r, t)| (r - t).abs()).collect();
        save_png(&a.out.join("error.png"), to_gray(&err, 0.0, hi - lo), side)?;
        println!(
            "PSNR LPET {:.3} dB, RPET {:.3} dB",
            metrics::psnr(&lpet, s)?,
            metrics::psnr(pred.rpet.data(), s)?
        );
    }
    println!("outputs written to {}", a.out.display());
    Ok(())
}

/// One row of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// CPNet alone from random initialization.
    A,
    /// CPNet with an encoder pre-trained on reconstruction only.
    B,
    /// CPNet with the two-task pre-trained encoder.
    C,
    /// (c) plus RefineNet.
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "(a)",
            Variant::B => "(b)",
            Variant::C => "(c)",
            Variant::D => "(d)",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::A => "CPNet, no pre-training",
            Variant::B => "CPNet + reconstruction-only pre-training",
            Variant::C => "CPNet + two-task pre-training",
            Variant::D => "CPNet + two-task pre-training + RefineNet",
        }
    }
}

/// Ablation outcome: per-variant slice metrics pooled over seeds.
#[derive(Debug, Clone)]
pub struct AblationResult {
    pub reports: Vec<(Variant, MetricsReport)>,
    /// Test dose-classification accuracy of the two-task PretrainNet, one
    /// entry per seed.
    pub pretrain_accuracy: Vec<f64>,
}

impl AblationResult {
    pub fn report(&self, v: Variant) -> &MetricsReport {
        &self.reports.iter().find(|(x, _)| *x == v).expect("all variants run").1
    }

    /// Table with one row per variant and PSNR/SSIM/NMSE per DRF.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mut drfs = DRFS.to_vec();
        drfs.reverse();
        let _ = write!(out, "{:<8}", "Variant");
        for d in &drfs {
            let _ = write!(out, " | {:^26}", format!("DRF={d}"));
        }
        let _ = write!(out, " | {:>9}\n{:<8}", "mean PSNR", "");
        for _ in &drfs {
            let _ = write!(out, " | {:>8} {:>8} {:>8}", "PSNR", "SSIM", "NMSE");
        }
        out.push_str(" |\n");
        for (v, r) in &self.reports {
            let _ = write!(out, "{:<8}", v.label());
            for d in &drfs {
                match r.row(*d) {
                    Some(row) => {
                        let psnr = row.psnr.map(|p| format!("{:.3}", p.mean)).unwrap_or_else(|| "inf".into());
                        let _ = write!(out, " | {:>8} {:>8.4} {:>8.4}", psnr, row.ssim.mean, row.nmse.mean);
                    }
                    None => {
                        let _ = write!(out, " | {:>8} {:>8} {:>8}", "-", "-", "-");
                    }
                }
            }
            let _ = writeln!(out, " | {:>9.3}", r.mean_psnr());
        }
        for v in Variant::ALL {
            let _ = writeln!(out, "{} {}", v.label(), v.description());
        }
        let acc = &self.pretrain_accuracy;
        let mean = acc.iter().sum::<f64>() / acc.len().max(1) as f64;
        let _ = writeln!(
            out,
            "phase-1 dose classification accuracy of (c): {:.4} (per seed: {})",
            mean,
            acc.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(", ")
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,drf,psnr,ssim,nmse,n_slices\n");
        for (v, r) in &self.reports {
            for row in &r.rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.9e},{:.9e},{}",
                    v.dir(),
                    row.drf,
                    row.psnr.map(|p| format!("{:.9e}", p.mean)).unwrap_or_else(|| "inf".into()),
                    row.ssim.mean,
                    row.nmse.mean,
                    row.n_slices
                );
            }
        }
        out
    }
}

/// Phase settings for the ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub parallel: bool,
}

/// Runs variants (a) to (d) for every seed. Variants of one seed share the
/// seed, so they see identical initializations (where shapes agree) and
/// identical batch orders. Per-variant logs and reports go under
/// `out/seed<k>/<variant>/` when `out` is given.
pub fn run_ablation(data: &Dataset, config: &AblationConfig, out: Option<&Path>) -> Result<AblationResult> {
    if config.seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let mut pooled: Vec<Vec<SliceMetrics>> = vec![Vec::new(); Variant::ALL.len()];
    let mut accuracy = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let pre_cfg = TrainConfig {
            seed,
            fixed_lambda: None,
            ..config.pretrain.clone()
        };
        let recon_only_cfg = TrainConfig {
            fixed_lambda: Some(1.0),
            ..pre_cfg.clone()
        };
        let (full, recon_only) = if config.parallel {
            rayon::join(
                || train::run_pretrain(&data.train, &pre_cfg),
                || train::run_pretrain(&data.train, &recon_only_cfg),
            )
        } else {
            (
                train::run_pretrain(&data.train, &pre_cfg),
                train::run_pretrain(&data.train, &recon_only_cfg),
            )
        };
        let (full, recon_only) = (full?, recon_only?);
        accuracy.push(train::classification_accuracy(&full.net, &full.params, &data.test)?);
        let seed_dir = out.map(|o| o.join(format!("seed{seed}")));
        if let Some(dir) = &seed_dir {
            write(&dir.join("pretrain_log.csv"), &train::logs_to_csv(&full.logs))?;
            write(&dir.join("pretrain_recon_only_log.csv"), &train::logs_to_csv(&recon_only.logs))?;
        }
        let job = |v: Variant| -> Result<Vec<SliceMetrics>> {
            let (pre, refine) = match v {
                Variant::A => (None, false),
                Variant::B => (Some(&recon_only.params), false),
                Variant::C => (Some(&full.params), false),
                Variant::D => (Some(&full.params), true),
            };
            let cfg = TrainConfig {
                seed,
                use_refinenet: refine,
                ..config.train.clone()
            };
            let outcome = train::run_prediction_phase(&data.train, pre, &cfg)?;
            if let Some(dir) = &seed_dir {
                let vdir = dir.join(v.dir());
                write(&vdir.join("train_log.csv"), &train::logs_to_csv(&outcome.logs))?;
                evaluate_into(&outcome.model, data, &vdir, None)?;
            }
            metrics::evaluate_model(&outcome.model, &data.test)
        };
        let results: Vec<Result<Vec<SliceMetrics>>> = if config.parallel {
            use rayon::prelude::*;
            Variant::ALL.par_iter().map(|&v| job(v)).collect()
        } else {
            Variant::ALL.iter().map(|&v| job(v)).collect()
        };
        for (pool, r) in pooled.iter_mut().zip(results) {
            pool.extend(r?);
        }
    }
    let reports = Variant::ALL
        .iter()
        .zip(&pooled)
        .map(|(&v, s)| Ok((v, MetricsReport::from_slices(v.label(), s, None)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationResult {
        reports,
        pretrain_accuracy: accuracy,
    })
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let config = resolve(&a.run)?;
    let (data, out) = start_run(&config)?;
    let mut pretrain = config.train.clone();
    if let Some(e) = a.pretrain_epochs {
        pretrain.epochs = e;
    }
    if let Some(lr) = a.pretrain_lr {
        pretrain.lr = lr;
    }
    pretrain.validate()?;
    let ab = AblationConfig {
        pretrain,
        train: config.train.clone(),
        seeds: a.seeds.clone(),
        parallel: a.parallel,
    };
    let result = run_ablation(&data, &ab, Some(&out))?;
    let table = result.to_table();
    write(&out.join("ablation.txt"), &table)?;
    write(&out.join("ablation.csv"), &result.to_csv())?;
    print!("{table}");
    println!("run directory: {}", out.display());
    Ok(())
}
