//! Stage-per-subcommand driver. Every stage reads its predecessors' files
//! from the data directory and writes its own next to them.
//!
//! Exit codes: 0 success, 1 I/O or format failure, 2 usage error,
//! 3 missing prerequisite, 4 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{invalid, Error, Result};
use crate::io::{
    load_checkpoint, load_image, load_sinogram, parse_key_values, pgm_bytes, save_checkpoint, save_image,
    save_sinogram, CheckpointMeta,
};
use crate::metrics::{psnr, ssim, MetricRow, MetricsReport, Summary};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::pipeline::{reconstruct_dbp_with_stride, INFER_PATCH, INFER_STRIDE, train_with, Preset, Scan, SplitManifest, TrainConfig};
use crate::projection::{build_bp_tensor, fbp, radon, uniform_angles, ProjectionGeometry};

pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dbp", version, about = "Sparse-view CT reconstruction: FBP and deep back projection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate multi-grain phantoms (phantom_XXXX.dbpt).
    GenData(GenDataArgs),
    /// Forward-project every phantom (sino_XXXX.dbpt).
    Project(ProjectArgs),
    /// Filtered back projection of every sinogram (fbp_XXXX.dbpt).
    Fbp(DataArgs),
    /// Train the network on the training split (model.dbpm).
    Train(TrainArgs),
    /// Reconstruct every sinogram with a trained model (dbp_XXXX.dbpt).
    Infer(InferArgs),
    /// Score FBP and DBP reconstructions of the test split.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grain count range, LO:HI.
    #[arg(long, default_value = "6:14")]
    pub grains: String,
}

#[derive(Debug, Clone, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub views: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "lite")]
    pub preset: String,
    /// Checkpoint path; defaults to DATA/model.dbpm.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of leading scan ids used for training; defaults to 80%.
    #[arg(long)]
    pub train_count: Option<usize>,
    /// Override the preset's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the preset's patches per training scan.
    #[arg(long)]
    pub patches_per_scan: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Stride between the 8x8 inference tiles; below 8 overlapping tiles are averaged.
    #[arg(long, default_value_t = INFER_STRIDE)]
    pub tile_stride: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Directory holding the phantoms (ground truth) and split.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding fbp_/dbp_ reconstructions; defaults to DATA.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Report path; defaults to DATA/report.csv.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write compare_XXXX.pgm (FBP | DBP | ground truth) per test scan.
    #[arg(long)]
    pub export_pgm: bool,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidInput(_) | Error::Usage(_) => EXIT_USAGE,
        Error::MissingPrerequisite(_) => EXIT_MISSING,
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Format { .. } | Error::Io(_) => EXIT_IO,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Project(a) => project(&a),
        Command::Fbp(a) => fbp_stage(&a),
        Command::Train(a) => train_stage(&a).map(|_| ()),
        Command::Infer(a) => infer(&a),
        Command::Eval(a) => eval(&a).map(|_| ()),
    }
}

pub fn scan_file(dir: &Path, prefix: &str, id: usize) -> PathBuf {
    dir.join(format!("{prefix}_{id:04}.dbpt"))
}

/// Scan ids of the `phantom_XXXX.dbpt` files in `dir`, ascending.
pub fn scan_ids(dir: &Path) -> Result<Vec<usize>> {
    if !dir.is_dir() {
        return Err(Error::MissingPrerequisite(dir.to_path_buf()));
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name
            .strip_prefix("phantom_")
            .and_then(|s| s.strip_suffix(".dbpt"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            ids.push(id);
        }
    }
    if ids.is_empty() {
        return Err(Error::MissingPrerequisite(scan_file(dir, "phantom", 0)));
    }
    ids.sort_unstable();
    Ok(ids)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingPrerequisite(path))
    }
}

/// Merges one stage's resolved settings into `dir/config.txt` as
/// `stage.key=value` lines, sorted by key.
pub fn record_config(dir: &Path, stage: &str, entries: &[(&str, String)]) -> Result<()> {
    let path = dir.join("config.txt");
    let mut map: BTreeMap<String, String> = if path.exists() {
        parse_key_values(&fs::read_to_string(&path)?).map_err(invalid)?
    } else {
        BTreeMap::new()
    };
    let prefix = format!("{stage}.");
    map.retain(|k, _| !k.starts_with(&prefix));
    for (k, v) in entries {
        map.insert(format!("{prefix}{k}"), v.clone());
    }
    let text: String = map.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(path, text)?;
    Ok(())
}

fn parse_grains(s: &str) -> Result<(usize, usize)> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| invalid(format!("--grains expects LO:HI, got {s:?}")))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| invalid(format!("--grains {s:?}: {e}")));
    Ok((p(lo)?, p(hi)?))
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let (min_grains, max_grains) = parse_grains(&args.grains)?;
    if args.count == 0 {
        return Err(invalid("--count must be at least 1"));
    }
    let template = PhantomSpec {
        size: args.size,
        min_grains,
        max_grains,
        ..PhantomSpec::default()
    };
    template.validate()?;
    fs::create_dir_all(&args.out)?;
    for k in 0..args.count {
        let spec = PhantomSpec {
            seed: args.seed.wrapping_add(k as u64),
            ..template.clone()
        };
        save_image(&scan_file(&args.out, "phantom", k), &generate_phantom(&spec)?)?;
    }
    record_config(
        &args.out,
        "gen-data",
        &[
            ("count", args.count.to_string()),
            ("size", args.size.to_string()),
            ("seed", args.seed.to_string()),
            ("grains", format!("{min_grains}:{max_grains}")),
            ("intensity", format!("{}:{}", template.min_intensity, template.max_intensity)),
        ],
    )
}

pub fn project(args: &ProjectArgs) -> Result<()> {
    if args.views == 0 {
        return Err(invalid("--views must be at least 1"));
    }
    let angles = uniform_angles(args.views);
    let mut size = None;
    for id in scan_ids(&args.data)? {
        let image = load_image(&scan_file(&args.data, "phantom", id))?;
        size = Some(image.size());
        let geometry = ProjectionGeometry::new(image.size());
        save_sinogram(&scan_file(&args.data, "sino", id), &radon(&image, &angles, &geometry)?)?;
    }
    let size = size.expect("at least one scan");
    record_config(
        &args.data,
        "project",
        &[
            ("views", args.views.to_string()),
            ("angles", "uniform j*pi/views".into()),
            ("channels", size.to_string()),
            ("detector_pitch", "1".into()),
        ],
    )
}

pub fn fbp_stage(args: &DataArgs) -> Result<()> {
    let mut views = 0;
    for id in scan_ids(&args.data)? {
        let sino = load_sinogram(&require(scan_file(&args.data, "sino", id))?)?;
        views = sino.views();
        let geometry = ProjectionGeometry::new(sino.channels());
        save_image(&scan_file(&args.data, "fbp", id), &fbp(&sino, &geometry)?)?;
    }
    record_config(
        &args.data,
        "fbp",
        &[
            ("filter", "ram-lak".into()),
            ("views", views.to_string()),
            ("clamp", "0:1".into()),
        ],
    )
}

/// Loads phantoms and sinograms and stacks the back projections.
pub fn load_scans(dir: &Path) -> Result<Vec<Scan>> {
    let ids = scan_ids(dir)?;
    if ids != (0..ids.len()).collect::<Vec<_>>() {
        return Err(invalid("scan ids must be contiguous from 0"));
    }
    let mut scans = Vec::with_capacity(ids.len());
    for id in ids {
        let image = load_image(&scan_file(dir, "phantom", id))?;
        let sino = load_sinogram(&require(scan_file(dir, "sino", id))?)?;
        let geometry = ProjectionGeometry::new(image.size());
        let bp = build_bp_tensor(&sino, &geometry)?;
        scans.push(Scan { id, image, bp });
    }
    Ok(scans)
}

pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let preset: Preset = args.preset.parse()?;
    let mut config = TrainConfig::for_preset(preset);
    config.seed = args.seed;
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(p) = args.patches_per_scan {
        config.patches_per_scan = p;
    }
    config.validate()?;
    Ok(config)
}

pub fn train_stage(args: &TrainArgs) -> Result<PathBuf> {
    let config = resolve_train_config(args)?;
    let scans = load_scans(&args.data)?;
    let manifest = match args.train_count {
        Some(n) => SplitManifest::ordered(scans.len(), n)?,
        None => SplitManifest::default_for(scans.len())?,
    };
    let model_path = args.out.clone().unwrap_or_else(|| args.data.join("model.dbpm"));
    fs::write(args.data.join("split.txt"), manifest.to_text())?;

    let log_path = args.data.join("train_log.csv");
    let mut log_file = fs::File::create(&log_path)?;
    let mut write_err = None;
    let (model, log) = train_with(&scans, &manifest, &config, |e| {
        eprintln!("epoch {:>3}  lr {:.3e}  loss {:.6}", e.epoch, e.lr, e.mean_loss);
        if let Err(err) = writeln!(log_file, "{},{},{}", e.epoch, e.lr, e.mean_loss).and_then(|_| log_file.flush()) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(err.into());
    }
    if let Some(e) = log.epochs.iter().find(|e| !e.mean_loss.is_finite()) {
        return Err(Error::Numerical(format!("non-finite loss at epoch {}", e.epoch)));
    }

    let meta = CheckpointMeta {
        arch: model.architecture(),
        size: scans[0].image.size(),
        seed: config.seed,
        epochs: config.epochs,
    };
    if let Some(parent) = model_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&model_path, &model, &meta)?;
    record_config(
        &args.data,
        "train",
        &[
            ("preset", config.preset.to_string()),
            ("epochs", config.epochs.to_string()),
            ("batch_size", config.batch_size.to_string()),
            ("lr_start", config.lr_start.to_string()),
            ("lr_end", config.lr_end.to_string()),
            ("patches_per_scan", config.patches_per_scan.to_string()),
            ("patch_size", config.patch_size.to_string()),
            ("depth", config.depth.to_string()),
            ("width", config.width.to_string()),
            ("seed", config.seed.to_string()),
            ("train_scans", manifest.train.len().to_string()),
            ("test_scans", manifest.test.len().to_string()),
            ("model", model_path.display().to_string()),
        ],
    )?;
    Ok(model_path)
}

pub fn infer(args: &InferArgs) -> Result<()> {
    if args.tile_stride == 0 {
        return Err(invalid("--tile-stride must be at least 1"));
    }
    let (model, meta) = load_checkpoint(&args.model)?;
    for id in scan_ids(&args.data)? {
        let sino = load_sinogram(&require(scan_file(&args.data, "sino", id))?)?;
        if sino.views() != meta.arch.views {
            return Err(invalid(format!(
                "{} has {} views but the checkpoint was trained on {}",
                scan_file(&args.data, "sino", id).display(),
                sino.views(),
                meta.arch.views
            )));
        }
        let geometry = ProjectionGeometry::new(sino.channels());
        save_image(&scan_file(&args.data, "dbp", id), &reconstruct_dbp_with_stride(&sino, &model, &geometry, args.tile_stride)?)?;
    }
    record_config(
        &args.data,
        "infer",
        &[
            ("model", args.model.display().to_string()),
            ("views", meta.arch.views.to_string()),
            ("depth", meta.arch.depth.to_string()),
            ("width", meta.arch.width.to_string()),
            ("tile_patch", INFER_PATCH.to_string()),
            ("tile_stride", args.tile_stride.to_string()),
        ],
    )
}

/// Test ids from `split.txt`, or every scan when no split was written.
pub fn test_ids(dir: &Path) -> Result<Vec<usize>> {
    let split = dir.join("split.txt");
    if split.exists() {
        Ok(SplitManifest::from_text(&fs::read_to_string(split)?)?.test)
    } else {
        scan_ids(dir)
    }
}

pub fn eval(args: &EvalArgs) -> Result<MetricsReport> {
    let pred_dir = args.pred.clone().unwrap_or_else(|| args.data.clone());
    let report_path = args.report.clone().unwrap_or_else(|| args.data.join("report.csv"));
    let ids = test_ids(&args.data)?;
    let mut report = MetricsReport::default();
    for &id in &ids {
        let truth = load_image(&scan_file(&args.data, "phantom", id))?;
        let fbp_img = load_image(&require(scan_file(&pred_dir, "fbp", id))?)?;
        let dbp_img = load_image(&require(scan_file(&pred_dir, "dbp", id))?)?;
        for (method, img) in [("FBP", &fbp_img), ("DBP", &dbp_img)] {
            report.push(MetricRow {
                scan: id,
                method: method.into(),
                psnr_db: psnr(img, &truth, 1.0)?,
                ssim: ssim(img, &truth)?,
            });
        }
        if args.export_pgm {
            fs::write(
                args.data.join(format!("compare_{id:04}.pgm")),
                pgm_bytes(&[&fbp_img, &dbp_img, &truth])?,
            )?;
        }
    }
    if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&report_path, report.to_csv())?;
    for agg in report.aggregates() {
        println!(
            "{}: PSNR {} dB, SSIM {}",
            agg.method,
            Summary::display(agg.psnr),
            Summary::display(agg.ssim)
        );
    }
    record_config(
        &args.data,
        "eval",
        &[
            ("pred", pred_dir.display().to_string()),
            ("report", report_path.display().to_string()),
            ("export_pgm", args.export_pgm.to_string()),
            ("test_scans", ids.len().to_string()),
        ],
    )?;
    Ok(report)
}
