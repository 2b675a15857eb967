//! Command-line front end used by the `lensless` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{
    import_dataset, multimask_sweep, psf_corruption_sweep, run_benchmark, simulate_dataset, snr_robustness_sweep,
    BenchRun, DeskOptics, ImportOptions, Interpolation, PsfSource, SceneSpec, SweepConfig,
};
use crate::error::{Error, ErrorCategory, Result};
use crate::forward::NoiseSpec;
use crate::io;
use crate::metrics::{data_fidelity, score, ReportFormat};
use crate::mismatch::audit;
use crate::optics::{random_mask, simulate_psf, MaskPattern, Normalization, OpticalGeometry, RGB_WAVELENGTHS};
use crate::recover::{run_pipeline_recorded, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "lensless", version, about = "Lensless imaging simulation, reconstruction and benchmarking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report format.
    #[arg(long, value_parser = ["csv", "json"])]
    pub format: Option<String>,
}

impl Common {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out <dir> is required".into()))
    }

    fn format(&self) -> Result<ReportFormat> {
        self.format.as_deref().unwrap_or("json").parse()
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// PSF simulation.
    Psf {
        #[command(subcommand)]
        action: PsfAction,
    },
    /// Programmable-mask patterns.
    Mask {
        #[command(subcommand)]
        action: MaskAction,
    },
    /// Dataset ingestion and simulation.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Reconstructs one measurement.
    Recover {
        /// Measurement (.npy, .png, .tif).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        psf: PathBuf,
        /// Ground truth to score against.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    /// Robustness and multi-mask sweeps.
    Sweep {
        #[arg(value_parser = ["snr", "psf", "mask"])]
        kind: String,
        /// Run cells one at a time.
        #[arg(long)]
        serial: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluates the mismatch decompositions on random instances.
    Decompose {
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Subcommand)]
pub enum PsfAction {
    Simulate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Subcommand)]
pub enum MaskAction {
    Random {
        #[arg(long, default_value_t = crate::optics::DIGICAM_MASK_DIMS.0)]
        rows: usize,
        #[arg(long, default_value_t = crate::optics::DIGICAM_MASK_DIMS.1)]
        cols: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetAction {
    Import {
        root: PathBuf,
        #[arg(long)]
        downsample: Option<usize>,
        #[arg(long, value_parser = ["nearest", "bilinear"])]
        interpolation: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    Simulate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Subcommand)]
pub enum BenchAction {
    Run {
        /// Dataset root holding a manifest or a lensless/lensed layout.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        serial: bool,
        #[command(flatten)]
        common: Common,
    },
}

/// `psf simulate` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsfSimConfig {
    pub mask_seed: u64,
    pub sensor_height: usize,
    pub sensor_width: usize,
    pub optics: DeskOptics,
    pub normalization: Normalization,
    /// Mask JSON written by `mask random`; replaces the seeded mask.
    pub mask: Option<PathBuf>,
}

impl Default for PsfSimConfig {
    fn default() -> Self {
        Self {
            mask_seed: 0,
            sensor_height: 64,
            sensor_width: 64,
            optics: DeskOptics::default(),
            normalization: Normalization::UnitSum,
            mask: None,
        }
    }
}

/// `dataset simulate` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSimConfig {
    pub scenes: SceneSpec,
    pub psf: PsfSource,
    pub optics: DeskOptics,
    pub noise: NoiseSpec,
}

impl Default for DatasetSimConfig {
    fn default() -> Self {
        Self {
            scenes: SceneSpec::default(),
            psf: PsfSource::default(),
            optics: DeskOptics::default(),
            noise: NoiseSpec::noiseless(),
        }
    }
}

/// `bench run` configuration: the pipelines to compare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<PipelineConfig>,
}

fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => io::read_toml(p),
        None => Ok(T::default()),
    }
}

fn write_run(run: &BenchRun, common: &Common) -> Result<()> {
    let path = run.write(common.out()?, common.format()?)?;
    let agg = &run.report.metrics.aggregate;
    println!(
        "{}: {} rows, mean PSNR {}, mean SSIM {}, {} failed -> {}",
        run.report.kind,
        run.report.metrics.rows.len(),
        agg.psnr_db.map_or("n/a".into(), |v| format!("{v:.2} dB")),
        agg.ssim.map_or("n/a".into(), |v| format!("{v:.4}")),
        agg.failed,
        path.display()
    );
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Psf {
            action: PsfAction::Simulate { common },
        } => {
            let mut cfg: PsfSimConfig = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.mask_seed = s;
            }
            let mask = match &cfg.mask {
                Some(p) => {
                    let m: MaskPattern = io::read_json(p)?;
                    MaskPattern::new(m.rows, m.cols, m.weights().to_vec(), m.layout, m.deadspace_enabled)?
                }
                None => random_mask(cfg.mask_seed, cfg.optics.mask_rows, cfg.optics.mask_cols)?,
            };
            let geometry = OpticalGeometry::from_sensor(
                cfg.sensor_height,
                cfg.sensor_width,
                cfg.optics.sensor_pitch,
                cfg.optics.d1,
                cfg.optics.d2,
            )?;
            let psf = simulate_psf(&mask, &geometry, &RGB_WAVELENGTHS, cfg.optics.variant, cfg.normalization)?;
            let out = common.out()?;
            io::ensure_dir(out)?;
            io::save_psf(&out.join("psf.npy"), &psf)?;
            let peak = psf.image().max();
            io::write_png8(&out.join("psf.png"), &psf.image().scaled(1.0 / peak.max(f64::MIN_POSITIVE)))?;
            io::write_json(&out.join("mask.json"), &mask)?;
            println!("PSF {}x{}x{} -> {}", cfg.sensor_height, cfg.sensor_width, psf.channels(), out.display());
        }
        Command::Mask {
            action: MaskAction::Random { rows, cols, common },
        } => {
            let mask = random_mask(common.seed.unwrap_or(0), rows, cols)?;
            let out = common.out()?;
            io::ensure_dir(out)?;
            io::write_json(&out.join("mask.json"), &mask)?;
            println!("mask {rows}x{cols} -> {}", out.join("mask.json").display());
        }
        Command::Dataset {
            action:
                DatasetAction::Import {
                    root,
                    downsample,
                    interpolation,
                    common,
                },
        } => {
            let interpolation = interpolation.map(|s| s.parse::<Interpolation>()).transpose()?;
            let mut manifest = import_dataset(&root, ImportOptions { downsample, interpolation })?;
            match &common.out {
                Some(out) => {
                    io::ensure_dir(out)?;
                    io::write_json(&out.join(crate::bench::MANIFEST_FILE), &manifest)?;
                }
                None => {
                    manifest.root = root.clone();
                    manifest.write()?;
                }
            }
            println!("imported {} entries from {}", manifest.entries.len(), root.display());
        }
        Command::Dataset {
            action: DatasetAction::Simulate { common },
        } => {
            let mut cfg: DatasetSimConfig = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.noise.seed = s;
                cfg.scenes.seed = s;
            }
            let scenes = cfg.scenes.build()?;
            let psf = cfg.psf.build(&cfg.optics, &cfg.scenes)?;
            let m = simulate_dataset(&scenes, &psf, &cfg.noise, common.out()?)?;
            println!("simulated {} pairs -> {}", m.entries.len(), m.root.display());
        }
        Command::Recover {
            input,
            psf,
            truth,
            common,
        } => {
            let cfg = match &common.config {
                Some(p) => PipelineConfig::from_toml_file(p)?,
                None => PipelineConfig::admm100(),
            };
            let meas = io::read_image(&input)?;
            let psf = io::load_psf(&psf)?;
            let (recon, record) = run_pipeline_recorded(&meas, &psf, &cfg)?;
            let out = common.out()?;
            io::ensure_dir(out)?;
            io::write_npy(&out.join("recon.npy"), &recon)?;
            io::write_png8(&out.join("recon.png"), &recon.scaled(1.0 / recon.max().max(f64::MIN_POSITIVE)))?;
            io::write_json(&out.join("run.json"), &record)?;
            if let Some(t) = truth {
                let truth = io::read_image(&t)?;
                let s = score(&truth, &recon, None, None)?;
                let row = crate::metrics::MetricsRow::scored(
                    input.file_stem().and_then(|s| s.to_str()).unwrap_or("input"),
                    &s,
                    Some(data_fidelity(&meas, &recon, &psf)?),
                );
                let fp = crate::metrics::fingerprint(&serde_json::to_string(&cfg).unwrap_or_default());
                let report = crate::metrics::MetricsReport::new(fp, vec![row]);
                let format = common.format()?;
                report.write(&out.join(format!("metrics.{}", format.extension())), format)?;
                println!("PSNR {:.2} dB, SSIM {:.4}", s.psnr_db, s.ssim);
            }
            println!("{} -> {}", cfg.label(), out.display());
        }
        Command::Bench {
            action: BenchAction::Run { data, serial, common },
        } => {
            let methods = match &common.config {
                Some(p) => {
                    let cfg: BenchConfig = io::read_toml(p)?;
                    cfg.methods
                }
                None => vec![PipelineConfig::admm100()],
            };
            let manifest = import_dataset(&data, ImportOptions::default())?;
            write_run(&run_benchmark(&manifest, &methods, !serial)?, &common)?;
        }
        Command::Sweep { kind, serial, common } => {
            let mut cfg = match &common.config {
                Some(p) => SweepConfig::from_toml_file(p)?,
                None => SweepConfig::default(),
            };
            if let Some(s) = common.seed {
                cfg.master_seed = s;
            }
            if serial {
                cfg.parallel = false;
            }
            let run = match kind.as_str() {
                "snr" => snr_robustness_sweep(&cfg)?,
                "psf" => psf_corruption_sweep(&cfg)?,
                _ => multimask_sweep(&cfg)?,
            };
            write_run(&run, &common)?;
        }
        Command::Decompose { trials, common } => {
            let report = audit(common.seed.unwrap_or(0), trials)?;
            let out = common.out()?;
            io::ensure_dir(out)?;
            match common.format()? {
                ReportFormat::Json => io::write_json(&out.join("decompose.json"), &report)?,
                ReportFormat::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    let csv_err = |e: csv::Error| Error::InvalidParameter(e.to_string());
                    w.write_record(["identity", "trials", "max_relative_residual", "mean_relative_residual"])
                        .map_err(csv_err)?;
                    for id in &report.identities {
                        w.write_record([
                            id.name.clone(),
                            id.trials.to_string(),
                            id.max_relative_residual.to_string(),
                            id.mean_relative_residual.to_string(),
                        ])
                        .map_err(csv_err)?;
                    }
                    let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(e.to_string()))?;
                    let path = out.join("decompose.csv");
                    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
                }
            }
            for id in &report.identities {
                println!("{:<18} max relative residual {:.3e}", id.name, id.max_relative_residual);
            }
        }
    }
    Ok(())
}

/// Exit code for an error: 1 usage, 2 data, 3 numerical.
pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        ErrorCategory::Usage => 1,
        ErrorCategory::Data => 2,
        ErrorCategory::Numerical => 3,
    }
}

/// Parses `args`, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
