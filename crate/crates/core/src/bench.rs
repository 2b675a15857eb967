//! Datasets, procedural scenes, benchmarks and robustness sweeps.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorCategory, Result};
use crate::forward::{add_gaussian_noise, convolve_lsi, derive_seed, NoiseSpec};
use crate::grid::{ifft2, ComplexField, RealImage};
use crate::io;
use crate::metrics::{
    aggregate, data_fidelity, fingerprint, resize_bilinear, score, Aggregate, MetricsReport, MetricsRow,
    ReportFormat, RoiSpec,
};
use crate::optics::{
    random_mask, simulate_psf, Normalization, OpticalGeometry, Psf, PsfVariant, DEFAULT_D1, DEFAULT_D2,
    DIGICAM_MASK_DIMS, RGB_WAVELENGTHS,
};
use crate::recover::{run_pipeline, PipelineConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// Fraction of mask seeds used for training in the multi-mask split.
pub const TRAIN_FRACTION: f64 = 0.85;

pub const DEFAULT_SNR_LEVELS: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];

const LENSLESS_DIRS: [&str; 3] = ["lensless", "diffuser_images", "diffuser"];
const LENSED_DIRS: [&str; 3] = ["lensed", "ground_truth_lensed", "lensed_images"];
const IMAGE_EXTS: [&str; 4] = ["npy", "png", "tif", "tiff"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            _ => Err(Error::Config(format!("unknown interpolation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    /// Relative to the dataset root.
    pub lensless: PathBuf,
    pub lensed: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    pub psf: PathBuf,
    #[serde(default)]
    pub roi: Option<RoiSpec>,
    /// Integer downsampling applied on load to measurements, ground truth and PSF.
    #[serde(default = "one")]
    pub downsample: usize,
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default)]
    pub pixel_format: String,
}

fn one() -> usize {
    1
}

/// Overrides applied on import; `None` keeps the manifest value (or the default).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ImportOptions {
    pub downsample: Option<usize>,
    pub interpolation: Option<Interpolation>,
}

fn downsample(img: RealImage, factor: usize, interp: Interpolation) -> Result<RealImage> {
    if factor <= 1 {
        return Ok(img);
    }
    let (h, w, c) = img.dims();
    let (oh, ow) = (h / factor, w / factor);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("{h}x{w} cannot be downsampled by {factor}")));
    }
    match interp {
        Interpolation::Bilinear => resize_bilinear(&img, oh, ow),
        Interpolation::Nearest => {
            let mut out = RealImage::zeros(oh, ow, c);
            for r in 0..oh {
                for col in 0..ow {
                    for k in 0..c {
                        out.set(r, col, k, img.get(r * factor, col * factor, k));
                    }
                }
            }
            Ok(out)
        }
    }
}

impl DatasetManifest {
    pub fn path_of(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_psf(&self) -> Result<Psf> {
        let psf = io::load_psf(&self.path_of(&self.psf))?;
        if self.downsample <= 1 {
            return Ok(psf);
        }
        let img = downsample(psf.image().clone(), self.downsample, self.interpolation)?;
        let mut out = Psf::from_image(img, psf.normalization)?;
        out.wavelengths = psf.wavelengths.clone();
        out.variant = psf.variant;
        Ok(out)
    }

    /// Measurement and ground truth of one entry.
    pub fn load_pair(&self, entry: &DatasetEntry) -> Result<(RealImage, RealImage)> {
        let tag = |e: Error| match e {
            Error::Decode { path, message } => Error::Decode {
                path,
                message: format!("entry {}: {message}", entry.id),
            },
            other => other,
        };
        let meas = io::read_image(&self.path_of(&entry.lensless)).map_err(tag)?;
        let truth = io::read_image(&self.path_of(&entry.lensed)).map_err(tag)?;
        Ok((
            downsample(meas, self.downsample, self.interpolation)?,
            downsample(truth, self.downsample, self.interpolation)?,
        ))
    }

    /// Checks ids and that every referenced file decodes. All failing ids are
    /// listed in one error.
    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 {
            return Err(Error::Dataset("downsample factor must be >= 1".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate id {:?}", e.id)));
            }
        }
        let psf_path = self.path_of(&self.psf);
        if !psf_path.is_file() {
            return Err(Error::Dataset(format!("missing PSF {}", psf_path.display())));
        }
        io::load_psf(&psf_path)?;
        let failures: Vec<String> = self
            .entries
            .iter()
            .filter_map(|e| {
                let res = io::read_image(&self.path_of(&e.lensless)).and_then(|_| io::read_image(&self.path_of(&e.lensed)));
                res.err().map(|err| format!("{}: {err}", e.id))
            })
            .collect();
        if !failures.is_empty() {
            return Err(Error::Dataset(format!("{} unreadable entries: {}", failures.len(), failures.join("; "))));
        }
        Ok(())
    }

    pub fn write(&self) -> Result<()> {
        io::write_json(&self.root.join(MANIFEST_FILE), self)
    }
}

fn find_dir(root: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| root.join(n)).find(|p| p.is_dir())
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for item in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = item.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if out.insert(stem.to_string(), path.clone()).is_some() {
                    return Err(Error::Dataset(format!("duplicate id {stem:?} in {}", dir.display())));
                }
            }
        }
    }
    Ok(out)
}

/// Reads `root/manifest.json`, or builds a manifest from a `lensless/` +
/// `lensed/` directory pair and a `psf.*` file.
pub fn import_dataset(root: &Path, opts: ImportOptions) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.is_file() {
        let mut m: DatasetManifest = io::read_json(&manifest_path).map_err(|e| Error::Dataset(e.to_string()))?;
        m.root = root.to_path_buf();
        m
    } else {
        let lensless = find_dir(root, &LENSLESS_DIRS)
            .ok_or_else(|| Error::Dataset(format!("{}: no manifest and no lensless directory", root.display())))?;
        let lensed = find_dir(root, &LENSED_DIRS)
            .ok_or_else(|| Error::Dataset(format!("{}: no lensed directory", root.display())))?;
        let psf = ["psf.tiff", "psf.tif", "psf.png", "psf.npy"]
            .iter()
            .map(PathBuf::from)
            .find(|p| root.join(p).is_file())
            .ok_or_else(|| Error::Dataset(format!("missing PSF in {}", root.display())))?;
        let meas = image_files(&lensless)?;
        let truth = image_files(&lensed)?;
        let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).to_path_buf();
        let mut entries = Vec::new();
        for (id, path) in &meas {
            let gt = truth
                .get(id)
                .ok_or_else(|| Error::Dataset(format!("entry {id}: missing lensed file")))?;
            entries.push(DatasetEntry {
                id: id.clone(),
                lensless: rel(path),
                lensed: rel(gt),
            });
        }
        let roi_path = root.join("roi.json");
        let roi = if roi_path.is_file() {
            Some(io::read_json(&roi_path)?)
        } else {
            None
        };
        DatasetManifest {
            root: root.to_path_buf(),
            entries,
            psf,
            roi,
            downsample: 1,
            interpolation: Interpolation::Bilinear,
            pixel_format: String::new(),
        }
    };
    if let Some(d) = opts.downsample {
        manifest.downsample = d;
    }
    if let Some(i) = opts.interpolation {
        manifest.interpolation = i;
    }
    manifest.validate()?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: RealImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Gradient,
    Checkerboard,
    PinkNoise,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [SceneKind::Gradient, SceneKind::Checkerboard, SceneKind::PinkNoise];
}

fn rescale(plane: &mut [f64], lo: f64, hi: f64) {
    let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    plane.iter_mut().for_each(|v| *v = lo + (hi - lo) * (*v - min) / span);
}

fn gradient_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = theta.sin_cos();
    let mut plane: Vec<f64> = (0..h * w)
        .map(|i| dy * (i / w) as f64 / h as f64 + dx * (i % w) as f64 / w as f64)
        .collect();
    rescale(&mut plane, 0.1, 0.6);
    for _ in 0..rng.gen_range(2..5) {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (rh, rw) = (rng.gen_range(h / 8..h / 3 + 1), rng.gen_range(w / 8..w / 3 + 1));
        let level: f64 = rng.gen_range(0.2..0.9);
        for r in r0..(r0 + rh).min(h) {
            for c in c0..(c0 + rw).min(w) {
                plane[r * w + c] = level;
            }
        }
    }
    plane
}

fn checkerboard_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let cell = rng.gen_range(4..13usize);
    let (lo, hi): (f64, f64) = (rng.gen_range(0.05..0.35), rng.gen_range(0.6..0.95));
    let (or, oc) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
    (0..h * w)
        .map(|i| if ((i / w + or) / cell + (i % w + oc) / cell) % 2 == 0 { lo } else { hi })
        .collect()
}

/// Random-phase field with a `1/f` amplitude spectrum.
fn pink_noise_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<Vec<f64>> {
    let mut field = ComplexField::zeros(h, w, (1.0, 1.0))?;
    for r in 0..h {
        let fy = r.min(h - r) as f64 / h as f64;
        for c in 0..w {
            let fx = c.min(w - c) as f64 / w as f64;
            let f = (fy * fy + fx * fx).sqrt();
            if f > 0.0 {
                let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                field.set(r, c, num_complex::Complex64::from_polar(1.0 / f, phase));
            }
        }
    }
    let mut plane: Vec<f64> = ifft2(&field)?.as_slice().iter().map(|z| z.re).collect();
    rescale(&mut plane, 0.05, 0.95);
    Ok(plane)
}

/// Scene in `[0.05, 0.95]`; channels are drawn independently.
pub fn procedural_scene(kind: SceneKind, seed: u64, h: usize, w: usize, channels: usize) -> Result<RealImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes = (0..channels)
        .map(|_| match kind {
            SceneKind::Gradient => Ok(gradient_plane(&mut rng, h, w)),
            SceneKind::Checkerboard => Ok(checkerboard_plane(&mut rng, h, w)),
            SceneKind::PinkNoise => pink_noise_plane(&mut rng, h, w),
        })
        .collect::<Result<Vec<_>>>()?;
    RealImage::from_planes(h, w, &planes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    /// Directory of images to use instead of procedural scenes.
    pub dir: Option<PathBuf>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            count: 20,
            height: 64,
            width: 64,
            channels: 1,
            seed: 0,
            dir: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene count and dims must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("scenes need 1 or 3 channels, got {}", self.channels)));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Vec<Scene>> {
        self.validate()?;
        match &self.dir {
            Some(dir) => load_scene_dir(dir, self.count, self.height, self.width, self.channels),
            None => (0..self.count)
                .map(|i| {
                    let kind = SceneKind::ALL[i % SceneKind::ALL.len()];
                    Ok(Scene {
                        id: format!("scene_{i:03}"),
                        image: procedural_scene(kind, derive_seed(self.seed, i as u64), self.height, self.width, self.channels)?,
                    })
                })
                .collect(),
        }
    }
}

fn match_channels(img: RealImage, channels: usize) -> Result<RealImage> {
    let (h, w, c) = img.dims();
    match (c, channels) {
        (a, b) if a == b => Ok(img),
        (3, 1) => {
            let data = img.as_slice().chunks(3).map(|p| p.iter().sum::<f64>() / 3.0).collect();
            RealImage::from_vec(h, w, 1, data)
        }
        (1, 3) => RealImage::from_planes(h, w, &[img.plane(0), img.plane(0), img.plane(0)]),
        _ => Err(Error::Shape(format!("cannot convert {c} channels to {channels}"))),
    }
}

/// First `count` images of `dir` in name order, resized to `h x w`.
pub fn load_scene_dir(dir: &Path, count: usize, h: usize, w: usize, channels: usize) -> Result<Vec<Scene>> {
    let files = image_files(dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", dir.display())));
    }
    files
        .into_iter()
        .take(count)
        .map(|(id, path)| {
            let img = match_channels(io::read_image(&path)?, channels)?;
            Ok(Scene {
                id,
                image: resize_bilinear(&img, h, w)?,
            })
        })
        .collect()
}

/// Convolves each scene with `psf`, adds noise (scene `i` uses the stream
/// `derive_seed(noise.seed, i)`), and writes the pairs, PSF and sidecars to `out`.
pub fn simulate_dataset(scenes: &[Scene], psf: &Psf, noise: &NoiseSpec, out: &Path) -> Result<DatasetManifest> {
    noise.validate()?;
    io::ensure_dir(&out.join("lensless"))?;
    io::ensure_dir(&out.join("lensed"))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let meas = simulate_measurement(&scene.image, psf, noise, i as u64)?;
        let entry = DatasetEntry {
            id: scene.id.clone(),
            lensless: PathBuf::from("lensless").join(format!("{}.npy", scene.id)),
            lensed: PathBuf::from("lensed").join(format!("{}.npy", scene.id)),
        };
        io::write_npy(&out.join(&entry.lensless), &meas)?;
        io::write_npy(&out.join(&entry.lensed), &scene.image)?;
        entries.push(entry);
    }
    io::save_psf(&out.join("psf.npy"), psf)?;
    io::write_json(&out.join("noise.json"), noise)?;
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        entries,
        psf: PathBuf::from("psf.npy"),
        roi: None,
        downsample: 1,
        interpolation: Interpolation::Bilinear,
        pixel_format: "f32 npy, channel-last".into(),
    };
    let ids: HashSet<&str> = manifest.entries.iter().map(|e| e.id.as_str()).collect();
    if ids.len() != manifest.entries.len() {
        return Err(Error::Dataset("duplicate scene ids".into()));
    }
    manifest.write()?;
    Ok(manifest)
}

/// `noise(convolve_lsi(scene, psf))` with the noise stream `derive_seed(noise.seed, stream)`.
pub fn simulate_measurement(scene: &RealImage, psf: &Psf, noise: &NoiseSpec, stream: u64) -> Result<RealImage> {
    let clean = convolve_lsi(scene, psf)?;
    if noise.snr_db.is_infinite() {
        return Ok(clean);
    }
    let spec = NoiseSpec {
        seed: derive_seed(noise.seed, stream),
        ..*noise
    };
    spec.apply(&clean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSplit {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

/// Benchmark or sweep result. Timings are kept out of it so that equal
/// configurations give byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub kind: String,
    pub metrics: MetricsReport,
    pub strata: Vec<Stratum>,
    /// Share of scenes whose PSNR is non-decreasing in input SNR.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monotone_fraction: Option<f64>,
    /// Share of scenes whose PSNR at the most corrupted PSF is at most the clean-PSF PSNR.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_seed_psnr_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<MaskSplit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub id: String,
    pub inference_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    pub report: BenchReport,
    pub timings: Vec<Timing>,
}

impl BenchRun {
    /// Writes `report.<format>` and the timings sidecar; returns the report path.
    pub fn write(&self, out: &Path, format: ReportFormat) -> Result<PathBuf> {
        io::ensure_dir(out)?;
        let path = out.join(format!("report.{}", format.extension()));
        match format {
            ReportFormat::Json => io::write_json(&path, &self.report)?,
            ReportFormat::Csv => self.report.metrics.write(&path, format)?,
        }
        io::write_json(&out.join(TIMINGS_FILE), &self.timings)?;
        Ok(path)
    }
}

/// One reconstruction to score.
struct Cell<'a> {
    id: String,
    stratum: usize,
    scene: usize,
    meas: RealImage,
    truth: &'a RealImage,
    psf: &'a Psf,
    extras: Vec<(&'static str, f64)>,
}

struct CellResult {
    row: MetricsRow,
    stratum: usize,
    scene: usize,
    timing: Timing,
}

fn evaluate(cell: Cell<'_>, pipeline: &PipelineConfig, roi: Option<&RoiSpec>) -> Result<CellResult> {
    let start = Instant::now();
    let recon = run_pipeline(&cell.meas, cell.psf, pipeline);
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let scored = recon.and_then(|recon| {
        let fid = data_fidelity(&cell.meas, &recon, cell.psf)?;
        let scores = score(cell.truth, &recon, roi, None)?;
        Ok(MetricsRow::scored(cell.id.clone(), &scores, Some(fid)))
    });
    let mut row = match scored {
        Ok(row) => row,
        Err(e) if e.category() == ErrorCategory::Numerical => MetricsRow::failed(cell.id.clone(), &e),
        Err(e) => return Err(e),
    };
    for (k, v) in cell.extras {
        row = row.with_extra(k, v);
    }
    Ok(CellResult {
        row,
        stratum: cell.stratum,
        scene: cell.scene,
        timing: Timing {
            id: cell.id,
            inference_ms: ms,
        },
    })
}

fn run_cells(cells: Vec<Cell<'_>>, pipeline: &PipelineConfig, roi: Option<&RoiSpec>, parallel: bool) -> Result<Vec<CellResult>> {
    let mut results: Vec<CellResult> = if parallel {
        cells.into_par_iter().map(|c| evaluate(c, pipeline, roi)).collect::<Result<_>>()?
    } else {
        cells.into_iter().map(|c| evaluate(c, pipeline, roi)).collect::<Result<_>>()?
    };
    results.sort_by(|a, b| a.timing.id.cmp(&b.timing.id));
    Ok(results)
}

fn assemble(kind: &str, canonical: &str, labels: &[String], results: &[CellResult]) -> BenchReport {
    let strata = labels
        .iter()
        .enumerate()
        .map(|(s, label)| Stratum {
            label: label.clone(),
            aggregate: aggregate(results.iter().filter(|r| r.stratum == s).map(|r| &r.row)),
        })
        .collect();
    BenchReport {
        kind: kind.into(),
        metrics: MetricsReport::new(fingerprint(canonical), results.iter().map(|r| r.row.clone()).collect()),
        strata,
        monotone_fraction: None,
        degraded_fraction: None,
        cross_seed_psnr_std: None,
        split: None,
    }
}

fn cell_id(stratum: usize, label: &str, scene: &str) -> String {
    format!("{stratum:02}_{label}/{scene}")
}

fn canonical<T: Serialize>(value: &T) -> Result<String> {
    let body = serde_json::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    Ok(format!("{body};peak=truth_max"))
}

/// Runs every method on every manifest entry.
pub fn run_benchmark(data: &DatasetManifest, methods: &[PipelineConfig], parallel: bool) -> Result<BenchRun> {
    if data.entries.is_empty() {
        return Err(Error::Dataset("manifest has no entries".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("no methods to benchmark".into()));
    }
    methods.iter().try_for_each(PipelineConfig::validate)?;
    let psf = data.load_psf()?;
    let pairs = data
        .entries
        .iter()
        .map(|e| data.load_pair(e))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = methods.iter().map(PipelineConfig::label).collect();
    let mut results = Vec::new();
    for (m, method) in methods.iter().enumerate() {
        let cells = data
            .entries
            .iter()
            .zip(&pairs)
            .enumerate()
            .map(|(i, (e, (meas, truth)))| Cell {
                id: cell_id(m, &labels[m], &e.id),
                stratum: m,
                scene: i,
                meas: meas.clone(),
                truth,
                psf: &psf,
                extras: Vec::new(),
            })
            .collect();
        results.extend(run_cells(cells, method, data.roi.as_ref(), parallel)?);
    }
    let canon = canonical(&(methods, data))?;
    let report = assemble("bench", &canon, &labels, &results);
    Ok(BenchRun {
        timings: results.into_iter().map(|r| r.timing).collect(),
        report,
    })
}

/// Desk-scale camera used when PSFs are simulated from random masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskOptics {
    pub sensor_pitch: f64,
    pub d1: f64,
    pub d2: f64,
    pub mask_rows: usize,
    pub mask_cols: usize,
    pub variant: PsfVariant,
}

impl Default for DeskOptics {
    fn default() -> Self {
        Self {
            sensor_pitch: DESK_SENSOR_PITCH,
            d1: DEFAULT_D1,
            d2: DEFAULT_D2,
            mask_rows: DIGICAM_MASK_DIMS.0,
            mask_cols: DIGICAM_MASK_DIMS.1,
            variant: PsfVariant::WaveDeadspace,
        }
    }
}

/// Sensor pixel pitch of the desk camera (meters).
pub const DESK_SENSOR_PITCH: f64 = 500e-6;

impl DeskOptics {
    /// PSF of `random_mask(seed)` on an `h x w` sensor with `channels` channels
    /// (the green channel when `channels == 1`).
    pub fn mask_psf(&self, seed: u64, h: usize, w: usize, channels: usize) -> Result<Psf> {
        let geometry = OpticalGeometry::from_sensor(h, w, self.sensor_pitch, self.d1, self.d2)?;
        let mask = random_mask(seed, self.mask_rows, self.mask_cols)?;
        let psf = simulate_psf(&mask, &geometry, &RGB_WAVELENGTHS, self.variant, Normalization::UnitSum)?;
        match channels {
            3 => Ok(psf),
            1 => psf.channel(1),
            c => Err(Error::Config(format!("unsupported channel count {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsfSource {
    Delta,
    Mask { seed: u64 },
    File { path: PathBuf },
}

impl Default for PsfSource {
    fn default() -> Self {
        PsfSource::Mask { seed: 0 }
    }
}

impl PsfSource {
    pub fn build(&self, optics: &DeskOptics, scenes: &SceneSpec) -> Result<Psf> {
        match self {
            PsfSource::Delta => Ok(Psf::delta(scenes.height, scenes.width, scenes.channels)),
            PsfSource::Mask { seed } => optics.mask_psf(*seed, scenes.height, scenes.width, scenes.channels),
            PsfSource::File { path } => {
                let psf = io::load_psf(path)?;
                if psf.channels() == scenes.channels {
                    Ok(psf)
                } else if scenes.channels == 1 {
                    psf.channel(psf.channels() / 2)
                } else {
                    Err(Error::Shape(format!("PSF has {} channels, scenes {}", psf.channels(), scenes.channels)))
                }
            }
        }
    }
}

/// PSF corruption level: the clean PSF or Gaussian noise at an SNR in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PsfLevel {
    Clean(CleanTag),
    Db(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CleanTag {
    #[serde(rename = "clean")]
    Clean,
}

impl PsfLevel {
    pub const CLEAN: PsfLevel = PsfLevel::Clean(CleanTag::Clean);

    pub fn defaults() -> Vec<PsfLevel> {
        vec![Self::CLEAN, PsfLevel::Db(0.0), PsfLevel::Db(-10.0), PsfLevel::Db(-20.0)]
    }

    pub fn label(&self) -> String {
        match self {
            PsfLevel::Clean(_) => "clean".into(),
            PsfLevel::Db(v) => format!("{v}dB"),
        }
    }
}

/// `max(psf + n, 0)` renormalized, with `n` Gaussian at `snr_db`.
pub fn corrupt_psf(psf: &Psf, snr_db: f64, seed: u64) -> Result<Psf> {
    let noisy = add_gaussian_noise(psf.image(), &NoiseSpec::gaussian(snr_db, seed))?;
    let mut img = noisy.map(|v| v.max(0.0));
    img.signed_intermediate = false;
    let mut out = Psf::from_image(img, Normalization::UnitSum)?;
    out.wavelengths = psf.wavelengths.clone();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub master_seed: u64,
    /// Execution mode only; excluded from the fingerprint.
    #[serde(skip_serializing)]
    pub parallel: bool,
    pub scenes: SceneSpec,
    pub pipeline: PipelineConfig,
    pub psf: PsfSource,
    pub optics: DeskOptics,
    pub roi: Option<RoiSpec>,
    /// Input SNR levels of the noise sweep (dB).
    pub snr_levels: Vec<f64>,
    pub psf_levels: Vec<PsfLevel>,
    pub mask_seeds: Vec<u64>,
    /// Shot noise added to measurements in the PSF and mask sweeps; `None` keeps them clean.
    #[serde(with = "opt_snr")]
    pub measurement_snr_db: Option<f64>,
}

mod opt_snr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "crate::forward::snr_repr")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(Wrap).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            parallel: true,
            scenes: SceneSpec::default(),
            pipeline: PipelineConfig::admm100(),
            psf: PsfSource::default(),
            optics: DeskOptics::default(),
            roi: None,
            snr_levels: DEFAULT_SNR_LEVELS.to_vec(),
            psf_levels: PsfLevel::defaults(),
            mask_seeds: (0..10).collect(),
            measurement_snr_db: None,
        }
    }
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.scenes.validate()?;
        self.pipeline.validate()?;
        if self.snr_levels.iter().any(|v| v.is_nan()) {
            return Err(Error::Config("SNR levels must be numbers".into()));
        }
        if let Some(v) = self.measurement_snr_db {
            NoiseSpec::shot(v, 0).validate()?;
        }
        Ok(())
    }

    fn measurement_noise(&self, stream: u64) -> NoiseSpec {
        match self.measurement_snr_db {
            Some(snr) => NoiseSpec::shot(snr, derive_seed(self.master_seed, stream)),
            None => NoiseSpec::noiseless(),
        }
    }
}

fn nonempty<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Config(format!("{what} list is empty")));
    }
    Ok(())
}

// Stream ids keep the noise of different sweeps and strata apart.
const STREAM_SNR: u64 = 1;
const STREAM_PSF: u64 = 2;
const STREAM_MASK: u64 = 3;

fn stream(kind: u64, stratum: usize, scene: usize) -> u64 {
    derive_seed(derive_seed(kind, stratum as u64), scene as u64)
}

fn psnr_table(results: &[CellResult], strata: usize, scenes: usize) -> Vec<Vec<Option<f64>>> {
    let mut t = vec![vec![None; strata]; scenes];
    for r in results {
        t[r.scene][r.stratum] = r.row.psnr_db;
    }
    t
}

/// Re-noises the same scenes at each input SNR.
pub fn snr_robustness_sweep(cfg: &SweepConfig) -> Result<BenchRun> {
    cfg.validate()?;
    nonempty(&cfg.snr_levels, "SNR level")?;
    let scenes = cfg.scenes.build()?;
    let psf = cfg.psf.build(&cfg.optics, &cfg.scenes)?;
    let clean: Vec<RealImage> = scenes.iter().map(|s| convolve_lsi(&s.image, &psf)).collect::<Result<_>>()?;
    let labels: Vec<String> = cfg.snr_levels.iter().map(|v| format!("snr{v}dB")).collect();
    let mut cells = Vec::new();
    for (l, &snr) in cfg.snr_levels.iter().enumerate() {
        for (i, scene) in scenes.iter().enumerate() {
            let spec = NoiseSpec::shot(snr, derive_seed(cfg.master_seed, stream(STREAM_SNR, l, i)));
            cells.push(Cell {
                id: cell_id(l, &labels[l], &scene.id),
                stratum: l,
                scene: i,
                meas: spec.apply(&clean[i])?,
                truth: &scene.image,
                psf: &psf,
                extras: vec![("snr_db", snr)],
            });
        }
    }
    let results = run_cells(cells, &cfg.pipeline, cfg.roi.as_ref(), cfg.parallel)?;
    let mut report = assemble("sweep_snr", &canonical(cfg)?, &labels, &results);
    let mut order: Vec<usize> = (0..cfg.snr_levels.len()).collect();
    order.sort_by(|a, b| cfg.snr_levels[*a].total_cmp(&cfg.snr_levels[*b]));
    let table = psnr_table(&results, labels.len(), scenes.len());
    let monotone = table
        .iter()
        .filter(|row| {
            let vals: Vec<Option<f64>> = order.iter().map(|&k| row[k]).collect();
            vals.iter().all(Option::is_some) && vals.windows(2).all(|w| w[0].unwrap() <= w[1].unwrap())
        })
        .count();
    report.monotone_fraction = Some(monotone as f64 / scenes.len() as f64);
    Ok(BenchRun {
        timings: results.into_iter().map(|r| r.timing).collect(),
        report,
    })
}

/// Reconstructs the same measurements with progressively corrupted PSFs.
pub fn psf_corruption_sweep(cfg: &SweepConfig) -> Result<BenchRun> {
    cfg.validate()?;
    nonempty(&cfg.psf_levels, "PSF level")?;
    let scenes = cfg.scenes.build()?;
    let psf = cfg.psf.build(&cfg.optics, &cfg.scenes)?;
    let meas: Vec<RealImage> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| simulate_measurement(&s.image, &psf, &cfg.measurement_noise(stream(STREAM_PSF, 0, i)), 0))
        .collect::<Result<_>>()?;
    let psfs: Vec<Psf> = cfg
        .psf_levels
        .iter()
        .enumerate()
        .map(|(l, level)| match level {
            PsfLevel::Clean(_) => Ok(psf.clone()),
            PsfLevel::Db(snr) => corrupt_psf(&psf, *snr, derive_seed(cfg.master_seed, stream(STREAM_PSF, l + 1, usize::MAX))),
        })
        .collect::<Result<_>>()?;
    let labels: Vec<String> = cfg.psf_levels.iter().map(|l| format!("psf_{}", l.label())).collect();
    let mut cells = Vec::new();
    for (l, level) in cfg.psf_levels.iter().enumerate() {
        for (i, scene) in scenes.iter().enumerate() {
            let extras = match level {
                PsfLevel::Db(v) => vec![("psf_snr_db", *v)],
                PsfLevel::Clean(_) => Vec::new(),
            };
            cells.push(Cell {
                id: cell_id(l, &labels[l], &scene.id),
                stratum: l,
                scene: i,
                meas: meas[i].clone(),
                truth: &scene.image,
                psf: &psfs[l],
                extras,
            });
        }
    }
    let results = run_cells(cells, &cfg.pipeline, cfg.roi.as_ref(), cfg.parallel)?;
    let mut report = assemble("sweep_psf", &canonical(cfg)?, &labels, &results);
    let clean = cfg.psf_levels.iter().position(|l| matches!(l, PsfLevel::Clean(_)));
    let worst = cfg
        .psf_levels
        .iter()
        .enumerate()
        .filter_map(|(k, l)| match l {
            PsfLevel::Db(v) => Some((k, *v)),
            _ => None,
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k);
    if let (Some(c), Some(w)) = (clean, worst) {
        let table = psnr_table(&results, labels.len(), scenes.len());
        let degraded = table
            .iter()
            .filter(|row| matches!((row[c], row[w]), (Some(a), Some(b)) if b <= a))
            .count();
        report.degraded_fraction = Some(degraded as f64 / scenes.len() as f64);
    }
    Ok(BenchRun {
        timings: results.into_iter().map(|r| r.timing).collect(),
        report,
    })
}

fn population_std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Simulates a PSF per mask seed and reconstructs with one pipeline.
pub fn multimask_sweep(cfg: &SweepConfig) -> Result<BenchRun> {
    cfg.validate()?;
    nonempty(&cfg.mask_seeds, "mask seed")?;
    let scenes = cfg.scenes.build()?;
    let (h, w, c) = (cfg.scenes.height, cfg.scenes.width, cfg.scenes.channels);
    let psfs: Vec<Psf> = if cfg.parallel {
        cfg.mask_seeds.par_iter().map(|&s| cfg.optics.mask_psf(s, h, w, c)).collect::<Result<_>>()?
    } else {
        cfg.mask_seeds.iter().map(|&s| cfg.optics.mask_psf(s, h, w, c)).collect::<Result<_>>()?
    };
    let labels: Vec<String> = cfg.mask_seeds.iter().map(|s| format!("mask{s}")).collect();
    let mut cells = Vec::new();
    for (k, &seed) in cfg.mask_seeds.iter().enumerate() {
        for (i, scene) in scenes.iter().enumerate() {
            let noise = cfg.measurement_noise(stream(STREAM_MASK, k, i));
            cells.push(Cell {
                id: cell_id(k, &labels[k], &scene.id),
                stratum: k,
                scene: i,
                meas: simulate_measurement(&scene.image, &psfs[k], &noise, 0)?,
                truth: &scene.image,
                psf: &psfs[k],
                extras: vec![("mask_seed", seed as f64)],
            });
        }
    }
    let results = run_cells(cells, &cfg.pipeline, cfg.roi.as_ref(), cfg.parallel)?;
    let mut report = assemble("sweep_mask", &canonical(cfg)?, &labels, &results);
    let per_seed: Vec<f64> = report.strata.iter().filter_map(|s| s.aggregate.psnr_db).collect();
    if !per_seed.is_empty() {
        report.cross_seed_psnr_std = Some(population_std(&per_seed));
    }
    let n_train = (cfg.mask_seeds.len() as f64 * TRAIN_FRACTION).round() as usize;
    report.split = Some(MaskSplit {
        train: cfg.mask_seeds[..n_train].to_vec(),
        test: cfg.mask_seeds[n_train..].to_vec(),
    });
    Ok(BenchRun {
        timings: results.into_iter().map(|r| r.timing).collect(),
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::empirical_snr;
    use crate::recover::{AdmmParams, Inversion};

    fn small_scenes(count: usize, n: usize) -> SceneSpec {
        SceneSpec {
            count,
            height: n,
            width: n,
            ..SceneSpec::default()
        }
    }

    fn quick_pipeline() -> PipelineConfig {
        PipelineConfig {
            inversion: Inversion::AdmmTv(AdmmParams::with_iterations(20)),
            ..PipelineConfig::admm100()
        }
    }

    #[test]
    fn procedural_scenes_are_deterministic_and_in_range() {
        for kind in SceneKind::ALL {
            let a = procedural_scene(kind, 3, 32, 40, 3).unwrap();
            assert_eq!(a, procedural_scene(kind, 3, 32, 40, 3).unwrap());
            assert!(a.min() >= 0.05 - 1e-12 && a.max() <= 0.95 + 1e-12);
            assert_ne!(a, procedural_scene(kind, 4, 32, 40, 3).unwrap());
        }
        let scenes = small_scenes(4, 16).build().unwrap();
        assert_eq!(scenes.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["scene_000", "scene_001", "scene_002", "scene_003"]);
    }

    #[test]
    fn simulate_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = small_scenes(3, 16).build().unwrap();
        let psf = Psf::delta(16, 16, 1);
        let m = simulate_dataset(&scenes, &psf, &NoiseSpec::noiseless(), dir.path()).unwrap();
        assert_eq!(m.entries.len(), 3);
        for (e, s) in m.entries.iter().zip(&scenes) {
            let (meas, truth) = m.load_pair(e).unwrap();
            assert!(meas.as_slice().iter().zip(s.image.as_slice()).all(|(a, b)| (a - b).abs() < 1e-6));
            assert_eq!(meas, truth);
        }
        let again = import_dataset(dir.path(), ImportOptions::default()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn simulation_is_byte_reproducible() {
        let scenes = small_scenes(2, 16).build().unwrap();
        let psf = DeskOptics::default().mask_psf(1, 16, 16, 1).unwrap();
        let noise = NoiseSpec::shot(10.0, 9);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        simulate_dataset(&scenes, &psf, &noise, a.path()).unwrap();
        simulate_dataset(&scenes, &psf, &noise, b.path()).unwrap();
        for rel in ["manifest.json", "noise.json", "psf.npy", "psf.json", "lensless/scene_000.npy", "lensless/scene_001.npy"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
    }

    #[test]
    fn shot_noise_dataset_hits_target_snr() {
        let scenes = small_scenes(3, 64).build().unwrap();
        let psf = Psf::delta(64, 64, 1);
        for (i, s) in scenes.iter().enumerate() {
            let clean = convolve_lsi(&s.image, &psf).unwrap();
            let noisy = simulate_measurement(&s.image, &psf, &NoiseSpec::shot(10.0, 5), i as u64).unwrap();
            assert!((empirical_snr(&clean, &noisy).unwrap() - 10.0).abs() < 0.5);
        }
    }

    fn write_pair_layout(root: &Path, ids: &[&str], skip_lensed: Option<&str>) {
        std::fs::create_dir_all(root.join("lensless")).unwrap();
        std::fs::create_dir_all(root.join("lensed")).unwrap();
        let img = RealImage::filled(8, 8, 1, 0.5);
        for id in ids {
            io::write_png8(&root.join("lensless").join(format!("{id}.png")), &img).unwrap();
            if Some(*id) != skip_lensed {
                io::write_npy(&root.join("lensed").join(format!("{id}.npy")), &img).unwrap();
            }
        }
        io::save_psf(&root.join("psf.npy"), &Psf::delta(8, 8, 1)).unwrap();
    }

    #[test]
    fn directory_layout_import() {
        let dir = tempfile::tempdir().unwrap();
        write_pair_layout(dir.path(), &["a", "b", "c"], None);
        let m = import_dataset(dir.path(), ImportOptions::default()).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[1].lensed, PathBuf::from("lensed/b.npy"));
        m.write().unwrap();
        assert_eq!(import_dataset(dir.path(), ImportOptions::default()).unwrap(), m);

        let half = import_dataset(
            dir.path(),
            ImportOptions {
                downsample: Some(2),
                interpolation: Some(Interpolation::Nearest),
            },
        )
        .unwrap();
        assert_eq!((half.downsample, half.interpolation), (2, Interpolation::Nearest));
    }

    #[test]
    fn import_errors_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        write_pair_layout(dir.path(), &["a", "b", "c"], Some("b"));
        let err = import_dataset(dir.path(), ImportOptions::default()).unwrap_err();
        assert!(matches!(&err, Error::Dataset(m) if m.contains("entry b")), "{err}");

        let dir = tempfile::tempdir().unwrap();
        write_pair_layout(dir.path(), &["a"], None);
        std::fs::write(dir.path().join("lensed/a.npy"), b"garbage").unwrap();
        let err = import_dataset(dir.path(), ImportOptions::default()).unwrap_err();
        assert!(matches!(&err, Error::Dataset(m) if m.contains("a:")), "{err}");

        let dir = tempfile::tempdir().unwrap();
        write_pair_layout(dir.path(), &["a"], None);
        std::fs::remove_file(dir.path().join("psf.npy")).unwrap();
        assert!(matches!(import_dataset(dir.path(), ImportOptions::default()), Err(Error::Dataset(_))));

        let dir = tempfile::tempdir().unwrap();
        write_pair_layout(dir.path(), &["a"], None);
        let mut m = import_dataset(dir.path(), ImportOptions::default()).unwrap();
        m.entries.push(m.entries[0].clone());
        assert!(matches!(m.validate(), Err(Error::Dataset(msg)) if msg.contains("duplicate")));
    }

    #[test]
    fn downsampled_import_halves_everything() {
        let dir = tempfile::tempdir().unwrap();
        write_pair_layout(dir.path(), &["a"], None);
        let m = import_dataset(
            dir.path(),
            ImportOptions {
                downsample: Some(2),
                ..ImportOptions::default()
            },
        )
        .unwrap();
        let (meas, truth) = m.load_pair(&m.entries[0]).unwrap();
        assert_eq!(meas.dims(), (4, 4, 1));
        assert_eq!(truth.dims(), (4, 4, 1));
        assert_eq!(m.load_psf().unwrap().dims(), (4, 4));
    }

    #[test]
    fn benchmark_shapes_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = small_scenes(3, 24).build().unwrap();
        let m = simulate_dataset(&scenes, &Psf::delta(24, 24, 1), &NoiseSpec::noiseless(), dir.path()).unwrap();
        let methods = vec![quick_pipeline(), PipelineConfig {
            inversion: Inversion::Wiener { reg: 1e-3 },
            ..PipelineConfig::admm100()
        }];
        let run = run_benchmark(&m, &methods, false).unwrap();
        assert_eq!(run.report.metrics.rows.len(), 6);
        assert_eq!(run.timings.len(), 6);
        assert_eq!(run.report.strata.len(), 2);
        let mean: f64 = run.report.metrics.rows.iter().filter_map(|r| r.psnr_db).sum::<f64>() / 6.0;
        assert!((run.report.metrics.aggregate.psnr_db.unwrap() - mean).abs() < 1e-12);

        let empty = DatasetManifest {
            entries: Vec::new(),
            ..m.clone()
        };
        assert!(matches!(run_benchmark(&empty, &methods, false), Err(Error::Dataset(_))));
    }

    #[test]
    fn numerical_failures_become_rows() {
        let scenes = small_scenes(2, 16).build().unwrap();
        let psf = Psf::from_image(RealImage::zeros(16, 16, 1), Normalization::Raw).unwrap();
        let cells = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| Cell {
                id: format!("x/{i}"),
                stratum: 0,
                scene: i,
                meas: s.image.clone(),
                truth: &s.image,
                psf: &psf,
                extras: Vec::new(),
            })
            .collect();
        let wiener = PipelineConfig {
            inversion: Inversion::Wiener { reg: 0.0 },
            ..PipelineConfig::admm100()
        };
        let res = run_cells(cells, &wiener, None, false).unwrap();
        let rep = MetricsReport::new("f".into(), res.into_iter().map(|r| r.row).collect());
        assert_eq!(rep.aggregate.failed, 2);
        assert_eq!(rep.aggregate.psnr_db, None);
    }

    #[test]
    fn sweep_config_toml() {
        let cfg = SweepConfig::from_toml_str(
            r#"
            master_seed = 5
            mask_seeds = [1, 2]
            psf_levels = ["clean", -10.0]
            measurement_snr_db = "inf"
            [scenes]
            count = 2
            [pipeline.inversion]
            kind = "wiener"
            reg = 0.01
            "#,
        )
        .unwrap();
        assert_eq!(cfg.psf_levels, vec![PsfLevel::CLEAN, PsfLevel::Db(-10.0)]);
        assert_eq!(cfg.measurement_snr_db, Some(f64::INFINITY));
        assert_eq!(cfg.scenes.height, 64);
        assert!(matches!(SweepConfig::from_toml_str("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(SweepConfig::from_toml_str("psf_levels = [\"dirty\"]"), Err(Error::Config(_))));
    }

    fn sweep_cfg() -> SweepConfig {
        SweepConfig {
            scenes: small_scenes(3, 24),
            pipeline: quick_pipeline(),
            psf: PsfSource::Delta,
            ..SweepConfig::default()
        }
    }

    #[test]
    fn snr_sweep_levels_and_single_level() {
        let run = snr_robustness_sweep(&sweep_cfg()).unwrap();
        assert_eq!(run.report.strata.len(), 5);
        assert_eq!(run.report.metrics.rows.len(), 15);
        assert!(run.report.monotone_fraction.unwrap() >= 0.0);
        let single = SweepConfig {
            snr_levels: vec![10.0],
            ..sweep_cfg()
        };
        let run1 = snr_robustness_sweep(&single).unwrap();
        assert_eq!(run1.report.metrics.rows.len(), 3);
        assert_eq!(run1.report.strata[0].aggregate, run1.report.metrics.aggregate);
        assert!(snr_robustness_sweep(&SweepConfig { snr_levels: vec![], ..sweep_cfg() }).is_err());
    }

    #[test]
    fn psf_sweep_clean_level_matches_direct_reconstruction() {
        let cfg = sweep_cfg();
        let run = psf_corruption_sweep(&cfg).unwrap();
        assert_eq!(run.report.strata.len(), 4);
        let scenes = cfg.scenes.build().unwrap();
        let psf = Psf::delta(24, 24, 1);
        let meas = convolve_lsi(&scenes[0].image, &psf).unwrap();
        let recon = run_pipeline(&meas, &psf, &cfg.pipeline).unwrap();
        let s = score(&scenes[0].image, &recon, None, None).unwrap();
        let row = run.report.metrics.rows.iter().find(|r| r.id == "00_psf_clean/scene_000").unwrap();
        assert_eq!(row.psnr_db, Some(s.psnr_db));
        assert_eq!(row.ssim, Some(s.ssim));
        assert!(run.report.degraded_fraction.is_some());
    }

    #[test]
    fn corrupted_psf_is_a_valid_psf() {
        let psf = DeskOptics::default().mask_psf(2, 16, 16, 1).unwrap();
        let bad = corrupt_psf(&psf, -10.0, 1).unwrap();
        assert!(bad.image().is_nonnegative());
        assert!((bad.image().sum() - 1.0).abs() < 1e-12);
        assert_ne!(bad, psf);
    }

    #[test]
    fn mask_sweep_seeds_split_and_determinism() {
        let cfg = SweepConfig {
            mask_seeds: vec![4, 4, 9],
            scenes: small_scenes(2, 16),
            ..sweep_cfg()
        };
        let run = multimask_sweep(&cfg).unwrap();
        let rows = &run.report.metrics.rows;
        let strip = |r: &MetricsRow| (r.psnr_db, r.ssim, r.data_fidelity);
        assert_eq!(strip(&rows[0]), strip(&rows[2]));
        assert_eq!(strip(&rows[1]), strip(&rows[3]));
        let split = run.report.split.as_ref().unwrap();
        assert_eq!(split.train.len() + split.test.len(), 3);
        assert!(run.report.cross_seed_psnr_std.unwrap().is_finite());
        let serial = multimask_sweep(&SweepConfig { parallel: false, ..cfg.clone() }).unwrap();
        assert_eq!(
            serde_json::to_string(&serial.report).unwrap(),
            serde_json::to_string(&run.report).unwrap()
        );
    }

    #[test]
    fn report_files_exclude_timings() {
        let run = snr_robustness_sweep(&SweepConfig {
            snr_levels: vec![5.0],
            ..sweep_cfg()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = run.write(dir.path(), ReportFormat::Json).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(!text.contains("inference_ms"));
        assert!(dir.path().join(TIMINGS_FILE).is_file());
        let csv = run.write(dir.path(), ReportFormat::Csv).unwrap();
        assert!(std::fs::read_to_string(csv).unwrap().starts_with("id,psnr_db,ssim,lpips,data_fidelity"));
    }
}
