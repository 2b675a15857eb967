//! Image-quality metrics, ROI extraction and metric reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::convolve_lsi;
use crate::grid::{crop, CropSpec, RealImage};
use crate::optics::Psf;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn mse(a: &RealImage, b: &RealImage) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.as_slice().len().max(1) as f64;
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// PSNR in dB. Identical images give `f64::INFINITY`.
pub fn psnr(a: &RealImage, b: &RealImage, peak: f64) -> Result<f64> {
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::InvalidParameter(format!("peak must be > 0, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_taps() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

// Separable valid-mode filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(t, g)| g * plane[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(t, g)| g * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParts {
    pub ssim: f64,
    /// Mean luminance factor.
    pub luminance: f64,
    /// Mean contrast-structure factor.
    pub contrast_structure: f64,
}

/// Windowed SSIM with its luminance and contrast-structure means.
pub fn ssim_parts(a: &RealImage, b: &RealImage, peak: f64) -> Result<SsimParts> {
    a.ensure_same_shape(b)?;
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::InvalidParameter(format!("peak must be > 0, got {peak}")));
    }
    let (h, w, ch) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let taps = gaussian_taps();
    let (mut s, mut l, mut cs) = (0.0, 0.0, 0.0);
    let mut count = 0usize;
    for k in 0..ch {
        let pa = a.plane(k);
        let pb = b.plane(k);
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            let li = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let ci = (2.0 * cov + c2) / (va + vb + c2);
            s += li * ci;
            l += li;
            cs += ci;
            count += 1;
        }
    }
    let n = count as f64;
    Ok(SsimParts {
        ssim: s / n,
        luminance: l / n,
        contrast_structure: cs / n,
    })
}

pub fn ssim(a: &RealImage, b: &RealImage, peak: f64) -> Result<f64> {
    ssim_parts(a, b, peak).map(|p| p.ssim)
}

/// Mean squared residual of the measurement explained by `est`.
pub fn data_fidelity(meas: &RealImage, est: &RealImage, psf: &Psf) -> Result<f64> {
    let pred = convolve_lsi(est, psf)?;
    mse(&pred, meas)
}

/// `10 log10(|clean|^2 / |noisy - clean|^2)`; infinite when they coincide.
pub fn empirical_snr(clean: &RealImage, noisy: &RealImage) -> Result<f64> {
    clean.ensure_same_shape(noisy)?;
    let noise: f64 = clean.as_slice().iter().zip(noisy.as_slice()).map(|(c, n)| (n - c).powi(2)).sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (clean.energy() / noise).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSpec {
    pub row_offset: usize,
    pub col_offset: usize,
    pub height: usize,
    pub width: usize,
    pub target_height: usize,
    pub target_width: usize,
}

impl RoiSpec {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            row_offset: 0,
            col_offset: 0,
            height,
            width,
            target_height: height,
            target_width: width,
        }
    }

    pub fn validate(&self, src_h: usize, src_w: usize) -> Result<()> {
        if self.target_height == 0 || self.target_width == 0 {
            return Err(Error::InvalidParameter("ROI target dims must be positive".into()));
        }
        self.crop_spec().validate(src_h, src_w)
    }

    fn crop_spec(&self) -> CropSpec {
        CropSpec {
            row_offset: self.row_offset,
            col_offset: self.col_offset,
            out_height: self.height,
            out_width: self.width,
        }
    }
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &RealImage, out_h: usize, out_w: usize) -> Result<RealImage> {
    let (h, w, ch) = img.dims();
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidParameter("resize target must be non-empty".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = axis(h, out_h);
    let cols = axis(w, out_w);
    let mut out = RealImage::zeros(out_h, out_w, ch);
    for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (c, &(c0, c1, fc)) in cols.iter().enumerate() {
            for k in 0..ch {
                let top = img.get(r0, c0, k) * (1.0 - fc) + img.get(r0, c1, k) * fc;
                let bot = img.get(r1, c0, k) * (1.0 - fc) + img.get(r1, c1, k) * fc;
                out.set(r, c, k, top * (1.0 - fr) + bot * fr);
            }
        }
    }
    Ok(out)
}

pub fn roi_extract(recon: &RealImage, spec: &RoiSpec) -> Result<RealImage> {
    spec.validate(recon.height(), recon.width())?;
    let window = crop(recon, &spec.crop_spec())?;
    resize_bilinear(&window, spec.target_height, spec.target_width)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub psnr_db: f64,
    pub ssim: f64,
    pub peak: f64,
}

/// Scores `recon` against `truth` after optional ROI extraction. The peak
/// defaults to the ground-truth maximum.
pub fn score(truth: &RealImage, recon: &RealImage, roi: Option<&RoiSpec>, peak: Option<f64>) -> Result<Scores> {
    let recon = match roi {
        Some(spec) => roi_extract(recon, spec)?,
        None => recon.clone(),
    };
    let peak = match peak {
        Some(p) => p,
        None => truth.max(),
    };
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("ground truth peak {peak} is not positive")));
    }
    Ok(Scores {
        psnr_db: psnr(truth, &recon, peak)?,
        ssim: ssim(truth, &recon, peak)?,
        peak,
    })
}

/// Serializes optional dB values with infinity as `"inf"`.
mod opt_db {
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    #[serde(with = "opt_db")]
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    /// Reserved; always null.
    pub lpips: Option<f64>,
    pub data_fidelity: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MetricsRow {
    pub fn scored(id: impl Into<String>, scores: &Scores, data_fidelity: Option<f64>) -> Self {
        Self {
            id: id.into(),
            psnr_db: Some(scores.psnr_db),
            ssim: Some(scores.ssim),
            lpips: None,
            data_fidelity,
            extras: BTreeMap::new(),
            error: None,
        }
    }

    pub fn failed(id: impl Into<String>, err: &Error) -> Self {
        Self {
            id: id.into(),
            psnr_db: None,
            ssim: None,
            lpips: None,
            data_fidelity: None,
            extras: BTreeMap::new(),
            error: Some(err.to_string()),
        }
    }

    pub fn with_extra(mut self, key: impl Into<String>, value: f64) -> Self {
        self.extras.insert(key.into(), value);
        self
    }

    pub fn is_failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "opt_db")]
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub data_fidelity: Option<f64>,
    pub scored: usize,
    pub failed: usize,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Means over the rows that did not fail.
pub fn aggregate<'a>(rows: impl IntoIterator<Item = &'a MetricsRow>) -> Aggregate {
    let rows: Vec<&MetricsRow> = rows.into_iter().collect();
    let ok = || rows.iter().filter(|r| !r.is_failed());
    Aggregate {
        psnr_db: mean_of(ok().map(|r| r.psnr_db)),
        ssim: mean_of(ok().map(|r| r.ssim)),
        data_fidelity: mean_of(ok().map(|r| r.data_fidelity)),
        scored: ok().count(),
        failed: rows.len() - ok().count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// SHA-256 of the canonical configuration that produced the rows.
    pub fingerprint: String,
    pub rows: Vec<MetricsRow>,
    pub aggregate: Aggregate,
}

pub fn fingerprint(canonical: &str) -> String {
    format!("{:x}", Sha256::digest(canonical.as_bytes()))
}

pub const FIXED_COLUMNS: [&str; 5] = ["id", "psnr_db", "ssim", "lpips", "data_fidelity"];

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x == f64::INFINITY => "inf".into(),
        Some(x) => format!("{x}"),
    }
}

impl MetricsReport {
    /// Sorts rows by id and computes means over the rows that did not fail.
    pub fn new(fingerprint: String, mut rows: Vec<MetricsRow>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let aggregate = aggregate(&rows);
        Self {
            fingerprint,
            rows,
            aggregate,
        }
    }

    pub fn extra_columns(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.extras.keys()).collect();
        set.into_iter().cloned().collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidParameter(e.to_string()))
    }

    pub fn to_csv(&self) -> Result<String> {
        let extras = self.extra_columns();
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidParameter(e.to_string());
        let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(extras.iter().cloned());
        header.push("error".into());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.id.clone(), fmt_opt(r.psnr_db), fmt_opt(r.ssim), String::new(), fmt_opt(r.data_fidelity)];
            rec.extend(extras.iter().map(|k| fmt_opt(r.extras.get(k).copied())));
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidParameter(e.to_string()))
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
        }
    }

    pub fn write(&self, path: &Path, format: ReportFormat) -> Result<()> {
        std::fs::write(path, self.render(format)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    #[default]
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::Config(format!("unknown format {s:?}, expected csv or json"))),
        }
    }
}
