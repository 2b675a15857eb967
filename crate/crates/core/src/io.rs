//! File formats: NPY arrays, PNG/TIFF images, JSON sidecars and TOML configs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::RealImage;
use crate::optics::{Normalization, OpticalGeometry, Psf, PsfVariant};

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Reads a 2-D `(H, W)` or 3-D `(H, W, C)` float array in C order.
pub fn read_npy(path: &Path) -> Result<RealImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let npy = npyz::NpyFile::new(BufReader::new(file)).map_err(|e| Error::decode(path, e))?;
    if npy.order() != npyz::Order::C {
        return Err(Error::decode(path, "only C-order arrays are supported"));
    }
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let (h, w, c) = match shape[..] {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(Error::decode(path, format!("expected 2 or 3 dimensions, got shape {shape:?}"))),
    };
    let descr = npy.dtype().descr().trim_matches(['\'', '"']).to_string();
    let data: Vec<f64> = if descr.ends_with("f8") {
        npy.into_vec::<f64>().map_err(|e| Error::decode(path, e))?
    } else if descr.ends_with("f4") {
        npy.into_vec::<f32>()
            .map_err(|e| Error::decode(path, e))?
            .into_iter()
            .map(f64::from)
            .collect()
    } else {
        return Err(Error::decode(path, format!("unsupported dtype {descr}")));
    };
    let img = RealImage::from_vec(h, w, c, data).map_err(|e| Error::decode(path, e))?;
    if !img.is_finite() {
        return Err(Error::decode(path, "array contains non-finite values"));
    }
    Ok(img)
}

/// Writes `(H, W, C)` as little-endian f32.
pub fn write_npy(path: &Path, img: &RealImage) -> Result<()> {
    use npyz::WriterBuilder;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let (h, w, c) = img.dims();
    let mut writer = npyz::WriteOptions::<f32>::new()
        .default_dtype()
        .shape(&[h as u64, w as u64, c as u64])
        .writer(BufWriter::new(file))
        .begin_nd()
        .map_err(|e| Error::io(path, e))?;
    writer
        .extend(img.as_slice().iter().map(|&v| v as f32))
        .map_err(|e| Error::io(path, e))?;
    writer.finish().map_err(|e| Error::io(path, e))
}

/// Decodes PNG or TIFF to `[0, 1]` (integer formats are divided by their
/// maximum code value; float TIFFs are taken as-is). Alpha is dropped.
pub fn read_raster(path: &Path) -> Result<RealImage> {
    let img = image::open(path).map_err(|e| Error::decode(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let (channels, data): (usize, Vec<f64>) = match (color.has_color(), color) {
        (_, ColorType::Rgb32F | ColorType::Rgba32F) => (3, img.to_rgb32f().into_raw().into_iter().map(f64::from).collect()),
        (true, ColorType::Rgb16 | ColorType::Rgba16) => (3, scale16(img.to_rgb16().into_raw())),
        (true, _) => (3, scale8(img.to_rgb8().into_raw())),
        (false, ColorType::L16 | ColorType::La16) => (1, scale16(img.to_luma16().into_raw())),
        (false, _) => (1, scale8(DynamicImage::to_luma8(&img).into_raw())),
    };
    RealImage::from_vec(h, w, channels, data).map_err(|e| Error::decode(path, e))
}

fn scale8(raw: Vec<u8>) -> Vec<f64> {
    raw.into_iter().map(|v| v as f64 / 255.0).collect()
}

fn scale16(raw: Vec<u16>) -> Vec<f64> {
    raw.into_iter().map(|v| v as f64 / 65535.0).collect()
}

/// Reads `.npy`, `.png`, `.tif` or `.tiff` by extension.
pub fn read_image(path: &Path) -> Result<RealImage> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "npy" => read_npy(path),
        "png" | "tif" | "tiff" => read_raster(path),
        _ => Err(Error::decode(path, format!("unrecognized image extension {ext:?}"))),
    }
}

/// 8-bit preview, values clamped to `[0, 1]`.
pub fn write_png8(path: &Path, img: &RealImage) -> Result<()> {
    let (h, w, c) = img.dims();
    let bytes: Vec<u8> = img
        .as_slice()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Shape(format!("cannot write {c} channels as PNG"))),
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color).map_err(|e| Error::decode(path, e))
}

/// 16-bit PNG, values clamped to `[0, 1]`.
pub fn write_png16(path: &Path, img: &RealImage) -> Result<()> {
    let (h, w, c) = img.dims();
    let words: Vec<u16> = img
        .as_slice()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let dynimg = match c {
        1 => image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, words).map(DynamicImage::ImageLuma16),
        3 => image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w as u32, h as u32, words).map(DynamicImage::ImageRgb16),
        _ => None,
    }
    .ok_or_else(|| Error::Shape(format!("cannot write {c} channels as PNG")))?;
    dynimg.save(path).map_err(|e| Error::decode(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::decode(path, e))?;
    text.push('\n');
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::decode(path, e))
}

/// Parses a TOML file. Syntax and schema errors are configuration errors.
pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Sidecar stored next to a PSF array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsfMeta {
    pub wavelengths: Vec<f64>,
    pub normalization: Normalization,
    #[serde(default)]
    pub variant: Option<PsfVariant>,
    #[serde(default)]
    pub geometry: Option<OpticalGeometry>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `path` (NPY) and its JSON sidecar.
pub fn save_psf(path: &Path, psf: &Psf) -> Result<()> {
    write_npy(path, psf.image())?;
    let meta = PsfMeta {
        wavelengths: psf.wavelengths.clone(),
        normalization: psf.normalization,
        variant: psf.variant,
        geometry: psf.geometry,
    };
    write_json(&sidecar_path(path), &meta)
}

/// Loads a PSF from NPY (with optional sidecar) or a raster image. Raster
/// PSFs and NPY files without a sidecar are normalized to unit sum.
pub fn load_psf(path: &Path) -> Result<Psf> {
    let img = read_image(path)?;
    if !img.is_nonnegative() {
        return Err(Error::decode(path, "PSF has negative samples"));
    }
    let side = sidecar_path(path);
    let is_npy = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npy"));
    if is_npy && side.exists() {
        let meta: PsfMeta = read_json(&side)?;
        let mut psf = Psf::from_image(img, meta.normalization)?;
        psf.wavelengths = meta.wavelengths;
        psf.variant = meta.variant;
        psf.geometry = meta.geometry;
        Ok(psf)
    } else {
        Psf::from_image(img, Normalization::UnitSum)
    }
}
