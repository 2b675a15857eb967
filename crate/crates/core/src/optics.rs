//! Wave-optics PSF simulation for amplitude-mask lensless cameras.
//!
//! A point source at distance `d1` illuminates the mask with a spherical
//! wave; the masked field is propagated over `d2` to the sensor with the
//! band-limited angular spectrum method and the squared magnitude gives the
//! intensity PSF of one color channel.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{crop, fft_frequencies, ComplexField, CropSpec, Fft2Plan, RealImage};

/// Narrowband RGB wavelengths (meters).
pub const RGB_WAVELENGTHS: [f64; 3] = [640e-9, 550e-9, 460e-9];

/// Sub-pixel aperture of the LCD mask, height x width (meters).
pub const SUBPIXEL_APERTURE: (f64, f64) = (0.18e-3, 0.06e-3);

/// Mask rows and columns of the default random pattern.
pub const DIGICAM_MASK_DIMS: (usize, usize) = (18, 26);

/// Scene-to-mask distance (meters).
pub const DEFAULT_D1: f64 = 0.30;

/// Mask-to-sensor distance (meters).
pub const DEFAULT_D2: f64 = 2e-3;

/// `a^2 / (d * lambda)`.
pub fn fresnel_number(aperture: f64, distance: f64, wavelength: f64) -> Result<f64> {
    for (name, v) in [("aperture", aperture), ("distance", distance), ("wavelength", wavelength)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(aperture * aperture / (distance * wavelength))
}

/// Physical layout of the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalGeometry {
    /// Point source to mask (meters).
    pub d1: f64,
    /// Mask to sensor (meters).
    pub d2: f64,
    pub sim_height: usize,
    pub sim_width: usize,
    /// Simulation sample pitch (meters).
    pub sim_pitch: f64,
    /// Sensor window inside the simulation grid, in simulation samples.
    pub sensor_crop: CropSpec,
    /// Simulation samples per sensor pixel along each axis; the cropped
    /// intensity is binned by this factor.
    pub oversample: usize,
}

impl OpticalGeometry {
    /// Grid covering 4x the sensor extent at half the sensor pitch.
    pub fn from_sensor(
        sensor_height: usize,
        sensor_width: usize,
        sensor_pitch: f64,
        d1: f64,
        d2: f64,
    ) -> Result<Self> {
        const OVERSAMPLE: usize = 2;
        const EXTENT_FACTOR: usize = 4;
        let sim_height = sensor_height * OVERSAMPLE * EXTENT_FACTOR;
        let sim_width = sensor_width * OVERSAMPLE * EXTENT_FACTOR;
        let geometry = Self {
            d1,
            d2,
            sim_height,
            sim_width,
            sim_pitch: sensor_pitch / OVERSAMPLE as f64,
            sensor_crop: CropSpec::centered(
                sim_height,
                sim_width,
                sensor_height * OVERSAMPLE,
                sensor_width * OVERSAMPLE,
            )?,
            oversample: OVERSAMPLE,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    /// Full-resolution camera: 380x507 sensor pixels of 12.4 um (a 4056x3040,
    /// 1.55 um sensor binned 8x).
    pub fn digicam() -> Self {
        Self::from_sensor(380, 507, 12.4e-6, DEFAULT_D1, DEFAULT_D2)
            .expect("built-in geometry is valid")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("d1", self.d1), ("d2", self.d2), ("sim_pitch", self.sim_pitch)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.oversample == 0 {
            return Err(Error::InvalidParameter("oversample must be >= 1".into()));
        }
        self.sensor_crop.validate(self.sim_height, self.sim_width)?;
        if self.sensor_crop.out_height % self.oversample != 0
            || self.sensor_crop.out_width % self.oversample != 0
        {
            return Err(Error::InvalidParameter(format!(
                "sensor window {}x{} not divisible by oversample {}",
                self.sensor_crop.out_height, self.sensor_crop.out_width, self.oversample
            )));
        }
        Ok(())
    }

    pub fn sensor_dims(&self) -> (usize, usize) {
        (
            self.sensor_crop.out_height / self.oversample,
            self.sensor_crop.out_width / self.oversample,
        )
    }

    /// Physical extent (height, width) of the simulation grid.
    pub fn extent(&self) -> (f64, f64) {
        (
            self.sim_height as f64 * self.sim_pitch,
            self.sim_width as f64 * self.sim_pitch,
        )
    }

    /// Coordinate of sample `i` along an axis of `n` samples; index `n/2` sits on the optical axis.
    fn coord(&self, i: usize, n: usize) -> f64 {
        (i as f64 - (n / 2) as f64) * self.sim_pitch
    }

    fn empty_field(&self) -> Result<ComplexField> {
        ComplexField::zeros(self.sim_height, self.sim_width, (self.sim_pitch, self.sim_pitch))
    }
}

/// Pixel pitch and sub-pixel aperture of an RGB-striped LCD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskLayout {
    /// Pixel pitch (y, x) in meters. Each pixel holds R, G, B sub-pixel columns.
    pub pixel_pitch: (f64, f64),
    /// Sub-pixel aperture (height, width) in meters.
    pub aperture: (f64, f64),
}

impl Default for MaskLayout {
    /// 0.21 mm square pixels: 0.07 mm sub-pixel columns leave 0.01 mm of
    /// horizontal and 0.03 mm of vertical deadspace around each aperture.
    fn default() -> Self {
        Self {
            pixel_pitch: (0.21e-3, 0.21e-3),
            aperture: SUBPIXEL_APERTURE,
        }
    }
}

/// Color channel of the RGB mask and sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    pub fn index(self) -> usize {
        match self {
            Channel::R => 0,
            Channel::G => 1,
            Channel::B => 2,
        }
    }
}

/// Programmable mask: one weight per (channel, row, col) sub-pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPattern {
    pub rows: usize,
    pub cols: usize,
    /// Indexed `(channel * rows + row) * cols + col`.
    weights: Vec<f64>,
    pub layout: MaskLayout,
    pub deadspace_enabled: bool,
}

impl MaskPattern {
    pub const CHANNELS: usize = 3;

    pub fn new(rows: usize, cols: usize, weights: Vec<f64>, layout: MaskLayout, deadspace_enabled: bool) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter("mask needs at least one row and column".into()));
        }
        if weights.len() != Self::CHANNELS * rows * cols {
            return Err(Error::Shape(format!(
                "expected {} weights for 3x{rows}x{cols}, got {}",
                Self::CHANNELS * rows * cols,
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::InvalidParameter(format!("mask weight {w} outside [0, 1]")));
        }
        let (py, px) = layout.pixel_pitch;
        let (ah, aw) = layout.aperture;
        if !(py > 0.0 && px > 0.0 && ah > 0.0 && aw > 0.0) {
            return Err(Error::InvalidParameter("pitch and aperture must be positive".into()));
        }
        if ah > py || aw > px / 3.0 {
            return Err(Error::InvalidParameter(format!(
                "apertures {:?} overlap at pixel pitch {:?}",
                layout.aperture, layout.pixel_pitch
            )));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            layout,
            deadspace_enabled,
        })
    }

    /// Every sub-pixel fully open.
    pub fn open(rows: usize, cols: usize, deadspace_enabled: bool) -> Self {
        Self::new(
            rows,
            cols,
            vec![1.0; Self::CHANNELS * rows * cols],
            MaskLayout::default(),
            deadspace_enabled,
        )
        .expect("unit weights are valid")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, channel: Channel, row: usize, col: usize) -> f64 {
        self.weights[(channel.index() * self.rows + row) * self.cols + col]
    }

    pub fn set_weight(&mut self, channel: Channel, row: usize, col: usize, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidParameter(format!("mask weight {value} outside [0, 1]")));
        }
        self.weights[(channel.index() * self.rows + row) * self.cols + col] = value;
        Ok(())
    }

    pub fn with_deadspace(&self, enabled: bool) -> Self {
        Self {
            deadspace_enabled: enabled,
            ..self.clone()
        }
    }

    /// Physical (height, width) of the mask.
    pub fn extent(&self) -> (f64, f64) {
        (
            self.rows as f64 * self.layout.pixel_pitch.0,
            self.cols as f64 * self.layout.pixel_pitch.1,
        )
    }

    /// Center (y, x) of a sub-pixel, mask centered on the optical axis.
    ///
    /// With deadspace enabled the R, G, B sub-pixels are side-by-side columns
    /// inside each pixel. Without deadspace each channel's aperture fills the
    /// whole pixel cell, so the centers are the pixel centers.
    pub fn subpixel_center(&self, channel: Channel, row: usize, col: usize) -> (f64, f64) {
        let (py, px) = self.layout.pixel_pitch;
        let y = (row as f64 - (self.rows as f64 - 1.0) / 2.0) * py;
        let x = (col as f64 - (self.cols as f64 - 1.0) / 2.0) * px;
        if self.deadspace_enabled {
            (y, x + (channel.index() as f64 - 1.0) * px / 3.0)
        } else {
            (y, x)
        }
    }

    /// Aperture (height, width) in effect for the current deadspace setting.
    pub fn effective_aperture(&self) -> (f64, f64) {
        if self.deadspace_enabled {
            self.layout.aperture
        } else {
            self.layout.pixel_pitch
        }
    }
}

/// I.i.d. uniform weights on `[0, 1)` in the default layout, deadspace enabled.
pub fn random_mask(seed: u64, rows: usize, cols: usize) -> Result<MaskPattern> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter("mask needs at least one row and column".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..MaskPattern::CHANNELS * rows * cols)
        .map(|_| rng.gen::<f64>())
        .collect();
    MaskPattern::new(rows, cols, weights, MaskLayout::default(), true)
}

/// Length of `[lo, hi]` intersected with `[a, b]`.
fn overlap(lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    (hi.min(b) - lo.max(a)).max(0.0)
}

/// Rasterizes one channel of the mask onto the simulation grid with
/// area-weighted boundary samples.
pub fn rasterize_mask(mask: &MaskPattern, channel: Channel, grid: &OpticalGeometry) -> Result<ComplexField> {
    let (mask_h, mask_w) = mask.extent();
    let (grid_h, grid_w) = grid.extent();
    if mask_h > grid_h || mask_w > grid_w {
        return Err(Error::Precondition(format!(
            "mask extent {mask_h:.3e}x{mask_w:.3e} m exceeds grid {grid_h:.3e}x{grid_w:.3e} m"
        )));
    }
    let p = grid.sim_pitch;
    let (ah, aw) = mask.effective_aperture();
    let mut field = grid.empty_field()?;
    let (h, w) = (grid.sim_height, grid.sim_width);
    // sample index range whose cells may overlap [lo, hi]
    let span = |lo: f64, hi: f64, n: usize| {
        let first = ((lo / p + (n / 2) as f64 - 0.5).floor().max(0.0)) as usize;
        let last = ((hi / p + (n / 2) as f64 + 0.5).ceil() as usize).min(n - 1);
        first..=last
    };
    for row in 0..mask.rows {
        for col in 0..mask.cols {
            let weight = mask.weight(channel, row, col);
            if weight == 0.0 {
                continue;
            }
            let (cy, cx) = mask.subpixel_center(channel, row, col);
            let (y0, y1) = (cy - ah / 2.0, cy + ah / 2.0);
            let (x0, x1) = (cx - aw / 2.0, cx + aw / 2.0);
            for i in span(y0, y1, h) {
                let yc = grid.coord(i, h);
                let fy = overlap(y0, y1, yc - p / 2.0, yc + p / 2.0) / p;
                if fy == 0.0 {
                    continue;
                }
                for j in span(x0, x1, w) {
                    let xc = grid.coord(j, w);
                    let fx = overlap(x0, x1, xc - p / 2.0, xc + p / 2.0) / p;
                    if fx > 0.0 {
                        let cur = field.get(i, j);
                        field.set(i, j, cur + Complex64::new(weight * fy * fx, 0.0));
                    }
                }
            }
        }
    }
    // adjacent full-cell apertures can sum to 1 + eps on shared boundaries
    for z in field.as_mut_slice() {
        z.re = z.re.min(1.0);
    }
    Ok(field)
}

/// Spherical wave from an on-axis point at distance `d1`, sampled on the grid.
pub fn spherical_illumination(geometry: &OpticalGeometry, wavelength: f64) -> Result<ComplexField> {
    if !(wavelength > 0.0) {
        return Err(Error::InvalidParameter(format!("wavelength must be positive, got {wavelength}")));
    }
    let k = 2.0 * PI / wavelength;
    let d1 = geometry.d1;
    // k * d1 is large; reduce it separately so the small r-dependent part keeps its precision
    let base = (k * d1).rem_euclid(2.0 * PI);
    let (h, w) = (geometry.sim_height, geometry.sim_width);
    let mut field = geometry.empty_field()?;
    for i in 0..h {
        let y = geometry.coord(i, h);
        for j in 0..w {
            let x = geometry.coord(j, w);
            let r2 = x * x + y * y;
            let excess = r2 / ((r2 + d1 * d1).sqrt() + d1);
            field.set(i, j, Complex64::from_polar(1.0, base + k * excess));
        }
    }
    Ok(field)
}

/// Per-axis band limit `1 / (lambda * sqrt((z/S)^2 + 1))` for a region of extent `S`.
pub fn bandlimit_frequency(z: f64, extent: f64, wavelength: f64) -> f64 {
    1.0 / (wavelength * ((z / extent).powi(2) + 1.0).sqrt())
}

/// Band-limited angular spectrum transfer function in FFT frequency order.
///
/// The returned field's pitch holds the frequency spacing of each axis.
pub fn blas_kernel(grid: &OpticalGeometry, z: f64, wavelength: f64) -> Result<ComplexField> {
    blas_kernel_for(grid.sim_height, grid.sim_width, (grid.sim_pitch, grid.sim_pitch), z, wavelength)
}

fn blas_kernel_for(h: usize, w: usize, pitch: (f64, f64), z: f64, wavelength: f64) -> Result<ComplexField> {
    if !(z > 0.0) {
        return Err(Error::InvalidParameter(format!("propagation distance must be positive, got {z}")));
    }
    if !(wavelength > 0.0) {
        return Err(Error::InvalidParameter(format!("wavelength must be positive, got {wavelength}")));
    }
    let fy = fft_frequencies(h, pitch.0);
    let fx = fft_frequencies(w, pitch.1);
    let limit_y = bandlimit_frequency(z, h as f64 * pitch.0, wavelength);
    let limit_x = bandlimit_frequency(z, w as f64 * pitch.1, wavelength);
    let k = 2.0 * PI / wavelength;
    let mut data = Vec::with_capacity(h * w);
    for &v in &fy {
        for &u in &fx {
            let s = (wavelength * u).powi(2) + (wavelength * v).powi(2);
            if s < 1.0 && u.abs() <= limit_x && v.abs() <= limit_y {
                data.push(Complex64::from_polar(1.0, k * z * (1.0 - s).sqrt()));
            } else {
                data.push(Complex64::new(0.0, 0.0));
            }
        }
    }
    ComplexField::from_vec(
        h,
        w,
        (1.0 / (h as f64 * pitch.0), 1.0 / (w as f64 * pitch.1)),
        data,
    )
}

/// Free-space propagation by `z` using the band-limited angular spectrum.
pub fn propagate(field: &ComplexField, z: f64, wavelength: f64) -> Result<ComplexField> {
    let plan = Fft2Plan::new(field.height(), field.width())?;
    propagate_with(&plan, field, z, wavelength)
}

fn propagate_with(plan: &Fft2Plan, field: &ComplexField, z: f64, wavelength: f64) -> Result<ComplexField> {
    let kernel = blas_kernel_for(field.height(), field.width(), field.pitch(), z, wavelength)?;
    let mut out = field.clone();
    plan.forward(out.as_mut_slice());
    out.as_mut_slice()
        .iter_mut()
        .zip(kernel.as_slice())
        .for_each(|(a, h)| *a *= h);
    plan.inverse(out.as_mut_slice());
    Ok(out)
}

/// Which physical effects the simulated PSF includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsfVariant {
    /// Wave propagation through sub-pixel apertures separated by deadspace.
    WaveDeadspace,
    /// Wave propagation, apertures filling whole pixel cells.
    WaveNoDeadspace,
    /// Mask intensity as-is, no propagation.
    NoWave,
}

impl std::str::FromStr for PsfVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wave_deadspace" | "wave" => Ok(Self::WaveDeadspace),
            "wave_no_deadspace" => Ok(Self::WaveNoDeadspace),
            "no_wave" => Ok(Self::NoWave),
            other => Err(Error::Config(format!("unknown PSF variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    UnitSum,
    Raw,
}

/// Intensity PSF, one channel per wavelength.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    image: RealImage,
    pub wavelengths: Vec<f64>,
    pub geometry: Option<OpticalGeometry>,
    pub variant: Option<PsfVariant>,
    pub normalization: Normalization,
}

impl Psf {
    /// Wraps an intensity image, normalizing each channel if requested.
    /// Channels that sum to zero stay zero.
    pub fn from_image(image: RealImage, normalization: Normalization) -> Result<Self> {
        if !image.is_nonnegative() {
            return Err(Error::InvalidParameter("PSF samples must be nonnegative".into()));
        }
        let mut image = image;
        image.signed_intermediate = false;
        if normalization == Normalization::UnitSum {
            for c in 0..image.channels() {
                let mut plane = image.plane(c);
                let total: f64 = plane.iter().sum();
                if total > 0.0 {
                    plane.iter_mut().for_each(|v| *v /= total);
                    image.set_plane(c, &plane)?;
                }
            }
        }
        let channels = image.channels();
        Ok(Self {
            image,
            wavelengths: if channels == 3 { RGB_WAVELENGTHS.to_vec() } else { Vec::new() },
            geometry: None,
            variant: None,
            normalization,
        })
    }

    /// Unit impulse at `(h/2, w/2)` in every channel.
    pub fn delta(height: usize, width: usize, channels: usize) -> Self {
        let mut image = RealImage::zeros(height, width, channels);
        for c in 0..channels {
            image.set(height / 2, width / 2, c, 1.0);
        }
        Self::from_image(image, Normalization::UnitSum).expect("delta is a valid PSF")
    }

    pub fn image(&self) -> &RealImage {
        &self.image
    }

    pub fn channels(&self) -> usize {
        self.image.channels()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.image.height(), self.image.width())
    }

    /// Single-channel PSF made from channel `ch`.
    pub fn channel(&self, ch: usize) -> Result<Psf> {
        let (h, w) = self.dims();
        let image = RealImage::from_vec(h, w, 1, self.image.plane(ch))?;
        Ok(Self {
            image,
            wavelengths: self.wavelengths.get(ch).map(|&l| vec![l]).unwrap_or_default(),
            geometry: self.geometry,
            variant: self.variant,
            normalization: self.normalization,
        })
    }
}

fn bin_plane(plane: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; oh * ow];
    for r in 0..h {
        for c in 0..w {
            out[(r / factor) * ow + c / factor] += plane[r * w + c];
        }
    }
    out
}

/// Simulates the intensity PSF of `mask` for each wavelength (one channel each).
pub fn simulate_psf(
    mask: &MaskPattern,
    geometry: &OpticalGeometry,
    wavelengths: &[f64],
    variant: PsfVariant,
    normalization: Normalization,
) -> Result<Psf> {
    geometry.validate()?;
    if wavelengths.len() != MaskPattern::CHANNELS {
        return Err(Error::InvalidParameter(format!(
            "expected one wavelength per RGB channel, got {}",
            wavelengths.len()
        )));
    }
    let mask = match variant {
        PsfVariant::WaveDeadspace => mask.with_deadspace(true),
        PsfVariant::WaveNoDeadspace => mask.with_deadspace(false),
        PsfVariant::NoWave => mask.clone(),
    };
    let plan = Fft2Plan::new(geometry.sim_height, geometry.sim_width)?;
    let planes = Channel::ALL
        .par_iter()
        .zip(wavelengths.par_iter())
        .map(|(&channel, &wavelength)| -> Result<Vec<f64>> {
            let aperture = rasterize_mask(&mask, channel, geometry)?;
            let intensity = match variant {
                PsfVariant::NoWave => aperture.intensity(),
                _ => {
                    let field = spherical_illumination(geometry, wavelength)?.hadamard(&aperture)?;
                    let sensor = propagate_with(&plan, &field, geometry.d2, wavelength)?;
                    if !sensor.is_finite() {
                        return Err(Error::NonFinite(format!("propagated field at {wavelength:e} m")));
                    }
                    sensor.intensity()
                }
            };
            let full = RealImage::from_vec(geometry.sim_height, geometry.sim_width, 1, intensity)?;
            let window = crop(&full, &geometry.sensor_crop)?;
            Ok(bin_plane(
                window.as_slice(),
                window.height(),
                window.width(),
                geometry.oversample,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sh, sw) = geometry.sensor_dims();
    let image = RealImage::from_planes(sh, sw, &planes)?;
    let mut psf = Psf::from_image(image, normalization)?;
    psf.wavelengths = wavelengths.to_vec();
    psf.geometry = Some(*geometry);
    psf.variant = Some(variant);
    Ok(psf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::fft2;

    /// Small grid: 32x48 sensor pixels of 100 um, simulated at 50 um.
    fn small_geometry() -> OpticalGeometry {
        OpticalGeometry::from_sensor(32, 48, 100e-6, DEFAULT_D1, DEFAULT_D2).unwrap()
    }

    #[test]
    fn fresnel_numbers() {
        assert!((fresnel_number(0.06e-3, 2e-3, 750e-9).unwrap() - 2.4).abs() < 1e-12);
        assert!((fresnel_number(0.06e-3, 2e-3, 450e-9).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(fresnel_number(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!(fresnel_number(0.0, 1.0, 1.0).is_err());
        assert!(fresnel_number(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn open_mask_without_deadspace_is_solid() {
        let geometry = OpticalGeometry {
            sim_height: 128,
            sim_width: 192,
            sim_pitch: 30e-6,
            ..small_geometry()
        };
        let geometry = OpticalGeometry {
            sensor_crop: CropSpec::centered(128, 192, 64, 96).unwrap(),
            ..geometry
        };
        let mask = MaskPattern::open(4, 6, false);
        let field = rasterize_mask(&mask, Channel::G, &geometry).unwrap();
        let (mh, mw) = mask.extent();
        let expected_area = mh * mw / (30e-6f64).powi(2);
        let total: f64 = field.as_slice().iter().map(|z| z.re).sum();
        assert!((total - expected_area).abs() < 1e-6 * expected_area);
        // interior samples are exactly one
        assert!((field.get(64, 96).re - 1.0).abs() < 1e-12);
        assert!(field.as_slice().iter().all(|z| (0.0..=1.0).contains(&z.re) && z.im == 0.0));
        let ones = field.as_slice().iter().filter(|z| (z.re - 1.0).abs() < 1e-12).count() as f64;
        let inner = (mh / 30e-6 - 2.0) * (mw / 30e-6 - 2.0);
        assert!(ones >= inner);
    }

    #[test]
    fn single_subpixel_area() {
        let geometry = small_geometry();
        let mut mask = MaskPattern::new(18, 26, vec![0.0; 1404], MaskLayout::default(), true).unwrap();
        mask.set_weight(Channel::B, 7, 11, 1.0).unwrap();
        let field = rasterize_mask(&mask, Channel::B, &geometry).unwrap();
        let total: f64 = field.as_slice().iter().map(|z| z.re).sum();
        let expected = 0.06e-3 * 0.18e-3 / geometry.sim_pitch.powi(2);
        assert!((total - expected).abs() < 1.0, "{total} vs {expected}");
        assert!(rasterize_mask(&mask, Channel::R, &geometry)
            .unwrap()
            .as_slice()
            .iter()
            .all(|z| z.re == 0.0));
    }

    #[test]
    fn default_mask_has_1404_weights() {
        let mask = random_mask(0, DIGICAM_MASK_DIMS.0, DIGICAM_MASK_DIMS.1).unwrap();
        assert_eq!(mask.weight_count(), 1404);
        assert_eq!(mask, random_mask(0, 18, 26).unwrap());
        assert_ne!(mask, random_mask(1, 18, 26).unwrap());
    }

    #[test]
    fn random_weights_have_uniform_mean() {
        // 3 * 100 * 334 = 100200 draws
        let mask = random_mask(42, 100, 334).unwrap();
        let mean = mask.weights().iter().sum::<f64>() / mask.weight_count() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn mask_larger_than_grid_is_rejected() {
        let geometry = OpticalGeometry::from_sensor(4, 4, 100e-6, 0.3, 2e-3).unwrap();
        let mask = MaskPattern::open(18, 26, true);
        assert!(matches!(
            rasterize_mask(&mask, Channel::R, &geometry),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn spherical_wave_is_pure_phase() {
        let geometry = small_geometry();
        let field = spherical_illumination(&geometry, 550e-9).unwrap();
        assert!(field.as_slice().iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        let on_axis = field.get(geometry.sim_height / 2, geometry.sim_width / 2);
        let expected = (2.0 * PI * geometry.d1 / 550e-9).rem_euclid(2.0 * PI);
        let diff = (on_axis.arg().rem_euclid(2.0 * PI) - expected).abs();
        assert!(diff.min(2.0 * PI - diff) < 1e-9);
    }

    fn phase_spread(geometry: &OpticalGeometry, lambda: f64) -> f64 {
        let field = spherical_illumination(geometry, lambda).unwrap();
        let reference = field.get(geometry.sim_height / 2, geometry.sim_width / 2);
        field
            .as_slice()
            .iter()
            .map(|z| (z / reference).arg().abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn distant_source_approaches_plane_wave() {
        // 1 cm grid; spread follows k * r_max^2 / (2 d1) and vanishes as d1 grows
        let pitch = 1e-2 / 128.0;
        let lambda = 550e-9;
        let geometry = OpticalGeometry {
            d1: 1e3,
            d2: 2e-3,
            sim_height: 128,
            sim_width: 128,
            sim_pitch: pitch,
            sensor_crop: CropSpec::full(128, 128),
            oversample: 1,
        };
        let r_max2 = 2.0 * (64.0 * pitch).powi(2);
        let predicted = 2.0 * PI / lambda * r_max2 / (2.0 * geometry.d1);
        let spread = phase_spread(&geometry, lambda);
        assert!((spread - predicted).abs() < 1e-3 * predicted, "{spread} vs {predicted}");
        let far = OpticalGeometry { d1: 1e5, ..geometry };
        assert!(phase_spread(&far, lambda) < 1e-2);
    }

    #[test]
    fn blas_kernel_magnitudes_are_binary() {
        let geometry = small_geometry();
        let kernel = blas_kernel(&geometry, 2e-3, 550e-9).unwrap();
        let dc = kernel.get(0, 0);
        let expected = Complex64::from_polar(1.0, 2.0 * PI * 2e-3 / 550e-9);
        assert!((dc - expected).norm() < 1e-9);
        for z in kernel.as_slice() {
            let m = z.norm();
            assert!(m == 0.0 || (m - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn blas_passband_matches_analytic_limit() {
        // S = 5 mm along x sampled finely enough for the band limit to bite
        let (w, pitch) = (20_000usize, 0.25e-6);
        let (z, lambda) = (2e-3, 550e-9);
        let kernel = blas_kernel_for(1, w, (pitch, pitch), z, lambda).unwrap();
        let passed = kernel.as_slice().iter().filter(|h| h.norm() > 0.5).count() as f64;
        let limit = bandlimit_frequency(z, w as f64 * pitch, lambda);
        let spacing = 1.0 / (w as f64 * pitch);
        let analytic = 2.0 * limit / spacing;
        assert!((passed - analytic).abs() <= 1.0 + 1e-9, "{passed} vs {analytic}");
        assert!(passed < w as f64);
    }

    #[test]
    fn propagation_conserves_bandlimited_energy() {
        let geometry = small_geometry();
        let mask = random_mask(3, 18, 26).unwrap();
        let field = rasterize_mask(&mask, Channel::G, &geometry).unwrap();
        let out = propagate(&field, 2e-3, 550e-9).unwrap();
        assert!(out.energy() <= field.energy() * (1.0 + 1e-12));
        // with 50 um sampling the whole spectrum is in band
        assert!(((out.energy() - field.energy()) / field.energy()).abs() < 1e-9);
    }

    #[test]
    fn tiny_distance_is_near_identity() {
        let geometry = small_geometry();
        let mask = random_mask(5, 18, 26).unwrap();
        let field = rasterize_mask(&mask, Channel::R, &geometry).unwrap();
        let (z, lambda) = (1e-12, 640e-9);
        let out = propagate(&field, z, lambda).unwrap();
        // only the global piston phase k*z survives
        let piston = Complex64::from_polar(1.0, 2.0 * PI * z / lambda);
        let err: f64 = out
            .as_slice()
            .iter()
            .zip(field.as_slice())
            .map(|(a, b)| (a - b * piston).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err / field.energy().sqrt() < 1e-6);
    }

    #[test]
    fn gaussian_beam_width_follows_divergence() {
        let (n, pitch, w0, lambda, z) = (256usize, 2e-6, 20e-6, 550e-9, 2e-3);
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let y = (i as f64 - (n / 2) as f64) * pitch;
                let x = (j as f64 - (n / 2) as f64) * pitch;
                data.push(Complex64::new((-(x * x + y * y) / (w0 * w0)).exp(), 0.0));
            }
        }
        let field = ComplexField::from_vec(n, n, (pitch, pitch), data).unwrap();
        let out = propagate(&field, z, lambda).unwrap();
        let intensity = out.intensity();
        let total: f64 = intensity.iter().sum();
        let second_moment: f64 = intensity
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let x = ((k % n) as f64 - (n / 2) as f64) * pitch;
                v * x * x
            })
            .sum::<f64>()
            / total;
        // intensity exp(-2 x^2 / w^2) has <x^2> = w^2 / 4
        let measured = 2.0 * second_moment.sqrt();
        let rayleigh = PI * w0 * w0 / lambda;
        let analytic = w0 * (1.0 + (z / rayleigh).powi(2)).sqrt();
        assert!((measured - analytic).abs() / analytic < 0.02, "{measured} vs {analytic}");
    }

    #[test]
    fn zero_mask_gives_zero_psf() {
        let geometry = small_geometry();
        let mask = MaskPattern::new(18, 26, vec![0.0; 1404], MaskLayout::default(), true).unwrap();
        let psf = simulate_psf(&mask, &geometry, &RGB_WAVELENGTHS, PsfVariant::WaveDeadspace, Normalization::UnitSum).unwrap();
        assert!(psf.image().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_sum_psf_per_channel() {
        let geometry = small_geometry();
        let mask = random_mask(9, 18, 26).unwrap();
        for variant in [PsfVariant::WaveDeadspace, PsfVariant::WaveNoDeadspace, PsfVariant::NoWave] {
            let psf = simulate_psf(&mask, &geometry, &RGB_WAVELENGTHS, variant, Normalization::UnitSum).unwrap();
            assert_eq!(psf.dims(), (32, 48));
            assert!(psf.image().is_nonnegative());
            for c in 0..3 {
                let s: f64 = psf.image().plane(c).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pinhole_without_propagation_is_the_aperture() {
        let geometry = small_geometry();
        let mut mask = MaskPattern::new(18, 26, vec![0.0; 1404], MaskLayout::default(), true).unwrap();
        mask.set_weight(Channel::R, 9, 13, 1.0).unwrap();
        let psf = simulate_psf(&mask, &geometry, &RGB_WAVELENGTHS, PsfVariant::NoWave, Normalization::Raw).unwrap();
        let aperture = rasterize_mask(&mask, Channel::R, &geometry).unwrap();
        let full = RealImage::from_vec(geometry.sim_height, geometry.sim_width, 1, aperture.intensity()).unwrap();
        let window = crop(&full, &geometry.sensor_crop).unwrap();
        let binned = bin_plane(window.as_slice(), window.height(), window.width(), geometry.oversample);
        assert_eq!(psf.image().plane(0), binned);
        assert!(psf.image().plane(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_spectrum_is_unitary_inside_band() {
        let geometry = small_geometry();
        let field = rasterize_mask(&random_mask(1, 18, 26).unwrap(), Channel::B, &geometry).unwrap();
        let spectrum = fft2(&field).unwrap();
        assert!(((spectrum.energy() - field.energy()) / field.energy()).abs() < 1e-12);
    }
}
