//! Shared numeric substrate: real image grids, complex fields, the 2D FFT,
//! zero-padding and the sensor crop operator.
//!
//! All FFTs use the unitary convention (`1/sqrt(N)` in both directions), so
//! Parseval holds without extra factors.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// H x W x C grid of real samples stored row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    /// Set for intermediate buffers that may legitimately hold negative values.
    pub signed_intermediate: bool,
}

fn checked_len(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidParameter(format!("sample count overflows for dims {dims:?}")))
}

impl RealImage {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        let len = height * width * channels;
        Self {
            height,
            width,
            channels,
            data: vec![0.0; len],
            signed_intermediate: false,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        let mut img = Self::zeros(height, width, channels);
        img.data.fill(value);
        img
    }

    /// Wraps a sample vector, rejecting wrong lengths and non-finite samples.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let len = checked_len(&[height, width, channels])?;
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "empty image {height}x{width}x{channels}"
            )));
        }
        if data.len() != len {
            return Err(Error::Shape(format!(
                "expected {len} samples for {height}x{width}x{channels}, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image samples".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            signed_intermediate: false,
        })
    }

    /// Builds a multi-channel image from per-channel planes of equal size.
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        let mut img = Self::zeros(height, width, channels.max(1));
        if channels == 0 {
            return Err(Error::Shape("no channel planes given".into()));
        }
        for (c, plane) in planes.iter().enumerate() {
            img.set_plane(c, plane)?;
        }
        if img.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("channel planes".into()));
        }
        Ok(img)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// Copies one channel out as a row-major plane.
    pub fn plane(&self, ch: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(ch)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn set_plane(&mut self, ch: usize, plane: &[f64]) -> Result<()> {
        if ch >= self.channels || plane.len() != self.pixel_count() {
            return Err(Error::Shape(format!(
                "plane of {} samples for channel {ch} of {}x{}x{}",
                plane.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        for (dst, &v) in self.data.iter_mut().skip(ch).step_by(self.channels).zip(plane) {
            *dst = v;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn dot(&self, other: &RealImage) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn ensure_same_shape(&self, other: &RealImage) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&v| v >= 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &RealImage) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a -= b);
        out.signed_intermediate = true;
        Ok(out)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }
}

/// H x W grid of complex samples with a physical sample pitch (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    height: usize,
    width: usize,
    pitch: (f64, f64),
    data: Vec<Complex64>,
}

impl ComplexField {
    pub fn zeros(height: usize, width: usize, pitch: (f64, f64)) -> Result<Self> {
        let len = checked_len(&[height, width])?;
        Self::validate_pitch(pitch)?;
        Ok(Self {
            height,
            width,
            pitch,
            data: vec![Complex64::new(0.0, 0.0); len],
        })
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        pitch: (f64, f64),
        data: Vec<Complex64>,
    ) -> Result<Self> {
        let len = checked_len(&[height, width])?;
        Self::validate_pitch(pitch)?;
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty field {height}x{width}")));
        }
        if data.len() != len {
            return Err(Error::Shape(format!(
                "expected {len} samples for {height}x{width}, got {}",
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("complex field samples".into()));
        }
        Ok(Self {
            height,
            width,
            pitch,
            data,
        })
    }

    /// Real plane promoted to a complex field.
    pub fn from_real(height: usize, width: usize, pitch: (f64, f64), plane: &[f64]) -> Result<Self> {
        Self::from_vec(
            height,
            width,
            pitch,
            plane.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        )
    }

    fn validate_pitch(pitch: (f64, f64)) -> Result<()> {
        if !(pitch.0 > 0.0 && pitch.1 > 0.0 && pitch.0.is_finite() && pitch.1.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "pitch must be positive, got {pitch:?}"
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pitch(&self) -> (f64, f64) {
        self.pitch
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
        self.data[row * self.width + col] = value;
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Elementwise product, keeping `self`'s pitch.
    pub fn hadamard(&self, other: &ComplexField) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a *= b);
        Ok(out)
    }

    pub fn intensity(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm_sqr()).collect()
    }
}

/// Rectangular window `[row_offset, row_offset + out_height) x [col_offset, ...)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub row_offset: usize,
    pub col_offset: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl CropSpec {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            row_offset: 0,
            col_offset: 0,
            out_height: height,
            out_width: width,
        }
    }

    /// Centered window of `out` dims inside a `src`-sized grid; the inverse of
    /// [`pad_embed`]'s placement.
    pub fn centered(src_h: usize, src_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h > src_h || out_w > src_w {
            return Err(Error::InvalidParameter(format!(
                "window {out_h}x{out_w} larger than source {src_h}x{src_w}"
            )));
        }
        Ok(Self {
            row_offset: (src_h - out_h) / 2,
            col_offset: (src_w - out_w) / 2,
            out_height: out_h,
            out_width: out_w,
        })
    }

    pub fn validate(&self, src_h: usize, src_w: usize) -> Result<()> {
        let fits = self.out_height > 0
            && self.out_width > 0
            && self
                .row_offset
                .checked_add(self.out_height)
                .is_some_and(|end| end <= src_h)
            && self
                .col_offset
                .checked_add(self.out_width)
                .is_some_and(|end| end <= src_w);
        if !fits {
            return Err(Error::Shape(format!(
                "crop {self:?} does not fit inside {src_h}x{src_w}"
            )));
        }
        Ok(())
    }
}

/// Zero-embeds `img` centered inside a `target_h x target_w` grid.
pub fn pad_embed(img: &RealImage, target_h: usize, target_w: usize) -> Result<RealImage> {
    let spec = CropSpec::centered(target_h, target_w, img.height(), img.width())?;
    crop_adjoint(img, &spec, target_h, target_w)
}

/// Copies the window described by `spec` out of `img`.
pub fn crop(img: &RealImage, spec: &CropSpec) -> Result<RealImage> {
    spec.validate(img.height(), img.width())?;
    let c = img.channels();
    let mut out = RealImage::zeros(spec.out_height, spec.out_width, c);
    out.signed_intermediate = img.signed_intermediate;
    let row_len = spec.out_width * c;
    for r in 0..spec.out_height {
        let src = img.index(r + spec.row_offset, spec.col_offset, 0);
        let dst = r * row_len;
        out.data[dst..dst + row_len].copy_from_slice(&img.data[src..src + row_len]);
    }
    Ok(out)
}

/// Adjoint of [`crop`]: places `img` at the window inside a zero field of
/// `full_h x full_w`.
pub fn crop_adjoint(img: &RealImage, spec: &CropSpec, full_h: usize, full_w: usize) -> Result<RealImage> {
    spec.validate(full_h, full_w)?;
    if (img.height(), img.width()) != (spec.out_height, spec.out_width) {
        return Err(Error::Shape(format!(
            "image {}x{} does not match crop window {}x{}",
            img.height(),
            img.width(),
            spec.out_height,
            spec.out_width
        )));
    }
    let c = img.channels();
    let mut out = RealImage::zeros(full_h, full_w, c);
    out.signed_intermediate = img.signed_intermediate;
    let row_len = spec.out_width * c;
    for r in 0..spec.out_height {
        let dst = out.index(r + spec.row_offset, spec.col_offset, 0);
        let src = r * row_len;
        out.data[dst..dst + row_len].copy_from_slice(&img.data[src..src + row_len]);
    }
    Ok(out)
}

/// Reusable plan for unitary 2D transforms of one fixed size.
#[derive(Clone)]
pub struct Fft2Plan {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Fft2Plan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2Plan")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl Fft2Plan {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        let n = checked_len(&[height, width])?;
        if n == 0 {
            return Err(Error::Shape("FFT of an empty grid".into()));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
            scale: 1.0 / (n as f64).sqrt(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.row_fwd, &self.col_fwd);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.row_inv, &self.col_inv);
    }

    fn run(&self, data: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.len(), self.height * self.width, "buffer size mismatch");
        rows.process(data);
        let mut column = vec![Complex64::new(0.0, 0.0); self.height];
        for c in 0..self.width {
            for (r, slot) in column.iter_mut().enumerate() {
                *slot = data[r * self.width + c];
            }
            cols.process(&mut column);
            for (r, v) in column.iter().enumerate() {
                data[r * self.width + c] = v * self.scale;
            }
        }
    }
}

/// Unitary forward 2D DFT.
pub fn fft2(field: &ComplexField) -> Result<ComplexField> {
    let plan = Fft2Plan::new(field.height, field.width)?;
    let mut out = field.clone();
    plan.forward(&mut out.data);
    Ok(out)
}

/// Unitary inverse 2D DFT.
pub fn ifft2(field: &ComplexField) -> Result<ComplexField> {
    let plan = Fft2Plan::new(field.height, field.width)?;
    let mut out = field.clone();
    plan.inverse(&mut out.data);
    Ok(out)
}

/// DFT sample frequencies (cycles per unit) in standard FFT ordering.
pub fn fft_frequencies(n: usize, spacing: f64) -> Vec<f64> {
    let denom = n as f64 * spacing;
    (0..n)
        .map(|k| {
            let signed = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
            signed / denom
        })
        .collect()
}

/// Smallest `m >= n` whose only prime factors are 2, 3 and 5.
pub fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}
