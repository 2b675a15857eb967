//! Imaging forward models: FFT-based shift-invariant convolution, explicit
//! dense system matrices for small oracle problems, and noise injection.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{next_fast_len, CropSpec, Fft2Plan, RealImage};
use crate::optics::Psf;

/// Samples more negative than this after convolution are counted as real
/// negative output rather than round-off.
pub const CLIP_TOLERANCE: f64 = 1e-9;

/// Shift-invariant convolution with a fixed PSF, evaluated in a zero-padded
/// frequency domain large enough to avoid wraparound.
///
/// Scenes and measurements share the same `scene_dims`; the kernel is
/// centered at `(psf_h / 2, psf_w / 2)` so a centered impulse is the identity.
#[derive(Debug, Clone)]
pub struct LsiOperator {
    scene_dims: (usize, usize),
    padded_dims: (usize, usize),
    window: CropSpec,
    plan: Fft2Plan,
    spectra: Vec<Vec<Complex64>>,
}

impl LsiOperator {
    pub fn new(psf: &Psf, scene_h: usize, scene_w: usize) -> Result<Self> {
        let (kh, kw) = psf.dims();
        if scene_h == 0 || scene_w == 0 {
            return Err(Error::Shape("empty scene".into()));
        }
        let ph = next_fast_len(scene_h + kh);
        let pw = next_fast_len(scene_w + kw);
        let plan = Fft2Plan::new(ph, pw)?;
        let scale = ((ph * pw) as f64).sqrt();
        let image = psf.image();
        let spectra = (0..psf.channels())
            .map(|c| {
                let mut buf = vec![Complex64::new(0.0, 0.0); ph * pw];
                for a in 0..kh {
                    let r = (a + ph - kh / 2) % ph;
                    for b in 0..kw {
                        let s = (b + pw - kw / 2) % pw;
                        buf[r * pw + s] = Complex64::new(image.get(a, b, c), 0.0);
                    }
                }
                plan.forward(&mut buf);
                buf.iter_mut().for_each(|z| *z *= scale);
                buf
            })
            .collect();
        Ok(Self {
            scene_dims: (scene_h, scene_w),
            padded_dims: (ph, pw),
            window: CropSpec::centered(ph, pw, scene_h, scene_w)?,
            plan,
            spectra,
        })
    }

    pub fn channels(&self) -> usize {
        self.spectra.len()
    }

    pub fn scene_dims(&self) -> (usize, usize) {
        self.scene_dims
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        self.padded_dims
    }

    /// Location of the sensor window inside the padded grid.
    pub fn window(&self) -> CropSpec {
        self.window
    }

    pub fn plan(&self) -> &Fft2Plan {
        &self.plan
    }

    /// Transfer function of channel `ch` (scaled so that convolution is a
    /// plain product of unitary spectra).
    pub fn spectrum(&self, ch: usize) -> &[Complex64] {
        &self.spectra[ch]
    }

    pub fn embed(&self, plane: &[f64]) -> Vec<f64> {
        let (ph, pw) = self.padded_dims;
        let (h, w) = self.scene_dims;
        let mut out = vec![0.0; ph * pw];
        for r in 0..h {
            let dst = (r + self.window.row_offset) * pw + self.window.col_offset;
            out[dst..dst + w].copy_from_slice(&plane[r * w..(r + 1) * w]);
        }
        out
    }

    pub fn extract(&self, padded: &[f64]) -> Vec<f64> {
        let pw = self.padded_dims.1;
        let (h, w) = self.scene_dims;
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            let src = (r + self.window.row_offset) * pw + self.window.col_offset;
            out.extend_from_slice(&padded[src..src + w]);
        }
        out
    }

    fn filter_padded(&self, ch: usize, padded: &[f64], conjugate: bool) -> Vec<f64> {
        let mut buf: Vec<Complex64> = padded.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.plan.forward(&mut buf);
        for (z, k) in buf.iter_mut().zip(&self.spectra[ch]) {
            *z *= if conjugate { k.conj() } else { *k };
        }
        self.plan.inverse(&mut buf);
        buf.into_iter().map(|z| z.re).collect()
    }

    /// Circular convolution on the padded grid.
    pub fn convolve_padded(&self, ch: usize, padded: &[f64]) -> Vec<f64> {
        self.filter_padded(ch, padded, false)
    }

    /// Adjoint of [`LsiOperator::convolve_padded`] (circular correlation).
    pub fn correlate_padded(&self, ch: usize, padded: &[f64]) -> Vec<f64> {
        self.filter_padded(ch, padded, true)
    }

    /// Scene plane to measurement plane (no clipping).
    pub fn apply(&self, ch: usize, plane: &[f64]) -> Vec<f64> {
        self.extract(&self.convolve_padded(ch, &self.embed(plane)))
    }

    /// Adjoint of [`LsiOperator::apply`].
    pub fn apply_adjoint(&self, ch: usize, plane: &[f64]) -> Vec<f64> {
        self.extract(&self.correlate_padded(ch, &self.embed(plane)))
    }

    /// Applies the operator to every channel of an image.
    pub fn apply_image(&self, img: &RealImage) -> Result<RealImage> {
        self.check_image(img)?;
        let planes: Vec<Vec<f64>> = (0..img.channels())
            .map(|c| self.apply(c, &img.plane(c)))
            .collect();
        let mut out = RealImage::from_planes(img.height(), img.width(), &planes)?;
        out.signed_intermediate = true;
        Ok(out)
    }

    pub(crate) fn check_image(&self, img: &RealImage) -> Result<()> {
        if (img.height(), img.width()) != self.scene_dims {
            return Err(Error::Shape(format!(
                "image {}x{} does not match operator {}x{}",
                img.height(),
                img.width(),
                self.scene_dims.0,
                self.scene_dims.1
            )));
        }
        if img.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "image has {} channels, PSF has {}",
                img.channels(),
                self.channels()
            )));
        }
        Ok(())
    }
}

/// Linear convolution of `scene` with `psf`, cropped back to the scene
/// extent, with negative round-off clipped to zero.
pub fn convolve_lsi(scene: &RealImage, psf: &Psf) -> Result<RealImage> {
    convolve_lsi_audited(scene, psf).map(|(img, _)| img)
}

/// As [`convolve_lsi`], also returning how many samples were below
/// `-CLIP_TOLERANCE` before clipping.
pub fn convolve_lsi_audited(scene: &RealImage, psf: &Psf) -> Result<(RealImage, usize)> {
    let op = LsiOperator::new(psf, scene.height(), scene.width())?;
    let mut out = op.apply_image(scene)?;
    if scene.signed_intermediate {
        return Ok((out, 0));
    }
    let mut flagged = 0;
    for v in out.as_mut_slice() {
        if *v < -CLIP_TOLERANCE {
            flagged += 1;
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out.signed_intermediate = false;
    Ok((out, flagged))
}

/// Largest scene side accepted by [`lsi_to_dense`].
pub const DENSE_GUARD: usize = 16;

/// Explicit system `y = C (H + delta) x + n` for small oracle problems.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSystem {
    pub h: DMatrix<f64>,
    pub delta: Option<DMatrix<f64>>,
    /// Selection matrix realizing the sensor crop.
    pub crop: Option<DMatrix<f64>>,
}

impl DenseSystem {
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("system matrix".into()));
        }
        Ok(Self {
            h,
            delta: None,
            crop: None,
        })
    }

    pub fn with_delta(mut self, delta: DMatrix<f64>) -> Result<Self> {
        if delta.shape() != self.h.shape() {
            return Err(Error::Shape(format!(
                "delta {:?} vs H {:?}",
                delta.shape(),
                self.h.shape()
            )));
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mismatch matrix".into()));
        }
        self.delta = Some(delta);
        Ok(self)
    }

    pub fn with_crop(mut self, crop: DMatrix<f64>) -> Result<Self> {
        if crop.ncols() != self.h.nrows() {
            return Err(Error::Shape(format!(
                "crop has {} columns, H has {} rows",
                crop.ncols(),
                self.h.nrows()
            )));
        }
        self.crop = Some(crop);
        Ok(self)
    }

    /// `H + delta`.
    pub fn h_hat(&self) -> DMatrix<f64> {
        match &self.delta {
            Some(d) => &self.h + d,
            None => self.h.clone(),
        }
    }

    pub fn delta_or_zero(&self) -> DMatrix<f64> {
        self.delta
            .clone()
            .unwrap_or_else(|| DMatrix::zeros(self.h.nrows(), self.h.ncols()))
    }

    /// Row count of the (optionally cropped) output.
    pub fn output_len(&self) -> usize {
        self.crop.as_ref().map_or(self.h.nrows(), |c| c.nrows())
    }
}

/// Selection matrix keeping the listed entries of an `n`-vector, in order.
pub fn selection_matrix(indices: &[usize], n: usize) -> Result<DMatrix<f64>> {
    let mut c = DMatrix::zeros(indices.len(), n);
    for (row, &idx) in indices.iter().enumerate() {
        if idx >= n {
            return Err(Error::Shape(format!("selection index {idx} out of range {n}")));
        }
        c[(row, idx)] = 1.0;
    }
    Ok(c)
}

/// Selection matrix of a crop window on a row-major `h x w` image.
pub fn crop_selection(spec: &CropSpec, h: usize, w: usize) -> Result<DMatrix<f64>> {
    spec.validate(h, w)?;
    let indices: Vec<usize> = (0..spec.out_height)
        .flat_map(|r| (0..spec.out_width).map(move |c| (r + spec.row_offset) * w + c + spec.col_offset))
        .collect();
    selection_matrix(&indices, h * w)
}

/// Doubly block-Toeplitz matrix of channel `ch` of `psf` acting on row-major
/// `scene_h x scene_w` scenes; column `k` is the PSF centered on pixel `k`.
pub fn lsi_to_dense(psf: &Psf, ch: usize, scene_h: usize, scene_w: usize) -> Result<DenseSystem> {
    if scene_h > DENSE_GUARD || scene_w > DENSE_GUARD {
        return Err(Error::InvalidParameter(format!(
            "dense materialization limited to {DENSE_GUARD}x{DENSE_GUARD}, got {scene_h}x{scene_w}"
        )));
    }
    if ch >= psf.channels() {
        return Err(Error::Shape(format!("channel {ch} of {}-channel PSF", psf.channels())));
    }
    let (kh, kw) = psf.dims();
    let n = scene_h * scene_w;
    let mut h = DMatrix::zeros(n, n);
    for r in 0..scene_h {
        for c in 0..scene_w {
            for rs in 0..scene_h {
                let a = r as isize - rs as isize + (kh / 2) as isize;
                if a < 0 || a >= kh as isize {
                    continue;
                }
                for cs in 0..scene_w {
                    let b = c as isize - cs as isize + (kw / 2) as isize;
                    if b < 0 || b >= kw as isize {
                        continue;
                    }
                    h[(r * scene_w + c, rs * scene_w + cs)] =
                        psf.image().get(a as usize, b as usize, ch);
                }
            }
        }
    }
    DenseSystem::new(h)
}

/// `C (H + delta) x + n`, with the crop and mismatch optional.
pub fn dense_forward(sys: &DenseSystem, x: &DVector<f64>, noise: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    if x.len() != sys.h.ncols() {
        return Err(Error::Shape(format!(
            "x has {} entries, H has {} columns",
            x.len(),
            sys.h.ncols()
        )));
    }
    let mut y = sys.h_hat() * x;
    if let Some(c) = &sys.crop {
        y = c * y;
    }
    if let Some(n) = noise {
        if n.len() != y.len() {
            return Err(Error::Shape(format!("noise has {} entries, output {}", n.len(), y.len())));
        }
        y += n;
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    ShotPoisson,
    Gaussian,
}

/// Noise at a target energy SNR, `10 log10(|signal|^2 / E|noise|^2)`.
///
/// `snr_db = +inf` disables injection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(with = "snr_repr")]
    pub snr_db: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn shot(snr_db: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::ShotPoisson,
            snr_db,
            seed,
        }
    }

    pub fn gaussian(snr_db: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            snr_db,
            seed,
        }
    }

    pub fn noiseless() -> Self {
        Self::shot(f64::INFINITY, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidParameter(format!("snr_db must be finite or +inf, got {}", self.snr_db)));
        }
        Ok(())
    }

    pub fn apply(&self, img: &RealImage) -> Result<RealImage> {
        match self.kind {
            NoiseKind::ShotPoisson => add_shot_noise(img, self),
            NoiseKind::Gaussian => add_gaussian_noise(img, self),
        }
    }
}

/// Serializes an infinite SNR as the string `"inf"`.
pub(crate) mod snr_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Finite(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Finite(*v).serialize(s)
        } else {
            Repr::Tag("inf".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Finite(v) => Ok(v),
            Repr::Tag(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Tag(t) => Err(serde::de::Error::custom(format!("invalid snr {t:?}"))),
        }
    }
}

/// Mixes a master seed with a stream id (SplitMix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Signal-dependent Poisson noise.
///
/// The measurement is scaled to photon counts `s * y` with
/// `s = 10^(snr/10) * sum(y) / sum(y^2)`, which makes the expected noise
/// energy `sum(y) / s` hit the requested SNR; counts are drawn per pixel and
/// scaled back.
pub fn add_shot_noise(meas: &RealImage, spec: &NoiseSpec) -> Result<RealImage> {
    spec.validate()?;
    if !meas.is_nonnegative() {
        return Err(Error::InvalidParameter("shot noise needs a nonnegative measurement".into()));
    }
    if spec.snr_db == f64::INFINITY {
        return Ok(meas.clone());
    }
    let total = meas.sum();
    let energy = meas.energy();
    if total == 0.0 {
        return Ok(meas.clone());
    }
    let scale = 10f64.powf(spec.snr_db / 10.0) * total / energy;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = meas.clone();
    for v in out.as_mut_slice() {
        let photons = *v * scale;
        *v = if photons > 0.0 {
            let dist = Poisson::new(photons)
                .map_err(|e| Error::InvalidParameter(format!("poisson rate {photons}: {e}")))?;
            dist.sample(&mut rng) / scale
        } else {
            0.0
        };
    }
    Ok(out)
}

/// I.i.d. zero-mean Gaussian noise with variance `|arr|^2 / (N 10^(snr/10))`.
pub fn add_gaussian_noise(arr: &RealImage, spec: &NoiseSpec) -> Result<RealImage> {
    spec.validate()?;
    if !arr.is_finite() {
        return Err(Error::NonFinite("gaussian noise input".into()));
    }
    if spec.snr_db == f64::INFINITY {
        return Ok(arr.clone());
    }
    let energy = arr.energy();
    if energy == 0.0 {
        return Err(Error::InvalidParameter("SNR is undefined for an all-zero signal".into()));
    }
    let n = arr.as_slice().len() as f64;
    let sigma = (energy / (n * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = arr.clone();
    for v in out.as_mut_slice() {
        *v += normal.sample(&mut rng);
    }
    out.signed_intermediate = true;
    Ok(out)
}
