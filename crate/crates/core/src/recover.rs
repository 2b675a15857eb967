//! Camera inversion: Wiener filtering, direct inversion, FISTA and ADMM with
//! total-variation priors, and the pre/inversion/post pipeline.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::{DenseSystem, LsiOperator};
use crate::grid::RealImage;
use crate::optics::{Normalization, Psf, PsfVariant};

/// `(|v| - beta)_+ sign(v)`.
pub fn shrink(v: f64, beta: f64) -> f64 {
    let m = v.abs() - beta;
    if m > 0.0 {
        m.copysign(v)
    } else {
        0.0
    }
}

/// Elementwise soft-thresholding.
pub fn soft_threshold(v: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidParameter(format!("threshold must be >= 0, got {beta}")));
    }
    Ok(v.iter().map(|&x| shrink(x, beta)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Replicate edge: the difference across the last row/column is zero.
    Neumann,
    Periodic,
}

/// Anisotropic forward differences on a row-major `height x width` plane.
///
/// `apply` returns `2 * height * width` values: vertical differences first,
/// then horizontal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FiniteDifference {
    pub height: usize,
    pub width: usize,
    pub boundary: Boundary,
}

impl FiniteDifference {
    pub fn new(height: usize, width: usize, boundary: Boundary) -> Self {
        Self {
            height,
            width,
            boundary,
        }
    }

    fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (h, w, n) = (self.height, self.width, self.len());
        let mut out = vec![0.0; 2 * n];
        let (dy, dx) = out.split_at_mut(n);
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let down = match self.boundary {
                    Boundary::Neumann if r + 1 == h => None,
                    _ => Some(((r + 1) % h) * w + c),
                };
                let right = match self.boundary {
                    Boundary::Neumann if c + 1 == w => None,
                    _ => Some(r * w + (c + 1) % w),
                };
                dy[i] = down.map_or(0.0, |j| x[j] - x[i]);
                dx[i] = right.map_or(0.0, |j| x[j] - x[i]);
            }
        }
        out
    }

    pub fn adjoint(&self, p: &[f64]) -> Vec<f64> {
        let (h, w, n) = (self.height, self.width, self.len());
        let (py, px) = p.split_at(n);
        let mut out = vec![0.0; n];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let mut acc = 0.0;
                match self.boundary {
                    Boundary::Neumann => {
                        if r + 1 < h {
                            acc -= py[i];
                        }
                        if r > 0 {
                            acc += py[i - w];
                        }
                        if c + 1 < w {
                            acc -= px[i];
                        }
                        if c > 0 {
                            acc += px[i - 1];
                        }
                    }
                    Boundary::Periodic => {
                        acc += py[((r + h - 1) % h) * w + c] - py[i];
                        acc += px[r * w + (c + w - 1) % w] - px[i];
                    }
                }
                out[i] = acc;
            }
        }
        out
    }

    /// `|D|^2` in unnormalized DFT order (periodic boundary only).
    pub fn periodic_spectrum(&self) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let sy: Vec<f64> = (0..h)
            .map(|k| 4.0 * (std::f64::consts::PI * k as f64 / h as f64).sin().powi(2))
            .collect();
        let sx: Vec<f64> = (0..w)
            .map(|k| 4.0 * (std::f64::consts::PI * k as f64 / w as f64).sin().powi(2))
            .collect();
        let mut out = Vec::with_capacity(h * w);
        for a in &sy {
            for b in &sx {
                out.push(a + b);
            }
        }
        out
    }
}

/// Anisotropic TV seminorm with Neumann boundary.
pub fn tv_norm(x: &[f64], height: usize, width: usize) -> f64 {
    FiniteDifference::new(height, width, Boundary::Neumann)
        .apply(x)
        .iter()
        .map(|v| v.abs())
        .sum()
}

/// Approximate `argmin_z 0.5 |z - v|^2 + weight * |D z|_1` by fast gradient
/// projection on the dual. `dual` is used as a warm start and updated.
pub fn tv_prox(v: &[f64], height: usize, width: usize, weight: f64, iterations: usize, dual: &mut Vec<f64>) -> Vec<f64> {
    let d = FiniteDifference::new(height, width, Boundary::Neumann);
    let n = v.len();
    if weight <= 0.0 {
        return v.to_vec();
    }
    if dual.len() != 2 * n {
        *dual = vec![0.0; 2 * n];
    }
    let step = 1.0 / 8.0;
    let mut p = dual.clone();
    let mut q = p.clone();
    let mut t = 1.0f64;
    for _ in 0..iterations {
        let dtq = d.adjoint(&q);
        let z: Vec<f64> = v.iter().zip(&dtq).map(|(a, b)| a - b).collect();
        let g = d.apply(&z);
        let p_next: Vec<f64> = q
            .iter()
            .zip(&g)
            .map(|(qi, gi)| (qi + step * gi).clamp(-weight, weight))
            .collect();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let m = (t - 1.0) / t_next;
        for i in 0..q.len() {
            q[i] = p_next[i] + m * (p_next[i] - p[i]);
        }
        p = p_next;
        t = t_next;
    }
    let dtp = d.adjoint(&p);
    *dual = p;
    v.iter().zip(&dtp).map(|(a, b)| a - b).collect()
}

/// Wiener regularization `R`: a scalar, or one nonnegative value per bin of
/// the padded frequency grid (see [`LsiOperator::padded_dims`]).
#[derive(Debug, Clone, PartialEq)]
pub enum WienerParams {
    Scalar(f64),
    Grid(Vec<f64>),
}

/// One frequency bin of the Wiener estimate.
pub fn wiener_bin(p: Complex64, y: Complex64, reg: f64) -> Complex64 {
    p.conj() * y / (p.norm_sqr() + reg)
}

pub fn wiener_filter(meas: &RealImage, psf: &Psf, params: &WienerParams) -> Result<RealImage> {
    let op = LsiOperator::new(psf, meas.height(), meas.width())?;
    op.check_image(meas)?;
    let (ph, pw) = op.padded_dims();
    let reg_at = |i: usize| match params {
        WienerParams::Scalar(r) => *r,
        WienerParams::Grid(g) => g[i],
    };
    match params {
        WienerParams::Scalar(r) if !(*r >= 0.0) || !r.is_finite() => {
            return Err(Error::InvalidParameter(format!("Wiener regularization {r}")));
        }
        WienerParams::Grid(g) => {
            if g.len() != ph * pw {
                return Err(Error::Shape(format!("regularization grid has {} bins, need {}", g.len(), ph * pw)));
            }
            if g.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
                return Err(Error::InvalidParameter("regularization grid must be finite and >= 0".into()));
            }
        }
        _ => {}
    }
    let mut planes = Vec::with_capacity(meas.channels());
    for c in 0..meas.channels() {
        let spectrum = op.spectrum(c);
        let mut buf: Vec<Complex64> = op.embed(&meas.plane(c)).into_iter().map(|v| Complex64::new(v, 0.0)).collect();
        op.plan().forward(&mut buf);
        for (i, (z, k)) in buf.iter_mut().zip(spectrum).enumerate() {
            let denom = k.norm_sqr() + reg_at(i);
            if denom == 0.0 {
                return Err(Error::Singular(format!("Wiener denominator vanishes at bin {i} of channel {c}")));
            }
            *z = wiener_bin(*k, *z, reg_at(i));
        }
        op.plan().inverse(&mut buf);
        let real: Vec<f64> = buf.into_iter().map(|z| z.re).collect();
        planes.push(op.extract(&real));
    }
    let mut out = RealImage::from_planes(meas.height(), meas.width(), &planes)?;
    out.signed_intermediate = true;
    Ok(out)
}

/// Ratio of extreme singular values (infinite when singular).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Condition number above which a dense solve is refused.
pub const DIRECT_CONDITION_LIMIT: f64 = 1e12;

/// Solves `C (H + delta) x = y` for square systems.
pub fn direct_inverse(sys: &DenseSystem, y: &DVector<f64>) -> Result<DVector<f64>> {
    let mut a = sys.h_hat();
    if let Some(c) = &sys.crop {
        a = c * a;
    }
    if !a.is_square() {
        return Err(Error::Shape(format!("direct inversion needs a square system, got {:?}", a.shape())));
    }
    if y.len() != a.nrows() {
        return Err(Error::Shape(format!("y has {} entries, system {}", y.len(), a.nrows())));
    }
    let cond = condition_number(&a);
    if !(cond <= DIRECT_CONDITION_LIMIT) {
        return Err(Error::Singular(format!("condition number {cond:.3e}")));
    }
    a.lu()
        .solve(y)
        .ok_or_else(|| Error::Singular("LU factorization failed".into()))
}

/// Largest eigenvalue of `H^T H` for channel `ch` by power iteration from a
/// fixed pseudo-random start.
pub fn lipschitz_estimate(op: &LsiOperator, ch: usize, iterations: usize) -> f64 {
    let (h, w) = op.scene_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut estimate = 0.0;
    for _ in 0..iterations.max(1) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let next = op.apply_adjoint(ch, &op.apply(ch, &v));
        estimate = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = next;
    }
    estimate
}

/// Headroom applied on top of the power-iteration estimate.
pub const LIPSCHITZ_SAFETY: f64 = 1.05;
const POWER_ITERATIONS: usize = 20;

fn default_true() -> bool {
    true
}

fn default_prox_iterations() -> usize {
    40
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IstaParams {
    /// Step size; `None` picks `1/L`.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    #[serde(default = "default_true")]
    pub accelerated: bool,
    /// Inner iterations of the TV proximal step.
    #[serde(default = "default_prox_iterations")]
    pub prox_iterations: usize,
}

impl IstaParams {
    pub fn new(beta: f64, iterations: usize, accelerated: bool) -> Self {
        Self {
            alpha: None,
            beta,
            iterations,
            accelerated,
            prox_iterations: default_prox_iterations(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::InvalidParameter(format!("alpha must be > 0, got {a}")));
            }
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidParameter(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FistaReport {
    /// Per channel: objective at `x0 = 0`, then after every iteration.
    pub objective: Vec<Vec<f64>>,
    pub lipschitz: Vec<f64>,
    pub alpha: Vec<f64>,
    pub backed_off: bool,
}

fn fista_objective(op: &LsiOperator, ch: usize, x: &[f64], y: &[f64], beta: f64) -> f64 {
    let (h, w) = op.scene_dims();
    let r = op.apply(ch, x);
    let fit: f64 = r.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * 0.5;
    if beta > 0.0 {
        fit + beta * tv_norm(x, h, w)
    } else {
        fit
    }
}

pub fn fista_tv(meas: &RealImage, psf: &Psf, params: &IstaParams) -> Result<RealImage> {
    fista_tv_with_report(meas, psf, params).map(|(img, _)| img)
}

/// Proximal gradient on `0.5 |Hx - y|^2 + beta |Dx|_1`, returning the last
/// iterate and the objective history.
pub fn fista_tv_with_report(meas: &RealImage, psf: &Psf, params: &IstaParams) -> Result<(RealImage, FistaReport)> {
    params.validate()?;
    let op = LsiOperator::new(psf, meas.height(), meas.width())?;
    op.check_image(meas)?;
    let (h, w) = op.scene_dims();
    let mut report = FistaReport::default();
    let mut planes = Vec::with_capacity(meas.channels());
    for ch in 0..meas.channels() {
        let y = meas.plane(ch);
        let lipschitz = lipschitz_estimate(&op, ch, POWER_ITERATIONS) * LIPSCHITZ_SAFETY;
        let bound = 1.0 / lipschitz;
        let alpha = match params.alpha {
            Some(a) if a > bound => {
                warn!("step {a:.3e} exceeds stability bound {bound:.3e}; backing off");
                report.backed_off = true;
                bound
            }
            Some(a) => a,
            None => bound,
        };
        let mut x = vec![0.0; h * w];
        let mut z = x.clone();
        let mut t = 1.0f64;
        let mut dual = Vec::new();
        let mut history = vec![fista_objective(&op, ch, &x, &y, params.beta)];
        for k in 0..params.iterations {
            let r: Vec<f64> = op.apply(ch, &z).iter().zip(&y).map(|(a, b)| a - b).collect();
            let g = op.apply_adjoint(ch, &r);
            let v: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a - alpha * b).collect();
            let x_next = tv_prox(&v, h, w, alpha * params.beta, params.prox_iterations, &mut dual);
            if x_next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    iteration: k + 1,
                    detail: "non-finite FISTA iterate".into(),
                });
            }
            if params.accelerated {
                let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
                let m = (t - 1.0) / t_next;
                z = x_next.iter().zip(&x).map(|(a, b)| a + m * (a - b)).collect();
                t = t_next;
            } else {
                z = x_next.clone();
            }
            x = x_next;
            history.push(fista_objective(&op, ch, &x, &y, params.beta));
        }
        report.objective.push(history);
        report.lipschitz.push(lipschitz);
        report.alpha.push(alpha);
        planes.push(x);
    }
    let mut out = RealImage::from_planes(h, w, &planes)?;
    out.signed_intermediate = true;
    Ok((out, report))
}

/// Penalties and sparsity weight for one ADMM iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmStage {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmParams {
    /// Sensor-fidelity split penalty.
    pub mu1: f64,
    /// TV split penalty.
    pub mu2: f64,
    /// Non-negativity split penalty.
    pub mu3: f64,
    pub tau: f64,
    pub iterations: usize,
    /// Per-iteration overrides; length must equal `iterations`.
    pub schedule: Option<Vec<AdmmStage>>,
}

impl Default for AdmmParams {
    fn default() -> Self {
        Self {
            mu1: 1e-2,
            mu2: 1e-4,
            mu3: 4e-5,
            tau: 1e-4,
            iterations: 100,
            schedule: None,
        }
    }
}

impl AdmmParams {
    pub fn with_iterations(iterations: usize) -> Self {
        Self {
            iterations,
            ..Self::default()
        }
    }

    fn base_stage(&self) -> AdmmStage {
        AdmmStage {
            mu1: self.mu1,
            mu2: self.mu2,
            mu3: self.mu3,
            tau: self.tau,
        }
    }

    pub fn stage(&self, k: usize) -> AdmmStage {
        self.schedule.as_ref().map_or_else(|| self.base_stage(), |s| s[k])
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be >= 1".into()));
        }
        let check = |s: &AdmmStage| {
            let ok = [s.mu1, s.mu2, s.mu3].iter().all(|m| *m > 0.0 && m.is_finite()) && s.tau >= 0.0 && s.tau.is_finite();
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("ADMM weights must be positive: {s:?}")))
            }
        };
        check(&self.base_stage())?;
        if let Some(s) = &self.schedule {
            if s.len() != self.iterations {
                return Err(Error::InvalidParameter(format!(
                    "schedule has {} stages for {} iterations",
                    s.len(),
                    self.iterations
                )));
            }
            s.iter().try_for_each(check)?;
        }
        Ok(())
    }
}

/// Rescales each PSF channel to unit sum, returning the factors.
fn sum_normalized(psf: &Psf) -> Result<(Psf, Vec<f64>)> {
    let mut image = psf.image().clone();
    let mut scales = Vec::with_capacity(psf.channels());
    for c in 0..psf.channels() {
        let mut plane = image.plane(c);
        let total: f64 = plane.iter().sum();
        if total <= 0.0 {
            return Err(Error::Singular(format!("PSF channel {c} has zero sum")));
        }
        plane.iter_mut().for_each(|v| *v /= total);
        image.set_plane(c, &plane)?;
        scales.push(total);
    }
    Ok((Psf::from_image(image, Normalization::Raw)?, scales))
}

/// ADMM with sensor-crop, TV and non-negativity splits.
///
/// The PSF is rescaled to unit sum per channel before solving and the
/// estimate scaled back, so the penalties do not depend on how the PSF was
/// normalized.
pub fn admm_tv(meas: &RealImage, psf: &Psf, params: &AdmmParams) -> Result<RealImage> {
    params.validate()?;
    let (unit_psf, scales) = sum_normalized(psf)?;
    let op = LsiOperator::new(&unit_psf, meas.height(), meas.width())?;
    op.check_image(meas)?;
    let (h, w) = op.scene_dims();
    let (ph, pw) = op.padded_dims();
    let n = ph * pw;
    let d = FiniteDifference::new(ph, pw, Boundary::Periodic);
    let d_spec = d.periodic_spectrum();
    let sensor = op.embed(&vec![1.0; h * w]);
    let mut planes = Vec::with_capacity(meas.channels());
    for ch in 0..meas.channels() {
        let k_spec: Vec<f64> = op.spectrum(ch).iter().map(|k| k.norm_sqr()).collect();
        let y = op.embed(&meas.plane(ch));
        let mut x = vec![0.0; n];
        let mut kx = vec![0.0; n];
        let mut dx = vec![0.0; 2 * n];
        let mut a1 = vec![0.0; n];
        let mut a2 = vec![0.0; 2 * n];
        let mut a3 = vec![0.0; n];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..params.iterations {
            let s = params.stage(k);
            let u: Vec<f64> = dx.iter().zip(&a2).map(|(d, a)| shrink(d + a / s.mu2, s.tau / s.mu2)).collect();
            let v: Vec<f64> = (0..n).map(|i| (a1[i] + s.mu1 * kx[i] + y[i]) / (sensor[i] + s.mu1)).collect();
            let wv: Vec<f64> = (0..n).map(|i| (a3[i] / s.mu3 + x[i]).max(0.0)).collect();
            let t1: Vec<f64> = (0..n).map(|i| s.mu1 * v[i] - a1[i]).collect();
            let t2: Vec<f64> = (0..2 * n).map(|i| s.mu2 * u[i] - a2[i]).collect();
            let kt = op.correlate_padded(ch, &t1);
            let dt = d.adjoint(&t2);
            for i in 0..n {
                buf[i] = Complex64::new(s.mu3 * wv[i] - a3[i] + dt[i] + kt[i], 0.0);
            }
            op.plan().forward(&mut buf);
            for i in 0..n {
                buf[i] /= s.mu1 * k_spec[i] + s.mu2 * d_spec[i] + s.mu3;
            }
            op.plan().inverse(&mut buf);
            for i in 0..n {
                x[i] = buf[i].re;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    iteration: k + 1,
                    detail: format!("non-finite ADMM iterate in channel {ch}"),
                });
            }
            kx = op.convolve_padded(ch, &x);
            dx = d.apply(&x);
            for i in 0..n {
                a1[i] += s.mu1 * (kx[i] - v[i]);
                a3[i] += s.mu3 * (x[i] - wv[i]);
            }
            for i in 0..2 * n {
                a2[i] += s.mu2 * (dx[i] - u[i]);
            }
        }
        let plane: Vec<f64> = op.extract(&x).into_iter().map(|v| v.max(0.0) / scales[ch]).collect();
        planes.push(plane);
    }
    RealImage::from_planes(h, w, &planes)
}

/// Classical pre/post processing stages.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Processor {
    #[default]
    Identity,
    GaussianDenoise {
        sigma: f64,
    },
    MedianDenoise {
        radius: usize,
    },
    TvDenoise {
        weight: f64,
        #[serde(default = "default_tv_iterations")]
        iterations: usize,
    },
}

fn default_tv_iterations() -> usize {
    100
}

impl Processor {
    pub fn name(&self) -> &'static str {
        match self {
            Processor::Identity => "identity",
            Processor::GaussianDenoise { .. } => "gaussian_denoise",
            Processor::MedianDenoise { .. } => "median_denoise",
            Processor::TvDenoise { .. } => "tv_denoise",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Processor::GaussianDenoise { sigma } if !(*sigma > 0.0) || !sigma.is_finite() => {
                Err(Error::InvalidParameter(format!("gaussian sigma must be > 0, got {sigma}")))
            }
            Processor::TvDenoise { weight, .. } if !(*weight >= 0.0) || !weight.is_finite() => {
                Err(Error::InvalidParameter(format!("TV weight must be >= 0, got {weight}")))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, img: &RealImage) -> Result<RealImage> {
        self.validate()?;
        let (h, w, c) = img.dims();
        let planes: Vec<Vec<f64>> = match self {
            Processor::Identity => return Ok(img.clone()),
            Processor::GaussianDenoise { sigma } => (0..c).map(|ch| gaussian_blur(&img.plane(ch), h, w, *sigma)).collect(),
            Processor::MedianDenoise { radius } => (0..c).map(|ch| median_filter(&img.plane(ch), h, w, *radius)).collect(),
            Processor::TvDenoise { weight, iterations } => (0..c)
                .map(|ch| tv_prox(&img.plane(ch), h, w, *weight, *iterations, &mut Vec::new()))
                .collect(),
        };
        let mut out = RealImage::from_planes(h, w, &planes)?;
        out.signed_intermediate = img.signed_intermediate;
        Ok(out)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur with symmetric boundary, truncated at 3 sigma.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[r * w + reflect(c as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[reflect(r as isize + k as isize - radius, h) * w + c])
                .sum();
        }
    }
    out
}

/// Square-window median with replicated edges.
pub fn median_filter(plane: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            window.clear();
            for dr in -r..=r {
                let rr = (row as isize + dr).clamp(0, h as isize - 1) as usize;
                for dc in -r..=r {
                    let cc = (col as isize + dc).clamp(0, w as isize - 1) as usize;
                    window.push(plane[rr * w + cc]);
                }
            }
            let mid = window.len() / 2;
            window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
            out[row * w + col] = window[mid];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Inversion {
    Wiener { reg: f64 },
    FistaTv(IstaParams),
    AdmmTv(AdmmParams),
}

impl Inversion {
    pub fn name(&self) -> &'static str {
        match self {
            Inversion::Wiener { .. } => "wiener",
            Inversion::FistaTv(_) => "fista_tv",
            Inversion::AdmmTv(_) => "admm_tv",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Inversion::Wiener { reg } if !(*reg >= 0.0) || !reg.is_finite() => {
                Err(Error::InvalidParameter(format!("Wiener reg must be >= 0, got {reg}")))
            }
            Inversion::Wiener { .. } => Ok(()),
            Inversion::FistaTv(p) => p.validate(),
            Inversion::AdmmTv(p) => p.validate(),
        }
    }

    pub fn run(&self, meas: &RealImage, psf: &Psf) -> Result<RealImage> {
        match self {
            Inversion::Wiener { reg } => wiener_filter(meas, psf, &WienerParams::Scalar(*reg)),
            Inversion::FistaTv(p) => fista_tv(meas, psf, p),
            Inversion::AdmmTv(p) => admm_tv(meas, psf, p),
        }
    }
}

/// Pre-processor, camera inversion and post-processor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub pre: Processor,
    pub inversion: Inversion,
    #[serde(default)]
    pub post: Processor,
    /// Which simulated PSF the pipeline expects, when it matters.
    #[serde(default)]
    pub psf_variant: Option<PsfVariant>,
}

impl PipelineConfig {
    /// Identity pre/post around default ADMM.
    pub fn admm100() -> Self {
        Self {
            pre: Processor::Identity,
            inversion: Inversion::AdmmTv(AdmmParams::default()),
            post: Processor::Identity,
            psf_variant: None,
        }
    }

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

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.pre.validate()?;
        self.inversion.validate()?;
        self.post.validate()
    }

    /// Short human-readable label, e.g. `gaussian_denoise+admm_tv`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.pre != Processor::Identity {
            parts.push(self.pre.name());
        }
        parts.push(self.inversion.name());
        if self.post != Processor::Identity {
            parts.push(self.post.name());
        }
        parts.join("+")
    }
}

/// Hex SHA-256 of an image's shape and little-endian samples.
pub fn image_sha256(img: &RealImage) -> String {
    let mut hasher = Sha256::new();
    for d in [img.height(), img.width(), img.channels()] {
        hasher.update((d as u64).to_le_bytes());
    }
    for v in img.as_slice() {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub method: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub stages: Vec<StageRecord>,
}

pub fn run_pipeline(meas: &RealImage, psf: &Psf, cfg: &PipelineConfig) -> Result<RealImage> {
    run_pipeline_recorded(meas, psf, cfg).map(|(img, _)| img)
}

pub fn run_pipeline_recorded(meas: &RealImage, psf: &Psf, cfg: &PipelineConfig) -> Result<(RealImage, RunRecord)> {
    cfg.validate()?;
    let mut record = RunRecord::default();
    let mut log_stage = |stage: &str, method: &str, img: &RealImage| {
        record.stages.push(StageRecord {
            stage: stage.into(),
            method: method.into(),
            sha256: image_sha256(img),
        })
    };
    let pre = cfg.pre.apply(meas)?;
    log_stage("pre", cfg.pre.name(), &pre);
    let est = cfg.inversion.run(&pre, psf)?;
    log_stage("inversion", cfg.inversion.name(), &est);
    let post = cfg.post.apply(&est)?;
    log_stage("post", cfg.post.name(), &post);
    Ok((post, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{convolve_lsi, lsi_to_dense};

    fn random_plane(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn random_psf(h: usize, w: usize, seed: u64) -> Psf {
        let data = random_plane(h * w, seed).into_iter().map(|v| v.abs()).collect();
        Psf::from_image(RealImage::from_vec(h, w, 1, data).unwrap(), Normalization::UnitSum).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn psnr(est: &RealImage, truth: &RealImage) -> f64 {
        let mse = est.sub(truth).unwrap().energy() / est.as_slice().len() as f64;
        10.0 * (truth.max().powi(2) / mse).log10()
    }

    /// Piecewise-constant scene: a few rectangles on a background.
    fn blocky_scene(h: usize, w: usize) -> RealImage {
        let mut img = RealImage::filled(h, w, 1, 0.2);
        for r in h / 4..h / 2 {
            for c in w / 5..3 * w / 5 {
                img.set(r, c, 0, 0.9);
            }
        }
        for r in 3 * h / 5..5 * h / 6 {
            for c in w / 2..5 * w / 6 {
                img.set(r, c, 0, 0.55);
            }
        }
        img
    }

    #[test]
    fn shrinkage_examples() {
        assert_eq!(shrink(0.3, 0.5), 0.0);
        assert_eq!(shrink(1.0, 0.5), 0.5);
        assert_eq!(shrink(-2.0, 0.5), -1.5);
        let v = random_plane(50, 1);
        assert_eq!(soft_threshold(&v, 0.0).unwrap(), v);
        assert!(soft_threshold(&v, -0.1).is_err());
    }

    #[test]
    fn differences_of_constant_and_ramp() {
        for boundary in [Boundary::Neumann, Boundary::Periodic] {
            let d = FiniteDifference::new(6, 7, boundary);
            assert!(d.apply(&[3.5; 42]).iter().all(|v| *v == 0.0));
        }
        let d = FiniteDifference::new(6, 7, Boundary::Neumann);
        let ramp: Vec<f64> = (0..42).map(|i| 0.25 * (i % 7) as f64).collect();
        let g = d.apply(&ramp);
        assert!(g[..42].iter().all(|v| *v == 0.0));
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(g[42 + r * 7 + c], 0.25);
            }
            assert_eq!(g[42 + r * 7 + 6], 0.0);
        }
    }

    #[test]
    fn difference_adjoints() {
        for (boundary, seed) in [(Boundary::Neumann, 2), (Boundary::Periodic, 3)] {
            let d = FiniteDifference::new(9, 5, boundary);
            for trial in 0..10 {
                let x = random_plane(45, seed * 100 + trial);
                let p = random_plane(90, seed * 100 + trial + 50);
                let lhs = dot(&d.apply(&x), &p);
                let rhs = dot(&x, &d.adjoint(&p));
                assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn periodic_spectrum_matches_operator() {
        // D^T D acting on a single Fourier mode scales it by the spectrum value
        let (h, w) = (8, 6);
        let d = FiniteDifference::new(h, w, Boundary::Periodic);
        let spec = d.periodic_spectrum();
        let (ky, kx) = (3, 2);
        let mode: Vec<f64> = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                (2.0 * std::f64::consts::PI * (ky as f64 * r as f64 / h as f64 + kx as f64 * c as f64 / w as f64)).cos()
            })
            .collect();
        let out = d.adjoint(&d.apply(&mode));
        for (a, b) in out.iter().zip(&mode) {
            assert!((a - spec[ky * w + kx] * b).abs() < 1e-12);
        }
    }

    #[test]
    fn wiener_scalar_bin() {
        let p = Complex64::new(2.0, 0.0);
        let y = p * 3.0;
        assert!((wiener_bin(p, y, 1.0) - Complex64::new(2.4, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn wiener_with_delta_psf_returns_measurement() {
        let meas = RealImage::from_vec(10, 12, 1, random_plane(120, 4).iter().map(|v| v.abs()).collect()).unwrap();
        let out = wiener_filter(&meas, &Psf::delta(10, 12, 1), &WienerParams::Scalar(1e-12)).unwrap();
        let err = out.sub(&meas).unwrap().energy().sqrt() / meas.energy().sqrt();
        assert!(err < 1e-6);
    }

    #[test]
    fn wiener_is_linear_in_measurement() {
        let psf = random_psf(5, 5, 5);
        let a = RealImage::from_vec(12, 12, 1, random_plane(144, 6)).unwrap();
        let b = RealImage::from_vec(12, 12, 1, random_plane(144, 7)).unwrap();
        let mix = RealImage::from_vec(12, 12, 1, a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| 2.0 * x - 0.5 * y).collect()).unwrap();
        let params = WienerParams::Scalar(1e-2);
        let fa = wiener_filter(&a, &psf, &params).unwrap();
        let fb = wiener_filter(&b, &psf, &params).unwrap();
        let fm = wiener_filter(&mix, &psf, &params).unwrap();
        for i in 0..144 {
            let expect = 2.0 * fa.as_slice()[i] - 0.5 * fb.as_slice()[i];
            assert!((fm.as_slice()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn wiener_zero_bin_without_regularization_is_singular() {
        // [0.5, 0.5] has a spectral zero at the Nyquist bin of an even grid
        let psf = Psf::from_image(RealImage::from_vec(1, 2, 1, vec![0.5, 0.5]).unwrap(), Normalization::UnitSum).unwrap();
        let meas = RealImage::filled(1, 8, 1, 1.0);
        let op = LsiOperator::new(&psf, 1, 8).unwrap();
        assert_eq!(op.padded_dims().1 % 2, 0);
        assert!(matches!(wiener_filter(&meas, &psf, &WienerParams::Scalar(0.0)), Err(Error::Singular(_))));
        assert!(wiener_filter(&meas, &psf, &WienerParams::Scalar(1e-3)).is_ok());
    }

    #[test]
    fn direct_inverse_cases() {
        let y = DVector::from_vec(random_plane(8, 8));
        let sys = DenseSystem::new(DMatrix::identity(8, 8)).unwrap();
        assert_eq!(direct_inverse(&sys, &y).unwrap(), y);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = DMatrix::from_fn(8, 8, |r, c| if r == c { 4.0 } else { 0.0 } + rng.gen_range(-1.0..1.0));
        let sys = DenseSystem::new(h).unwrap();
        let x = direct_inverse(&sys, &y).unwrap();
        let back = crate::forward::dense_forward(&sys, &x, None).unwrap();
        assert!((back - &y).norm() / y.norm() < 1e-10);

        let mut singular = DMatrix::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
        let row = singular.row(0).clone_owned();
        singular.set_row(7, &row);
        assert!(matches!(direct_inverse(&DenseSystem::new(singular).unwrap(), &y), Err(Error::Singular(_))));
    }

    #[test]
    fn lipschitz_bounds_normal_operator() {
        let psf = random_psf(7, 7, 10);
        let op = LsiOperator::new(&psf, 20, 20).unwrap();
        let l = lipschitz_estimate(&op, 0, 20);
        assert!(l > 0.0);
        for seed in 0..100 {
            let v = random_plane(400, 1000 + seed);
            let hv = op.apply_adjoint(0, &op.apply(0, &v));
            let lhs = dot(&hv, &hv).sqrt();
            assert!(lhs <= l * dot(&v, &v).sqrt() * (1.0 + 1e-6));
        }
        // dense cross-check: the estimate is close to the largest eigenvalue
        let dense = lsi_to_dense(&psf, 0, 12, 12).unwrap().h;
        let op12 = LsiOperator::new(&psf, 12, 12).unwrap();
        let top = (dense.transpose() * &dense).symmetric_eigenvalues().max();
        let est = lipschitz_estimate(&op12, 0, 200);
        assert!((est - top).abs() < 1e-3 * top);
    }

    #[test]
    fn fista_least_squares_with_delta() {
        let meas = RealImage::from_vec(16, 16, 1, random_plane(256, 11)).unwrap();
        let params = IstaParams::new(0.0, 50, true);
        let out = fista_tv(&meas, &Psf::delta(16, 16, 1), &params).unwrap();
        let err = out.sub(&meas).unwrap().energy().sqrt() / meas.energy().sqrt();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn fista_recovers_sparse_gradient_scene() {
        let scene = blocky_scene(32, 32);
        let psf = random_psf(5, 5, 12);
        let meas = convolve_lsi(&scene, &psf).unwrap();
        let params = IstaParams::new(1e-5, 300, true);
        let out = fista_tv(&meas, &psf, &params).unwrap();
        let err = out.sub(&scene).unwrap().energy().sqrt() / scene.energy().sqrt();
        assert!(err < 0.01, "relative error {err}");
    }

    #[test]
    fn ista_objective_is_non_increasing() {
        let scene = blocky_scene(24, 24);
        let psf = random_psf(5, 5, 13);
        let meas = convolve_lsi(&scene, &psf).unwrap();
        let params = IstaParams::new(1e-3, 60, false);
        let (_, report) = fista_tv_with_report(&meas, &psf, &params).unwrap();
        let obj = &report.objective[0];
        for pair in obj.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "{} -> {}", pair[0], pair[1]);
        }
        assert!(*obj.last().unwrap() <= obj[0]);
    }

    #[test]
    fn fista_beats_ista_on_same_budget() {
        let mut wins = 0;
        for seed in 0..10 {
            let psf = random_psf(5, 5, 200 + seed);
            let scene = RealImage::from_vec(16, 16, 1, random_plane(256, 300 + seed).iter().map(|v| v.abs()).collect()).unwrap();
            let meas = convolve_lsi(&scene, &psf).unwrap();
            let run = |acc| fista_tv_with_report(&meas, &psf, &IstaParams::new(1e-3, 40, acc)).unwrap().1.objective[0].clone();
            if run(true).last() <= run(false).last() {
                wins += 1;
            }
        }
        assert!(wins >= 9, "FISTA won {wins}/10");
    }

    #[test]
    fn oversized_step_backs_off() {
        let meas = RealImage::filled(8, 8, 1, 1.0);
        let mut params = IstaParams::new(0.0, 5, false);
        params.alpha = Some(10.0);
        let (_, report) = fista_tv_with_report(&meas, &Psf::delta(8, 8, 1), &params).unwrap();
        assert!(report.backed_off);
        assert!(report.alpha[0] * report.lipschitz[0] <= 1.0 + 1e-12);
    }

    #[test]
    fn admm_zero_measurement_is_fixed_point() {
        let out = admm_tv(&RealImage::zeros(16, 16, 1), &random_psf(5, 5, 14), &AdmmParams::with_iterations(10)).unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn admm_delta_recovery() {
        let scene = blocky_scene(64, 64);
        let meas = convolve_lsi(&scene, &Psf::delta(64, 64, 1)).unwrap();
        let out = admm_tv(&meas, &Psf::delta(64, 64, 1), &AdmmParams::default()).unwrap();
        let p = psnr(&out, &scene);
        assert!(p > 40.0, "psnr {p}");
    }

    #[test]
    fn admm_output_is_nonnegative() {
        let meas = RealImage::from_vec(12, 12, 1, random_plane(144, 15)).unwrap();
        let out = admm_tv(&meas, &random_psf(4, 4, 16), &AdmmParams::with_iterations(20)).unwrap();
        assert!(out.is_nonnegative());
    }

    #[test]
    fn admm_param_validation() {
        let mut p = AdmmParams::with_iterations(3);
        p.schedule = Some(vec![p.stage(0); 2]);
        assert!(p.validate().is_err());
        p.schedule = Some(vec![p.stage(0); 3]);
        assert!(p.validate().is_ok());
        p.mu1 = 0.0;
        assert!(p.validate().is_err());
        assert!(AdmmParams::with_iterations(0).validate().is_err());
    }

    #[test]
    fn constant_schedule_matches_fixed_params() {
        let meas = convolve_lsi(&blocky_scene(16, 16), &random_psf(3, 3, 17)).unwrap();
        let psf = random_psf(3, 3, 17);
        let fixed = AdmmParams::with_iterations(15);
        let mut scheduled = fixed.clone();
        scheduled.schedule = Some(vec![fixed.stage(0); 15]);
        assert_eq!(admm_tv(&meas, &psf, &fixed).unwrap(), admm_tv(&meas, &psf, &scheduled).unwrap());
    }

    #[test]
    fn processors_behave() {
        let flat = RealImage::filled(10, 10, 2, 0.4);
        let blurred = Processor::GaussianDenoise { sigma: 1.5 }.apply(&flat).unwrap();
        assert!(blurred.as_slice().iter().all(|v| (v - 0.4).abs() < 1e-12));
        let mut salted = flat.clone();
        salted.set(5, 5, 0, 1.0);
        let med = Processor::MedianDenoise { radius: 1 }.apply(&salted).unwrap();
        assert_eq!(med, flat);
        let noisy = RealImage::from_vec(16, 16, 1, random_plane(256, 18)).unwrap();
        let tv = Processor::TvDenoise { weight: 0.2, iterations: 100 }.apply(&noisy).unwrap();
        assert!(tv_norm(tv.as_slice(), 16, 16) < tv_norm(noisy.as_slice(), 16, 16));
        assert!(Processor::GaussianDenoise { sigma: 0.0 }.apply(&flat).is_err());
    }

    #[test]
    fn pipeline_identity_matches_bare_admm() {
        let psf = random_psf(5, 5, 19);
        let meas = convolve_lsi(&blocky_scene(20, 20), &psf).unwrap();
        let cfg = PipelineConfig::admm100();
        let (out, record) = run_pipeline_recorded(&meas, &psf, &cfg).unwrap();
        assert_eq!(out, admm_tv(&meas, &psf, &AdmmParams::default()).unwrap());
        assert_eq!(record.stages.len(), 3);
        assert_eq!(record.stages[0].sha256, image_sha256(&meas));
        assert_eq!(record.stages[1].sha256, record.stages[2].sha256);
        let (again, record2) = run_pipeline_recorded(&meas, &psf, &cfg).unwrap();
        assert_eq!(out, again);
        assert_eq!(record, record2);
    }

    #[test]
    fn pipeline_toml_round_trip_and_strictness() {
        let text = r#"
            psf_variant = "wave_deadspace"
            [pre]
            kind = "gaussian_denoise"
            sigma = 1.0
            [inversion]
            kind = "admm_tv"
            iterations = 50
        "#;
        let cfg = PipelineConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.pre, Processor::GaussianDenoise { sigma: 1.0 });
        assert_eq!(cfg.post, Processor::Identity);
        match &cfg.inversion {
            Inversion::AdmmTv(p) => {
                assert_eq!(p.iterations, 50);
                assert_eq!(p.mu1, 1e-2);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(cfg.label(), "gaussian_denoise+admm_tv");
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);

        for bad in [
            "[inversion]\nkind = \"admm_tv\"\nmu4 = 1.0\n",
            "extra = 1\n[inversion]\nkind = \"wiener\"\nreg = 0.1\n",
            "[pre]\nkind = \"gaussian_denoise\"\nsigma = 1.0\nwidth = 3\n[inversion]\nkind = \"wiener\"\nreg = 0.1\n",
            "[inversion]\nkind = \"unknown\"\n",
            "[inversion]\nkind = \"wiener\"\nreg = -1.0\n",
        ] {
            assert!(PipelineConfig::from_toml_str(bad).is_err(), "accepted {bad}");
        }
    }
}
