//! Model-mismatch error decompositions for each inversion family.
//!
//! Every decomposition evaluates the estimate obtained with the perturbed
//! operator `H + delta` two ways: directly, and as the clean estimate plus a
//! structured mismatch term plus an amplified-noise term. The difference is
//! returned as `residual`.

use nalgebra::{ComplexField as Field, DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::DenseSystem;
use crate::recover::{condition_number, shrink, WienerParams};

/// Condition number above which the dense solves here are refused.
pub const CONDITION_GUARD: f64 = 1e10;

/// Largest oracle dimension accepted.
pub const MAX_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct MismatchTerms<T: Field> {
    pub clean: DVector<T>,
    pub noisy: DVector<T>,
    pub mismatch: DVector<T>,
    pub noise_amplification: DVector<T>,
    /// `noisy - clean - mismatch - noise_amplification`.
    pub residual: DVector<T>,
}

impl<T: Field<RealField = f64>> MismatchTerms<T> {
    fn assemble(clean: DVector<T>, noisy: DVector<T>, mismatch: DVector<T>, noise_amplification: DVector<T>) -> Result<Self> {
        let residual = &noisy - &clean - &mismatch - &noise_amplification;
        let terms = Self {
            clean,
            noisy,
            mismatch,
            noise_amplification,
            residual,
        };
        let finite = [&terms.clean, &terms.noisy, &terms.mismatch, &terms.noise_amplification, &terms.residual]
            .iter()
            .all(|v| v.iter().all(|z| z.clone().modulus().is_finite()));
        if !finite {
            return Err(Error::NonFinite("mismatch decomposition".into()));
        }
        Ok(terms)
    }

    /// `|residual| / |noisy|` (absolute when the noisy estimate is zero).
    pub fn relative_residual(&self) -> f64 {
        let denom = self.noisy.norm();
        let r = self.residual.norm();
        if denom == 0.0 {
            r
        } else {
            r / denom
        }
    }

    pub fn norms(&self) -> TermNorms {
        TermNorms {
            clean: self.clean.norm(),
            noisy: self.noisy.norm(),
            mismatch: self.mismatch.norm(),
            noise_amplification: self.noise_amplification.norm(),
            residual: self.residual.norm(),
            relative_residual: self.relative_residual(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermNorms {
    pub clean: f64,
    pub noisy: f64,
    pub mismatch: f64,
    pub noise_amplification: f64,
    pub residual: f64,
    pub relative_residual: f64,
}

fn check_len(name: &str, v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Shape(format!("{name} has {} entries, expected {n}", v.len())));
    }
    Ok(())
}

fn guarded_inverse(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let cond = condition_number(m);
    if !(cond < CONDITION_GUARD) {
        return Err(Error::Singular(format!("{name} has condition number {cond:.3e}")));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("{name} is not invertible")))
}

fn uncropped(sys: &DenseSystem, what: &str) -> Result<()> {
    if sys.crop.is_some() {
        return Err(Error::Shape(format!("{what} works on uncropped systems")));
    }
    if sys.h.ncols() > MAX_DIM || sys.h.nrows() > MAX_DIM {
        return Err(Error::InvalidParameter(format!("oracle dimension above {MAX_DIM}")));
    }
    Ok(())
}

/// Spectral radius of a real square matrix. Falls back to `|M^k|^(1/k)`
/// when the Schur iteration does not converge.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    if let Some(schur) = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 10_000) {
        return schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    }
    let mut p = m.clone();
    let mut log_scale = 0.0;
    for _ in 0..6 {
        // square and renormalize, tracking log |M^(2^k)|
        p = &p * &p;
        log_scale *= 2.0;
        let n = p.norm();
        if n == 0.0 {
            return 0.0;
        }
        p /= n;
        log_scale += n.ln();
    }
    (log_scale / 64.0).exp()
}

/// Direct inversion with the perturbed operator of `y = H x + n`.
///
/// Terms: `clean = x`, `mismatch = -H^-1 delta x`,
/// `noise = (I - H^-1 delta) H^-1 n`. The residual is the second-order
/// remainder of the Neumann series and is reported, not bounded.
pub fn direct_inversion_decomposition(sys: &DenseSystem, x: &DVector<f64>, n: &DVector<f64>) -> Result<MismatchTerms<f64>> {
    uncropped(sys, "direct inversion")?;
    if !sys.h.is_square() {
        return Err(Error::Shape("direct inversion needs a square H".into()));
    }
    let dim = sys.h.nrows();
    check_len("x", x, dim)?;
    check_len("n", n, dim)?;
    let h_inv = guarded_inverse(&sys.h, "H")?;
    let delta = sys.delta_or_zero();
    let e = &h_inv * &delta;
    let rho = spectral_radius(&e);
    if !(rho < 1.0) {
        return Err(Error::Precondition(format!("spectral radius of H^-1 delta is {rho:.4}, must be < 1")));
    }
    let y = &sys.h * x + n;
    let noisy = sys
        .h_hat()
        .lu()
        .solve(&y)
        .ok_or_else(|| Error::Singular("H + delta is not invertible".into()))?;
    let mismatch = -(&e * x);
    let noise = (DMatrix::identity(dim, dim) - &e) * (&h_inv * n);
    MismatchTerms::assemble(x.clone(), noisy, mismatch, noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub delta_norms: Vec<f64>,
    pub residual_norms: Vec<f64>,
    pub slope: f64,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

/// Residual of the direct-inversion decomposition at `delta * 2^-k` for
/// `k = 0..=octaves`, with the fitted log-log slope.
pub fn direct_inversion_scaling(sys: &DenseSystem, x: &DVector<f64>, n: &DVector<f64>, octaves: usize) -> Result<ScalingFit> {
    let delta = sys
        .delta
        .clone()
        .ok_or_else(|| Error::InvalidParameter("scaling probe needs a nonzero delta".into()))?;
    let mut delta_norms = Vec::new();
    let mut residual_norms = Vec::new();
    for k in 0..=octaves {
        let d = &delta * 0.5f64.powi(k as i32);
        delta_norms.push(d.norm());
        let scaled = DenseSystem::new(sys.h.clone())?.with_delta(d)?;
        residual_norms.push(direct_inversion_decomposition(&scaled, x, n)?.residual.norm());
    }
    let slope = loglog_slope(&delta_norms, &residual_norms);
    Ok(ScalingFit {
        delta_norms,
        residual_norms,
        slope,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WienerDecomposition {
    pub terms: MismatchTerms<Complex64>,
    /// Per-bin mismatch filter `M`.
    pub m: DVector<Complex64>,
}

/// Wiener estimate with a perturbed transfer function `p + delta_p` of
/// `Y = P X + N`, split as `clean + M P X + M N`. The split is exact.
pub fn wiener_decomposition(
    p: &[Complex64],
    delta_p: &[Complex64],
    x: &[Complex64],
    noise: &[Complex64],
    reg: &WienerParams,
) -> Result<WienerDecomposition> {
    let len = p.len();
    if delta_p.len() != len || x.len() != len || noise.len() != len {
        return Err(Error::Shape("Wiener fields must share one length".into()));
    }
    let reg_at = |i: usize| -> Result<f64> {
        let r = match reg {
            WienerParams::Scalar(r) => *r,
            WienerParams::Grid(g) => *g
                .get(i)
                .ok_or_else(|| Error::Shape(format!("regularization grid has {} bins, need {len}", g.len())))?,
        };
        if !(r >= 0.0) {
            return Err(Error::InvalidParameter(format!("regularization {r} at bin {i}")));
        }
        Ok(r)
    };
    let mut clean = DVector::zeros(len);
    let mut noisy = DVector::zeros(len);
    let mut mismatch = DVector::zeros(len);
    let mut amp = DVector::zeros(len);
    let mut m = DVector::zeros(len);
    for i in 0..len {
        let (pi, di) = (p[i], delta_p[i]);
        let r = reg_at(i)?;
        let b = pi.norm_sqr() + r;
        let db = di.norm_sqr() + (di.conj() * pi + pi.conj() * di).re;
        if b == 0.0 || b + db == 0.0 {
            return Err(Error::Singular(format!("zero Wiener denominator at bin {i}")));
        }
        let y = pi * x[i] + noise[i];
        let mi = di.conj() / b - (pi.conj() + di.conj()) * db / (b * b + b * db);
        clean[i] = pi.conj() * y / b;
        noisy[i] = (pi + di).conj() * y / ((pi + di).norm_sqr() + r);
        mismatch[i] = mi * pi * x[i];
        amp[i] = mi * noise[i];
        m[i] = mi;
    }
    Ok(WienerDecomposition {
        terms: MismatchTerms::assemble(clean, noisy, mismatch, amp)?,
        m,
    })
}

fn gd_parts(
    sys: &DenseSystem,
    x: &DVector<f64>,
    n: &DVector<f64>,
    x_prev: &DVector<f64>,
    alpha: f64,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
    uncropped(sys, "gradient step")?;
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be > 0, got {alpha}")));
    }
    let (rows, cols) = sys.h.shape();
    check_len("x", x, cols)?;
    check_len("x_prev", x_prev, cols)?;
    check_len("n", n, rows)?;
    let h = &sys.h;
    let delta = sys.delta_or_zero();
    let h_hat = sys.h_hat();
    let y = h * x + n;
    let clean = x_prev - (h.transpose() * (h * x_prev - &y)) * alpha;
    let noisy = x_prev - (h_hat.transpose() * (&h_hat * x_prev - &y)) * alpha;
    let small_delta = delta.transpose() * h + h_hat.transpose() * &delta;
    let mismatch = (delta.transpose() * (h * x) - small_delta * x_prev) * alpha;
    let amp = (delta.transpose() * n) * alpha;
    Ok((clean, noisy, mismatch, amp))
}

/// One gradient step on `0.5 |Hx - y|^2` from `x_prev`, clean versus
/// perturbed operator. Exact.
pub fn gd_step_decomposition(
    sys: &DenseSystem,
    x: &DVector<f64>,
    n: &DVector<f64>,
    x_prev: &DVector<f64>,
    alpha: f64,
) -> Result<MismatchTerms<f64>> {
    let (clean, noisy, mismatch, amp) = gd_parts(sys, x, n, x_prev, alpha)?;
    MismatchTerms::assemble(clean, noisy, mismatch, amp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxStepMismatch {
    /// Thresholded clean and noisy steps, with the gradient-step terms.
    pub terms: MismatchTerms<f64>,
    /// Elements zeroed by thresholding in both the clean and noisy step.
    pub discarded: Vec<bool>,
}

impl ProxStepMismatch {
    pub fn discarded_fraction(&self) -> f64 {
        self.discarded.iter().filter(|d| **d).count() as f64 / self.discarded.len().max(1) as f64
    }
}

/// Gradient step followed by soft-thresholding at `beta`.
pub fn prox_step_mismatch(
    sys: &DenseSystem,
    x: &DVector<f64>,
    n: &DVector<f64>,
    x_prev: &DVector<f64>,
    alpha: f64,
    beta: f64,
) -> Result<ProxStepMismatch> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidParameter(format!("beta must be >= 0, got {beta}")));
    }
    let (clean, noisy, mismatch, amp) = gd_parts(sys, x, n, x_prev, alpha)?;
    let clean = clean.map(|v| shrink(v, beta));
    let noisy = noisy.map(|v| shrink(v, beta));
    let discarded = clean.iter().zip(noisy.iter()).map(|(c, z)| *c == 0.0 && *z == 0.0).collect();
    Ok(ProxStepMismatch {
        terms: MismatchTerms::assemble(clean, noisy, mismatch, amp)?,
        discarded,
    })
}

/// State shared by the clean and perturbed ADMM x-updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmStepContext {
    pub h: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    /// Sensor selection, `m x n`.
    pub c: DMatrix<f64>,
    pub rho_x: f64,
    pub rho_y: f64,
    pub rho_z: f64,
    /// Previous estimate.
    pub x_prev: DVector<f64>,
    /// Previous-iteration terms that do not depend on the mismatch.
    pub gamma: DVector<f64>,
    /// Mismatch-free contribution of the auxiliary and dual variables.
    pub aux: DVector<f64>,
    pub n: DVector<f64>,
    pub x: DVector<f64>,
}

impl AdmmStepContext {
    pub fn validate(&self) -> Result<()> {
        let dim = self.h.nrows();
        if !self.h.is_square() || self.delta.shape() != self.h.shape() {
            return Err(Error::Shape("ADMM step needs square H and matching delta".into()));
        }
        if dim > MAX_DIM {
            return Err(Error::InvalidParameter(format!("oracle dimension above {MAX_DIM}")));
        }
        if self.c.ncols() != dim {
            return Err(Error::Shape(format!("C has {} columns, H has {dim} rows", self.c.ncols())));
        }
        for (name, v, len) in [
            ("x_prev", &self.x_prev, dim),
            ("gamma", &self.gamma, dim),
            ("aux", &self.aux, dim),
            ("x", &self.x, dim),
            ("n", &self.n, self.c.nrows()),
        ] {
            check_len(name, v, len)?;
        }
        if ![self.rho_x, self.rho_y, self.rho_z].iter().all(|r| *r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidParameter("ADMM penalties must be positive".into()));
        }
        Ok(())
    }

    pub fn h_hat(&self) -> DMatrix<f64> {
        &self.h + &self.delta
    }

    /// `delta^T H + (H + delta)^T delta`.
    pub fn small_delta(&self) -> DMatrix<f64> {
        self.delta.transpose() * &self.h + self.h_hat().transpose() * &self.delta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmStepDecomposition {
    pub terms: MismatchTerms<f64>,
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub w3: DVector<f64>,
    pub w4: DMatrix<f64>,
    pub small_delta: DMatrix<f64>,
}

struct AdmmStepPaths {
    w1: DMatrix<f64>,
    w1_inv: DMatrix<f64>,
    shifted_inv: DMatrix<f64>,
    q: DMatrix<f64>,
    small_delta: DMatrix<f64>,
    clean: DVector<f64>,
    noisy: DVector<f64>,
}

fn admm_step_paths(ctx: &AdmmStepContext, x_prev: &DVector<f64>) -> Result<AdmmStepPaths> {
    let dim = ctx.h.nrows();
    let eye = DMatrix::<f64>::identity(dim, dim);
    let h_hat = ctx.h_hat();
    let ctc = ctx.c.transpose() * &ctx.c;
    let w1 = (h_hat.transpose() * &h_hat) * ctx.rho_x + &ctc * ctx.rho_z + &eye * ctx.rho_y;
    let small_delta = ctx.small_delta();
    let shifted = &w1 + &small_delta * ctx.rho_x;
    let w1_inv = guarded_inverse(&w1, "W1")?;
    let shifted_inv = guarded_inverse(&shifted, "W1 + rho_x delta")?;
    let q = guarded_inverse(&(&ctc + &eye * ctx.rho_x), "C^T C + rho_x I")?;
    let y = &ctx.c * (&ctx.h * &ctx.x) + &ctx.n;
    let data = ctx.c.transpose() * y + &ctx.gamma;
    let rhs_clean = (ctx.h.transpose() * (&q * &data)) * ctx.rho_x + &ctx.aux;
    let rhs_noisy = &rhs_clean
        + (ctx.delta.transpose() * (&q * &data)) * ctx.rho_x
        + (h_hat.transpose() * (&ctx.delta * x_prev)) * (ctx.rho_x * ctx.rho_x);
    let clean = &shifted_inv * rhs_clean;
    let noisy = &w1_inv * rhs_noisy;
    Ok(AdmmStepPaths {
        w1,
        w1_inv,
        shifted_inv,
        q,
        small_delta,
        clean,
        noisy,
    })
}

/// One ADMM x-update from a shared previous state, clean versus perturbed.
///
/// The clean update solves `(W1 + rho_x delta) x = rho_x H^T Q (C^T y + gamma) + aux`
/// and the perturbed one `W1 x = ` the same right-hand side plus
/// `rho_x delta^T Q (C^T y + gamma) + rho_x^2 Hhat^T delta x_prev`, with
/// `Q = (C^T C + rho_x I)^-1`. Their difference is split with `W1..W4`.
pub fn admm_step_decomposition(ctx: &AdmmStepContext) -> Result<AdmmStepDecomposition> {
    ctx.validate()?;
    let dim = ctx.h.nrows();
    let paths = admm_step_paths(ctx, &ctx.x_prev)?;
    let rho = ctx.rho_x;
    let h_hat = ctx.h_hat();
    let w2 = &paths.shifted_inv * ctx.delta.transpose() * rho * &paths.q;
    let w3 = &paths.shifted_inv * (h_hat.transpose() * (&ctx.delta * &ctx.x_prev)) * (rho * rho);
    let correction = &paths.w1_inv * &paths.small_delta * rho;
    let w4 = DMatrix::<f64>::identity(dim, dim) + &correction;
    let ct = ctx.c.transpose();
    let noise = &w4 * (&w2 * (&ct * &ctx.n));
    let signal = &ct * (&ctx.c * (&ctx.h * &ctx.x)) + &ctx.gamma;
    let mismatch = &correction * &paths.clean + &w4 * (&w2 * signal) + &w4 * &w3;
    let terms = MismatchTerms::assemble(paths.clean, paths.noisy, mismatch, noise)?;
    Ok(AdmmStepDecomposition {
        terms,
        w1: paths.w1,
        w2,
        w3,
        w4,
        small_delta: paths.small_delta,
    })
}

/// Runs the clean and perturbed x-updates for `steps` iterations, each path
/// feeding back its own estimate, and returns `|noisy_k - clean_k|` per step.
pub fn admm_mismatch_growth(ctx: &AdmmStepContext, steps: usize) -> Result<Vec<f64>> {
    ctx.validate()?;
    let mut clean_prev = ctx.x_prev.clone();
    let mut noisy_prev = ctx.x_prev.clone();
    let mut gaps = Vec::with_capacity(steps);
    for _ in 0..steps {
        let clean = admm_step_paths(ctx, &clean_prev)?.clean;
        let noisy = admm_step_paths(ctx, &noisy_prev)?.noisy;
        gaps.push((&noisy - &clean).norm());
        clean_prev = clean;
        noisy_prev = noisy;
    }
    Ok(gaps)
}

/// Random square system `H = 2I + G/sqrt(n)` (well conditioned) with
/// mismatch `delta = scale * G'/sqrt(n)`.
pub fn random_system(rng: &mut impl Rng, dim: usize, delta_scale: f64) -> Result<DenseSystem> {
    let s = (dim as f64).sqrt();
    let h = DMatrix::from_fn(dim, dim, |r, c| if r == c { 2.0 } else { 0.0 } + rng.gen_range(-1.0..1.0) / s);
    let delta = DMatrix::from_fn(dim, dim, |_, _| delta_scale * rng.gen_range(-1.0..1.0) / s);
    DenseSystem::new(h)?.with_delta(delta)
}

pub fn random_vector(rng: &mut impl Rng, dim: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| scale * rng.gen_range(-1.0..1.0))
}

pub fn random_complex(rng: &mut impl Rng, len: usize, scale: f64) -> Vec<Complex64> {
    (0..len)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale)
        .collect()
}

/// Random ADMM step context; `crop_rows < dim` gives a top-rows selection.
pub fn random_admm_context(rng: &mut impl Rng, dim: usize, crop_rows: usize, delta_scale: f64) -> Result<AdmmStepContext> {
    let sys = random_system(rng, dim, delta_scale)?;
    let rows: Vec<usize> = (0..crop_rows.min(dim)).collect();
    Ok(AdmmStepContext {
        h: sys.h.clone(),
        delta: sys.delta_or_zero(),
        c: crate::forward::selection_matrix(&rows, dim)?,
        rho_x: 1.0,
        rho_y: 1.0,
        rho_z: 1.0,
        x_prev: random_vector(rng, dim, 1.0),
        gamma: random_vector(rng, dim, 1.0),
        aux: random_vector(rng, dim, 1.0),
        n: random_vector(rng, crop_rows.min(dim), 0.1),
        x: random_vector(rng, dim, 1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityAudit {
    pub name: String,
    pub trials: usize,
    pub max_relative_residual: f64,
    pub mean_relative_residual: f64,
    /// Term norms of the first trial.
    pub example: TermNorms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchAudit {
    pub seed: u64,
    pub identities: Vec<IdentityAudit>,
    pub direct_inversion_slopes: Vec<f64>,
    pub admm_growth: Vec<f64>,
}

fn summarize(name: &str, runs: Vec<TermNorms>) -> IdentityAudit {
    let rel: Vec<f64> = runs.iter().map(|t| t.relative_residual).collect();
    IdentityAudit {
        name: name.into(),
        trials: runs.len(),
        max_relative_residual: rel.iter().cloned().fold(0.0, f64::max),
        mean_relative_residual: rel.iter().sum::<f64>() / rel.len().max(1) as f64,
        example: runs[0],
    }
}

/// Evaluates every decomposition on `trials` random instances.
pub fn audit(seed: u64, trials: usize) -> Result<MismatchAudit> {
    let trials = trials.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wiener = Vec::new();
    let mut gd = Vec::new();
    let mut prox = Vec::new();
    let mut admm = Vec::new();
    let mut direct = Vec::new();
    let mut slopes = Vec::new();
    for _ in 0..trials {
        let len = 256;
        let w = wiener_decomposition(
            &random_complex(&mut rng, len, 1.0),
            &random_complex(&mut rng, len, 0.1),
            &random_complex(&mut rng, len, 1.0),
            &random_complex(&mut rng, len, 0.05),
            &WienerParams::Scalar(0.1),
        )?;
        wiener.push(w.terms.norms());

        let sys = random_system(&mut rng, 16, 0.1)?;
        let x = random_vector(&mut rng, 16, 1.0);
        let n = random_vector(&mut rng, 16, 0.05);
        let xp = random_vector(&mut rng, 16, 1.0);
        gd.push(gd_step_decomposition(&sys, &x, &n, &xp, 0.1)?.norms());
        prox.push(prox_step_mismatch(&sys, &x, &n, &xp, 0.1, 0.05)?.terms.norms());
        direct.push(direct_inversion_decomposition(&sys, &x, &n)?.norms());
        slopes.push(direct_inversion_scaling(&sys, &x, &DVector::zeros(16), 3)?.slope);

        let ctx = random_admm_context(&mut rng, 8, 4, 0.1)?;
        admm.push(admm_step_decomposition(&ctx)?.terms.norms());
    }
    let ctx = random_admm_context(&mut rng, 8, 4, 0.1)?;
    Ok(MismatchAudit {
        seed,
        identities: vec![
            summarize("wiener", wiener),
            summarize("gradient_step", gd),
            summarize("prox_step", prox),
            summarize("admm_step", admm),
            summarize("direct_inversion", direct),
        ],
        direct_inversion_slopes: slopes,
        admm_growth: admm_mismatch_growth(&ctx, 10)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_system(h: f64, d: f64) -> DenseSystem {
        DenseSystem::new(DMatrix::from_element(1, 1, h))
            .unwrap()
            .with_delta(DMatrix::from_element(1, 1, d))
            .unwrap()
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn direct_inversion_scalar() {
        let t = direct_inversion_decomposition(&scalar_system(1.0, 0.1), &v1(1.0), &v1(0.0)).unwrap();
        assert!((t.noisy[0] - 1.0 / 1.1).abs() < 1e-15);
        assert!((t.clean[0] + t.mismatch[0] - 0.9).abs() < 1e-15);
        assert!((t.residual[0] - (1.0 / 1.1 - 0.9)).abs() < 1e-15);
        assert!((t.residual[0] - 0.009091).abs() < 1e-6);
    }

    #[test]
    fn direct_inversion_without_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sys = random_system(&mut rng, 6, 0.0).unwrap();
        let x = random_vector(&mut rng, 6, 1.0);
        let n = random_vector(&mut rng, 6, 0.1);
        let t = direct_inversion_decomposition(&sys, &x, &n).unwrap();
        assert!(t.mismatch.iter().all(|v| *v == 0.0));
        let expect = &x + sys.h.clone().try_inverse().unwrap() * &n;
        assert!((&t.noisy - expect).norm() < 1e-12);
        assert!(t.residual.norm() < 1e-12);
    }

    #[test]
    fn direct_inversion_preconditions() {
        assert!(matches!(
            direct_inversion_decomposition(&scalar_system(1.0, 1.5), &v1(1.0), &v1(0.0)),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            direct_inversion_decomposition(&scalar_system(0.0, 0.1), &v1(1.0), &v1(0.0)),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn direct_inversion_residual_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sys = random_system(&mut rng, 10, 0.2).unwrap();
        let x = random_vector(&mut rng, 10, 1.0);
        let fit = direct_inversion_scaling(&sys, &x, &DVector::zeros(10), 3).unwrap();
        assert!((fit.slope - 2.0).abs() < 0.1, "slope {}", fit.slope);
    }

    #[test]
    fn wiener_scalar_bin() {
        let one = |v: f64| [Complex64::new(v, 0.0)];
        let d = wiener_decomposition(&one(1.0), &one(0.1), &one(1.0), &one(0.0), &WienerParams::Scalar(1.0)).unwrap();
        assert!((d.m[0].re - (0.05 - 0.231 / 4.42)).abs() < 1e-15);
        assert!((d.m[0].re + 0.0022624).abs() < 1e-7);
        assert!((d.terms.clean[0].re - 0.5).abs() < 1e-15);
        assert!((d.terms.noisy[0].re - 1.1 / 2.21).abs() < 1e-15);
        assert!(d.terms.residual[0].norm() < 1e-15);
    }

    #[test]
    fn wiener_exact_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let d = wiener_decomposition(
                &random_complex(&mut rng, 256, 1.0),
                &random_complex(&mut rng, 256, 0.3),
                &random_complex(&mut rng, 256, 1.0),
                &random_complex(&mut rng, 256, 0.1),
                &WienerParams::Scalar(0.05),
            )
            .unwrap();
            assert!(d.terms.relative_residual() < 1e-9);
        }
        let p = random_complex(&mut rng, 16, 1.0);
        let zero = vec![Complex64::new(0.0, 0.0); 16];
        let x = random_complex(&mut rng, 16, 1.0);
        let d = wiener_decomposition(&p, &zero, &x, &zero, &WienerParams::Scalar(0.1)).unwrap();
        assert!(d.m.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
        assert_eq!(d.terms.noisy, d.terms.clean);
        assert!(matches!(
            wiener_decomposition(&zero, &zero, &x, &zero, &WienerParams::Scalar(0.0)),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn gradient_step_scalar() {
        let t = gd_step_decomposition(&scalar_system(1.0, 0.1), &v1(1.0), &v1(0.0), &v1(0.0), 0.5).unwrap();
        assert_eq!(t.clean[0], 0.5);
        assert_eq!(t.noisy[0], 0.55);
        assert_eq!(t.mismatch[0], 0.05);
        assert_eq!(t.clean[0] + t.mismatch[0], 0.55);
        assert!(t.residual[0].abs() < 1e-15);
    }

    #[test]
    fn gradient_step_exact_and_trivial_without_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let sys = random_system(&mut rng, 10, 0.3).unwrap();
            let (x, n, xp) = (random_vector(&mut rng, 10, 1.0), random_vector(&mut rng, 10, 0.1), random_vector(&mut rng, 10, 1.0));
            assert!(gd_step_decomposition(&sys, &x, &n, &xp, 0.2).unwrap().relative_residual() < 1e-10);
        }
        let sys = random_system(&mut rng, 10, 0.0).unwrap();
        let (x, n, xp) = (random_vector(&mut rng, 10, 1.0), random_vector(&mut rng, 10, 0.1), random_vector(&mut rng, 10, 1.0));
        let t = gd_step_decomposition(&sys, &x, &n, &xp, 0.2).unwrap();
        assert_eq!(t.noisy, t.clean);
    }

    #[test]
    fn noise_term_is_linear_in_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = random_system(&mut rng, 8, 0.2).unwrap();
        let x = random_vector(&mut rng, 8, 1.0);
        let xp = random_vector(&mut rng, 8, 1.0);
        let n1 = random_vector(&mut rng, 8, 0.1);
        let n2 = random_vector(&mut rng, 8, 0.1);
        let gd = |n: &DVector<f64>| gd_step_decomposition(&sys, &x, n, &xp, 0.3).unwrap().noise_amplification;
        let di = |n: &DVector<f64>| direct_inversion_decomposition(&sys, &x, n).unwrap().noise_amplification;
        let sum = &n1 + &n2;
        assert!((gd(&sum) - gd(&n1) - gd(&n2)).norm() < 1e-12);
        assert!((di(&sum) - di(&n1) - di(&n2)).norm() < 1e-12);
    }

    #[test]
    fn prox_step_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sys = random_system(&mut rng, 12, 0.1).unwrap();
        let (x, n, xp) = (random_vector(&mut rng, 12, 1.0), random_vector(&mut rng, 12, 0.1), random_vector(&mut rng, 12, 1.0));
        let gd = gd_step_decomposition(&sys, &x, &n, &xp, 0.2).unwrap();
        let p0 = prox_step_mismatch(&sys, &x, &n, &xp, 0.2, 0.0).unwrap();
        assert_eq!(p0.terms, gd);
        let big = gd.clean.amax().max(gd.noisy.amax());
        let pb = prox_step_mismatch(&sys, &x, &n, &xp, 0.2, big).unwrap();
        assert!(pb.terms.noisy.iter().all(|v| *v == 0.0));
        assert!(pb.discarded.iter().all(|d| *d));
    }

    #[test]
    fn discarded_fraction_grows_with_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sys = random_system(&mut rng, 64, 0.02).unwrap();
        let mut x = DVector::zeros(64);
        for i in (0..64).step_by(8) {
            x[i] = 1.0;
        }
        let n = random_vector(&mut rng, 64, 0.01);
        let xp = DVector::zeros(64);
        let mut last = -1.0;
        for k in 0..12 {
            let beta = 0.02 * k as f64;
            let f = prox_step_mismatch(&sys, &x, &n, &xp, 0.2, beta).unwrap().discarded_fraction();
            assert!(f >= last);
            last = f;
        }
        assert!(last > 0.5);
    }

    #[test]
    fn admm_step_exact_with_and_without_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for crop_rows in [8, 4] {
            for _ in 0..10 {
                let ctx = random_admm_context(&mut rng, 8, crop_rows, 0.2).unwrap();
                let d = admm_step_decomposition(&ctx).unwrap();
                assert!(d.terms.relative_residual() < 1e-8, "{}", d.terms.relative_residual());
            }
        }
    }

    #[test]
    fn admm_step_without_mismatch_is_trivial() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ctx = random_admm_context(&mut rng, 8, 4, 0.0).unwrap();
        let d = admm_step_decomposition(&ctx).unwrap();
        assert_eq!(d.terms.noisy, d.terms.clean);
        assert!(d.w2.iter().all(|v| *v == 0.0));
        assert!(d.w3.iter().all(|v| *v == 0.0));
        assert_eq!(d.w4, DMatrix::identity(8, 8));
        assert!(d.small_delta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn admm_step_rejects_bad_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ctx = random_admm_context(&mut rng, 8, 4, 0.1).unwrap();
        ctx.rho_x = 0.0;
        assert!(admm_step_decomposition(&ctx).is_err());
        let mut ctx = random_admm_context(&mut rng, 8, 4, 0.1).unwrap();
        ctx.n = DVector::zeros(8);
        assert!(matches!(admm_step_decomposition(&ctx), Err(Error::Shape(_))));
    }

    #[test]
    fn audit_is_deterministic() {
        let a = audit(3, 2).unwrap();
        assert_eq!(a, audit(3, 2).unwrap());
        assert_eq!(a.identities.len(), 5);
        let json = serde_json::to_string(&a).unwrap();
        assert!(json.contains("admm_step"));
    }
}
