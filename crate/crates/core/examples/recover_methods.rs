//! Wiener, FISTA-TV and ADMM-TV on the same noisy simulated measurement.

use std::time::Instant;

use lensless::bench::{procedural_scene, DeskOptics, SceneKind};
use lensless::forward::{convolve_lsi, NoiseSpec};
use lensless::metrics::score;
use lensless::recover::{AdmmParams, Inversion, IstaParams};

fn main() -> lensless::Result<()> {
    let scene = procedural_scene(SceneKind::Checkerboard, 1, 64, 64, 1)?;
    let psf = DeskOptics::default().mask_psf(2, 64, 64, 1)?;
    let meas = NoiseSpec::shot(25.0, 9).apply(&convolve_lsi(&scene, &psf)?)?;

    let methods = [
        Inversion::Wiener { reg: 1e-3 },
        Inversion::FistaTv(IstaParams::new(1e-3, 200, true)),
        Inversion::AdmmTv(AdmmParams::default()),
        // Stronger TV for noisy input; the defaults favour clean data.
        Inversion::AdmmTv(AdmmParams { mu2: 1e-3, tau: 3e-3, ..AdmmParams::default() }),
    ];
    for m in &methods {
        let t = Instant::now();
        let est = m.run(&meas, &psf)?;
        let s = score(&scene, &est, None, None)?;
        println!("{:<9} PSNR {:>6.2} dB  SSIM {:.3}  {:>6.1} ms", m.name(), s.psnr_db, s.ssim, t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(())
}
