//! Forward model on a procedural scene followed by calibrated shot and
//! Gaussian noise; checks the measured SNR against the requested one.

use lensless::bench::{procedural_scene, DeskOptics, SceneKind};
use lensless::forward::{convolve_lsi, NoiseSpec};
use lensless::metrics::empirical_snr;

fn main() -> lensless::Result<()> {
    let scene = procedural_scene(SceneKind::PinkNoise, 3, 128, 128, 1)?;
    let psf = DeskOptics::default().mask_psf(0, 128, 128, 1)?;
    let meas = convolve_lsi(&scene, &psf)?;
    println!("scene sum {:.3}, measurement sum {:.3}", scene.sum(), meas.sum());

    println!("target   shot     gaussian");
    for snr in [0.0, 10.0, 20.0, 30.0] {
        let shot = NoiseSpec::shot(snr, 1).apply(&meas)?;
        let gauss = NoiseSpec::gaussian(snr, 1).apply(&meas)?;
        println!(
            "{snr:>5.1}  {:>7.3}  {:>7.3}",
            empirical_snr(&meas, &shot)?,
            empirical_snr(&meas, &gauss)?
        );
    }
    Ok(())
}
