//! Simulates the PSF of a random programmable mask under each physical model
//! and prints per-channel statistics. Pass a directory to also write the PSFs.
//!
//!     cargo run --example psf_simulation -- /tmp/psfs

use lensless::io;
use lensless::optics::{
    fresnel_number, random_mask, simulate_psf, Normalization, OpticalGeometry, PsfVariant, RGB_WAVELENGTHS,
    SUBPIXEL_APERTURE,
};

fn main() -> lensless::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);

    for wl in [450e-9, 550e-9, 750e-9] {
        let nf = fresnel_number(SUBPIXEL_APERTURE.1, 2e-3, wl)?;
        println!("fresnel number at {:.0} nm: {nf:.3}", wl * 1e9);
    }

    let mask = random_mask(7, 18, 26)?;
    let geometry = OpticalGeometry::from_sensor(96, 96, 500e-6, 0.30, 2e-3)?;
    for variant in [PsfVariant::WaveDeadspace, PsfVariant::WaveNoDeadspace, PsfVariant::NoWave] {
        let psf = simulate_psf(&mask, &geometry, &RGB_WAVELENGTHS, variant, Normalization::UnitSum)?;
        let img = psf.image();
        let peaks: Vec<String> = (0..psf.channels())
            .map(|c| format!("{:.2e}", img.plane(c).iter().cloned().fold(0.0, f64::max)))
            .collect();
        println!("{variant:?}: {:?} peak per channel {}", psf.dims(), peaks.join(" / "));
        if let Some(dir) = &out {
            io::ensure_dir(dir)?;
            io::save_psf(&dir.join(format!("{variant:?}.npy").to_lowercase()), &psf)?;
        }
    }
    Ok(())
}
