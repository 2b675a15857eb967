//! Model-mismatch decompositions on random small systems: residuals of the
//! exact identities, the quadratic remainder of direct inversion, and how the
//! ADMM mismatch gap evolves when both paths iterate.

use lensless::mismatch::{admm_mismatch_growth, audit, random_admm_context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lensless::Result<()> {
    let report = audit(42, 25)?;
    for id in &report.identities {
        println!(
            "{:<18} trials {:>3}  max rel residual {:.2e}  |mismatch| {:.3e}  |noise| {:.3e}",
            id.name, id.trials, id.max_relative_residual, id.example.mismatch, id.example.noise_amplification
        );
    }
    let s = &report.direct_inversion_slopes;
    println!("direct inversion log-log slopes: min {:.3} max {:.3}", s.iter().cloned().fold(f64::INFINITY, f64::min), s.iter().cloned().fold(0.0, f64::max));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ctx = random_admm_context(&mut rng, 8, 6, 0.05)?;
    let gaps = admm_mismatch_growth(&ctx, 10)?;
    let line: Vec<String> = gaps.iter().map(|g| format!("{g:.3e}")).collect();
    println!("ADMM gap per step: {}", line.join(" "));
    Ok(())
}
