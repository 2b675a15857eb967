//! One pipeline evaluated across PSFs simulated from different random masks,
//! with the per-seed spread and the train/test split of the seeds.

use lensless::recover::{AdmmParams, Inversion, PipelineConfig};
use lensless::bench::{multimask_sweep, SceneSpec, SweepConfig};

fn main() -> lensless::Result<()> {
    let cfg = SweepConfig {
        master_seed: 1,
        scenes: SceneSpec { count: 4, ..SceneSpec::default() },
        measurement_snr_db: Some(20.0),
        pipeline: PipelineConfig {
            inversion: Inversion::AdmmTv(AdmmParams { mu2: 1e-3, tau: 3e-3, ..AdmmParams::default() }),
            ..PipelineConfig::admm100()
        },
        ..SweepConfig::default()
    };
    let run = multimask_sweep(&cfg)?;
    for s in &run.report.strata {
        println!("{:<8} PSNR {:>6.2} dB", s.label, s.aggregate.psnr_db.unwrap_or(f64::NAN));
    }
    println!("cross-seed PSNR std {:.3} dB", run.report.cross_seed_psnr_std.unwrap_or(f64::NAN));
    if let Some(split) = &run.report.split {
        println!("train seeds {:?}, test seeds {:?}", split.train, split.test);
    }
    let total: f64 = run.timings.iter().map(|t| t.inference_ms).sum();
    println!("{} reconstructions, {:.0} ms solver time", run.timings.len(), total);
    Ok(())
}
