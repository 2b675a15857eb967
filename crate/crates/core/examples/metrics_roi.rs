//! Scoring with a region of interest and emitting a metrics report as CSV.

use lensless::bench::{procedural_scene, SceneKind};
use lensless::forward::NoiseSpec;
use lensless::metrics::{fingerprint, score, MetricsReport, MetricsRow, ReportFormat, RoiSpec};

fn main() -> lensless::Result<()> {
    let truth = procedural_scene(SceneKind::Gradient, 0, 48, 48, 1)?;
    // Reconstruction twice the size with a dark border around the content.
    let mut recon = lensless::grid::RealImage::zeros(112, 112, 1);
    let noisy = NoiseSpec::gaussian(20.0, 4).apply(&lensless::metrics::resize_bilinear(&truth, 96, 96)?)?;
    for r in 0..96 {
        for c in 0..96 {
            recon.set(r + 8, c + 8, 0, noisy.get(r, c, 0));
        }
    }
    let roi = RoiSpec { row_offset: 8, col_offset: 8, height: 96, width: 96, target_height: 48, target_width: 48 };

    let mut rows = Vec::new();
    for (id, spec) in [("roi", Some(&roi)), ("resized_full", None)] {
        let img = match spec {
            Some(_) => recon.clone(),
            None => lensless::metrics::resize_bilinear(&recon, 48, 48)?,
        };
        let s = score(&truth, &img, spec, None)?;
        rows.push(MetricsRow::scored(id, &s, None).with_extra("peak", s.peak));
    }
    let report = MetricsReport::new(fingerprint("metrics_roi example"), rows);
    print!("{}", report.render(ReportFormat::Csv)?);
    Ok(())
}
