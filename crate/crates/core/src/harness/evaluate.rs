use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::draw_line_segment_mut;
use ndarray::Array3;

use crate::data::{read_bundles, PatientVolume};
use crate::error::{Error, Result};
use crate::metrics::{dvh, roi_masks, DvhCurve, MetricReport, DEFAULT_DVH_BIN_GY};

const GT_COLOUR: Rgb<u8> = Rgb([31, 90, 180]);
const PRED_COLOUR: Rgb<u8> = Rgb([200, 50, 40]);

/// Evaluates predicted bundles against ground-truth bundles with the same
/// names and writes `metrics.csv`, `summary.csv` and per-patient DVH files.
pub fn evaluate_dirs(pred: &Path, gt: &Path, out: &Path) -> Result<MetricReport> {
    let preds = read_bundles(pred)?;
    let truths = read_bundles(gt)?;
    let pred_names: Vec<&str> = preds.iter().map(|(n, _)| n.as_str()).collect();
    let gt_names: Vec<&str> = truths.iter().map(|(n, _)| n.as_str()).collect();
    // a single bundle on each side is compared regardless of its name
    if !(preds.len() == 1 && truths.len() == 1) && pred_names != gt_names {
        return Err(Error::invalid(format!(
            "patient mismatch: predictions {pred_names:?}, ground truth {gt_names:?}"
        )));
    }
    let pairs: Vec<(String, &PatientVolume, &Array3<f32>)> = truths
        .iter()
        .zip(&preds)
        .map(|((name, g), (_, p))| (name.clone(), g, &p.dose))
        .collect();
    evaluate_cases(&pairs, out)
}

/// Writes the report CSVs and DVH curves (CSV and PNG) for in-memory cases.
pub fn evaluate_cases(cases: &[(String, &PatientVolume, &Array3<f32>)], out: &Path) -> Result<MetricReport> {
    let report = MetricReport::evaluate(cases)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.write_csv(&out.join("metrics.csv"))?;
    report.write_summary_csv(&out.join("summary.csv"))?;
    for (name, gt, pred) in cases {
        let dir = out.join("dvh").join(name);
        write_dvh_set(gt, &gt.dose, Some(pred), &dir)?;
    }
    Ok(report)
}

/// DVH CSVs and plots per ROI of `masks`. With a prediction, files are
/// `{roi}_gt.csv`, `{roi}_pred.csv` and one overlay `{roi}.png`.
pub fn write_dvh_set(masks: &PatientVolume, dose: &Array3<f32>, pred: Option<&Array3<f32>>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (roi, mask) in roi_masks(masks) {
        if !mask.iter().any(|&m| m != 0) {
            log::warn!("skipping DVH of empty ROI {roi}");
            continue;
        }
        let reference = dvh(dose, &mask, DEFAULT_DVH_BIN_GY)?;
        let mut curves = vec![(reference, GT_COLOUR)];
        match pred {
            Some(p) => {
                curves[0].0.write_csv(&dir.join(format!("{roi}_gt.csv")))?;
                let c = dvh(p, &mask, DEFAULT_DVH_BIN_GY)?;
                c.write_csv(&dir.join(format!("{roi}_pred.csv")))?;
                curves.push((c, PRED_COLOUR));
            }
            None => curves[0].0.write_csv(&dir.join(format!("{roi}.csv")))?,
        }
        plot_dvh(&curves, &dir.join(format!("{roi}.png")))?;
    }
    Ok(())
}

/// Draws cumulative DVH curves on a white canvas with 10 Gy and 10 % grid lines.
pub fn plot_dvh(curves: &[(DvhCurve, Rgb<u8>)], path: &Path) -> Result<()> {
    const W: u32 = 640;
    const H: u32 = 400;
    const M: f32 = 40.0;
    let max_dose = curves
        .iter()
        .filter_map(|(c, _)| c.dose_bins.last().copied())
        .fold(10.0_f64, f64::max);
    let x_max = (max_dose / 10.0).ceil() * 10.0;
    let (pw, ph) = (W as f32 - 2.0 * M, H as f32 - 2.0 * M);
    let px = |d: f64| M + (d / x_max) as f32 * pw;
    let py = |f: f64| H as f32 - M - f as f32 * ph;

    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let grid = Rgb([225, 225, 225]);
    for k in 0..=(x_max / 10.0) as usize {
        let x = px(k as f64 * 10.0);
        draw_line_segment_mut(&mut img, (x, py(0.0)), (x, py(1.0)), grid);
    }
    for k in 0..=10 {
        let y = py(k as f64 / 10.0);
        draw_line_segment_mut(&mut img, (px(0.0), y), (px(x_max), y), grid);
    }
    let axis = Rgb([0, 0, 0]);
    draw_line_segment_mut(&mut img, (px(0.0), py(0.0)), (px(x_max), py(0.0)), axis);
    draw_line_segment_mut(&mut img, (px(0.0), py(0.0)), (px(0.0), py(1.0)), axis);

    for (curve, colour) in curves {
        for (d, f) in curve.dose_bins.windows(2).zip(curve.fraction.windows(2)) {
            draw_line_segment_mut(&mut img, (px(d[0]), py(f[0])), (px(d[1]), py(f[1])), *colour);
        }
    }
    img.save(path)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, write_volume, PhantomParams};

    fn small() -> PatientVolume {
        let p = PhantomParams {
            depth: 8,
            height: 32,
            width: 32,
            ..PhantomParams::desk()
        };
        generate_phantom(5, &p).unwrap()
    }

    #[test]
    fn identical_prediction_scores_zero() {
        let dir = tempfile::tempdir().unwrap();
        let vol = small();
        write_volume(&vol, &dir.path().join("gt/p0")).unwrap();
        write_volume(&vol, &dir.path().join("pred/p0")).unwrap();
        let out = dir.path().join("eval");
        let report = evaluate_dirs(&dir.path().join("pred"), &dir.path().join("gt"), &out).unwrap();
        assert!(report.rows.iter().all(|r| r.abs_error == 0.0));
        for f in ["metrics.csv", "summary.csv", "dvh/p0/PTV_gt.csv", "dvh/p0/PTV_pred.csv", "dvh/p0/Body.png"] {
            assert!(out.join(f).is_file(), "{f}");
        }
        let png = image::open(out.join("dvh/p0/PTV.png")).unwrap();
        assert_eq!((png.width(), png.height()), (640, 400));
    }

    #[test]
    fn mismatched_patients_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let vol = small();
        for (side, name) in [("gt", "p0"), ("gt", "p1"), ("pred", "p0"), ("pred", "p2")] {
            write_volume(&vol, &dir.path().join(side).join(name)).unwrap();
        }
        let err = evaluate_dirs(&dir.path().join("pred"), &dir.path().join("gt"), &dir.path().join("e"));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }
}
