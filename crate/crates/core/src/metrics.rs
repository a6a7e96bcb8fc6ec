//! Clinical dose metrics: dose-volume points, homogeneity and conformity
//! indices, prediction errors and dose-volume histograms. All inputs are in Gy.

use std::path::Path;

use ndarray::{Array3, Zip};
use serde::Serialize;

use crate::data::{PatientVolume, OAR_NAMES};
use crate::error::{ensure_shape, Error, Result};

pub const DEFAULT_DVH_BIN_GY: f64 = 0.1;

/// Dose level reported as `V_x` for organs at risk.
pub const OAR_VOLUME_DOSE_GY: f64 = 40.0;

fn roi_doses(dose: &Array3<f32>, mask: &Array3<u8>) -> Result<Vec<f64>> {
    ensure_shape(&dims(dose), &dims(mask))?;
    let v: Vec<f64> = dose
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m != 0)
        .map(|(&d, _)| d as f64)
        .collect();
    if v.is_empty() {
        return Err(Error::EmptyRoi("mask".into()));
    }
    Ok(v)
}

fn dims<T>(a: &Array3<T>) -> [usize; 3] {
    let (d, h, w) = a.dim();
    [d, h, w]
}

fn sorted_descending(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn dx_sorted(desc: &[f64], x: f64) -> f64 {
    let rank = ((x * desc.len() as f64) / 100.0).ceil().max(1.0) as usize;
    desc[rank.min(desc.len()) - 1]
}

fn check_percent(x: f64) -> Result<()> {
    if !(x > 0.0 && x <= 100.0) {
        return Err(Error::invalid(format!("volume percentage {x} outside (0, 100]")));
    }
    Ok(())
}

/// `D_x`: the lowest dose among the hottest `x` percent of the ROI.
pub fn dose_at_volume(dose: &Array3<f32>, mask: &Array3<u8>, x: f64) -> Result<f64> {
    check_percent(x)?;
    Ok(dx_sorted(&sorted_descending(roi_doses(dose, mask)?), x))
}

fn vx(doses: &[f64], x: f64) -> f64 {
    let n = doses.iter().filter(|&&d| d >= x).count();
    n as f64 / doses.len() as f64 * 100.0
}

/// `V_x`: percentage of the ROI receiving at least `x` Gy.
pub fn volume_at_dose(dose: &Array3<f32>, mask: &Array3<u8>, x: f64) -> Result<f64> {
    Ok(vx(&roi_doses(dose, mask)?, x))
}

pub fn mean_dose(dose: &Array3<f32>, mask: &Array3<u8>) -> Result<f64> {
    let v = roi_doses(dose, mask)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

fn hi_from(d2: f64, d98: f64, d50: f64) -> Result<f64> {
    if d50 == 0.0 {
        return Err(Error::invalid("heterogeneity index undefined for zero median dose"));
    }
    Ok((d2 - d98) / d50)
}

/// Heterogeneity index `(D2 - D98) / D50`.
pub fn hi(dose: &Array3<f32>, ptv: &Array3<u8>) -> Result<f64> {
    let desc = sorted_descending(roi_doses(dose, ptv)?);
    hi_from(dx_sorted(&desc, 2.0), dx_sorted(&desc, 98.0), dx_sorted(&desc, 50.0))
}

/// Conformity index `|TV n PIV|^2 / (|TV| |PIV|)` where PIV holds every voxel
/// at or above the prescription. Zero when no voxel reaches it.
pub fn ci(dose: &Array3<f32>, ptv: &Array3<u8>, prescription_gy: f64) -> Result<f64> {
    ensure_shape(&dims(dose), &dims(ptv))?;
    let (mut tv, mut piv, mut both) = (0usize, 0usize, 0usize);
    Zip::from(dose).and(ptv).for_each(|&d, &m| {
        let hot = d as f64 >= prescription_gy;
        tv += usize::from(m != 0);
        piv += usize::from(hot);
        both += usize::from(hot && m != 0);
    });
    if tv == 0 {
        return Err(Error::EmptyRoi("PTV".into()));
    }
    if piv == 0 {
        return Ok(0.0);
    }
    Ok((both as f64).powi(2) / (tv as f64 * piv as f64))
}

/// Average prediction error `(1/n) sum |gt - pred|`.
pub fn ape(gt: &[f64], pred: &[f64]) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![gt.len()],
            got: vec![pred.len()],
        });
    }
    if gt.is_empty() {
        return Err(Error::invalid("prediction error needs at least one patient"));
    }
    Ok(gt.iter().zip(pred).map(|(g, p)| (g - p).abs()).sum::<f64>() / gt.len() as f64)
}

/// Mean absolute voxel error over the ROI of one patient.
pub fn dose_score(gt: &Array3<f32>, pred: &Array3<f32>, mask: &Array3<u8>) -> Result<f64> {
    ensure_shape(&dims(gt), &dims(pred))?;
    ensure_shape(&dims(gt), &dims(mask))?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    Zip::from(gt).and(pred).and(mask).for_each(|&g, &p, &m| {
        if m != 0 {
            sum += (g as f64 - p as f64).abs();
            n += 1;
        }
    });
    if n == 0 {
        return Err(Error::EmptyRoi("mask".into()));
    }
    Ok(sum / n as f64)
}

/// Cumulative dose-volume histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct DvhCurve {
    pub dose_bins: Vec<f64>,
    pub fraction: Vec<f64>,
}

/// Bins run from 0 to one step past the maximum ROI dose, so the curve starts
/// at 1 and ends at 0.
pub fn dvh(dose: &Array3<f32>, mask: &Array3<u8>, bin_width_gy: f64) -> Result<DvhCurve> {
    if !(bin_width_gy > 0.0) {
        return Err(Error::invalid("DVH bin width must be positive"));
    }
    let desc = sorted_descending(roi_doses(dose, mask)?);
    let n = desc.len();
    let bins = (desc[0] / bin_width_gy).floor() as usize + 2;
    let mut dose_bins = Vec::with_capacity(bins);
    let mut fraction = Vec::with_capacity(bins);
    // walk thresholds upward while the count of qualifying voxels shrinks
    let mut above = n;
    for k in 0..bins {
        let b = k as f64 * bin_width_gy;
        while above > 0 && desc[above - 1] < b {
            above -= 1;
        }
        dose_bins.push(b);
        fraction.push(above as f64 / n as f64);
    }
    Ok(DvhCurve { dose_bins, fraction })
}

impl DvhCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_gy", "fraction"])?;
        for (b, f) in self.dose_bins.iter().zip(&self.fraction) {
            w.write_record([format!("{b:.4}"), format!("{f}")])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Regions evaluated for every patient, in report order.
pub const ROI_NAMES: [&str; 6] = ["PTV", "BLD", "FHR", "FHL", "ST", "Body"];

pub fn roi_masks(vol: &PatientVolume) -> Vec<(&'static str, Array3<u8>)> {
    let mut out = vec![(ROI_NAMES[0], vol.ptv.clone())];
    for (name, m) in OAR_NAMES.iter().zip(&vol.oars) {
        out.push((name, m.clone()));
    }
    out.push(("Body", vol.body_mask()));
    out
}

/// Dose-volume metrics for one ROI: D98/D50/D2/Dmean/HI/CI for the target,
/// D2/Dmean/V40 for organs, Dmean for the body.
pub fn roi_metrics(roi: &str, dose: &Array3<f32>, mask: &Array3<u8>, prescription_gy: f64) -> Result<Vec<(&'static str, f64)>> {
    let doses = roi_doses(dose, mask).map_err(|e| match e {
        Error::EmptyRoi(_) => Error::EmptyRoi(roi.to_string()),
        other => other,
    })?;
    let mean = doses.iter().sum::<f64>() / doses.len() as f64;
    let v40 = vx(&doses, OAR_VOLUME_DOSE_GY);
    let desc = sorted_descending(doses);
    let d = |x| dx_sorted(&desc, x);
    Ok(match roi {
        "PTV" => vec![
            ("D98", d(98.0)),
            ("D50", d(50.0)),
            ("D2", d(2.0)),
            ("Dmean", mean),
            ("HI", hi_from(d(2.0), d(98.0), d(50.0)).unwrap_or(0.0)),
            ("CI", ci(dose, mask, prescription_gy)?),
        ],
        "Body" => vec![("Dmean", mean)],
        _ => vec![("D2", d(2.0)), ("Dmean", mean), ("V40", v40)],
    })
}

/// One patient x ROI x metric value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub patient: String,
    pub roi: String,
    pub metric: String,
    /// Empty for the dose score, which is itself an error.
    pub ground_truth: Option<f64>,
    pub predicted: f64,
    pub abs_error: f64,
}

/// Cohort mean and sample standard deviation of the per-patient error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub roi: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub patients: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Evaluates predicted dose volumes (Gy) against ground-truth patients.
    pub fn evaluate(cases: &[(String, &PatientVolume, &Array3<f32>)]) -> Result<Self> {
        let mut rows = Vec::new();
        for (patient, gt, pred) in cases {
            ensure_shape(&dims(&gt.dose), &dims(pred))?;
            for (roi, mask) in roi_masks(gt) {
                let truth = roi_metrics(roi, &gt.dose, &mask, gt.prescription_gy)?;
                let guess = roi_metrics(roi, pred, &mask, gt.prescription_gy)?;
                for ((metric, g), (_, p)) in truth.into_iter().zip(guess) {
                    rows.push(MetricRow {
                        patient: patient.clone(),
                        roi: roi.into(),
                        metric: metric.into(),
                        ground_truth: Some(g),
                        predicted: p,
                        abs_error: (g - p).abs(),
                    });
                }
                let score = dose_score(&gt.dose, pred, &mask)?;
                rows.push(MetricRow {
                    patient: patient.clone(),
                    roi: roi.into(),
                    metric: "dose_score".into(),
                    ground_truth: None,
                    predicted: score,
                    abs_error: score,
                });
            }
        }
        if rows.iter().any(|r| !r.predicted.is_finite() || !r.abs_error.is_finite()) {
            return Err(Error::invalid("non-finite metric value"));
        }
        Ok(MetricReport { rows })
    }

    fn errors(&self, roi: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.roi == roi && r.metric == metric)
            .map(|r| r.abs_error)
            .collect()
    }

    /// Cohort APE of a metric, or the cohort dose score for `"dose_score"`.
    pub fn cohort_error(&self, roi: &str, metric: &str) -> Option<f64> {
        let e = self.errors(roi, metric);
        (!e.is_empty()).then(|| e.iter().sum::<f64>() / e.len() as f64)
    }

    pub fn dose_score(&self, roi: &str) -> Option<f64> {
        self.cohort_error(roi, "dose_score")
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let k = (r.roi.clone(), r.metric.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(roi, metric)| {
                let e = self.errors(&roi, &metric);
                let n = e.len() as f64;
                let mean = e.iter().sum::<f64>() / n;
                let std = if e.len() > 1 {
                    (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                SummaryRow {
                    roi,
                    metric,
                    mean,
                    std,
                    patients: e.len(),
                }
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.summary())
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn line(v: &[f32]) -> (Array3<f32>, Array3<u8>) {
        let d = Array3::from_shape_vec((1, 1, v.len()), v.to_vec()).unwrap();
        (d, Array3::ones((1, 1, v.len())))
    }

    #[test]
    fn dose_volume_points() {
        let (d, m) = line(&[10.0, 40.0, 20.0, 30.0]);
        assert_eq!(dose_at_volume(&d, &m, 50.0).unwrap(), 30.0);
        assert_eq!(dose_at_volume(&d, &m, 100.0).unwrap(), 10.0);
        assert_eq!(dose_at_volume(&d, &m, 0.1).unwrap(), 40.0);
        assert_eq!(volume_at_dose(&d, &m, 40.0).unwrap(), 25.0);
        assert_eq!(volume_at_dose(&d, &m, 0.0).unwrap(), 100.0);
        assert_eq!(volume_at_dose(&d, &m, 41.0).unwrap(), 0.0);
        let (c, cm) = line(&[7.5; 9]);
        for x in [1.0, 33.0, 100.0] {
            assert_eq!(dose_at_volume(&c, &cm, x).unwrap(), 7.5);
        }
        assert!(dose_at_volume(&d, &m, 0.0).is_err());
        assert!(matches!(dose_at_volume(&d, &Array3::zeros((1, 1, 4)), 50.0), Err(Error::EmptyRoi(_))));
        assert!(volume_at_dose(&d, &Array3::zeros((1, 1, 4)), 5.0).is_err());
    }

    #[test]
    fn indices() {
        // 50 voxels: D2 = hottest voxel, D98 = 49th, D50 = 25th
        let mut v = vec![50.0f32; 50];
        v[0] = 52.0;
        v[48] = 48.0;
        v[49] = 48.0;
        let (d, m) = line(&v);
        assert_eq!(hi(&d, &m).unwrap(), 0.08);
        let (u, um) = line(&[50.0; 10]);
        assert_eq!(hi(&u, &um).unwrap(), 0.0);
        assert!(hi(&Array3::zeros((1, 1, 3)), &Array3::ones((1, 1, 3))).is_err());

        let mut dose = Array3::<f32>::zeros((1, 1, 300));
        let mut ptv = Array3::<u8>::zeros((1, 1, 300));
        for i in 0..100 {
            ptv[[0, 0, i]] = 1;
        }
        for i in 0..200 {
            dose[[0, 0, i]] = 60.0;
        }
        assert_eq!(ci(&dose, &ptv, 50.4).unwrap(), 0.5);
        let exact = ptv.mapv(|m| if m != 0 { 60.0f32 } else { 0.0 });
        assert_eq!(ci(&exact, &ptv, 50.4).unwrap(), 1.0);
        let disjoint = ptv.mapv(|m| if m != 0 { 0.0f32 } else { 60.0 });
        assert_eq!(ci(&disjoint, &ptv, 50.4).unwrap(), 0.0);
        assert_eq!(ci(&Array3::zeros((1, 1, 300)), &ptv, 50.4).unwrap(), 0.0);
    }

    #[test]
    fn errors_and_scores() {
        assert_eq!(ape(&[50.0, 52.0], &[49.0, 54.0]).unwrap(), 1.5);
        assert_eq!(ape(&[3.0], &[5.5]).unwrap(), 2.5);
        assert_eq!(ape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(ape(&[1.0], &[1.0, 2.0]).is_err());
        assert!(ape(&[], &[]).is_err());
        let gt = Array3::from_elem((2, 2, 2), 50.0f32);
        let pred = Array3::from_elem((2, 2, 2), 48.0f32);
        let m = Array3::ones((2, 2, 2));
        assert_eq!(dose_score(&gt, &pred, &m).unwrap(), 2.0);
        assert_eq!(dose_score(&gt, &gt, &m).unwrap(), 0.0);
        assert!(dose_score(&gt, &pred, &Array3::zeros((2, 2, 2))).is_err());
    }

    #[test]
    fn dvh_shape() {
        let (u, m) = line(&[5.0; 4]);
        let c = dvh(&u, &m, 0.5).unwrap();
        for (b, f) in c.dose_bins.iter().zip(&c.fraction) {
            assert_eq!(*f, if *b <= 5.0 { 1.0 } else { 0.0 });
        }
        let (d, m) = line(&[0.3, 1.7, 2.2, 0.9, 4.05]);
        let c = dvh(&d, &m, DEFAULT_DVH_BIN_GY).unwrap();
        assert_eq!(c.fraction[0], 1.0);
        assert_eq!(*c.fraction.last().unwrap(), 0.0);
        assert!(c.fraction.windows(2).all(|w| w[1] <= w[0]));
        for (b, f) in c.dose_bins.iter().zip(&c.fraction) {
            assert_eq!(f * 100.0, volume_at_dose(&d, &m, *b).unwrap());
        }
    }
}
