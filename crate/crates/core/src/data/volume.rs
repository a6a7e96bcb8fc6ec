use ndarray::{Array3, Zip};

use crate::error::{ensure_shape, Error, Result};

/// Organs at risk, in structure-channel order.
pub const OAR_NAMES: [&str; 4] = ["BLD", "FHR", "FHL", "ST"];

/// Structure channel order of every slice batch.
pub const CHANNEL_ORDER: [&str; 6] = ["CT", "PTV", "BLD", "FHR", "FHL", "ST"];

/// CT values above this (HU) count as inside the body.
pub const BODY_THRESHOLD_HU: f32 = -500.0;

pub const CT_WINDOW_HU: (f32, f32) = (-1000.0, 1000.0);

/// Dose normalization ceiling as a multiple of the prescription.
pub const DOSE_CAP_FACTOR: f64 = 1.2;

/// One patient: CT, target and organ masks, and dose, all `D x H x W`
/// in axial-slice order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientVolume {
    pub ct: Array3<f32>,
    pub ptv: Array3<u8>,
    pub oars: [Array3<u8>; 4],
    pub dose: Array3<f32>,
    pub spacing_mm: [f64; 3],
    pub prescription_gy: f64,
}

impl PatientVolume {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.ct.dim()
    }

    pub fn body_mask(&self) -> Array3<u8> {
        self.ct.mapv(|v| u8::from(v > BODY_THRESHOLD_HU))
    }

    pub fn oar(&self, name: &str) -> Option<&Array3<u8>> {
        OAR_NAMES.iter().position(|n| *n == name).map(|i| &self.oars[i])
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.dims();
        let expect = [d, h, w];
        let shape = |a: (usize, usize, usize)| [a.0, a.1, a.2];
        ensure_shape(&expect, &shape(self.ptv.dim()))?;
        ensure_shape(&expect, &shape(self.dose.dim()))?;
        for o in &self.oars {
            ensure_shape(&expect, &shape(o.dim()))?;
        }
        if !(self.prescription_gy > 0.0) {
            return Err(Error::invalid("prescription must be positive"));
        }
        if self.dose.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("dose must be finite and non-negative"));
        }
        let body = self.body_mask();
        for (name, m) in std::iter::once(("PTV", &self.ptv)).chain(OAR_NAMES.iter().copied().zip(self.oars.iter())) {
            let mut outside = false;
            Zip::from(m).and(&body).for_each(|&s, &b| outside |= s != 0 && b == 0);
            if outside {
                return Err(Error::invalid(format!("{name} extends outside the body")));
            }
        }
        Ok(())
    }
}

/// Maps dose in Gy to `[-1, 1]` with the ceiling at `1.2 x prescription`.
pub fn normalize_dose(dose_gy: f32, prescription_gy: f64) -> f32 {
    let cap = DOSE_CAP_FACTOR * prescription_gy;
    (2.0 * dose_gy as f64 / cap - 1.0).clamp(-1.0, 1.0) as f32
}

pub fn denormalize_dose(value: f32, prescription_gy: f64) -> f32 {
    let cap = DOSE_CAP_FACTOR * prescription_gy;
    ((value as f64 + 1.0) * 0.5 * cap) as f32
}

pub fn normalize_ct(hu: f32) -> f32 {
    let (lo, hi) = CT_WINDOW_HU;
    (2.0 * (hu - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dose_normalization_anchors() {
        let rx = 50.4;
        assert_eq!(normalize_dose(0.0, rx), -1.0);
        assert!((normalize_dose((1.2 * rx) as f32, rx) - 1.0).abs() < 1e-6);
        assert!(normalize_dose((0.6 * rx) as f32, rx).abs() < 1e-6);
        assert_eq!(normalize_dose(1000.0, rx), 1.0);
        assert_eq!(normalize_ct(-1000.0), -1.0);
        assert_eq!(normalize_ct(0.0), 0.0);
        assert_eq!(normalize_ct(3000.0), 1.0);
    }

    proptest! {
        #[test]
        fn dose_round_trip(frac in 0.0f64..=1.0, rx in 1.0f64..100.0) {
            let d = (frac * 1.2 * rx) as f32;
            let back = denormalize_dose(normalize_dose(d, rx), rx);
            // relative to the normalization ceiling; f32 storage cannot do better
            prop_assert!(((back - d) as f64).abs() <= 1e-6 * 1.2 * rx);
        }
    }
}
