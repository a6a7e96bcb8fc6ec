use candle_core::{Device, Tensor};
use ndarray::{s, Array3, Axis};

use super::volume::{normalize_ct, normalize_dose, PatientVolume};
use crate::error::{ensure_shape, Error, Result};

/// A window of `B` contiguous axial slices of one patient.
///
/// The last window of a volume whose depth is not a multiple of `B` is filled
/// by repeating its final slice; `valid` counts the real slices at the front.
#[derive(Debug, Clone)]
pub struct SliceBatch {
    /// `B x 6 x H x W`, channels in [`CHANNEL_ORDER`](super::CHANNEL_ORDER).
    pub structure: Tensor,
    /// `B x 1 x H x W` normalized dose.
    pub dose: Tensor,
    /// `B x H x W` raw masks used by the loss: PTV, each OAR, body.
    pub ptv: Array3<u8>,
    pub oars: [Array3<u8>; 4],
    pub body: Array3<u8>,
    pub patient_id: String,
    pub slice_offset: usize,
    pub valid: usize,
}

impl SliceBatch {
    pub fn len(&self) -> usize {
        self.ptv.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn padded(&self) -> usize {
        self.len() - self.valid
    }

    /// Per-slice mask: 1 for real slices, 0 for padding.
    pub fn valid_mask(&self) -> Vec<f64> {
        (0..self.len()).map(|i| if i < self.valid { 1.0 } else { 0.0 }).collect()
    }
}

fn window<T: Clone>(a: &Array3<T>, start: usize, len: usize) -> Array3<T> {
    let d = a.dim().0;
    let idx: Vec<usize> = (start..start + len).map(|z| z.min(d - 1)).collect();
    a.select(Axis(0), &idx)
}

fn to_tensor(a: Array3<f32>) -> Result<Tensor> {
    let (b, h, w) = a.dim();
    let v = a.into_raw_vec_and_offset().0;
    Ok(Tensor::from_vec(v, (b, 1, h, w), &Device::Cpu)?)
}

/// Partitions a volume into non-overlapping windows of `b` slices.
pub fn slice_volume(vol: &PatientVolume, b: usize, patient_id: &str) -> Result<Vec<SliceBatch>> {
    if b == 0 {
        return Err(Error::invalid("window size must be at least 1"));
    }
    vol.validate()?;
    let (d, _, _) = vol.dims();
    let body = vol.body_mask();
    let rx = vol.prescription_gy;
    let mut out = Vec::with_capacity(d.div_ceil(b));
    for start in (0..d).step_by(b) {
        let valid = b.min(d - start);
        let ct = window(&vol.ct, start, b).mapv(normalize_ct);
        let ptv = window(&vol.ptv, start, b);
        let oars = [0, 1, 2, 3].map(|i| window(&vol.oars[i], start, b));
        let mut channels = vec![to_tensor(ct)?, to_tensor(ptv.mapv(f32::from))?];
        for o in &oars {
            channels.push(to_tensor(o.mapv(f32::from))?);
        }
        out.push(SliceBatch {
            structure: Tensor::cat(&channels, 1)?,
            dose: to_tensor(window(&vol.dose, start, b).mapv(|v| normalize_dose(v, rx)))?,
            ptv,
            oars,
            body: window(&body, start, b),
            patient_id: patient_id.to_string(),
            slice_offset: start,
            valid,
        });
    }
    Ok(out)
}

/// Stitches per-window `B x H x W` arrays back into a `depth`-slice volume,
/// dropping padded slices.
pub fn reassemble(windows: &[(usize, usize, Array3<f32>)], depth: usize) -> Result<Array3<f32>> {
    let Some((_, _, first)) = windows.first() else {
        return Err(Error::invalid("no windows to reassemble"));
    };
    let (_, h, w) = first.dim();
    let mut out = Array3::<f32>::zeros((depth, h, w));
    let mut covered = vec![false; depth];
    for (offset, valid, a) in windows {
        let (b, wh, ww) = a.dim();
        ensure_shape(&[h, w], &[wh, ww])?;
        if *valid > b || offset + valid > depth {
            return Err(Error::invalid(format!(
                "window at {offset} with {valid} valid slices exceeds depth {depth}"
            )));
        }
        out.slice_mut(s![*offset..offset + valid, .., ..]).assign(&a.slice(s![..*valid, .., ..]));
        covered[*offset..offset + valid].iter_mut().for_each(|c| *c = true);
    }
    if let Some(z) = covered.iter().position(|c| !c) {
        return Err(Error::invalid(format!("slice {z} not covered by any window")));
    }
    Ok(out)
}

/// Patient-level split into disjoint train / validation / test id sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_patients(total: usize, val: usize, test: usize, seed: u64) -> Result<PatientSplit> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if val + test >= total {
        return Err(Error::invalid(format!(
            "split of {total} patients leaves no training data ({val} val, {test} test)"
        )));
    }
    let mut ids: Vec<usize> = (0..total).collect();
    ids.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut test_ids = ids.split_off(total - test);
    let mut val_ids = ids.split_off(total - test - val);
    ids.sort_unstable();
    val_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(PatientSplit {
        train: ids,
        val: val_ids,
        test: test_ids,
    })
}
