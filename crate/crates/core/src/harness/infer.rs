use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::{Array3, Zip};

use super::config::{DiffusionConfig, ExperimentConfig};
use super::model::DoseModel;
use crate::data::{denormalize_dose, reassemble, slice_volume, PatientVolume};
use crate::error::{Error, Result};
use crate::schedule::{make_cosine_schedule, subsample_schedule, NoiseSchedule};

/// The training schedule subsampled to `steps` reverse steps.
pub fn inference_schedule(diffusion: &DiffusionConfig, steps: usize) -> Result<NoiseSchedule> {
    let full = make_cosine_schedule(diffusion.steps, diffusion.cosine_offset)?;
    subsample_schedule(&full, steps, diffusion.subsample)
}

/// Rejects volumes whose in-plane size the trained model cannot take.
pub fn check_compatible(cfg: &ExperimentConfig, vol: &PatientVolume) -> Result<()> {
    let (_, h, w) = vol.dims();
    if cfg.data.dir.is_none() {
        let (th, tw) = (cfg.data.phantom.height, cfg.data.phantom.width);
        if (h, w) != (th, tw) {
            return Err(Error::Incompatible(format!(
                "volume is {h}x{w} in-plane, the model was trained on {th}x{tw}"
            )));
        }
    }
    let factor = if cfg.model.structure_encoder && cfg.model.encoder.use_i2t {
        8 * cfg.model.encoder.attention.pool
    } else {
        8
    };
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Incompatible(format!(
            "in-plane size {h}x{w} must be divisible by {factor}"
        )));
    }
    Ok(())
}

/// Seed of the reverse chain for window `index`.
fn window_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Predicts the 3-D dose in Gy, window by window, and stitches the result.
pub fn predict_volume(
    model: &DoseModel,
    cfg: &ExperimentConfig,
    vol: &PatientVolume,
    steps: usize,
    seed: u64,
) -> Result<Array3<f32>> {
    check_compatible(cfg, vol)?;
    let sched = inference_schedule(&cfg.diffusion, steps)?;
    let (depth, _, _) = vol.dims();
    let rx = vol.prescription_gy;
    let mut windows = Vec::new();
    for (i, win) in slice_volume(vol, cfg.optim.batch, "")?.iter().enumerate() {
        let y0 = model.sample_window(
            &win.structure,
            win.slice_offset,
            &sched,
            window_seed(seed, i),
            cfg.diffusion.denominator,
            cfg.diffusion.clip_denoised,
        )?;
        let gy = to_array(&y0.values)?.mapv(|v| denormalize_dose(v, rx));
        log::debug!("sampled window {i} at slice {}", win.slice_offset);
        windows.push((win.slice_offset, win.valid, gy));
    }
    reassemble(&windows, depth)
}

fn to_array(t: &Tensor) -> Result<Array3<f32>> {
    let (b, _, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array3::from_shape_vec((b, h, w), v).expect("length matches dims"))
}

/// Prescription dose everywhere inside the body, zero outside.
pub fn constant_prescription_baseline(vol: &PatientVolume) -> Array3<f32> {
    let rx = vol.prescription_gy as f32;
    let mut out = Array3::<f32>::zeros(vol.dims());
    Zip::from(&mut out).and(&vol.body_mask()).for_each(|o, &b| {
        if b != 0 {
            *o = rx;
        }
    });
    out
}

/// Writes every window's inter-slice attention matrices as
/// `window{w}_stage{s}_block{k}_head{h}.csv`; returns the file count.
pub fn dump_attention(model: &DoseModel, batch: usize, vol: &PatientVolume, out: &Path) -> Result<usize> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = 0;
    for (wi, win) in slice_volume(vol, batch, "")?.iter().enumerate() {
        let maps = model.attention_maps(&win.structure, win.slice_offset)?;
        for (si, stage) in maps.iter().enumerate() {
            for (ki, block) in stage.iter().enumerate() {
                for (hi, m) in block.iter().enumerate() {
                    let path = out.join(format!("window{wi}_stage{si}_block{ki}_head{hi}.csv"));
                    write_matrix(&path, &m.to_dtype(DType::F64)?.to_vec2::<f64>()?)?;
                    written += 1;
                }
            }
        }
    }
    Ok(written)
}

fn write_matrix(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.8}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomParams};

    fn tiny() -> (ExperimentConfig, PatientVolume) {
        let mut cfg = ExperimentConfig::overfit();
        cfg.data.phantom = PhantomParams {
            depth: 10,
            height: 32,
            width: 32,
            ..PhantomParams::desk()
        };
        let vol = generate_phantom(3, &cfg.data.phantom).unwrap();
        (cfg, vol)
    }

    #[test]
    fn untrained_prediction_has_volume_shape_and_is_reproducible() {
        let (cfg, vol) = tiny();
        let model = DoseModel::new(&cfg.model, DType::F32, 1).unwrap();
        let a = predict_volume(&model, &cfg, &vol, 2, 9).unwrap();
        let b = predict_volume(&model, &cfg, &vol, 2, 9).unwrap();
        assert_eq!(a.dim(), vol.dims());
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn mismatched_plane_is_rejected() {
        let (cfg, vol) = tiny();
        let model = DoseModel::new(&cfg.model, DType::F32, 1).unwrap();
        let mut other = cfg.clone();
        other.data.phantom.height = 64;
        assert!(matches!(
            predict_volume(&model, &other, &vol, 1, 0),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn baseline_is_prescription_in_body() {
        let (_, vol) = tiny();
        let base = constant_prescription_baseline(&vol);
        let body = vol.body_mask();
        Zip::from(&base).and(&body).for_each(|&d, &b| {
            assert_eq!(d, if b != 0 { vol.prescription_gy as f32 } else { 0.0 });
        });
    }

    #[test]
    fn attention_dump_writes_square_matrices() {
        let (cfg, vol) = tiny();
        let model = DoseModel::new(&cfg.model, DType::F32, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let n = dump_attention(&model, cfg.optim.batch, &vol, dir.path()).unwrap();
        // 3 windows x 4 stages x 1 block x 2 heads
        assert_eq!(n, 24);
        let text = fs::read_to_string(dir.path().join("window0_stage2_block0_head1.csv")).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 4);
        for r in rows {
            let s: f64 = r.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
            assert_eq!(r.split(',').count(), 4);
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
