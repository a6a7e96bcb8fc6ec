use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, TrainState};
use super::config::{ExperimentConfig, TimestepSampling};
use super::model::DoseModel;
use crate::data::{generate_phantom, read_bundles, slice_volume, split_patients, PatientSplit, PatientVolume};
use crate::diffusion::gaussian_like;
use crate::error::{Error, Result};
use crate::loss::{awloss, build_weight_map, LossWeights};
use crate::nn::Adam;
use crate::schedule::{make_cosine_schedule, NoiseSchedule};

/// Loads (or generates) every patient of the configured cohort, named
/// `patient_000`, `patient_001`, ... in id order.
pub fn load_cohort(cfg: &ExperimentConfig) -> Result<Vec<(String, PatientVolume)>> {
    match &cfg.data.dir {
        Some(dir) => read_bundles(dir),
        None => (0..cfg.data.patients)
            .map(|i| {
                let seed = cfg.data.phantom_seed + i as u64;
                Ok((format!("patient_{i:03}"), generate_phantom(seed, &cfg.data.phantom)?))
            })
            .collect(),
    }
}

pub fn cohort_split(cfg: &ExperimentConfig, patients: usize) -> Result<PatientSplit> {
    if patients == 1 && cfg.data.val_patients + cfg.data.test_patients == 0 {
        return Ok(PatientSplit {
            train: vec![0],
            val: vec![],
            test: vec![],
        });
    }
    split_patients(patients, cfg.data.val_patients, cfg.data.test_patients, cfg.seed)
}

/// A training window with its precomputed per-pixel loss weights.
#[derive(Debug, Clone)]
pub struct TrainWindow {
    pub structure: Tensor,
    pub dose: Tensor,
    /// `B x 1 x H x W`; padded slices carry zero weight.
    pub weights: Tensor,
    pub slice_offset: usize,
    pub patient: String,
}

pub fn prepare_windows(patients: &[(String, PatientVolume)], batch: usize, loss: &LossWeights) -> Result<Vec<TrainWindow>> {
    let mut out = Vec::new();
    for (name, vol) in patients {
        for w in slice_volume(vol, batch, name)? {
            let (b, h, wd) = w.ptv.dim();
            let mut weights = Vec::with_capacity(b * h * wd);
            for z in 0..b {
                let oars: Vec<_> = w.oars.iter().map(|o| o.index_axis(Axis(0), z)).collect();
                let map = build_weight_map(w.ptv.index_axis(Axis(0), z), &oars, w.body.index_axis(Axis(0), z), loss)?;
                let keep = if z < w.valid { 1.0 } else { 0.0 };
                weights.extend(map.iter().map(|v| v * keep));
            }
            out.push(TrainWindow {
                weights: Tensor::from_vec(weights, (b, 1, h, wd), &Device::Cpu)?,
                structure: w.structure,
                dose: w.dose,
                slice_offset: w.slice_offset,
                patient: w.patient_id,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no training windows"));
    }
    Ok(out)
}

pub struct Trainer {
    cfg: ExperimentConfig,
    model: DoseModel,
    adam: Adam,
    sched: NoiseSchedule,
    rng: ChaCha8Rng,
    windows: Vec<TrainWindow>,
    step: usize,
    ema: Option<BTreeMap<String, Tensor>>,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, windows: Vec<TrainWindow>) -> Result<Self> {
        cfg.validate()?;
        if windows.is_empty() {
            return Err(Error::invalid("no training windows"));
        }
        let model = DoseModel::new(&cfg.model, DType::F32, cfg.seed)?;
        let adam = Adam::new(model.vars().vars(), cfg.optim.adam)?;
        let ema = cfg
            .optim
            .ema_decay
            .map(|_| {
                model
                    .vars()
                    .vars()
                    .into_iter()
                    .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
                    .collect::<Result<BTreeMap<_, _>>>()
            })
            .transpose()?;
        Ok(Trainer {
            sched: make_cosine_schedule(cfg.diffusion.steps, cfg.diffusion.cosine_offset)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed)),
            cfg: cfg.clone(),
            model,
            adam,
            windows,
            step: 0,
            ema,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &DoseModel {
        &self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn draw_gamma(&mut self) -> f64 {
        let t = self.rng.random_range(1..=self.sched.len());
        match self.cfg.diffusion.timestep_sampling {
            TimestepSampling::Discrete => self.sched.gamma(t),
            TimestepSampling::ContinuousGamma => {
                let hi = if t == 1 { 1.0 } else { self.sched.gamma(t - 1) };
                self.rng.random_range(self.sched.gamma(t)..hi)
            }
        }
    }

    /// One optimization step on a random window; every slice draws its own
    /// diffusion step. Returns the loss before the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let idx = self.rng.random_range(0..self.windows.len());
        let (b, _, h, w) = self.windows[idx].dose.dims4()?;
        let gammas: Vec<f64> = (0..b).map(|_| self.draw_gamma()).collect();
        let eps = gaussian_like(&[b, 1, h, w], DType::F32, &mut self.rng)?;
        let win = &self.windows[idx];
        let coef = |f: fn(f64) -> f64| -> Result<Tensor> {
            let v: Vec<f32> = gammas.iter().map(|&g| f(g) as f32).collect();
            Ok(Tensor::from_vec(v, (b, 1, 1, 1), &Device::Cpu)?)
        };
        let signal = coef(|g| g.sqrt())?;
        let noise = coef(|g| (1.0 - g).sqrt())?;
        let y_t = (win.dose.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?;
        let cond = self.model.condition(&win.structure, win.slice_offset)?;
        let pred = self.model.unet().forward(&y_t, &cond, &gammas)?;
        let loss = awloss(&pred, &eps, &win.weights, self.cfg.loss.normalization)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss: value,
                step: self.step + 1,
                gamma: gammas.iter().copied().fold(f64::INFINITY, f64::min),
                batch: idx,
            });
        }
        let grads = loss.backward()?;
        let factor = self.cfg.optim.lr_schedule.factor(self.step, self.cfg.optim.steps);
        self.adam.set_lr(self.cfg.optim.adam.lr * factor);
        self.adam.step(&grads)?;
        if let (Some(ema), Some(decay)) = (self.ema.as_mut(), self.cfg.optim.ema_decay) {
            for (name, var) in self.model.vars().vars() {
                let prev = &ema[&name];
                let next = ((prev * decay)? + (var.as_tensor() * (1.0 - decay))?)?;
                ema.insert(name, next);
            }
        }
        self.step += 1;
        Ok(value)
    }

    /// Runs `steps` further steps, appending `step,loss` rows to `loss_csv`
    /// and writing periodic checkpoints under `checkpoint_dir`.
    pub fn run(&mut self, steps: usize, loss_csv: Option<&Path>, checkpoint_dir: Option<&Path>) -> Result<Vec<f64>> {
        let mut log = match loss_csv {
            Some(p) => {
                let fresh = !p.exists() || self.step == 0;
                if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                if fresh {
                    writeln!(f, "step,loss").map_err(|e| Error::io(p, e))?;
                }
                Some((f, p))
            }
            None => None,
        };
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let loss = self.train_step()?;
            losses.push(loss);
            if let Some((f, p)) = log.as_mut() {
                writeln!(f, "{},{loss}", self.step).map_err(|e| Error::io(&**p, e))?;
            }
            if self.step % 100 == 0 {
                log::info!("step {} loss {loss:.5}", self.step);
            }
            let every = self.cfg.optim.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.step % every == 0 {
                    self.save_checkpoint(&dir.join(format!("step_{:06}", self.step)))?;
                }
            }
        }
        Ok(losses)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let mut tensors: HashMap<String, Tensor> = self.model.vars().tensors();
        tensors.extend(self.adam.state_tensors());
        if let Some(ema) = &self.ema {
            tensors.extend(ema.iter().map(|(k, v)| (format!("ema.{k}"), v.clone())));
        }
        let state = TrainState {
            config: self.cfg.clone(),
            step: self.step,
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        checkpoint::write(dir, &state, &tensors)
    }

    /// Rebuilds a trainer from a checkpoint so that continuing reproduces an
    /// uninterrupted run.
    pub fn resume(dir: &Path, windows: Vec<TrainWindow>) -> Result<Self> {
        let (state, tensors) = checkpoint::read(dir)?;
        let mut trainer = Trainer::new(&state.config, windows)?;
        let weights: HashMap<String, Tensor> = tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("adam.") && !k.starts_with("ema."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        trainer.model.vars().assign(&weights)?;
        trainer.adam.restore(&tensors, state.step)?;
        if let Some(ema) = trainer.ema.as_mut() {
            for (k, v) in ema.iter_mut() {
                *v = tensors
                    .get(&format!("ema.{k}"))
                    .ok_or_else(|| Error::Incompatible(format!("moving average of `{k}` missing")))?
                    .clone();
            }
        }
        let seed: [u8; 32] = hex::decode(&state.rng_seed)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| Error::Incompatible("malformed generator seed".into()))?;
        let pos: u128 = state
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Incompatible("malformed generator position".into()))?;
        trainer.rng = ChaCha8Rng::from_seed(seed);
        trainer.rng.set_word_pos(pos);
        trainer.step = state.step;
        Ok(trainer)
    }
}

/// Mean of the first and of the last `window` losses.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    if window == 0 || losses.len() < window {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..window]), mean(&losses[losses.len() - window..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PhantomParams;
    use crate::harness::config::Variant;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::overfit().with_variant(Variant::D);
        cfg.data.phantom = PhantomParams {
            depth: 10,
            height: 32,
            width: 32,
            ..PhantomParams::desk()
        };
        cfg.model.encoder.attention.pool = 2;
        cfg.diffusion.steps = 50;
        cfg
    }

    fn windows(cfg: &ExperimentConfig) -> Vec<TrainWindow> {
        prepare_windows(&load_cohort(cfg).unwrap(), cfg.optim.batch, &cfg.loss).unwrap()
    }

    #[test]
    fn padded_slices_have_zero_weight() {
        let cfg = tiny();
        let w = windows(&cfg);
        assert_eq!(w.len(), 3);
        let per_slice = w[2].weights.sum((1, 2, 3)).unwrap().to_vec1::<f32>().unwrap();
        assert!(per_slice[0] > 0.0 && per_slice[1] > 0.0);
        assert_eq!(&per_slice[2..], &[0.0, 0.0]);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny();
        let mut a = Trainer::new(&cfg, windows(&cfg)).unwrap();
        let full = a.run(6, None, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut b = Trainer::new(&cfg, windows(&cfg)).unwrap();
        let mut first = b.run(3, None, None).unwrap();
        b.save_checkpoint(dir.path()).unwrap();
        drop(b);
        let mut c = Trainer::resume(dir.path(), windows(&cfg)).unwrap();
        first.extend(c.run(3, None, None).unwrap());
        assert_eq!(full, first);
    }

    #[test]
    fn loss_csv_and_uniform_weights() {
        let mut cfg = tiny().with_variant(Variant::C);
        cfg.optim.ema_decay = Some(0.9);
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("loss.csv");
        let mut t = Trainer::new(&cfg, windows(&cfg)).unwrap();
        let losses = t.run(2, Some(&csv), Some(dir.path())).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));
        t.save_checkpoint(&dir.path().join("ck")).unwrap();
        let r = Trainer::resume(&dir.path().join("ck"), windows(&cfg)).unwrap();
        assert_eq!(r.step_count(), 2);
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed_endpoints(&[4.0, 2.0, 1.0, 0.5], 2), Some((3.0, 0.75)));
        assert_eq!(smoothed_endpoints(&[1.0], 2), None);
    }
}
