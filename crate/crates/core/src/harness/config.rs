use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::data::PhantomParams;
use crate::diffusion::ReverseDenominator;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::nn::AdamConfig;
use crate::predictor::{Conditioning, PredictorConfig};
use crate::schedule::{SubsampleStrategy, DEFAULT_COSINE_OFFSET};

/// Environment variable that, when set, roots every relative output path.
pub const OUTPUT_ROOT_ENV: &str = "DIFFDOSE_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of volume bundles; phantoms are generated in memory when absent.
    pub dir: Option<PathBuf>,
    pub patients: usize,
    pub val_patients: usize,
    pub test_patients: usize,
    pub phantom_seed: u64,
    pub phantom: PhantomParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Off: structure channels are concatenated with the noisy dose.
    pub structure_encoder: bool,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    /// Integer `t` uniform in `[1, T]`.
    #[default]
    Discrete,
    /// `gamma` uniform between `gamma_t` and `gamma_{t-1}` for a uniform `t`.
    ContinuousGamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub cosine_offset: f64,
    pub inference_steps: usize,
    pub subsample: SubsampleStrategy,
    pub denominator: ReverseDenominator,
    /// Clip each step's `y_0` estimate to `[-1, 1]` while sampling.
    pub clip_denoised: bool,
    pub timestep_sampling: TimestepSampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub adam: AdamConfig,
    /// Contiguous slices per window.
    pub batch: usize,
    pub steps: usize,
    /// 0 disables periodic checkpoints; a final one is always written.
    pub checkpoint_every: usize,
    /// Decay of an exponential moving average of the weights; off when `None`.
    pub ema_decay: Option<f64>,
    pub lr_schedule: LrSchedule,
}

/// Learning-rate multiplier over the step budget.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from 1 at step 0 down to `final_factor` at the last step.
    Cosine { final_factor: f64 },
}

impl LrSchedule {
    /// Multiplier for the update that follows `step` completed steps.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { final_factor } => {
                let progress = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
                final_factor + (1.0 - final_factor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            patients: 8,
            val_patients: 1,
            test_patients: 2,
            phantom_seed: 0,
            phantom: PhantomParams::desk(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            structure_encoder: true,
            encoder: EncoderConfig::default(),
            predictor: PredictorConfig::default(),
        }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 1000,
            cosine_offset: DEFAULT_COSINE_OFFSET,
            inference_steps: 100,
            subsample: SubsampleStrategy::Linear,
            denominator: ReverseDenominator::SqrtOneMinusGamma,
            clip_denoised: true,
            timestep_sampling: TimestepSampling::Discrete,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            adam: AdamConfig::default(),
            batch: 16,
            steps: 20_000,
            checkpoint_every: 1000,
            ema_decay: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            output: PathBuf::from("runs/default"),
        }
    }
}

/// Ablation variants, each adding one component to the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Structure channels concatenated with the noisy dose, plain L1.
    A,
    /// Structure encoder feature fused into the predictor, no attention.
    B,
    /// Encoder with inter-slice attention.
    C,
    /// Region-weighted loss on top of C.
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];
}

impl ExperimentConfig {
    /// Small single-phantom profile for overfitting runs on a CPU.
    pub fn overfit() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.data.patients = 1;
        cfg.data.val_patients = 0;
        cfg.data.test_patients = 0;
        cfg.model.encoder = EncoderConfig {
            widths: [4, 8, 16, 32],
            feature_channels: 8,
            i2t_blocks_per_stage: 1,
            attention: AttentionConfig {
                heads: 2,
                pool: 4,
                positional_embedding: true,
            },
            max_groups: 4,
            ..EncoderConfig::default()
        };
        cfg.model.predictor = PredictorConfig {
            widths: [8, 16, 16, 32],
            cond_channels: 8,
            embedding_dim: 16,
            max_groups: 4,
            ..PredictorConfig::default()
        };
        cfg.optim.batch = 4;
        cfg.optim.steps = 2000;
        cfg.optim.checkpoint_every = 0;
        cfg.optim.adam.lr = 2e-3;
        cfg.optim.lr_schedule = LrSchedule::Cosine { final_factor: 0.05 };
        cfg.diffusion.inference_steps = 50;
        cfg
    }

    /// Applies an ablation variant to the model and loss settings.
    pub fn with_variant(mut self, v: Variant) -> Self {
        let m = &mut self.model;
        match v {
            Variant::A => {
                m.structure_encoder = false;
                m.predictor.conditioning = Conditioning::Concatenate;
                m.predictor.cond_channels = m.encoder.in_channels;
            }
            Variant::B | Variant::C | Variant::D => {
                m.structure_encoder = true;
                m.encoder.use_i2t = v != Variant::B;
                m.predictor.conditioning = Conditioning::FeatureFusion;
                m.predictor.cond_channels = m.encoder.feature_channels;
            }
        }
        self.loss = if v == Variant::D {
            LossWeights {
                normalization: self.loss.normalization,
                ..LossWeights::default()
            }
        } else {
            LossWeights {
                normalization: self.loss.normalization,
                ..LossWeights::uniform()
            }
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        let m = &self.model;
        let expected_cond = if m.structure_encoder {
            m.encoder.feature_channels
        } else {
            m.encoder.in_channels
        };
        match (m.structure_encoder, m.predictor.conditioning) {
            (true, Conditioning::Concatenate) | (false, Conditioning::FeatureFusion) => {
                return bad("structure_encoder on requires feature_fusion conditioning, off requires concatenate".into())
            }
            _ => {}
        }
        if m.predictor.cond_channels != expected_cond {
            return bad(format!(
                "predictor cond_channels {} does not match the conditioning source ({expected_cond})",
                m.predictor.cond_channels
            ));
        }
        if m.encoder.in_channels != 6 {
            return bad("structure images carry exactly 6 channels".into());
        }
        let d = &self.diffusion;
        if d.steps == 0 || d.inference_steps == 0 || d.inference_steps > d.steps {
            return bad(format!(
                "need 1 <= inference_steps ({}) <= steps ({})",
                d.inference_steps, d.steps
            ));
        }
        if self.optim.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.optim.adam.lr > 0.0) {
            return bad("learning rate must be positive".into());
        }
        if let LrSchedule::Cosine { final_factor } = self.optim.lr_schedule {
            if !(0.0..=1.0).contains(&final_factor) {
                return bad(format!("cosine final_factor {final_factor} outside [0, 1]"));
            }
        }
        if let Some(e) = self.optim.ema_decay {
            if !(0.0..1.0).contains(&e) {
                return bad(format!("ema_decay {e} outside [0, 1)"));
            }
        }
        if !(self.loss.target > 0.0 && self.loss.body > 0.0) {
            return bad("loss weights must be positive".into());
        }
        if self.data.dir.is_none() {
            self.data.phantom.validate()?;
            if self.data.val_patients + self.data.test_patients >= self.data.patients {
                return bad("data split leaves no training patients".into());
            }
            let p = &self.data.phantom;
            let s = if m.structure_encoder && m.encoder.use_i2t {
                8 * m.encoder.attention.pool
            } else {
                8
            };
            if p.height % s != 0 || p.width % s != 0 {
                return bad(format!("phantom slices {}x{} must be divisible by {s}", p.height, p.width));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Resolves an output path, rooting relative paths under
/// [`OUTPUT_ROOT_ENV`] when it is set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.optim.batch, 16);
        assert_eq!(c.optim.adam.lr, 1e-4);
        assert_eq!(c.diffusion.steps, 1000);
        assert_eq!(c.diffusion.inference_steps, 100);
        assert_eq!((c.loss.target, c.loss.body), (4.0, 2.0));
        c.validate().unwrap();
        ExperimentConfig::overfit().validate().unwrap();
    }

    #[test]
    fn variants_are_consistent() {
        for v in Variant::ALL {
            let c = ExperimentConfig::overfit().with_variant(v);
            c.validate().unwrap();
            assert_eq!(c.model.structure_encoder, v != Variant::A);
        }
        let a = ExperimentConfig::default().with_variant(Variant::A);
        assert_eq!(a.model.predictor.cond_channels, 6);
        assert_eq!(a.loss.target, 1.0);
        assert!(!ExperimentConfig::default().with_variant(Variant::B).model.encoder.use_i2t);
        assert_eq!(ExperimentConfig::default().with_variant(Variant::D).loss.target, 4.0);
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = ExperimentConfig::overfit().with_variant(Variant::C);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), c);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 3, "optim": {"batch": 8}}"#).unwrap();
        assert_eq!((partial.seed, partial.optim.batch, partial.optim.steps), (3, 8, 20_000));
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn rejects_inconsistent_models() {
        let mut c = ExperimentConfig::default();
        c.model.predictor.cond_channels = 5;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.model.structure_encoder = false;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.diffusion.inference_steps = 2000;
        assert!(c.validate().is_err());
    }

    #[test]
    fn cosine_learning_rate_endpoints() {
        let s = LrSchedule::Cosine { final_factor: 0.05 };
        assert_eq!(s.factor(0, 100), 1.0);
        assert!((s.factor(50, 100) - 0.525).abs() < 1e-12);
        assert!((s.factor(100, 100) - 0.05).abs() < 1e-12);
        assert_eq!(s.factor(500, 100), s.factor(100, 100));
        assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);
        let mut c = ExperimentConfig::default();
        c.optim.lr_schedule = LrSchedule::Cosine { final_factor: 1.5 };
        assert!(c.validate().is_err());
    }
}
