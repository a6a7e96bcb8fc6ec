use candle_core::{DType, Tensor};

use super::config::ModelConfig;
use crate::diffusion::{sample, DoseSlice, ReverseDenominator};
use crate::encoder::{StageAttention, StructureEncoder};
use crate::error::{Error, Result};
use crate::nn::VarStore;
use crate::predictor::NoiseUNet;
use crate::schedule::NoiseSchedule;

/// Structure encoder (optional) plus noise predictor sharing one parameter store.
pub struct DoseModel {
    vars: VarStore,
    encoder: Option<StructureEncoder>,
    unet: NoiseUNet,
}

impl DoseModel {
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        let vars = VarStore::new(dtype, seed);
        let root = vars.root();
        let encoder = if cfg.structure_encoder {
            Some(StructureEncoder::new(&root.pp("encoder"), &cfg.encoder)?)
        } else {
            None
        };
        let unet = NoiseUNet::new(&root.pp("predictor"), &cfg.predictor)?;
        Ok(DoseModel { vars, encoder, unet })
    }

    pub fn vars(&self) -> &VarStore {
        &self.vars
    }

    pub fn unet(&self) -> &NoiseUNet {
        &self.unet
    }

    pub fn encoder(&self) -> Option<&StructureEncoder> {
        self.encoder.as_ref()
    }

    /// Conditioning tensor for a window: the encoder feature, or the raw
    /// structure channels without an encoder.
    pub fn condition(&self, structure: &Tensor, slice_offset: usize) -> Result<Tensor> {
        let structure = structure.to_dtype(self.vars.dtype())?;
        match &self.encoder {
            Some(enc) => enc.forward(&structure, slice_offset),
            None => Ok(structure),
        }
    }

    pub fn attention_maps(&self, structure: &Tensor, slice_offset: usize) -> Result<StageAttention> {
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no structure encoder"))?;
        Ok(enc.forward_with_attention(&structure.to_dtype(self.vars.dtype())?, slice_offset)?.1)
    }

    /// Generates the normalized dose of one window.
    pub fn sample_window(
        &self,
        structure: &Tensor,
        slice_offset: usize,
        sched: &NoiseSchedule,
        seed: u64,
        denominator: ReverseDenominator,
        clip_denoised: bool,
    ) -> Result<DoseSlice> {
        let cond = self.condition(structure, slice_offset)?.detach();
        let (b, _, h, w) = cond.dims4()?;
        sample(&self.unet, &cond, &[b, 1, h, w], sched, seed, denominator, clip_denoised)
    }
}
