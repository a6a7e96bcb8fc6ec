//! Checkpoint directories: `tensors.safetensors` holds the weights, the
//! optimizer moments (`adam.*`) and the optional moving average (`ema.*`);
//! `state.json` holds the configuration, step counter and generator state.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::model::DoseModel;
use crate::error::{Error, Result};

const TENSORS: &str = "tensors.safetensors";
const STATE: &str = "state.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub step: usize,
    /// Hex-encoded 32-byte generator seed.
    pub rng_seed: String,
    /// Generator word position, decimal (exceeds 64 bits).
    pub rng_word_pos: String,
}

pub fn write(dir: &Path, state: &TrainState, tensors: &HashMap<String, Tensor>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    candle_core::safetensors::save(tensors, dir.join(TENSORS))?;
    let path = dir.join(STATE);
    fs::write(&path, serde_json::to_string_pretty(state)?).map_err(|e| Error::io(&path, e))
}

pub fn read(dir: &Path) -> Result<(TrainState, HashMap<String, Tensor>)> {
    let path = dir.join(STATE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let state: TrainState = serde_json::from_str(&text)?;
    let tensors_path = dir.join(TENSORS);
    if !tensors_path.is_file() {
        return Err(Error::io(&tensors_path, std::io::ErrorKind::NotFound.into()));
    }
    let tensors = candle_core::safetensors::load(&tensors_path, &Device::Cpu)?;
    Ok((state, tensors))
}

/// Loads a model for inference, preferring the moving-average weights when
/// the checkpoint has them.
pub fn load_model(dir: &Path) -> Result<(ExperimentConfig, DoseModel)> {
    let (state, tensors) = read(dir)?;
    let model = DoseModel::new(&state.config.model, DType::F32, state.config.seed)?;
    let has_ema = tensors.keys().any(|k| k.starts_with("ema."));
    let weights: HashMap<String, Tensor> = tensors
        .into_iter()
        .filter_map(|(k, v)| match k.strip_prefix("ema.") {
            Some(name) if has_ema => Some((name.to_string(), v)),
            None if !has_ema && !k.starts_with("adam.") => Some((k, v)),
            _ => None,
        })
        .collect();
    model.vars().assign(&weights)?;
    Ok((state.config, model))
}
