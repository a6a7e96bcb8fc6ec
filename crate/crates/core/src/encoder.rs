//! Structure encoder: residual backbone over `(2 + o)`-channel structure
//! images, inter-slice attention after every stage, and top-down multi-level
//! aggregation into a single `C0`-channel feature at input resolution.

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, FeatureStack, I2tBlock};
use crate::error::{Error, Result};
use crate::nn::{group_count, relu, upsample_nearest, Conv2d, GroupNorm, ParamPath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Structure channels: CT, PTV and one per organ at risk.
    pub in_channels: usize,
    /// Widths of the four residual stages.
    pub widths: [usize; 4],
    /// Channels of the output feature.
    pub feature_channels: usize,
    pub use_i2t: bool,
    pub i2t_blocks_per_stage: usize,
    pub attention: AttentionConfig,
    pub max_groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 6,
            widths: [32, 64, 128, 256],
            feature_channels: 64,
            use_i2t: true,
            i2t_blocks_per_stage: 2,
            attention: AttentionConfig::default(),
            max_groups: 8,
        }
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl BasicBlock {
    fn new(p: &ParamPath, c_in: usize, c_out: usize, stride: usize, max_groups: usize) -> Result<Self> {
        let groups = group_count(c_out, max_groups);
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(&p.pp("shortcut"), c_in, c_out, 1, stride, false)?,
                GroupNorm::new(&p.pp("shortcut_norm"), groups, c_out)?,
            ))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: Conv2d::new(&p.pp("conv1"), c_in, c_out, 3, stride, false)?,
            norm1: GroupNorm::new(&p.pp("norm1"), groups, c_out)?,
            conv2: Conv2d::new(&p.pp("conv2"), c_out, c_out, 3, 1, false)?,
            norm2: GroupNorm::new(&p.pp("norm2"), groups, c_out)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = relu(&self.norm1.forward(&self.conv1.forward(x)?)?)?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok(relu(&(h + skip)?)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: [BasicBlock; 2],
    i2t: Vec<I2tBlock>,
}

/// Attention maps collected during a forward pass, indexed
/// `[stage][block][head]`, each `B x B`.
pub type StageAttention = Vec<Vec<Vec<Tensor>>>;

#[derive(Debug, Clone)]
pub struct StructureEncoder {
    cfg: EncoderConfig,
    stem: Conv2d,
    stem_norm: GroupNorm,
    stages: Vec<Stage>,
    /// `lateral[i]` maps stage `i + 1` channels onto stage `i` channels.
    lateral: Vec<Conv2d>,
    level_proj: Vec<Conv2d>,
    fuse: Conv2d,
}

impl StructureEncoder {
    pub fn new(p: &ParamPath, cfg: &EncoderConfig) -> Result<Self> {
        if cfg.in_channels < 2 {
            return Err(Error::invalid("structure images need at least CT and PTV channels"));
        }
        let w = cfg.widths;
        let stem = Conv2d::new(&p.pp("stem"), cfg.in_channels, w[0], 3, 1, false)?;
        let stem_norm = GroupNorm::new(&p.pp("stem_norm"), group_count(w[0], cfg.max_groups), w[0])?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = w[0];
        for (i, &c) in w.iter().enumerate() {
            let sp = p.pp(format!("stage{}", i + 1));
            let stride = if i == 0 { 1 } else { 2 };
            let blocks = [
                BasicBlock::new(&sp.pp("block1"), c_in, c, stride, cfg.max_groups)?,
                BasicBlock::new(&sp.pp("block2"), c, c, 1, cfg.max_groups)?,
            ];
            let i2t = if cfg.use_i2t {
                (0..cfg.i2t_blocks_per_stage)
                    .map(|j| I2tBlock::new(&sp.pp(format!("i2t{}", j + 1)), c, &cfg.attention))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            stages.push(Stage { blocks, i2t });
            c_in = c;
        }
        let lateral = (0..3)
            .map(|i| Conv2d::new(&p.pp(format!("lateral{}", i + 1)), w[i + 1], w[i], 1, 1, true))
            .collect::<Result<Vec<_>>>()?;
        let level_proj = (0..4)
            .map(|i| Conv2d::new(&p.pp(format!("level{}", i + 1)), w[i], cfg.feature_channels, 1, 1, true))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv2d::new(&p.pp("fuse"), 4 * cfg.feature_channels, cfg.feature_channels, 3, 1, true)?;
        Ok(StructureEncoder {
            cfg: cfg.clone(),
            stem,
            stem_norm,
            stages,
            lateral,
            level_proj,
            fuse,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let &[_, c, h, w] = dims else {
            return Err(Error::invalid(format!("structure batch must be 4-d, got {dims:?}")));
        };
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cfg.in_channels],
                got: vec![c],
            });
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::invalid(format!("spatial size {h}x{w} must be divisible by 8")));
        }
        if self.cfg.use_i2t {
            let s = self.cfg.attention.pool;
            if (h / 8) % s != 0 || (w / 8) % s != 0 {
                return Err(Error::invalid(format!(
                    "spatial size {h}x{w} must be divisible by {} for attention pooling",
                    8 * s
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, slice_offset: usize) -> Result<Tensor> {
        Ok(self.forward_with_attention(x, slice_offset)?.0)
    }

    /// Encodes one window of contiguous slices and returns the attention maps as well.
    pub fn forward_with_attention(&self, x: &Tensor, slice_offset: usize) -> Result<(Tensor, StageAttention)> {
        self.check_input(x.dims())?;
        let (_, _, h0, w0) = x.dims4()?;
        let mut h = relu(&self.stem_norm.forward(&self.stem.forward(x)?)?)?;
        let mut levels = Vec::with_capacity(4);
        let mut attention = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in &stage.blocks {
                h = block.forward(&h)?;
            }
            let mut maps = Vec::with_capacity(stage.i2t.len());
            for blk in &stage.i2t {
                let (out, m) = blk.forward_with_attention(&FeatureStack::new(h, slice_offset)?)?;
                h = out.values;
                maps.push(m);
            }
            attention.push(maps);
            levels.push(h.clone());
        }
        // top-down: deeper levels are folded into shallower ones
        for i in (0..3).rev() {
            let deeper = upsample_nearest(&self.lateral[i].forward(&levels[i + 1])?, 2)?;
            levels[i] = (&levels[i] + deeper)?;
        }
        let mut resized = Vec::with_capacity(4);
        for (i, level) in levels.iter().enumerate() {
            let proj = self.level_proj[i].forward(level)?;
            let (_, _, lh, lw) = proj.dims4()?;
            debug_assert_eq!((lh << i, lw << i), (h0, w0));
            resized.push(upsample_nearest(&proj, 1 << i)?);
        }
        let cat = Tensor::cat(&resized, 1)?;
        Ok((self.fuse.forward(&cat)?, attention))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VarStore;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};

    fn toy(use_i2t: bool) -> EncoderConfig {
        EncoderConfig {
            in_channels: 6,
            widths: [4, 8, 8, 8],
            feature_channels: 8,
            use_i2t,
            i2t_blocks_per_stage: 2,
            attention: AttentionConfig { heads: 2, pool: 2, positional_embedding: true },
            max_groups: 4,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn output_shape_and_zero_input() {
        let vs = VarStore::new(DType::F32, 0);
        let enc = StructureEncoder::new(&vs.root(), &toy(true)).unwrap();
        let x = random(&[3, 6, 16, 16], 1);
        assert_eq!(enc.forward(&x, 0).unwrap().dims(), &[3, 8, 16, 16]);
        let zeros = Tensor::zeros((2, 6, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let out = enc.forward(&zeros, 0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_inputs() {
        let vs = VarStore::new(DType::F32, 0);
        let enc = StructureEncoder::new(&vs.root(), &toy(true)).unwrap();
        assert!(enc.forward(&random(&[2, 5, 16, 16], 1), 0).is_err());
        assert!(enc.forward(&random(&[2, 6, 12, 12], 1), 0).is_err());
        // divisible by 8 but the deepest level cannot be pooled by 2
        assert!(enc.forward(&random(&[2, 6, 8, 8], 1), 0).is_err());
    }

    #[test]
    fn without_attention_slices_are_independent() {
        let vs = VarStore::new(DType::F32, 0);
        let enc = StructureEncoder::new(&vs.root(), &toy(false)).unwrap();
        let a = random(&[1, 6, 16, 16], 2);
        let b = random(&[1, 6, 16, 16], 3);
        let x = Tensor::cat(&[&a, &b, &a], 0).unwrap();
        let out = enc.forward(&x, 0).unwrap();
        let d = (out.get(0).unwrap() - out.get(2).unwrap()).unwrap().abs().unwrap().max_keepdim(0).unwrap();
        assert_eq!(d.flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }
}
