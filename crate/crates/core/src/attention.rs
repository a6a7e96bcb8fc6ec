//! Inter-slice attention: tokens are whole slices, so attention mixes the
//! `B` contiguous axial slices of a window rather than pixels within a slice.

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::sinusoidal_features;
use crate::nn::{avg_pool, conv2d, gelu, softmax_rows, Conv2d, GroupNorm, Init, ParamPath};

/// `B x C x H x W` features of contiguous slices, the first at `slice_offset`
/// within its volume.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub values: Tensor,
    pub slice_offset: usize,
}

impl FeatureStack {
    pub fn new(values: Tensor, slice_offset: usize) -> Result<Self> {
        values.dims4()?;
        Ok(FeatureStack {
            values,
            slice_offset,
        })
    }

    fn with_values(&self, values: Tensor) -> Self {
        FeatureStack {
            values,
            slice_offset: self.slice_offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub heads: usize,
    pub pool: usize,
    pub positional_embedding: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 4,
            pool: 4,
            positional_embedding: true,
        }
    }
}

impl AttentionConfig {
    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.pool == 0 {
            return Err(Error::invalid("attention needs at least one head and pool >= 1"));
        }
        Ok(())
    }
}

/// Per-channel sinusoid of the absolute slice index, added over `H x W`.
pub fn positional_embedding(batch: usize, channels: usize, slice_offset: usize) -> Vec<f64> {
    let positions: Vec<f64> = (0..batch).map(|b| (slice_offset + b) as f64).collect();
    sinusoidal_features(&positions, channels)
}

pub fn add_positional_embedding(stack: &FeatureStack) -> Result<FeatureStack> {
    let (b, c, _, _) = stack.values.dims4()?;
    let pe = positional_embedding(b, c, stack.slice_offset);
    let pe = Tensor::from_vec(pe, (b, c, 1, 1), stack.values.device())?.to_dtype(stack.values.dtype())?;
    Ok(stack.with_values(stack.values.broadcast_add(&pe)?))
}

/// Channel-mixing `C_out x C_in` matrix applied at every pixel.
fn channel_linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (c_out, c_in) = w.dims2()?;
    Ok(conv2d(x, &w.reshape((c_out, c_in, 1, 1))?, 1, 0)?)
}

/// Projection matrices of one attention head, each `C x C`.
#[derive(Debug, Clone)]
pub struct HeadProjections {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

impl HeadProjections {
    pub fn new(p: &ParamPath, channels: usize) -> Result<Self> {
        let bound = 1.0 / (channels as f64).sqrt();
        Ok(HeadProjections {
            query: p.var("query", &[channels, channels], Init::Uniform(bound))?,
            key: p.var("key", &[channels, channels], Init::Uniform(bound))?,
            value: p.var("value", &[channels, channels], Init::Uniform(bound))?,
        })
    }
}

/// Single-head inter-slice attention. Returns the attended stack and the
/// row-stochastic `B x B` attention matrix.
pub fn shia(stack: &FeatureStack, proj: &HeadProjections, pool: usize) -> Result<(FeatureStack, Tensor)> {
    let x = &stack.values;
    let (b, c, h, w) = x.dims4()?;
    if pool == 0 || h % pool != 0 || w % pool != 0 {
        return Err(Error::invalid(format!(
            "spatial size {h}x{w} not divisible by pool {pool}"
        )));
    }
    for m in [&proj.query, &proj.key, &proj.value] {
        if m.dims() != [c, c] {
            return Err(Error::ShapeMismatch {
                expected: vec![c, c],
                got: m.dims().to_vec(),
            });
        }
    }
    let pooled = avg_pool(x, pool)?;
    let token = c * (h / pool) * (w / pool);
    let q = channel_linear(&pooled, &proj.query)?.reshape((b, token))?;
    let k = channel_linear(&pooled, &proj.key)?.reshape((b, token))?;
    let v = channel_linear(x, &proj.value)?.reshape((b, c * h * w))?;
    let logits = (q.matmul(&k.t()?)? / (token as f64).sqrt())?;
    let attn = softmax_rows(&logits)?;
    let out = attn.matmul(&v)?.reshape((b, c, h, w))?;
    Ok((stack.with_values(out), attn))
}

/// Multi-head inter-slice attention: heads concatenated on channels and
/// projected back with `W_3` (`C x H*C`).
#[derive(Debug, Clone)]
pub struct Mhia {
    pub heads: Vec<HeadProjections>,
    pub merge: Tensor,
    pool: usize,
}

impl Mhia {
    pub fn new(p: &ParamPath, channels: usize, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let heads = (0..cfg.heads)
            .map(|h| HeadProjections::new(&p.pp(format!("head{h}")), channels))
            .collect::<Result<Vec<_>>>()?;
        let width = cfg.heads * channels;
        let merge = p.var("merge", &[channels, width], Init::Uniform(1.0 / (width as f64).sqrt()))?;
        Ok(Mhia {
            heads,
            merge,
            pool: cfg.pool,
        })
    }

    /// Output stack plus one attention matrix per head.
    pub fn forward_with_attention(&self, stack: &FeatureStack) -> Result<(FeatureStack, Vec<Tensor>)> {
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut maps = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (o, m) = shia(stack, head, self.pool)?;
            outs.push(o.values);
            maps.push(m);
        }
        let cat = Tensor::cat(&outs, 1)?;
        Ok((stack.with_values(channel_linear(&cat, &self.merge)?), maps))
    }

    pub fn forward(&self, stack: &FeatureStack) -> Result<FeatureStack> {
        Ok(self.forward_with_attention(stack)?.0)
    }
}

/// Inter-slice interaction transformer block:
///
/// ```text
/// t_inter = t_in + PE
/// t_temp  = LN(GeLU(MHIA(t_inter) W_1 + b_1) + t_inter)
/// t_out   = LN(GeLU(t_temp W_2 + b_2) + t_temp)
/// ```
#[derive(Debug, Clone)]
pub struct I2tBlock {
    mhia: Mhia,
    proj1: Conv2d,
    proj2: Conv2d,
    norm1: GroupNorm,
    norm2: GroupNorm,
    positional: bool,
}

impl I2tBlock {
    pub fn new(p: &ParamPath, channels: usize, cfg: &AttentionConfig) -> Result<Self> {
        Ok(I2tBlock {
            mhia: Mhia::new(&p.pp("mhia"), channels, cfg)?,
            proj1: Conv2d::new(&p.pp("proj1"), channels, channels, 1, 1, true)?,
            proj2: Conv2d::new(&p.pp("proj2"), channels, channels, 1, 1, true)?,
            norm1: GroupNorm::layer_norm(&p.pp("norm1"), channels)?,
            norm2: GroupNorm::layer_norm(&p.pp("norm2"), channels)?,
            positional: cfg.positional_embedding,
        })
    }

    pub fn mhia(&self) -> &Mhia {
        &self.mhia
    }

    pub fn forward_with_attention(&self, stack: &FeatureStack) -> Result<(FeatureStack, Vec<Tensor>)> {
        let inter = if self.positional {
            add_positional_embedding(stack)?
        } else {
            stack.clone()
        };
        let (attended, maps) = self.mhia.forward_with_attention(&inter)?;
        let a = gelu(&self.proj1.forward(&attended.values)?)?;
        let temp = self.norm1.forward(&(a + &inter.values)?)?;
        let b = gelu(&self.proj2.forward(&temp)?)?;
        let out = self.norm2.forward(&(b + &temp)?)?;
        Ok((stack.with_values(out), maps))
    }

    pub fn forward(&self, stack: &FeatureStack) -> Result<FeatureStack> {
        Ok(self.forward_with_attention(stack)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VarStore;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn positional_embedding_properties() {
        let x = random(&[3, 4, 2, 2], 1);
        let a = add_positional_embedding(&FeatureStack::new(x.clone(), 0).unwrap()).unwrap();
        let b = add_positional_embedding(&FeatureStack::new(x.clone(), 5).unwrap()).unwrap();
        assert!(max_abs(&(&a.values - &b.values).unwrap()) > 1e-3);
        let pe = positional_embedding(40, 16, 100);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(pe.len(), 40 * 16);
    }

    #[test]
    fn single_slice_attends_to_itself() {
        let vs = VarStore::new(DType::F64, 3);
        let proj = HeadProjections::new(&vs.root(), 4).unwrap();
        let x = random(&[1, 4, 8, 8], 2);
        let (out, attn) = shia(&FeatureStack::new(x.clone(), 0).unwrap(), &proj, 4).unwrap();
        assert_eq!(attn.to_vec2::<f64>().unwrap(), vec![vec![1.0]]);
        let v = channel_linear(&x, &proj.value).unwrap();
        assert!(max_abs(&(out.values - v).unwrap()) < 1e-12);
    }

    #[test]
    fn identical_slices_give_uniform_attention() {
        let vs = VarStore::new(DType::F64, 4);
        let proj = HeadProjections::new(&vs.root(), 2).unwrap();
        let one = random(&[1, 2, 4, 4], 9);
        let x = Tensor::cat(&[&one, &one, &one, &one, &one], 0).unwrap();
        let (_, attn) = shia(&FeatureStack::new(x, 0).unwrap(), &proj, 2).unwrap();
        for row in attn.to_vec2::<f64>().unwrap() {
            for v in row {
                assert!((v - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_indivisible_spatial_size() {
        let vs = VarStore::new(DType::F64, 4);
        let proj = HeadProjections::new(&vs.root(), 2).unwrap();
        let x = random(&[2, 2, 6, 6], 1);
        assert!(shia(&FeatureStack::new(x, 0).unwrap(), &proj, 4).is_err());
    }

    #[test]
    fn shapes_preserved_for_head_counts() {
        for heads in [1, 2, 4] {
            let vs = VarStore::new(DType::F64, heads as u64);
            let cfg = AttentionConfig { heads, pool: 2, positional_embedding: true };
            let block = I2tBlock::new(&vs.root(), 3, &cfg).unwrap();
            let x = random(&[4, 3, 4, 6], 5);
            let (out, maps) = block.forward_with_attention(&FeatureStack::new(x, 2).unwrap()).unwrap();
            assert_eq!(out.values.dims(), &[4, 3, 4, 6]);
            assert_eq!(maps.len(), heads);
        }
    }
}
