use candle_core::{Module, Tensor, D};

use super::conv::conv2d;
use super::fused::{channel_add, group_norm, upsample};
use super::params::{Init, ParamPath};
use crate::error::{Error, Result};

/// Square-kernel convolution with optional bias, padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(p: &ParamPath, c_in: usize, c_out: usize, kernel: usize, stride: usize, bias: bool) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = p.var("weight", &[c_out, c_in, kernel, kernel], Init::Uniform(bound))?;
        let bias = if bias {
            Some(p.var("bias", &[c_out], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => channel_add(&y, b),
            None => Ok(y),
        }
    }
}

/// Dense layer on the last dimension, `x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &ParamPath, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Linear {
            weight: p.var("weight", &[d_out, d_in], Init::Uniform(bound))?,
            bias: p.var("bias", &[d_out], Init::Uniform(bound))?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Normalization over channel groups and space, per sample, with a
/// per-channel affine map. One group gives layer normalization over `(C, H, W)`.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(p: &ParamPath, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        Ok(GroupNorm {
            groups,
            weight: p.var("weight", &[channels], Init::Const(1.0))?,
            bias: p.var("bias", &[channels], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn layer_norm(p: &ParamPath, channels: usize) -> Result<Self> {
        Self::new(p, 1, channels)
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        group_norm(x, self.groups, &self.weight, &self.bias, self.eps)
    }
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Average pooling with a square `s x s` kernel and stride `s`.
pub fn avg_pool(x: &Tensor, s: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!(
            "spatial size {h}x{w} not divisible by pooling kernel {s}"
        )));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    let r = x.contiguous()?.reshape((n, c, h / s, s, w / s, s))?;
    Ok(r.mean(5)?.mean(3)?)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    Ok(upsample(x, factor)?)
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Sinusoidal features of `positions`, one row of width `dim` per position.
pub fn sinusoidal_features(positions: &[f64], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = p * freq;
            out.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn arange(n: usize, shape: &[usize]) -> Tensor {
        Tensor::arange(0f64, n as f64, &Device::Cpu).unwrap().reshape(shape).unwrap()
    }

    #[test]
    fn pool_and_upsample() {
        let x = arange(16, &[1, 1, 4, 4]);
        let p = avg_pool(&x, 2).unwrap();
        assert_eq!(p.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![2.5, 4.5, 10.5, 12.5]);
        assert!(avg_pool(&x, 3).is_err());
        let u = upsample_nearest(&arange(4, &[1, 1, 2, 2]), 2).unwrap();
        assert_eq!(
            u.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]
        );
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 1000.0, 1000.0]], &Device::Cpu).unwrap();
        let s = softmax_rows(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in &s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((s[1][0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn group_norm_normalizes() {
        let vs = crate::nn::VarStore::new(DType::F64, 0);
        let gn = GroupNorm::new(&vs.root(), 2, 4).unwrap();
        let x = (arange(64, &[2, 4, 2, 4]) * 0.37).unwrap().sin().unwrap();
        let y = gn.forward(&x).unwrap().reshape((2, 2, 16)).unwrap();
        let mean = y.mean(2).unwrap().abs().unwrap().max(0).unwrap().max(0).unwrap().to_scalar::<f64>().unwrap();
        assert!(mean < 1e-12);
        let var = y.sqr().unwrap().mean(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for v in var {
            assert!((v - 1.0).abs() < 1e-3);
        }
        assert!(GroupNorm::new(&vs.root().pp("bad"), 3, 4).is_err());
        assert_eq!(group_count(12, 8), 6);
        assert_eq!(group_count(7, 8), 7);
        assert_eq!(group_count(16, 8), 8);
    }
}
