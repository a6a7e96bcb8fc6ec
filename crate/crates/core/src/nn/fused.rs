//! Single-pass kernels with hand-written gradients for the layers that
//! dominate training time: group normalization, activations, per-channel
//! bias addition and nearest upsampling. Activations are NCHW, f32 or f64.

use candle_core::cpu::erf::erf;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor, WithDType};

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("fused op requires contiguous operands"),
    }
}

macro_rules! unary {
    ($s:expr, $l:expr, |$v:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(a) => {
                let $v = contiguous(a, $l)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(a) => {
                let $v = contiguous(a, $l)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("fused op supports f32 and f64 only"),
        }
    };
}

macro_rules! binary {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                let ($a, $b) = (contiguous(x, $l1)?, contiguous(y, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                let ($a, $b) = (contiguous(x, $l1)?, contiguous(y, $l2)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("fused op needs matching f32 or f64 operands"),
        }
    };
}

macro_rules! ternary {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $s3:expr, $l3:expr, |$a:ident, $b:ident, $c:ident| $body:expr) => {
        match ($s1, $s2, $s3) {
            (CpuStorage::F32(x), CpuStorage::F32(y), CpuStorage::F32(z)) => {
                let ($a, $b, $c) = (contiguous(x, $l1)?, contiguous(y, $l2)?, contiguous(z, $l3)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y), CpuStorage::F64(z)) => {
                let ($a, $b, $c) = (contiguous(x, $l1)?, contiguous(y, $l2)?, contiguous(z, $l3)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("fused op needs matching f32 or f64 operands"),
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Relu,
    Silu,
    Gelu,
}

impl Act {
    fn apply(self, x: f64) -> f64 {
        match self {
            Act::Relu => x.max(0.0),
            Act::Silu => x / (1.0 + (-x).exp()),
            Act::Gelu => 0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2)),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Act::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Act::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Act::Gelu => {
                let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
        }
    }
}

struct Activation(Act);
struct ActivationGrad(Act);

impl CustomOp1 for Activation {
    fn name(&self) -> &'static str {
        "fused-activation"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let act = self.0;
        let out = unary!(s, l, |x| x.iter().map(|&v| cast(act.apply(v.to_f64()))).collect());
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &ActivationGrad(self.0))?))
    }
}

fn cast<T: WithDType>(v: f64) -> T {
    T::from_f64(v)
}

impl CustomOp2 for ActivationGrad {
    fn name(&self) -> &'static str {
        "fused-activation-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let act = self.0;
        let out = binary!(s1, l1, s2, l2, |x, g| x
            .iter()
            .zip(g)
            .map(|(&v, &d)| cast(act.derivative(v.to_f64()) * d.to_f64()))
            .collect());
        Ok((out, l1.shape().clone()))
    }
}

fn activate(x: &Tensor, act: Act) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Activation(act))
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    activate(x, Act::Relu)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    activate(x, Act::Silu)
}

/// GELU with the exact Gaussian CDF.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    activate(x, Act::Gelu)
}

/// Adds `b` to every pixel: `b` is `(C)` (shared) or `(N, C)` (per sample).
struct ChannelAdd;
struct ChannelSum {
    per_sample: bool,
}

fn plane(l: &Layout) -> Result<(usize, usize, usize)> {
    let d = l.dims();
    if d.len() < 2 {
        candle_core::bail!("channel op needs at least 2 dims, got {d:?}")
    }
    Ok((d[0], d[1], d[2..].iter().product()))
}

impl CustomOp2 for ChannelAdd {
    fn name(&self) -> &'static str {
        "channel-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, c, hw) = plane(l1)?;
        let per_sample = match l2.dims() {
            [cc] if *cc == c => false,
            [nn, cc] if *nn == n && *cc == c => true,
            d => candle_core::bail!("channel bias of shape {d:?} for input {:?}", l1.dims()),
        };
        let out = binary!(s1, l1, s2, l2, |x, b| {
            let mut out = x.to_vec();
            for (i, chunk) in out.chunks_mut(hw).enumerate() {
                let bi = if per_sample { i } else { i % c };
                let v = b[bi];
                chunk.iter_mut().for_each(|o| *o += v);
            }
            out
        });
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let per_sample = b.rank() == 2;
        let gb = grad.contiguous()?.apply_op1_no_bwd(&ChannelSum { per_sample })?;
        Ok((Some(grad.clone()), Some(gb)))
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, c, hw) = plane(l)?;
        let per_sample = self.per_sample;
        let len = if per_sample { n * c } else { c };
        let out = unary!(s, l, |x| {
            let mut acc = vec![0f64; len];
            for (i, chunk) in x.chunks(hw).enumerate() {
                let k = if per_sample { i } else { i % c };
                acc[k] += chunk.iter().map(|v| v.to_f64()).sum::<f64>();
            }
            acc.into_iter().map(cast).collect()
        });
        let shape = if per_sample { Shape::from((n, c)) } else { Shape::from(c) };
        Ok((out, shape))
    }
}

pub fn channel_add(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&b.contiguous()?, ChannelAdd)
}

struct Upsample(usize);
struct BlockSum(usize);

impl CustomOp1 for Upsample {
    fn name(&self) -> &'static str {
        "upsample-nearest"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let f = self.0;
        let (ho, wo) = (h * f, w * f);
        let out = unary!(s, l, |x| {
            let mut out = Vec::with_capacity(n * c * ho * wo);
            for img in x.chunks(h * w) {
                for i in 0..ho {
                    let row = &img[(i / f) * w..(i / f + 1) * w];
                    for v in row {
                        out.extend(std::iter::repeat_n(*v, f));
                    }
                }
            }
            out
        });
        Ok((out, Shape::from((n, c, ho, wo))))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&BlockSum(self.0))?))
    }
}

impl CustomOp1 for BlockSum {
    fn name(&self) -> &'static str {
        "block-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, c, ho, wo) = l.shape().dims4()?;
        let f = self.0;
        let (h, w) = (ho / f, wo / f);
        let out = unary!(s, l, |g| {
            let mut acc = vec![0f64; n * c * h * w];
            for (img, dst) in g.chunks(ho * wo).zip(acc.chunks_mut(h * w)) {
                for i in 0..ho {
                    for j in 0..wo {
                        dst[(i / f) * w + j / f] += img[i * wo + j].to_f64();
                    }
                }
            }
            acc.into_iter().map(cast).collect()
        });
        Ok((out, Shape::from((n, c, h, w))))
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    x.dims4()?;
    x.contiguous()?.apply_op1(Upsample(factor))
}

struct GroupNormOp {
    groups: usize,
    eps: f64,
}

struct GroupNormGrad {
    groups: usize,
    eps: f64,
}

/// Mean and reciprocal standard deviation of one group.
fn moments<T: WithDType>(x: &[T], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn gn_forward<T: WithDType>(x: &[T], w: &[T], b: &[T], dims: (usize, usize, usize), groups: usize, eps: f64) -> Vec<T> {
    let (_, c, hw) = dims;
    let cg = c / groups;
    let mut out = vec![T::zero(); x.len()];
    for (gi, (src, dst)) in x.chunks(cg * hw).zip(out.chunks_mut(cg * hw)).enumerate() {
        let (mean, rstd) = moments(src, eps);
        let g = gi % groups;
        for k in 0..cg {
            let ch = g * cg + k;
            let (scale, shift) = (w[ch].to_f64() * rstd, b[ch].to_f64());
            for (o, v) in dst[k * hw..(k + 1) * hw].iter_mut().zip(&src[k * hw..(k + 1) * hw]) {
                *o = T::from_f64((v.to_f64() - mean) * scale + shift);
            }
        }
    }
    out
}

/// Packs `[dx, dweight, dbias]` into one buffer.
fn gn_backward<T: WithDType>(x: &[T], w: &[T], grad: &[T], dims: (usize, usize, usize), groups: usize, eps: f64) -> Vec<T> {
    let (_, c, hw) = dims;
    let cg = c / groups;
    let m = (cg * hw) as f64;
    let mut dx = vec![T::zero(); x.len() + 2 * c];
    let mut dw = vec![0f64; c];
    let mut db = vec![0f64; c];
    let block = cg * hw;
    for gi in 0..x.len() / block {
        let src = &x[gi * block..(gi + 1) * block];
        let gr = &grad[gi * block..(gi + 1) * block];
        let (mean, rstd) = moments(src, eps);
        let g = gi % groups;
        let (mut sum_gw, mut sum_gw_xhat) = (0.0, 0.0);
        for k in 0..cg {
            let ch = g * cg + k;
            let wc = w[ch].to_f64();
            let (mut s_g, mut s_gx) = (0.0, 0.0);
            for (v, d) in src[k * hw..(k + 1) * hw].iter().zip(&gr[k * hw..(k + 1) * hw]) {
                let xhat = (v.to_f64() - mean) * rstd;
                let d = d.to_f64();
                s_g += d;
                s_gx += d * xhat;
            }
            db[ch] += s_g;
            dw[ch] += s_gx;
            sum_gw += s_g * wc;
            sum_gw_xhat += s_gx * wc;
        }
        let (a, bcoef) = (sum_gw / m, sum_gw_xhat / m);
        for k in 0..cg {
            let wc = w[g * cg + k].to_f64();
            let range = gi * block + k * hw..gi * block + (k + 1) * hw;
            for ((o, v), d) in dx[range].iter_mut().zip(&src[k * hw..(k + 1) * hw]).zip(&gr[k * hw..(k + 1) * hw]) {
                let xhat = (v.to_f64() - mean) * rstd;
                *o = T::from_f64(rstd * (d.to_f64() * wc - a - xhat * bcoef));
            }
        }
    }
    let tail = x.len();
    for ch in 0..c {
        dx[tail + ch] = T::from_f64(dw[ch]);
        dx[tail + c + ch] = T::from_f64(db[ch]);
    }
    dx
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = plane(l1)?;
        if l2.dims() != [dims.1] || l3.dims() != [dims.1] || dims.1 % self.groups != 0 {
            candle_core::bail!("group norm parameters do not match {:?}", l1.dims())
        }
        let (groups, eps) = (self.groups, self.eps);
        let out = ternary!(s1, l1, s2, l2, s3, l3, |x, w, b| gn_forward(x, w, b, dims, groups, eps));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let packed = x.apply_op3_no_bwd(
            w,
            &grad.contiguous()?,
            &GroupNormGrad {
                groups: self.groups,
                eps: self.eps,
            },
        )?;
        let (n, c) = (x.elem_count(), w.elem_count());
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dw = packed.narrow(0, n, c)?;
        let db = packed.narrow(0, n + c, c)?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

impl CustomOp3 for GroupNormGrad {
    fn name(&self) -> &'static str {
        "group-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = plane(l1)?;
        let (groups, eps) = (self.groups, self.eps);
        let out = ternary!(s1, l1, s2, l2, s3, l3, |x, w, g| gn_backward(x, w, g, dims, groups, eps));
        let len = l1.shape().elem_count() + 2 * dims.1;
        Ok((out, Shape::from(len)))
    }
}

/// Group normalization with per-channel affine parameters.
pub fn group_norm(x: &Tensor, groups: usize, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, GroupNormOp { groups, eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};
    use rand::{Rng, SeedableRng};

    fn rand_var(shape: &[usize], seed: u64) -> Var {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Var::from_tensor(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    /// Compares value and gradients against the same function built from
    /// differentiable reference ops.
    fn check(vars: &[&Var], fused: impl Fn() -> Tensor, reference: impl Fn() -> Tensor) {
        let proj = rand_var(fused().dims(), 99);
        let a = fused();
        let b = reference();
        assert!(max_diff(&a, &b) < 1e-10);
        let ga = (a * proj.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (b * proj.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        for v in vars {
            let d = max_diff(ga.get(v).unwrap(), gb.get(v).unwrap());
            assert!(d < 1e-9, "gradient differs by {d}");
        }
    }

    #[test]
    fn activations_match_reference() {
        let x = rand_var(&[2, 3, 4, 5], 1);
        check(&[&x], || silu(x.as_tensor()).unwrap(), || x.as_tensor().silu().unwrap());
        check(&[&x], || relu(x.as_tensor()).unwrap(), || x.as_tensor().relu().unwrap());
        let y = gelu(x.as_tensor()).unwrap();
        assert!(max_diff(&y, &x.as_tensor().gelu_erf().unwrap()) < 1e-10);
        // derivative against central differences of the forward op
        let g = y.sum_all().unwrap().backward().unwrap();
        let analytic = g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-5;
        let plus = gelu(&(x.as_tensor() + h).unwrap()).unwrap();
        let minus = gelu(&(x.as_tensor() - h).unwrap()).unwrap();
        let numeric = ((plus - minus).unwrap() / (2.0 * h)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn channel_add_matches_broadcast() {
        let x = rand_var(&[2, 3, 4, 5], 2);
        let b = rand_var(&[3], 3);
        let bn = rand_var(&[2, 3], 4);
        check(&[&x, &b], || channel_add(x.as_tensor(), b.as_tensor()).unwrap(), || {
            x.as_tensor().broadcast_add(&b.as_tensor().reshape((1, 3, 1, 1)).unwrap()).unwrap()
        });
        check(&[&x, &bn], || channel_add(x.as_tensor(), bn.as_tensor()).unwrap(), || {
            x.as_tensor().broadcast_add(&bn.as_tensor().reshape((2, 3, 1, 1)).unwrap()).unwrap()
        });
        assert!(channel_add(x.as_tensor(), &Tensor::zeros(4, candle_core::DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn upsample_matches_broadcast() {
        let x = rand_var(&[2, 3, 4, 5], 5);
        check(&[&x], || upsample(x.as_tensor(), 3).unwrap(), || {
            x.as_tensor()
                .reshape((2, 3, 4, 1, 5, 1))
                .unwrap()
                .broadcast_as((2, 3, 4, 3, 5, 3))
                .unwrap()
                .contiguous()
                .unwrap()
                .reshape((2, 3, 12, 15))
                .unwrap()
        });
    }

    #[test]
    fn group_norm_matches_composition() {
        let x = rand_var(&[2, 6, 3, 4], 6);
        let w = rand_var(&[6], 7);
        let b = rand_var(&[6], 8);
        for groups in [1, 2, 3, 6] {
            check(&[&x, &w, &b], || group_norm(x.as_tensor(), groups, w.as_tensor(), b.as_tensor(), 1e-5).unwrap(), || {
                let g = x.as_tensor().reshape((2, groups, 6 / groups * 12)).unwrap();
                let mean = g.mean_keepdim(D::Minus1).unwrap();
                let centered = g.broadcast_sub(&mean).unwrap();
                let var = centered.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
                centered
                    .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
                    .unwrap()
                    .reshape((2, 6, 3, 4))
                    .unwrap()
                    .broadcast_mul(&w.as_tensor().reshape((1, 6, 1, 1)).unwrap())
                    .unwrap()
                    .broadcast_add(&b.as_tensor().reshape((1, 6, 1, 1)).unwrap())
                    .unwrap()
            });
        }
    }
}
