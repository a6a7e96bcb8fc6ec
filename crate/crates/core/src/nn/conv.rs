//! Square-kernel 2-D convolution as an im2col + GEMM custom op.
//!
//! Candle's CPU convolution backward goes through a naive transposed
//! convolution; this op keeps forward and both gradients on the GEMM path.
//! Layout is NCHW for activations and `(C_out, C_in, K, K)` for weights.

use candle_core::{
    CpuStorage, CustomOp2, DType, Layout, Result, Shape, Tensor, WithDType,
};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c_in, h, w], &[c_out, c_in_w, k, k2]) = (x, wt) else {
            candle_core::bail!("conv2d expects 4-d input and weight, got {x:?} and {wt:?}")
        };
        if c_in != c_in_w || k != k2 {
            candle_core::bail!("conv2d weight {wt:?} incompatible with input {x:?}")
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            candle_core::bail!("conv2d kernel {k} larger than padded input {h}x{w}")
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Ok(Geometry {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` of a kernel tap whose input column stays inside the image.
    fn valid_span(&self, offset: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        // input index = o * stride + offset - pad
        let lo = if offset >= self.pad {
            0
        } else {
            (self.pad - offset).div_ceil(self.stride)
        };
        let limit = extent + self.pad;
        let hi = if limit <= offset {
            0
        } else {
            ((limit - offset - 1) / self.stride + 1).min(out_extent)
        };
        (lo.min(hi), hi)
    }
}

fn im2col<T: WithDType>(g: &Geometry, img: &[T], cols: &mut [T]) {
    let zero = T::from_f64(0.0);
    let ncols = g.cols();
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_span(ky, g.h, g.h_out);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_span(kx, g.w, g.w_out);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.h_out {
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        line.fill(zero);
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    line[..ox_lo].fill(zero);
                    line[ox_hi..].fill(zero);
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.pad;
                        line[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            line[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: WithDType>(g: &Geometry, cols: &[T], img: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_span(ky, g.h, g.h_out);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_span(kx, g.w, g.w_out);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let line = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for ox in ox_lo..ox_hi {
                        dst[ox * g.stride + kx - g.pad] += line[ox];
                    }
                }
            }
        }
    }
}

/// Row-major GEMM `dst (+)= op(a) * op(b)` with `m x k` and `k x n` operands.
#[allow(clippy::too_many_arguments)]
fn matmul<T: WithDType>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
) {
    // (row stride, column stride) of each logical operand
    let (a_rs, a_cs) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (b_rs, b_cs) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(dst.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the slices cover the strided extents asserted above.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            T::from_f64(1.0),
            T::from_f64(1.0),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("conv2d requires contiguous operands"),
    }
}

fn forward<T: WithDType>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (rows, ncols) = (g.rows(), g.cols());
    let mut out = vec![T::from_f64(0.0); g.n * g.c_out * ncols];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::from_f64(0.0); rows * ncols]
    };
    let in_stride = g.c_in * g.h * g.w;
    for b in 0..g.n {
        let img = &x[b * in_stride..(b + 1) * in_stride];
        let rhs: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        let dst = &mut out[b * g.c_out * ncols..(b + 1) * g.c_out * ncols];
        matmul(g.c_out, ncols, rows, dst, false, w, false, rhs, false);
    }
    out
}

/// Stride-1 input gradient as a forward convolution of the output gradient
/// with the transposed, spatially flipped kernel.
fn grad_input_unit_stride<T: WithDType>(g: &Geometry, grad: &[T], w: &[T]) -> Vec<T> {
    let k = g.k;
    let mut flipped = vec![T::from_f64(0.0); w.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let src = ((co * g.c_in + ci) * k + ky) * k + kx;
                    let dst = ((ci * g.c_out + co) * k + (k - 1 - ky)) * k + (k - 1 - kx);
                    flipped[dst] = w[src];
                }
            }
        }
    }
    let tg = Geometry {
        n: g.n,
        c_in: g.c_out,
        h: g.h_out,
        w: g.w_out,
        c_out: g.c_in,
        k,
        stride: 1,
        pad: k - 1 - g.pad,
        h_out: g.h,
        w_out: g.w,
    };
    forward(&tg, grad, &flipped)
}

fn grad_input<T: WithDType>(g: &Geometry, grad: &[T], w: &[T]) -> Vec<T> {
    if g.stride == 1 && g.pad < g.k && !g.is_pointwise() {
        return grad_input_unit_stride(g, grad, w);
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let in_stride = g.c_in * g.h * g.w;
    let mut out = vec![T::from_f64(0.0); g.n * in_stride];
    let mut cols = vec![T::from_f64(0.0); rows * ncols];
    for b in 0..g.n {
        let gb = &grad[b * g.c_out * ncols..(b + 1) * g.c_out * ncols];
        let dst = &mut out[b * in_stride..(b + 1) * in_stride];
        if g.is_pointwise() {
            matmul(rows, ncols, g.c_out, dst, false, w, true, gb, false);
        } else {
            matmul(rows, ncols, g.c_out, &mut cols, false, w, true, gb, false);
            col2im(g, &cols, dst);
        }
    }
    out
}

fn grad_weight<T: WithDType>(g: &Geometry, x: &[T], grad: &[T]) -> Vec<T> {
    let (rows, ncols) = (g.rows(), g.cols());
    let in_stride = g.c_in * g.h * g.w;
    let mut out = vec![T::from_f64(0.0); g.c_out * rows];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::from_f64(0.0); rows * ncols]
    };
    for b in 0..g.n {
        let img = &x[b * in_stride..(b + 1) * in_stride];
        let rhs: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        let gb = &grad[b * g.c_out * ncols..(b + 1) * g.c_out * ncols];
        matmul(g.c_out, rows, ncols, &mut out, b > 0, gb, false, rhs, true);
    }
    out
}

struct ConvForward {
    stride: usize,
    pad: usize,
}

struct ConvGradInput {
    stride: usize,
    pad: usize,
    input_dims: [usize; 4],
}

struct ConvGradWeight {
    stride: usize,
    pad: usize,
    kernel: usize,
    c_out: usize,
}

fn dispatch<F32, F64>(s1: &CpuStorage, s2: &CpuStorage, f32_fn: F32, f64_fn: F64) -> Result<CpuStorage>
where
    F32: FnOnce(&[f32], &[f32]) -> Result<Vec<f32>>,
    F64: FnOnce(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    match (s1, s2) {
        (CpuStorage::F32(a), CpuStorage::F32(b)) => Ok(CpuStorage::F32(f32_fn(a, b)?)),
        (CpuStorage::F64(a), CpuStorage::F64(b)) => Ok(CpuStorage::F64(f64_fn(a, b)?)),
        _ => candle_core::bail!("conv2d supports matching f32 or f64 operands only"),
    }
}

impl CustomOp2 for ConvForward {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let storage = dispatch(
            s1,
            s2,
            |x, w| Ok(forward(&g, contiguous(x, l1)?, contiguous(w, l2)?)),
            |x, w| Ok(forward(&g, contiguous(x, l1)?, contiguous(w, l2)?)),
        )?;
        Ok((storage, Shape::from((g.n, g.c_out, g.h_out, g.w_out))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dims = x.dims4()?;
        let gx = grad.apply_op2_no_bwd(
            w,
            &ConvGradInput {
                stride: self.stride,
                pad: self.pad,
                input_dims: [dims.0, dims.1, dims.2, dims.3],
            },
        )?;
        let (c_out, _, k, _) = w.dims4()?;
        let gw = x.apply_op2_no_bwd(
            &grad,
            &ConvGradWeight {
                stride: self.stride,
                pad: self.pad,
                kernel: k,
                c_out,
            },
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::new(&self.input_dims, l2.dims(), self.stride, self.pad)?;
        if l1.dims() != [g.n, g.c_out, g.h_out, g.w_out] {
            candle_core::bail!("conv2d gradient has shape {:?}", l1.dims())
        }
        let storage = dispatch(
            s1,
            s2,
            |gr, w| Ok(grad_input(&g, contiguous(gr, l1)?, contiguous(w, l2)?)),
            |gr, w| Ok(grad_input(&g, contiguous(gr, l1)?, contiguous(w, l2)?)),
        )?;
        Ok((storage, Shape::from(self.input_dims.to_vec())))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (_, c_in, _, _) = l1.shape().dims4()?;
        let wdims = [self.c_out, c_in, self.kernel, self.kernel];
        let g = Geometry::new(l1.dims(), &wdims, self.stride, self.pad)?;
        if l2.dims() != [g.n, g.c_out, g.h_out, g.w_out] {
            candle_core::bail!("conv2d gradient has shape {:?}", l2.dims())
        }
        let storage = dispatch(
            s1,
            s2,
            |x, gr| Ok(grad_weight(&g, contiguous(x, l1)?, contiguous(gr, l2)?)),
            |x, gr| Ok(grad_weight(&g, contiguous(x, l1)?, contiguous(gr, l2)?)),
        )?;
        Ok((storage, Shape::from(wdims.to_vec())))
    }
}

/// Differentiable 2-D convolution without bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if stride == 0 {
        candle_core::bail!("conv2d stride must be positive")
    }
    if x.dtype() != weight.dtype() || !matches!(x.dtype(), DType::F32 | DType::F64) {
        candle_core::bail!("conv2d needs f32/f64 operands of one dtype")
    }
    let x = x.contiguous()?;
    let weight = weight.contiguous()?;
    x.apply_op2(&weight, ConvForward { stride, pad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_candle_convolution() {
        for &(k, stride, pad, h, w) in &[(3, 1, 1, 7, 5), (3, 2, 1, 8, 8), (1, 1, 0, 4, 6), (3, 2, 1, 7, 9), (1, 2, 0, 6, 6)] {
            let x = rand_tensor(&[2, 3, h, w], 1);
            let wt = rand_tensor(&[4, 3, k, k], 2);
            let ours = conv2d(&x, &wt, stride, pad).unwrap();
            let reference = x.conv2d(&wt, pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs_diff(&ours, &reference) < 1e-12, "k{k} s{stride}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let x = Var::from_tensor(&rand_tensor(&[2, 3, 6, 7], 3)).unwrap();
            let wt = Var::from_tensor(&rand_tensor(&[5, 3, k, k], 4)).unwrap();
            let (ho, wo) = ((6 + 2 * pad - k) / stride + 1, (7 + 2 * pad - k) / stride + 1);
            let probe = rand_tensor(&[2, 5, ho, wo], 5);
            let loss = |x: &Tensor, w: &Tensor| {
                (conv2d(x, w, stride, pad).unwrap() * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
            };
            let out = (conv2d(x.as_tensor(), wt.as_tensor(), stride, pad).unwrap() * &probe).unwrap().sum_all().unwrap();
            let grads = out.backward().unwrap();
            for (var, is_input) in [(&x, true), (&wt, false)] {
                let analytic = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                for i in (0..base.len()).step_by(7) {
                    let bump = |delta: f64| {
                        let mut v = base.clone();
                        v[i] += delta;
                        let t = Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap();
                        if is_input { loss(&t, wt.as_tensor()) } else { loss(x.as_tensor(), &t) }
                    };
                    // the loss is linear in each operand, so central differences are exact up to rounding
                    let fd = (bump(1e-3) - bump(-1e-3)) / 2e-3;
                    assert!((fd - analytic[i]).abs() < 1e-8, "k{k} s{stride} input={is_input} i={i}: {fd} vs {}", analytic[i]);
                }
            }
        }
    }

    #[test]
    fn f32_path_runs() {
        let x = rand_tensor(&[1, 2, 5, 5], 6).to_dtype(DType::F32).unwrap();
        let wt = rand_tensor(&[3, 2, 3, 3], 7).to_dtype(DType::F32).unwrap();
        let out = conv2d(&x, &wt, 1, 1).unwrap();
        assert_eq!(out.dims(), &[1, 3, 5, 5]);
        assert!(conv2d(&x, &wt.to_dtype(DType::F64).unwrap(), 1, 1).is_err());
    }
}
