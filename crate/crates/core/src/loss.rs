//! Region-weighted L1 noise-matching objective.

use candle_core::Tensor;
use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight on PTV and organ-at-risk pixels.
    pub target: f64,
    /// Weight on the rest of the body.
    pub body: f64,
    pub normalization: LossNormalization,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            target: 4.0,
            body: 2.0,
            normalization: LossNormalization::WeightSum,
        }
    }
}

impl LossWeights {
    pub fn uniform() -> Self {
        LossWeights {
            target: 1.0,
            body: 1.0,
            normalization: LossNormalization::WeightSum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Divide the weighted sum by the total weight.
    #[default]
    WeightSum,
    /// Weighted sum per sample, averaged over the batch.
    RawSum,
}

/// Per-pixel loss weights: `target` on PTV and OARs, `body` elsewhere inside
/// the body, 1 outside.
pub type WeightMap = Array2<f32>;

pub fn build_weight_map(
    ptv: ArrayView2<'_, u8>,
    oars: &[ArrayView2<'_, u8>],
    body: ArrayView2<'_, u8>,
    weights: &LossWeights,
) -> Result<WeightMap> {
    let dim = ptv.dim();
    for d in oars.iter().map(|m| m.dim()).chain(std::iter::once(body.dim())) {
        ensure_shape(&[dim.0, dim.1], &[d.0, d.1])?;
    }
    if !(weights.target >= weights.body && weights.body >= 1.0) {
        log::warn!(
            "loss weights out of the usual order target >= body >= 1: {} / {}",
            weights.target,
            weights.body
        );
    }
    let mut roi = ptv.mapv(|v| v != 0);
    for oar in oars {
        Zip::from(&mut roi).and(oar).for_each(|r, &o| *r |= o != 0);
    }
    let mut out = Array2::<f32>::ones(dim);
    Zip::from(&mut out).and(&roi).and(&body).for_each(|w, &r, &b| {
        *w = if r {
            weights.target as f32
        } else if b != 0 {
            weights.body as f32
        } else {
            1.0
        };
    });
    Ok(out)
}

/// Weighted L1 between predicted and true noise.
///
/// `weights` broadcasts against the noise tensors (`B x 1 x H x W`). The
/// subgradient at a zero residual is zero.
pub fn awloss(eps_pred: &Tensor, eps_true: &Tensor, weights: &Tensor, norm: LossNormalization) -> Result<Tensor> {
    ensure_shape(eps_true.dims(), eps_pred.dims())?;
    ensure_shape(eps_true.dims(), weights.dims())?;
    let diff = (eps_pred - eps_true)?;
    let sign = (diff.gt(0.0)?.to_dtype(diff.dtype())? - diff.lt(0.0)?.to_dtype(diff.dtype())?)?.detach();
    let weighted = ((diff * sign)? * weights)?;
    match norm {
        LossNormalization::WeightSum => {
            let total = weights.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if total <= 0.0 {
                return Err(Error::invalid("loss weights sum to zero"));
            }
            Ok((weighted.sum_all()? / total)?)
        }
        LossNormalization::RawSum => {
            let b = weights.dims().first().copied().unwrap_or(1).max(1);
            Ok((weighted.sum_all()? / b as f64)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use ndarray::array;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn scalar(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn weight_map_regions() {
        let ptv = array![[1u8, 0, 0], [0, 0, 0]];
        let oar = array![[0u8, 1, 0], [0, 0, 0]];
        let body = array![[1u8, 1, 1], [1, 0, 0]];
        let w = build_weight_map(ptv.view(), &[oar.view()], body.view(), &LossWeights::default()).unwrap();
        assert_eq!(w, array![[4.0f32, 4.0, 2.0], [2.0, 1.0, 1.0]]);
        let u = build_weight_map(ptv.view(), &[oar.view()], body.view(), &LossWeights::uniform()).unwrap();
        assert!(u.iter().all(|&v| v == 1.0));
        let small = array![[1u8]];
        assert!(build_weight_map(ptv.view(), &[small.view()], body.view(), &LossWeights::default()).is_err());
    }

    #[test]
    fn target_precedence_over_body_and_overlap() {
        // PTV and OAR overlap on a pixel outside the body mask: still one target weight
        let ptv = array![[1u8, 0]];
        let oar = array![[1u8, 0]];
        let body = array![[0u8, 0]];
        let w = build_weight_map(ptv.view(), &[oar.view(), oar.view()], body.view(), &LossWeights::default()).unwrap();
        assert_eq!(w, array![[4.0f32, 1.0]]);
    }

    #[test]
    fn hand_computed_cases() {
        let w = t(&[4.0, 2.0, 1.0, 1.0], &[1, 1, 2, 2]);
        let zero = t(&[0.0; 4], &[1, 1, 2, 2]);
        let all_one = t(&[1.0, -1.0, 1.0, 1.0], &[1, 1, 2, 2]);
        assert_eq!(scalar(awloss(&all_one, &zero, &w, LossNormalization::WeightSum).unwrap()), 1.0);
        let corner = t(&[1.0, 0.0, 0.0, 0.0], &[1, 1, 2, 2]);
        assert_eq!(scalar(awloss(&corner, &zero, &w, LossNormalization::WeightSum).unwrap()), 0.5);
        assert_eq!(scalar(awloss(&corner, &zero, &w, LossNormalization::RawSum).unwrap()), 4.0);
        assert_eq!(scalar(awloss(&zero, &zero, &w, LossNormalization::WeightSum).unwrap()), 0.0);
        assert!(awloss(&corner, &t(&[0.0; 4], &[4]), &w, LossNormalization::WeightSum).is_err());
    }

    #[test]
    fn zero_residual_has_zero_subgradient() {
        let x = candle_core::Var::from_tensor(&t(&[0.5, 0.0], &[1, 1, 1, 2])).unwrap();
        let target = t(&[0.0, 0.0], &[1, 1, 1, 2]);
        let w = t(&[2.0, 2.0], &[1, 1, 1, 2]);
        let l = awloss(x.as_tensor(), &target, &w, LossNormalization::WeightSum).unwrap();
        let g = l.backward().unwrap().get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g, vec![0.5, 0.0]);
    }
}
