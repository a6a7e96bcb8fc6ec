//! Forward noising and ancestral reverse sampling.
//!
//! All operations are elementwise, so a [`DoseSlice`] may hold a single
//! `H x W` map or a whole `B x 1 x H x W` window.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_shape, Error, Result};
use crate::schedule::NoiseSchedule;

/// A dose map at diffusion step `step`; `step == 0` is the clean map.
#[derive(Debug, Clone)]
pub struct DoseSlice {
    pub values: Tensor,
    pub step: usize,
}

/// Standard-normal noise, sampled or predicted.
#[derive(Debug, Clone)]
pub struct NoiseTensor(pub Tensor);

impl DoseSlice {
    pub fn clean(values: Tensor) -> Self {
        DoseSlice { values, step: 0 }
    }
}

/// Anything that predicts the per-step noise from a noisy dose map, its
/// conditioning tensor and the cumulative retention `gamma_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, y_t: &Tensor, cond: &Tensor, gamma_t: f64) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, &Tensor, f64) -> Result<Tensor>,
{
    fn predict_noise(&self, y_t: &Tensor, cond: &Tensor, gamma_t: f64) -> Result<Tensor> {
        self(y_t, cond, gamma_t)
    }
}

/// Denominator used for the noise coefficient in [`reverse_step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseDenominator {
    /// `(1 - alpha_t) / sqrt(1 - gamma_t)`, the form that inverts the forward process.
    #[default]
    SqrtOneMinusGamma,
    /// `(1 - alpha_t) / (1 - gamma_t)`, kept for compatibility experiments.
    OneMinusGamma,
}

/// Draws a standard-normal tensor from a seeded generator.
pub fn gaussian_like(shape: &[usize], dtype: DType, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// `y_t = sqrt(gamma_t) * y_0 + sqrt(1 - gamma_t) * eps`.
pub fn forward_sample(y0: &DoseSlice, gamma_t: f64, eps: &NoiseTensor) -> Result<Tensor> {
    if y0.step != 0 {
        return Err(Error::invalid("forward_sample expects a clean dose map"));
    }
    if !(gamma_t > 0.0 && gamma_t <= 1.0) {
        return Err(Error::invalid(format!("gamma_t {gamma_t} outside (0, 1]")));
    }
    ensure_shape(y0.values.dims(), eps.0.dims())?;
    let signal = (&y0.values * gamma_t.sqrt())?;
    Ok((signal + (&eps.0 * (1.0 - gamma_t).sqrt())?)?)
}

/// Inverts [`forward_sample`] given the noise: `(y_t - sqrt(1 - gamma_t) * eps) / sqrt(gamma_t)`.
pub fn analytic_denoise(y_t: &Tensor, eps: &NoiseTensor, gamma_t: f64) -> Result<Tensor> {
    if !(gamma_t > 0.0 && gamma_t <= 1.0) {
        return Err(Error::invalid(format!("gamma_t {gamma_t} outside (0, 1]")));
    }
    ensure_shape(y_t.dims(), eps.0.dims())?;
    let centered = (y_t - (&eps.0 * (1.0 - gamma_t).sqrt())?)?;
    Ok((centered / gamma_t.sqrt())?)
}

/// One ancestral step `y_t -> y_{t-1}`.
///
/// `y_{t-1} = (y_t - (1 - alpha_t) / sqrt(1 - gamma_t) * eps_pred) / sqrt(alpha_t) + sqrt(1 - alpha_t) * z`.
/// Pass `z = None` on the final step.
pub fn reverse_step(
    y_t: &Tensor,
    eps_pred: &NoiseTensor,
    alpha_t: f64,
    gamma_t: f64,
    z: Option<&NoiseTensor>,
    denominator: ReverseDenominator,
) -> Result<Tensor> {
    if !(alpha_t > 0.0 && alpha_t <= 1.0) {
        return Err(Error::invalid(format!("alpha_t {alpha_t} outside (0, 1]")));
    }
    if !(gamma_t > 0.0 && gamma_t < 1.0) {
        return Err(Error::invalid(format!(
            "gamma_t {gamma_t} must lie in (0, 1) for a reverse step"
        )));
    }
    ensure_shape(y_t.dims(), eps_pred.0.dims())?;
    let denom = match denominator {
        ReverseDenominator::SqrtOneMinusGamma => (1.0 - gamma_t).sqrt(),
        ReverseDenominator::OneMinusGamma => 1.0 - gamma_t,
    };
    let coeff = (1.0 - alpha_t) / denom;
    let mean = ((y_t - (&eps_pred.0 * coeff)?)? / alpha_t.sqrt())?;
    match z {
        Some(z) => {
            ensure_shape(y_t.dims(), z.0.dims())?;
            Ok((mean + (&z.0 * (1.0 - alpha_t).sqrt())?)?)
        }
        None => Ok(mean),
    }
}

/// Noise consistent with the `y_0` estimate of `eps_pred` clipped to `[-1, 1]`.
///
/// Early steps of a cosine schedule divide by a tiny `sqrt(alpha_t)`, so a
/// small error in the predicted noise would otherwise throw `y_t` far outside
/// the range seen in training. When the estimate is already in range the
/// noise is returned unchanged.
pub fn clip_noise_prediction(y_t: &Tensor, eps_pred: &NoiseTensor, gamma_t: f64) -> Result<NoiseTensor> {
    if !(gamma_t > 0.0 && gamma_t < 1.0) {
        return Err(Error::invalid(format!("gamma_t {gamma_t} must lie in (0, 1) to clip")));
    }
    let y0 = analytic_denoise(y_t, eps_pred, gamma_t)?.clamp(-1.0, 1.0)?;
    let centered = (y_t - (y0 * gamma_t.sqrt())?)?;
    Ok(NoiseTensor((centered / (1.0 - gamma_t).sqrt())?))
}

/// Runs the full reverse chain from `y_T ~ N(0, I)` to a clipped `y_0` estimate.
///
/// `shape` is the shape of the dose tensor to generate. With `clip_denoised`
/// every predicted noise goes through [`clip_noise_prediction`]. The result
/// depends only on the predictor, `cond`, the schedule and `seed`.
pub fn sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    cond: &Tensor,
    shape: &[usize],
    sched: &NoiseSchedule,
    seed: u64,
    denominator: ReverseDenominator,
    clip_denoised: bool,
) -> Result<DoseSlice> {
    sched.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dtype = cond.dtype();
    let mut y = gaussian_like(shape, dtype, &mut rng)?;
    for t in (1..=sched.len()).rev() {
        let gamma_t = sched.gamma(t);
        let eps = predictor.predict_noise(&y, cond, gamma_t)?;
        let mut eps = NoiseTensor(eps.detach());
        if clip_denoised {
            eps = clip_noise_prediction(&y, &eps, gamma_t)?;
        }
        let z = if t > 1 {
            Some(NoiseTensor(gaussian_like(shape, dtype, &mut rng)?))
        } else {
            None
        };
        y = reverse_step(&y, &eps, sched.alpha(t), gamma_t, z.as_ref(), denominator)?;
    }
    Ok(DoseSlice::clean(y.clamp(-1.0, 1.0)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_cosine_schedule;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn values(x: &Tensor) -> Vec<f64> {
        x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn forward_scalar_cases() {
        let y0 = DoseSlice::clean(t(&[0.0; 4], &[2, 2]));
        let eps = NoiseTensor(t(&[1.0; 4], &[2, 2]));
        for v in values(&forward_sample(&y0, 0.36, &eps).unwrap()) {
            assert!((v - 0.8).abs() < 1e-12);
        }
        let y0 = DoseSlice::clean(t(&[0.5], &[1]));
        let eps = NoiseTensor(t(&[1.0], &[1]));
        let v = values(&forward_sample(&y0, 0.25, &eps).unwrap())[0];
        assert!((v - (0.25 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((v - 1.1160).abs() < 1e-4);
    }

    #[test]
    fn forward_identity_at_gamma_one() {
        let y0 = DoseSlice::clean(t(&[0.3, -0.7], &[2]));
        let eps = NoiseTensor(t(&[5.0, -2.0], &[2]));
        assert_eq!(values(&forward_sample(&y0, 1.0, &eps).unwrap()), vec![0.3, -0.7]);
        assert_eq!(values(&analytic_denoise(&y0.values, &eps, 1.0).unwrap()), vec![0.3, -0.7]);
    }

    #[test]
    fn forward_contract_errors() {
        let y0 = DoseSlice::clean(t(&[0.0; 4], &[2, 2]));
        let bad = NoiseTensor(t(&[0.0; 4], &[4]));
        assert!(forward_sample(&y0, 0.5, &bad).is_err());
        let eps = NoiseTensor(t(&[0.0; 4], &[2, 2]));
        assert!(forward_sample(&y0, 0.0, &eps).is_err());
        assert!(forward_sample(&y0, 1.5, &eps).is_err());
        let noisy = DoseSlice { values: y0.values.clone(), step: 3 };
        assert!(forward_sample(&noisy, 0.5, &eps).is_err());
        assert!(analytic_denoise(&y0.values, &eps, 0.0).is_err());
    }

    #[test]
    fn reverse_step_without_noise_terms() {
        let y = t(&[0.4, -0.2, 1.0], &[3]);
        let zeros = NoiseTensor(t(&[0.0; 3], &[3]));
        let out = reverse_step(&y, &zeros, 0.81, 0.5, Some(&zeros), ReverseDenominator::default()).unwrap();
        for (o, i) in values(&out).iter().zip([0.4, -0.2, 1.0]) {
            assert!((o - i / 0.9).abs() < 1e-12);
        }
        let mismatched = NoiseTensor(t(&[0.0; 2], &[2]));
        assert!(reverse_step(&y, &mismatched, 0.81, 0.5, None, ReverseDenominator::default()).is_err());
        assert!(reverse_step(&y, &zeros, 0.81, 1.0, None, ReverseDenominator::default()).is_err());
    }

    #[test]
    fn literal_denominator_does_not_invert() {
        let sched = make_cosine_schedule(1, 0.008).unwrap();
        let g = sched.gamma(1);
        let y0 = DoseSlice::clean(t(&[0.5, -0.25], &[2]));
        let eps = NoiseTensor(t(&[1.3, -0.4], &[2]));
        let yt = forward_sample(&y0, g, &eps).unwrap();
        let exact = reverse_step(&yt, &eps, sched.alpha(1), g, None, ReverseDenominator::SqrtOneMinusGamma).unwrap();
        let literal = reverse_step(&yt, &eps, sched.alpha(1), g, None, ReverseDenominator::OneMinusGamma).unwrap();
        let err = |x: &Tensor| {
            values(x).iter().zip([0.5, -0.25]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        assert!(err(&exact) < 1e-9);
        assert!(err(&literal) > 1e-3);
    }

    #[test]
    fn clipping_keeps_in_range_estimates() {
        let y0 = DoseSlice::clean(t(&[0.5, -0.25, 1.0], &[3]));
        let eps = NoiseTensor(t(&[1.3, -0.4, 0.2], &[3]));
        let yt = forward_sample(&y0, 0.3, &eps).unwrap();
        let clipped = clip_noise_prediction(&yt, &eps, 0.3).unwrap();
        for (a, b) in values(&clipped.0).iter().zip(values(&eps.0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let sched = make_cosine_schedule(1000, 0.008).unwrap();
        let sub = crate::schedule::subsample_schedule(&sched, 50, crate::schedule::SubsampleStrategy::Linear).unwrap();
        let n = sub.len();
        let yt = t(&[0.7, -1.1], &[2]);
        // a predictor that is off by 0.05 from the noise-only answer
        let eps = NoiseTensor(((&yt / (1.0 - sub.gamma(n)).sqrt()).unwrap() + 0.05).unwrap());
        let step = |e: &NoiseTensor| {
            reverse_step(&yt, e, sub.alpha(n), sub.gamma(n), None, ReverseDenominator::SqrtOneMinusGamma).unwrap()
        };
        let raw = values(&step(&eps)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let clipped = clip_noise_prediction(&yt, &eps, sub.gamma(n)).unwrap();
        let bounded = values(&step(&clipped)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(raw > 5.0, "unclipped step should blow up, got {raw}");
        assert!(bounded < 2.0, "clipped step gave {bounded}");
    }
}
