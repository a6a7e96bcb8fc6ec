//! Diffusion noise schedules.
//!
//! A schedule holds, for steps `t = 1..=T`, the per-step signal retention
//! `alpha_t` and the cumulative retention `gamma_t = alpha_1 * ... * alpha_t`.
//! Arrays are stored zero-based, so `gamma[t - 1]` is the value at step `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to every per-step `alpha_t`.
pub const MIN_ALPHA: f64 = 0.001;

/// Default offset of the cosine schedule.
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;

/// How inference steps are picked out of a longer training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleStrategy {
    /// Evenly spaced step indices over `[1, T]`.
    #[default]
    Linear,
    /// Indices spaced as `T * (k / n)^2`, denser near `t = 1`.
    Quadratic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    /// Step index in the originating schedule for every entry (1-based).
    source_steps: Vec<usize>,
}

fn cosine_curve(t: f64, steps: f64, offset: f64) -> f64 {
    let angle = ((t / steps + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
    angle.cos().powi(2)
}

/// Builds the cosine schedule with `steps` steps and offset `offset`.
///
/// `gamma_t` follows `f(t) / f(0)` with `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`;
/// each ratio `alpha_t = gamma_t / gamma_{t-1}` is floored at [`MIN_ALPHA`] and the
/// cumulative products are then recomputed from the clamped ratios.
pub fn make_cosine_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(offset > 0.0) || !offset.is_finite() {
        return Err(Error::invalid(format!(
            "cosine offset must be positive, got {offset}"
        )));
    }
    let total = steps as f64;
    let f0 = cosine_curve(0.0, total, offset);
    let mut alpha = Vec::with_capacity(steps);
    let mut prev = 1.0;
    for t in 1..=steps {
        let g = cosine_curve(t as f64, total, offset) / f0;
        alpha.push((g / prev).clamp(MIN_ALPHA, 1.0));
        prev = g;
    }
    // a zero-width step would break strict monotonicity
    if alpha.iter().any(|&a| a >= 1.0) {
        return Err(Error::invalid(
            "cosine schedule produced a step with alpha >= 1",
        ));
    }
    Ok(NoiseSchedule::from_alphas(alpha))
}

impl NoiseSchedule {
    fn from_alphas(alpha: Vec<f64>) -> Self {
        let mut gamma = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            gamma.push(acc);
        }
        let source_steps = (1..=alpha.len()).collect();
        NoiseSchedule {
            alpha,
            gamma,
            source_steps,
        }
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    /// `alpha_t` for a 1-based step.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `gamma_t` for a 1-based step.
    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    /// Step indices of the schedule this one was derived from.
    pub fn source_steps(&self) -> &[usize] {
        &self.source_steps
    }

    /// Checks every structural invariant of the schedule.
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.alpha.len() != self.gamma.len() {
            return Err(Error::invalid("alpha and gamma must be non-empty and equal length"));
        }
        let mut acc = 1.0;
        let mut prev = f64::INFINITY;
        for (&a, &g) in self.alpha.iter().zip(&self.gamma) {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::invalid(format!("alpha {a} outside (0, 1)")));
            }
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::invalid(format!("gamma {g} outside (0, 1]")));
            }
            if g >= prev {
                return Err(Error::invalid("gamma is not strictly decreasing"));
            }
            acc *= a;
            if ((g - acc) / acc).abs() > 1e-10 {
                return Err(Error::invalid(format!(
                    "gamma {g} differs from cumulative alpha product {acc}"
                )));
            }
            prev = g;
        }
        Ok(())
    }
}

fn subsample_indices(total: usize, n: usize, strategy: SubsampleStrategy) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(n);
    for k in 1..=n {
        let idx = match strategy {
            SubsampleStrategy::Linear => (k * total + n / 2) / n,
            SubsampleStrategy::Quadratic => {
                let frac = k as f64 / n as f64;
                (frac * frac * total as f64).ceil() as usize
            }
        };
        let floor = out.last().map_or(1, |&p| p + 1);
        out.push(idx.clamp(floor, total));
    }
    // quadratic spacing can pile up at the top; spread the tail back down
    let mut ceiling = total;
    for slot in out.iter_mut().rev() {
        if *slot > ceiling {
            *slot = ceiling;
        }
        ceiling = slot.saturating_sub(1);
    }
    out
}

/// Keeps `n_steps` of the schedule's `gamma` values and recomputes
/// `alpha'_k = gamma'_k / gamma'_{k-1}` (with `gamma'_0 = 1`).
pub fn subsample_schedule(
    sched: &NoiseSchedule,
    n_steps: usize,
    strategy: SubsampleStrategy,
) -> Result<NoiseSchedule> {
    let total = sched.len();
    if n_steps < 1 || n_steps > total {
        return Err(Error::invalid(format!(
            "n_steps must lie in [1, {total}], got {n_steps}"
        )));
    }
    let idx = subsample_indices(total, n_steps, strategy);
    let gamma: Vec<f64> = idx.iter().map(|&t| sched.gamma(t)).collect();
    let mut alpha = Vec::with_capacity(n_steps);
    let mut prev = 1.0;
    for &g in &gamma {
        alpha.push(g / prev);
        prev = g;
    }
    let source_steps = idx.iter().map(|&t| sched.source_steps[t - 1]).collect();
    Ok(NoiseSchedule {
        alpha,
        gamma,
        source_steps,
    })
}
