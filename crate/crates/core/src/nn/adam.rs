use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments; the moment tensors are exposed so
/// they can be checkpointed next to the weights.
pub struct Adam {
    cfg: AdamConfig,
    vars: Vec<(String, Var)>,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    step: usize,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, v) in &vars {
            first.insert(name.clone(), v.zeros_like()?);
            second.insert(name.clone(), v.zeros_like()?);
        }
        Ok(Adam {
            cfg,
            vars,
            first,
            second,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = &self.first[name];
            let v = &self.second[name];
            let m = ((m * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors keyed `adam.m.<name>` / `adam.v.<name>`.
    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, t) in &self.first {
            out.insert(format!("adam.m.{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("adam.v.{k}"), t.clone());
        }
        out
    }

    pub fn restore(&mut self, tensors: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for (name, var) in &self.vars {
            for (prefix, slot) in [("adam.m", &mut self.first), ("adam.v", &mut self.second)] {
                let key = format!("{prefix}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Incompatible(format!("optimizer state `{key}` missing")))?;
                if t.dims() != var.dims() {
                    return Err(Error::ShapeMismatch {
                        expected: var.dims().to_vec(),
                        got: t.dims().to_vec(),
                    });
                }
                slot.insert(name.clone(), t.to_dtype(var.dtype())?);
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        // bias-corrected first step is lr * sign(g)
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::from_tensor(&Tensor::new(&[3.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], AdamConfig { lr: 0.05, ..Default::default() }).unwrap();
        for _ in 0..500 {
            let loss = (x.as_tensor() - 1.0).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        assert!((x.as_tensor().to_vec1::<f64>().unwrap()[0] - 1.0).abs() < 1e-2);
    }
}
