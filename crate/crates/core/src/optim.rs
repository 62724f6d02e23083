//! Adam with L2 weight decay folded into the gradient, with state that can
//! be exported for checkpoints.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::nets::NamedArray;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, config: AdamConfig) -> Result<Self> {
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        let steps = vec![0; vars.len()];
        Ok(Adam {
            config,
            vars,
            m,
            v,
            steps,
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Updates every variable that has a gradient in `grads`; variables
    /// without one keep both their value and their moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let c = self.config;
        for i in 0..self.vars.len() {
            let var = &self.vars[i];
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // detached so the moments do not keep every step's graph alive
            let g = g.detach();
            let w = var.as_tensor().detach();
            let g = if c.weight_decay != 0.0 { (g + (&w * c.weight_decay)?)? } else { g };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let m = ((&self.m[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let denom = ((v.sqrt()? / bc2.sqrt())? + c.eps)?;
            let update = ((&m / denom)? * (c.lr / bc1))?;
            var.set(&(w - update)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moments as named arrays (`m.<i>`, `v.<i>`) plus per-variable step counts.
    pub fn export(&self) -> Result<(Vec<NamedArray>, Vec<u64>)> {
        let mut out = Vec::with_capacity(2 * self.vars.len());
        for (prefix, list) in [("m", &self.m), ("v", &self.v)] {
            for (i, t) in list.iter().enumerate() {
                out.push(NamedArray {
                    name: format!("{prefix}.{i}"),
                    shape: t.dims().to_vec(),
                    data: t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?,
                });
            }
        }
        Ok((out, self.steps.clone()))
    }

    pub fn import(&mut self, arrays: &[NamedArray], steps: &[u64]) -> Result<()> {
        let n = self.vars.len();
        if arrays.len() != 2 * n || steps.len() != n {
            return Err(Error::Shape {
                expected: format!("{} moment tensors and {n} step counts", 2 * n),
                got: format!("{} and {}", arrays.len(), steps.len()),
            });
        }
        let dtype = self.vars.first().map(|v| v.dtype()).unwrap_or(candle_core::DType::F32);
        let load = |a: &NamedArray, like: &Var| -> Result<Tensor> {
            if a.shape != like.dims() {
                return Err(Error::Shape {
                    expected: format!("{:?}", like.dims()),
                    got: format!("{} {:?}", a.name, a.shape),
                });
            }
            Ok(Tensor::from_slice(&a.data, a.shape.as_slice(), like.device())?.to_dtype(dtype)?)
        };
        for i in 0..n {
            self.m[i] = load(&arrays[i], &self.vars[i])?;
            self.v[i] = load(&arrays[n + i], &self.vars[i])?;
        }
        self.steps = steps.to_vec();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    /// Reference Adam on scalars, written out longhand.
    fn reference(mut p: f64, grads: &[f64], c: AdamConfig) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for (k, &g0) in grads.iter().enumerate() {
            let g = g0 + c.weight_decay * p;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let t = (k + 1) as i32;
            let mhat = m / (1.0 - c.beta1.powi(t));
            let vhat = v / (1.0 - c.beta2.powi(t));
            p -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
        p
    }

    #[test]
    fn moments_do_not_retain_the_graph() {
        let x = Var::from_vec(vec![1.0f32, -2.0], 2, &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![x.clone()], AdamConfig::default()).unwrap();
        for _ in 0..3 {
            let loss = (x.as_tensor().sqr().unwrap() * 3.0).unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        assert!(opt.m.iter().chain(&opt.v).all(|t| !t.track_op()));
    }

    #[test]
    fn matches_scalar_reference_on_a_quadratic() {
        let c = AdamConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamConfig::default()
        };
        let x = Var::from_vec(vec![3.0f64], 1, &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![x.clone()], c).unwrap();
        let mut p = 3.0f64;
        let mut grads = Vec::new();
        for _ in 0..5 {
            // d/dp (p - 1)^2
            grads.push(2.0 * (p - 1.0));
            let loss = (x.as_tensor() - 1.0).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
            p = x.as_tensor().to_vec1::<f64>().unwrap()[0];
        }
        let expect = reference(3.0, &grads, c);
        assert!((p - expect).abs() < 1e-12, "{p} vs {expect}");
    }

    #[test]
    fn variables_without_gradients_are_untouched() {
        let a = Var::from_vec(vec![1.0f32], 1, &Device::Cpu).unwrap();
        let b = Var::from_vec(vec![1.0f32], 1, &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![a.clone(), b.clone()], AdamConfig { weight_decay: 0.1, ..Default::default() }).unwrap();
        let loss = a.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        assert_eq!(b.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0]);
        assert_ne!(a.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0]);
        assert_eq!(opt.export().unwrap().1, vec![1, 0]);
    }

    #[test]
    fn state_round_trip_gives_identical_continuation() {
        let run = |restore: bool| {
            let x = Var::from_vec(vec![0.5f32, -2.0], 2, &Device::Cpu).unwrap();
            let mut opt = Adam::new(vec![x.clone()], AdamConfig::default()).unwrap();
            let loss = || x.as_tensor().sqr().unwrap().sum_all().unwrap();
            for _ in 0..3 {
                opt.step(&loss().backward().unwrap()).unwrap();
            }
            if restore {
                let (arrays, steps) = opt.export().unwrap();
                let x2 = Var::from_tensor(x.as_tensor()).unwrap();
                let mut fresh = Adam::new(vec![x2.clone()], AdamConfig::default()).unwrap();
                fresh.import(&arrays, &steps).unwrap();
                for _ in 0..3 {
                    let l = x2.as_tensor().sqr().unwrap().sum_all().unwrap();
                    fresh.step(&l.backward().unwrap()).unwrap();
                }
                x2.as_tensor().to_dtype(DType::F32).unwrap().to_vec1::<f32>().unwrap()
            } else {
                for _ in 0..3 {
                    opt.step(&loss().backward().unwrap()).unwrap();
                }
                x.as_tensor().to_vec1::<f32>().unwrap()
            }
        };
        assert_eq!(run(false), run(true));
    }
}
