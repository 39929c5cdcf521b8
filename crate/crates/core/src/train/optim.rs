use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::HostTensor;

/// Serializable optimizer moments, keyed `<slot>.<parameter>`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: String,
    pub step: u64,
    #[serde(skip)]
    pub tensors: BTreeMap<String, HostTensor>,
}

fn export(kind: &str, step: u64, slots: &[(&str, &BTreeMap<String, Tensor>)]) -> Result<OptimizerState> {
    let mut tensors = BTreeMap::new();
    for (slot, map) in slots {
        for (name, t) in map.iter() {
            tensors.insert(format!("{slot}.{name}"), HostTensor::from_tensor(t)?);
        }
    }
    Ok(OptimizerState { kind: kind.into(), step, tensors })
}

fn import(state: &OptimizerState, kind: &str, params: &[(String, Var)], slots: &[&str]) -> Result<Vec<BTreeMap<String, Tensor>>> {
    if state.kind != kind {
        return Err(Error::Checkpoint(vec![format!("optimizer state is `{}`, expected `{kind}`", state.kind)]));
    }
    let mut out = vec![BTreeMap::new(); slots.len()];
    let mut problems = Vec::new();
    for (i, slot) in slots.iter().enumerate() {
        for (name, var) in params {
            let key = format!("{slot}.{name}");
            match state.tensors.get(&key) {
                // parameters that never received a gradient have no moments
                None => {}
                Some(h) if h.shape.as_slice() != var.dims() => {
                    problems.push(format!("optimizer tensor `{key}` has shape {:?}, expected {:?}", h.shape, var.dims()))
                }
                Some(h) => {
                    out[i].insert(name.clone(), h.to_tensor(var.dtype(), var.device())?);
                }
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems));
    }
    Ok(out)
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug)]
pub struct Adam {
    params: Vec<(String, Var)>,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { params, lr, beta1, beta2, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // moments must not hold on to the autograd graph
            let g = g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn state(&self) -> Result<OptimizerState> {
        export("adam", self.step, &[("m", &self.m), ("v", &self.v)])
    }

    pub fn load_state(&mut self, state: &OptimizerState) -> Result<()> {
        let mut slots = import(state, "adam", &self.params, &["m", "v"])?;
        self.v = slots.pop().unwrap_or_default();
        self.m = slots.pop().unwrap_or_default();
        self.step = state.step;
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Debug)]
pub struct Sgd {
    params: Vec<(String, Var)>,
    pub lr: f64,
    momentum: f64,
    weight_decay: f64,
    step: u64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(params: Vec<(String, Var)>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { params, lr, momentum, weight_decay, step: 0, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let p = var.as_tensor().detach();
            let g = (g.detach() + (&p * self.weight_decay)?)?;
            let buf = match self.velocity.get(name) {
                Some(b) => ((b * self.momentum)? + g)?,
                None => g,
            };
            var.set(&(p - (&buf * self.lr)?)?)?;
            self.velocity.insert(name.clone(), buf);
        }
        Ok(())
    }

    pub fn state(&self) -> Result<OptimizerState> {
        export("sgd", self.step, &[("velocity", &self.velocity)])
    }

    pub fn load_state(&mut self, state: &OptimizerState) -> Result<()> {
        self.velocity = import(state, "sgd", &self.params, &["velocity"])?.pop().unwrap_or_default();
        self.step = state.step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn var(v: &[f64]) -> Var {
        Var::from_tensor(&Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap()).unwrap()
    }

    fn read(v: &Var) -> Vec<f64> {
        v.as_tensor().to_vec1().unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let w = var(&[1.0, -2.0]);
        let mut opt = Adam::new(vec![("w".into(), w.clone())], 0.1, 0.5, 0.999);
        let loss = (w.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        // bias-corrected first step is lr * sign(g)
        let got = read(&w);
        assert!((got[0] - 0.9).abs() < 1e-6 && (got[1] + 2.1).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let w = var(&[0.5]);
        let mut opt = Adam::new(vec![("w".into(), w.clone())], 0.01, 0.5, 0.999);
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
            let g = 2.0 * x;
            m = 0.5 * m + 0.5 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.5f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((read(&w)[0] - x).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let w = var(&[1.0]);
        let mut opt = Sgd::new(vec![("w".into(), w.clone())], 0.1, 0.9, 0.5);
        let (mut x, mut buf) = (1.0f64, 0.0f64);
        for _ in 0..3 {
            let loss = (w.as_tensor() * 2.0).unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
            buf = 0.9 * buf + (2.0 + 0.5 * x);
            x -= 0.1 * buf;
        }
        assert!((read(&w)[0] - x).abs() < 1e-12);
    }

    #[test]
    fn state_round_trip_resumes_identically() {
        let run = |split: bool| {
            // moments are stored as f32, like the parameters they belong to
            let w = Var::from_tensor(&Tensor::new(&[1.0f32, 2.0], &Device::Cpu).unwrap()).unwrap();
            let params = vec![("w".to_string(), w.clone())];
            let mut opt = Adam::new(params.clone(), 0.05, 0.5, 0.999);
            let step = |opt: &mut Adam| {
                let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
                opt.step(&loss.backward().unwrap()).unwrap();
            };
            step(&mut opt);
            if split {
                let state = opt.state().unwrap();
                opt = Adam::new(params, 0.05, 0.5, 0.999);
                opt.load_state(&state).unwrap();
            }
            step(&mut opt);
            w.as_tensor().to_vec1::<f32>().unwrap()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn rejects_foreign_state() {
        let w = var(&[1.0]);
        let sgd = Sgd::new(vec![("w".into(), w.clone())], 0.1, 0.9, 0.0);
        let mut adam = Adam::new(vec![("w".into(), w)], 0.1, 0.5, 0.999);
        assert!(adam.load_state(&sgd.state().unwrap()).is_err());
    }
}
