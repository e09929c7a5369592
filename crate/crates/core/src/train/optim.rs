use crate::error::{Error, Result};
use crate::nn::ParamSet;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.value(id).len()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::shape("adam", &[self.m.len()], &[params.len()]));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = params.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if g.len() != m.len() {
                return Err(Error::shape("adam", &[g.len()], &[m.len()]));
            }
            let p = params.value_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Momentum SGD; weight decay is added to the gradient as `wd·p`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: params.ids().map(|id| vec![0.0; params.value(id).len()]).collect() }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if self.velocity.len() != params.len() {
            return Err(Error::shape("sgd", &[self.velocity.len()], &[params.len()]));
        }
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = params.grad(id).data().to_vec();
            let vel = &mut self.velocity[i];
            if g.len() != vel.len() {
                return Err(Error::shape("sgd", &[g.len()], &[vel.len()]));
            }
            let p = params.value_mut(id).data_mut();
            for j in 0..g.len() {
                let d = g[j] + self.weight_decay * p[j];
                vel[j] = self.momentum * vel[j] + d;
                p[j] -= lr * vel[j];
            }
        }
        Ok(())
    }
}
