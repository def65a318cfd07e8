use crate::autodiff::{Grads, ParamSet};

/// Adam on a [`ParamSet`]; `step` descends the supplied gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Option<Grads>,
    v: Option<Grads>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: None,
            v: None,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        let m = self.m.get_or_insert_with(|| params.zero_grads());
        let v = self.v.get_or_insert_with(|| params.zero_grads());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (ti, tensor) in params.tensors.iter_mut().enumerate() {
            let (g, m, v) = (&grads.0[ti], &mut m.0[ti], &mut v.0[ti]);
            for i in 0..tensor.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                tensor.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
