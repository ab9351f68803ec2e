use crate::diffnet::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-4;

/// Adam with the usual bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Precondition(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// Applies one update to every trainable parameter from its accumulated
    /// gradient, then zeroes the gradients.
    pub fn step(&mut self, params: &mut ParamStore) {
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = params.trainable_ids().collect();
        for id in ids {
            let grad = params.grad(id).to_vec();
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            if m.len() != grad.len() {
                *m = vec![0.0; grad.len()];
                *v = vec![0.0; grad.len()];
            }
            let value = params.value_mut(id);
            for (i, g) in grad.iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                value.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        params.zero_grad();
    }
}

/// Halves the learning rate once the score has failed to improve on more
/// than `patience` consecutive observations, then starts counting again.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub best: f64,
    pub bad: usize,
}

impl Default for Plateau {
    fn default() -> Self {
        Plateau {
            patience: 3,
            factor: 0.5,
            best: f64::INFINITY,
            bad: 0,
        }
    }
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Plateau {
            patience,
            ..Plateau::default()
        }
    }

    /// Records a validation score (lower is better). Returns true when the
    /// learning rate was reduced.
    pub fn observe(&mut self, score: f64, opt: &mut Adam) -> bool {
        if score < self.best {
            self.best = score;
            self.bad = 0;
            return false;
        }
        self.bad += 1;
        if self.bad > self.patience {
            opt.lr *= self.factor;
            self.bad = 0;
            return true;
        }
        false
    }
}
