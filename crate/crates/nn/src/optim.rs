//! Adam optimizer plus the plateau learning-rate schedule and early stopping
//! used by the training loops.

use crate::Param;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            t: 0,
        }
    }

    /// Advances the step counter; call once per batch before `update`.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Applies one bias-corrected Adam update and clears the gradient.
    pub fn update(&self, p: &mut Param) {
        let t = self.t.max(1);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..p.value.len() {
            let g = p.grad[i];
            p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
            p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
            let mh = p.m[i] / c1;
            let vh = p.v[i] / c2;
            p.value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            p.grad[i] = 0.0;
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// validation improvement, never going below `min_lr`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            lr: initial_lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records an epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// Stops after `patience` consecutive epochs without improvement and
/// remembers the best epoch (1-based).
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
            epoch: 0,
        }
    }

    /// Records an epoch's validation loss. Returns `(improved, stop)`.
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        self.epoch += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.wait = 0;
            (true, false)
        } else {
            self.wait += 1;
            (false, self.wait >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}
