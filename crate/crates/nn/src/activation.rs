use crate::{Layer, Mode, Tensor};

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        if mode == Mode::Train {
            self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        }
        x.map(|v| v.max(0.0))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("backward called without a training forward");
        let mut dx = grad_out.clone();
        for (g, keep) in dx.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        dx
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    output: Option<Tensor>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Sigmoid {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = x.map(sigmoid);
        if mode == Mode::Train {
            self.output = Some(y.clone());
        }
        y
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let y = self.output.take().expect("backward called without a training forward");
        let mut dx = grad_out.clone();
        for (g, s) in dx.data_mut().iter_mut().zip(y.data()) {
            *g *= s * (1.0 - s);
        }
        dx
    }
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
