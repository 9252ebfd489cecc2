use rand::Rng;

use crate::gemm::{matmul, matmul_at, matmul_bt};
use crate::init::he_normal;
use crate::{Layer, Mode, Param, Tensor};

/// Fully connected layer on `[N, in]` inputs.
#[derive(Debug, Clone)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::new(he_normal(inputs, inputs * outputs, rng)),
            bias: Param::new(vec![0.0; outputs]),
            input: None,
        }
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Sets all weights to zero, so the layer starts out emitting its bias.
    pub fn zero_weights(&mut self) {
        self.weight.value.fill(0.0);
    }
}

impl Layer for Dense {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let n = x.batch();
        assert_eq!(x.len(), n * self.inputs, "dense input width mismatch");
        let mut out = Tensor::zeros(&[n, self.outputs]);
        for row in out.data_mut().chunks_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value);
        }
        // out (n×o) = x (n×i) · Wᵀ, W stored o×i
        matmul_bt(x.data(), &self.weight.value, out.data_mut(), n, self.inputs, self.outputs, 1.0);
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.input.take().expect("backward called without a training forward");
        let n = x.batch();
        for row in grad_out.data().chunks(self.outputs) {
            for (b, g) in self.bias.grad.iter_mut().zip(row) {
                *b += *g;
            }
        }
        // dW (o×i) += gᵀ (o×n) · x (n×i)
        matmul_at(grad_out.data(), x.data(), &mut self.weight.grad, self.outputs, n, self.inputs, 1.0);
        let mut dx = Tensor::zeros(x.shape());
        matmul(grad_out.data(), &self.weight.value, dx.data_mut(), n, self.outputs, self.inputs, 0.0);
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = Dense::new(4, 3, &mut rng);
        let x = Tensor::from_vec(&[2, 4], (0..8).map(|i| i as f32 * 0.1 - 0.3).collect()).unwrap();
        let proj = Tensor::from_vec(&[2, 3], vec![1., -2., 0.5, 0.3, 0.7, -1.]).unwrap();
        let loss = |d: &mut Dense, x: &Tensor| -> f64 {
            let y = d.forward(x, Mode::Eval);
            y.data().iter().zip(proj.data()).map(|(a, b)| (*a * *b) as f64).sum()
        };
        d.forward(&x, Mode::Train);
        let dx = d.backward(&proj);
        let h = 1e-2;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&mut d, &xp) - loss(&mut d, &xm)) / (2.0 * h as f64);
            assert!((fd - dx.data()[idx] as f64).abs() < 1e-3);
        }
        let g = d.weight.grad.clone();
        for idx in 0..g.len() {
            let orig = d.weight.value[idx];
            d.weight.value[idx] = orig + h;
            let lp = loss(&mut d, &x);
            d.weight.value[idx] = orig - h;
            let lm = loss(&mut d, &x);
            d.weight.value[idx] = orig;
            assert!(((lp - lm) / (2.0 * h as f64) - g[idx] as f64).abs() < 1e-3);
        }
    }
}
