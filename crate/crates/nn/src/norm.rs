use crate::{Layer, Mode, Param, Tensor};

/// Per-channel batch normalization over batch and spatial axes.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    channels: usize,
    gamma: Param,
    beta: Param,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
    /// Weight of the newest batch in the running statistics.
    momentum: f32,
    eps: f32,
    cache: Option<(Vec<f32>, Vec<f32>)>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-3,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        assert_eq!(x.channels(), self.channels, "batch-norm channel mismatch");
        let n = x.batch();
        let c = self.channels;
        let s = x.spatial_len();
        let m = (n * s) as f64;
        let mut out = Tensor::zeros(x.shape());
        match mode {
            Mode::Eval => {
                for ch in 0..c {
                    let inv = 1.0 / (self.running_var[ch] + self.eps).sqrt();
                    let (g, b, mu) = (self.gamma.value[ch], self.beta.value[ch], self.running_mean[ch]);
                    for i in 0..n {
                        let off = (i * c + ch) * s;
                        for (o, v) in out.data_mut()[off..off + s].iter_mut().zip(&x.data()[off..off + s]) {
                            *o = g * (v - mu) * inv + b;
                        }
                    }
                }
            }
            Mode::Train => {
                let mut xhat = vec![0.0f32; x.len()];
                let mut inv_std = vec![0.0f32; c];
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    let mut sq = 0.0f64;
                    for i in 0..n {
                        let off = (i * c + ch) * s;
                        for &v in &x.data()[off..off + s] {
                            sum += v as f64;
                            sq += (v as f64) * (v as f64);
                        }
                    }
                    let mean = sum / m;
                    let var = (sq / m - mean * mean).max(0.0);
                    let inv = 1.0 / (var + self.eps as f64).sqrt();
                    inv_std[ch] = inv as f32;
                    let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                    for i in 0..n {
                        let off = (i * c + ch) * s;
                        for k in off..off + s {
                            let xh = ((x.data()[k] as f64 - mean) * inv) as f32;
                            xhat[k] = xh;
                            out.data_mut()[k] = g * xh + b;
                        }
                    }
                    let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    let mo = self.momentum;
                    self.running_mean[ch] = (1.0 - mo) * self.running_mean[ch] + mo * mean as f32;
                    self.running_var[ch] = (1.0 - mo) * self.running_var[ch] + mo * unbiased as f32;
                }
                self.cache = Some((xhat, inv_std));
            }
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("backward called without a training forward");
        let n = grad_out.batch();
        let c = self.channels;
        let s = grad_out.spatial_len();
        let m = (n * s) as f64;
        let mut dx = Tensor::zeros(grad_out.shape());
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * s;
                for k in off..off + s {
                    let dy = grad_out.data()[k] as f64;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat[k] as f64;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat as f32;
            self.beta.grad[ch] += sum_dy as f32;
            let g = self.gamma.value[ch] as f64;
            let inv = inv_std[ch] as f64;
            for i in 0..n {
                let off = (i * c + ch) * s;
                for k in off..off + s {
                    let dy = grad_out.data()[k] as f64;
                    let v = g * inv / m * (m * dy - sum_dy - xhat[k] as f64 * sum_dy_xhat);
                    dx.data_mut()[k] = v as f32;
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        f(&mut self.gamma.value);
        f(&mut self.beta.value);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_output_is_standardized_per_channel() {
        let data: Vec<f32> = (0..24).map(|i| (i * i % 11) as f32).collect();
        let x = Tensor::from_vec(&[2, 3, 4], data).unwrap();
        let mut bn = BatchNorm::new(3);
        let y = bn.forward(&x, Mode::Train);
        for ch in 0..3 {
            let vals: Vec<f32> = (0..2)
                .flat_map(|i| y.data()[(i * 3 + ch) * 4..(i * 3 + ch + 1) * 4].to_vec())
                .collect();
            let mean: f32 = vals.iter().sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-5);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data: Vec<f32> = (0..24).map(|i| ((i * 7 % 13) as f32 - 6.0) * 0.3).collect();
        let x = Tensor::from_vec(&[2, 2, 6], data).unwrap();
        let proj: Vec<f32> = (0..24).map(|i| ((i * 5 % 9) as f32 - 4.0) * 0.25).collect();
        let mut bn = BatchNorm::new(2);
        bn.gamma.value = vec![1.5, 0.7];
        let loss = |bn: &mut BatchNorm, x: &Tensor| -> f64 {
            let y = bn.forward(x, Mode::Train);
            bn.cache = None;
            y.data().iter().zip(&proj).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        bn.forward(&x, Mode::Train);
        let dx = bn.backward(&Tensor::from_vec(&[2, 2, 6], proj.clone()).unwrap());
        let h = 1e-3f32;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * h as f64);
            assert!((fd - dx.data()[idx] as f64).abs() < 2e-2 * (1.0 + fd.abs()), "dx[{idx}] fd={fd} an={}", dx.data()[idx]);
        }
    }
}
