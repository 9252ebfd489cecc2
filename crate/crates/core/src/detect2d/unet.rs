use mipcad_nn::activation::Sigmoid;
use mipcad_nn::block::DoubleConv;
use mipcad_nn::conv::Conv;
use mipcad_nn::pool::{MaxPool, Upsample2x};
use mipcad_nn::{Layer, Mode, Param, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape of the encoder-decoder detector.
///
/// With the defaults there are four encoder levels (32, 64, 128, 256
/// filters), a 512-filter bottleneck and four decoder levels (256 down to
/// 32): eighteen 3×3 convolutions, each followed by batch normalization and
/// ReLU, plus a final 1×1 convolution and sigmoid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetSpec {
    /// Nominal square input side in pixels.
    pub input_size: usize,
    /// Filters of the first encoder level; doubles per level.
    pub base_width: usize,
    /// Number of pooling levels.
    pub levels: usize,
    pub kernel: usize,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self {
            input_size: 512,
            base_width: 32,
            levels: 4,
            kernel: 3,
        }
    }
}

impl UNetSpec {
    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.levels).map(|i| self.base_width << i).collect()
    }

    pub fn bottleneck_width(&self) -> usize {
        self.base_width << self.levels
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        (0..self.levels).rev().map(|i| self.base_width << i).collect()
    }

    /// 3×3 convolutions: two per encoder level, bottleneck and decoder level.
    pub fn conv3x3_count(&self) -> usize {
        4 * self.levels + 2
    }

    /// Spatial sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_width == 0 || self.kernel % 2 == 0 {
            return Err(Error::Parameter(format!("invalid U-Net spec {self:?}")));
        }
        if self.input_size % self.size_multiple() != 0 {
            return Err(Error::Parameter(format!(
                "input size {} is not a multiple of {}",
                self.input_size,
                self.size_multiple()
            )));
        }
        Ok(())
    }
}

/// Encoder-decoder network with skip concatenation.
#[derive(Debug, Clone)]
pub struct UNet {
    spec: UNetSpec,
    encoders: Vec<DoubleConv>,
    pools: Vec<MaxPool>,
    bottleneck: DoubleConv,
    ups: Vec<Upsample2x>,
    decoders: Vec<DoubleConv>,
    head: Conv,
    sigmoid: Sigmoid,
    skip_channels: Vec<usize>,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(spec: &UNetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel;
        let mut encoders = Vec::new();
        let mut cin = 1;
        for w in spec.encoder_widths() {
            encoders.push(DoubleConv::new(2, cin, w, k, rng));
            cin = w;
        }
        let bottleneck = DoubleConv::new(2, cin, spec.bottleneck_width(), k, rng);
        let mut decoders = Vec::new();
        let mut below = spec.bottleneck_width();
        for w in spec.decoder_widths() {
            // upsampled features concatenated with the matching encoder output
            decoders.push(DoubleConv::new(2, below + w, w, k, rng));
            below = w;
        }
        Ok(Self {
            spec: spec.clone(),
            pools: (0..spec.levels).map(|_| MaxPool::new()).collect(),
            ups: (0..spec.levels).map(|_| Upsample2x).collect(),
            encoders,
            bottleneck,
            decoders,
            head: Conv::new(2, below, 1, 1, rng),
            sigmoid: Sigmoid::new(),
            skip_channels: spec.encoder_widths(),
        })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    /// Every convolution in forward order.
    pub fn convolutions(&self) -> Vec<&Conv> {
        let mut out: Vec<&Conv> = Vec::new();
        for e in &self.encoders {
            out.extend(e.convs());
        }
        out.extend(self.bottleneck.convs());
        for d in &self.decoders {
            out.extend(d.convs());
        }
        out.push(&self.head);
        out
    }

    /// `(count of k×k convolutions with k > 1, count of 1×1 convolutions)`.
    pub fn conv_census(&self) -> (usize, usize) {
        let convs = self.convolutions();
        let pointwise = convs.iter().filter(|c| c.kernel() == 1).count();
        (convs.len() - pointwise, pointwise)
    }

    /// Maps `[N, 1, H, W]` images to `[N, 1, H, W]` probabilities. `H` and
    /// `W` must be multiples of [`UNetSpec::size_multiple`].
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let mut skips = Vec::with_capacity(self.spec.levels);
        let mut h = x.clone();
        for (enc, pool) in self.encoders.iter_mut().zip(&mut self.pools) {
            let y = enc.forward(&h, mode);
            h = pool.forward(&y, mode);
            skips.push(y);
        }
        h = self.bottleneck.forward(&h, mode);
        for ((up, dec), skip) in self.ups.iter_mut().zip(&mut self.decoders).zip(skips.iter().rev()) {
            let u = up.forward(&h, mode);
            let cat = Tensor::concat_channels(&u, skip).expect("skip shapes agree");
            h = dec.forward(&cat, mode);
        }
        let logits = self.head.forward(&h, mode);
        self.sigmoid.forward(&logits, mode)
    }

    /// Backpropagates the gradient of the loss with respect to the output
    /// probabilities.
    pub fn backward(&mut self, grad_prob: &Tensor) {
        let g = self.sigmoid.backward(grad_prob);
        let mut g = self.head.backward(&g);
        let levels = self.spec.levels;
        let mut skip_grads = vec![None; levels];
        for (i, (up, dec)) in self.ups.iter_mut().zip(&mut self.decoders).enumerate().rev() {
            let gcat = dec.backward(&g);
            let up_channels = gcat.channels() - self.skip_channels[levels - 1 - i];
            let (gu, gs) = gcat.split_channels(up_channels);
            skip_grads[levels - 1 - i] = Some(gs);
            g = up.backward(&gu);
        }
        g = self.bottleneck.backward(&g);
        for (i, (enc, pool)) in self.encoders.iter_mut().zip(&mut self.pools).enumerate().rev() {
            let mut gy = pool.backward(&g);
            gy.add_assign(skip_grads[i].as_ref().expect("decoder produced skip gradient"));
            g = enc.backward(&gy);
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for e in &mut self.encoders {
            e.visit_params(f);
        }
        self.bottleneck.visit_params(f);
        for d in &mut self.decoders {
            d.visit_params(f);
        }
        self.head.visit_params(f);
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        for e in &mut self.encoders {
            e.visit_state(f);
        }
        self.bottleneck.visit_state(f);
        for d in &mut self.decoders {
            d.visit_state(f);
        }
        self.head.visit_state(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_spec_has_eighteen_convolutions() {
        let spec = UNetSpec::default();
        assert_eq!(spec.encoder_widths(), vec![32, 64, 128, 256]);
        assert_eq!(spec.bottleneck_width(), 512);
        assert_eq!(spec.decoder_widths(), vec![256, 128, 64, 32]);
        assert_eq!(spec.conv3x3_count(), 18);
        let net = UNet::new(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(net.conv_census(), (18, 1));
        assert!(net.convolutions()[..18].iter().all(|c| c.kernel() == 3));
    }

    #[test]
    fn output_shape_matches_input() {
        let spec = UNetSpec {
            input_size: 32,
            base_width: 4,
            ..UNetSpec::default()
        };
        let mut net = UNet::new(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::filled(&[2, 1, 32, 48], 0.3);
        let y = net.forward(&x, Mode::Eval);
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_indivisible_input_size() {
        let spec = UNetSpec {
            input_size: 500,
            ..UNetSpec::default()
        };
        assert!(UNet::new(&spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let spec = UNetSpec {
            input_size: 16,
            base_width: 2,
            levels: 2,
            kernel: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = UNet::new(&spec, &mut rng).unwrap();
        let x = Tensor::from_vec(&[2, 1, 8, 8], (0..128).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let proj: Vec<f32> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Train-mode loss so batch statistics are part of the function.
        let loss = |net: &mut UNet, x: &Tensor| -> f64 {
            let y = net.forward(x, Mode::Train);
            y.data().iter().zip(&proj).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        // Measure parameter gradient of the first conv weight.
        net.forward(&x, Mode::Train);
        net.backward(&Tensor::from_vec(&[2, 1, 8, 8], proj.clone()).unwrap());
        let mut grads = Vec::new();
        net.visit_params(&mut |p| grads.push(p.grad.clone()));
        let h = 2e-3f32;
        let mut checked = 0;
        for idx in [0usize, 5, 13] {
            let mut orig = 0.0;
            let mut first = true;
            net.visit_params(&mut |p| {
                if first {
                    orig = p.value[idx];
                    p.value[idx] = orig + h;
                    first = false;
                }
            });
            let lp = loss(&mut net, &x);
            let mut first = true;
            net.visit_params(&mut |p| {
                if first {
                    p.value[idx] = orig - h;
                    first = false;
                }
            });
            let lm = loss(&mut net, &x);
            let mut first = true;
            net.visit_params(&mut |p| {
                if first {
                    p.value[idx] = orig;
                    first = false;
                }
            });
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = grads[0][idx] as f64;
            assert!((fd - an).abs() < 5e-2 * (1.0 + fd.abs()), "idx {idx}: fd {fd} analytic {an}");
            checked += 1;
        }
        assert_eq!(checked, 3);
    }
}
