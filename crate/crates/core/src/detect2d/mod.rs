//! Per-thickness 2-D nodule detectors: network, loss, initialization,
//! labels, augmentation, training and inference.

mod augment;
mod labels;
mod loss;
mod train;
mod unet;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment_2d, Augment2d, MAX_SHIFT};
pub use labels::rasterize_labels;
pub use loss::{dice_loss, dice_loss_eps, dice_with_grad, soft_dice, DICE_EPS};
pub use train::{predict_maps, train_detector, DetectorModel, EpochRecord, LabelledStack, TrainOutcome};
pub use unet::{UNet, UNetSpec};

use crate::{Error, Result};

/// Standard deviation `sqrt(2 / n_l)` for a layer with fan-in `n_l`.
pub fn he_std(n_l: usize) -> Result<f64> {
    mipcad_nn::init::he_std(n_l).map_err(|_| Error::Parameter(format!("fan-in must be ≥ 1, got {n_l}")))
}

/// Initialization of one layer `y_l = W_l x_l + b_l`.
///
/// `W_l` is `d × n_l` for `d` filters over `n_l = k² · c` inputs (kernel
/// side `k`, `c` input channels). Weights are zero-mean Gaussian with
/// `Var[w_l] = 2 / n_l`; biases `b_l` are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightInitSpec {
    /// Kernel side `k`.
    pub k: usize,
    /// Input channels `c`.
    pub c: usize,
    /// Filters `d`.
    pub d: usize,
}

impl WeightInitSpec {
    pub fn new(k: usize, c: usize, d: usize) -> Self {
        Self { k, c, d }
    }

    /// Fan-in `n_l`.
    pub fn n_l(&self) -> usize {
        self.k * self.k * self.c
    }

    pub fn variance(&self) -> Result<f64> {
        he_std(self.n_l()).map(|s| s * s)
    }

    /// Samples the `d × n_l` weight matrix, row-major.
    pub fn sample_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f32>> {
        he_std(self.n_l())?;
        Ok(mipcad_nn::init::he_normal(self.n_l(), self.d * self.n_l(), rng))
    }

    pub fn bias(&self) -> Vec<f32> {
        vec![0.0; self.d]
    }
}

/// Optimization settings for one detector stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig2D {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub min_lr: f64,
    /// Multiplier applied to the learning rate on a plateau.
    pub lr_factor: f64,
    /// Epochs without validation improvement before the rate drops.
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps per epoch.
    pub steps_per_epoch: Option<usize>,
    /// Optional cap on total optimizer steps.
    pub max_steps: Option<usize>,
    /// Train on random square crops of this side instead of whole images.
    pub patch_size: Option<usize>,
    /// Nodule-free images drawn per positive image in every epoch.
    pub negatives_per_positive: f64,
    /// Apply random rigid augmentation to positive images.
    pub augment: bool,
    /// Cap on validation images evaluated per epoch (positives first).
    pub max_val_images: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig2D {
    fn default() -> Self {
        Self {
            batch_size: 5,
            initial_lr: 1e-3,
            min_lr: 1e-7,
            lr_factor: 0.01,
            plateau_patience: 5,
            early_stop_patience: 10,
            max_epochs: 200,
            steps_per_epoch: None,
            max_steps: None,
            patch_size: None,
            negatives_per_positive: 1.0,
            augment: true,
            max_val_images: None,
            seed: 0,
        }
    }
}

impl TrainConfig2D {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Parameter("batch size and epoch count must be positive".into()));
        }
        if !(self.initial_lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.initial_lr) {
            return Err(Error::Parameter("learning rates must satisfy 0 < min ≤ initial".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Parameter("lr factor must lie in (0, 1)".into()));
        }
        if self.negatives_per_positive < 0.0 {
            return Err(Error::Parameter("negatives_per_positive must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mipcad_nn::activation::Relu;
    use mipcad_nn::conv::Conv;
    use mipcad_nn::{Layer, Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn he_closed_form_and_errors() {
        assert_eq!(he_std(2).unwrap(), 1.0);
        assert!((he_std(3 * 3 * 32).unwrap() - 1.0 / 12.0).abs() < 1e-9);
        assert!(matches!(he_std(0), Err(Error::Parameter(_))));
    }

    #[test]
    fn init_spec_sample_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = WeightInitSpec::new(3, 32, 1000 / 9 + 1);
        assert_eq!(spec.n_l(), 288);
        let w = spec.sample_weights(&mut rng).unwrap();
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((var / spec.variance().unwrap() - 1.0).abs() < 0.05);
        assert!(spec.bias().iter().all(|&b| b == 0.0));
    }

    /// Pre-activation second moment through a ReLU stack stays near the
    /// first layer's when weights follow the 2/n rule.
    #[test]
    fn he_keeps_preactivation_variance_across_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let side = 64;
        let data: Vec<f32> = (0..4 * side * side).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut h = Tensor::from_vec(&[4, 1, side, side], data).unwrap();
        let mut cin = 1;
        let mut moments = Vec::new();
        for _ in 0..8 {
            let mut conv = Conv::new(2, cin, 16, 3, &mut rng);
            let y = conv.forward(&h, Mode::Eval);
            let m = y.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / y.len() as f64;
            moments.push(m);
            h = Relu::new().forward(&y, Mode::Eval);
            cin = 16;
        }
        for m in &moments {
            let r = m / moments[0];
            assert!((0.5..=2.0).contains(&r), "moments {moments:?}");
        }
    }
}
