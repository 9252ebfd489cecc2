use mipcad_nn::activation::{softmax_rows, Relu};
use mipcad_nn::conv::Conv;
use mipcad_nn::dense::Dense;
use mipcad_nn::norm::BatchNorm;
use mipcad_nn::pool::{GlobalMaxPool, MaxPool};
use mipcad_nn::{Layer, Mode, Param, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Archi {
    /// Four conv stages for 32³ patches.
    Archi2,
    /// Three conv stages for 16³ patches.
    Archi3,
}

/// A stack of stages `[convs (3×3×3, ReLU), 2×2×2 max-pool, batch-norm]`
/// followed by global max pooling, a ReLU dense layer and a 2-way output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiSpec {
    pub archi: Archi,
    /// Filters of each stage.
    pub widths: Vec<usize>,
    /// Convolutions in each stage.
    pub convs: Vec<usize>,
    pub dense_width: usize,
    pub patch_side: usize,
}

impl ArchiSpec {
    pub fn archi3() -> Self {
        Self {
            archi: Archi::Archi3,
            widths: vec![16, 32, 64],
            convs: vec![2, 2, 2],
            dense_width: 128,
            patch_side: 16,
        }
    }

    pub fn archi2() -> Self {
        Self {
            archi: Archi::Archi2,
            widths: vec![16, 32, 64, 128],
            convs: vec![2, 2, 2, 3],
            dense_width: 128,
            patch_side: 32,
        }
    }

    pub fn of(archi: Archi) -> Self {
        match archi {
            Archi::Archi2 => Self::archi2(),
            Archi::Archi3 => Self::archi3(),
        }
    }

    /// Same topology with every stage width divided by `divisor`.
    pub fn narrowed(mut self, divisor: usize) -> Self {
        let d = divisor.max(1);
        for w in &mut self.widths {
            *w = (*w / d).max(1);
        }
        self.dense_width = (self.dense_width / d).max(2);
        self
    }

    /// `(convolutions, pooling layers, normalization layers)`.
    pub fn layer_census(&self) -> (usize, usize, usize) {
        (self.convs.iter().sum(), self.widths.len(), self.widths.len())
    }

    pub fn layer_count(&self) -> usize {
        let (c, p, n) = self.layer_census();
        c + p + n
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.convs.len() || self.convs.contains(&0) {
            return Err(Error::Parameter(format!("invalid classifier spec {self:?}")));
        }
        if self.patch_side >> self.widths.len() == 0 {
            return Err(Error::Parameter(format!(
                "{}³ patches are too small for {} pooling stages",
                self.patch_side,
                self.widths.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Stage {
    convs: Vec<(Conv, Relu)>,
    pool: MaxPool,
    norm: BatchNorm,
}

/// 3-D patch classifier producing two logits (non-nodule, nodule).
#[derive(Debug, Clone)]
pub struct FprNet {
    spec: ArchiSpec,
    stages: Vec<Stage>,
    gmp: GlobalMaxPool,
    hidden: Dense,
    relu: Relu,
    out: Dense,
}

impl FprNet {
    pub fn new<R: Rng + ?Sized>(spec: &ArchiSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut cin = 1;
        let mut stages = Vec::new();
        for (&w, &n) in spec.widths.iter().zip(&spec.convs) {
            let mut convs = Vec::new();
            for _ in 0..n {
                convs.push((Conv::new(3, cin, w, 3, rng), Relu::new()));
                cin = w;
            }
            stages.push(Stage {
                convs,
                pool: MaxPool::new(),
                norm: BatchNorm::new(w),
            });
        }
        // a zero output layer starts every patch at probability one half
        let hidden = Dense::new(cin, spec.dense_width, rng);
        let mut out = Dense::new(spec.dense_width, 2, rng);
        out.zero_weights();
        Ok(Self {
            spec: spec.clone(),
            stages,
            gmp: GlobalMaxPool::new(),
            hidden,
            relu: Relu::new(),
            out,
        })
    }

    pub fn spec(&self) -> &ArchiSpec {
        &self.spec
    }

    /// Census of the instantiated network, counted from its layers.
    pub fn layer_census(&self) -> (usize, usize, usize) {
        let convs = self.stages.iter().map(|s| s.convs.len()).sum();
        (convs, self.stages.len(), self.stages.len())
    }

    pub fn conv_widths(&self) -> Vec<usize> {
        self.stages
            .iter()
            .flat_map(|s| s.convs.iter().map(|(c, _)| c.out_channels()))
            .collect()
    }

    /// `[N, 1, D, D, D]` patches to `[N, 2]` logits.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let mut h = x.clone();
        for s in &mut self.stages {
            for (c, r) in &mut s.convs {
                h = c.forward(&h, mode);
                h = r.forward(&h, mode);
            }
            h = s.pool.forward(&h, mode);
            h = s.norm.forward(&h, mode);
        }
        h = self.gmp.forward(&h, mode);
        h = self.hidden.forward(&h, mode);
        h = self.relu.forward(&h, mode);
        self.out.forward(&h, mode)
    }

    /// Nodule probabilities from the soft-max output.
    pub fn predict(&mut self, x: &Tensor) -> Vec<f64> {
        let p = softmax_rows(&self.forward(x, Mode::Eval));
        p.data().chunks(2).map(|r| r[1] as f64).collect()
    }

    pub fn backward(&mut self, grad_logits: &Tensor) {
        let mut g = self.out.backward(grad_logits);
        g = self.relu.backward(&g);
        g = self.hidden.backward(&g);
        g = self.gmp.backward(&g);
        for s in self.stages.iter_mut().rev() {
            g = s.norm.backward(&g);
            g = s.pool.backward(&g);
            for (c, r) in s.convs.iter_mut().rev() {
                g = r.backward(&g);
                g = c.backward(&g);
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for s in &mut self.stages {
            for (c, _) in &mut s.convs {
                c.visit_params(f);
            }
            s.norm.visit_params(f);
        }
        self.hidden.visit_params(f);
        self.out.visit_params(f);
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        for s in &mut self.stages {
            for (c, _) in &mut s.convs {
                c.visit_state(f);
            }
            s.norm.visit_state(f);
        }
        self.hidden.visit_state(f);
        self.out.visit_state(f);
    }
}
