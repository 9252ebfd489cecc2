use rand::Rng;

use crate::activation::Relu;
use crate::conv::Conv;
use crate::norm::BatchNorm;
use crate::{Layer, Mode, Param, Tensor};

/// Convolution → batch normalization → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
    relu: Relu,
}

impl ConvBnRelu {
    pub fn new<R: Rng + ?Sized>(rank: usize, cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv::new(rank, cin, cout, kernel, rng),
            bn: BatchNorm::new(cout),
            relu: Relu::new(),
        }
    }
}

impl Layer for ConvBnRelu {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = self.conv.forward(x, mode);
        let y = self.bn.forward(&y, mode);
        self.relu.forward(&y, mode)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let g = self.relu.backward(grad_out);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        self.conv.visit_state(f);
        self.bn.visit_state(f);
    }
}

/// Two [`ConvBnRelu`] blocks in sequence.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

impl DoubleConv {
    pub fn new<R: Rng + ?Sized>(rank: usize, cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            first: ConvBnRelu::new(rank, cin, cout, kernel, rng),
            second: ConvBnRelu::new(rank, cout, cout, kernel, rng),
        }
    }

    pub fn convs(&self) -> [&Conv; 2] {
        [&self.first.conv, &self.second.conv]
    }
}

impl Layer for DoubleConv {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = self.first.forward(x, mode);
        self.second.forward(&y, mode)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let g = self.second.backward(grad_out);
        self.first.backward(&g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.first.visit_params(f);
        self.second.visit_params(f);
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        self.first.visit_state(f);
        self.second.visit_state(f);
    }
}
