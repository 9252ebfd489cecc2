//! Same-padded, stride-1 convolution over 2-D or 3-D inputs.

use rand::Rng;

use crate::gemm::{matmul, matmul_at, matmul_bt};
use crate::init::he_normal;
use crate::{Layer, Mode, Param, Tensor};

/// Convolution with a cubic (or square) odd kernel, zero "same" padding and
/// unit stride. Works on `[N, C, H, W]` when `rank == 2` and
/// `[N, C, D, H, W]` when `rank == 3`.
#[derive(Debug, Clone)]
pub struct Conv {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    rank: usize,
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Conv {
    /// Creates a layer with He-normal weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        rank: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(rank == 2 || rank == 3, "convolution rank must be 2 or 3");
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = in_channels * kernel.pow(rank as u32);
        let weight = he_normal(fan_in, out_channels * fan_in, rng);
        Self {
            in_channels,
            out_channels,
            kernel,
            rank,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; out_channels]),
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Number of inputs feeding one output unit (`k^rank · c_in`).
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.pow(self.rank as u32)
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Param {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Param {
        &mut self.bias
    }

    fn geometry(&self, x: &Tensor) -> ([usize; 3], [usize; 3]) {
        let s = x.spatial();
        assert_eq!(s.len(), self.rank, "input rank does not match layer rank");
        assert_eq!(x.channels(), self.in_channels, "input channel mismatch");
        if self.rank == 2 {
            ([1, s[0], s[1]], [1, self.kernel, self.kernel])
        } else {
            ([s[0], s[1], s[2]], [self.kernel; 3])
        }
    }
}

/// Expands one sample (`c × d × h × w`) into a `(c·kd·kh·kw) × (d·h·w)`
/// patch matrix with zero padding.
fn im2col(x: &[f32], c: usize, dims: [usize; 3], k: [usize; 3], cols: &mut [f32]) {
    let [d, h, w] = dims;
    let p = d * h * w;
    let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
    let mut row = 0;
    for ci in 0..c {
        for kz in 0..k[0] {
            for ky in 0..k[1] {
                for kx in 0..k[2] {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let shift = kx as isize - pad[2] as isize;
                    let x_lo = (-shift).max(0) as usize;
                    let x_hi = ((w as isize) - shift).min(w as isize).max(0) as usize;
                    for z in 0..d {
                        let sz = z as isize + kz as isize - pad[0] as isize;
                        for y in 0..h {
                            let sy = y as isize + ky as isize - pad[1] as isize;
                            let out = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize || x_lo >= x_hi {
                                out.fill(0.0);
                                continue;
                            }
                            let base = ((ci * d + sz as usize) * h + sy as usize) * w;
                            out[..x_lo].fill(0.0);
                            out[x_hi..].fill(0.0);
                            let src_lo = (x_lo as isize + shift) as usize;
                            out[x_lo..x_hi].copy_from_slice(&x[base + src_lo..base + src_lo + (x_hi - x_lo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
fn col2im(cols: &[f32], c: usize, dims: [usize; 3], k: [usize; 3], dx: &mut [f32]) {
    let [d, h, w] = dims;
    let p = d * h * w;
    let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
    let mut row = 0;
    for ci in 0..c {
        for kz in 0..k[0] {
            for ky in 0..k[1] {
                for kx in 0..k[2] {
                    let src = &cols[row * p..(row + 1) * p];
                    let shift = kx as isize - pad[2] as isize;
                    let x_lo = (-shift).max(0) as usize;
                    let x_hi = ((w as isize) - shift).min(w as isize).max(0) as usize;
                    for z in 0..d {
                        let sz = z as isize + kz as isize - pad[0] as isize;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + ky as isize - pad[1] as isize;
                            if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                                continue;
                            }
                            let base = ((ci * d + sz as usize) * h + sy as usize) * w;
                            let dst_lo = (x_lo as isize + shift) as usize;
                            let g = &src[(z * h + y) * w + x_lo..(z * h + y) * w + x_hi];
                            for (o, v) in dx[base + dst_lo..base + dst_lo + g.len()].iter_mut().zip(g) {
                                *o += *v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl Layer for Conv {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let (dims, k) = self.geometry(x);
        let n = x.batch();
        let p: usize = dims.iter().product();
        let kk: usize = k.iter().product();
        let rows = self.in_channels * kk;
        let mut shape = x.shape().to_vec();
        shape[1] = self.out_channels;
        let mut out = Tensor::zeros(&shape);
        let pointwise = kk == 1;
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * p] };
        let in_per = self.in_channels * p;
        let out_per = self.out_channels * p;
        for i in 0..n {
            let xs = &x.data()[i * in_per..(i + 1) * in_per];
            let patch: &[f32] = if pointwise {
                xs
            } else {
                im2col(xs, self.in_channels, dims, k, &mut cols);
                &cols
            };
            let o = &mut out.data_mut()[i * out_per..(i + 1) * out_per];
            for (co, chunk) in o.chunks_mut(p).enumerate() {
                chunk.fill(self.bias.value[co]);
            }
            matmul(&self.weight.value, patch, o, self.out_channels, rows, p, 1.0);
        }
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.input.take().expect("backward called without a training forward");
        let (dims, k) = self.geometry(&x);
        let n = x.batch();
        let p: usize = dims.iter().product();
        let kk: usize = k.iter().product();
        let rows = self.in_channels * kk;
        let in_per = self.in_channels * p;
        let out_per = self.out_channels * p;
        let mut dx = Tensor::zeros(x.shape());
        let pointwise = kk == 1;
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * p] };
        let mut dcols = vec![0.0; rows * p];
        for i in 0..n {
            let xs = &x.data()[i * in_per..(i + 1) * in_per];
            let g = &grad_out.data()[i * out_per..(i + 1) * out_per];
            for (co, chunk) in g.chunks(p).enumerate() {
                self.bias.grad[co] += chunk.iter().sum::<f32>();
            }
            let patch: &[f32] = if pointwise {
                xs
            } else {
                im2col(xs, self.in_channels, dims, k, &mut cols);
                &cols
            };
            matmul_bt(g, patch, &mut self.weight.grad, self.out_channels, p, rows, 1.0);
            let dxs = &mut dx.data_mut()[i * in_per..(i + 1) * in_per];
            if pointwise {
                matmul_at(&self.weight.value, g, dxs, rows, self.out_channels, p, 0.0);
            } else {
                matmul_at(&self.weight.value, g, &mut dcols, rows, self.out_channels, p, 0.0);
                col2im(&dcols, self.in_channels, dims, k, dxs);
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
