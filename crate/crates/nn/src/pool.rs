use crate::{Layer, Mode, Tensor};

/// 2×2 (or 2×2×2) max pooling with stride 2. Odd trailing rows are dropped.
#[derive(Debug, Clone, Default)]
pub struct MaxPool {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool {
    pub fn new() -> Self {
        Self::default()
    }
}

fn pooled_shape(shape: &[usize]) -> Vec<usize> {
    let mut out = shape.to_vec();
    for s in out.iter_mut().skip(2) {
        *s /= 2;
    }
    out
}

impl Layer for MaxPool {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let rank = x.spatial().len();
        let dims: [usize; 3] = if rank == 2 {
            [1, x.spatial()[0], x.spatial()[1]]
        } else {
            [x.spatial()[0], x.spatial()[1], x.spatial()[2]]
        };
        let out_shape = pooled_shape(x.shape());
        let od = if rank == 2 { 1 } else { dims[0] / 2 };
        let (oh, ow) = (dims[1] / 2, dims[2] / 2);
        let kz = if rank == 2 { 1 } else { 2 };
        let planes = x.batch() * x.channels();
        let in_plane = dims.iter().product::<usize>();
        let out_plane = od * oh * ow;
        let mut out = Tensor::zeros(&out_shape);
        let mut argmax = vec![0usize; planes * out_plane];
        for pl in 0..planes {
            let src = &x.data()[pl * in_plane..(pl + 1) * in_plane];
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dz in 0..kz {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = ((z * kz + dz) * dims[1] + y * 2 + dy) * dims[2] + xx * 2 + dx;
                                    if src[idx] > best {
                                        best = src[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        let o = pl * out_plane + (z * oh + y) * ow + xx;
                        out.data_mut()[o] = best;
                        argmax[o] = pl * in_plane + best_idx;
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some((argmax, x.shape().to_vec()));
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (argmax, in_shape) = self.cache.take().expect("backward called without a training forward");
        let mut dx = Tensor::zeros(&in_shape);
        for (g, &i) in grad_out.data().iter().zip(&argmax) {
            dx.data_mut()[i] += *g;
        }
        dx
    }
}

/// Nearest-neighbour ×2 upsampling of `[N, C, H, W]`.
#[derive(Debug, Clone, Default)]
pub struct Upsample2x;

impl Layer for Upsample2x {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Tensor {
        let (h, w) = (x.spatial()[0], x.spatial()[1]);
        let planes = x.batch() * x.channels();
        let mut out = Tensor::zeros(&[x.batch(), x.channels(), h * 2, w * 2]);
        for pl in 0..planes {
            let src = &x.data()[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out.data_mut()[pl * 4 * h * w..(pl + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (h2, w2) = (grad_out.spatial()[0], grad_out.spatial()[1]);
        let (h, w) = (h2 / 2, w2 / 2);
        let planes = grad_out.batch() * grad_out.channels();
        let mut dx = Tensor::zeros(&[grad_out.batch(), grad_out.channels(), h, w]);
        for pl in 0..planes {
            let src = &grad_out.data()[pl * h2 * w2..(pl + 1) * h2 * w2];
            let dst = &mut dx.data_mut()[pl * h * w..(pl + 1) * h * w];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                }
            }
        }
        dx
    }
}

/// Maximum over all spatial positions: `[N, C, ...] -> [N, C]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalMaxPool {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl GlobalMaxPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalMaxPool {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let s = x.spatial_len();
        let planes = x.batch() * x.channels();
        let mut out = Tensor::zeros(&[x.batch(), x.channels()]);
        let mut argmax = vec![0; planes];
        for pl in 0..planes {
            let src = &x.data()[pl * s..(pl + 1) * s];
            let (idx, v) = src
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            out.data_mut()[pl] = v;
            argmax[pl] = pl * s + idx;
        }
        if mode == Mode::Train {
            self.cache = Some((argmax, x.shape().to_vec()));
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (argmax, shape) = self.cache.take().expect("backward called without a training forward");
        let mut dx = Tensor::zeros(&shape);
        for (g, &i) in grad_out.data().iter().zip(&argmax) {
            dx.data_mut()[i] += *g;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_2d_picks_window_maximum_and_routes_gradient() {
        let x = Tensor::from_vec(
            &[1, 1, 2, 4],
            vec![1., 5., 2., 0., 3., 4., 8., 7.],
        )
        .unwrap();
        let mut p = MaxPool::new();
        let y = p.forward(&x, Mode::Train);
        assert_eq!(y.data(), &[5., 8.]);
        let dx = p.backward(&Tensor::from_vec(&[1, 1, 1, 2], vec![1., 2.]).unwrap());
        assert_eq!(dx.data(), &[0., 1., 0., 0., 0., 0., 2., 0.]);
    }

    #[test]
    fn maxpool_3d_halves_every_axis() {
        let x = Tensor::from_vec(&[1, 1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let y = MaxPool::new().forward(&x, Mode::Eval);
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[7.]);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let mut u = Upsample2x;
        let y = u.forward(&x, Mode::Train);
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let g = Tensor::filled(&[1, 1, 4, 4], 1.0);
        assert_eq!(u.backward(&g).data(), &[4., 4., 4., 4.]);
    }

    #[test]
    fn global_max_pool_selects_plane_maximum() {
        let x = Tensor::from_vec(&[1, 2, 3], vec![1., 9., 2., -1., -3., -2.]).unwrap();
        let mut g = GlobalMaxPool::new();
        let y = g.forward(&x, Mode::Train);
        assert_eq!(y.data(), &[9., -1.]);
        let dx = g.backward(&Tensor::from_vec(&[1, 2], vec![1., 1.]).unwrap());
        assert_eq!(dx.data(), &[0., 1., 0., 1., 0., 0.]);
    }
}
