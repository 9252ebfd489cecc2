use crate::{NnError, Result};

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape {
                expected: shape.to_vec(),
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Batch size (first axis).
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Channel count (second axis).
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Spatial extent (axes after the channel axis).
    pub fn spatial(&self) -> &[usize] {
        &self.shape[2..]
    }

    /// Number of elements per channel per sample.
    pub fn spatial_len(&self) -> usize {
        self.shape[2..].iter().product()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NnError::Shape {
                expected: shape.to_vec(),
                actual: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Concatenates two `[N, C, ...]` tensors along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape[0] != b.shape[0] || a.shape[2..] != b.shape[2..] {
            return Err(NnError::Shape {
                expected: a.shape.clone(),
                actual: b.shape.clone(),
            });
        }
        let n = a.batch();
        let (ca, cb) = (a.channels(), b.channels());
        let s = a.spatial_len();
        let mut shape = a.shape.clone();
        shape[1] = ca + cb;
        let mut data = Vec::with_capacity(n * (ca + cb) * s);
        for i in 0..n {
            data.extend_from_slice(&a.data[i * ca * s..(i + 1) * ca * s]);
            data.extend_from_slice(&b.data[i * cb * s..(i + 1) * cb * s]);
        }
        Ok(Tensor { shape, data })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits after `first` channels.
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let n = self.batch();
        let c = self.channels();
        let s = self.spatial_len();
        let second = c - first;
        let mut a = Vec::with_capacity(n * first * s);
        let mut b = Vec::with_capacity(n * second * s);
        for i in 0..n {
            let base = i * c * s;
            a.extend_from_slice(&self.data[base..base + first * s]);
            b.extend_from_slice(&self.data[base + first * s..base + c * s]);
        }
        let mut sa = self.shape.clone();
        sa[1] = first;
        let mut sb = self.shape.clone();
        sb[1] = second;
        (Tensor { shape: sa, data: a }, Tensor { shape: sb, data: b })
    }

    /// Elementwise in-place accumulation.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Copies sample `i` of the batch into a new `[1, ...]` tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Stacks equally shaped `[1, ...]` tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| NnError::Parameter("cannot stack an empty list".into()))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(NnError::Shape {
                    expected: first.shape.clone(),
                    actual: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        shape[0] = data.len() / first.shape[1..].iter().product::<usize>().max(1);
        Ok(Tensor { shape, data })
    }
}
