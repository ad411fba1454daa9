use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{MovaError, Result};

/// Dense row-major array of doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(MovaError::Shape(format!("extents must be positive, got {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(MovaError::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(MovaError::Numeric {
                context: "tensor construction".into(),
                index,
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    /// Standard-normal entries multiplied by `scale`.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], scale: f64, rng: &mut R) -> Self {
        let len = dims.iter().product();
        let data = (0..len)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Trailing extent; for a matrix, the column count.
    pub fn cols(&self) -> usize {
        *self.dims.last().expect("rank >= 1")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }
}

/// A C×H×W feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![channels, height, width], data).map(FeatureMap)
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(MovaError::Shape(format!(
                "feature map needs rank 3, got dims {:?}",
                tensor.dims()
            )));
        }
        Ok(FeatureMap(tensor))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        FeatureMap(Tensor::filled(&[channels, height, width], value))
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.0.data()[(c * self.height() + h) * self.width() + w]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.positions();
        &self.0.data()[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.positions();
        &mut self.0.data_mut()[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Positions as rows: an (H·W)×C matrix with row index h·W + w.
    pub fn to_tokens(&self) -> Tensor {
        let (c, n) = (self.channels(), self.positions());
        let src = self.0.data();
        let mut out = vec![0.0; n * c];
        for ch in 0..c {
            for p in 0..n {
                out[p * c + ch] = src[ch * n + p];
            }
        }
        Tensor::from_parts(vec![n, c], out)
    }

    /// Inverse of [`FeatureMap::to_tokens`].
    pub fn from_tokens(tokens: &Tensor, height: usize, width: usize) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() != height * width {
            return Err(MovaError::Shape(format!(
                "token matrix {:?} does not cover a {height}×{width} grid",
                tokens.dims()
            )));
        }
        let (n, c) = (tokens.rows(), tokens.cols());
        let src = tokens.data();
        let mut out = vec![0.0; n * c];
        for p in 0..n {
            for ch in 0..c {
                out[ch * n + p] = src[p * c + ch];
            }
        }
        Ok(FeatureMap(Tensor::from_parts(vec![c, height, width], out)))
    }
}
