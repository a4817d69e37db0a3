use super::Real;
use crate::error::{ensure, Result};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            "shape {:?} needs {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Like [`Tensor::new`] for internally computed buffers whose length is
    /// known to be right.
    pub(crate) fn from_parts(shape: &[usize], data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        ensure!(self.shape.len() == 3, "expected rank 3, got {:?}", self.shape);
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        ensure!(self.shape.len() == 2, "expected rank 2, got {:?}", self.shape);
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self::from_parts(
            &self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Zero-pads a `C×H×W` tensor at the bottom and right.
    pub fn pad_to(&self, height: usize, width: usize) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        ensure!(height >= h && width >= w, "pad_to cannot shrink {h}x{w} to {height}x{width}");
        if height == h && width == w {
            return Ok(self.clone());
        }
        let mut out = Tensor::zeros(&[c, height, width]);
        for ch in 0..c {
            for y in 0..h {
                let src = &self.data[(ch * h + y) * w..(ch * h + y + 1) * w];
                out.data[(ch * height + y) * width..(ch * height + y) * width + w].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    /// Top-left `height×width` window of a `C×H×W` tensor.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        ensure!(height <= h && width <= w, "crop {height}x{width} out of {h}x{w}");
        let mut out = Tensor::zeros(&[c, height, width]);
        for ch in 0..c {
            for y in 0..height {
                let src = &self.data[(ch * h + y) * w..(ch * h + y) * w + width];
                out.data[(ch * height + y) * width..(ch * height + y + 1) * width].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(&[c, r], out))
    }
}
