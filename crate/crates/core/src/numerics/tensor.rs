use crate::error::{Error, Result};

/// Dense row-major `f32` array.
///
/// Every constructor checks `product(shape) == data.len()` and rejects
/// zero extents, so a `Tensor` is never empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::invalid("tensor shape must have at least one axis"));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(format!(
            "tensor shape {shape:?} has a zero extent"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::invalid(format!("tensor shape {shape:?} overflows")))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| x as f32).collect())
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| f64::from(x)).collect()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Errors unless every element is finite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NumericalDegeneracy(format!(
                "{what} contains NaN or Inf"
            )))
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise `f(self, other)` on identically shaped tensors.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `a * self + b * other`, evaluated per element in double precision.
    pub fn lincomb(&self, a: f64, other: &Tensor, b: f64) -> Result<Tensor> {
        self.zip_with(other, |x, y| (a * f64::from(x) + b * f64::from(y)) as f32)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f32::max)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list"))?;
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(shape, data)
    }

    /// Extent of the leading axis.
    pub fn leading(&self) -> usize {
        self.shape[0]
    }

    /// Shape without the leading axis; `[1]` for rank-1 tensors.
    pub fn inner_shape(&self) -> Vec<usize> {
        if self.rank() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        }
    }

    /// Slice `i` along the leading axis.
    pub fn index(&self, i: usize) -> Result<Tensor> {
        let m = self.leading();
        if i >= m {
            return Err(Error::invalid(format!(
                "index {i} out of range for leading extent {m}"
            )));
        }
        let inner = self.len() / m;
        Tensor::new(
            self.inner_shape(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        )
    }

    pub fn unstack(&self) -> Vec<Tensor> {
        (0..self.leading())
            .map(|i| self.index(i).expect("index within leading extent"))
            .collect()
    }

    /// Row-major slice of the sub-array at leading index `i`.
    pub fn row(&self, i: usize) -> &[f32] {
        let inner = self.len() / self.leading();
        &self.data[i * inner..(i + 1) * inner]
    }
}
