use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
///
/// The shape always has at least one dimension and the product of its
/// dimensions equals `data.len()`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::invalid("tensor shape must have at least one dimension"));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::invalid(format!("dimension {pos} of shape {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor, validating the shape and rejecting non-finite values.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(i, "non-finite tensor value"));
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; len],
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    /// Wraps data produced by internal arithmetic whose shape is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `a·self + b·other`, elementwise.
    pub fn lin_comb(&self, a: f64, other: &Tensor, b: f64) -> Result<Tensor> {
        self.same_shape(other, "lin_comb")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.lin_comb(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.lin_comb(1.0, other, -1.0)
    }

    pub fn scale(&self, a: f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|x| a * x).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(x, y)| x * y).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }

    /// Fails with a numeric error naming the first non-finite element.
    pub fn ensure_finite(self) -> Result<Tensor> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::numeric(i, "non-finite value produced")),
            None => Ok(self),
        }
    }

    /// Slices along the leading axis; each keeps the trailing shape.
    pub fn rows(&self) -> Vec<Tensor> {
        let n = self.shape[0];
        let inner: Vec<usize> = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        let width = self.data.len() / n;
        self.data
            .chunks(width)
            .map(|c| Self::from_parts(inner.clone(), c.to_vec()))
            .collect()
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty set of tensors"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            first.same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_parts(shape, data))
    }
}
