//! Dense row-major tensors.
//!
//! Values are always held as `f64`; a tensor tagged [`DType::F32`] has every
//! stored value rounded through `f32` on construction, so arithmetic carried
//! out on it behaves like single precision at each materialised step.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype {other:?}"))),
        }
    }
}

/// A dense tensor with value semantics.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.shape).field("dtype", &self.dtype);
        if self.data.len() <= 16 {
            d.field("data", &self.data);
        } else {
            d.field("data", &format_args!("[{} values]", self.data.len()));
        }
        d.finish()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, DType::F64)
    }

    pub fn with_dtype(shape: impl Into<Vec<usize>>, mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} holds {n} values but {} were given", data.len())));
        }
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        Ok(Tensor { shape, dtype, data })
    }

    /// Internal constructor for kernels that already know the length matches.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut t = Tensor { shape, dtype, data };
        if dtype == DType::F32 {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        t
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, dtype: DType::F64, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), dtype: DType::F64, data: vec![value] }
    }

    /// A 1-D tensor.
    pub fn vector(values: &[f64]) -> Self {
        Tensor { shape: vec![values.len()], dtype: DType::F64, data: values.to_vec() }
    }

    /// A 2-D tensor from rows of equal length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the leading axis, 1 for scalars.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of values per leading-axis row.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.clone(), dtype)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Tensor { shape, dtype: self.dtype, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect(), self.dtype)
    }

    /// Elementwise combination of two tensors of identical shape. A scalar
    /// operand on either side is broadcast; nothing else is.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let dtype = self.dtype.max_precision(other.dtype);
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor::from_parts(self.shape.clone(), data, dtype));
        }
        if other.shape.is_empty() {
            let b = other.data[0];
            return Ok(Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&a| f(a, b)).collect(), dtype));
        }
        if self.shape.is_empty() {
            let a = self.data[0];
            return Ok(Tensor::from_parts(other.shape.clone(), other.data.iter().map(|&b| f(a, b)).collect(), dtype));
        }
        Err(Error::Shape(format!("elementwise operands {:?} and {:?} differ", self.shape, other.shape)))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn abs(&self) -> Tensor {
        self.map(f64::abs)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.numel() != other.numel() {
            return Err(Error::Shape(format!("dot of {:?} and {:?}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and values (distinguishes `0.0` from `-0.0`).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        let mut dtype = first.dtype;
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::Shape(format!("cannot stack {:?} with {:?}", first.shape, p.shape)));
            }
            dtype = dtype.max_precision(p.dtype);
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data, dtype))
    }

    /// Splits along the leading axis, dropping it.
    pub fn unstack(&self) -> Result<Vec<Tensor>> {
        if self.shape.is_empty() {
            return Err(Error::Shape("cannot unstack a scalar".into()));
        }
        let inner = self.shape[1..].to_vec();
        Ok((0..self.shape[0])
            .map(|i| Tensor { shape: inner.clone(), dtype: self.dtype, data: self.row(i).to_vec() })
            .collect())
    }

    /// Concatenates along the leading axis.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        if first.shape.is_empty() {
            return Err(Error::Shape("cannot concatenate scalars".into()));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.len() != first.shape.len() || p.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!("cannot concatenate {:?} with {:?}", first.shape, p.shape)));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor::from_parts(shape, data, first.dtype))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.shape.is_empty() || end > self.shape[0] || start > end {
            return Err(Error::Shape(format!("row range {start}..{end} out of bounds for {:?}", self.shape)));
        }
        let n = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor { shape, dtype: self.dtype, data: self.data[start * n..end * n].to_vec() })
    }

    /// Repeats the whole tensor `times` along the leading axis.
    pub fn repeat_rows(&self, times: usize) -> Tensor {
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(times);
        } else {
            shape[0] *= times;
        }
        let mut data = Vec::with_capacity(self.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Tensor { shape, dtype: self.dtype, data }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Applies `f` to the values in place and re-rounds for the dtype.
    pub fn update(&mut self, f: impl Fn(&mut [f64])) {
        f(&mut self.data);
        if self.dtype == DType::F32 {
            self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

impl DType {
    pub(crate) fn max_precision(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.row_len(), 3);
    }

    #[test]
    fn f32_rounds_on_construction() {
        let t = Tensor::with_dtype(vec![1], vec![0.1], DType::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn only_scalar_broadcasts() {
        let a = Tensor::vector(&[1.0, 2.0]);
        assert_eq!(a.add(&Tensor::scalar(1.0)).unwrap().data(), &[2.0, 3.0]);
        assert!(a.add(&Tensor::vector(&[1.0])).is_err());
    }

    #[test]
    fn stack_unstack() {
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[3.0, 4.0]);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.unstack().unwrap(), vec![a, b]);
    }
}
