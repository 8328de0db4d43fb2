//! Dense row-major n-dimensional arrays.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A contiguous row-major tensor.
///
/// Every extent is at least one and `data.len()` always equals the product of
/// the extents. `requires_grad` only matters when the tensor is handed to a
/// [`Graph`](crate::autodiff::Graph) as a leaf.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidTensor("rank-0 shape".into()));
    }
    if let Some(i) = shape.iter().position(|&e| e == 0) {
        return Err(Error::InvalidTensor(format!(
            "extent {i} of shape {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Builds a tensor from `f64` values, converting each element.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
        }
    }

    /// The identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| {
            if i / n == i % n {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Same values, excluded from gradient tracking.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
        }
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::InvalidTensor(format!(
                "index {index:?} has rank {}, tensor has rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            if i >= e {
                return Err(Error::InvalidTensor(format!(
                    "index {index:?} out of bounds for shape {:?}",
                    self.shape
                )));
            }
            off = off * e + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max(&self) -> T {
        self.data
            .iter()
            .fold(T::neg_infinity(), |acc, &v| if v > acc { v } else { acc })
    }

    /// Adds `other` elementwise in place; shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let outer = self.shape[0];
        if start >= end || end > outer {
            return Err(Error::InvalidTensor(format!(
                "slice {start}..{end} of leading extent {outer}"
            )));
        }
        let inner = self.numel() / outer;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
            requires_grad: false,
        })
    }

    /// Gathers rows along the leading axis.
    pub fn gather_outer(&self, rows: &[usize]) -> Result<Self> {
        let outer = self.shape[0];
        let inner = self.numel() / outer;
        if rows.is_empty() {
            return Err(Error::InvalidTensor("empty row selection".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= outer {
                return Err(Error::InvalidTensor(format!(
                    "row {r} out of range for leading extent {outer}"
                )));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())),
        )
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn detach_keeps_values() {
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 3.5])
            .unwrap()
            .with_requires_grad(true);
        let d = x.detach();
        assert!(!d.requires_grad());
        assert_eq!(d.data(), x.data());
    }

    proptest! {
        #[test]
        fn offset_is_row_major(a in 1usize..5, b in 1usize..5, c in 1usize..5) {
            let t = Tensor::<f32>::from_fn(&[a, b, c], |i| i as f32);
            for i in 0..a {
                for j in 0..b {
                    for k in 0..c {
                        let off = t.offset(&[i, j, k]).unwrap();
                        prop_assert_eq!(off, (i * b + j) * c + k);
                        prop_assert_eq!(t.get(&[i, j, k]).unwrap(), off as f32);
                    }
                }
            }
        }
    }
}
