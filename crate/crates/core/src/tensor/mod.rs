//! Dense tensors, keyed random streams and reverse-mode autodiff.

mod autograd;
pub mod kernels;
mod rng;

pub(crate) use autograd::softmax_rows;
pub use autograd::{BatchStats, Gradients, Tape, Var};
pub use rng::RngStream;

use crate::error::{Error, Result};

/// Dense row-major array of `f32` values.
///
/// Image tensors use the (batch, channel, height, width) layout. A tensor with
/// an empty shape is a scalar holding exactly one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, x)| *x = f(i));
        t
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::DimensionMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0; 4],
            }),
        }
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [n, f] => Ok([n, f]),
            _ => Err(Error::DimensionMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0; 2],
            }),
        }
    }

    pub(crate) fn check_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::DimensionMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: expected.to_vec(),
            });
        }
        Ok(())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            t.check_shape("stack", &first.shape)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    /// Copy of the `index`-th slice along the leading axis.
    pub fn slice_outer(&self, index: usize) -> Result<Self> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| Error::invalid("cannot slice a scalar"))?;
        if index >= outer {
            return Err(Error::invalid(format!("index {index} out of range for {outer}")));
        }
        let inner = self.numel() / outer;
        let shape = if self.shape.len() == 1 {
            Vec::new()
        } else {
            self.shape[1..].to_vec()
        };
        Self::new(shape, self.data[index * inner..(index + 1) * inner].to_vec())
    }
}

/// Output length of a sliding window with optional ceil rounding.
///
/// With `ceil_mode` the last window must still start inside the padded input,
/// which is the usual framework convention.
pub fn pooled_len(len: usize, kernel: usize, stride: usize, padding: usize, ceil_mode: bool) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    let span = padded - kernel;
    let mut out = if ceil_mode {
        span.div_ceil(stride) + 1
    } else {
        span / stride + 1
    };
    if ceil_mode && (out - 1) * stride >= len + padding {
        out -= 1;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_wrong_lengths() {
        assert!(Tensor::new([1, 0, 2, 2], vec![]).is_err());
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new([2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn scalar_has_one_element() {
        let s = Tensor::scalar(3.0);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item(), Some(3.0));
    }

    #[test]
    fn pooled_len_matches_table_transitions() {
        assert_eq!(pooled_len(224, 7, 2, 0, false), Some(109));
        assert_eq!(pooled_len(109, 3, 2, 0, true), Some(54));
        assert_eq!(pooled_len(54, 3, 2, 0, true), Some(27));
        assert_eq!(pooled_len(54, 3, 2, 0, false), Some(26));
        assert_eq!(pooled_len(27, 3, 2, 0, true), Some(13));
        assert_eq!(pooled_len(2, 3, 2, 0, true), None);
    }

    #[test]
    fn stack_and_slice_are_inverse() {
        let a = Tensor::from_fn([2, 3], |i| i as f32);
        let b = Tensor::from_fn([2, 3], |i| -(i as f32));
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.slice_outer(0).unwrap(), a);
        assert_eq!(s.slice_outer(1).unwrap(), b);
    }
}
