//! Minimal differentiable-array substrate.
//!
//! [`Tensor`] is a plain row-major `f64` array. Computation that needs
//! gradients is recorded on a [`Tape`] as [`Var`] handles; every primitive
//! lives in [`ops`] as a pure forward function plus its vector-Jacobian
//! product, so the tape can be replayed and differentiated.

mod gradcheck;
mod kernels;
pub mod ops;
mod param;
mod rng;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use ops::Primitive;
pub use param::{ParamStore, Parameter};
pub use rng::StreamKey;
pub use tape::{Gradients, Tape, Var};

use crate::error::{shape_err, Error, Result};

/// Row-major dense array of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err("item", format!("tensor has shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add_same(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for x in &mut self.data {
            *x *= c;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mirror along axis 1 of an `[H, W, ...]` tensor (horizontal flip).
    pub fn flip_horizontal(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(shape_err("flip_horizontal", format!("rank {} < 2", self.rank())));
        }
        let h = self.shape[0];
        let w = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * inner;
                let dst = (y * w + (w - 1 - x)) * inner;
                out[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    detail: format!("cannot broadcast {a:?} with {b:?}"),
                })
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// shape `in_shape` broadcast to it.
pub(crate) fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides(in_shape);
    // effective stride per output axis (0 where broadcast)
    let eff: Vec<usize> = (0..rank)
        .map(|i| {
            if i < offset || in_shape[i - offset] == 1 {
                0
            } else {
                in_strides[i - offset]
            }
        })
        .collect();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().numel(), 6);
        assert_eq!(Tensor::scalar(1.0).shape(), &[] as &[usize]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape("t", &[4, 1], &[1, 5]).unwrap(), vec![4, 5]);
        assert!(broadcast_shape("t", &[4, 3], &[2]).is_err());
    }

    #[test]
    fn broadcast_map_matches_manual() {
        let m = broadcast_index_map(&[3, 1], &[3, 2]);
        assert_eq!(m, vec![0, 0, 1, 1, 2, 2]);
        let m = broadcast_index_map(&[2], &[3, 2]);
        assert_eq!(m, vec![0, 1, 0, 1, 0, 1]);
        let m = broadcast_index_map(&[], &[2, 2]);
        assert_eq!(m, vec![0, 0, 0, 0]);
    }

    #[test]
    fn flip_is_involution() {
        let t = Tensor::from_fn(&[3, 4, 2], |i| i as f64);
        let f = t.flip_horizontal().unwrap();
        assert_eq!(f.data()[0..2], [6.0, 7.0]);
        assert_eq!(f.flip_horizontal().unwrap(), t);
    }
}
