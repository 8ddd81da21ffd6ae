use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Dense `[C × H × W]` tensor. One region-day image per tensor; there is no
/// batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{c}x{h}x{w} tensor needs {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        Ok(Tensor { c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).expect("finite cast"))
                .collect(),
        }
    }

    /// Channel-wise concatenation `[self; other]`.
    pub fn concat(&self, other: &Tensor<T>) -> Result<Self> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::ShapeMismatch(format!(
                "cannot concatenate {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            c: self.c + other.c,
            h: self.h,
            w: self.w,
            data,
        })
    }

    /// Splits channels into `[0, at)` and `[at, c)`.
    pub fn split_channels(&self, at: usize) -> (Self, Self) {
        let cut = at * self.plane();
        (
            Tensor {
                c: at,
                h: self.h,
                w: self.w,
                data: self.data[..cut].to_vec(),
            },
            Tensor {
                c: self.c - at,
                h: self.h,
                w: self.w,
                data: self.data[cut..].to_vec(),
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
