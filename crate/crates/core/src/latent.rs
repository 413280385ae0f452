use std::ops::{Add, Index, IndexMut, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `height × width` grid of latent values, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Latent {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension {
                expected: (height, width),
                got: (data.len(), 1),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn check_same_shape(&self, other: &Latent) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension {
                expected: self.dims(),
                got: other.dims(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    /// `a * self + b * other`, elementwise. Shapes must agree.
    pub fn lin_comb(&self, a: f64, other: &Latent, b: f64) -> Latent {
        debug_assert_eq!(self.dims(), other.dims());
        Latent {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Latent {
        self.map(|x| a * x)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Latent {
        Latent {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Latent) {
        debug_assert_eq!(self.dims(), other.dims());
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn dot(&self, other: &Latent) -> f64 {
        self.data.iter().zip(&other.data).map(|(x, y)| x * y).sum()
    }

    pub fn norm2_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm2(&self) -> f64 {
        self.norm2_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    pub fn sq_dist(&self, other: &Latent) -> f64 {
        self.data.iter().zip(&other.data).map(|(x, y)| (x - y) * (x - y)).sum()
    }
}

impl Index<(usize, usize)> for Latent {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.width + c]
    }
}

impl IndexMut<(usize, usize)> for Latent {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.width + c]
    }
}

impl Add for &Latent {
    type Output = Latent;

    fn add(self, rhs: &Latent) -> Latent {
        self.lin_comb(1.0, rhs, 1.0)
    }
}

impl Sub for &Latent {
    type Output = Latent;

    fn sub(self, rhs: &Latent) -> Latent {
        self.lin_comb(1.0, rhs, -1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Latent::from_vec(2, 2, vec![0.0; 3]).is_err());
        let l = Latent::from_vec(2, 3, (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(l[(1, 0)], 3.0);
        assert_eq!(l.get(1, 2), 5.0);
    }

    #[test]
    fn arithmetic() {
        let a = Latent::filled(2, 2, 1.0);
        let b = Latent::filled(2, 2, 3.0);
        assert_eq!((&a + &b).as_slice(), &[4.0; 4]);
        assert_eq!((&b - &a).as_slice(), &[2.0; 4]);
        assert_eq!(a.dot(&b), 12.0);
        assert_eq!(a.max_abs_diff(&b), 2.0);
        assert!(a.check_same_shape(&Latent::zeros(2, 3)).is_err());
    }
}
