//! Square pixel grids and unit-box images.

use std::ops::Deref;

use crate::error::{ensure_len, Error, Result};
use crate::scalar::Real;

/// Row-major `side × side` field of reals. Gradients, backprojections and
/// other unconstrained image-shaped quantities live here.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    side: usize,
    data: Vec<T>,
}

impl<T: Real> Grid<T> {
    pub fn zeros(side: usize) -> Self {
        Self::filled(side, T::zero())
    }

    pub fn filled(side: usize, value: T) -> Self {
        Self {
            side,
            data: vec![value; side * side],
        }
    }

    pub fn from_vec(side: usize, data: Vec<T>) -> Result<Self> {
        if side == 0 {
            return Err(Error::invalid("grid side must be at least 1"));
        }
        ensure_len(side * side, data.len())?;
        Ok(Self { side, data })
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                data.push(f(row, col));
            }
        }
        Self { side, data }
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.side + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.side + col] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            side: self.side,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: T, other: &Self) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn ensure_side(&self, side: usize) -> Result<()> {
        ensure_len(side, self.side)
    }

    pub fn cast<U: Real>(&self) -> Grid<U> {
        Grid {
            side: self.side,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_unit_box(&self) -> bool {
        self.data
            .iter()
            .all(|&v| v >= T::zero() && v <= T::one())
    }
}

/// Attenuation image with every pixel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T>(Grid<T>);

impl<T: Real> Image<T> {
    /// Validates that every value lies in the unit box.
    pub fn new(grid: Grid<T>) -> Result<Self> {
        if let Some(bad) = grid
            .as_slice()
            .iter()
            .find(|&&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(Error::invalid(format!(
                "image value {bad} outside [0, 1]"
            )));
        }
        Ok(Self(grid))
    }

    /// Projects onto the unit box. NaN maps to 0.
    pub fn clamped(mut grid: Grid<T>) -> Self {
        for v in grid.as_mut_slice() {
            *v = if v.is_nan() { T::zero() } else { v.clamp_unit() };
        }
        Self(grid)
    }

    pub fn zeros(side: usize) -> Self {
        Self(Grid::zeros(side))
    }

    pub fn constant(side: usize, value: T) -> Result<Self> {
        Self::new(Grid::filled(side, value))
    }

    pub fn from_vec(side: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Grid::from_vec(side, data)?)
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<T> {
        self.0
    }

    /// Pixel-wise mean of equally sized images.
    pub fn mean_of(images: &[Self]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("mean of an empty image set"))?;
        let mut acc = Grid::zeros(first.side());
        for img in images {
            img.ensure_side(first.side())?;
            acc.add_scaled(T::one(), img);
        }
        let inv = T::one() / T::lit(images.len() as f64);
        Ok(Self::clamped(acc.map(|v| v * inv)))
    }

    /// 2×2 block average; the side must be even.
    pub fn downsample2(&self) -> Result<Self> {
        let side = self.side();
        if side % 2 != 0 {
            return Err(Error::invalid("downsample2 needs an even side"));
        }
        let half = side / 2;
        let quarter = T::lit(0.25);
        let g = Grid::from_fn(half, |r, c| {
            (self.get(2 * r, 2 * c)
                + self.get(2 * r, 2 * c + 1)
                + self.get(2 * r + 1, 2 * c)
                + self.get(2 * r + 1, 2 * c + 1))
                * quarter
        });
        Ok(Self::clamped(g))
    }
}

impl<T> Deref for Image<T> {
    type Target = Grid<T>;

    fn deref(&self) -> &Grid<T> {
        &self.0
    }
}

impl<T> AsRef<Grid<T>> for Image<T> {
    fn as_ref(&self) -> &Grid<T> {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_box() {
        assert!(Image::from_vec(2, vec![0.0, 0.5, 1.0, 1.01]).is_err());
        assert!(Image::from_vec(2, vec![0.0, 0.5, 1.0, f64::NAN]).is_err());
        assert!(Image::from_vec(2, vec![0.0, 0.5, 1.0, 0.2]).is_ok());
    }

    #[test]
    fn clamped_projects_onto_box() {
        let g = Grid::from_vec(2, vec![-1.0, 0.5, 2.0, f64::NAN]).unwrap();
        let img = Image::clamped(g);
        assert_eq!(img.as_slice(), &[0.0, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = Image::from_vec(
            4,
            (0..16).map(|i| i as f64 / 16.0).collect(),
        )
        .unwrap();
        let small = img.downsample2().unwrap();
        assert_eq!(small.side(), 2);
        assert!((small.get(0, 0) - (0.0 + 1.0 + 4.0 + 5.0) / 64.0).abs() < 1e-15);
    }

    #[test]
    fn zero_side_rejected() {
        assert!(Grid::<f64>::from_vec(0, vec![]).is_err());
    }
}
