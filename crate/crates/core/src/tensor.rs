//! Dense channel-last tensors.
//!
//! The last axis is always the channel axis. A rank-1 tensor `[C]` is a
//! feature with no spatial dimensions (e.g. the output of a fully connected
//! layer); a rank-4 `[T, H, W, C]` treats time as one more spatial axis.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    /// Rank-2 tensor from rows of equal length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err("ragged matrix rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        for v in &mut t.data {
            *v = if bound > 0.0 {
                rng.gen_range(-bound..bound)
            } else {
                0.0
            };
        }
        Ok(t)
    }

    pub fn randn<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        for v in &mut t.data {
            let z: f64 = StandardNormal.sample(rng);
            *v = sigma * z;
        }
        Ok(t)
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the channel (last) axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Non-channel extents.
    pub fn spatial_shape(&self) -> &[usize] {
        &self.shape[..self.shape.len() - 1]
    }

    /// Number of positions over the non-channel axes (1 for rank-1).
    pub fn spatial_len(&self) -> usize {
        self.spatial_shape().iter().product()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?} [{:?}, {:?}, ... {} values]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(dim_err("tensors must have rank >= 1"));
    }
    if shape.contains(&0) {
        return Err(Error::Domain(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

/// Row-major flat offset of a multi-index.
pub fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut off = 0;
    for (&extent, &i) in shape.iter().zip(index) {
        assert!(i < extent, "index {index:?} out of bounds for {shape:?}");
        off = off * extent + i;
    }
    off
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_data() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(Tensor::zeros(vec![2, 0]), Err(Error::Domain(_))));
        assert!(Tensor::zeros(Vec::<usize>::new()).is_err());
    }

    #[test]
    fn channel_last_accessors() {
        let t = Tensor::zeros(vec![2, 3, 4, 8]).unwrap();
        assert_eq!(t.channels(), 8);
        assert_eq!(t.spatial_shape(), &[2, 3, 4]);
        assert_eq!(t.spatial_len(), 24);
        let v = Tensor::vector(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v.spatial_len(), 1);
        assert_eq!(v.channels(), 3);
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(t.get(&[1, 0]), 3.0);
        assert_eq!(flat_index(&[2, 3, 4], &[1, 2, 3]), 23);
    }
}
