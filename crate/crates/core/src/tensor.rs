//! Activation containers shared by the attention kernels and the network.

use ndarray::{Array4, ArrayView4, Dimension, IntoDimension};

use crate::error::{DgdmError, Result};

/// A batch of convolutional activations laid out as `(batch, channels, height, width)`.
///
/// Construction validates that every dimension is non-empty and every entry is
/// finite, so the kernels downstream never see NaN or infinities.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Array4<f64>);

impl FeatureMap {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        check_non_empty(data.shape())?;
        check_finite(&data)?;
        Ok(FeatureMap(data))
    }

    pub fn zeros(shape: (usize, usize, usize, usize)) -> Result<Self> {
        FeatureMap::new(Array4::zeros(shape))
    }

    /// `(batch, channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }

    pub fn view(&self) -> ArrayView4<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.0
    }
}

pub(crate) fn check_non_empty(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(DgdmError::EmptyDimension {
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn check_finite<D: Dimension>(data: &ndarray::Array<f64, D>) -> Result<()> {
    if let Some((idx, &v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(DgdmError::NonFinite {
            index: idx.into_dimension().slice().to_vec(),
            value: v,
        });
    }
    Ok(())
}

pub(crate) fn check_shape(expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected != actual {
        return Err(DgdmError::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}
