//! Parameter-free attention kernels: channelwise average pooling (the spatial
//! self-attention map), its sigmoid importance map, and global average pooling
//! (the channel attention vector).

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::Result;
use crate::tensor::{check_finite, check_non_empty, FeatureMap};

/// Per-sample spatial self-attention, shape `(batch, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionMap(Array3<f64>);

/// Sigmoid of a [`SpatialAttentionMap`]; every entry lies in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap(Array3<f64>);

/// Per-sample channel attention, shape `(batch, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention(Array2<f64>);

impl SpatialAttentionMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        check_non_empty(data.shape())?;
        check_finite(&data)?;
        Ok(SpatialAttentionMap(data))
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dim()
    }
}

impl ImportanceMap {
    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }
}

impl ChannelAttention {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        check_non_empty(values.shape())?;
        check_finite(&values)?;
        Ok(ChannelAttention(values))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Mean over the channel axis at every spatial position.
pub fn channelwise_average_pool(f: &FeatureMap) -> SpatialAttentionMap {
    let (_, c, _, _) = f.dims();
    let mut out = f.view().sum_axis(Axis(1));
    out /= c as f64;
    SpatialAttentionMap(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        // Same value, but exp never overflows for large negative inputs.
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn importance_map(m: &SpatialAttentionMap) -> ImportanceMap {
    ImportanceMap(m.0.mapv(sigmoid))
}

/// Mean over the spatial axes of every channel.
pub fn global_average_pool(f: &FeatureMap) -> ChannelAttention {
    let (b, c, h, w) = f.dims();
    let area = (h * w) as f64;
    let mut out = Array2::zeros((b, c));
    for ((bi, ci), v) in out.indexed_iter_mut() {
        *v = f.view().slice(ndarray::s![bi, ci, .., ..]).sum() / area;
    }
    ChannelAttention(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    fn fm(a: Array4<f64>) -> FeatureMap {
        FeatureMap::new(a).unwrap()
    }

    #[test]
    fn cap_two_channel_example() {
        let mut a = Array4::zeros((1, 2, 2, 2));
        a.slice_mut(ndarray::s![0, 0, .., ..])
            .assign(&array![[1.0, 3.0], [5.0, 7.0]]);
        a.slice_mut(ndarray::s![0, 1, .., ..])
            .assign(&array![[3.0, 1.0], [7.0, 5.0]]);
        let m = channelwise_average_pool(&fm(a));
        assert_eq!(
            m.view().index_axis(Axis(0), 0),
            array![[2.0, 2.0], [6.0, 6.0]]
        );
    }

    #[test]
    fn cap_single_channel_is_identity() {
        let a = Array4::from_shape_fn((2, 1, 3, 4), |(b, _, h, w)| {
            (b * 12 + h * 4 + w) as f64 * 0.37 - 1.0
        });
        let m = channelwise_average_pool(&fm(a.clone()));
        assert_eq!(m.view(), a.index_axis(Axis(1), 0));
    }

    #[test]
    fn importance_of_zero_is_half() {
        let m = SpatialAttentionMap::new(Array3::zeros((2, 3, 3))).unwrap();
        assert!(importance_map(&m).view().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn importance_saturates() {
        let m = SpatialAttentionMap::new(array![[[40.0, -40.0]]]).unwrap();
        let imp = importance_map(&m);
        assert!((imp.view()[[0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!(imp.view()[[0, 0, 1]].abs() < 1e-12);
        assert!(imp.view()[[0, 0, 1]] > 0.0);
    }

    #[test]
    fn gap_examples() {
        let mut a = Array4::from_elem((1, 2, 2, 2), 3.5);
        a.slice_mut(ndarray::s![0, 1, .., ..])
            .assign(&array![[1.0, 2.0], [3.0, 4.0]]);
        let s = global_average_pool(&fm(a));
        assert_eq!(s.view(), array![[3.5, 2.5]]);
    }
}
