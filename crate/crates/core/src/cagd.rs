//! Channel attention guided dropout.
//!
//! Channels are ranked by the magnitude of their global-average-pooled
//! attention. Channels whose magnitude falls below `beta * min |S|` become drop
//! candidates and are zeroed independently with probability `alpha`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::ChannelAttention;
use crate::error::{DgdmError, Result};
use crate::tensor::{check_shape, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CagdConfig {
    /// Probability of zeroing a drop candidate.
    pub alpha: f64,
    /// Threshold multiplier applied to the smallest attention magnitude.
    pub beta: f64,
}

impl Default for CagdConfig {
    fn default() -> Self {
        CagdConfig {
            alpha: 0.5,
            beta: 3.0,
        }
    }
}

impl CagdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DgdmError::config("cagd.alpha", "must lie in [0, 1]"));
        }
        if !self.beta.is_finite() || self.beta < 1.0 {
            return Err(DgdmError::config(
                "cagd.beta",
                "must be a finite value >= 1",
            ));
        }
        Ok(())
    }
}

/// Binary per-sample channel mask, shape `(batch, channels)`; `true` keeps the channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMask(Array2<bool>);

impl ChannelMask {
    pub fn new(mask: Array2<bool>) -> Self {
        ChannelMask(mask)
    }

    pub fn ones(batch: usize, channels: usize) -> Self {
        ChannelMask(Array2::from_elem((batch, channels), true))
    }

    pub fn view(&self) -> ArrayView2<'_, bool> {
        self.0.view()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn dropped_fraction(&self) -> f64 {
        self.0.iter().filter(|&&k| !k).count() as f64 / self.0.len() as f64
    }
}

/// Indices of the `k` largest-magnitude channel attentions of every sample,
/// returned in rank order. Ties go to the lower channel index.
pub fn topk_channels(s: &ChannelAttention, k: usize) -> Result<Vec<Vec<usize>>> {
    let (_, c) = s.dims();
    if k == 0 || k > c {
        return Err(DgdmError::InvalidArgument(format!(
            "top-k requires 1 <= k <= {c}, got k = {k}"
        )));
    }
    Ok(s.view()
        .axis_iter(Axis(0))
        .map(|row| {
            let mut idx: Vec<usize> = (0..c).collect();
            // Stable sort keeps lower indices first among equal magnitudes.
            idx.sort_by(|&a, &b| row[b].abs().total_cmp(&row[a].abs()));
            idx.truncate(k);
            idx
        })
        .collect())
}

/// Samples the channel drop mask for every sample of the batch.
///
/// A channel is a candidate when `|S_c| < beta * min |S|`. When that threshold
/// is zero, only channels with exactly zero attention are candidates. The
/// largest-magnitude channel is never dropped, so a sample can never lose
/// every channel.
pub fn channel_drop_mask<R: Rng + ?Sized>(
    s: &ChannelAttention,
    cfg: &CagdConfig,
    rng: &mut R,
) -> ChannelMask {
    let (b, c) = s.dims();
    let mut mask = Array2::from_elem((b, c), true);
    for (row, mut out) in s.view().axis_iter(Axis(0)).zip(mask.axis_iter_mut(Axis(0))) {
        let min = row.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let tau = cfg.beta * min;
        let mut keeper = 0;
        for ci in 1..c {
            if row[ci].abs() > row[keeper].abs() {
                keeper = ci;
            }
        }
        for ci in 0..c {
            let mag = row[ci].abs();
            let candidate = if tau == 0.0 { mag == 0.0 } else { mag < tau };
            if !candidate || ci == keeper {
                continue;
            }
            if rng.random::<f64>() < cfg.alpha {
                out[ci] = false;
            }
        }
    }
    ChannelMask(mask)
}

/// Zeroes masked channels; surviving channels pass through unscaled.
pub fn apply_channel_mask(f: &FeatureMap, m: &ChannelMask) -> Result<FeatureMap> {
    let (b, c, _, _) = f.dims();
    check_shape(&[b, c], m.0.shape())?;
    let mut out = f.as_array().clone();
    for ((bi, ci), &keep) in m.0.indexed_iter() {
        if !keep {
            out.slice_mut(ndarray::s![bi, ci, .., ..]).fill(0.0);
        }
    }
    FeatureMap::new(out)
}
