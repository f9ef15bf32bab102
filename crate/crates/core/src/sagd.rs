//! Spatial attention guided dropblock.
//!
//! Pixels of the self-attention map that fall below `delta_l * max` (background)
//! or above `delta_h * max` (the most discriminative part) seed square blocks
//! that are erased from every channel of the feature map.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::attention::SpatialAttentionMap;
use crate::error::{DgdmError, Result};
use crate::tensor::{check_shape, FeatureMap};

/// Side length of an erased block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockSize {
    Fixed(usize),
    /// `floor(min(H, W) / 7)`, at least 1.
    Adaptive7,
}

impl BlockSize {
    pub fn resolve(self, height: usize, width: usize) -> usize {
        match self {
            BlockSize::Fixed(n) => n,
            BlockSize::Adaptive7 => (height.min(width) / 7).max(1),
        }
    }
}

impl fmt::Display for BlockSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockSize::Fixed(n) => write!(f, "{n}"),
            BlockSize::Adaptive7 => f.write_str("adaptive_7"),
        }
    }
}

impl FromStr for BlockSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adaptive_7" | "adap_7" | "adap7" => Ok(BlockSize::Adaptive7),
            _ => match s.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(BlockSize::Fixed(n)),
                _ => Err(format!(
                    "expected a positive integer or adaptive_7, got `{s}`"
                )),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SagdConfig {
    /// Background cutoff as a fraction of the per-sample attention maximum.
    pub delta_l: f64,
    /// Discriminative cutoff as a fraction of the per-sample attention maximum.
    pub delta_h: f64,
    /// Block size for seeds above the discriminative cutoff.
    pub block_size_high: BlockSize,
    /// Block size for seeds below the background cutoff.
    pub block_size_low: BlockSize,
}

impl Default for SagdConfig {
    fn default() -> Self {
        SagdConfig {
            delta_l: 0.10,
            delta_h: 0.90,
            block_size_high: BlockSize::Fixed(2),
            block_size_low: BlockSize::Fixed(3),
        }
    }
}

impl SagdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta_l) {
            return Err(DgdmError::config("sagd.delta_l", "must lie in [0, 1)"));
        }
        if !(self.delta_h > 0.0 && self.delta_h <= 1.0) {
            return Err(DgdmError::config("sagd.delta_h", "must lie in (0, 1]"));
        }
        if self.delta_l >= self.delta_h {
            return Err(DgdmError::config(
                "sagd.delta_l",
                "must be smaller than sagd.delta_h",
            ));
        }
        for (key, b) in [
            ("sagd.block_size_high", self.block_size_high),
            ("sagd.block_size_low", self.block_size_low),
        ] {
            if b == BlockSize::Fixed(0) {
                return Err(DgdmError::config(key, "must be at least 1"));
            }
        }
        Ok(())
    }
}

pub fn resolve_block_size(block: BlockSize, height: usize, width: usize) -> usize {
    block.resolve(height, width)
}

/// Binary mask over `(batch, height, width)`; `true` keeps the pixel.
///
/// Used both for the raw threshold seeds and for the dilated drop mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialDropMask(Array3<bool>);

pub type SeedMask = SpatialDropMask;

impl SpatialDropMask {
    pub fn new(mask: Array3<bool>) -> Self {
        SpatialDropMask(mask)
    }

    pub fn ones(batch: usize, height: usize, width: usize) -> Self {
        SpatialDropMask(Array3::from_elem((batch, height, width), true))
    }

    pub fn view(&self) -> ArrayView3<'_, bool> {
        self.0.view()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn dropped_fraction(&self) -> f64 {
        self.0.iter().filter(|&&k| !k).count() as f64 / self.0.len() as f64
    }

    /// Pixelwise AND of the kept regions.
    pub fn intersect(&self, other: &SpatialDropMask) -> Result<SpatialDropMask> {
        check_shape(self.0.shape(), other.0.shape())?;
        Ok(SpatialDropMask(
            Zip::from(&self.0)
                .and(&other.0)
                .map_collect(|&a, &b| a && b),
        ))
    }
}

/// Threshold seeds split by cause.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdSeeds {
    /// Zero where attention exceeds `delta_h * max`.
    pub high: SeedMask,
    /// Zero where attention is below `delta_l * max`.
    pub low: SeedMask,
}

pub fn threshold_seeds(m: &SpatialAttentionMap, cfg: &SagdConfig) -> ThresholdSeeds {
    let view = m.view();
    let mut high = Array3::from_elem(view.dim(), true);
    let mut low = Array3::from_elem(view.dim(), true);
    for (bi, sample) in view.axis_iter(Axis(0)).enumerate() {
        let max = sample.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = sample.iter().copied().fold(f64::INFINITY, f64::min);
        if max == min {
            // A flat map carries no attention signal.
            continue;
        }
        let (lo_cut, hi_cut) = (cfg.delta_l * max, cfg.delta_h * max);
        for ((h, w), &v) in sample.indexed_iter() {
            high[[bi, h, w]] = v <= hi_cut;
            low[[bi, h, w]] = v >= lo_cut;
        }
    }
    ThresholdSeeds {
        high: SpatialDropMask(high),
        low: SpatialDropMask(low),
    }
}

/// Seed mask with both thresholds applied: zero iff the pixel is below the
/// background cutoff or above the discriminative cutoff (strict inequalities).
/// A sample whose map is constant produces no seeds.
pub fn spatial_seed_mask(m: &SpatialAttentionMap, cfg: &SagdConfig) -> SeedMask {
    let seeds = threshold_seeds(m, cfg);
    seeds
        .high
        .intersect(&seeds.low)
        .expect("seed masks share a shape")
}

/// Expands every zero seed into a `block_size` square.
///
/// The block starts at the seed and extends down and to the right. Near the
/// bottom or right border it is shifted back inside the map so it always keeps
/// its full size and still covers the seed. A block size larger than the map
/// is clamped to the map.
pub fn dilate_to_blocks(seed: &SeedMask, block_size: usize) -> Result<SpatialDropMask> {
    if block_size == 0 {
        return Err(DgdmError::InvalidArgument("block_size must be >= 1".into()));
    }
    let (b, h, w) = seed.dims();
    let side = h.min(w);
    let block = if block_size > side {
        log::warn!("block_size {block_size} exceeds feature map {h}x{w}; clamping to {side}");
        side
    } else {
        block_size
    };
    if block == 1 {
        return Ok(seed.clone());
    }
    let mut out = Array3::from_elem((b, h, w), true);
    for ((bi, y, x), &keep) in seed.0.indexed_iter() {
        if keep {
            continue;
        }
        let top = y.min(h - block);
        let left = x.min(w - block);
        out.slice_mut(ndarray::s![bi, top..top + block, left..left + block])
            .fill(false);
    }
    Ok(SpatialDropMask(out))
}

/// Full SAGD mask. Discriminative seeds are dilated with `block_size_high`;
/// background seeds, when enabled, with `block_size_low`.
pub fn spatial_drop_mask(
    m: &SpatialAttentionMap,
    cfg: &SagdConfig,
    use_background: bool,
) -> Result<SpatialDropMask> {
    let (_, h, w) = m.dims();
    let seeds = threshold_seeds(m, cfg);
    let high = dilate_to_blocks(&seeds.high, cfg.block_size_high.resolve(h, w))?;
    if !use_background {
        return Ok(high);
    }
    let low = dilate_to_blocks(&seeds.low, cfg.block_size_low.resolve(h, w))?;
    high.intersect(&low)
}

/// Multiplies every channel by the shared spatial mask. No rescaling.
pub fn apply_spatial_mask(f: &FeatureMap, m: &SpatialDropMask) -> Result<FeatureMap> {
    let (b, c, h, w) = f.dims();
    check_shape(&[b, h, w], m.0.shape())?;
    let mut out = f.as_array().clone();
    for ci in 0..c {
        Zip::from(out.slice_mut(ndarray::s![.., ci, .., ..]))
            .and(&m.0)
            .for_each(|v, &keep| {
                if !keep {
                    *v = 0.0;
                }
            });
    }
    FeatureMap::new(out)
}
