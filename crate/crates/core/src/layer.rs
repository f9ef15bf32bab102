//! The dual-attention guided dropblock layer.
//!
//! During training each forward call picks, with probability `drop_rate`, the
//! spatial drop mask built by [`crate::sagd`]; otherwise the input is scaled by
//! the sigmoid importance map. The channel mask from [`crate::cagd`] is applied
//! afterwards in both cases. At evaluation the layer is the identity and holds
//! no parameters.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    channelwise_average_pool, global_average_pool, importance_map, ImportanceMap,
    SpatialAttentionMap,
};
use crate::cagd::{apply_channel_mask, channel_drop_mask, CagdConfig, ChannelMask};
use crate::error::{DgdmError, Result};
use crate::sagd::{apply_spatial_mask, spatial_drop_mask, SagdConfig, SpatialDropMask};
use crate::tensor::{check_shape, FeatureMap};

/// Which erasing components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Discriminative-region blocks only.
    Stage1,
    /// Discriminative and background blocks.
    Stage1And2,
    /// Both block kinds plus the channel mask.
    Full,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Stage1, Stage::Stage1And2, Stage::Full];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Stage1And2 => "stage1+2",
            Stage::Full => "full",
        })
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stage1" => Ok(Stage::Stage1),
            "stage1+2" => Ok(Stage::Stage1And2),
            "full" => Ok(Stage::Full),
            _ => Err(format!("expected stage1, stage1+2 or full, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgdmConfig {
    /// Probability of taking the drop-mask branch on a training forward.
    pub drop_rate: f64,
    pub cagd: CagdConfig,
    pub sagd: SagdConfig,
    pub stage: Stage,
    /// Channel mask switch; only honoured when `stage` is [`Stage::Full`].
    pub use_cagd: bool,
}

impl Default for DgdmConfig {
    fn default() -> Self {
        DgdmConfig {
            drop_rate: 0.75,
            cagd: CagdConfig::default(),
            sagd: SagdConfig::default(),
            stage: Stage::Full,
            use_cagd: true,
        }
    }
}

impl DgdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(DgdmError::config("dgdm.drop_rate", "must lie in [0, 1]"));
        }
        self.cagd.validate()?;
        self.sagd.validate()
    }

    pub fn background_blocks(&self) -> bool {
        self.stage != Stage::Stage1
    }

    pub fn channel_mask_active(&self) -> bool {
        self.stage == Stage::Full && self.use_cagd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    DropMask,
    ImportanceMap,
}

/// Everything a training forward decided, enough to replay it with frozen masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub branch: Branch,
    pub self_attention: SpatialAttentionMap,
    /// Present only on the importance branch.
    pub importance: Option<ImportanceMap>,
    /// Present only on the drop-mask branch.
    pub spatial_mask: Option<SpatialDropMask>,
    pub channel_mask: Option<ChannelMask>,
    pub dropped_pixel_fraction: f64,
    pub dropped_channel_fraction: f64,
}

/// Parameter-free DGDM layer; it only carries its configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dgdm {
    cfg: DgdmConfig,
}

impl Dgdm {
    pub fn new(cfg: DgdmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Dgdm { cfg })
    }

    pub fn config(&self) -> &DgdmConfig {
        &self.cfg
    }

    /// One training forward. Draws the branch first, then the channel mask.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        f: &FeatureMap,
        rng: &mut R,
    ) -> Result<(FeatureMap, ForwardTrace)> {
        let self_attention = channelwise_average_pool(f);
        let branch = if rng.random::<f64>() < self.cfg.drop_rate {
            Branch::DropMask
        } else {
            Branch::ImportanceMap
        };
        let (spatial_mask, importance) = match branch {
            Branch::DropMask => (
                Some(spatial_drop_mask(
                    &self_attention,
                    &self.cfg.sagd,
                    self.cfg.background_blocks(),
                )?),
                None,
            ),
            Branch::ImportanceMap => (None, Some(importance_map(&self_attention))),
        };
        let channel_mask = if self.cfg.channel_mask_active() {
            Some(channel_drop_mask(
                &global_average_pool(f),
                &self.cfg.cagd,
                rng,
            ))
        } else {
            None
        };
        let trace = ForwardTrace {
            branch,
            dropped_pixel_fraction: spatial_mask
                .as_ref()
                .map_or(0.0, SpatialDropMask::dropped_fraction),
            dropped_channel_fraction: channel_mask
                .as_ref()
                .map_or(0.0, ChannelMask::dropped_fraction),
            self_attention,
            importance,
            spatial_mask,
            channel_mask,
        };
        let out = forward_frozen(f, &trace)?;
        Ok((out, trace))
    }

    /// Evaluation forward: the identity.
    pub fn forward_eval(&self, f: &FeatureMap) -> FeatureMap {
        f.clone()
    }
}

/// Recomputes a training forward with the masks and branch of `trace`.
///
/// On the importance branch the importance map is recomputed from `f`, so this
/// is the function whose derivative [`backward`] returns.
pub fn forward_frozen(f: &FeatureMap, trace: &ForwardTrace) -> Result<FeatureMap> {
    let (b, _, h, w) = f.dims();
    check_shape(&[b, h, w], trace.self_attention.view().shape())?;
    let spatial = match trace.branch {
        Branch::DropMask => {
            let mask = trace.spatial_mask.as_ref().ok_or_else(|| {
                DgdmError::InvalidArgument("drop-mask trace without a spatial mask".into())
            })?;
            apply_spatial_mask(f, mask)?
        }
        Branch::ImportanceMap => {
            let imp = importance_map(&channelwise_average_pool(f));
            let mut out = f.as_array().clone();
            for mut chan in out.axis_iter_mut(Axis(1)) {
                chan *= &imp.view();
            }
            FeatureMap::new(out)?
        }
    };
    match &trace.channel_mask {
        Some(m) => apply_channel_mask(&spatial, m),
        None => Ok(spatial),
    }
}

/// Vector-Jacobian product of [`forward_frozen`]: the gradient of
/// `sum(grad_out * out)` with respect to `f`.
pub fn backward(
    f: &FeatureMap,
    trace: &ForwardTrace,
    grad_out: &Array4<f64>,
) -> Result<Array4<f64>> {
    let (b, c, h, w) = f.dims();
    check_shape(&[b, c, h, w], grad_out.shape())?;
    check_shape(&[b, h, w], trace.self_attention.view().shape())?;

    // Fold the channel mask into the upstream gradient first.
    let mut g = grad_out.clone();
    if let Some(m) = &trace.channel_mask {
        check_shape(&[b, c], m.view().shape())?;
        for ((bi, ci), &keep) in m.view().indexed_iter() {
            if !keep {
                g.slice_mut(ndarray::s![bi, ci, .., ..]).fill(0.0);
            }
        }
    }

    match trace.branch {
        Branch::DropMask => {
            let mask = trace.spatial_mask.as_ref().ok_or_else(|| {
                DgdmError::InvalidArgument("drop-mask trace without a spatial mask".into())
            })?;
            check_shape(&[b, h, w], mask.view().shape())?;
            for mut chan in g.axis_iter_mut(Axis(1)) {
                ndarray::Zip::from(&mut chan)
                    .and(mask.view())
                    .for_each(|v, &keep| {
                        if !keep {
                            *v = 0.0;
                        }
                    });
            }
            Ok(g)
        }
        Branch::ImportanceMap => {
            // out_c = f_c * s,  s = sigmoid(mean_c f)
            // d/df_c = g_c * s + s(1 - s) / C * sum_c' g_c' f_c'
            let imp = importance_map(&channelwise_average_pool(f));
            let s = imp.view();
            let fa = f.view();
            let mut coupling = Array3::<f64>::zeros((b, h, w));
            for ci in 0..c {
                coupling += &(&g.slice(ndarray::s![.., ci, .., ..])
                    * &fa.slice(ndarray::s![.., ci, .., ..]));
            }
            let coupling = ndarray::Zip::from(&coupling)
                .and(&s)
                .map_collect(|&acc, &sv| acc * sv * (1.0 - sv) / c as f64);
            let mut grad = g;
            for mut chan in grad.axis_iter_mut(Axis(1)) {
                ndarray::Zip::from(&mut chan)
                    .and(&s)
                    .and(&coupling)
                    .for_each(|v, &sv, &k| *v = *v * sv + k);
            }
            Ok(grad)
        }
    }
}

/// Gradient of the summed layer output with respect to its input, masks frozen.
///
/// On the drop-mask branch this is exactly the broadcast product of the spatial
/// and channel masks.
pub fn gradient_of_forward(f: &FeatureMap, trace: &ForwardTrace) -> Result<Array4<f64>> {
    backward(f, trace, &Array4::ones(f.dims()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64, shape: (usize, usize, usize, usize)) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(Array4::from_shape_simple_fn(shape, || {
            rng.random::<f64>() * 2.0
        }))
        .unwrap()
    }

    fn layer(drop_rate: f64) -> Dgdm {
        Dgdm::new(DgdmConfig {
            drop_rate,
            ..DgdmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn drop_rate_zero_always_uses_importance() {
        let l = Dgdm::new(DgdmConfig {
            drop_rate: 0.0,
            use_cagd: false,
            ..DgdmConfig::default()
        })
        .unwrap();
        let f = random_map(1, (2, 3, 4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (out, trace) = l.forward_train(&f, &mut rng).unwrap();
            assert_eq!(trace.branch, Branch::ImportanceMap);
            assert!(trace.spatial_mask.is_none());
            let imp = importance_map(&channelwise_average_pool(&f));
            for ((b, c, h, w), &v) in out.view().indexed_iter() {
                assert_eq!(v, f.view()[[b, c, h, w]] * imp.view()[[b, h, w]]);
            }
        }
    }

    #[test]
    fn drop_rate_one_always_uses_drop_mask() {
        let l = layer(1.0);
        let f = random_map(2, (1, 4, 6, 6));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (_, trace) = l.forward_train(&f, &mut rng).unwrap();
            assert_eq!(trace.branch, Branch::DropMask);
            assert!(trace.importance.is_none());
        }
    }

    #[test]
    fn eval_is_identity() {
        let l = layer(0.75);
        let f = random_map(4, (2, 3, 5, 5));
        let once = l.forward_eval(&f);
        assert_eq!(once, f);
        assert_eq!(l.forward_eval(&once), once);
    }

    #[test]
    fn seeded_forward_is_deterministic() {
        let l = layer(0.5);
        let f = random_map(5, (3, 8, 6, 6));
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            (0..20)
                .map(|_| l.forward_train(&f, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropped_pixels_are_zero_in_surviving_channels() {
        let l = layer(1.0);
        let f = random_map(6, (2, 6, 8, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (out, trace) = l.forward_train(&f, &mut rng).unwrap();
            assert_eq!(out.dims(), f.dims());
            let mask = trace.spatial_mask.unwrap();
            for ((b, c, h, w), &v) in out.view().indexed_iter() {
                if !mask.view()[[b, h, w]] {
                    assert_eq!(v, 0.0);
                } else if trace.channel_mask.as_ref().is_none_or(|m| m.view()[[b, c]]) {
                    assert_eq!(v, f.view()[[b, c, h, w]]);
                }
            }
        }
    }

    #[test]
    fn drop_branch_gradient_is_the_mask() {
        let l = layer(1.0);
        let f = random_map(8, (1, 4, 6, 6));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, trace) = l.forward_train(&f, &mut rng).unwrap();
        let grad = gradient_of_forward(&f, &trace).unwrap();
        let sm = trace.spatial_mask.as_ref().unwrap();
        for ((b, c, h, w), &g) in grad.indexed_iter() {
            let keep = sm.view()[[b, h, w]]
                && trace.channel_mask.as_ref().is_none_or(|m| m.view()[[b, c]]);
            assert_eq!(g, if keep { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn all_ones_masks_give_identity_gradient() {
        let f = random_map(9, (1, 2, 3, 3));
        let trace = ForwardTrace {
            branch: Branch::DropMask,
            self_attention: channelwise_average_pool(&f),
            importance: None,
            spatial_mask: Some(SpatialDropMask::ones(1, 3, 3)),
            channel_mask: Some(ChannelMask::ones(1, 2)),
            dropped_pixel_fraction: 0.0,
            dropped_channel_fraction: 0.0,
        };
        assert!(gradient_of_forward(&f, &trace)
            .unwrap()
            .iter()
            .all(|&g| g == 1.0));
        assert_eq!(forward_frozen(&f, &trace).unwrap(), f);
    }

    #[test]
    fn trace_shape_mismatch_rejected() {
        let l = layer(1.0);
        let f = random_map(10, (1, 2, 4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, trace) = l.forward_train(&f, &mut rng).unwrap();
        let other = random_map(11, (1, 2, 5, 5));
        assert!(gradient_of_forward(&other, &trace).is_err());
        assert!(forward_frozen(&other, &trace).is_err());
    }

    #[test]
    fn stage_flags() {
        let mut cfg = DgdmConfig::default();
        assert!(cfg.background_blocks() && cfg.channel_mask_active());
        cfg.stage = Stage::Stage1And2;
        assert!(cfg.background_blocks() && !cfg.channel_mask_active());
        cfg.stage = Stage::Stage1;
        assert!(!cfg.background_blocks() && !cfg.channel_mask_active());
        for s in Stage::ALL {
            assert_eq!(s.to_string().parse::<Stage>(), Ok(s));
        }
    }

    #[test]
    fn invalid_drop_rate_rejected() {
        assert!(Dgdm::new(DgdmConfig {
            drop_rate: 2.0,
            ..DgdmConfig::default()
        })
        .is_err());
    }
}
