//! Browser demo: erase masks, importance maps and attention boxes on a
//! synthetic shapes image.

use dgdm::attention::{channelwise_average_pool, importance_map, SpatialAttentionMap};
use dgdm::data::{generate, Sample, SyntheticSpec};
use dgdm::eval::{bbox_from_map, best_iou, bilinear_resize, BBox};
use dgdm::layer::Stage;
use dgdm::sagd::{spatial_drop_mask, BlockSize, SagdConfig};
use dgdm::FeatureMap;
use ndarray::{s, Array2, Array4, Axis};
use wasm_bindgen::prelude::*;

/// Side of the square pooling window from image to feature map.
pub const POOL: usize = 4;

#[wasm_bindgen]
pub struct Demo {
    sample: Sample,
    features: FeatureMap,
    attention: SpatialAttentionMap,
}

fn js_err(e: dgdm::DgdmError) -> JsError {
    JsError::new(&e.to_string())
}

/// Per-channel absolute contrast against the border median, average pooled.
fn contrast_features(sample: &Sample) -> FeatureMap {
    let (c, h, w) = sample.image.dim();
    let (fh, fw) = (h / POOL, w / POOL);
    let mut f = Array4::zeros((1, c, fh, fw));
    for ch in 0..c {
        let plane = sample.image.index_axis(Axis(0), ch);
        let mut border: Vec<f64> = plane
            .row(0)
            .iter()
            .chain(plane.row(h - 1).iter())
            .copied()
            .collect();
        border.sort_by(f64::total_cmp);
        let bg = border[border.len() / 2];
        for y in 0..fh {
            for x in 0..fw {
                let cell = plane.slice(s![y * POOL..(y + 1) * POOL, x * POOL..(x + 1) * POOL]);
                f[[0, ch, y, x]] =
                    cell.iter().map(|v| (v - bg).abs()).sum::<f64>() / (POOL * POOL) as f64;
            }
        }
    }
    FeatureMap::new(f).expect("finite non-empty contrast features")
}

fn gray_rgba(map: &Array2<f64>) -> Vec<u8> {
    map.iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

impl Demo {
    pub fn from_sample(sample: Sample) -> Result<Demo, dgdm::DgdmError> {
        let features = contrast_features(&sample);
        let attention = channelwise_average_pool(&features);
        Ok(Demo {
            sample,
            features,
            attention,
        })
    }

    fn upsample(&self, map: &Array2<f64>) -> Array2<f64> {
        let (_, h, w) = self.sample.image.dim();
        bilinear_resize(map.view(), h, w)
    }

    /// Keep mask at feature resolution; `true` keeps the cell.
    pub fn keep_mask(
        &self,
        cfg: &SagdConfig,
        stage: Stage,
    ) -> Result<Array2<bool>, dgdm::DgdmError> {
        cfg.validate()?;
        let m = spatial_drop_mask(&self.attention, cfg, stage != Stage::Stage1)?;
        Ok(m.view().index_axis(Axis(0), 0).to_owned())
    }

    /// Attention box at image resolution and its IoU with the ground truth.
    pub fn attention_box(&self, threshold: f64) -> (BBox, f64) {
        let m = self.attention.view().index_axis(Axis(0), 0).to_owned();
        let b = bbox_from_map(self.upsample(&m).view(), threshold);
        (b, best_iou(&b, &self.sample.boxes))
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }
}

#[wasm_bindgen]
impl Demo {
    /// Builds the demo on one synthetic image of class `class` (0..3).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, class: usize, size: usize) -> Result<Demo, JsError> {
        let data = generate(&SyntheticSpec {
            n_images: 3,
            image_size: size,
            n_classes: 3,
            seed,
            ..SyntheticSpec::default()
        })
        .map_err(js_err)?;
        let sample = data
            .samples
            .into_iter()
            .find(|s| s.label == class)
            .ok_or_else(|| JsError::new("class must be 0, 1 or 2"))?;
        Demo::from_sample(sample).map_err(js_err)
    }

    pub fn width(&self) -> usize {
        self.sample.image.dim().2
    }

    pub fn height(&self) -> usize {
        self.sample.image.dim().1
    }

    pub fn class_name(&self) -> String {
        dgdm::data::SHAPE_NAMES[self.sample.label].to_string()
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        let img = &self.sample.image;
        let (_, h, w) = img.dim();
        let mut out = Vec::with_capacity(h * w * 4);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.push((img[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
                }
                out.push(255);
            }
        }
        out
    }

    /// The image with erased feature cells blacked out.
    pub fn drop_mask_rgba(
        &self,
        delta_l: f64,
        delta_h: f64,
        block_high: usize,
        block_low: usize,
        use_low: bool,
    ) -> Result<Vec<u8>, JsError> {
        let cfg = SagdConfig {
            delta_l,
            delta_h,
            block_size_high: BlockSize::Fixed(block_high),
            block_size_low: BlockSize::Fixed(block_low),
        };
        let stage = if use_low {
            Stage::Stage1And2
        } else {
            Stage::Stage1
        };
        let keep = self.keep_mask(&cfg, stage).map_err(js_err)?;
        let mut rgba = self.image_rgba();
        let w = self.width();
        for (i, px) in rgba.chunks_mut(4).enumerate() {
            if !keep[[(i / w) / POOL, (i % w) / POOL]] {
                px[..3].fill(0);
            }
        }
        Ok(rgba)
    }

    /// Fraction of feature cells erased by the same settings.
    pub fn dropped_fraction(
        &self,
        delta_l: f64,
        delta_h: f64,
        block_high: usize,
        block_low: usize,
        use_low: bool,
    ) -> Result<f64, JsError> {
        let cfg = SagdConfig {
            delta_l,
            delta_h,
            block_size_high: BlockSize::Fixed(block_high),
            block_size_low: BlockSize::Fixed(block_low),
        };
        let stage = if use_low {
            Stage::Stage1And2
        } else {
            Stage::Stage1
        };
        let keep = self.keep_mask(&cfg, stage).map_err(js_err)?;
        Ok(keep.iter().filter(|k| !**k).count() as f64 / keep.len() as f64)
    }

    /// Sigmoid importance map, upsampled, as grayscale.
    pub fn importance_rgba(&self) -> Vec<u8> {
        let imp = importance_map(&self.attention);
        gray_rgba(&self.upsample(&imp.view().index_axis(Axis(0), 0).to_owned()))
    }

    /// Min-max normalized attention map, upsampled, as grayscale.
    pub fn attention_rgba(&self) -> Vec<u8> {
        let m = self.attention.view().index_axis(Axis(0), 0).to_owned();
        let (lo, hi) = m
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let norm = if hi > lo {
            m.mapv(|v| (v - lo) / (hi - lo))
        } else {
            Array2::zeros(m.dim())
        };
        gray_rgba(&self.upsample(&norm))
    }

    /// `[x_min, y_min, x_max, y_max, iou]` of the box thresholded at
    /// `threshold` times the attention maximum.
    pub fn localize(&self, threshold: f64) -> Vec<f64> {
        let (b, iou) = self.attention_box(threshold);
        vec![
            b.x_min as f64,
            b.y_min as f64,
            b.x_max as f64,
            b.y_max as f64,
            iou,
        ]
    }

    /// `[x_min, y_min, x_max, y_max]` of the first ground-truth box.
    pub fn ground_truth(&self) -> Vec<u32> {
        let b = self.sample.boxes[0];
        vec![b.x_min, b.y_min, b.x_max, b.y_max]
    }
}
