//! Weakly supervised localization: CAM heatmaps, box extraction, IoU and the
//! GT-Loc / Top-1 Clas / Top-1 Loc metrics.

use std::collections::VecDeque;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DgdmError, Result};
use crate::nn::model::{argmax_rows, Model};
use crate::nn::train::stack_images;

/// Localization counts as correct from this IoU on.
pub const IOU_SUCCESS: f64 = 0.5;

/// Default binarization threshold, as a fraction of the heatmap maximum.
pub const DEFAULT_THRESHOLD_FRACTION: f64 = 0.2;

/// Axis-aligned box covering `[x_min, x_max) x [y_min, y_max)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(DgdmError::InvalidArgument(format!(
                "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn full(width: u32, height: u32) -> Self {
        BBox {
            x_min: 0,
            y_min: 0,
            x_max: width,
            y_max: height,
        }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.x_max - self.x_min) * u64::from(self.y_max - self.y_min)
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self
            .x_max
            .min(other.x_max)
            .saturating_sub(self.x_min.max(other.x_min));
        let h = self
            .y_max
            .min(other.y_max)
            .saturating_sub(self.y_min.max(other.y_min));
        u64::from(w) * u64::from(h)
    }
}

/// IoU as an exact `(intersection, union)` pair of pixel areas.
pub fn iou_ratio(a: &BBox, b: &BBox) -> (u64, u64) {
    let inter = a.intersection_area(b);
    (inter, a.area() + b.area() - inter)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = iou_ratio(a, b);
    inter as f64 / union as f64
}

/// Largest IoU between `pred` and any ground-truth box.
pub fn best_iou(pred: &BBox, gt: &[BBox]) -> f64 {
    gt.iter().map(|g| iou(pred, g)).fold(0.0, f64::max)
}

/// Class activation heatmap normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap(Array2<f64>);

impl Heatmap {
    /// Min-max normalization; a constant map becomes all zeros.
    pub fn normalize(raw: &Array2<f64>) -> Heatmap {
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max.is_nan() || max <= min {
            return Heatmap(Array2::zeros(raw.dim()));
        }
        let span = max - min;
        Heatmap(raw.mapv(|v| ((v - min) / span).clamp(0.0, 1.0)))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    /// `(height, width)`
    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn bilinear_resize(src: ArrayView2<'_, f64>, height: usize, width: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.to_owned();
    }
    let coord = |dst: usize, src_len: usize, dst_len: usize| {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..width).map(|x| coord(x, sw, width)).collect();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = coord(y, sh, height);
        let (x0, x1, fx) = cols[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Unnormalized class activation map: `sum_c weights[c] * features[c]`.
pub fn raw_cam(features: ArrayView3<'_, f64>, weights: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
    let (c, h, w) = features.dim();
    if weights.len() != c {
        return Err(DgdmError::ShapeMismatch {
            expected: vec![c],
            actual: vec![weights.len()],
        });
    }
    let mut raw = Array2::zeros((h, w));
    for (chan, &wt) in features.axis_iter(Axis(0)).zip(weights) {
        raw.scaled_add(wt, &chan);
    }
    Ok(raw)
}

/// CAM heatmap of one image, upsampled to `(height, width)`.
pub fn extract_cam(
    features: ArrayView3<'_, f64>,
    weights: ArrayView1<'_, f64>,
    height: usize,
    width: usize,
) -> Result<Heatmap> {
    let normalized = Heatmap::normalize(&raw_cam(features, weights)?);
    // Bilinear weights sum to one, so renormalizing only restores the exact
    // [0, 1] range lost between grid points.
    Ok(Heatmap::normalize(&bilinear_resize(
        normalized.view(),
        height,
        width,
    )))
}

/// Boxes the largest 4-connected region of `map >= fraction * max(map)`.
///
/// Falls back to the full image when nothing is above the threshold (including
/// maps whose maximum is not positive). Equal-sized regions resolve to the one
/// reached first in raster order.
pub fn bbox_from_map(map: ArrayView2<'_, f64>, threshold_fraction: f64) -> BBox {
    let (h, w) = map.dim();
    let full = BBox::full(w as u32, h as u32);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_nan() || max <= 0.0 {
        log::debug!("heatmap has no positive mass; using the full image");
        return full;
    }
    let cut = threshold_fraction * max;
    let fg = map.mapv(|v| v >= cut);
    let mut seen = Array2::from_elem((h, w), false);
    let mut best: Option<(usize, BBox)> = None;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !fg[[y, x]] || seen[[y, x]] {
                continue;
            }
            seen[[y, x]] = true;
            queue.push_back((y, x));
            let (mut size, mut bb) = (0usize, (x, y, x, y));
            while let Some((cy, cx)) = queue.pop_front() {
                size += 1;
                bb = (bb.0.min(cx), bb.1.min(cy), bb.2.max(cx), bb.3.max(cy));
                let neighbours = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in neighbours {
                    if ny < h && nx < w && fg[[ny, nx]] && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            if best.is_none_or(|(s, _)| size > s) {
                let bbox = BBox {
                    x_min: bb.0 as u32,
                    y_min: bb.1 as u32,
                    x_max: bb.2 as u32 + 1,
                    y_max: bb.3 as u32 + 1,
                };
                best = Some((size, bbox));
            }
        }
    }
    best.map_or_else(
        || {
            log::debug!("empty foreground after thresholding; using the full image");
            full
        },
        |(_, b)| b,
    )
}

pub fn heatmap_to_bbox(h: &Heatmap, threshold_fraction: f64) -> BBox {
    bbox_from_map(h.view(), threshold_fraction)
}

/// Per-image localization outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub image_id: String,
    pub true_class: usize,
    pub pred_class: usize,
    /// Box from the ground-truth class heatmap (GT-Loc).
    pub gt_class_box: BBox,
    /// Box from the predicted class heatmap (Top-1 Loc).
    pub pred_class_box: BBox,
    pub gt_boxes: Vec<BBox>,
    pub gt_class_iou: f64,
    pub pred_class_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub gt_loc: f64,
    pub top1_clas: f64,
    pub top1_loc: f64,
    pub n_records: usize,
    pub threshold_fraction: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "gt_loc,top1_clas,top1_loc,n_records,threshold_fraction";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.gt_loc, self.top1_clas, self.top1_loc, self.n_records, self.threshold_fraction
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

fn percent(count: usize, n: usize) -> f64 {
    100.0 * count as f64 / n as f64
}

pub fn compute_metrics(
    records: &[LocalizationRecord],
    threshold_fraction: f64,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(DgdmError::InvalidArgument(
            "cannot compute metrics of zero records".into(),
        ));
    }
    let (mut gt_loc, mut clas, mut loc) = (0, 0, 0);
    for r in records {
        let correct = r.pred_class == r.true_class;
        gt_loc += usize::from(r.gt_class_iou >= IOU_SUCCESS);
        clas += usize::from(correct);
        loc += usize::from(correct && r.pred_class_iou >= IOU_SUCCESS);
    }
    let n = records.len();
    Ok(MetricsReport {
        gt_loc: percent(gt_loc, n),
        top1_clas: percent(clas, n),
        top1_loc: percent(loc, n),
        n_records: n,
        threshold_fraction,
    })
}

/// Per-record CSV used for independent recounts of a report.
pub fn records_to_csv(records: &[LocalizationRecord]) -> String {
    let mut out = String::from(
        "image_id,true_class,pred_class,gt_class_iou,pred_class_iou,\
         gt_x_min,gt_y_min,gt_x_max,gt_y_max,pred_x_min,pred_y_min,pred_x_max,pred_y_max\n",
    );
    for r in records {
        let g = r.gt_class_box;
        let p = r.pred_class_box;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.image_id,
            r.true_class,
            r.pred_class,
            r.gt_class_iou,
            r.pred_class_iou,
            g.x_min,
            g.y_min,
            g.x_max,
            g.y_max,
            p.x_min,
            p.y_min,
            p.x_max,
            p.y_max
        )
        .expect("string write");
    }
    out
}

/// CAM heatmaps of one image for the given class, at input resolution.
pub fn class_heatmap(
    model: &Model,
    features: ArrayView3<'_, f64>,
    class: usize,
    height: usize,
    width: usize,
) -> Result<Heatmap> {
    extract_cam(features, model.params.fc_weight.row(class), height, width)
}

/// Runs the model in evaluation mode over `data` and builds one record per image.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    threshold_fraction: f64,
    batch_size: usize,
) -> Result<(Vec<LocalizationRecord>, MetricsReport)> {
    if data.samples.is_empty() {
        return Err(DgdmError::EmptyDataset("no evaluation samples".into()));
    }
    let classes = model.spec().num_classes;
    let mut records = Vec::with_capacity(data.samples.len());
    let indices: Vec<usize> = (0..data.samples.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = stack_images(data, chunk)?;
        let (_, _, ih, iw) = images.dim();
        let fwd = model.predict(&images)?;
        let preds = argmax_rows(&fwd.logits);
        for (slot, &i) in chunk.iter().enumerate() {
            let sample = &data.samples[i];
            if sample.label >= classes {
                return Err(DgdmError::InvalidArgument(format!(
                    "label {} out of range for {classes} classes",
                    sample.label
                )));
            }
            let feats = fwd.features.index_axis(Axis(0), slot);
            let gt_heat = class_heatmap(model, feats, sample.label, ih, iw)?;
            let gt_class_box = heatmap_to_bbox(&gt_heat, threshold_fraction);
            let pred_class_box = if preds[slot] == sample.label {
                gt_class_box
            } else {
                let heat = class_heatmap(model, feats, preds[slot], ih, iw)?;
                heatmap_to_bbox(&heat, threshold_fraction)
            };
            records.push(LocalizationRecord {
                image_id: sample.id.clone(),
                true_class: sample.label,
                pred_class: preds[slot],
                gt_class_box,
                pred_class_box,
                gt_boxes: sample.boxes.clone(),
                gt_class_iou: best_iou(&gt_class_box, &sample.boxes),
                pred_class_iou: best_iou(&pred_class_box, &sample.boxes),
            });
        }
    }
    let report = compute_metrics(&records, threshold_fraction)?;
    Ok((records, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn bb(a: u32, b: u32, c: u32, d: u32) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bb(0, 0, 2, 2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(5, 5, 6, 6)), 0.0);
        assert_eq!(iou_ratio(&a, &bb(1, 1, 3, 3)), (1, 7));
        assert_eq!(iou(&a, &bb(1, 1, 3, 3)), 1.0 / 7.0);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BBox::new(2, 0, 2, 3).is_err());
        assert!(BBox::new(0, 3, 2, 1).is_err());
    }

    #[test]
    fn single_channel_cam_is_normalized_copy() {
        let f = Array3::from_shape_vec((1, 2, 2), vec![1.0, 3.0, 5.0, 2.0]).unwrap();
        let h = extract_cam(f.view(), array![1.0].view(), 2, 2).unwrap();
        assert_eq!(h.view(), array![[0.0, 0.5], [1.0, 0.25]]);
    }

    #[test]
    fn zero_weights_give_zero_heatmap() {
        let f = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c + y * x) as f64);
        let h = extract_cam(f.view(), array![0.0, 0.0, 0.0].view(), 8, 8).unwrap();
        assert_eq!(h.dims(), (8, 8));
        assert!(h.view().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cam_channel_mismatch_rejected() {
        let f = Array3::<f64>::zeros((3, 2, 2));
        assert!(extract_cam(f.view(), array![1.0, 2.0].view(), 2, 2).is_err());
    }

    #[test]
    fn upsampled_heatmap_spans_unit_range() {
        let f = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| (c * 3 + y * 2 + x) as f64);
        let h = extract_cam(f.view(), array![0.5, -0.25].view(), 32, 32).unwrap();
        let max = h.view().iter().copied().fold(f64::MIN, f64::max);
        let min = h.view().iter().copied().fold(f64::MAX, f64::min);
        assert_eq!((min, max), (0.0, 1.0));
    }

    #[test]
    fn block_heatmap_box() {
        let mut m = Array2::zeros((4, 4));
        m.slice_mut(ndarray::s![1..3, 1..3]).fill(1.0);
        let h = Heatmap::normalize(&m);
        assert_eq!(heatmap_to_bbox(&h, 0.2), bb(1, 1, 3, 3));
    }

    #[test]
    fn largest_component_wins() {
        let m = array![
            [1.0, 1.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 0.0, 1.0, 1.0],
        ];
        assert_eq!(bbox_from_map(m.view(), 0.2), bb(3, 1, 5, 4));
    }

    #[test]
    fn empty_heatmap_gives_full_box() {
        let h = Heatmap::normalize(&Array2::zeros((6, 5)));
        assert_eq!(heatmap_to_bbox(&h, 0.2), BBox::full(5, 6));
    }

    fn record(
        true_class: usize,
        pred_class: usize,
        gt_iou: f64,
        pred_iou: f64,
    ) -> LocalizationRecord {
        LocalizationRecord {
            image_id: String::new(),
            true_class,
            pred_class,
            gt_class_box: BBox::full(1, 1),
            pred_class_box: BBox::full(1, 1),
            gt_boxes: vec![BBox::full(1, 1)],
            gt_class_iou: gt_iou,
            pred_class_iou: pred_iou,
        }
    }

    #[test]
    fn metric_examples() {
        let perfect: Vec<_> = (0..5).map(|i| record(i % 3, i % 3, 1.0, 1.0)).collect();
        let m = compute_metrics(&perfect, 0.2).unwrap();
        assert_eq!((m.gt_loc, m.top1_clas, m.top1_loc), (100.0, 100.0, 100.0));

        let weak: Vec<_> = (0..5).map(|_| record(1, 1, 0.4, 0.4)).collect();
        let m = compute_metrics(&weak, 0.2).unwrap();
        assert_eq!((m.gt_loc, m.top1_clas, m.top1_loc), (0.0, 100.0, 0.0));

        assert!(compute_metrics(&[], 0.2).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let r = MetricsReport {
            gt_loc: 50.0,
            top1_clas: 75.0,
            top1_loc: 25.0,
            n_records: 4,
            threshold_fraction: 0.2,
        };
        assert_eq!(
            r.to_csv(),
            "gt_loc,top1_clas,top1_loc,n_records,threshold_fraction\n50,75,25,4,0.2\n"
        );
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
