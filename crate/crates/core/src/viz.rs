//! PNG renderings of inputs, heatmaps and box overlays.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array3;

use crate::data::array_to_image;
use crate::error::{DgdmError, Result};
use crate::eval::{BBox, Heatmap};

pub const GT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const PRED_COLOR: Rgb<u8> = Rgb([0, 255, 0]);

/// Jet colormap: 0 is dark blue, 1 is dark red.
pub fn colormap(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let ch = |centre: f64| ((1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ch(3.0), ch(2.0), ch(1.0)])
}

pub fn render_heatmap(h: &Heatmap) -> RgbImage {
    let view = h.view();
    let (height, width) = h.dims();
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        colormap(view[[y as usize, x as usize]])
    })
}

/// One-pixel box outline, clipped to the image.
pub fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let x1 = b.x_max.min(w).saturating_sub(1);
    let y1 = b.y_max.min(h).saturating_sub(1);
    let (x0, y0) = (b.x_min.min(x1), b.y_min.min(y1));
    for x in x0..=x1 {
        img.put_pixel(x, y0, color);
        img.put_pixel(x, y1, color);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, color);
        img.put_pixel(x1, y, color);
    }
}

/// Input blended half-and-half with the color-mapped heatmap, predicted box in
/// green and ground-truth boxes in red on top.
pub fn render_overlay(
    image: &Array3<f64>,
    heat: &Heatmap,
    gt: &[BBox],
    pred: Option<&BBox>,
) -> Result<RgbImage> {
    let (_, ih, iw) = image.dim();
    if heat.dims() != (ih, iw) {
        return Err(DgdmError::ShapeMismatch {
            expected: vec![ih, iw],
            actual: vec![heat.dims().0, heat.dims().1],
        });
    }
    let base = array_to_image(image);
    let hm = render_heatmap(heat);
    let mut out = RgbImage::from_fn(iw as u32, ih as u32, |x, y| {
        let a = base.get_pixel(x, y);
        let b = hm.get_pixel(x, y);
        Rgb(std::array::from_fn(|c| {
            (u16::from(a[c]) + u16::from(b[c])).div_ceil(2) as u8
        }))
    });
    if let Some(p) = pred {
        draw_box(&mut out, p, PRED_COLOR);
    }
    for g in gt {
        draw_box(&mut out, g, GT_COLOR);
    }
    Ok(out)
}

fn save(img: &RgbImage, path: PathBuf) -> Result<PathBuf> {
    img.save(&path).map_err(|source| DgdmError::Image {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Writes `<id>_input.png`, `<id>_heatmap.png` and `<id>_overlay.png` into `dir`.
pub fn write_visualization(
    dir: &Path,
    id: &str,
    image: &Array3<f64>,
    heat: &Heatmap,
    gt: &[BBox],
    pred: Option<&BBox>,
) -> Result<[PathBuf; 3]> {
    Ok([
        save(&array_to_image(image), dir.join(format!("{id}_input.png")))?,
        save(&render_heatmap(heat), dir.join(format!("{id}_heatmap.png")))?,
        save(
            &render_overlay(image, heat, gt, pred)?,
            dir.join(format!("{id}_overlay.png")),
        )?,
    ])
}
