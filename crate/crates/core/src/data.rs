//! Datasets: a seeded synthetic shapes generator and a folder-format reader.
//!
//! Folder layout: `root/<class_name>/<image>.png` plus `root/annotations.txt`
//! with one line per box, `relative/path x_min y_min x_max y_max class_id`,
//! space-delimited, in pixels, max coordinates exclusive.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DgdmError, Result};
use crate::eval::BBox;

pub const ANNOTATION_FILE: &str = "annotations.txt";

/// Caps the threads used to decode images in [`load_folder`].
pub const WORKERS_ENV: &str = "DGDM_NUM_WORKERS";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(3, height, width)`, values in `[0, 1]`.
    pub image: Array3<f64>,
    pub label: usize,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Class histogram.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// Target shapes, one per class, in class-index order.
pub const SHAPE_NAMES: [&str; 5] = ["square", "disc", "triangle", "cross", "diamond"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub n_classes: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Adds a striped patch whose pattern usually matches the class.
    pub distractors: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_images: 100,
            image_size: 64,
            n_classes: 3,
            noise: 0.05,
            distractors: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(DgdmError::config("data.image_size", "must be at least 32"));
        }
        if !(2..=SHAPE_NAMES.len()).contains(&self.n_classes) {
            return Err(DgdmError::config("data.n_classes", "must lie in 2..=5"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DgdmError::config(
                "data.noise",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Probability that a distractor patch carries its class's own pattern.
const DISTRACTOR_CO_OCCURRENCE: f64 = 0.7;

fn inside(shape: usize, dx: f64, dy: f64) -> bool {
    // dx, dy in [-1, 1] relative to the shape centre
    match shape {
        0 => true,
        1 => dx * dx + dy * dy <= 1.0,
        2 => {
            // apex at the top, base along the bottom edge
            let t = (dy + 1.0) / 2.0;
            dx.abs() <= t
        }
        3 => dx.abs() <= 1.0 / 3.0 || dy.abs() <= 1.0 / 3.0,
        _ => dx.abs() + dy.abs() <= 1.0,
    }
}

fn stripe(pattern: usize, x: usize, y: usize) -> bool {
    match pattern {
        0 => (y / 2).is_multiple_of(2),
        1 => (x / 2).is_multiple_of(2),
        2 => ((x + y) / 2).is_multiple_of(2),
        3 => ((x / 3) + (y / 3)).is_multiple_of(2),
        _ => x % 4 < 2 && y % 4 < 2,
    }
}

/// Generates a dataset that is a pure function of `spec`.
///
/// Each image holds one target shape whose type is the class label; its tight
/// pixel box is the ground truth. Labels are exactly balanced.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.n_images).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut rng);
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("finite std"));
    let n = spec.image_size;

    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let bg: f64 = rng.random_range(0.15..0.45);
            let mut image = Array3::from_elem((3, n, n), bg);

            let side = rng.random_range(n * 3 / 10..=n * 11 / 20);
            let x0 = rng.random_range(0..=n - side);
            let y0 = rng.random_range(0..=n - side);
            let color: [f64; 3] = [
                rng.random_range(0.6..1.0),
                rng.random_range(0.6..1.0),
                rng.random_range(0.6..1.0),
            ];
            let half = side as f64 / 2.0;
            let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    let dx = (x - x0) as f64 + 0.5 - half;
                    let dy = (y - y0) as f64 + 0.5 - half;
                    if inside(label, dx / half, dy / half) {
                        for (c, &v) in color.iter().enumerate() {
                            image[[c, y, x]] = v;
                        }
                        (bx0, by0, bx1, by1) = (bx0.min(x), by0.min(y), bx1.max(x), by1.max(y));
                    }
                }
            }
            let gt = BBox {
                x_min: bx0 as u32,
                y_min: by0 as u32,
                x_max: bx1 as u32 + 1,
                y_max: by1 as u32 + 1,
            };

            if spec.distractors {
                let patch = n / 4;
                let pattern = if rng.random::<f64>() < DISTRACTOR_CO_OCCURRENCE {
                    label
                } else {
                    rng.random_range(0..spec.n_classes)
                };
                let tint: f64 = rng.random_range(0.5..0.8);
                // A handful of tries to find a spot clear of the object.
                for _ in 0..16 {
                    let px = rng.random_range(0..=n - patch) as u32;
                    let py = rng.random_range(0..=n - patch) as u32;
                    let cand = BBox {
                        x_min: px,
                        y_min: py,
                        x_max: px + patch as u32,
                        y_max: py + patch as u32,
                    };
                    if cand.intersection_area(&gt) > 0 {
                        continue;
                    }
                    for y in 0..patch {
                        for x in 0..patch {
                            if stripe(pattern, x, y) {
                                for c in 0..3 {
                                    image[[c, py as usize + y, px as usize + x]] = tint;
                                }
                            }
                        }
                    }
                    break;
                }
            }

            if let Some(normal) = &noise {
                image.mapv_inplace(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0));
            }
            Sample {
                id: format!("{i:05}"),
                image,
                label,
                boxes: vec![gt],
            }
        })
        .collect();

    Ok(Dataset {
        class_names: SHAPE_NAMES[..spec.n_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        samples,
    })
}

pub fn image_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

pub fn array_to_image(a: &Array3<f64>) -> RgbImage {
    let (_, h, w) = a.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (a[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|source| DgdmError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(image_to_array(&img.to_rgb8()))
}

struct Entry {
    rel: String,
    label: usize,
    boxes: Vec<(usize, BBox)>,
}

fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Reads a folder-format dataset. Samples are ordered by relative path, so the
/// result does not depend on how many workers decode the images.
pub fn load_folder(root: &Path) -> Result<Dataset> {
    let mut class_names: Vec<String> = fs::read_dir(root)
        .map_err(|e| DgdmError::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    class_names.sort();
    let ann_path = root.join(ANNOTATION_FILE);
    if class_names.is_empty() && !ann_path.exists() {
        return Err(DgdmError::EmptyDataset(format!(
            "{} has no class folders or annotations",
            root.display()
        )));
    }
    let text = fs::read_to_string(&ann_path).map_err(|e| DgdmError::io(&ann_path, e))?;

    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| DgdmError::Annotation {
            path: ann_path.clone(),
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", fields.len())));
        }
        let mut nums = [0u32; 5];
        for (slot, f) in nums.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| bad(format!("`{f}` is not a non-negative integer")))?;
        }
        let [x_min, y_min, x_max, y_max, class_id] = nums;
        let bbox = BBox::new(x_min, y_min, x_max, y_max).map_err(|e| bad(e.to_string()))?;
        let label = class_id as usize;
        if label >= class_names.len() {
            return Err(bad(format!(
                "class id {label} but only {} class folders",
                class_names.len()
            )));
        }
        let rel = fields[0].to_string();
        let entry = entries.entry(rel.clone()).or_insert_with(|| Entry {
            rel,
            label,
            boxes: Vec::new(),
        });
        if entry.label != label {
            return Err(bad(format!(
                "class id {label} conflicts with earlier class {} for {}",
                entry.label, entry.rel
            )));
        }
        entry.boxes.push((line_no, bbox));
    }
    if entries.is_empty() {
        return Err(DgdmError::EmptyDataset(format!(
            "{} lists no images",
            ann_path.display()
        )));
    }

    let entries: Vec<Entry> = entries.into_values().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| DgdmError::InvalidArgument(format!("thread pool: {e}")))?;
    let samples: Vec<Result<Sample>> = pool.install(|| {
        entries
            .par_iter()
            .map(|entry| {
                let image = read_png(&root.join(&entry.rel))?;
                let (_, h, w) = image.dim();
                for &(line, b) in &entry.boxes {
                    if !b.fits_in(w as u32, h as u32) {
                        return Err(DgdmError::Annotation {
                            path: ann_path.clone(),
                            line,
                            reason: format!("box exceeds the {w}x{h} image {}", entry.rel),
                        });
                    }
                }
                let id = Path::new(&entry.rel)
                    .with_extension("")
                    .to_string_lossy()
                    .replace(['/', '\\'], "_");
                Ok(Sample {
                    id,
                    image,
                    label: entry.label,
                    boxes: entry.boxes.iter().map(|&(_, b)| b).collect(),
                })
            })
            .collect()
    });
    Ok(Dataset {
        class_names,
        samples: samples.into_iter().collect::<Result<_>>()?,
    })
}

/// Writes `data` in folder format under `root`.
///
/// Class folders are prefixed with their index (`00_square`) so that the
/// lexicographic folder order read back by [`load_folder`] matches the labels.
pub fn write_folder(data: &Dataset, root: &Path) -> Result<()> {
    let mut ann = String::new();
    let dirs: Vec<String> = data
        .class_names
        .iter()
        .enumerate()
        .map(|(i, name)| format!("{i:02}_{name}"))
        .collect();
    for d in &dirs {
        let dir = root.join(d);
        fs::create_dir_all(&dir).map_err(|e| DgdmError::io(&dir, e))?;
    }
    for s in &data.samples {
        let rel = format!("{}/{}.png", dirs[s.label], s.id);
        let path: PathBuf = root.join(&rel);
        array_to_image(&s.image)
            .save(&path)
            .map_err(|source| DgdmError::Image {
                path: path.clone(),
                source,
            })?;
        for b in &s.boxes {
            writeln!(
                ann,
                "{rel} {} {} {} {} {}",
                b.x_min, b.y_min, b.x_max, b.y_max, s.label
            )
            .expect("string write");
        }
    }
    let ann_path = root.join(ANNOTATION_FILE);
    fs::write(&ann_path, ann).map_err(|e| DgdmError::io(&ann_path, e))
}
