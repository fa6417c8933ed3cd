//! Synthetic detection scenes.
//!
//! Images are (h, w, 3) tensors in [0, 1] holding a handful of colored
//! shapes on a flat background. The two domains share geometry (shape
//! placement consumes rng identically for both) but differ in palette:
//! the target domain rotates shape colors, darkens the background and
//! overlays horizontal scanline stripes. That gap is what the
//! adaptation loop has to close.

use crate::rng::{child_seed, stream, STREAM_SCENE};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

/// Axis-aligned box, corner form, half-open pixel coverage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxXYXY {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoxXYXY { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn iou(&self, other: &BoxXYXY) -> f64 {
        let ix0 = self.x0.max(other.x0);
        let iy0 = self.y0.max(other.y0);
        let ix1 = self.x1.min(other.x1);
        let iy1 = self.y1.min(other.y1);
        let iw = (ix1 - ix0).max(0.0);
        let ih = (iy1 - iy0).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One labeled object. `mix_weight` is the loss weight the label carries
/// after mixing; plain scenes always start at 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class_id: usize,
    pub bbox: BoxXYXY,
    pub mix_weight: f64,
}

#[derive(Debug, Clone)]
pub struct ImageSample {
    pub image: Tensor,
    pub instances: Vec<Instance>,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub size_min: usize,
    pub size_max: usize,
    /// Overlap cap between ground-truth boxes; placements above it are
    /// retried and eventually dropped.
    pub max_gt_iou: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            classes: 3,
            shapes_min: 1,
            shapes_max: 3,
            size_min: 14,
            size_max: 26,
            max_gt_iou: 0.2,
        }
    }
}

const PLACEMENT_TRIES: usize = 30;

const BASE_COLORS: [[f64; 3]; 6] = [
    [0.85, 0.20, 0.15],
    [0.15, 0.55, 0.80],
    [0.20, 0.70, 0.25],
    [0.90, 0.75, 0.10],
    [0.60, 0.25, 0.70],
    [0.95, 0.50, 0.20],
];

const SOURCE_BG: [f64; 3] = [0.92, 0.92, 0.88];
const TARGET_BG: [f64; 3] = [0.10, 0.10, 0.14];
const STRIPE_GAIN: f64 = 0.85;

fn class_color(domain: Domain, class_id: usize) -> [f64; 3] {
    let c = BASE_COLORS[class_id % BASE_COLORS.len()];
    match domain {
        Domain::Source => c,
        Domain::Target => [c[1], c[2], c[0]],
    }
}

fn tri_contains(
    (ax, ay): (f64, f64),
    (bx, by): (f64, f64),
    (cx, cy): (f64, f64),
    (px, py): (f64, f64),
) -> bool {
    let d1 = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
    let d2 = (cx - bx) * (py - by) - (cy - by) * (px - bx);
    let d3 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Whether the pixel at (x, y) is covered by the shape for `class_id`
/// drawn into `bbox`. Coverage is decided at the pixel center.
fn shape_covers(class_id: usize, bbox: &BoxXYXY, x: usize, y: usize) -> bool {
    let px = x as f64 + 0.5;
    let py = y as f64 + 0.5;
    if px < bbox.x0 || px >= bbox.x1 || py < bbox.y0 || py >= bbox.y1 {
        return false;
    }
    match class_id % 3 {
        // filled rectangle
        0 => true,
        // circle inscribed in the (square) box
        1 => {
            let (cx, cy) = bbox.center();
            let r = bbox.width() / 2.0;
            let dx = px - cx;
            let dy = py - cy;
            dx * dx + dy * dy <= r * r
        }
        // isoceles triangle, apex at the top edge center
        _ => {
            let apex = ((bbox.x0 + bbox.x1) / 2.0, bbox.y0);
            let bl = (bbox.x0, bbox.y1);
            let br = (bbox.x1, bbox.y1);
            tri_contains(apex, bl, br, (px, py))
        }
    }
}

/// Generate one scene. Geometry (classes, sizes, placements) consumes
/// the rng identically for both domains; only rendering differs.
pub fn generate_scene(cfg: &SceneConfig, domain: Domain, rng: &mut ChaCha8Rng) -> ImageSample {
    assert!(cfg.classes >= 1, "need at least one class");
    assert!(
        cfg.shapes_min >= 1 && cfg.shapes_min <= cfg.shapes_max,
        "bad shape count range"
    );
    assert!(
        cfg.size_min >= 2 && cfg.size_min <= cfg.size_max,
        "bad size range"
    );
    assert!(
        cfg.size_max <= cfg.width && cfg.size_max <= cfg.height,
        "shapes must fit in the image"
    );

    let n = rng.gen_range(cfg.shapes_min..=cfg.shapes_max);
    let mut instances: Vec<Instance> = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..PLACEMENT_TRIES {
            let class_id = rng.gen_range(0..cfg.classes);
            let w = rng.gen_range(cfg.size_min..=cfg.size_max);
            let h = rng.gen_range(cfg.size_min..=cfg.size_max);
            // circles need a square box
            let (bw, bh) = if class_id % 3 == 1 {
                let s = w.min(h);
                (s, s)
            } else {
                (w, h)
            };
            let x0 = rng.gen_range(0..=(cfg.width - bw));
            let y0 = rng.gen_range(0..=(cfg.height - bh));
            let bbox = BoxXYXY::new(
                x0 as f64,
                y0 as f64,
                (x0 + bw) as f64,
                (y0 + bh) as f64,
            );
            if instances.iter().all(|i| i.bbox.iou(&bbox) <= cfg.max_gt_iou) {
                instances.push(Instance {
                    class_id,
                    bbox,
                    mix_weight: 1.0,
                });
                break;
            }
        }
    }

    let bg = match domain {
        Domain::Source => SOURCE_BG,
        Domain::Target => TARGET_BG,
    };
    let mut data = vec![0.0; cfg.height * cfg.width * 3];
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let off = (y * cfg.width + x) * 3;
            let mut rgb = bg;
            // later instances overdraw earlier ones
            for inst in &instances {
                if shape_covers(inst.class_id, &inst.bbox, x, y) {
                    rgb = class_color(domain, inst.class_id);
                }
            }
            if domain == Domain::Target && y % 4 == 0 {
                rgb = [rgb[0] * STRIPE_GAIN, rgb[1] * STRIPE_GAIN, rgb[2] * STRIPE_GAIN];
            }
            data[off..off + 3].copy_from_slice(&rgb);
        }
    }
    ImageSample {
        image: Tensor::new(vec![cfg.height, cfg.width, 3], data).unwrap(),
        instances,
        domain,
    }
}

/// A batch of scenes where scene `k` is generated from its own child
/// seed, so any one scene can be regenerated without the others.
pub fn generate_scenes(
    cfg: &SceneConfig,
    domain: Domain,
    seed: u64,
    count: usize,
) -> Vec<ImageSample> {
    (0..count)
        .map(|k| {
            let mut rng = stream(child_seed(seed, k as u64), STREAM_SCENE, 0);
            generate_scene(cfg, domain, &mut rng)
        })
        .collect()
}

/// COCO-style export of a sample list: 1-based ids, category ids offset
/// by one, bbox in [x, y, w, h].
pub fn export_coco_json(samples: &[ImageSample], classes: usize) -> serde_json::Value {
    let images: Vec<serde_json::Value> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            serde_json::json!({
                "id": i + 1,
                "width": s.image.shape()[1],
                "height": s.image.shape()[0],
                "file_name": format!("scene_{:05}.ppm", i),
            })
        })
        .collect();
    let mut annotations = Vec::new();
    let mut ann_id = 1usize;
    for (i, s) in samples.iter().enumerate() {
        for inst in &s.instances {
            let b = &inst.bbox;
            annotations.push(serde_json::json!({
                "id": ann_id,
                "image_id": i + 1,
                "category_id": inst.class_id + 1,
                "bbox": [b.x0, b.y0, b.width(), b.height()],
                "area": b.area(),
                "iscrowd": 0,
            }));
            ann_id += 1;
        }
    }
    let categories: Vec<serde_json::Value> = (0..classes)
        .map(|c| {
            serde_json::json!({
                "id": c + 1,
                "name": format!("class_{c}"),
                "supercategory": "shape",
            })
        })
        .collect();
    serde_json::json!({
        "images": images,
        "annotations": annotations,
        "categories": categories,
    })
}

/// Dump an (h, w, 3) image as binary PPM, clamping to [0, 1].
pub fn write_ppm(path: &Path, image: &Tensor) -> std::io::Result<()> {
    let shape = image.shape();
    assert!(shape.len() == 3 && shape[2] == 3, "expected (h, w, 3)");
    let (h, w) = (shape[0], shape[1]);
    let mut buf = Vec::with_capacity(h * w * 3 + 32);
    write!(&mut buf, "P6\n{w} {h}\n255\n")?;
    for &v in image.data() {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, buf)
}
