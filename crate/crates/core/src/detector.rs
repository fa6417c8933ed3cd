//! Miniature two-stage detector.
//!
//! Stage 1 runs a small convolutional backbone to an (h/8, w/8, 16)
//! feature map, then a 1x1 conv head that scores one square anchor per
//! cell and regresses box deltas. The top-scoring cells become
//! proposals. Stage 2 pools a 4x4 grid of feature vectors from each
//! proposal and classifies/refines it with a two-layer MLP.
//!
//! Everything differentiable runs through the tape; proposal selection
//! and pooling coordinates are decisions, not gradients, exactly like
//! the full-size ancestors of this architecture.

use crate::autodiff::{Graph, GraphError, NodeId, Padding};
use crate::eval::{nms, Detection, EvalOpts};
use crate::scene::BoxXYXY;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Backbone stride from image to feature map.
pub const STRIDE: usize = 8;
/// Anchor side length in pixels (one square anchor per feature cell).
pub const ANCHOR_SIDE: f64 = 16.0;
const C1: usize = 8;
const C2: usize = 16;
const POOL_GRID: usize = 4;
const HIDDEN: usize = 32;
const POOLED_LEN: usize = POOL_GRID * POOL_GRID * C2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub k_proposals: usize,
}

impl DetectorConfig {
    pub fn new(height: usize, width: usize, classes: usize) -> Self {
        DetectorConfig {
            height,
            width,
            classes,
            k_proposals: 16,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        assert!(
            self.height % STRIDE == 0 && self.width % STRIDE == 0,
            "image dims must be divisible by {STRIDE}"
        );
        (self.height / STRIDE, self.width / STRIDE)
    }

    pub fn cells(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Stage-2 head width: class logits incl. background plus
    /// per-class box deltas.
    pub fn head_out(&self) -> usize {
        self.classes + 1 + 4 * self.classes
    }

    /// Background index in the stage-2 class logits.
    pub fn background(&self) -> usize {
        self.classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

/// Canonical parameter order with shapes; init, flattening and
/// checkpointing all follow it.
pub fn param_shapes(cfg: &DetectorConfig) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("conv1_w", vec![C1, 3 * 3 * 3]),
        ("conv1_b", vec![C1]),
        ("conv2_w", vec![C2, 3 * 3 * C1]),
        ("conv2_b", vec![C2]),
        ("head_w", vec![5, C2]),
        ("head_b", vec![5]),
        ("fc1_w", vec![POOLED_LEN, HIDDEN]),
        ("fc1_b", vec![HIDDEN]),
        ("fc2_w", vec![HIDDEN, cfg.head_out()]),
        ("fc2_b", vec![cfg.head_out()]),
    ]
}

impl DetectorParams {
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
            ("head_w", &self.head_w),
            ("head_b", &self.head_b),
            ("fc1_w", &self.fc1_w),
            ("fc1_b", &self.fc1_b),
            ("fc2_w", &self.fc2_w),
            ("fc2_b", &self.fc2_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("conv1_w", &mut self.conv1_w),
            ("conv1_b", &mut self.conv1_b),
            ("conv2_w", &mut self.conv2_w),
            ("conv2_b", &mut self.conv2_b),
            ("head_w", &mut self.head_w),
            ("head_b", &mut self.head_b),
            ("fc1_w", &mut self.fc1_w),
            ("fc1_b", &mut self.fc1_b),
            ("fc2_w", &mut self.fc2_w),
            ("fc2_b", &mut self.fc2_b),
        ]
    }

    fn from_tensors(mut named: Vec<Tensor>) -> DetectorParams {
        let fc2_b = named.pop().unwrap();
        let fc2_w = named.pop().unwrap();
        let fc1_b = named.pop().unwrap();
        let fc1_w = named.pop().unwrap();
        let head_b = named.pop().unwrap();
        let head_w = named.pop().unwrap();
        let conv2_b = named.pop().unwrap();
        let conv2_w = named.pop().unwrap();
        let conv1_b = named.pop().unwrap();
        let conv1_w = named.pop().unwrap();
        DetectorParams {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            head_w,
            head_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        }
    }

    /// All parameters concatenated into one flat vector, canonical order.
    pub fn flatten(&self) -> Tensor {
        let mut data = Vec::new();
        for (_, t) in self.tensors() {
            data.extend_from_slice(t.data());
        }
        let n = data.len();
        Tensor::new(vec![n], data).unwrap()
    }

    pub fn unflatten(cfg: &DetectorConfig, flat: &Tensor) -> DetectorParams {
        let mut tensors = Vec::new();
        let mut off = 0usize;
        for (_, shape) in param_shapes(cfg) {
            let len: usize = shape.iter().product();
            let data = flat.data()[off..off + len].to_vec();
            tensors.push(Tensor::new(shape, data).unwrap());
            off += len;
        }
        assert_eq!(off, flat.numel(), "flat parameter length mismatch");
        DetectorParams::from_tensors(tensors)
    }

    /// Register every tensor as a trainable graph leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let ids: Vec<NodeId> = self.tensors().iter().map(|(_, t)| g.param((*t).clone())).collect();
        BoundParams::from_ids(&ids)
    }

    /// Register every tensor as a frozen input (forward only).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        let ids: Vec<NodeId> = self.tensors().iter().map(|(_, t)| g.input((*t).clone())).collect();
        BoundParams::from_ids(&ids)
    }

    /// Slice all parameters out of one flat graph node, so a gradient
    /// check can perturb every weight through a single leaf.
    pub fn bind_flat(
        g: &mut Graph,
        flat: NodeId,
        cfg: &DetectorConfig,
    ) -> Result<BoundParams, GraphError> {
        let mut ids = Vec::new();
        let mut off = 0usize;
        for (_, shape) in param_shapes(cfg) {
            let len: usize = shape.iter().product();
            let idx: Vec<usize> = (off..off + len).collect();
            ids.push(g.gather(flat, idx, shape)?);
            off += len;
        }
        Ok(BoundParams::from_ids(&ids))
    }
}

/// Node handles for one set of bound parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub conv1_w: NodeId,
    pub conv1_b: NodeId,
    pub conv2_w: NodeId,
    pub conv2_b: NodeId,
    pub head_w: NodeId,
    pub head_b: NodeId,
    pub fc1_w: NodeId,
    pub fc1_b: NodeId,
    pub fc2_w: NodeId,
    pub fc2_b: NodeId,
}

impl BoundParams {
    fn from_ids(ids: &[NodeId]) -> BoundParams {
        BoundParams {
            conv1_w: ids[0],
            conv1_b: ids[1],
            conv2_w: ids[2],
            conv2_b: ids[3],
            head_w: ids[4],
            head_b: ids[5],
            fc1_w: ids[6],
            fc1_b: ids[7],
            fc2_w: ids[8],
            fc2_b: ids[9],
        }
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        vec![
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.head_w,
            self.head_b,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }
}

/// Fan-in uniform init: weights in +-sqrt(6 / fan_in), biases zero.
/// Draw order follows the canonical parameter order.
pub fn init_params(cfg: &DetectorConfig, rng: &mut ChaCha8Rng) -> DetectorParams {
    let mut tensors = Vec::new();
    for (name, shape) in param_shapes(cfg) {
        let n: usize = shape.iter().product();
        if name.ends_with("_b") {
            tensors.push(Tensor::zeros(shape));
        } else {
            // fan-in: input dim for fc layouts (in, out), filter length
            // for conv layouts (out, kh*kw*in)
            let fan_in = if name.starts_with("fc") {
                shape[0]
            } else {
                shape[1]
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            tensors.push(Tensor::new(shape, data).unwrap());
        }
    }
    DetectorParams::from_tensors(tensors)
}

/// One anchor per feature cell, row-major: a square of side
/// [`ANCHOR_SIDE`] centered on the cell center.
pub fn anchors(cfg: &DetectorConfig) -> Vec<BoxXYXY> {
    let (gh, gw) = cfg.grid();
    let mut out = Vec::with_capacity(gh * gw);
    let half = ANCHOR_SIDE / 2.0;
    for gy in 0..gh {
        for gx in 0..gw {
            let cx = (gx as f64 + 0.5) * STRIDE as f64;
            let cy = (gy as f64 + 0.5) * STRIDE as f64;
            out.push(BoxXYXY::new(cx - half, cy - half, cx + half, cy + half));
        }
    }
    out
}

/// Box -> regression target relative to an anchor.
pub fn encode_delta(anchor: &BoxXYXY, gt: &BoxXYXY) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (gx, gy) = gt.center();
    let (gw, gh) = (gt.width(), gt.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ]
}

/// Regression target -> box. Pure inverse of [`encode_delta`]; no
/// clipping here, callers clip where image bounds matter.
pub fn decode_delta(anchor: &BoxXYXY, delta: &[f64]) -> BoxXYXY {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + aw * delta[0];
    let cy = ay + ah * delta[1];
    let w = aw * delta[2].exp();
    let h = ah * delta[3].exp();
    BoxXYXY::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Clip to the image and keep at least one pixel of extent.
pub fn clip_box_to_image(b: &BoxXYXY, cfg: &DetectorConfig) -> BoxXYXY {
    let w = cfg.width as f64;
    let h = cfg.height as f64;
    let x0 = b.x0.clamp(0.0, w - 1.0);
    let y0 = b.y0.clamp(0.0, h - 1.0);
    let x1 = b.x1.clamp(x0 + 1.0, w);
    let y1 = b.y1.clamp(y0 + 1.0, h);
    BoxXYXY::new(x0, y0, x1, y1)
}

#[derive(Debug, Clone)]
pub struct Proposal {
    pub bbox: BoxXYXY,
    pub objectness: f64,
    pub cell: usize,
}

/// Top-k cells by objectness logit (ties broken toward the lower cell
/// index), decoded and clipped.
pub fn select_proposals(obj: &Tensor, deltas: &Tensor, cfg: &DetectorConfig) -> Vec<Proposal> {
    let anchors = anchors(cfg);
    let g = cfg.cells();
    assert_eq!(obj.numel(), g);
    assert_eq!(deltas.shape(), &[g, 4]);
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| {
        obj.data()[b]
            .total_cmp(&obj.data()[a])
            .then(a.cmp(&b))
    });
    let k = cfg.k_proposals.min(g);
    order[..k]
        .iter()
        .map(|&cell| {
            let d = &deltas.data()[cell * 4..cell * 4 + 4];
            let raw = decode_delta(&anchors[cell], d);
            Proposal {
                bbox: clip_box_to_image(&raw, cfg),
                objectness: obj.data()[cell],
                cell,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// (h/8, w/8, 16) backbone feature map; the adaptation
    /// discriminator hangs off it.
    pub feature: NodeId,
    /// (cells) objectness logits.
    pub s1_obj: NodeId,
    /// (cells, 4) anchor deltas.
    pub s1_delta: NodeId,
    /// Decoded, clipped stage-1 proposals feeding stage 2.
    pub proposals: Vec<Proposal>,
    /// (k, classes + 1) class logits, background last.
    pub s2_cls: NodeId,
    /// (k, 4 * classes) per-class box deltas relative to the proposal.
    pub s2_delta: NodeId,
}

/// Backbone only: (h, w, 3) image to the (h/8, w/8, 16) feature map.
pub fn forward_features(
    g: &mut Graph,
    p: &BoundParams,
    image: NodeId,
) -> Result<NodeId, GraphError> {
    let c1 = g.conv2d(image, p.conv1_w, p.conv1_b, 3, 3, Padding::Same)?;
    let r1 = g.relu(c1);
    let p1 = g.maxpool2(r1)?;
    let c2 = g.conv2d(p1, p.conv2_w, p.conv2_b, 3, 3, Padding::Same)?;
    let r2 = g.relu(c2);
    let p2 = g.maxpool2(r2)?;
    g.maxpool2(p2)
}

/// Full forward pass for one image node.
pub fn forward(
    g: &mut Graph,
    p: &BoundParams,
    image: NodeId,
    cfg: &DetectorConfig,
) -> Result<DetectorOutput, GraphError> {
    let (gh, gw) = cfg.grid();
    let cells = gh * gw;

    let feature = forward_features(g, p, image)?;

    let head = g.conv2d(feature, p.head_w, p.head_b, 1, 1, Padding::Same)?;
    let obj_idx: Vec<usize> = (0..cells).map(|c| c * 5).collect();
    let s1_obj = g.gather(head, obj_idx, vec![cells])?;
    let delta_idx: Vec<usize> = (0..cells)
        .flat_map(|c| (1..5).map(move |k| c * 5 + k))
        .collect();
    let s1_delta = g.gather(head, delta_idx, vec![cells, 4])?;

    let proposals = select_proposals(g.value(s1_obj), g.value(s1_delta), cfg);
    let k = proposals.len();

    // 4x4 grid of feature vectors per proposal, nearest cell per point
    let mut pool_idx = Vec::with_capacity(k * POOLED_LEN);
    for prop in &proposals {
        let b = &prop.bbox;
        for j in 0..POOL_GRID {
            let py = b.y0 + (j as f64 + 0.5) * b.height() / POOL_GRID as f64;
            let fy = ((py / STRIDE as f64).floor() as usize).min(gh - 1);
            for i in 0..POOL_GRID {
                let px = b.x0 + (i as f64 + 0.5) * b.width() / POOL_GRID as f64;
                let fx = ((px / STRIDE as f64).floor() as usize).min(gw - 1);
                let base = (fy * gw + fx) * C2;
                pool_idx.extend(base..base + C2);
            }
        }
    }
    let pooled = g.gather(feature, pool_idx, vec![k, POOLED_LEN])?;

    let h1 = g.affine(pooled, p.fc1_w, p.fc1_b)?;
    let h1 = g.relu(h1);
    let out = g.affine(h1, p.fc2_w, p.fc2_b)?;

    let n_out = cfg.head_out();
    let n_cls = cfg.classes + 1;
    let cls_idx: Vec<usize> = (0..k)
        .flat_map(|r| (0..n_cls).map(move |c| r * n_out + c))
        .collect();
    let s2_cls = g.gather(out, cls_idx, vec![k, n_cls])?;
    let reg_idx: Vec<usize> = (0..k)
        .flat_map(|r| (n_cls..n_out).map(move |c| r * n_out + c))
        .collect();
    let s2_delta = g.gather(out, reg_idx, vec![k, 4 * cfg.classes])?;

    Ok(DetectorOutput {
        feature,
        s1_obj,
        s1_delta,
        proposals,
        s2_cls,
        s2_delta,
    })
}

/// Run the detector on one image and return thresholded, per-class
/// suppressed detections, best score first.
pub fn predict(
    params: &DetectorParams,
    image: &Tensor,
    cfg: &DetectorConfig,
    opts: &EvalOpts,
) -> Vec<Detection> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let img = g.input(image.clone());
    let out = forward(&mut g, &bound, img, cfg).expect("detector forward");
    let probs = {
        let s = g.softmax_rows(out.s2_cls).expect("softmax");
        g.value(s).clone()
    };
    let deltas = g.value(out.s2_delta).clone();
    let n_cls = cfg.classes + 1;
    let mut candidates = Vec::new();
    for (k, prop) in out.proposals.iter().enumerate() {
        for c in 0..cfg.classes {
            let score = probs.data()[k * n_cls + c];
            if score < opts.score_thresh {
                continue;
            }
            let d = &deltas.data()[k * 4 * cfg.classes + 4 * c..k * 4 * cfg.classes + 4 * c + 4];
            let bbox = clip_box_to_image(&decode_delta(&prop.bbox, d), cfg);
            candidates.push(Detection {
                class_id: c,
                bbox,
                score,
            });
        }
    }
    let mut kept = nms(&candidates, opts.nms_iou);
    kept.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
    });
    kept
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    params: DetectorParams,
}

const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint. f64 round-trips exactly through serde_json, so a
/// save/load cycle is bit-identical.
pub fn save_checkpoint(path: &Path, params: &DetectorParams) -> Result<(), CheckpointError> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    };
    let json = serde_json::to_string(&ck)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorParams, CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(ck.version));
    }
    Ok(ck.params)
}
