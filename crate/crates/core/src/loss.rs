//! Detection losses, plain and mixed.
//!
//! The supervised loss has four terms: objectness BCE and anchor-delta
//! smooth-L1 for stage 1, class cross-entropy and per-class box
//! smooth-L1 for stage 2. The mixed loss evaluates those terms once per
//! weighted label set and combines them with the set weights; labels are
//! never interpolated. Terms masked out by the toggles fall back to the
//! unweighted union of the sets, and the total is always folded in one
//! canonical order so equal inputs give bit-equal sums.

use crate::autodiff::{Graph, GraphError, NodeId};
use crate::detector::{anchors, encode_delta, DetectorConfig, DetectorOutput, Proposal};
use crate::mix::{TermToggles, WeightedLabels};
use crate::scene::Instance;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("mix weights must sum to exactly 1, got {sum}")]
    BadWeightSum { sum: f64 },
    #[error("mix weight {weight} outside (0, 1]")]
    BadWeight { weight: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Anchor labels for stage 1.
#[derive(Debug, Clone)]
pub struct Stage1Targets {
    /// 1 positive, 0 negative, -1 ignored.
    pub labels: Vec<i8>,
    /// Matched ground-truth index, valid where labels == 1.
    pub matched_gt: Vec<usize>,
}

/// Assign anchors: positive at IoU >= 0.5 with some box, negative
/// below 0.3, ignored in between. Every box additionally forces its
/// best-overlapping anchor positive so no box goes unsupervised.
pub fn assign_stage1(cfg: &DetectorConfig, gts: &[Instance]) -> Stage1Targets {
    let anchors = anchors(cfg);
    let n = anchors.len();
    let mut labels = vec![0i8; n];
    let mut matched_gt = vec![0usize; n];
    if gts.is_empty() {
        return Stage1Targets { labels, matched_gt };
    }
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best = 0.0;
        let mut best_gt = 0usize;
        for (gi, gt) in gts.iter().enumerate() {
            let ov = anchor.iou(&gt.bbox);
            if ov > best {
                best = ov;
                best_gt = gi;
            }
        }
        matched_gt[a] = best_gt;
        labels[a] = if best >= 0.5 {
            1
        } else if best < 0.3 {
            0
        } else {
            -1
        };
    }
    for (gi, gt) in gts.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut best_a = 0usize;
        for (a, anchor) in anchors.iter().enumerate() {
            let ov = anchor.iou(&gt.bbox);
            if ov > best {
                best = ov;
                best_a = a;
            }
        }
        labels[best_a] = 1;
        matched_gt[best_a] = gi;
    }
    Stage1Targets { labels, matched_gt }
}

/// Proposal labels for stage 2: foreground at IoU >= 0.5 (class of the
/// best-overlapping box), background otherwise.
#[derive(Debug, Clone)]
pub struct Stage2Targets {
    /// Target class per proposal; background is `cfg.classes`.
    pub class: Vec<usize>,
    /// Matched ground-truth index for foreground proposals.
    pub matched_gt: Vec<Option<usize>>,
}

pub fn assign_stage2(proposals: &[Proposal], gts: &[Instance], classes: usize) -> Stage2Targets {
    let mut class = Vec::with_capacity(proposals.len());
    let mut matched_gt = Vec::with_capacity(proposals.len());
    for p in proposals {
        let mut best = 0.0;
        let mut best_gt = None;
        for (gi, gt) in gts.iter().enumerate() {
            let ov = p.bbox.iou(&gt.bbox);
            if ov > best {
                best = ov;
                best_gt = Some(gi);
            }
        }
        match best_gt {
            Some(gi) if best >= 0.5 => {
                class.push(gts[gi].class_id);
                matched_gt.push(Some(gi));
            }
            _ => {
                class.push(classes);
                matched_gt.push(None);
            }
        }
    }
    Stage2Targets { class, matched_gt }
}

/// Scalar nodes for the loss terms that were actually computed.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermNodes {
    pub rpn_cls: Option<NodeId>,
    pub rpn_reg: Option<NodeId>,
    pub roi_cls: Option<NodeId>,
    pub roi_reg: Option<NodeId>,
}

/// Term values read back from the graph.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub total: f64,
}

impl TermNodes {
    /// Fold present terms into a total, always in the order rpn_cls,
    /// rpn_reg, roi_cls, roi_reg so summation order never varies.
    pub fn fold_total(&self, g: &mut Graph) -> NodeId {
        let mut acc: Option<NodeId> = None;
        for term in [self.rpn_cls, self.rpn_reg, self.roi_cls, self.roi_reg] {
            if let Some(id) = term {
                acc = Some(match acc {
                    None => id,
                    Some(a) => g.add(a, id).expect("scalar add"),
                });
            }
        }
        acc.unwrap_or_else(|| g.input(Tensor::scalar(0.0)))
    }

    pub fn breakdown(&self, g: &Graph, total: NodeId) -> LossBreakdown {
        let item = |n: Option<NodeId>| n.map_or(0.0, |id| g.value(id).item());
        LossBreakdown {
            rpn_cls: item(self.rpn_cls),
            rpn_reg: item(self.rpn_reg),
            roi_cls: item(self.roi_cls),
            roi_reg: item(self.roi_reg),
            total: g.value(total).item(),
        }
    }
}

/// Elementwise smooth-L1 of (pred - target), summed and scaled by
/// 1 / denom. The quadratic/linear branch per element is fixed from the
/// forward residuals; smooth-L1 is C1 at the switch so gradients stay
/// consistent.
fn smooth_l1_mean(
    g: &mut Graph,
    pred: NodeId,
    target: Tensor,
    denom: f64,
) -> Result<NodeId, GraphError> {
    let shape = target.shape().to_vec();
    let tgt = g.input(target);
    let r = g.sub(pred, tgt)?;
    let rv = g.value(r).clone();
    let quad: Vec<f64> = rv
        .data()
        .iter()
        .map(|&v| if v.abs() < 1.0 { 1.0 } else { 0.0 })
        .collect();
    let lin: Vec<f64> = quad.iter().map(|&q| 1.0 - q).collect();
    let qmask = g.input(Tensor::new(shape.clone(), quad).unwrap());
    let lmask = g.input(Tensor::new(shape.clone(), lin).unwrap());
    let r2 = g.mul(r, r)?;
    let half_r2 = g.scale(r2, 0.5);
    let neg_r = g.scale(r, -1.0);
    let relu_p = g.relu(r);
    let relu_n = g.relu(neg_r);
    let abs_r = g.add(relu_p, relu_n)?;
    let half = g.input(Tensor::full(shape, 0.5));
    let lin_branch = g.sub(abs_r, half)?;
    let a = g.mul(qmask, half_r2)?;
    let b = g.mul(lmask, lin_branch)?;
    let s = g.add(a, b)?;
    let tot = g.sum(s);
    Ok(g.scale(tot, 1.0 / denom))
}

/// Build the toggled loss terms for one label set against a forward
/// pass. Terms with no contributing elements (no positive anchors, no
/// foreground proposals) are omitted rather than emitted as zeros.
pub fn detection_loss_nodes(
    g: &mut Graph,
    out: &DetectorOutput,
    gts: &[Instance],
    cfg: &DetectorConfig,
    toggles: TermToggles,
) -> Result<TermNodes, GraphError> {
    let mut nodes = TermNodes::default();
    let cells = cfg.cells();
    let s1 = assign_stage1(cfg, gts);

    if toggles.rpn_cls {
        let pos: Vec<f64> = s1.labels.iter().map(|&l| (l == 1) as u8 as f64).collect();
        let neg: Vec<f64> = s1.labels.iter().map(|&l| (l == 0) as u8 as f64).collect();
        let used = (pos.iter().sum::<f64>() + neg.iter().sum::<f64>()) as usize;
        if used > 0 {
            let sig = g.sigmoid(out.s1_obj);
            let ones = g.input(Tensor::full(vec![cells], 1.0));
            let comp = g.sub(ones, sig)?;
            let log_p = g.log(sig);
            let log_q = g.log(comp);
            let posm = g.input(Tensor::new(vec![cells], pos).unwrap());
            let negm = g.input(Tensor::new(vec![cells], neg).unwrap());
            let a = g.mul(posm, log_p)?;
            let b = g.mul(negm, log_q)?;
            let s = g.add(a, b)?;
            let tot = g.sum(s);
            nodes.rpn_cls = Some(g.scale(tot, -1.0 / used as f64));
        }
    }

    if toggles.rpn_reg {
        let pos_cells: Vec<usize> = (0..cells).filter(|&c| s1.labels[c] == 1).collect();
        if !pos_cells.is_empty() {
            let anchors = anchors(cfg);
            let idx: Vec<usize> = pos_cells
                .iter()
                .flat_map(|&c| (0..4).map(move |k| c * 4 + k))
                .collect();
            let n = pos_cells.len();
            let pred = g.gather(out.s1_delta, idx, vec![n, 4])?;
            let mut tdata = Vec::with_capacity(n * 4);
            for &c in &pos_cells {
                let gt = &gts[s1.matched_gt[c]];
                tdata.extend(encode_delta(&anchors[c], &gt.bbox));
            }
            let target = Tensor::new(vec![n, 4], tdata).unwrap();
            nodes.rpn_reg = Some(smooth_l1_mean(g, pred, target, 4.0 * n as f64)?);
        }
    }

    let s2 = assign_stage2(&out.proposals, gts, cfg.classes);
    let k = out.proposals.len();

    if toggles.roi_cls && k > 0 {
        let n_cls = cfg.classes + 1;
        let probs = g.softmax_rows(out.s2_cls)?;
        let logp = g.log(probs);
        let mut onehot = vec![0.0; k * n_cls];
        for (r, &c) in s2.class.iter().enumerate() {
            onehot[r * n_cls + c] = 1.0;
        }
        let mask = g.input(Tensor::new(vec![k, n_cls], onehot).unwrap());
        let picked = g.mul(mask, logp)?;
        let tot = g.sum(picked);
        nodes.roi_cls = Some(g.scale(tot, -1.0 / k as f64));
    }

    if toggles.roi_reg {
        let fg: Vec<usize> = (0..k).filter(|&r| s2.matched_gt[r].is_some()).collect();
        if !fg.is_empty() {
            let n = fg.len();
            let mut idx = Vec::with_capacity(n * 4);
            let mut tdata = Vec::with_capacity(n * 4);
            for &r in &fg {
                let c = s2.class[r];
                idx.extend((0..4).map(|k4| r * 4 * cfg.classes + 4 * c + k4));
                let gt = &gts[s2.matched_gt[r].unwrap()];
                tdata.extend(encode_delta(&out.proposals[r].bbox, &gt.bbox));
            }
            let pred = g.gather(out.s2_delta, idx, vec![n, 4])?;
            let target = Tensor::new(vec![n, 4], tdata).unwrap();
            nodes.roi_reg = Some(smooth_l1_mean(g, pred, target, 4.0 * n as f64)?);
        }
    }

    Ok(nodes)
}

/// Supervised detection loss over one label set.
pub fn detection_loss(
    g: &mut Graph,
    out: &DetectorOutput,
    gts: &[Instance],
    cfg: &DetectorConfig,
    toggles: TermToggles,
) -> Result<(NodeId, LossBreakdown), LossError> {
    let nodes = detection_loss_nodes(g, out, gts, cfg, toggles)?;
    let total = nodes.fold_total(g);
    let breakdown = nodes.breakdown(g, total);
    Ok((total, breakdown))
}

/// Mixed detection loss: toggled terms are evaluated once per label set
/// and combined with the set weights; untoggled terms are evaluated on
/// the unweighted union of the sets. Weights must sum to exactly 1.
pub fn lossmix_detection_loss(
    g: &mut Graph,
    out: &DetectorOutput,
    sets: &[WeightedLabels],
    cfg: &DetectorConfig,
    toggles: TermToggles,
) -> Result<(NodeId, LossBreakdown), LossError> {
    let sum: f64 = sets.iter().map(|s| s.weight).sum();
    if sum != 1.0 {
        return Err(LossError::BadWeightSum { sum });
    }
    for s in sets {
        if !(s.weight > 0.0 && s.weight <= 1.0) {
            return Err(LossError::BadWeight { weight: s.weight });
        }
    }

    let mut acc = TermNodes::default();
    let push = |g: &mut Graph, slot: &mut Option<NodeId>, term: Option<NodeId>, w: f64| {
        if let Some(id) = term {
            let scaled = g.scale(id, w);
            *slot = Some(match *slot {
                None => scaled,
                Some(prev) => g.add(prev, scaled).expect("scalar add"),
            });
        }
    };
    for set in sets {
        let nodes = detection_loss_nodes(g, out, &set.instances, cfg, toggles)?;
        push(g, &mut acc.rpn_cls, nodes.rpn_cls, set.weight);
        push(g, &mut acc.rpn_reg, nodes.rpn_reg, set.weight);
        push(g, &mut acc.roi_cls, nodes.roi_cls, set.weight);
        push(g, &mut acc.roi_reg, nodes.roi_reg, set.weight);
    }

    let inverted = toggles.inverted();
    if inverted.any() {
        let union: Vec<Instance> = sets
            .iter()
            .flat_map(|s| s.instances.iter().cloned())
            .collect();
        let nodes = detection_loss_nodes(g, out, &union, cfg, inverted)?;
        acc.rpn_cls = acc.rpn_cls.or(nodes.rpn_cls);
        acc.rpn_reg = acc.rpn_reg.or(nodes.rpn_reg);
        acc.roi_cls = acc.roi_cls.or(nodes.roi_cls);
        acc.roi_reg = acc.roi_reg.or(nodes.roi_reg);
    }

    let total = acc.fold_total(g);
    let breakdown = acc.breakdown(g, total);
    Ok((total, breakdown))
}

/// Cross-entropy of a logit vector against a hard class index.
pub fn ce_loss(g: &mut Graph, logits: NodeId, target: usize) -> Result<NodeId, GraphError> {
    let n = g.value(logits).numel();
    assert!(target < n, "target out of range");
    let probs = g.softmax_rows(logits)?;
    let logp = g.log(probs);
    let mut onehot = vec![0.0; n];
    onehot[target] = 1.0;
    let mask = g.input(Tensor::new(vec![n], onehot).unwrap());
    let picked = g.mul(mask, logp)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}

/// Mixed classification loss, loss-interpolation form:
/// lambda * CE(z, yi) + (1 - lambda) * CE(z, yj).
pub fn mixed_ce_by_losses(
    g: &mut Graph,
    logits: NodeId,
    yi: usize,
    yj: usize,
    lambda: f64,
) -> Result<NodeId, GraphError> {
    let li = ce_loss(g, logits, yi)?;
    let lj = ce_loss(g, logits, yj)?;
    let a = g.scale(li, lambda);
    let b = g.scale(lj, 1.0 - lambda);
    g.add(a, b)
}

/// Mixed classification loss, label-interpolation form: cross-entropy
/// against the soft target lambda * onehot(yi) + (1 - lambda) * onehot(yj).
pub fn mixed_ce_by_labels(
    g: &mut Graph,
    logits: NodeId,
    yi: usize,
    yj: usize,
    lambda: f64,
) -> Result<NodeId, GraphError> {
    let n = g.value(logits).numel();
    assert!(yi < n && yj < n, "target out of range");
    let probs = g.softmax_rows(logits)?;
    let logp = g.log(probs);
    let mut soft = vec![0.0; n];
    soft[yi] += lambda;
    soft[yj] += 1.0 - lambda;
    let mask = g.input(Tensor::new(vec![n], soft).unwrap());
    let picked = g.mul(mask, logp)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}
