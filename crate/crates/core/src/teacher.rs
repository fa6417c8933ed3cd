//! Mean-teacher machinery for cross-domain training: EMA weight
//! tracking, pseudo labels, strong augmentation, and a
//! gradient-reversal domain discriminator over pooled backbone
//! features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphError, NodeId};
use crate::detector::{predict, DetectorConfig, DetectorParams};
use crate::eval::EvalOpts;
use crate::scene::Instance;
use crate::tensor::Tensor;

/// Weights and schedule for the two adaptation phases. Every `lambda_*`
/// scales one loss term; a weight of exactly zero drops the term along
/// with all random draws that would have fed it, so zeroing a term
/// leaves the others bit-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaConfig {
    pub enabled: bool,
    /// Mixed source supervision (shared with plain supervised training).
    pub lambda_mss: f64,
    /// Warmup noisy source-target mixing.
    pub lambda_nst: f64,
    /// Mixed target-target consistency against teacher pseudo labels.
    pub lambda_mtt: f64,
    /// Mixed source-target with pseudo labels on the target side.
    pub lambda_mst: f64,
    /// Domain discriminator (adversarial via gradient reversal).
    pub lambda_disc: f64,
    /// Teacher detections below this score never become pseudo labels.
    pub pseudo_thresh: f64,
    /// Teacher EMA momentum; 1.0 freezes the teacher entirely.
    pub ema_momentum: f64,
    pub warmup_iters: usize,
    pub adapt_iters: usize,
    /// Warmup target bleed: the target-image coefficient is drawn from
    /// U(0, this).
    pub noise_lambda_max: f64,
    /// Mix with a fixed 0.5 coefficient during adaptation instead of
    /// Beta draws.
    pub balanced_fixed: bool,
}

impl Default for DaConfig {
    fn default() -> Self {
        DaConfig {
            enabled: false,
            lambda_mss: 1.0,
            lambda_nst: 1.0,
            lambda_mtt: 1.0,
            lambda_mst: 1.0,
            lambda_disc: 0.1,
            pseudo_thresh: 0.8,
            ema_momentum: 0.9996,
            warmup_iters: 500,
            adapt_iters: 1500,
            noise_lambda_max: 0.1,
            balanced_fixed: false,
        }
    }
}

/// Student and teacher share an architecture; the discriminator head is
/// separate and only the student graph ever touches it.
#[derive(Debug, Clone)]
pub struct DaState {
    pub student: DetectorParams,
    pub teacher: DetectorParams,
    pub disc: DiscParams,
}

/// In-place EMA step `t += (1 - m) * (s - t)`. Written in delta form so
/// the per-element drift is exactly `(1 - m) * (s - t)` as computed,
/// which keeps the drift bound checkable in floating point. A momentum
/// of exactly 1.0 is a no-op.
pub fn ema_update(teacher: &mut DetectorParams, student: &DetectorParams, momentum: f64) {
    if momentum == 1.0 {
        return;
    }
    let a = 1.0 - momentum;
    for ((_, t), (_, s)) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv += a * (sv - *tv);
        }
    }
}

/// Teacher detections on a clean image, thresholded into training
/// labels. Pseudo labels always carry unit mix weight; mixing assigns
/// the real weights later.
pub fn pseudo_label(
    teacher: &DetectorParams,
    image: &Tensor,
    cfg: &DetectorConfig,
    opts: &EvalOpts,
    thresh: f64,
) -> Vec<Instance> {
    predict(teacher, image, cfg, opts)
        .into_iter()
        .filter(|d| d.score >= thresh)
        .map(|d| Instance {
            class_id: d.class_id,
            bbox: d.bbox,
            mix_weight: 1.0,
        })
        .collect()
}

/// Amplitude of the additive uniform pixel noise used as the student's
/// strong view.
pub const STRONG_NOISE_AMP: f64 = 0.1;

/// Per-pixel U(-amp, amp) noise, clamped back to [0, 1]. The teacher
/// labels the clean image; the student trains on this view.
pub fn strong_noise(image: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let data = image
        .data()
        .iter()
        .map(|&v| (v + rng.gen_range(-STRONG_NOISE_AMP..STRONG_NOISE_AMP)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(image.shape().to_vec(), data).unwrap()
}

/// Hidden width of the discriminator MLP.
pub const DISC_HIDDEN: usize = 8;

/// Two affine layers over the channel mean of the backbone feature map,
/// producing a single domain logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Graph handles for bound discriminator parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundDisc {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl DiscParams {
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("disc_w1", &self.w1),
            ("disc_b1", &self.b1),
            ("disc_w2", &self.w2),
            ("disc_b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("disc_w1", &mut self.w1),
            ("disc_b1", &mut self.b1),
            ("disc_w2", &mut self.w2),
            ("disc_b2", &mut self.b2),
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> BoundDisc {
        BoundDisc {
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
        }
    }
}

/// Fan-in uniform init for the discriminator, biases zero. `channels`
/// is the backbone feature depth.
pub fn init_disc(channels: usize, rng: &mut ChaCha8Rng) -> DiscParams {
    let mut fc = |rows: usize, cols: usize| {
        let bound = (6.0 / rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    };
    let w1 = fc(channels, DISC_HIDDEN);
    let w2 = fc(DISC_HIDDEN, 1);
    DiscParams {
        w1,
        b1: Tensor::zeros(vec![DISC_HIDDEN]),
        w2,
        b2: Tensor::zeros(vec![1]),
    }
}

/// Channel mean of a channel-last feature map as a (1, channels) row,
/// built as a constant-matrix product so it differentiates cleanly.
pub fn pooled_feature(g: &mut Graph, feature: NodeId) -> Result<NodeId, GraphError> {
    let shape = g.value(feature).shape().to_vec();
    let c = *shape.last().expect("feature must have a channel axis");
    let n = g.value(feature).numel() / c;
    let flat = g.reshape(feature, vec![n, c])?;
    let pool = g.input(Tensor::full(vec![1, n], 1.0 / n as f64));
    g.matmul(pool, flat)
}

/// Scalar domain logit for one feature map. Gradient reversal sits
/// between the pooled feature and the MLP, so the discriminator trains
/// normally while the backbone is pushed toward domain-confusable
/// features.
pub fn domain_logit(g: &mut Graph, d: &BoundDisc, feature: NodeId) -> Result<NodeId, GraphError> {
    let mean = pooled_feature(g, feature)?;
    let rev = g.grad_reverse(mean);
    let h = g.affine(rev, d.w1, d.b1)?;
    let h = g.relu(h);
    let o = g.affine(h, d.w2, d.b2)?;
    Ok(g.sum(o))
}

/// Mean binary cross-entropy of domain logits over a batch of feature
/// maps; `true` marks the target domain.
pub fn discriminator_loss(
    g: &mut Graph,
    d: &BoundDisc,
    feats: &[(NodeId, bool)],
) -> Result<NodeId, GraphError> {
    assert!(!feats.is_empty(), "discriminator needs at least one feature");
    let mut acc: Option<NodeId> = None;
    for &(feat, is_target) in feats {
        let logit = domain_logit(g, d, feat)?;
        let s = g.sigmoid(logit);
        let p = if is_target {
            s
        } else {
            let one = g.input(Tensor::scalar(1.0));
            g.sub(one, s)?
        };
        let ln = g.log(p);
        let term = g.scale(ln, -1.0);
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / feats.len() as f64))
}
