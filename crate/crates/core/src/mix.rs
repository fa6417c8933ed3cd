//! Input and label mixing.
//!
//! A mixed sample carries one image and a list of weighted label sets.
//! The detection loss is evaluated once per set and combined with the
//! set weights, which is what makes mixing work for structured outputs
//! where labels themselves cannot be interpolated.
//!
//! Strategies:
//! - `Baseline`: no mixing, one full-weight label set.
//! - `Union`: interpolate images, keep the union of both label sets at
//!   full weight.
//! - `Noise`: blend a small amount of the partner image in, keep only
//!   the dominant side's labels.
//! - `LossMix`: interpolate images, keep both label sets weighted by
//!   the mixing ratio.
//! - `LabelMixup`: classification-only reference point; it has no
//!   detection target form and the training harness rejects it.

use crate::rng::beta_symmetric;
use crate::scene::{BoxXYXY, ImageSample, Instance};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixStrategy {
    Baseline,
    Union,
    Noise,
    LossMix,
    LabelMixup,
}

impl MixStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(MixStrategy::Baseline),
            "union" => Some(MixStrategy::Union),
            "noise" => Some(MixStrategy::Noise),
            "lossmix" => Some(MixStrategy::LossMix),
            "label_mixup" => Some(MixStrategy::LabelMixup),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MixStrategy::Baseline => "baseline",
            MixStrategy::Union => "union",
            MixStrategy::Noise => "noise",
            MixStrategy::LossMix => "lossmix",
            MixStrategy::LabelMixup => "label_mixup",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMixer {
    Pixel,
    Region,
}

impl InputMixer {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pixel" => Some(InputMixer::Pixel),
            "region" => Some(InputMixer::Region),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputMixer::Pixel => "pixel",
            InputMixer::Region => "region",
        }
    }
}

/// Which of the four detection loss terms receive the mixing weights.
/// Terms toggled off fall back to the unweighted union of the label
/// sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermToggles {
    pub rpn_cls: bool,
    pub rpn_reg: bool,
    pub roi_cls: bool,
    pub roi_reg: bool,
}

impl TermToggles {
    pub fn all_on() -> Self {
        TermToggles {
            rpn_cls: true,
            rpn_reg: true,
            roi_cls: true,
            roi_reg: true,
        }
    }

    pub fn all_off() -> Self {
        TermToggles {
            rpn_cls: false,
            rpn_reg: false,
            roi_cls: false,
            roi_reg: false,
        }
    }

    pub fn inverted(self) -> Self {
        TermToggles {
            rpn_cls: !self.rpn_cls,
            rpn_reg: !self.rpn_reg,
            roi_cls: !self.roi_cls,
            roi_reg: !self.roi_reg,
        }
    }

    pub fn any(self) -> bool {
        self.rpn_cls || self.rpn_reg || self.roi_cls || self.roi_reg
    }
}

impl Default for TermToggles {
    fn default() -> Self {
        TermToggles::all_on()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub strategy: MixStrategy,
    /// Beta(alpha, alpha) concentration for the mixing ratio.
    pub alpha: f64,
    pub input_mixer: InputMixer,
    /// Upper bound on the partner coefficient for the noise strategy.
    pub noise_lambda_max: f64,
    pub toggles: TermToggles,
    /// Train on half raw, half mixed samples per batch instead of
    /// mixing everything.
    pub reg_style: bool,
    /// Fraction of training during which mixing is active; afterwards
    /// samples pass through unmixed.
    pub partial_stop_fraction: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            strategy: MixStrategy::LossMix,
            alpha: 1.0,
            input_mixer: InputMixer::Pixel,
            noise_lambda_max: 0.2,
            toggles: TermToggles::all_on(),
            reg_style: false,
            partial_stop_fraction: 1.0,
        }
    }
}

/// One label set with its loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLabels {
    pub instances: Vec<Instance>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct MixedSample {
    pub image: Tensor,
    pub sets: Vec<WeightedLabels>,
}

fn weighted(instances: &[Instance], weight: f64) -> WeightedLabels {
    WeightedLabels {
        instances: instances
            .iter()
            .map(|i| Instance {
                mix_weight: weight,
                ..i.clone()
            })
            .collect(),
        weight,
    }
}

/// Interpolate two images on a shared canvas of the larger extent in
/// each dimension. Smaller images are center aligned and zero padded.
/// Returns the mixed image and the (dx, dy) translation applied to each
/// input, for adjusting its boxes.
pub fn mix_images_pixel(a: &Tensor, b: &Tensor, lambda: f64) -> (Tensor, (i64, i64), (i64, i64)) {
    let (ha, wa, ca) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (hb, wb, cb) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    assert_eq!(ca, cb, "channel mismatch");
    let h = ha.max(hb);
    let w = wa.max(wb);
    let (dxa, dya) = (((w - wa) / 2) as i64, ((h - ha) / 2) as i64);
    let (dxb, dyb) = (((w - wb) / 2) as i64, ((h - hb) / 2) as i64);
    let da = a.data();
    let db = b.data();
    let sample = |d: &[f64], sw: usize, sh: usize, x: i64, y: i64, ch: usize| -> f64 {
        if x < 0 || y < 0 || x >= sw as i64 || y >= sh as i64 {
            0.0
        } else {
            d[(y as usize * sw + x as usize) * ca + ch]
        }
    };
    let mut out = vec![0.0; h * w * ca];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..ca {
                let pa = sample(da, wa, ha, x as i64 - dxa, y as i64 - dya, ch);
                let pb = sample(db, wb, hb, x as i64 - dxb, y as i64 - dyb, ch);
                out[(y * w + x) * ca + ch] = lambda * pa + (1.0 - lambda) * pb;
            }
        }
    }
    (
        Tensor::new(vec![h, w, ca], out).unwrap(),
        (dxa, dya),
        (dxb, dyb),
    )
}

/// Nearest-neighbor resize of an (h, w, c) image.
pub fn resize_nearest(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64).floor() as usize).min(h - 1);
        for x in 0..ow {
            let sx = (((x as f64 + 0.5) * w as f64 / ow as f64).floor() as usize).min(w - 1);
            let src = (sy * w + sx) * c;
            let dst = (y * ow + x) * c;
            out[dst..dst + c].copy_from_slice(&d[src..src + c]);
        }
    }
    Tensor::new(vec![oh, ow, c], out).unwrap()
}

/// Paste a rectangle of `b` (nearest-resized to `a`'s extent first)
/// into `a`. The rectangle is the integer-sided one whose area is
/// closest to (1 - lambda) * h * w over all feasible side pairs; its
/// position is uniform. Returns the mixed image, the pasted window as
/// (x0, y0, x1, y1), and the effective ratio 1 - area / (h * w).
pub fn mix_images_region(
    a: &Tensor,
    b: &Tensor,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Option<(usize, usize, usize, usize)>, f64) {
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    assert_eq!(c, b.shape()[2], "channel mismatch");
    let hw = (h * w) as f64;
    let target = (1.0 - lambda) * hw;
    if target < 0.5 {
        return (a.clone(), None, 1.0);
    }
    let resized;
    let bb = if b.shape()[0] == h && b.shape()[1] == w {
        b
    } else {
        resized = resize_nearest(b, h, w);
        &resized
    };
    if target > hw - 0.5 {
        return (bb.clone(), Some((0, 0, w, h)), 0.0);
    }
    // For each height the closest area is at the rounded width, so a
    // single sweep over heights finds the global optimum.
    let mut best = (1usize, 1usize);
    let mut best_err = f64::INFINITY;
    for rh in 1..=h {
        let rw = (target / rh as f64).round().clamp(1.0, w as f64) as usize;
        let err = ((rh * rw) as f64 - target).abs();
        if err < best_err {
            best_err = err;
            best = (rh, rw);
        }
    }
    let (rh, rw) = best;
    let x0 = rng.gen_range(0..=(w - rw));
    let y0 = rng.gen_range(0..=(h - rh));
    let mut out = a.data().to_vec();
    let db = bb.data();
    for y in y0..y0 + rh {
        let row = (y * w + x0) * c;
        out[row..row + rw * c].copy_from_slice(&db[row..row + rw * c]);
    }
    let eff = 1.0 - (rh * rw) as f64 / hw;
    (
        Tensor::new(vec![h, w, c], out).unwrap(),
        Some((x0, y0, x0 + rw, y0 + rh)),
        eff,
    )
}

/// Translate boxes by an integer offset.
pub fn adjust_instances(instances: &[Instance], dx: i64, dy: i64) -> Vec<Instance> {
    instances
        .iter()
        .map(|i| Instance {
            class_id: i.class_id,
            bbox: BoxXYXY::new(
                i.bbox.x0 + dx as f64,
                i.bbox.y0 + dy as f64,
                i.bbox.x1 + dx as f64,
                i.bbox.y1 + dy as f64,
            ),
            mix_weight: i.mix_weight,
        })
        .collect()
}

/// Scale boxes (used when the partner image was resized).
pub fn scale_instances(instances: &[Instance], sx: f64, sy: f64) -> Vec<Instance> {
    instances
        .iter()
        .map(|i| Instance {
            class_id: i.class_id,
            bbox: BoxXYXY::new(
                i.bbox.x0 * sx,
                i.bbox.y0 * sy,
                i.bbox.x1 * sx,
                i.bbox.y1 * sy,
            ),
            mix_weight: i.mix_weight,
        })
        .collect()
}

/// Clip boxes to a window, dropping slivers thinner than one pixel.
pub fn clip_instances(instances: &[Instance], x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Instance> {
    instances
        .iter()
        .filter_map(|i| {
            let b = BoxXYXY::new(
                i.bbox.x0.max(x0),
                i.bbox.y0.max(y0),
                i.bbox.x1.min(x1),
                i.bbox.y1.min(y1),
            );
            if b.width() >= 1.0 && b.height() >= 1.0 {
                Some(Instance {
                    class_id: i.class_id,
                    bbox: b,
                    mix_weight: i.mix_weight,
                })
            } else {
                None
            }
        })
        .collect()
}

/// Both label sets with their mixing weights. At the exact endpoints
/// the degenerate set is dropped so a lambda of 1 reproduces plain
/// unmixed training to the bit.
pub fn mix_targets(i: &[Instance], j: &[Instance], lambda: f64) -> Vec<WeightedLabels> {
    if lambda == 1.0 {
        return vec![weighted(i, 1.0)];
    }
    if lambda == 0.0 {
        return vec![weighted(j, 1.0)];
    }
    vec![weighted(i, lambda), weighted(j, 1.0 - lambda)]
}

/// Pairing permutation for a minibatch: sample k is mixed with sample
/// perm[k]. Fisher-Yates, uniform over all permutations.
pub fn make_batch_pairs(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Build one mixed sample from a pair according to the strategy.
///
/// `lam_rng` supplies the mixing ratio, `region_rng` the rectangle
/// position (consumed only by the region mixer). Panics on
/// `LabelMixup`, which defines no detection targets.
pub fn make_mixed_sample(
    cfg: &MixConfig,
    a: &ImageSample,
    b: &ImageSample,
    lam_rng: &mut ChaCha8Rng,
    region_rng: &mut ChaCha8Rng,
) -> MixedSample {
    match cfg.strategy {
        MixStrategy::Baseline => MixedSample {
            image: a.image.clone(),
            sets: vec![weighted(&a.instances, 1.0)],
        },
        MixStrategy::LossMix => {
            let lam = beta_symmetric(lam_rng, cfg.alpha);
            mix_pair(cfg, a, b, lam, region_rng, |ai, bi, eff| {
                mix_targets(ai, bi, eff)
            })
        }
        MixStrategy::Union => {
            let lam = beta_symmetric(lam_rng, 1.0);
            mix_pair(cfg, a, b, lam, region_rng, |ai, bi, _eff| {
                let mut all = ai.to_vec();
                all.extend_from_slice(bi);
                vec![weighted(&all, 1.0)]
            })
        }
        MixStrategy::Noise => {
            let ln = lam_rng.gen::<f64>() * cfg.noise_lambda_max;
            mix_pair(cfg, a, b, 1.0 - ln, region_rng, |ai, _bi, _eff| {
                vec![weighted(ai, 1.0)]
            })
        }
        MixStrategy::LabelMixup => {
            panic!("label mixup has no detection target form; reject it before mixing")
        }
    }
}

fn mix_pair(
    cfg: &MixConfig,
    a: &ImageSample,
    b: &ImageSample,
    lambda: f64,
    region_rng: &mut ChaCha8Rng,
    build_sets: impl Fn(&[Instance], &[Instance], f64) -> Vec<WeightedLabels>,
) -> MixedSample {
    match cfg.input_mixer {
        InputMixer::Pixel => {
            let (image, oa, ob) = mix_images_pixel(&a.image, &b.image, lambda);
            let ai = adjust_instances(&a.instances, oa.0, oa.1);
            let bi = adjust_instances(&b.instances, ob.0, ob.1);
            MixedSample {
                image,
                sets: build_sets(&ai, &bi, lambda),
            }
        }
        InputMixer::Region => {
            let (h, w) = (a.image.shape()[0], a.image.shape()[1]);
            let (bh, bw) = (b.image.shape()[0], b.image.shape()[1]);
            let (image, rect, eff) = mix_images_region(&a.image, &b.image, lambda, region_rng);
            let scaled = scale_instances(
                &b.instances,
                w as f64 / bw as f64,
                h as f64 / bh as f64,
            );
            let bi = match rect {
                Some((x0, y0, x1, y1)) => {
                    clip_instances(&scaled, x0 as f64, y0 as f64, x1 as f64, y1 as f64)
                }
                None => Vec::new(),
            };
            MixedSample {
                image,
                sets: build_sets(&a.instances, &bi, eff),
            }
        }
    }
}
