//! Training loops: supervised mixing runs, multi-strategy comparisons,
//! and the two-phase mean-teacher adaptation run.
//!
//! Everything is single threaded and deterministic. Each consumer of
//! randomness owns a counter-indexed stream, so adding or removing one
//! loss term never shifts the draws of another. That is what turns the
//! zero-weight identities in the tests into bit-exact statements
//! instead of approximate ones.

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Gradients, Graph, GraphError, NodeId};
use crate::config::{Config, ConfigError, TrainConfig};
use crate::detector::{
    forward, forward_features, init_params, save_checkpoint, BoundParams, CheckpointError,
    DetectorConfig, DetectorParams,
};
use crate::eval::{evaluate_model, EvalOpts, EvalResult};
use crate::loss::{
    detection_loss_nodes, lossmix_detection_loss, LossBreakdown, LossError,
};
use crate::mix::{
    adjust_instances, make_batch_pairs, make_mixed_sample, mix_images_pixel, mix_targets,
    MixConfig, MixStrategy, MixedSample, TermToggles, WeightedLabels,
};
use crate::report::{
    write_json, ComparisonEntry, ComparisonReport, DataHasher, EvalSummary, MetricsRow,
    MetricsWriter, RunReport, REPORT_SCHEMA_VERSION,
};
use crate::rng::{
    beta_symmetric, child_seed, stream, STREAM_DATA, STREAM_EVAL_DATA, STREAM_GRADCHECK,
    STREAM_INIT, STREAM_LAMBDA, STREAM_MST_LAMBDA, STREAM_MST_PAIR, STREAM_NST_LAMBDA,
    STREAM_NST_PAIR, STREAM_PAIR, STREAM_REGION, STREAM_STRONG, STREAM_TGT_LAMBDA,
    STREAM_TGT_PAIR,
};
use crate::scene::{generate_scene, Domain, ImageSample, Instance, SceneConfig};
use crate::teacher::{
    discriminator_loss, ema_update, init_disc, pseudo_label, strong_noise, BoundDisc, DaState,
    DiscParams,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Unsupported(String),
    #[error("training diverged at iteration {iter}: non-finite loss or parameters")]
    Diverged { iter: usize },
}

// Data roles hang off the run seed through child_seed, so train and
// eval sets in either domain can never collide.
const ROLE_TRAIN_SRC: u64 = 101;
const ROLE_TRAIN_TGT: u64 = 102;
const ROLE_EVAL_SRC: u64 = 103;
const ROLE_EVAL_TGT: u64 = 104;
const ROLE_GRADCHECK: u64 = 301;

/// Training sample `idx` of a run: every index gets its own scene
/// stream, so batches of any size slice the same infinite sequence.
pub fn train_sample(scene: &SceneConfig, domain: Domain, seed: u64, idx: u64) -> ImageSample {
    let role = match domain {
        Domain::Source => ROLE_TRAIN_SRC,
        Domain::Target => ROLE_TRAIN_TGT,
    };
    let mut rng = stream(child_seed(child_seed(seed, role), idx), STREAM_DATA, 0);
    generate_scene(scene, domain, &mut rng)
}

fn train_batch(
    scene: &SceneConfig,
    domain: Domain,
    seed: u64,
    iter: usize,
    batch: usize,
) -> Vec<ImageSample> {
    (0..batch)
        .map(|k| train_sample(scene, domain, seed, (iter * batch + k) as u64))
        .collect()
}

/// The held-out evaluation set, disjoint from training data by
/// construction.
pub fn eval_set(scene: &SceneConfig, domain: Domain, seed: u64, n: usize) -> Vec<ImageSample> {
    let role = match domain {
        Domain::Source => ROLE_EVAL_SRC,
        Domain::Target => ROLE_EVAL_TGT,
    };
    let base = child_seed(seed, role);
    (0..n)
        .map(|k| {
            let mut rng = stream(child_seed(base, k as u64), STREAM_EVAL_DATA, 0);
            generate_scene(scene, domain, &mut rng)
        })
        .collect()
}

/// Plain SGD over the canonical parameter order.
pub fn sgd(params: &mut DetectorParams, bound: &BoundParams, grads: &Gradients, lr: f64) {
    for ((_, t), id) in params.tensors_mut().into_iter().zip(bound.node_ids()) {
        if let Some(gt) = grads.get(id) {
            for (v, &gv) in t.data_mut().iter_mut().zip(gt.data()) {
                *v -= lr * gv;
            }
        }
    }
}

fn sgd_disc(disc: &mut DiscParams, bound: &BoundDisc, grads: &Gradients, lr: f64) {
    let ids = [bound.w1, bound.b1, bound.w2, bound.b2];
    for ((_, t), id) in disc.tensors_mut().into_iter().zip(ids) {
        if let Some(gt) = grads.get(id) {
            for (v, &gv) in t.data_mut().iter_mut().zip(gt.data()) {
                *v -= lr * gv;
            }
        }
    }
}

fn lr_at(train: &TrainConfig, iter: usize) -> f64 {
    if train.lr_warmup_iters > 0 && iter < train.lr_warmup_iters {
        train.lr * (iter + 1) as f64 / train.lr_warmup_iters as f64
    } else {
        train.lr
    }
}

/// Mixed samples for one optimizer step. Pairing comes from one
/// permutation draw per iteration; the mixing ratio and region draws
/// are indexed per sample. Shared verbatim between supervised training
/// and the adaptation source term, which is what keeps the two
/// trajectories bit-identical when every other adaptation weight is
/// zero.
pub fn build_step_samples(
    mix: &MixConfig,
    batch: &[ImageSample],
    seed: u64,
    iter: usize,
    mixing_on: bool,
) -> Vec<MixedSample> {
    let b = batch.len();
    let raw = |s: &ImageSample| MixedSample {
        image: s.image.clone(),
        sets: vec![WeightedLabels {
            instances: s.instances.clone(),
            weight: 1.0,
        }],
    };
    if !mixing_on || mix.strategy == MixStrategy::Baseline {
        return batch.iter().map(raw).collect();
    }
    let pairs = make_batch_pairs(b, &mut stream(seed, STREAM_PAIR, iter as u64));
    batch
        .iter()
        .enumerate()
        .map(|(k, s)| {
            if mix.reg_style && k < b / 2 {
                return raw(s);
            }
            let idx = (iter * b + k) as u64;
            let mut lam_rng = stream(seed, STREAM_LAMBDA, idx);
            let mut region_rng = stream(seed, STREAM_REGION, idx);
            make_mixed_sample(mix, s, &batch[pairs[k]], &mut lam_rng, &mut region_rng)
        })
        .collect()
}

/// Forward plus mixed loss for every sample, averaged into one scalar
/// node. The returned breakdown holds batch means of the evaluated
/// terms.
pub fn batch_loss(
    g: &mut Graph,
    bound: &BoundParams,
    samples: &[MixedSample],
    det: &DetectorConfig,
    toggles: TermToggles,
) -> Result<(NodeId, LossBreakdown), HarnessError> {
    assert!(!samples.is_empty(), "empty batch");
    let mut acc: Option<NodeId> = None;
    let mut sum = LossBreakdown::default();
    for s in samples {
        let img = g.input(s.image.clone());
        let out = forward(g, bound, img, det)?;
        let (total, bd) = lossmix_detection_loss(g, &out, &s.sets, det, toggles)?;
        sum.rpn_cls += bd.rpn_cls;
        sum.rpn_reg += bd.rpn_reg;
        sum.roi_cls += bd.roi_cls;
        sum.roi_reg += bd.roi_reg;
        sum.total += bd.total;
        acc = Some(match acc {
            Some(a) => g.add(a, total)?,
            None => total,
        });
    }
    let n = samples.len() as f64;
    let mean = g.scale(acc.unwrap(), 1.0 / n);
    Ok((
        mean,
        LossBreakdown {
            rpn_cls: sum.rpn_cls / n,
            rpn_reg: sum.rpn_reg / n,
            roi_cls: sum.roi_cls / n,
            roi_reg: sum.roi_reg / n,
            total: sum.total / n,
        },
    ))
}

fn summary(r: &EvalResult) -> EvalSummary {
    EvalSummary {
        ap: r.ap,
        ap50: r.ap50,
        ap75: r.ap75,
    }
}

fn reject_label_mixup(cfg: &Config) -> Result<(), HarnessError> {
    if cfg.mix.strategy == MixStrategy::LabelMixup {
        return Err(HarnessError::Unsupported(
            "mix.strategy label_mixup only defines a classification target; \
             detection training rejects it up front"
                .into(),
        ));
    }
    Ok(())
}

/// One supervised training run. Writes metrics.csv, config.txt,
/// best/last checkpoints and report.json into train.output_dir. A
/// non-finite loss or parameter aborts the run after saving the last
/// good state.
pub fn run_supervised(cfg: &Config) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    reject_label_mixup(cfg)?;
    let out_dir = PathBuf::from(&cfg.train.output_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.txt"), cfg.emit())?;

    let det = cfg.detector_config();
    let opts = EvalOpts::default();
    let seed = cfg.train.seed;
    let eval_samples = eval_set(&cfg.scene, cfg.train.eval_domain, seed, cfg.train.eval_size);

    let mut params = init_params(&det, &mut stream(seed, STREAM_INIT, 0));
    let mut metrics = MetricsWriter::create(&out_dir.join("metrics.csv"))?;
    let mut hasher = DataHasher::new();
    let mut best: Option<(f64, usize)> = None;
    let mut last_eval: Option<EvalSummary> = None;
    let started = Instant::now();

    let iters = cfg.train.iters;
    let b = cfg.train.batch_size;
    let mut diverged_at: Option<usize> = None;

    for i in 0..iters {
        let batch = train_batch(&cfg.scene, Domain::Source, seed, i, b);
        for s in &batch {
            hasher.update_tensor(&s.image);
        }
        let mixing_on = (i as f64) < cfg.mix.partial_stop_fraction * iters as f64;
        let samples = build_step_samples(&cfg.mix, &batch, seed, i, mixing_on);

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let (total, bd) = batch_loss(&mut g, &bound, &samples, &det, cfg.mix.toggles)?;
        if !g.value(total).item().is_finite() {
            diverged_at = Some(i);
            break;
        }
        let grads = g.backward(total)?;
        let prev = params.clone();
        sgd(&mut params, &bound, &grads, lr_at(&cfg.train, i));
        if params.tensors().iter().any(|(_, t)| !t.all_finite()) {
            params = prev;
            diverged_at = Some(i);
            break;
        }

        metrics.write_row(&MetricsRow {
            iter: i,
            phase: "supervised",
            kind: "train",
            rpn_cls: Some(bd.rpn_cls),
            rpn_reg: Some(bd.rpn_reg),
            roi_cls: Some(bd.roi_cls),
            roi_reg: Some(bd.roi_reg),
            total: Some(bd.total),
            model: "student",
            ..MetricsRow::default()
        })?;

        let step = i + 1;
        if step % cfg.train.eval_every == 0 || step == iters {
            let r = evaluate_model(&params, &eval_samples, &det, &opts);
            metrics.write_row(&MetricsRow {
                iter: step,
                phase: "supervised",
                kind: "eval",
                ap: Some(r.ap),
                ap50: Some(r.ap50),
                ap75: Some(r.ap75),
                model: "student",
                ..MetricsRow::default()
            })?;
            if best.map_or(true, |(bap, _)| r.ap50 > bap) {
                best = Some((r.ap50, step));
                save_checkpoint(&out_dir.join("best.json"), &params)?;
            }
            last_eval = Some(summary(&r));
        }
    }

    metrics.finish()?;
    save_checkpoint(&out_dir.join("last.json"), &params)?;
    let final_eval = match (diverged_at, last_eval) {
        (None, Some(s)) => s,
        _ => summary(&evaluate_model(&params, &eval_samples, &det, &opts)),
    };
    let (best_ap50, best_iter) = best.unwrap_or((final_eval.ap50, diverged_at.unwrap_or(iters)));
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        strategy: cfg.mix.strategy.name().into(),
        seed,
        iters_run: diverged_at.unwrap_or(iters),
        wall_seconds: started.elapsed().as_secs_f64(),
        data_checksum: hasher.finish_hex(),
        diverged: diverged_at.is_some(),
        final_eval,
        best_ap50,
        best_iter,
        teacher_eval: None,
        config: cfg.clone(),
    };
    write_json(&out_dir.join("report.json"), &report)?;
    if let Some(iter) = diverged_at {
        return Err(HarnessError::Diverged { iter });
    }
    Ok(report)
}

/// Train one run per strategy on the same seed and data streams, each
/// in its own subdirectory. Deltas are against the baseline entry when
/// one is included, otherwise against zero.
pub fn run_comparison(
    cfg: &Config,
    strategies: &[MixStrategy],
) -> Result<ComparisonReport, HarnessError> {
    let out_dir = PathBuf::from(&cfg.train.output_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut finals = Vec::new();
    let mut baseline_ap50: Option<f64> = None;
    for &s in strategies {
        let mut sub = cfg.clone();
        sub.mix.strategy = s;
        sub.train.output_dir = out_dir.join(s.name()).to_string_lossy().into_owned();
        let report = run_supervised(&sub)?;
        if s == MixStrategy::Baseline {
            baseline_ap50 = Some(report.final_eval.ap50);
        }
        finals.push((s, report.final_eval));
    }
    let base = baseline_ap50.unwrap_or(0.0);
    let entries = finals
        .into_iter()
        .map(|(s, eval)| ComparisonEntry {
            strategy: s.name().into(),
            eval,
            delta_ap50_vs_baseline: eval.ap50 - base,
        })
        .collect();
    let report = ComparisonReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: cfg.train.seed,
        entries,
    };
    write_json(&out_dir.join("comparison.json"), &report)?;
    Ok(report)
}

/// Noisy source-target warmup term: each source image takes a small
/// target-image bleed, labels stay with the source side at full weight.
fn nst_loss(
    g: &mut Graph,
    bound: &BoundParams,
    src: &[ImageSample],
    tgt: &[ImageSample],
    seed: u64,
    iter: usize,
    noise_lambda_max: f64,
    det: &DetectorConfig,
    toggles: TermToggles,
) -> Result<NodeId, HarnessError> {
    let b = src.len();
    let pairs = make_batch_pairs(b, &mut stream(seed, STREAM_NST_PAIR, iter as u64));
    let mut acc: Option<NodeId> = None;
    for k in 0..b {
        let idx = (iter * b + k) as u64;
        let mut rng = stream(seed, STREAM_NST_LAMBDA, idx);
        let ln = rng.gen::<f64>() * noise_lambda_max;
        let (image, oa, _) = mix_images_pixel(&src[k].image, &tgt[pairs[k]].image, 1.0 - ln);
        let sets = vec![WeightedLabels {
            instances: adjust_instances(&src[k].instances, oa.0, oa.1),
            weight: 1.0,
        }];
        let img = g.input(image);
        let out = forward(g, bound, img, det)?;
        let (t, _) = lossmix_detection_loss(g, &out, &sets, det, toggles)?;
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / b as f64))
}

fn adapt_lambda(seed: u64, tag: u64, idx: u64, alpha: f64, balanced_fixed: bool) -> f64 {
    if balanced_fixed {
        0.5
    } else {
        beta_symmetric(&mut stream(seed, tag, idx), alpha)
    }
}

/// Mixed target-target term: teacher pseudo labels on both sides, the
/// student trains on a strong-noised view of the mixed image.
#[allow(clippy::too_many_arguments)]
fn mtt_loss(
    g: &mut Graph,
    bound: &BoundParams,
    tgt: &[ImageSample],
    pseudo: &[Vec<Instance>],
    seed: u64,
    iter: usize,
    alpha: f64,
    balanced_fixed: bool,
    det: &DetectorConfig,
    toggles: TermToggles,
) -> Result<NodeId, HarnessError> {
    let b = tgt.len();
    let pairs = make_batch_pairs(b, &mut stream(seed, STREAM_TGT_PAIR, iter as u64));
    let mut acc: Option<NodeId> = None;
    for k in 0..b {
        let idx = (iter * b + k) as u64;
        let lam = adapt_lambda(seed, STREAM_TGT_LAMBDA, idx, alpha, balanced_fixed);
        let (image, oa, ob) = mix_images_pixel(&tgt[k].image, &tgt[pairs[k]].image, lam);
        let ai = adjust_instances(&pseudo[k], oa.0, oa.1);
        let bi = adjust_instances(&pseudo[pairs[k]], ob.0, ob.1);
        let sets = mix_targets(&ai, &bi, lam);
        let noised = strong_noise(&image, &mut stream(seed, STREAM_STRONG, idx));
        let img = g.input(noised);
        let out = forward(g, bound, img, det)?;
        let (t, _) = lossmix_detection_loss(g, &out, &sets, det, toggles)?;
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / b as f64))
}

/// Mixed source-target term: real labels on the source side, teacher
/// pseudo labels on the target side, weighted by the mixing ratio.
#[allow(clippy::too_many_arguments)]
fn mst_loss(
    g: &mut Graph,
    bound: &BoundParams,
    src: &[ImageSample],
    tgt: &[ImageSample],
    pseudo: &[Vec<Instance>],
    seed: u64,
    iter: usize,
    alpha: f64,
    balanced_fixed: bool,
    det: &DetectorConfig,
    toggles: TermToggles,
) -> Result<NodeId, HarnessError> {
    let b = src.len();
    let pairs = make_batch_pairs(b, &mut stream(seed, STREAM_MST_PAIR, iter as u64));
    let mut acc: Option<NodeId> = None;
    for k in 0..b {
        let idx = (iter * b + k) as u64;
        let lam = adapt_lambda(seed, STREAM_MST_LAMBDA, idx, alpha, balanced_fixed);
        let (image, oa, ob) = mix_images_pixel(&src[k].image, &tgt[pairs[k]].image, lam);
        let ai = adjust_instances(&src[k].instances, oa.0, oa.1);
        let bi = adjust_instances(&pseudo[pairs[k]], ob.0, ob.1);
        let sets = mix_targets(&ai, &bi, lam);
        let img = g.input(image);
        let out = forward(g, bound, img, det)?;
        let (t, _) = lossmix_detection_loss(g, &out, &sets, det, toggles)?;
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / b as f64))
}

/// Two-phase adaptation run: a warmup of mixed source supervision plus
/// noisy source-target mixing with a weight-shared teacher, then an
/// adaptation phase that adds pseudo-label mixing and the adversarial
/// domain discriminator while the teacher trails by EMA.
pub fn run_da(cfg: &Config) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    reject_label_mixup(cfg)?;
    let out_dir = PathBuf::from(&cfg.train.output_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.txt"), cfg.emit())?;

    let det = cfg.detector_config();
    let opts = EvalOpts::default();
    let seed = cfg.train.seed;
    let da = &cfg.da;
    let eval_samples = eval_set(&cfg.scene, cfg.train.eval_domain, seed, cfg.train.eval_size);

    let student = init_params(&det, &mut stream(seed, STREAM_INIT, 0));
    let mut state = DaState {
        teacher: student.clone(),
        student,
        disc: init_disc(16, &mut stream(seed, STREAM_INIT, 1)),
    };

    let mut metrics = MetricsWriter::create(&out_dir.join("metrics.csv"))?;
    let mut hasher = DataHasher::new();
    let mut best: Option<(f64, usize)> = None;
    let mut last_student: Option<EvalSummary> = None;
    let mut last_teacher: Option<EvalSummary> = None;
    let started = Instant::now();

    let total_iters = da.warmup_iters + da.adapt_iters;
    let b = cfg.train.batch_size;
    let mut diverged_at: Option<usize> = None;

    for i in 0..total_iters {
        let warm = i < da.warmup_iters;
        let phase = if warm { "warmup" } else { "adapt" };
        let w_mss = da.lambda_mss;
        let w_nst = if warm { da.lambda_nst } else { 0.0 };
        let w_mtt = if warm { 0.0 } else { da.lambda_mtt };
        let w_mst = if warm { 0.0 } else { da.lambda_mst };
        let w_disc = if warm { 0.0 } else { da.lambda_disc };

        let need_src = w_mss > 0.0 || w_nst > 0.0 || w_mst > 0.0 || w_disc > 0.0;
        let need_tgt = w_nst > 0.0 || w_mtt > 0.0 || w_mst > 0.0 || w_disc > 0.0;

        let src = if need_src {
            train_batch(&cfg.scene, Domain::Source, seed, i, b)
        } else {
            Vec::new()
        };
        for s in &src {
            hasher.update_tensor(&s.image);
        }
        let tgt = if need_tgt {
            train_batch(&cfg.scene, Domain::Target, seed, i, b)
        } else {
            Vec::new()
        };
        for s in &tgt {
            hasher.update_tensor(&s.image);
        }
        let pseudo: Vec<Vec<Instance>> = if w_mtt > 0.0 || w_mst > 0.0 {
            tgt.iter()
                .map(|s| pseudo_label(&state.teacher, &s.image, &det, &opts, da.pseudo_thresh))
                .collect()
        } else {
            Vec::new()
        };

        let mut g = Graph::new();
        let bound = state.student.bind(&mut g);
        let bound_disc = (w_disc > 0.0).then(|| state.disc.bind(&mut g));

        let mut terms: Vec<(NodeId, f64)> = Vec::new();
        let mut v_mss = None;
        let mut v_nst = None;
        let mut v_mtt = None;
        let mut v_mst = None;
        let mut v_disc = None;
        let mut mss_bd: Option<LossBreakdown> = None;

        if w_mss > 0.0 {
            let mixing_on = (i as f64) < cfg.mix.partial_stop_fraction * total_iters as f64;
            let samples = build_step_samples(&cfg.mix, &src, seed, i, mixing_on);
            let (node, bd) = batch_loss(&mut g, &bound, &samples, &det, cfg.mix.toggles)?;
            v_mss = Some(g.value(node).item());
            mss_bd = Some(bd);
            terms.push((node, w_mss));
        }
        if w_nst > 0.0 {
            let node = nst_loss(
                &mut g,
                &bound,
                &src,
                &tgt,
                seed,
                i,
                da.noise_lambda_max,
                &det,
                cfg.mix.toggles,
            )?;
            v_nst = Some(g.value(node).item());
            terms.push((node, w_nst));
        }
        if w_mtt > 0.0 {
            let node = mtt_loss(
                &mut g,
                &bound,
                &tgt,
                &pseudo,
                seed,
                i,
                cfg.mix.alpha,
                da.balanced_fixed,
                &det,
                cfg.mix.toggles,
            )?;
            v_mtt = Some(g.value(node).item());
            terms.push((node, w_mtt));
        }
        if w_mst > 0.0 {
            let node = mst_loss(
                &mut g,
                &bound,
                &src,
                &tgt,
                &pseudo,
                seed,
                i,
                cfg.mix.alpha,
                da.balanced_fixed,
                &det,
                cfg.mix.toggles,
            )?;
            v_mst = Some(g.value(node).item());
            terms.push((node, w_mst));
        }
        if let Some(bd) = &bound_disc {
            let mut feats = Vec::new();
            for s in &src {
                let img = g.input(s.image.clone());
                feats.push((forward_features(&mut g, &bound, img)?, false));
            }
            for s in &tgt {
                let img = g.input(s.image.clone());
                feats.push((forward_features(&mut g, &bound, img)?, true));
            }
            let node = discriminator_loss(&mut g, bd, &feats)?;
            v_disc = Some(g.value(node).item());
            terms.push((node, w_disc));
        }

        let mut total_val = None;
        if !terms.is_empty() {
            let mut acc: Option<NodeId> = None;
            for (node, w) in &terms {
                let scaled = g.scale(*node, *w);
                acc = Some(match acc {
                    Some(a) => g.add(a, scaled)?,
                    None => scaled,
                });
            }
            let total = acc.unwrap();
            let tv = g.value(total).item();
            if !tv.is_finite() {
                diverged_at = Some(i);
                break;
            }
            total_val = Some(tv);
            let grads = g.backward(total)?;
            let prev_student = state.student.clone();
            let prev_disc = state.disc.clone();
            let lr = lr_at(&cfg.train, i);
            sgd(&mut state.student, &bound, &grads, lr);
            if let Some(bd) = &bound_disc {
                sgd_disc(&mut state.disc, bd, &grads, lr);
            }
            let bad = state.student.tensors().iter().any(|(_, t)| !t.all_finite())
                || state.disc.tensors().iter().any(|(_, t)| !t.all_finite());
            if bad {
                state.student = prev_student;
                state.disc = prev_disc;
                diverged_at = Some(i);
                break;
            }
        }

        if warm {
            state.teacher = state.student.clone();
        } else {
            ema_update(&mut state.teacher, &state.student, da.ema_momentum);
        }

        let (rc, rr, oc, or) = match &mss_bd {
            Some(bd) => (
                Some(bd.rpn_cls),
                Some(bd.rpn_reg),
                Some(bd.roi_cls),
                Some(bd.roi_reg),
            ),
            None => (None, None, None, None),
        };
        metrics.write_row(&MetricsRow {
            iter: i,
            phase,
            kind: "train",
            rpn_cls: rc,
            rpn_reg: rr,
            roi_cls: oc,
            roi_reg: or,
            total: total_val,
            mss: v_mss,
            nst: v_nst,
            mtt: v_mtt,
            mst: v_mst,
            disc: v_disc,
            model: "student",
            ..MetricsRow::default()
        })?;

        let step = i + 1;
        if step % cfg.train.eval_every == 0 || step == total_iters {
            let rs = evaluate_model(&state.student, &eval_samples, &det, &opts);
            let rt = evaluate_model(&state.teacher, &eval_samples, &det, &opts);
            for (model, r) in [("student", &rs), ("teacher", &rt)] {
                metrics.write_row(&MetricsRow {
                    iter: step,
                    phase,
                    kind: "eval",
                    ap: Some(r.ap),
                    ap50: Some(r.ap50),
                    ap75: Some(r.ap75),
                    model,
                    ..MetricsRow::default()
                })?;
            }
            if best.map_or(true, |(bap, _)| rs.ap50 > bap) {
                best = Some((rs.ap50, step));
                save_checkpoint(&out_dir.join("best.json"), &state.student)?;
            }
            last_student = Some(summary(&rs));
            last_teacher = Some(summary(&rt));
        }
    }

    metrics.finish()?;
    save_checkpoint(&out_dir.join("last.json"), &state.student)?;
    save_checkpoint(&out_dir.join("teacher.json"), &state.teacher)?;
    let final_eval = match (diverged_at, last_student) {
        (None, Some(s)) => s,
        _ => summary(&evaluate_model(&state.student, &eval_samples, &det, &opts)),
    };
    let teacher_eval = Some(match (diverged_at, last_teacher) {
        (None, Some(s)) => s,
        _ => summary(&evaluate_model(&state.teacher, &eval_samples, &det, &opts)),
    });
    let (best_ap50, best_iter) =
        best.unwrap_or((final_eval.ap50, diverged_at.unwrap_or(total_iters)));
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        strategy: "da".into(),
        seed,
        iters_run: diverged_at.unwrap_or(total_iters),
        wall_seconds: started.elapsed().as_secs_f64(),
        data_checksum: hasher.finish_hex(),
        diverged: diverged_at.is_some(),
        final_eval,
        best_ap50,
        best_iter,
        teacher_eval,
        config: cfg.clone(),
    };
    write_json(&out_dir.join("report.json"), &report)?;
    if let Some(iter) = diverged_at {
        return Err(HarnessError::Diverged { iter });
    }
    Ok(report)
}

/// Finite-difference check of the full forward-plus-loss gradient at
/// randomly sampled parameter coordinates, one fresh model and scene
/// per probe seed. Returns the worst relative error seen.
pub fn model_grad_check(
    cfg: &Config,
    n_seeds: usize,
    coords_per_seed: usize,
    eps: f64,
) -> Result<f64, HarnessError> {
    let det = cfg.detector_config();
    let mut worst = 0.0_f64;
    for s in 0..n_seeds {
        let pseed = child_seed(cfg.train.seed, ROLE_GRADCHECK + s as u64);
        let params = init_params(&det, &mut stream(pseed, STREAM_INIT, 0));
        let sample = train_sample(&cfg.scene, Domain::Source, pseed, 0);
        let flat = params.flatten();
        let n = flat.numel();
        let mut crng = stream(pseed, STREAM_GRADCHECK, 0);
        let coords: Vec<usize> = (0..coords_per_seed).map(|_| crng.gen_range(0..n)).collect();
        let image = sample.image.clone();
        let gts = sample.instances.clone();
        let det2 = det.clone();
        let f = move |g: &mut Graph, x: NodeId| {
            let bound = DetectorParams::bind_flat(g, x, &det2)?;
            let img = g.input(image.clone());
            let out = forward(g, &bound, img, &det2)?;
            let nodes = detection_loss_nodes(g, &out, &gts, &det2, TermToggles::all_on())?;
            Ok(nodes.fold_total(g))
        };
        let err = crate::autodiff::grad_check_at(f, &flat, eps, &coords)?;
        worst = worst.max(err);
    }
    Ok(worst)
}
