//! Detection loss on a real forward pass: breakdown accounting, the
//! weighted-set decomposition, toggles, and gradient flow.

use lossmix_core::autodiff::Graph;
use lossmix_core::detector::{forward, init_params, DetectorConfig, DetectorParams};
use lossmix_core::loss::{ce_loss, detection_loss, lossmix_detection_loss, LossError};
use lossmix_core::mix::{TermToggles, WeightedLabels};
use lossmix_core::rng::{stream, STREAM_INIT, STREAM_SCENE};
use lossmix_core::scene::{generate_scene, Domain, ImageSample, SceneConfig};
use lossmix_core::tensor::Tensor;

fn setup(seed: u64) -> (DetectorConfig, DetectorParams, ImageSample) {
    let scfg = SceneConfig {
        height: 32,
        width: 32,
        size_min: 8,
        size_max: 14,
        ..SceneConfig::default()
    };
    let det = DetectorConfig::new(32, 32, scfg.classes);
    let params = init_params(&det, &mut stream(seed, STREAM_INIT, 0));
    let sample = generate_scene(&scfg, Domain::Source, &mut stream(seed, STREAM_SCENE, 0));
    (det, params, sample)
}

fn weighted(sample: &ImageSample, weight: f64) -> WeightedLabels {
    WeightedLabels {
        instances: sample.instances.clone(),
        weight,
    }
}

#[test]
fn breakdown_terms_sum_to_the_total_in_fold_order() {
    for seed in 0..10u64 {
        let (det, params, sample) = setup(seed);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let img = g.input(sample.image.clone());
        let out = forward(&mut g, &bound, img, &det).unwrap();
        let (total, b) =
            detection_loss(&mut g, &out, &sample.instances, &det, TermToggles::all_on()).unwrap();
        assert!(b.total.is_finite() && b.total > 0.0);
        assert_eq!(g.value(total).item(), b.total);
        let refold = ((b.rpn_cls + b.rpn_reg) + b.roi_cls) + b.roi_reg;
        assert_eq!(refold, b.total, "seed {seed}: breakdown drifted from total");
    }
}

#[test]
fn single_full_weight_set_is_bitwise_equal_to_the_plain_loss() {
    let (det, params, sample) = setup(3);

    let mut g1 = Graph::new();
    let b1 = params.bind(&mut g1);
    let img1 = g1.input(sample.image.clone());
    let out1 = forward(&mut g1, &b1, img1, &det).unwrap();
    let (t1, _) =
        detection_loss(&mut g1, &out1, &sample.instances, &det, TermToggles::all_on()).unwrap();
    let grads1 = g1.backward(t1).unwrap();

    let mut g2 = Graph::new();
    let b2 = params.bind(&mut g2);
    let img2 = g2.input(sample.image.clone());
    let out2 = forward(&mut g2, &b2, img2, &det).unwrap();
    let sets = vec![weighted(&sample, 1.0)];
    let (t2, _) =
        lossmix_detection_loss(&mut g2, &out2, &sets, &det, TermToggles::all_on()).unwrap();
    let grads2 = g2.backward(t2).unwrap();

    assert_eq!(g1.value(t1).item(), g2.value(t2).item());
    for (id1, id2) in b1.node_ids().into_iter().zip(b2.node_ids()) {
        match (grads1.get(id1), grads2.get(id2)) {
            (Some(a), Some(b)) => assert_eq!(a.data(), b.data()),
            (None, None) => {}
            _ => panic!("gradient presence differs between the two paths"),
        }
    }
}

#[test]
fn mixed_loss_is_the_lambda_weighted_sum_of_sub_losses() {
    for seed in 0..8u64 {
        let (det, params, a) = setup(seed);
        let (_, _, b) = setup(seed + 100);
        let lambda = 0.05 + 0.9 * (seed as f64 / 7.0);

        let eval_plain = |gts: &ImageSample| -> f64 {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let img = g.input(a.image.clone());
            let out = forward(&mut g, &bound, img, &det).unwrap();
            let (t, _) =
                detection_loss(&mut g, &out, &gts.instances, &det, TermToggles::all_on()).unwrap();
            g.value(t).item()
        };
        let li = eval_plain(&a);
        let lj = eval_plain(&b);

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let img = g.input(a.image.clone());
        let out = forward(&mut g, &bound, img, &det).unwrap();
        let sets = vec![weighted(&a, lambda), weighted(&b, 1.0 - lambda)];
        let (t, _) =
            lossmix_detection_loss(&mut g, &out, &sets, &det, TermToggles::all_on()).unwrap();
        let got = g.value(t).item();
        let want = lambda * li + (1.0 - lambda) * lj;
        assert!(
            (got - want).abs() <= 1e-12 * want.abs().max(1.0),
            "seed {seed}: {got} vs {want}"
        );
    }
}

#[test]
fn weight_sums_away_from_one_are_rejected() {
    let (det, params, sample) = setup(4);
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let img = g.input(sample.image.clone());
    let out = forward(&mut g, &bound, img, &det).unwrap();
    let sets = vec![weighted(&sample, 0.5), weighted(&sample, 0.25)];
    match lossmix_detection_loss(&mut g, &out, &sets, &det, TermToggles::all_on()) {
        Err(LossError::BadWeightSum { sum }) => assert_eq!(sum, 0.75),
        other => panic!("expected a weight sum rejection, got {other:?}"),
    }
}

#[test]
fn toggles_zero_out_exactly_the_disabled_terms() {
    let (det, params, sample) = setup(5);
    let run = |toggles: TermToggles| {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let img = g.input(sample.image.clone());
        let out = forward(&mut g, &bound, img, &det).unwrap();
        detection_loss(&mut g, &out, &sample.instances, &det, toggles).unwrap()
    };
    let (_, full) = run(TermToggles::all_on());

    let only_rpn_cls = TermToggles {
        rpn_cls: true,
        ..TermToggles::all_off()
    };
    let (_, b) = run(only_rpn_cls);
    assert_eq!(b.rpn_cls, full.rpn_cls);
    assert_eq!(b.rpn_reg, 0.0);
    assert_eq!(b.roi_cls, 0.0);
    assert_eq!(b.roi_reg, 0.0);
    assert_eq!(b.total, full.rpn_cls);

    let (_, none) = run(TermToggles::all_off());
    assert_eq!(none.total, 0.0);
}

#[test]
fn gradients_reach_every_parameter_tensor() {
    let (det, params, sample) = setup(6);
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let img = g.input(sample.image.clone());
    let out = forward(&mut g, &bound, img, &det).unwrap();
    let (t, _) =
        detection_loss(&mut g, &out, &sample.instances, &det, TermToggles::all_on()).unwrap();
    let grads = g.backward(t).unwrap();
    for (name, id) in [
        ("conv1_w", bound.conv1_w),
        ("conv1_b", bound.conv1_b),
        ("conv2_w", bound.conv2_w),
        ("conv2_b", bound.conv2_b),
        ("head_w", bound.head_w),
        ("head_b", bound.head_b),
        ("fc1_w", bound.fc1_w),
        ("fc1_b", bound.fc1_b),
        ("fc2_w", bound.fc2_w),
        ("fc2_b", bound.fc2_b),
    ] {
        let gt = grads.get(id).unwrap_or_else(|| panic!("{name} missing"));
        assert!(gt.data().iter().all(|v| v.is_finite()), "{name} not finite");
        assert!(
            gt.data().iter().any(|&v| v != 0.0),
            "{name} received a zero gradient"
        );
    }
}

#[test]
fn one_descent_step_reduces_the_loss_on_the_same_sample() {
    let (det, mut params, sample) = setup(7);
    let eval = |p: &DetectorParams, want_grads: bool| {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let img = g.input(sample.image.clone());
        let out = forward(&mut g, &bound, img, &det).unwrap();
        let (t, _) =
            detection_loss(&mut g, &out, &sample.instances, &det, TermToggles::all_on()).unwrap();
        let loss = g.value(t).item();
        let grads = want_grads.then(|| {
            let gr = g.backward(t).unwrap();
            bound
                .node_ids()
                .into_iter()
                .map(|id| gr.get(id).cloned())
                .collect::<Vec<_>>()
        });
        (loss, grads)
    };
    let (before, grads) = eval(&params, true);
    let grads = grads.unwrap();
    let lr = 1e-3;
    for ((_, t), gt) in params.tensors_mut().into_iter().zip(&grads) {
        if let Some(gt) = gt {
            for (v, &gv) in t.data_mut().iter_mut().zip(gt.data()) {
                *v -= lr * gv;
            }
        }
    }
    let (after, _) = eval(&params, false);
    assert!(
        after < before,
        "descent step raised the loss: {before} -> {after}"
    );
}

#[test]
fn ce_loss_matches_a_log_softmax_oracle() {
    use rand::Rng;
    let mut rng = stream(15, STREAM_INIT, 0);
    for _ in 0..100 {
        let n = rng.gen_range(2..8);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let target = rng.gen_range(0..n);
        let mut g = Graph::new();
        let node = g.input(Tensor::new(vec![n], logits.clone()).unwrap());
        let loss = ce_loss(&mut g, node, target).unwrap();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let want = lse - logits[target];
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }
}
