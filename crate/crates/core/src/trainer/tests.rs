use super::*;
use crate::data::{Corpus, SceneSpec};
use crate::detector::{forward_roi_values, forward_rpn_values, supervised_loss_value};
use crate::geometry::AnchorSpec;
use crate::pseudo_label::softmax_rows;
use crate::tensor::Tensor;

fn tiny_det_cfg() -> DetectorConfig {
    DetectorConfig {
        num_classes: 3,
        backbone_channels: [4, 6, 8],
        rpn_channels: 8,
        roi_pool_size: 2,
        roi_fc_dim: 8,
        anchor_spec: AnchorSpec {
            stride: 8,
            scales: vec![10.0, 16.0],
            aspects: vec![1.0],
        },
        train_proposals: 16,
        ..DetectorConfig::default()
    }
}

fn tiny_scene_spec() -> SceneSpec {
    SceneSpec {
        image_size: 32,
        min_objects: 1,
        max_objects: 2,
        min_size: 10.0,
        max_size: 16.0,
        ..SceneSpec::default()
    }
}

fn tiny_train_cfg() -> TrainConfig {
    TrainConfig {
        n_proposals: 16,
        burn_in_iters: 2,
        total_iters: 3,
        batch_labeled: 1,
        batch_unlabeled: 1,
        eval_interval: 0,
        lr: 0.01,
        ..TrainConfig::default()
    }
}

fn scalar_params(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(v));
    p
}

#[test]
fn ema_update_endpoints() {
    let det_cfg = tiny_det_cfg();
    let student = DetectorParams::init(det_cfg.clone(), 1).unwrap();
    let mut teacher = DetectorParams::init(det_cfg, 2).unwrap();
    let orig = teacher.clone();

    ema_update(&mut teacher, &student, 1.0).unwrap();
    assert_eq!(teacher.params, orig.params); // alpha = 1: unchanged

    ema_update(&mut teacher, &student, 0.0).unwrap();
    assert_eq!(teacher.params, student.params); // alpha = 0: copy
}

#[test]
fn ema_scalar_arithmetic() {
    let mut teacher = scalar_params(1.0);
    teacher.ema_blend_from(&scalar_params(0.0), 0.999).unwrap();
    assert!((teacher.get("w").unwrap().data()[0] - 0.999).abs() < 1e-15);
}

#[test]
fn ema_closed_form_over_many_steps() {
    // after t steps with constant student ws: alpha^t w0 + (1 - alpha^t) ws
    let alpha = 0.999;
    let w0 = 1.0;
    let ws = -0.25;
    for t in [1u32, 10, 1000] {
        let mut teacher = scalar_params(w0);
        let student = scalar_params(ws);
        for _ in 0..t {
            teacher.ema_blend_from(&student, alpha).unwrap();
        }
        let expect = alpha.powi(t as i32) * w0 + (1.0 - alpha.powi(t as i32)) * ws;
        let got = teacher.get("w").unwrap().data()[0];
        assert!((got - expect).abs() < 1e-9, "t = {t}: {got} vs {expect}");
    }
}

#[test]
fn total_loss_arithmetic() {
    assert_eq!(total_loss(1.0, 99.0, 4, 4, 0.0), 1.0);
    assert_eq!(total_loss(1.0, 2.0, 2, 2, 0.5), 2.0);
    assert_eq!(total_loss(1.0, 1.0, 2, 4, 0.5), 2.0);
}

#[test]
fn unsup_rpn_loss_zero_at_equality_and_hand_fixture() {
    let det = DetectorParams::init(tiny_det_cfg(), 3).unwrap();
    let mut ctx = ForwardCtx::new(&det, true);
    let logits = Tensor::new(vec![2, 2], vec![0.4, -0.1, 1.0, 0.3]).unwrap();
    let deltas = Tensor::new(vec![2, 4], vec![0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2]).unwrap();
    let obj = ctx.graph.param(logits.clone());
    let reg = ctx.graph.param(deltas.clone());
    let student = crate::detector::RpnNodes {
        obj_logits: obj,
        deltas: reg,
    };

    // teacher equals student -> exactly zero
    let equal = RpnTargets {
        obj_probs: softmax_rows(&logits),
        deltas: deltas.clone(),
    };
    let parts = unsup_rpn_loss(&mut ctx, student, &equal, true).unwrap();
    assert_eq!(ctx.value(parts.total).scalar_value().unwrap(), 0.0);

    // hand fixture: uniform student, chosen teacher distributions
    let mut ctx = ForwardCtx::new(&det, true);
    let obj = ctx.graph.param(Tensor::zeros(vec![2, 2]));
    let reg = ctx.graph.param(Tensor::zeros(vec![2, 4]));
    let student = crate::detector::RpnNodes {
        obj_logits: obj,
        deltas: reg,
    };
    let targets = RpnTargets {
        obj_probs: Tensor::new(vec![2, 2], vec![0.7, 0.3, 0.2, 0.8]).unwrap(),
        deltas: deltas.clone(),
    };
    let parts = unsup_rpn_loss(&mut ctx, student, &targets, true).unwrap();
    // KL rows against the uniform (0.5, 0.5) plus per-anchor delta norms
    let kl1 = 0.7 * (0.7f64 / 0.5).ln() + 0.3 * (0.3f64 / 0.5).ln();
    let kl2 = 0.2 * (0.2f64 / 0.5).ln() + 0.8 * (0.8f64 / 0.5).ln();
    let loc = 0.1 + 0.2;
    let expect = (kl1 + kl2 + loc) / 2.0;
    let got = ctx.value(parts.total).scalar_value().unwrap();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    assert!(got >= 0.0);
    assert!((parts.cls - (kl1 + kl2) / 2.0).abs() < 1e-12);
    assert!((parts.loc - loc / 2.0).abs() < 1e-12);
}

#[test]
fn unsup_rpn_loss_rejects_anchor_mismatch() {
    let det = DetectorParams::init(tiny_det_cfg(), 3).unwrap();
    let mut ctx = ForwardCtx::new(&det, true);
    let obj = ctx.graph.param(Tensor::zeros(vec![2, 2]));
    let reg = ctx.graph.param(Tensor::zeros(vec![2, 4]));
    let student = crate::detector::RpnNodes {
        obj_logits: obj,
        deltas: reg,
    };
    let targets = RpnTargets {
        obj_probs: Tensor::new(vec![3, 2], vec![0.5; 6]).unwrap(),
        deltas: Tensor::zeros(vec![3, 4]),
    };
    assert!(unsup_rpn_loss(&mut ctx, student, &targets, true).is_err());
}

#[test]
fn unsup_roi_loss_zero_and_hand_fixture() {
    // C = 2: class rows have 3 entries, delta rows 8
    let det_cfg = DetectorConfig {
        num_classes: 2,
        ..tiny_det_cfg()
    };
    let det = DetectorParams::init(det_cfg, 4).unwrap();
    let mut ctx = ForwardCtx::new(&det, true);
    let logits = Tensor::new(vec![1, 3], vec![0.2, -0.4, 0.9]).unwrap();
    let deltas =
        Tensor::new(vec![1, 8], vec![0.3, 0.0, 0.0, 0.0, 0.0, 0.4, 0.0, 0.0]).unwrap();
    let cls = ctx.graph.param(logits.clone());
    let reg = ctx.graph.param(deltas.clone());
    let student = crate::detector::RoiNodes {
        cls_logits: cls,
        deltas: reg,
    };
    let equal = RoiTargets {
        cls_probs: softmax_rows(&logits),
        deltas: deltas.clone(),
    };
    let parts = unsup_roi_loss(&mut ctx, student, &equal, true).unwrap();
    assert_eq!(ctx.value(parts.total).scalar_value().unwrap(), 0.0);

    // hand fixture: uniform student logits
    let mut ctx = ForwardCtx::new(&det, true);
    let cls = ctx.graph.param(Tensor::zeros(vec![1, 3]));
    let reg = ctx.graph.param(Tensor::zeros(vec![1, 8]));
    let student = crate::detector::RoiNodes {
        cls_logits: cls,
        deltas: reg,
    };
    let targets = RoiTargets {
        cls_probs: Tensor::new(vec![1, 3], vec![0.5, 0.25, 0.25]).unwrap(),
        deltas: deltas.clone(),
    };
    let parts = unsup_roi_loss(&mut ctx, student, &targets, true).unwrap();
    let third = 1.0f64 / 3.0;
    let kl = 0.5 * (0.5f64 / third).ln() + 2.0 * (0.25 * (0.25f64 / third).ln());
    let loc = (0.3f64 * 0.3 + 0.4 * 0.4).sqrt(); // one row over all 8 entries
    let got = ctx.value(parts.total).scalar_value().unwrap();
    assert!((got - (kl + loc)).abs() < 1e-12, "{got} vs {}", kl + loc);
}

fn make_fixture_corpus() -> Corpus {
    Corpus::generate(&tiny_scene_spec(), 6, 2024).unwrap()
}

#[test]
fn train_step_fixed_rule_never_touches_teacher() {
    let corpus = make_fixture_corpus();
    let cfg = TrainConfig {
        update_rule: UpdateRule::Fixed,
        ..tiny_train_cfg()
    };
    let mut state = burn_in(&corpus, &[0, 1], &cfg, &tiny_det_cfg(), |_| Ok(())).unwrap();
    let frozen = state.teacher.clone();
    for _ in 0..3 {
        let labeled = vec![LabeledExample {
            image: corpus.image(0),
            gt: corpus.ground_truth(0).clone(),
        }];
        let unlabeled = vec![corpus.image(2)];
        train_step(&mut state, &labeled, &unlabeled, &cfg).unwrap();
    }
    assert_eq!(state.teacher.params, frozen.params);
    assert_ne!(state.student.params, frozen.params);
}

#[test]
fn train_step_copy_every_k_copies_only_on_k() {
    let corpus = make_fixture_corpus();
    let cfg = TrainConfig {
        update_rule: UpdateRule::CopyEveryK,
        copy_k: 3,
        burn_in_iters: 0,
        ..tiny_train_cfg()
    };
    let mut state = burn_in(&corpus, &[0, 1], &cfg, &tiny_det_cfg(), |_| Ok(())).unwrap();
    let frozen = state.teacher.clone();
    let labeled = vec![LabeledExample {
        image: corpus.image(0),
        gt: corpus.ground_truth(0).clone(),
    }];
    let unlabeled = vec![corpus.image(2)];
    train_step(&mut state, &labeled, &unlabeled, &cfg).unwrap(); // iter 1
    assert_eq!(state.teacher.params, frozen.params);
    train_step(&mut state, &labeled, &unlabeled, &cfg).unwrap(); // iter 2
    assert_eq!(state.teacher.params, frozen.params);
    train_step(&mut state, &labeled, &unlabeled, &cfg).unwrap(); // iter 3: copy
    assert_eq!(state.teacher.params, state.student.params);
}

#[test]
fn burn_in_duplicates_weights_and_zero_iters_is_identity() {
    let corpus = make_fixture_corpus();
    let cfg = tiny_train_cfg();
    let det_cfg = tiny_det_cfg();
    let state = burn_in(&corpus, &[0, 1, 2], &cfg, &det_cfg, |_| Ok(())).unwrap();
    assert_eq!(state.teacher.params, state.student.params);
    assert_eq!(state.iter, cfg.burn_in_iters);

    let zero_cfg = TrainConfig {
        burn_in_iters: 0,
        ..cfg
    };
    let state0 = burn_in(&corpus, &[0], &zero_cfg, &det_cfg, |_| Ok(())).unwrap();
    let init = DetectorParams::init(det_cfg, zero_cfg.seed).unwrap();
    assert_eq!(state0.student.params, init.params);

    assert!(matches!(
        burn_in(&corpus, &[], &zero_cfg, &tiny_det_cfg(), |_| Ok(())),
        Err(Error::EmptyLabeledSet)
    ));
}

#[test]
fn hard_label_loss_is_supervised_loss_on_pseudo_gt() {
    let corpus = make_fixture_corpus();
    let det = DetectorParams::init(tiny_det_cfg(), 5).unwrap();
    let image = corpus.image(0);
    let pseudo = corpus.ground_truth(0).clone();
    let a = hard_label_loss(&det, &image, &pseudo, 11).unwrap();
    let b = supervised_loss_value(&det, &image, &pseudo, 11).unwrap().total();
    assert_eq!(a, b);
    // beta = 0 makes the mixed objective collapse to the supervised term
    assert_eq!(total_loss(b, a, 1, 1, 0.0), b);
}

#[test]
fn disabled_unsup_localization_zeroes_regression_gradients() {
    let det = DetectorParams::init(tiny_det_cfg(), 6).unwrap();
    let corpus = make_fixture_corpus();
    let image = corpus.image(0);
    // teacher with different weights so the losses are non-trivial
    let teacher = DetectorParams::init(tiny_det_cfg(), 7).unwrap();
    let (weak, _, _) = crate::augment::weak_augment(
        &image,
        &GroundTruth::default(),
        3,
        det.cfg.stride(),
    );
    let label = make_soft_label(&teacher, &weak, 8, EnsembleMode::Flip, 0).unwrap();
    let anchors =
        crate::geometry::AnchorGrid::generate(&det.cfg.anchor_spec, weak.shape()[1], weak.shape()[0])
            .unwrap();
    let mut ctx = ForwardCtx::new(&det, true);
    let features = ctx.backbone(&weak).unwrap();
    let rpn = ctx.rpn(features, &anchors).unwrap();
    let rpn_parts = unsup_rpn_loss(&mut ctx, rpn, &label.rpn, false).unwrap();
    let roi = ctx.roi_head(features, &label.proposals).unwrap();
    let roi_parts =
        unsup_roi_loss(&mut ctx, roi, label.roi.as_ref().unwrap(), false).unwrap();
    let total = ctx.graph.add(rpn_parts.total, roi_parts.total).unwrap();
    let grads = ctx.param_grads(total).unwrap();
    for name in ["rpn.reg.w", "rpn.reg.b", "roi.reg.w", "roi.reg.b"] {
        assert!(
            grads.get(name).unwrap().data().iter().all(|&v| v == 0.0),
            "{name} must receive exactly zero gradient"
        );
    }
    // classification paths still learn
    assert!(grads
        .get("rpn.obj.w")
        .unwrap()
        .data()
        .iter()
        .any(|&v| v != 0.0));
}

#[test]
fn train_step_reproduces_independently_computed_components() {
    let corpus = make_fixture_corpus();
    let det_cfg = tiny_det_cfg();
    let cfg = TrainConfig {
        ensemble_mode: EnsembleMode::Flip,
        n_proposals: 8,
        burn_in_iters: 1,
        ..tiny_train_cfg()
    };
    let mut state = burn_in(&corpus, &[0, 1], &cfg, &det_cfg, |_| Ok(())).unwrap();
    let student_before = state.student.clone();
    let teacher_before = state.teacher.clone();
    let iter = state.iter;

    let labeled = vec![LabeledExample {
        image: corpus.image(0),
        gt: corpus.ground_truth(0).clone(),
    }];
    let unlabeled = vec![corpus.image(3)];
    let rec = train_step(&mut state, &labeled, &unlabeled, &cfg).unwrap();

    // supervised side, recomputed on the pre-step student with the same seeds
    let weak_seed = seed_for(cfg.seed, iter, Stream::SupWeakAug, 0);
    let (weak_img, weak_gt, _) = crate::augment::weak_augment(
        &labeled[0].image,
        &labeled[0].gt,
        weak_seed,
        det_cfg.stride(),
    );
    let sample_seed = seed_for(cfg.seed, iter, Stream::SupSample, 0);
    let l_s = supervised_loss_value(&student_before, &weak_img, &weak_gt, sample_seed)
        .unwrap()
        .total();
    assert!((rec.l_s - l_s).abs() < 1e-12);

    // unsupervised side, recomputed value-path
    let uw_seed = seed_for(cfg.seed, iter, Stream::UnsupWeakAug, 0);
    let (uweak, _, _) = crate::augment::weak_augment(
        &unlabeled[0],
        &GroundTruth::default(),
        uw_seed,
        det_cfg.stride(),
    );
    let strong_seed = seed_for(cfg.seed, iter, Stream::UnsupStrongAug, 0);
    let plan = crate::augment::plan_strong(strong_seed, uweak.shape()[0]);
    let strong = crate::augment::apply_strong(&uweak, &plan);
    let ens_seed = seed_for(cfg.seed, iter, Stream::TeacherEnsembleAug, 0);
    let label =
        make_soft_label(&teacher_before, &uweak, cfg.n_proposals, cfg.ensemble_mode, ens_seed)
            .unwrap();
    let (s_rpn, anchors) = forward_rpn_values(&student_before, &strong).unwrap();
    let a = anchors.len();
    let s_probs = softmax_rows(&s_rpn.obj_logits);
    let mut kl = 0.0;
    for i in 0..s_probs.len() {
        let p = label.rpn.obj_probs.data()[i];
        if p > 0.0 {
            kl += p * (p.ln() - s_probs.data()[i].max(1e-12).ln());
        }
    }
    let mut loc = 0.0;
    for r in 0..a {
        let mut ss = 0.0;
        for d in 0..4 {
            let diff = s_rpn.deltas.at2(r, d) - label.rpn.deltas.at2(r, d);
            ss += diff * diff;
        }
        loc += ss.sqrt();
    }
    let mut l_u = (kl + loc) / a as f64;
    if let Some(roi_t) = &label.roi {
        let s_roi = forward_roi_values(&student_before, &strong, &label.proposals).unwrap();
        let s_cls = softmax_rows(&s_roi.cls_logits);
        let n = label.proposals.len();
        let mut kl_roi = 0.0;
        for i in 0..s_cls.len() {
            let p = roi_t.cls_probs.data()[i];
            if p > 0.0 {
                kl_roi += p * (p.ln() - s_cls.data()[i].max(1e-12).ln());
            }
        }
        let mut loc_roi = 0.0;
        let k = 4 * det_cfg.num_classes;
        for r in 0..n {
            let mut ss = 0.0;
            for d in 0..k {
                let diff = s_roi.deltas.at2(r, d) - roi_t.deltas.at2(r, d);
                ss += diff * diff;
            }
            loc_roi += ss.sqrt();
        }
        l_u += (kl_roi + loc_roi) / n as f64;
    }
    assert!((rec.l_u - l_u).abs() < 1e-9, "{} vs {l_u}", rec.l_u);
    let expect_total = total_loss(l_s, l_u, 1, 1, cfg.beta);
    assert!((rec.total - expect_total).abs() < 1e-9);
}

#[test]
fn trainer_state_roundtrips() {
    let corpus = make_fixture_corpus();
    let cfg = tiny_train_cfg();
    let state = burn_in(&corpus, &[0, 1], &cfg, &tiny_det_cfg(), |_| Ok(())).unwrap();
    let mut buf = Vec::new();
    state.save(&mut buf).unwrap();
    let back = TrainerState::load(&mut buf.as_slice()).unwrap();
    assert_eq!(back.iter, state.iter);
    assert_eq!(back.seed, state.seed);
    assert_eq!(back.student.params, state.student.params);
    assert_eq!(back.teacher.params, state.teacher.params);
    assert_eq!(back.velocity, state.velocity);
}
