//! Teacher-side target generation.
//!
//! All outputs are plain tensors: the teacher runs in its own graph and only
//! values cross into the student's loss, so no gradient path into the teacher
//! can exist. The ROI targets optionally come from a two-branch ensemble —
//! the horizontal mirror (with proposal and delta coordinates mirrored) or a
//! strongly augmented copy.

use serde::{Deserialize, Serialize};

use crate::augment::{apply_strong, hflip_image, plan_strong};
use crate::detector::{
    forward_rpn_values, select_proposals, DetectorParams, ForwardCtx, GroundTruth, GtItem,
    ProposalMode,
};
use crate::error::Result;
use crate::geometry::{hflip_box, AnchorGrid, Box2D, ScoredBox};
use crate::tensor::Tensor;

/// Which two-branch ensemble the teacher uses for ROI targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    None,
    #[default]
    Flip,
    RandomAug,
}

/// Soft RPN targets: one objectness distribution and one delta row per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnTargets {
    /// `[A, 2]` probabilities (background, foreground).
    pub obj_probs: Tensor,
    /// `[A, 4]` deltas.
    pub deltas: Tensor,
}

/// Soft ROI targets over the teacher's proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTargets {
    /// `[n, C+1]` class probabilities.
    pub cls_probs: Tensor,
    /// `[n, 4C]` all-class deltas.
    pub deltas: Tensor,
}

/// Complete soft pseudo-label for one weakly augmented image.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPseudoLabel {
    pub rpn: RpnTargets,
    /// Empty proposal survivor set leaves this `None`.
    pub roi: Option<RoiTargets>,
    pub proposals: Vec<Box2D>,
}

impl SoftPseudoLabel {
    /// (proposal count, mean max-class confidence) for the metrics stream.
    pub fn stats(&self) -> (usize, f64) {
        let n = self.proposals.len();
        let Some(roi) = &self.roi else { return (0, 0.0) };
        let k = roi.cls_probs.shape()[1];
        let mean_max = (0..n)
            .map(|r| {
                (0..k)
                    .map(|c| roi.cls_probs.at2(r, c))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / n.max(1) as f64;
        (n, mean_max)
    }
}

/// Teacher detections above the confidence threshold, as pseudo ground truth.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HardPseudoGT {
    pub gt: GroundTruth,
    pub scores: Vec<f64>,
}

/// Row-wise stable softmax over the last axis, as plain values.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let k = *t.shape().last().expect("non-scalar");
    let rows = t.len() / k;
    let mut out = vec![0.0; t.len()];
    for r in 0..rows {
        let row = &t.data()[r * k..(r + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..k {
            let e = (row[j] - mx).exp();
            out[r * k + j] = e;
            z += e;
        }
        for j in 0..k {
            out[r * k + j] /= z;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("softmax finite")
}

/// Teacher forward on the weak view: softmax objectness and deltas for every
/// anchor, detached. Also returns the anchor grid the rows align to.
pub fn teacher_rpn_targets(
    teacher: &DetectorParams,
    weak_image: &Tensor,
) -> Result<(RpnTargets, AnchorGrid)> {
    let (rpn, anchors) = forward_rpn_values(teacher, weak_image)?;
    Ok((
        RpnTargets {
            obj_probs: softmax_rows(&rpn.obj_logits),
            deltas: rpn.deltas,
        },
        anchors,
    ))
}

/// One ROI branch: pooled at `proposals` on `image`, post-softmax class
/// probabilities plus raw all-class deltas.
fn roi_branch(
    teacher: &DetectorParams,
    image: &Tensor,
    proposals: &[Box2D],
) -> Result<(Tensor, Tensor)> {
    let mut ctx = ForwardCtx::new(teacher, false);
    let f = ctx.backbone(image)?;
    let roi = ctx.roi_head(f, proposals)?;
    let probs = ctx.graph.softmax(roi.cls_logits, 1)?;
    Ok((ctx.value(probs).clone(), ctx.value(roi.deltas).clone()))
}

/// Negate the x-offset of every class's delta row: the delta-space image of
/// a horizontal mirror. An involution.
pub fn mirror_deltas(deltas: &Tensor) -> Tensor {
    let mut out = deltas.clone();
    let cols = out.shape()[1];
    let rows = out.shape()[0];
    for r in 0..rows {
        for c in (0..cols).step_by(4) {
            let i = r * cols + c;
            out.data_mut()[i] = -out.data_mut()[i];
        }
    }
    out
}

/// Horizontal-flip ROI ensemble: class probabilities averaged post-softmax
/// across the image and its mirror (pooled at mirrored proposals), deltas
/// averaged after mirroring the flipped branch back.
pub fn teacher_ensemble_roi(
    teacher: &DetectorParams,
    image: &Tensor,
    proposals: &[Box2D],
) -> Result<RoiTargets> {
    let w = image.shape()[1] as f64;
    let mirrored = hflip_image(image);
    let flipped_proposals: Vec<Box2D> = proposals.iter().map(|b| hflip_box(b, w)).collect();
    let (p_cls, p_reg) = roi_branch(teacher, image, proposals)?;
    let (m_cls, m_reg_raw) = roi_branch(teacher, &mirrored, &flipped_proposals)?;
    let m_reg = mirror_deltas(&m_reg_raw);
    let cls = average(&p_cls, &m_cls);
    let reg = average(&p_reg, &m_reg);
    Ok(RoiTargets {
        cls_probs: cls,
        deltas: reg,
    })
}

/// Ensemble variant where the second branch sees a strongly augmented copy
/// instead of the mirror; no geometric transform of the deltas.
pub fn random_aug_ensemble_roi(
    teacher: &DetectorParams,
    image: &Tensor,
    proposals: &[Box2D],
    seed: u64,
) -> Result<RoiTargets> {
    let plan = plan_strong(seed, image.shape()[0]);
    let augmented = apply_strong(image, &plan);
    let (p_cls, p_reg) = roi_branch(teacher, image, proposals)?;
    let (a_cls, a_reg) = roi_branch(teacher, &augmented, &proposals.to_vec())?;
    Ok(RoiTargets {
        cls_probs: average(&p_cls, &a_cls),
        deltas: average(&p_reg, &a_reg),
    })
}

/// Single-branch ROI targets (no ensemble).
pub fn single_roi_targets(
    teacher: &DetectorParams,
    image: &Tensor,
    proposals: &[Box2D],
) -> Result<RoiTargets> {
    let (cls, reg) = roi_branch(teacher, image, proposals)?;
    Ok(RoiTargets {
        cls_probs: cls,
        deltas: reg,
    })
}

fn average(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("finite average")
}

/// Full soft pseudo-label: top-N proposal selection, soft RPN targets, and
/// ROI targets under the chosen ensemble. Zero surviving proposals leave the
/// ROI part empty while the RPN part is still emitted.
pub fn make_soft_label(
    teacher: &DetectorParams,
    weak_image: &Tensor,
    n_proposals: usize,
    ensemble: EnsembleMode,
    seed: u64,
) -> Result<SoftPseudoLabel> {
    let (h, w) = (weak_image.shape()[0] as f64, weak_image.shape()[1] as f64);
    let (rpn_values, anchors) = forward_rpn_values(teacher, weak_image)?;
    let proposals = select_proposals(
        &teacher.cfg,
        &rpn_values,
        &anchors,
        w,
        h,
        ProposalMode::TeacherTopN { n: n_proposals },
    )?;
    let rpn = RpnTargets {
        obj_probs: softmax_rows(&rpn_values.obj_logits),
        deltas: rpn_values.deltas,
    };
    let roi = if proposals.is_empty() {
        None
    } else {
        Some(match ensemble {
            EnsembleMode::None => single_roi_targets(teacher, weak_image, &proposals)?,
            EnsembleMode::Flip => teacher_ensemble_roi(teacher, weak_image, &proposals)?,
            EnsembleMode::RandomAug => {
                random_aug_ensemble_roi(teacher, weak_image, &proposals, seed)?
            }
        })
    };
    Ok(SoftPseudoLabel {
        rpn,
        roi,
        proposals,
    })
}

/// Keep detections with `score >= theta` (boundary kept).
pub fn filter_detections(detections: &[ScoredBox], theta: f64) -> Vec<ScoredBox> {
    detections.iter().filter(|d| d.score >= theta).copied().collect()
}

/// Hard pseudo-labels: teacher inference on the weak view, per-class NMS,
/// confidence threshold `theta`. An empty result is legal.
pub fn make_hard_label(
    teacher: &DetectorParams,
    weak_image: &Tensor,
    theta: f64,
    nms_thresh: f64,
) -> Result<HardPseudoGT> {
    let detections = crate::detector::detect(teacher, weak_image, theta, nms_thresh)?;
    let kept = filter_detections(&detections, theta);
    Ok(HardPseudoGT {
        gt: GroundTruth::new(
            kept.iter()
                .map(|d| GtItem {
                    box2d: d.box2d,
                    class_id: d.class_id,
                })
                .collect(),
        ),
        scores: kept.iter().map(|d| d.score).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::geometry::AnchorSpec;
    use crate::seeding::{rng_for, Stream};
    use rand::Rng;

    fn cfg() -> DetectorConfig {
        DetectorConfig {
            num_classes: 3,
            backbone_channels: [4, 6, 8],
            rpn_channels: 8,
            roi_pool_size: 2,
            roi_fc_dim: 8,
            anchor_spec: AnchorSpec {
                stride: 8,
                scales: vec![8.0, 14.0],
                aspects: vec![1.0],
            },
            ..DetectorConfig::default()
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, 0, Stream::Fixture, 3);
        Tensor::new(
            vec![h, w, 3],
            (0..h * w * 3).map(|_| rng.random_range(0.0..255.0)).collect(),
        )
        .unwrap()
    }

    /// Image that equals its own mirror.
    fn symmetric_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut img = random_image(h, w, seed);
        for y in 0..h {
            for x in 0..w / 2 {
                for c in 0..3 {
                    let v = img.at3(y, x, c);
                    let i = img.idx3(y, w - 1 - x, c);
                    img.data_mut()[i] = v;
                }
            }
        }
        img
    }

    #[test]
    fn rpn_targets_match_recomputation_oracle() {
        let det = DetectorParams::init(cfg(), 41).unwrap();
        let image = random_image(32, 32, 42);
        let (targets, anchors) = teacher_rpn_targets(&det, &image).unwrap();
        assert_eq!(targets.obj_probs.shape()[0], anchors.len());
        // recompute independently
        let (rpn, _) = forward_rpn_values(&det, &image).unwrap();
        for i in 0..anchors.len() {
            let (bg, fg) = (rpn.obj_logits.at2(i, 0), rpn.obj_logits.at2(i, 1));
            let z = bg.exp() + fg.exp();
            assert!((targets.obj_probs.at2(i, 0) - bg.exp() / z).abs() < 1e-12);
            assert!((targets.obj_probs.at2(i, 1) - fg.exp() / z).abs() < 1e-12);
            let s = targets.obj_probs.at2(i, 0) + targets.obj_probs.at2(i, 1);
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn flip_ensemble_on_symmetric_input_equals_single_branch() {
        let det = DetectorParams::init(cfg(), 43).unwrap();
        let image = symmetric_image(32, 32, 44);
        // centered proposal: its own mirror
        let proposals = vec![Box2D::new(8.0, 4.0, 24.0, 20.0).unwrap()];
        let ens = teacher_ensemble_roi(&det, &image, &proposals).unwrap();
        let single = single_roi_targets(&det, &image, &proposals).unwrap();
        assert!(ens.cls_probs.max_abs_diff(&single.cls_probs).unwrap() < 1e-12);
        // both branches are the same computation, so dx averages with its own
        // negation (exactly 0) and the other deltas pass through unchanged
        for c in 0..3 {
            assert_eq!(ens.deltas.at2(0, c * 4), 0.0);
            for d in 1..4 {
                let got = ens.deltas.at2(0, c * 4 + d);
                let want = single.deltas.at2(0, c * 4 + d);
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flip_ensemble_equals_mean_of_branches() {
        let det = DetectorParams::init(cfg(), 45).unwrap();
        let image = random_image(32, 32, 46);
        let proposals = vec![
            Box2D::new(2.0, 2.0, 18.0, 14.0).unwrap(),
            Box2D::new(10.0, 12.0, 30.0, 30.0).unwrap(),
        ];
        let ens = teacher_ensemble_roi(&det, &image, &proposals).unwrap();
        // recompute both branches separately
        let orig = single_roi_targets(&det, &image, &proposals).unwrap();
        let mirrored_img = hflip_image(&image);
        let mirrored_props: Vec<Box2D> =
            proposals.iter().map(|b| hflip_box(b, 32.0)).collect();
        let mir = single_roi_targets(&det, &mirrored_img, &mirrored_props).unwrap();
        let mir_deltas = mirror_deltas(&mir.deltas);
        for i in 0..ens.cls_probs.len() {
            let want = 0.5 * (orig.cls_probs.data()[i] + mir.cls_probs.data()[i]);
            assert!((ens.cls_probs.data()[i] - want).abs() < 1e-12);
        }
        for i in 0..ens.deltas.len() {
            let want = 0.5 * (orig.deltas.data()[i] + mir_deltas.data()[i]);
            assert!((ens.deltas.data()[i] - want).abs() < 1e-12);
        }
        // averaged class rows still sum to 1
        for r in 0..2 {
            let s: f64 = (0..4).map(|c| ens.cls_probs.at2(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn flip_ensemble_is_equivariant_under_branch_swap() {
        // ensemble(mirror(image), hflip(P)) == (P_cls, mirror(sigma_reg));
        // dyadic proposal coordinates keep the double flip bit-exact
        let det = DetectorParams::init(cfg(), 47).unwrap();
        let image = random_image(32, 32, 48);
        let mut rng = rng_for(49, 0, Stream::Fixture, 4);
        let proposals: Vec<Box2D> = (0..3)
            .map(|_| {
                let x1 = rng.random_range(0..64) as f64 * 0.25;
                let y1 = rng.random_range(0..64) as f64 * 0.25;
                let w = 4.0 + rng.random_range(0..32) as f64 * 0.25;
                let h = 4.0 + rng.random_range(0..32) as f64 * 0.25;
                Box2D::new(x1, y1, (x1 + w).min(31.75), (y1 + h).min(31.75)).unwrap()
            })
            .collect();
        let a = teacher_ensemble_roi(&det, &image, &proposals).unwrap();
        let mirrored = hflip_image(&image);
        let flipped: Vec<Box2D> = proposals.iter().map(|b| hflip_box(b, 32.0)).collect();
        let b = teacher_ensemble_roi(&det, &mirrored, &flipped).unwrap();
        assert!(a.cls_probs.max_abs_diff(&b.cls_probs).unwrap() < 1e-9);
        let a_mirrored = mirror_deltas(&a.deltas);
        assert!(a_mirrored.max_abs_diff(&b.deltas).unwrap() < 1e-9);
    }

    #[test]
    fn random_aug_ensemble_properties() {
        let det = DetectorParams::init(cfg(), 50).unwrap();
        let image = random_image(32, 32, 51);
        let proposals = vec![Box2D::new(4.0, 4.0, 20.0, 20.0).unwrap()];
        // find a seed whose plan is a complete no-op
        let noop_seed = (0..10_000u64)
            .find(|&s| {
                let p = plan_strong(s, 32);
                p.op == crate::augment::ColorOp::Identity
                    && p.cutout.iter().all(|c| c.side == 0.0)
            })
            .expect("no-op plan exists");
        let ens = random_aug_ensemble_roi(&det, &image, &proposals, noop_seed).unwrap();
        let single = single_roi_targets(&det, &image, &proposals).unwrap();
        assert!(ens.cls_probs.max_abs_diff(&single.cls_probs).unwrap() < 1e-12);
        assert!(ens.deltas.max_abs_diff(&single.deltas).unwrap() < 1e-12);

        // generic seed: equals mean of recomputed branches, rows normalized
        let seed = 1234;
        let ens = random_aug_ensemble_roi(&det, &image, &proposals, seed).unwrap();
        let plan = plan_strong(seed, 32);
        let augmented = apply_strong(&image, &plan);
        let aug_branch = single_roi_targets(&det, &augmented, &proposals).unwrap();
        for i in 0..ens.cls_probs.len() {
            let want = 0.5 * (single.cls_probs.data()[i] + aug_branch.cls_probs.data()[i]);
            assert!((ens.cls_probs.data()[i] - want).abs() < 1e-12);
        }
        let s: f64 = (0..4).map(|c| ens.cls_probs.at2(0, c)).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn make_soft_label_is_deterministic_and_composed() {
        let det = DetectorParams::init(cfg(), 52).unwrap();
        let image = random_image(32, 32, 53);
        let a = make_soft_label(&det, &image, 640, EnsembleMode::Flip, 7).unwrap();
        let b = make_soft_label(&det, &image, 640, EnsembleMode::Flip, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.proposals.len() <= 640);
        // proposals sorted by objectness: re-derive via select_proposals
        let (rpn, anchors) = forward_rpn_values(&det, &image).unwrap();
        let expect = select_proposals(
            &det.cfg, &rpn, &anchors, 32.0, 32.0,
            ProposalMode::TeacherTopN { n: 640 },
        )
        .unwrap();
        assert_eq!(a.proposals, expect);
        // composition: rpn part and roi part equal the sub-operations
        let (rpn_targets, _) = teacher_rpn_targets(&det, &image).unwrap();
        assert_eq!(a.rpn, rpn_targets);
        let roi = teacher_ensemble_roi(&det, &image, &a.proposals).unwrap();
        assert_eq!(a.roi.as_ref().unwrap(), &roi);
    }

    #[test]
    fn hard_label_threshold_filter() {
        let mk = |score: f64| ScoredBox {
            box2d: Box2D::new(0.0, 0.0, 4.0, 4.0).unwrap(),
            score,
            class_id: 0,
        };
        let dets = vec![mk(0.9), mk(0.69), mk(0.71)];
        let kept = filter_detections(&dets, 0.7);
        assert_eq!(kept.len(), 2); // boundary kept by the >= rule
        assert!(kept.iter().all(|d| d.score >= 0.7));
        assert!(filter_detections(&dets, 1.0).is_empty());
    }

    #[test]
    fn hard_label_end_to_end_bounds() {
        let det = DetectorParams::init(cfg(), 54).unwrap();
        let image = random_image(32, 32, 55);
        let hard = make_hard_label(&det, &image, 1.0, 0.5).unwrap();
        assert!(hard.gt.is_empty()); // softmax scores are strictly below 1
        let hard = make_hard_label(&det, &image, 0.2, 0.5).unwrap();
        for (item, score) in hard.gt.items.iter().zip(&hard.scores) {
            assert!(*score >= 0.2);
            assert!(item.class_id < 3);
            let b = item.box2d;
            assert!(b.x1 >= 0.0 && b.x2 <= 32.0 && b.y1 >= 0.0 && b.y2 <= 32.0);
        }
    }
}
