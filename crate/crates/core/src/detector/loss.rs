//! Anchor/proposal matching, sampling, and the supervised detection loss.

use rand::seq::SliceRandom;

use crate::detector::net::{top_proposals, ForwardCtx};
use crate::detector::{DetectorConfig, DetectorParams, GroundTruth};
use crate::error::Result;
use crate::geometry::{encode_deltas, iou, AnchorGrid, Box2D};
use crate::seeding::{rng_for, Stream};
use crate::tensor::{NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum AnchorLabel {
    /// Matched to this ground-truth index.
    Positive(usize),
    Negative,
    Ignore,
}

/// IoU-threshold matching with the best-anchor-per-GT rule: any anchor with
/// IoU >= pos threshold is positive, <= neg threshold negative, the band in
/// between ignored; additionally the highest-IoU anchor for each GT is forced
/// positive so every object owns at least one anchor. Deterministic.
pub(crate) fn match_anchors(
    cfg: &DetectorConfig,
    anchors: &AnchorGrid,
    gt: &GroundTruth,
) -> Vec<AnchorLabel> {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gt.is_empty() {
        return labels;
    }
    for (i, anchor) in anchors.anchors.iter().enumerate() {
        let mut best = 0.0;
        let mut best_gt = 0;
        for (g, item) in gt.items.iter().enumerate() {
            let v = iou(anchor, &item.box2d);
            if v > best {
                best = v;
                best_gt = g;
            }
        }
        labels[i] = if best >= cfg.rpn_pos_iou {
            AnchorLabel::Positive(best_gt)
        } else if best <= cfg.rpn_neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    for (g, item) in gt.items.iter().enumerate() {
        let mut best = 0.0;
        let mut best_anchor = None;
        for (i, anchor) in anchors.anchors.iter().enumerate() {
            let v = iou(anchor, &item.box2d);
            if v > best {
                best = v;
                best_anchor = Some(i);
            }
        }
        if let Some(i) = best_anchor {
            labels[i] = AnchorLabel::Positive(g);
        }
    }
    labels
}

/// Sample a fixed-size positive/negative anchor mix for the RPN losses.
/// Returns (positive indices, negative indices), each ascending.
pub(crate) fn sample_rpn_anchors(
    cfg: &DetectorConfig,
    labels: &[AnchorLabel],
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_for(seed, 0, Stream::SupSample, 0);
    let mut pos: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, AnchorLabel::Positive(_)))
        .map(|(i, _)| i)
        .collect();
    let mut neg: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, AnchorLabel::Negative))
        .map(|(i, _)| i)
        .collect();
    let max_pos = ((cfg.rpn_batch as f64) * cfg.rpn_pos_fraction).floor() as usize;
    pos.shuffle(&mut rng);
    pos.truncate(max_pos);
    neg.shuffle(&mut rng);
    neg.truncate(cfg.rpn_batch - pos.len());
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

/// Proposal sampling for ROI training: NMS-capped RPN proposals plus the GT
/// boxes themselves, matched at the foreground IoU threshold and sampled to
/// a fixed positive/negative mix. Returns (box, matched GT index).
pub(crate) fn sample_roi_proposals(
    cfg: &DetectorConfig,
    candidates: &[Box2D],
    gt: &GroundTruth,
    seed: u64,
) -> Vec<(Box2D, Option<usize>)> {
    let mut rng = rng_for(seed, 0, Stream::SupSample, 1);
    let mut all: Vec<Box2D> = candidates.to_vec();
    all.extend(gt.items.iter().map(|it| it.box2d));
    let matched: Vec<(Box2D, Option<usize>)> = all
        .into_iter()
        .map(|b| {
            let mut best = 0.0;
            let mut best_gt = None;
            for (g, item) in gt.items.iter().enumerate() {
                let v = iou(&b, &item.box2d);
                if v > best {
                    best = v;
                    best_gt = Some(g);
                }
            }
            if best >= cfg.roi_fg_iou {
                (b, best_gt)
            } else {
                (b, None)
            }
        })
        .collect();
    let mut pos: Vec<usize> = (0..matched.len()).filter(|&i| matched[i].1.is_some()).collect();
    let mut neg: Vec<usize> = (0..matched.len()).filter(|&i| matched[i].1.is_none()).collect();
    let max_pos = ((cfg.roi_batch as f64) * cfg.roi_pos_fraction).floor() as usize;
    pos.shuffle(&mut rng);
    pos.truncate(max_pos);
    neg.shuffle(&mut rng);
    neg.truncate(cfg.roi_batch - pos.len());
    let mut picked = pos;
    picked.extend(neg);
    picked.sort_unstable();
    picked.into_iter().map(|i| matched[i]).collect()
}

/// Loss component values for logging and fixtures.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_loc: f64,
    pub roi_cls: f64,
    pub roi_loc: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_loc + self.roi_cls + self.roi_loc
    }
}

/// Supervised loss as graph nodes plus its component values.
pub struct SupervisedLossNodes {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

/// The discrete decisions of one supervised loss evaluation: anchor matching,
/// the sampled anchor mix, and the sampled ROI proposal set. Holding a plan
/// fixed makes the loss a smooth function of the parameters, which is what
/// gradient verification needs.
#[derive(Debug, Clone)]
pub struct SupervisedPlan {
    anchors: AnchorGrid,
    labels: Vec<AnchorLabel>,
    pos: Vec<usize>,
    neg: Vec<usize>,
    picked: Vec<(Box2D, Option<usize>)>,
}

/// Derive the discrete decisions from the context's current parameters.
pub fn plan_supervised(
    ctx: &mut ForwardCtx,
    image: &Tensor,
    gt: &GroundTruth,
    seed: u64,
) -> Result<SupervisedPlan> {
    let cfg = ctx.cfg().clone();
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let anchors = AnchorGrid::generate(&cfg.anchor_spec, w, h)?;
    let labels = match_anchors(&cfg, &anchors, gt);
    let (pos, neg) = sample_rpn_anchors(&cfg, &labels, seed);
    let det = DetectorParams {
        cfg: cfg.clone(),
        params: ctx.current_params(),
    };
    let (rpn_values, _) = crate::detector::net::forward_rpn_values(&det, image)?;
    let candidates = top_proposals(
        &cfg,
        &rpn_values,
        &anchors,
        w as f64,
        h as f64,
        cfg.train_proposals,
    );
    let picked = sample_roi_proposals(&cfg, &candidates, gt, seed);
    Ok(SupervisedPlan {
        anchors,
        labels,
        pos,
        neg,
        picked,
    })
}

/// Standard two-stage supervised loss on one image: cross-entropy for RPN
/// objectness and ROI classification, smooth-L1 on deltas for positive
/// matches only, each term averaged over its sampled rows. An empty ground
/// truth makes every anchor negative and both localization terms exactly 0.
pub fn supervised_loss(
    ctx: &mut ForwardCtx,
    image: &Tensor,
    gt: &GroundTruth,
    seed: u64,
) -> Result<SupervisedLossNodes> {
    let plan = plan_supervised(ctx, image, gt, seed)?;
    supervised_loss_with_plan(ctx, image, gt, &plan)
}

/// The differentiable part of the supervised loss, with the discrete
/// sampling decisions supplied by the caller.
pub fn supervised_loss_with_plan(
    ctx: &mut ForwardCtx,
    image: &Tensor,
    gt: &GroundTruth,
    plan: &SupervisedPlan,
) -> Result<SupervisedLossNodes> {
    let cfg = ctx.cfg().clone();
    let anchors = &plan.anchors;
    let features = ctx.backbone(image)?;
    let rpn = ctx.rpn(features, anchors)?;
    let labels = &plan.labels;
    let (pos, neg) = (plan.pos.clone(), plan.neg.clone());
    let mut sampled = pos.clone();
    sampled.extend(neg.iter().copied());
    let classes: Vec<usize> = sampled
        .iter()
        .map(|&i| usize::from(matches!(labels[i], AnchorLabel::Positive(_))))
        .collect();
    let rows = ctx.graph.gather_rows(rpn.obj_logits, &sampled)?;
    let ce = ctx.graph.cross_entropy_sum(rows, &classes)?;
    let rpn_cls = ctx.graph.scale(ce, 1.0 / sampled.len().max(1) as f64)?;

    // RPN localization over positive anchors only.
    let rpn_loc = if pos.is_empty() {
        ctx.graph.constant(Tensor::scalar(0.0))
    } else {
        let mut targets = Vec::with_capacity(pos.len() * 4);
        for &i in &pos {
            let AnchorLabel::Positive(g) = labels[i] else { unreachable!() };
            targets.extend(encode_deltas(&anchors.anchors[i], &gt.items[g].box2d));
        }
        let target = Tensor::new(vec![pos.len(), 4], targets)?;
        let rows = ctx.graph.gather_rows(rpn.deltas, &pos)?;
        let l1 = ctx.graph.smooth_l1_sum(&target, rows)?;
        ctx.graph.scale(l1, 1.0 / pos.len() as f64)?
    };

    // ROI terms over the planned proposal set.
    let picked = plan.picked.clone();
    let (roi_cls, roi_loc) = if picked.is_empty() {
        (
            ctx.graph.constant(Tensor::scalar(0.0)),
            ctx.graph.constant(Tensor::scalar(0.0)),
        )
    } else {
        let boxes: Vec<Box2D> = picked.iter().map(|(b, _)| *b).collect();
        let roi = ctx.roi_head(features, &boxes)?;
        let classes: Vec<usize> = picked
            .iter()
            .map(|(_, m)| match m {
                Some(g) => gt.items[*g].class_id,
                None => cfg.num_classes, // background is the last index
            })
            .collect();
        let ce = ctx.graph.cross_entropy_sum(roi.cls_logits, &classes)?;
        let roi_cls = ctx.graph.scale(ce, 1.0 / picked.len() as f64)?;

        let positives: Vec<(usize, usize)> = picked
            .iter()
            .enumerate()
            .filter_map(|(r, (_, m))| m.map(|g| (r, g)))
            .collect();
        let roi_loc = if positives.is_empty() {
            ctx.graph.constant(Tensor::scalar(0.0))
        } else {
            let stride_4c = 4 * cfg.num_classes;
            let mut idx = Vec::with_capacity(positives.len() * 4);
            let mut targets = Vec::with_capacity(positives.len() * 4);
            for &(r, g) in &positives {
                let c = gt.items[g].class_id;
                for d in 0..4 {
                    idx.push(r * stride_4c + c * 4 + d);
                }
                targets.extend(encode_deltas(&picked[r].0, &gt.items[g].box2d));
            }
            let target = Tensor::new(vec![positives.len() * 4], targets)?;
            let elems = ctx.graph.gather_elems(roi.deltas, &idx)?;
            let l1 = ctx.graph.smooth_l1_sum(&target, elems)?;
            ctx.graph.scale(l1, 1.0 / positives.len() as f64)?
        };
        (roi_cls, roi_loc)
    };

    let rpn_sum = ctx.graph.add(rpn_cls, rpn_loc)?;
    let roi_sum = ctx.graph.add(roi_cls, roi_loc)?;
    let total = ctx.graph.add(rpn_sum, roi_sum)?;
    let breakdown = LossBreakdown {
        rpn_cls: ctx.value(rpn_cls).scalar_value()?,
        rpn_loc: ctx.value(rpn_loc).scalar_value()?,
        roi_cls: ctx.value(roi_cls).scalar_value()?,
        roi_loc: ctx.value(roi_loc).scalar_value()?,
    };
    Ok(SupervisedLossNodes { total, breakdown })
}

/// Value-only wrapper over [`supervised_loss`].
pub fn supervised_loss_value(
    det: &DetectorParams,
    image: &Tensor,
    gt: &GroundTruth,
    seed: u64,
) -> Result<LossBreakdown> {
    let mut ctx = ForwardCtx::new(det, false);
    Ok(supervised_loss(&mut ctx, image, gt, seed)?.breakdown)
}
