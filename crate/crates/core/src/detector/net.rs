//! Forward-pass graph construction and inference.

use std::collections::BTreeMap;

use crate::detector::{DetectorConfig, DetectorParams, GroundTruth, RoiOutput, RpnOutput};
use crate::error::{Error, Result};
use crate::geometry::{decode_deltas, nms, AnchorGrid, Box2D, ScoredBox};
use crate::tensor::{Graph, NodeId, ParamSet, Tensor};

/// Per-anchor RPN outputs as graph nodes (student side).
#[derive(Debug, Clone, Copy)]
pub struct RpnNodes {
    /// `[A, 2]` logits, background then foreground.
    pub obj_logits: NodeId,
    /// `[A, 4]` deltas.
    pub deltas: NodeId,
}

/// Per-proposal ROI head outputs as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct RoiNodes {
    /// `[n, C+1]` logits, background last.
    pub cls_logits: NodeId,
    /// `[n, 4C]` deltas, class-major.
    pub deltas: NodeId,
}

/// A tape plus one set of parameter leaves, on which forward passes are built.
pub struct ForwardCtx {
    pub graph: Graph,
    cfg: DetectorConfig,
    nodes: BTreeMap<String, NodeId>,
}

impl ForwardCtx {
    /// `trainable = true` registers parameters as gradient-receiving leaves;
    /// `false` registers them as detached constants (teacher, inference).
    pub fn new(det: &DetectorParams, trainable: bool) -> ForwardCtx {
        let mut graph = Graph::new();
        let mut nodes = BTreeMap::new();
        for (name, t) in det.params.iter() {
            let id = if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            };
            nodes.insert(name.clone(), id);
        }
        ForwardCtx {
            graph,
            cfg: det.cfg.clone(),
            nodes,
        }
    }

    pub fn cfg(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn param_node(&self, name: &str) -> NodeId {
        self.nodes[name]
    }

    /// Snapshot of the parameter values held by this context's leaves.
    pub fn current_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, &id) in &self.nodes {
            ps.insert(name.clone(), self.graph.value(id).clone());
        }
        ps
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.graph.value(id)
    }

    /// Gradients of a scalar loss with respect to every parameter leaf.
    pub fn param_grads(&self, loss: NodeId) -> Result<ParamSet> {
        let grads = self.graph.backward(loss)?;
        let mut out = ParamSet::new();
        for (name, &id) in &self.nodes {
            out.insert(name.clone(), grads.get(id, &self.graph));
        }
        Ok(out)
    }

    fn conv_block(
        &mut self,
        x: NodeId,
        name: &str,
        stride: usize,
        pad: usize,
        relu: bool,
    ) -> Result<NodeId> {
        let w = self.param_node(&format!("{name}.w"));
        let b = self.param_node(&format!("{name}.b"));
        let y = self.graph.conv2d(x, w, b, stride, pad)?;
        if relu {
            self.graph.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Image `[H, W, 3]` with values in [0, 255] to feature map
    /// `[H/8, W/8, c3]`. H and W must be divisible by the stride.
    pub fn backbone(&mut self, image: &Tensor) -> Result<NodeId> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                detail: format!("expected [H, W, 3] image, got {s:?}"),
            });
        }
        let stride = self.cfg.stride();
        if s[0] % stride != 0 || s[1] % stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} not divisible by stride {stride}",
                s[0], s[1]
            )));
        }
        let raw = self.graph.constant(image.clone());
        let x = self.graph.scale(raw, 1.0 / 255.0)?;
        let x = self.conv_block(x, "backbone.conv1", 2, 1, true)?;
        let x = self.conv_block(x, "backbone.conv2", 2, 1, true)?;
        self.conv_block(x, "backbone.conv3", 2, 1, true)
    }

    /// RPN heads over a feature map; rows follow the anchor grid order.
    pub fn rpn(&mut self, features: NodeId, anchors: &AnchorGrid) -> Result<RpnNodes> {
        let fs = self.value(features).shape().to_vec();
        if fs.len() != 3 || fs[0] != anchors.cells_y || fs[1] != anchors.cells_x {
            return Err(Error::ShapeMismatch {
                op: "rpn",
                detail: format!(
                    "features {fs:?} vs anchor grid {}x{}",
                    anchors.cells_y, anchors.cells_x
                ),
            });
        }
        let a = anchors.len();
        let t = self.conv_block(features, "rpn.conv", 1, 1, true)?;
        let obj_map = self.conv_block(t, "rpn.obj", 1, 0, false)?;
        let reg_map = self.conv_block(t, "rpn.reg", 1, 0, false)?;
        // [h, w, 2k] in (cell, anchor, logit) layout is exactly [A, 2] flat.
        let obj_logits = self.graph.reshape(obj_map, vec![a, 2])?;
        let deltas = self.graph.reshape(reg_map, vec![a, 4])?;
        Ok(RpnNodes { obj_logits, deltas })
    }

    /// ROI head over an explicit proposal list. Proposals must intersect the
    /// image; rows of the outputs align with the input order.
    pub fn roi_head(&mut self, features: NodeId, proposals: &[Box2D]) -> Result<RoiNodes> {
        if proposals.is_empty() {
            return Err(Error::InvalidArgument(
                "roi_head requires at least one proposal".into(),
            ));
        }
        let s = self.cfg.roi_pool_size;
        let stride = self.cfg.stride();
        let c = self.value(features).shape()[2];
        let mut pooled = Vec::with_capacity(proposals.len());
        for p in proposals {
            let region = self.graph.roi_pool(features, p, s, stride)?;
            pooled.push(self.graph.reshape(region, vec![s * s * c])?);
        }
        let batch = self.graph.stack(&pooled)?;
        let w1 = self.param_node("roi.fc1.w");
        let b1 = self.param_node("roi.fc1.b");
        let h = self.graph.linear(batch, w1, b1)?;
        let h = self.graph.relu(h)?;
        let wc = self.param_node("roi.cls.w");
        let bc = self.param_node("roi.cls.b");
        let cls_logits = self.graph.linear(h, wc, bc)?;
        let wr = self.param_node("roi.reg.w");
        let br = self.param_node("roi.reg.b");
        let deltas = self.graph.linear(h, wr, br)?;
        Ok(RoiNodes { cls_logits, deltas })
    }
}

/// Backbone forward as plain values (no gradients kept).
pub fn forward_backbone_values(det: &DetectorParams, image: &Tensor) -> Result<Tensor> {
    let mut ctx = ForwardCtx::new(det, false);
    let f = ctx.backbone(image)?;
    Ok(ctx.value(f).clone())
}

/// Backbone + RPN as plain values, with the anchor grid they align to.
pub fn forward_rpn_values(det: &DetectorParams, image: &Tensor) -> Result<(RpnOutput, AnchorGrid)> {
    let mut ctx = ForwardCtx::new(det, false);
    let f = ctx.backbone(image)?;
    let anchors = AnchorGrid::generate(
        &det.cfg.anchor_spec,
        image.shape()[1],
        image.shape()[0],
    )?;
    let rpn = ctx.rpn(f, &anchors)?;
    Ok((
        RpnOutput {
            obj_logits: ctx.value(rpn.obj_logits).clone(),
            deltas: ctx.value(rpn.deltas).clone(),
        },
        anchors,
    ))
}

/// ROI head as plain values over given proposals.
pub fn forward_roi_values(
    det: &DetectorParams,
    image: &Tensor,
    proposals: &[Box2D],
) -> Result<RoiOutput> {
    let mut ctx = ForwardCtx::new(det, false);
    let f = ctx.backbone(image)?;
    let roi = ctx.roi_head(f, proposals)?;
    Ok(RoiOutput {
        cls_logits: ctx.value(roi.cls_logits).clone(),
        deltas: ctx.value(roi.deltas).clone(),
    })
}

/// Foreground probability per anchor from `[A, 2]` logits.
pub fn objectness_probs(obj_logits: &Tensor) -> Vec<f64> {
    let a = obj_logits.shape()[0];
    (0..a)
        .map(|i| {
            let bg = obj_logits.at2(i, 0);
            let fg = obj_logits.at2(i, 1);
            let m = bg.max(fg);
            let eb = (bg - m).exp();
            let ef = (fg - m).exp();
            ef / (eb + ef)
        })
        .collect()
}

/// Decode every anchor's delta, clip to the image, and score by objectness.
/// Keeps the anchor index for traceability.
fn decode_scored(
    rpn: &RpnOutput,
    anchors: &AnchorGrid,
    image_w: f64,
    image_h: f64,
) -> Vec<(usize, ScoredBox)> {
    let probs = objectness_probs(&rpn.obj_logits);
    let mut out = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.anchors.iter().enumerate() {
        let d = [
            rpn.deltas.at2(i, 0),
            rpn.deltas.at2(i, 1),
            rpn.deltas.at2(i, 2),
            rpn.deltas.at2(i, 3),
        ];
        if let Some(b) = decode_deltas(anchor, &d, Some((image_w, image_h))) {
            out.push((
                i,
                ScoredBox {
                    box2d: b,
                    score: probs[i],
                    class_id: 0,
                },
            ));
        }
    }
    out
}

/// How proposals are chosen from RPN outputs.
pub enum ProposalMode<'a> {
    /// Teacher path: NMS then the top N boxes by objectness.
    TeacherTopN { n: usize },
    /// Supervised path: NMS-capped proposals plus GT boxes, sampled to a
    /// fixed positive/negative mix against the ground truth.
    SupervisedSampling { gt: &'a GroundTruth, seed: u64 },
}

/// Proposal selection over decoded RPN outputs. Returns boxes in descending
/// objectness order for the top-N mode. An empty RPN output yields an empty
/// proposal list.
pub fn select_proposals(
    cfg: &DetectorConfig,
    rpn: &RpnOutput,
    anchors: &AnchorGrid,
    image_w: f64,
    image_h: f64,
    mode: ProposalMode,
) -> Result<Vec<Box2D>> {
    match mode {
        ProposalMode::TeacherTopN { n } => {
            if n == 0 {
                return Err(Error::InvalidArgument("top-N requires N >= 1".into()));
            }
            Ok(top_proposals(cfg, rpn, anchors, image_w, image_h, n))
        }
        ProposalMode::SupervisedSampling { gt, seed } => {
            let candidates = top_proposals(cfg, rpn, anchors, image_w, image_h, cfg.train_proposals);
            let sampled = super::loss::sample_roi_proposals(cfg, &candidates, gt, seed);
            Ok(sampled.into_iter().map(|(b, _)| b).collect())
        }
    }
}

/// Decode, NMS, keep top `n` by objectness (fewer if NMS leaves fewer).
pub(crate) fn top_proposals(
    cfg: &DetectorConfig,
    rpn: &RpnOutput,
    anchors: &AnchorGrid,
    image_w: f64,
    image_h: f64,
    n: usize,
) -> Vec<Box2D> {
    let decoded = decode_scored(rpn, anchors, image_w, image_h);
    let boxes: Vec<ScoredBox> = decoded.iter().map(|(_, b)| *b).collect();
    let kept = nms(&boxes, cfg.rpn_nms_thresh).expect("valid threshold");
    kept.into_iter()
        .take(n)
        .map(|i| boxes[i].box2d)
        .collect()
}

/// Full inference: RPN proposals, ROI head, per-class decoding, score
/// filtering, per-class NMS. Deterministic; no augmentation is applied.
pub fn detect(
    det: &DetectorParams,
    image: &Tensor,
    score_thresh: f64,
    nms_thresh: f64,
) -> Result<Vec<ScoredBox>> {
    let (w, h) = (image.shape()[1] as f64, image.shape()[0] as f64);
    let mut ctx = ForwardCtx::new(det, false);
    let features = ctx.backbone(image)?;
    let anchors = AnchorGrid::generate(&det.cfg.anchor_spec, w as usize, h as usize)?;
    let rpn_nodes = ctx.rpn(features, &anchors)?;
    let rpn = RpnOutput {
        obj_logits: ctx.value(rpn_nodes.obj_logits).clone(),
        deltas: ctx.value(rpn_nodes.deltas).clone(),
    };
    let proposals = top_proposals(&det.cfg, &rpn, &anchors, w, h, det.cfg.max_inference_proposals);
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let roi_nodes = ctx.roi_head(features, &proposals)?;
    let cls = ctx.graph.softmax(roi_nodes.cls_logits, 1)?;
    let probs = ctx.value(cls).clone();
    let deltas = ctx.value(roi_nodes.deltas).clone();

    let c = det.cfg.num_classes;
    let mut per_class: Vec<Vec<ScoredBox>> = vec![Vec::new(); c];
    for (i, p) in proposals.iter().enumerate() {
        for cls_id in 0..c {
            let score = probs.at2(i, cls_id);
            if score < score_thresh {
                continue;
            }
            let d = [
                deltas.at2(i, cls_id * 4),
                deltas.at2(i, cls_id * 4 + 1),
                deltas.at2(i, cls_id * 4 + 2),
                deltas.at2(i, cls_id * 4 + 3),
            ];
            if let Some(b) = decode_deltas(p, &d, Some((w, h))) {
                per_class[cls_id].push(ScoredBox {
                    box2d: b,
                    score,
                    class_id: cls_id,
                });
            }
        }
    }
    let mut out = Vec::new();
    for boxes in &per_class {
        for idx in nms(boxes, nms_thresh)? {
            out.push(boxes[idx]);
        }
    }
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    out.truncate(det.cfg.max_detections);
    Ok(out)
}
