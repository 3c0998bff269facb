//! Miniature two-stage detector: conv backbone, RPN, ROI head.
//!
//! The network is a 3-block stride-2 backbone feeding (a) a small conv RPN
//! emitting per-anchor objectness logits and box deltas, and (b) an ROI head
//! that max-pools proposals into a fixed grid and applies two linear layers
//! for class logits and class-dependent deltas.

mod loss;
mod net;

pub use loss::{
    plan_supervised, supervised_loss, supervised_loss_value, supervised_loss_with_plan,
    LossBreakdown, SupervisedLossNodes, SupervisedPlan,
};
pub use net::{
    detect, forward_backbone_values, forward_roi_values, forward_rpn_values, objectness_probs,
    select_proposals, ForwardCtx, ProposalMode, RoiNodes, RpnNodes,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorSpec, Box2D};
use crate::seeding::{rng_for, Stream};
use crate::tensor::{ParamSet, Tensor};

/// Everything that fixes the network architecture and its box pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Foreground class count C; the ROI head predicts C+1 with background last.
    pub num_classes: usize,
    pub backbone_channels: [usize; 3],
    pub rpn_channels: usize,
    pub roi_pool_size: usize,
    pub roi_fc_dim: usize,
    pub anchor_spec: AnchorSpec,
    /// IoU threshold for the RPN's proposal NMS.
    pub rpn_nms_thresh: f64,
    /// Post-NMS proposal cap at inference time.
    pub max_inference_proposals: usize,
    pub max_detections: usize,
    /// Anchor/GT matching thresholds for supervised RPN training.
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    /// Anchors sampled per image for the RPN classification loss.
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    /// Proposal/GT IoU above which a proposal is foreground in ROI training.
    pub roi_fg_iou: f64,
    /// Proposals sampled per image for the ROI losses.
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    /// Post-NMS proposal cap feeding ROI sampling during supervised training.
    pub train_proposals: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_classes: 3,
            backbone_channels: [8, 16, 32],
            rpn_channels: 32,
            roi_pool_size: 4,
            roi_fc_dim: 64,
            anchor_spec: AnchorSpec::default(),
            rpn_nms_thresh: 0.7,
            max_inference_proposals: 640,
            max_detections: 100,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 32,
            rpn_pos_fraction: 0.5,
            roi_fg_iou: 0.5,
            roi_batch: 16,
            roi_pos_fraction: 0.5,
            train_proposals: 128,
        }
    }
}

impl DetectorConfig {
    /// Total downsampling of the backbone (three stride-2 blocks).
    pub fn stride(&self) -> usize {
        8
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.anchor_spec.stride != self.stride() {
            return Err(Error::Config(format!(
                "anchor stride {} must equal backbone stride {}",
                self.anchor_spec.stride,
                self.stride()
            )));
        }
        if self.anchor_spec.anchors_per_cell() == 0 {
            return Err(Error::Config("anchor spec has no scales/aspects".into()));
        }
        Ok(())
    }
}

/// One annotated object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtItem {
    pub box2d: Box2D,
    pub class_id: usize,
}

/// All objects of one image. May be empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub items: Vec<GtItem>,
}

impl GroundTruth {
    pub fn new(items: Vec<GtItem>) -> GroundTruth {
        GroundTruth { items }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn validate(&self, num_classes: usize, image_w: f64, image_h: f64) -> Result<()> {
        for it in &self.items {
            if it.class_id >= num_classes {
                return Err(Error::Data(format!(
                    "gt class {} out of {num_classes}",
                    it.class_id
                )));
            }
            let b = it.box2d;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > image_w || b.y2 > image_h {
                return Err(Error::Data(format!(
                    "gt box ({}, {}, {}, {}) outside {image_w}x{image_h}",
                    b.x1, b.y1, b.x2, b.y2
                )));
            }
        }
        Ok(())
    }
}

/// Per-anchor RPN outputs as plain values (teacher side / inference).
#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// `[A, 2]` logits, background then foreground.
    pub obj_logits: Tensor,
    /// `[A, 4]` deltas in anchor order.
    pub deltas: Tensor,
}

impl RpnOutput {
    pub fn num_anchors(&self) -> usize {
        self.obj_logits.shape()[0]
    }
}

/// Per-proposal ROI head outputs as plain values.
#[derive(Debug, Clone)]
pub struct RoiOutput {
    /// `[n, C+1]` class logits, background last.
    pub cls_logits: Tensor,
    /// `[n, 4C]` per-class deltas, class-major.
    pub deltas: Tensor,
}

impl RoiOutput {
    pub fn num_proposals(&self) -> usize {
        self.cls_logits.shape()[0]
    }
}

/// Trainable weights plus their architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub cfg: DetectorConfig,
    pub params: ParamSet,
}

impl DetectorParams {
    /// He-uniform conv/linear weights, zero biases, fixed by seed.
    pub fn init(cfg: DetectorConfig, seed: u64) -> Result<DetectorParams> {
        cfg.validate()?;
        let mut rng = rng_for(seed, 0, Stream::Init, 0);
        let mut ps = ParamSet::new();
        let [c1, c2, c3] = cfg.backbone_channels;
        let k = cfg.anchor_spec.anchors_per_cell();
        let mut conv = |ps: &mut ParamSet, name: &str, kh: usize, cin: usize, cout: usize| {
            let fan_in = kh * kh * cin;
            ps.insert(
                format!("{name}.w"),
                Tensor::he_uniform(vec![kh, kh, cin, cout], fan_in, &mut rng),
            );
            ps.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
        };
        conv(&mut ps, "backbone.conv1", 3, 3, c1);
        conv(&mut ps, "backbone.conv2", 3, c1, c2);
        conv(&mut ps, "backbone.conv3", 3, c2, c3);
        conv(&mut ps, "rpn.conv", 3, c3, cfg.rpn_channels);
        conv(&mut ps, "rpn.obj", 1, cfg.rpn_channels, 2 * k);
        conv(&mut ps, "rpn.reg", 1, cfg.rpn_channels, 4 * k);
        let pooled = cfg.roi_pool_size * cfg.roi_pool_size * c3;
        let mut dense = |ps: &mut ParamSet, name: &str, din: usize, dout: usize| {
            ps.insert(
                format!("{name}.w"),
                Tensor::he_uniform(vec![din, dout], din, &mut rng),
            );
            ps.insert(format!("{name}.b"), Tensor::zeros(vec![dout]));
        };
        dense(&mut ps, "roi.fc1", pooled, cfg.roi_fc_dim);
        dense(&mut ps, "roi.cls", cfg.roi_fc_dim, cfg.num_classes + 1);
        dense(&mut ps, "roi.reg", cfg.roi_fc_dim, 4 * cfg.num_classes);
        Ok(DetectorParams { cfg, params: ps })
    }

    /// Zero-valued weights of the same architecture (tests, negative cases).
    pub fn zeros(cfg: DetectorConfig) -> Result<DetectorParams> {
        let mut d = DetectorParams::init(cfg, 0)?;
        for (_, t) in d.params.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        Ok(d)
    }

    /// Self-describing checkpoint: JSON config header + parameter container.
    pub fn save(&self, w: &mut impl std::io::Write) -> Result<()> {
        let header = serde_json::to_string(&self.cfg)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        crate::tensor::write_param_set(w, &self.params)
    }

    pub fn load(r: &mut impl std::io::Read) -> Result<DetectorParams> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let cfg: DetectorConfig = serde_json::from_slice(&header)?;
        cfg.validate()?;
        let params = crate::tensor::read_param_set(r)?;
        Ok(DetectorParams { cfg, params })
    }
}
