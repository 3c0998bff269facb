//! Semi-supervised training loop.
//!
//! Burn-in trains the detector on labeled data only and copies the result
//! into both teacher and student. Each semi-supervised step then
//! (1) weakly augments every unlabeled image, (2) asks the teacher for
//! pseudo-labels on the weak view, (3) runs the student on a strongly
//! augmented copy of the same view and scores it against the pseudo-labels,
//! (4) adds the supervised loss on the labeled batch, (5) takes one SGD step
//! on `L = L_S + (n_U / n_S) * beta * L_U`, and (6) updates the teacher per
//! the configured rule (EMA each iteration, periodic copy, or never).
//!
//! Every random draw comes from a stream keyed by (seed, iteration, purpose),
//! so disabling the unsupervised branch leaves the supervised trajectory
//! bit-identical, and a run can resume from (seed, iteration) alone.

mod metrics;

pub use metrics::{
    MapScores, MetricsHeader, MetricsRecord, Phase, PseudoStats, METRICS_SCHEMA_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, DatasetSplit};
use crate::detector::{
    supervised_loss, DetectorConfig, DetectorParams, ForwardCtx, GroundTruth,
};
use crate::error::{Error, Result};
use crate::eval::{coco_thresholds, evaluate_map, EvalResult};
use crate::pseudo_label::{
    make_hard_label, make_soft_label, EnsembleMode, RoiTargets, RpnTargets,
};
use crate::seeding::{seed_for, Stream};
use crate::tensor::{sgd_step, NodeId, ParamSet, Tensor};
use crate::trainer::metrics::sanitize_loss;

/// Score threshold used when evaluating mAP during training.
pub const EVAL_SCORE_THRESH: f64 = 0.05;
/// Per-class NMS threshold used for evaluation-time inference.
pub const EVAL_NMS_THRESH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Soft,
    Hard,
}

impl LabelMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelMode::Soft => "soft",
            LabelMode::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    #[default]
    EmaPerIter,
    CopyEveryK,
    Fixed,
}

/// Every training hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Unsupervised loss weight.
    pub beta: f64,
    /// EMA decay for the teacher update.
    pub alpha: f64,
    /// Top-N proposal count for soft pseudo-labels.
    pub n_proposals: usize,
    /// Confidence threshold for hard pseudo-labels.
    pub theta: f64,
    /// Per-class NMS threshold when generating hard pseudo-labels.
    pub hard_nms_thresh: f64,
    pub label_mode: LabelMode,
    pub update_rule: UpdateRule,
    /// Copy period for [`UpdateRule::CopyEveryK`].
    pub copy_k: u64,
    pub ensemble_mode: EnsembleMode,
    /// When false the unsupervised loss has no localization terms at all.
    pub unsup_localization: bool,
    pub burn_in_iters: u64,
    /// Semi-supervised iterations after burn-in.
    pub total_iters: u64,
    pub lr: f64,
    pub momentum: f64,
    /// Labeled images per step (n_S).
    pub batch_labeled: usize,
    /// Unlabeled images per step (n_U).
    pub batch_unlabeled: usize,
    pub seed: u64,
    /// Evaluate teacher and student mAP every this many SSL iterations.
    pub eval_interval: u64,
    /// Emit a resumable checkpoint every this many SSL iterations (0 = off).
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.5,
            alpha: 0.999,
            n_proposals: 640,
            theta: 0.7,
            hard_nms_thresh: 0.5,
            label_mode: LabelMode::Soft,
            update_rule: UpdateRule::EmaPerIter,
            copy_k: 10_000,
            ensemble_mode: EnsembleMode::Flip,
            unsup_localization: true,
            burn_in_iters: 500,
            total_iters: 1000,
            lr: 0.01,
            momentum: 0.9,
            batch_labeled: 2,
            batch_unlabeled: 2,
            seed: 7,
            eval_interval: 200,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must be in [0, 1]".into()));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config("theta must be in (0, 1]".into()));
        }
        if self.n_proposals == 0 {
            return Err(Error::Config("n_proposals must be >= 1".into()));
        }
        if self.batch_labeled == 0 {
            return Err(Error::Config("batch_labeled must be >= 1".into()));
        }
        if self.update_rule == UpdateRule::CopyEveryK && self.copy_k == 0 {
            return Err(Error::Config("copy_k must be >= 1".into()));
        }
        if self.lr < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("bad lr/momentum".into()));
        }
        Ok(())
    }
}

/// Mutable training state; teacher and student stay EMA-compatible.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub student: DetectorParams,
    pub teacher: DetectorParams,
    pub velocity: ParamSet,
    /// Global iteration counter (burn-in and SSL share it).
    pub iter: u64,
    pub seed: u64,
}

const STATE_MAGIC: &str = "ssdet-trainer-state/1";

#[derive(Serialize, Deserialize)]
struct StateHeader {
    magic: String,
    iter: u64,
    seed: u64,
}

impl TrainerState {
    pub fn save(&self, w: &mut impl std::io::Write) -> Result<()> {
        let header = serde_json::to_string(&StateHeader {
            magic: STATE_MAGIC.into(),
            iter: self.iter,
            seed: self.seed,
        })?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        self.student.save(w)?;
        self.teacher.save(w)?;
        crate::tensor::write_param_set(w, &self.velocity)
    }

    pub fn load(r: &mut impl std::io::Read) -> Result<TrainerState> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut buf)?;
        let header: StateHeader = serde_json::from_slice(&buf)?;
        if header.magic != STATE_MAGIC {
            return Err(Error::Serialization("bad trainer state header".into()));
        }
        let student = DetectorParams::load(r)?;
        let teacher = DetectorParams::load(r)?;
        let velocity = crate::tensor::read_param_set(r)?;
        Ok(TrainerState {
            student,
            teacher,
            velocity,
            iter: header.iter,
            seed: header.seed,
        })
    }
}

/// One labeled training example.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub image: Tensor,
    pub gt: GroundTruth,
}

/// Elementwise EMA: `teacher = alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(
    teacher: &mut DetectorParams,
    student: &DetectorParams,
    alpha: f64,
) -> Result<()> {
    teacher.params.ema_blend_from(&student.params, alpha)
}

/// `L = L_S + beta * (n_U / n_S) * L_U`.
pub fn total_loss(l_s: f64, l_u: f64, n_s: usize, n_u: usize, beta: f64) -> f64 {
    l_s + beta * (n_u as f64 / n_s as f64) * l_u
}

/// Unsupervised loss terms as graph nodes plus their values for metrics.
pub struct UnsupLossParts {
    pub total: NodeId,
    pub cls: f64,
    pub loc: f64,
}

/// RPN consistency: mean over anchors of KL(teacher objectness || student
/// objectness) plus, when localization is enabled, the per-anchor Euclidean
/// delta residual norm. Teacher targets enter as detached constants.
pub fn unsup_rpn_loss(
    ctx: &mut ForwardCtx,
    student: crate::detector::RpnNodes,
    targets: &RpnTargets,
    include_loc: bool,
) -> Result<UnsupLossParts> {
    let a = ctx.value(student.obj_logits).shape()[0];
    if targets.obj_probs.shape()[0] != a {
        return Err(Error::ShapeMismatch {
            op: "unsup_rpn_loss",
            detail: format!(
                "teacher has {} anchors, student {a}",
                targets.obj_probs.shape()[0]
            ),
        });
    }
    let probs = ctx.graph.softmax(student.obj_logits, 1)?;
    let kl = ctx.graph.kl_div(&targets.obj_probs, probs)?;
    let scale = 1.0 / a as f64;
    let cls_node = ctx.graph.scale(kl, scale)?;
    let cls = ctx.value(cls_node).scalar_value()?;
    if include_loc {
        let l2 = ctx.graph.l2_residual_norm(&targets.deltas, student.deltas)?;
        let loc_node = ctx.graph.scale(l2, scale)?;
        let loc = ctx.value(loc_node).scalar_value()?;
        let total = ctx.graph.add(cls_node, loc_node)?;
        Ok(UnsupLossParts { total, cls, loc })
    } else {
        Ok(UnsupLossParts {
            total: cls_node,
            cls,
            loc: 0.0,
        })
    }
}

/// ROI consistency over the teacher's proposals: mean over proposals of
/// KL(teacher class distribution || student) plus, when enabled, the
/// Euclidean norm over the full all-class delta row.
pub fn unsup_roi_loss(
    ctx: &mut ForwardCtx,
    student: crate::detector::RoiNodes,
    targets: &RoiTargets,
    include_loc: bool,
) -> Result<UnsupLossParts> {
    let n = ctx.value(student.cls_logits).shape()[0];
    if targets.cls_probs.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "unsup_roi_loss",
            detail: format!(
                "teacher has {} proposals, student {n}",
                targets.cls_probs.shape()[0]
            ),
        });
    }
    let probs = ctx.graph.softmax(student.cls_logits, 1)?;
    let kl = ctx.graph.kl_div(&targets.cls_probs, probs)?;
    let scale = 1.0 / n as f64;
    let cls_node = ctx.graph.scale(kl, scale)?;
    let cls = ctx.value(cls_node).scalar_value()?;
    if include_loc {
        let l2 = ctx.graph.l2_residual_norm(&targets.deltas, student.deltas)?;
        let loc_node = ctx.graph.scale(l2, scale)?;
        let loc = ctx.value(loc_node).scalar_value()?;
        let total = ctx.graph.add(cls_node, loc_node)?;
        Ok(UnsupLossParts { total, cls, loc })
    } else {
        Ok(UnsupLossParts {
            total: cls_node,
            cls,
            loc: 0.0,
        })
    }
}

fn mean_nodes(ctx: &mut ForwardCtx, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = ctx.graph.add(acc, n)?;
    }
    ctx.graph.scale(acc, 1.0 / nodes.len() as f64)
}

struct UnsupBranch {
    total: NodeId,
    rpn_cls: f64,
    rpn_loc: f64,
    roi_cls: f64,
    roi_loc: f64,
    pseudo: Option<PseudoStats>,
}

/// Student-side unsupervised loss for one unlabeled image.
fn unsup_image_loss(
    ctx: &mut ForwardCtx,
    teacher: &DetectorParams,
    image: &Tensor,
    cfg: &TrainConfig,
    iter: u64,
    index: u64,
) -> Result<UnsupBranch> {
    let seed = cfg.seed;
    // shared weak view for teacher and student
    let weak_seed = seed_for(seed, iter, Stream::UnsupWeakAug, index);
    let (weak, _, _) = crate::augment::weak_augment(
        image,
        &GroundTruth::default(),
        weak_seed,
        teacher.cfg.stride(),
    );
    // strong view on top of the weak view, photometric only
    let strong_seed = seed_for(seed, iter, Stream::UnsupStrongAug, index);
    let plan = crate::augment::plan_strong(strong_seed, weak.shape()[0]);
    let strong = crate::augment::apply_strong(&weak, &plan);

    match cfg.label_mode {
        LabelMode::Soft => {
            let ensemble_seed = seed_for(seed, iter, Stream::TeacherEnsembleAug, index);
            let label = make_soft_label(
                teacher,
                &weak,
                cfg.n_proposals,
                cfg.ensemble_mode,
                ensemble_seed,
            )?;
            let anchors = crate::geometry::AnchorGrid::generate(
                &teacher.cfg.anchor_spec,
                weak.shape()[1],
                weak.shape()[0],
            )?;
            let features = ctx.backbone(&strong)?;
            let rpn = ctx.rpn(features, &anchors)?;
            let rpn_parts = unsup_rpn_loss(ctx, rpn, &label.rpn, cfg.unsup_localization)?;
            let (total, roi_cls, roi_loc) = match &label.roi {
                Some(roi_targets) if !label.proposals.is_empty() => {
                    let roi = ctx.roi_head(features, &label.proposals)?;
                    let roi_parts =
                        unsup_roi_loss(ctx, roi, roi_targets, cfg.unsup_localization)?;
                    let total = ctx.graph.add(rpn_parts.total, roi_parts.total)?;
                    (total, roi_parts.cls, roi_parts.loc)
                }
                _ => (rpn_parts.total, 0.0, 0.0),
            };
            let (n_props, mean_conf) = label.stats();
            Ok(UnsupBranch {
                total,
                rpn_cls: rpn_parts.cls,
                rpn_loc: rpn_parts.loc,
                roi_cls,
                roi_loc,
                pseudo: Some(PseudoStats {
                    mean_proposals: n_props as f64,
                    mean_max_confidence: mean_conf,
                }),
            })
        }
        LabelMode::Hard => {
            let hard = make_hard_label(teacher, &weak, cfg.theta, cfg.hard_nms_thresh)?;
            let sample_seed = seed_for(seed, iter, Stream::UnsupSample, index);
            let loss = supervised_loss(ctx, &strong, &hard.gt, sample_seed)?;
            let mean_conf = if hard.scores.is_empty() {
                0.0
            } else {
                hard.scores.iter().sum::<f64>() / hard.scores.len() as f64
            };
            Ok(UnsupBranch {
                total: loss.total,
                rpn_cls: loss.breakdown.rpn_cls,
                rpn_loc: loss.breakdown.rpn_loc,
                roi_cls: loss.breakdown.roi_cls,
                roi_loc: loss.breakdown.roi_loc,
                pseudo: Some(PseudoStats {
                    mean_proposals: hard.gt.len() as f64,
                    mean_max_confidence: mean_conf,
                }),
            })
        }
    }
}

/// Hard-label unsupervised objective for one image, exposed for fixtures:
/// exactly the supervised loss applied to the pseudo ground truth on the
/// strongly augmented input.
pub fn hard_label_loss(
    student: &DetectorParams,
    strong_image: &Tensor,
    pseudo_gt: &GroundTruth,
    sample_seed: u64,
) -> Result<f64> {
    let breakdown =
        crate::detector::supervised_loss_value(student, strong_image, pseudo_gt, sample_seed)?;
    Ok(breakdown.total())
}

/// One optimization step over a mixed batch. Returns the metrics record for
/// this iteration (without evaluation fields) and advances the state.
pub fn train_step(
    state: &mut TrainerState,
    labeled: &[LabeledExample],
    unlabeled: &[Tensor],
    cfg: &TrainConfig,
) -> Result<MetricsRecord> {
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    let iter = state.iter;
    let mut ctx = ForwardCtx::new(&state.student, true);

    // supervised branch on the labeled batch (weak views)
    let mut sup_nodes = Vec::with_capacity(labeled.len());
    let mut sup_breakdown = [0.0f64; 4];
    for (i, ex) in labeled.iter().enumerate() {
        let weak_seed = seed_for(cfg.seed, iter, Stream::SupWeakAug, i as u64);
        let (weak_img, weak_gt, _) = crate::augment::weak_augment(
            &ex.image,
            &ex.gt,
            weak_seed,
            state.student.cfg.stride(),
        );
        let sample_seed = seed_for(cfg.seed, iter, Stream::SupSample, i as u64);
        let loss = supervised_loss(&mut ctx, &weak_img, &weak_gt, sample_seed)?;
        sup_breakdown[0] += loss.breakdown.rpn_cls;
        sup_breakdown[1] += loss.breakdown.rpn_loc;
        sup_breakdown[2] += loss.breakdown.roi_cls;
        sup_breakdown[3] += loss.breakdown.roi_loc;
        sup_nodes.push(loss.total);
    }
    let n_s = labeled.len();
    let l_s_node = mean_nodes(&mut ctx, &sup_nodes)?;
    let l_s = ctx.value(l_s_node).scalar_value()?;
    for v in sup_breakdown.iter_mut() {
        *v /= n_s as f64;
    }

    // unsupervised branch; skipped entirely when it cannot contribute, so the
    // supervised trajectory stays bit-identical
    let n_u = unlabeled.len();
    let mut unsup = [0.0f64; 4];
    let mut l_u = 0.0;
    let mut pseudo_acc: Option<PseudoStats> = None;
    let total_node = if cfg.beta > 0.0 && n_u > 0 {
        let mut unsup_nodes = Vec::with_capacity(n_u);
        let mut stats_acc = (0.0, 0.0);
        for (j, image) in unlabeled.iter().enumerate() {
            let branch =
                unsup_image_loss(&mut ctx, &state.teacher, image, cfg, iter, j as u64)?;
            unsup[0] += branch.rpn_cls;
            unsup[1] += branch.rpn_loc;
            unsup[2] += branch.roi_cls;
            unsup[3] += branch.roi_loc;
            if let Some(p) = branch.pseudo {
                stats_acc.0 += p.mean_proposals;
                stats_acc.1 += p.mean_max_confidence;
            }
            unsup_nodes.push(branch.total);
        }
        let l_u_node = mean_nodes(&mut ctx, &unsup_nodes)?;
        l_u = ctx.value(l_u_node).scalar_value()?;
        for v in unsup.iter_mut() {
            *v /= n_u as f64;
        }
        pseudo_acc = Some(PseudoStats {
            mean_proposals: stats_acc.0 / n_u as f64,
            mean_max_confidence: stats_acc.1 / n_u as f64,
        });
        let weight = cfg.beta * (n_u as f64 / n_s as f64);
        let weighted = ctx.graph.scale(l_u_node, weight)?;
        ctx.graph.add(l_s_node, weighted)?
    } else {
        l_s_node
    };

    let grads = ctx.param_grads(total_node)?;
    sgd_step(
        &mut state.student.params,
        &mut state.velocity,
        &grads,
        cfg.lr,
        cfg.momentum,
    )?;
    state.iter += 1;

    match cfg.update_rule {
        UpdateRule::EmaPerIter => ema_update(&mut state.teacher, &state.student, cfg.alpha)?,
        UpdateRule::CopyEveryK => {
            if state.iter % cfg.copy_k == 0 {
                state.teacher = state.student.clone();
            }
        }
        UpdateRule::Fixed => {}
    }

    let record = MetricsRecord {
        iteration: iter,
        phase: Phase::SemiSupervised,
        label_mode: cfg.label_mode.as_str().into(),
        l_s: sanitize_loss(l_s, "l_s")?,
        l_s_rpn_cls: sanitize_loss(sup_breakdown[0], "l_s_rpn_cls")?,
        l_s_rpn_loc: sanitize_loss(sup_breakdown[1], "l_s_rpn_loc")?,
        l_s_roi_cls: sanitize_loss(sup_breakdown[2], "l_s_roi_cls")?,
        l_s_roi_loc: sanitize_loss(sup_breakdown[3], "l_s_roi_loc")?,
        l_u: sanitize_loss(l_u, "l_u")?,
        l_u_rpn_cls: sanitize_loss(unsup[0], "l_u_rpn_cls")?,
        l_u_rpn_loc: sanitize_loss(unsup[1], "l_u_rpn_loc")?,
        l_u_roi_cls: sanitize_loss(unsup[2], "l_u_roi_cls")?,
        l_u_roi_loc: sanitize_loss(unsup[3], "l_u_roi_loc")?,
        total: sanitize_loss(total_loss(l_s, l_u, n_s, n_u, cfg.beta), "total")?,
        teacher_map: None,
        student_map: None,
        pseudo: pseudo_acc,
    };
    record.validate()?;
    Ok(record)
}

/// Draw `k` distinct ids from a pool for one iteration (all of them when the
/// pool is smaller).
pub fn sample_batch_ids(
    seed: u64,
    iter: u64,
    stream: Stream,
    pool: &[usize],
    k: usize,
) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = crate::seeding::rng_for(seed, iter, stream, 0);
    let mut ids: Vec<usize> = pool.to_vec();
    ids.shuffle(&mut rng);
    ids.truncate(k.min(pool.len()));
    ids
}

fn labeled_batch(corpus: &Corpus, ids: &[usize]) -> Vec<LabeledExample> {
    ids.iter()
        .map(|&id| LabeledExample {
            image: corpus.image(id),
            gt: corpus.ground_truth(id).clone(),
        })
        .collect()
}

/// Supervised-only pre-training on the labeled subset. The final weights are
/// duplicated into both teacher and student.
pub fn burn_in(
    corpus: &Corpus,
    labeled_ids: &[usize],
    cfg: &TrainConfig,
    det_cfg: &DetectorConfig,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainerState> {
    cfg.validate()?;
    if labeled_ids.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    let student = DetectorParams::init(det_cfg.clone(), cfg.seed)?;
    let velocity = student.params.zeros_like();
    let teacher = student.clone();
    let mut state = TrainerState {
        student,
        teacher,
        velocity,
        iter: 0,
        seed: cfg.seed,
    };
    let sup_only = TrainConfig {
        beta: 0.0,
        update_rule: UpdateRule::Fixed,
        ..cfg.clone()
    };
    for _ in 0..cfg.burn_in_iters {
        let ids = sample_batch_ids(
            cfg.seed,
            state.iter,
            Stream::SupBatch,
            labeled_ids,
            cfg.batch_labeled,
        );
        let batch = labeled_batch(corpus, &ids);
        let mut rec = train_step(&mut state, &batch, &[], &sup_only)?;
        rec.phase = Phase::BurnIn;
        on_record(&rec)?;
    }
    state.teacher = state.student.clone();
    state.velocity = state.student.params.zeros_like();
    Ok(state)
}

/// mAP of a detector over the given corpus ids (no augmentation).
pub fn evaluate_detector(
    det: &DetectorParams,
    corpus: &Corpus,
    ids: &[usize],
) -> Result<EvalResult> {
    let mut dets = Vec::with_capacity(ids.len());
    let mut gts = Vec::with_capacity(ids.len());
    for &id in ids {
        let image = corpus.image(id);
        dets.push(crate::detector::detect(
            det,
            &image,
            EVAL_SCORE_THRESH,
            EVAL_NMS_THRESH,
        )?);
        gts.push(corpus.ground_truth(id).clone());
    }
    evaluate_map(&dets, &gts, &coco_thresholds())
}

/// Events emitted while a training run progresses.
pub enum RunEvent<'a> {
    Record(&'a MetricsRecord),
    /// Emitted every `checkpoint_interval` SSL iterations.
    Checkpoint(&'a TrainerState),
}

/// Output of a full run.
pub struct RunOutput {
    pub state: TrainerState,
    /// Snapshot right after burn-in (the supervised baseline); `None` when
    /// resuming past burn-in.
    pub burn_in_params: Option<DetectorParams>,
}

/// Burn-in (unless resuming) followed by `total_iters` semi-supervised steps
/// with periodic teacher/student evaluation. Deterministic under the seed.
pub fn run_training(
    corpus: &Corpus,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    det_cfg: &DetectorConfig,
    resume: Option<TrainerState>,
    mut on_event: impl FnMut(RunEvent) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    det_cfg.validate()?;
    if corpus.spec.num_classes != det_cfg.num_classes {
        return Err(Error::ClassCountMismatch {
            checkpoint: det_cfg.num_classes,
            corpus: corpus.spec.num_classes,
        });
    }
    let (mut state, burn_in_params) = match resume {
        Some(s) => (s, None),
        None => {
            let state = burn_in(corpus, &split.labeled, cfg, det_cfg, |rec| {
                on_event(RunEvent::Record(rec))
            })?;
            // supervised baseline on the held-out set
            let baseline = evaluate_detector(&state.teacher, corpus, &split.eval)?;
            let scores = MapScores {
                map_50_95: baseline.map_50_95,
                ap50: baseline.ap50,
            };
            let rec = MetricsRecord {
                iteration: state.iter,
                phase: Phase::BurnIn,
                label_mode: cfg.label_mode.as_str().into(),
                l_s: 0.0,
                l_s_rpn_cls: 0.0,
                l_s_rpn_loc: 0.0,
                l_s_roi_cls: 0.0,
                l_s_roi_loc: 0.0,
                l_u: 0.0,
                l_u_rpn_cls: 0.0,
                l_u_rpn_loc: 0.0,
                l_u_roi_cls: 0.0,
                l_u_roi_loc: 0.0,
                total: 0.0,
                teacher_map: Some(scores),
                student_map: Some(scores),
                pseudo: None,
            };
            on_event(RunEvent::Record(&rec))?;
            let snapshot = state.teacher.clone();
            (state, Some(snapshot))
        }
    };

    let end_iter = cfg.burn_in_iters + cfg.total_iters;
    while state.iter < end_iter {
        let labeled_ids = sample_batch_ids(
            cfg.seed,
            state.iter,
            Stream::SupBatch,
            &split.labeled,
            cfg.batch_labeled,
        );
        let labeled = labeled_batch(corpus, &labeled_ids);
        let unlabeled: Vec<Tensor> = if cfg.batch_unlabeled > 0 && !split.unlabeled.is_empty() {
            sample_batch_ids(
                cfg.seed,
                state.iter,
                Stream::UnsupBatch,
                &split.unlabeled,
                cfg.batch_unlabeled,
            )
            .into_iter()
            .map(|id| corpus.image(id))
            .collect()
        } else {
            Vec::new()
        };
        let mut rec = train_step(&mut state, &labeled, &unlabeled, cfg)?;
        let ssl_done = state.iter - cfg.burn_in_iters;
        let at_eval = (cfg.eval_interval > 0 && ssl_done % cfg.eval_interval == 0)
            || state.iter == end_iter;
        if at_eval {
            let t = evaluate_detector(&state.teacher, corpus, &split.eval)?;
            let s = evaluate_detector(&state.student, corpus, &split.eval)?;
            rec.teacher_map = Some(MapScores {
                map_50_95: t.map_50_95,
                ap50: t.ap50,
            });
            rec.student_map = Some(MapScores {
                map_50_95: s.map_50_95,
                ap50: s.ap50,
            });
        }
        on_event(RunEvent::Record(&rec))?;
        if cfg.checkpoint_interval > 0 && ssl_done % cfg.checkpoint_interval == 0 {
            on_event(RunEvent::Checkpoint(&state))?;
        }
    }
    Ok(RunOutput {
        state,
        burn_in_params,
    })
}

#[cfg(test)]
mod tests;
