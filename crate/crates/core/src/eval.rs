//! COCO-style mAP: greedy score-descending matching, all-point interpolated
//! AP per class per IoU threshold, averaged over classes then thresholds.

use std::collections::BTreeSet;

use crate::detector::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{iou, ScoredBox};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Mean over classes and thresholds.
    pub map_50_95: f64,
    /// Mean over classes at IoU 0.50.
    pub ap50: f64,
    /// `(class_id, threshold, ap)` for every evaluated pair.
    pub per_class: Vec<(usize, f64, f64)>,
}

/// Evaluate detections against ground truth over all images.
///
/// Matching per class and threshold: detections ordered by descending score
/// (ties: image id then insertion order); each detection greedily takes the
/// highest-IoU unmatched GT of its image at `IoU >= threshold`; each GT
/// matches at most once. Classes absent from the GT are excluded from the
/// average; with no GT at all the result is 0.
pub fn evaluate_map(
    detections: &[Vec<ScoredBox>],
    gts: &[GroundTruth],
    thresholds: &[f64],
) -> Result<EvalResult> {
    if detections.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "detections for {} images but GT for {}",
            detections.len(),
            gts.len()
        )));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "thresholds must be strictly ascending".into(),
        ));
    }
    let classes: BTreeSet<usize> = gts
        .iter()
        .flat_map(|g| g.items.iter().map(|it| it.class_id))
        .collect();
    let mut per_class = Vec::new();
    let mut ap50_sum = 0.0;
    let mut all_sum = 0.0;
    for &class_id in &classes {
        for &t in thresholds {
            let ap = average_precision(detections, gts, class_id, t);
            per_class.push((class_id, t, ap));
            all_sum += ap;
            if (t - 0.5).abs() < 1e-12 {
                ap50_sum += ap;
            }
        }
    }
    let n_classes = classes.len();
    Ok(EvalResult {
        map_50_95: if per_class.is_empty() {
            0.0
        } else {
            all_sum / (n_classes * thresholds.len()) as f64
        },
        ap50: if n_classes == 0 {
            0.0
        } else {
            ap50_sum / n_classes as f64
        },
        per_class,
    })
}

fn average_precision(
    detections: &[Vec<ScoredBox>],
    gts: &[GroundTruth],
    class_id: usize,
    thresh: f64,
) -> f64 {
    let num_gt: usize = gts
        .iter()
        .map(|g| g.items.iter().filter(|it| it.class_id == class_id).count())
        .sum();
    if num_gt == 0 {
        return 0.0;
    }
    // (image, det index within image) ordered by score desc, image asc, idx asc
    let mut dets: Vec<(usize, usize, f64)> = Vec::new();
    for (img, boxes) in detections.iter().enumerate() {
        for (i, d) in boxes.iter().enumerate() {
            if d.class_id == class_id {
                dets.push((img, i, d.score));
            }
        }
    }
    dets.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.items.len()]).collect();
    let mut tp = vec![false; dets.len()];
    for (rank, &(img, i, _)) in dets.iter().enumerate() {
        let det_box = detections[img][i].box2d;
        let mut best = 0.0;
        let mut best_gt = None;
        for (g, item) in gts[img].items.iter().enumerate() {
            if item.class_id != class_id || matched[img][g] {
                continue;
            }
            let v = iou(&det_box, &item.box2d);
            if v >= thresh && v > best {
                best = v;
                best_gt = Some(g);
            }
        }
        if let Some(g) = best_gt {
            matched[img][g] = true;
            tp[rank] = true;
        }
    }

    // all-point interpolated AP: sum of recall increments times the running
    // max precision to the right
    let mut precisions = Vec::with_capacity(dets.len());
    let mut recalls = Vec::with_capacity(dets.len());
    let (mut acc_tp, mut acc_fp) = (0usize, 0usize);
    for &is_tp in &tp {
        if is_tp {
            acc_tp += 1;
        } else {
            acc_fp += 1;
        }
        precisions.push(acc_tp as f64 / (acc_tp + acc_fp) as f64);
        recalls.push(acc_tp as f64 / num_gt as f64);
    }
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..envelope.len() {
        ap += (recalls[i] - prev_recall) * envelope[i];
        prev_recall = recalls[i];
    }
    ap
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{GroundTruth, GtItem};
    use crate::geometry::Box2D;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> Box2D {
        Box2D::new(x1, y1, x2, y2).unwrap()
    }

    fn gt_one(class: usize, b: Box2D) -> GroundTruth {
        GroundTruth::new(vec![GtItem {
            box2d: b,
            class_id: class,
        }])
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![
            gt_one(0, bx(0.0, 0.0, 10.0, 10.0)),
            gt_one(1, bx(5.0, 5.0, 20.0, 25.0)),
        ];
        let dets = vec![
            vec![ScoredBox {
                box2d: bx(0.0, 0.0, 10.0, 10.0),
                score: 1.0,
                class_id: 0,
            }],
            vec![ScoredBox {
                box2d: bx(5.0, 5.0, 20.0, 25.0),
                score: 1.0,
                class_id: 1,
            }],
        ];
        let r = evaluate_map(&dets, &gts, &coco_thresholds()).unwrap();
        assert!((r.map_50_95 - 1.0).abs() < 1e-12);
        assert!((r.ap50 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_detections_score_zero() {
        let gts = vec![gt_one(0, bx(0.0, 0.0, 10.0, 10.0))];
        let dets = vec![vec![]];
        let r = evaluate_map(&dets, &gts, &coco_thresholds()).unwrap();
        assert_eq!(r.map_50_95, 0.0);
    }

    #[test]
    fn hand_enumerated_pr_curve() {
        // one image, 2 GT of class 0, 3 detections:
        //   d1 score .9 matches gt A      -> tp, prec 1,   recall .5
        //   d2 score .8 matches nothing   -> fp, prec .5,  recall .5
        //   d3 score .7 matches gt B      -> tp, prec 2/3, recall 1
        // envelope: [1, 2/3, 2/3]; AP = .5 * 1 + .5 * 2/3 = 5/6
        let gts = vec![GroundTruth::new(vec![
            GtItem {
                box2d: bx(0.0, 0.0, 10.0, 10.0),
                class_id: 0,
            },
            GtItem {
                box2d: bx(30.0, 30.0, 40.0, 40.0),
                class_id: 0,
            },
        ])];
        let dets = vec![vec![
            ScoredBox {
                box2d: bx(0.0, 0.0, 10.0, 10.0),
                score: 0.9,
                class_id: 0,
            },
            ScoredBox {
                box2d: bx(15.0, 15.0, 25.0, 25.0),
                score: 0.8,
                class_id: 0,
            },
            ScoredBox {
                box2d: bx(30.0, 30.0, 40.0, 40.0),
                score: 0.7,
                class_id: 0,
            },
        ]];
        let r = evaluate_map(&dets, &gts, &[0.5]).unwrap();
        assert!((r.ap50 - 5.0 / 6.0).abs() < 1e-12, "ap = {}", r.ap50);
    }

    #[test]
    fn duplicate_detection_never_increases_ap() {
        let gts = vec![gt_one(0, bx(0.0, 0.0, 10.0, 10.0))];
        let base = vec![vec![ScoredBox {
            box2d: bx(0.0, 0.0, 10.0, 10.0),
            score: 0.9,
            class_id: 0,
        }]];
        let r0 = evaluate_map(&base, &gts, &[0.5]).unwrap();
        let mut with_dup = base.clone();
        with_dup[0].push(ScoredBox {
            box2d: bx(0.5, 0.0, 10.0, 10.0),
            score: 0.8,
            class_id: 0,
        });
        let r1 = evaluate_map(&with_dup, &gts, &[0.5]).unwrap();
        assert!(r1.ap50 <= r0.ap50 + 1e-12);
    }

    #[test]
    fn map_monotone_in_threshold() {
        let gts = vec![gt_one(0, bx(0.0, 0.0, 10.0, 10.0))];
        let dets = vec![vec![ScoredBox {
            box2d: bx(1.0, 1.0, 10.0, 10.0),
            score: 0.9,
            class_id: 0,
        }]];
        let mut prev = f64::INFINITY;
        for t in coco_thresholds() {
            let r = evaluate_map(&dets, &gts, &[t]).unwrap();
            assert!(r.map_50_95 <= prev + 1e-12);
            prev = r.map_50_95;
        }
    }

    #[test]
    fn absent_classes_are_excluded() {
        // detections of class 1 exist but GT has only class 0
        let gts = vec![gt_one(0, bx(0.0, 0.0, 10.0, 10.0))];
        let dets = vec![vec![
            ScoredBox {
                box2d: bx(0.0, 0.0, 10.0, 10.0),
                score: 0.9,
                class_id: 0,
            },
            ScoredBox {
                box2d: bx(0.0, 0.0, 10.0, 10.0),
                score: 0.9,
                class_id: 1,
            },
        ]];
        let r = evaluate_map(&dets, &gts, &[0.5]).unwrap();
        assert!((r.ap50 - 1.0).abs() < 1e-12);
        assert_eq!(r.per_class.len(), 1);
    }
}
