//! Box arithmetic: IoU, anchor grids, delta codecs, NMS, horizontal flips.
//!
//! Coordinates are continuous and corner-exclusive: a box covers
//! `[x1, x2) x [y1, y2)` and its area is `(x2 - x1) * (y2 - y1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-space cap on decoded width/height ratios, `exp` of which bounds the
/// size blow-up of a decoded box at 1024x the anchor size. Wide enough that
/// the encode/decode roundtrip is exact for any size ratio the pipeline can
/// produce; tight enough that `exp` never overflows.
pub const DELTA_CLAMP: f64 = 6.931471805599453; // ln(1024)

/// Axis-aligned rectangle in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Box2D { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(b.invalid("coordinates must be finite"));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(b.invalid("requires x2 > x1 and y2 > y1"));
        }
        Ok(b)
    }

    fn invalid(&self, reason: &'static str) -> Error {
        Error::InvalidBox {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
            reason,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Intersect with `[0, w] x [0, h]`; `None` when nothing positive remains.
    pub fn clip(&self, w: f64, h: f64) -> Option<Box2D> {
        let x1 = self.x1.max(0.0).min(w);
        let y1 = self.y1.max(0.0).min(h);
        let x2 = self.x2.max(0.0).min(w);
        let y2 = self.y2.max(0.0).min(h);
        if x2 > x1 && y2 > y1 {
            Some(Box2D { x1, y1, x2, y2 })
        } else {
            None
        }
    }
}

/// Detection output record: box + confidence + class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub box2d: Box2D,
    pub score: f64,
    pub class_id: usize,
}

/// Box regression deltas (dx, dy, dw, dh).
pub type Delta4 = [f64; 4];

/// Intersection-over-union of two boxes; 0 when disjoint.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Encode `target` relative to `anchor`: center offsets normalized by anchor
/// size, log width/height ratios.
pub fn encode_deltas(anchor: &Box2D, target: &Box2D) -> Delta4 {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_deltas`]. dw/dh are clamped to `DELTA_CLAMP` before
/// exponentiation; when `clip` is given the result is intersected with the
/// image extent (`None` if nothing remains).
pub fn decode_deltas(anchor: &Box2D, deltas: &Delta4, clip: Option<(f64, f64)>) -> Option<Box2D> {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + deltas[0] * aw;
    let cy = acy + deltas[1] * ah;
    let w = aw * deltas[2].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let h = ah * deltas[3].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let b = Box2D {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    };
    match clip {
        Some((cw, ch)) => b.clip(cw, ch),
        None => Some(b),
    }
}

/// Greedy non-maximum suppression. Returns indices of kept boxes in
/// descending score order. Ties broken by lower original index.
pub fn nms(boxes: &[ScoredBox], iou_thresh: f64) -> Result<Vec<usize>> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "nms iou_thresh must be in (0, 1], got {iou_thresh}"
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j]
            .score
            .partial_cmp(&boxes[i].score)
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept
            .iter()
            .all(|&k| iou(&boxes[i].box2d, &boxes[k].box2d) <= iou_thresh)
        {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Mirror a box across the vertical center line of an image of `image_width`.
pub fn hflip_box(b: &Box2D, image_width: f64) -> Box2D {
    Box2D {
        x1: image_width - b.x2,
        y1: b.y1,
        x2: image_width - b.x1,
        y2: b.y2,
    }
}

/// Anchor layout: one feature level, `scales x aspects` anchors per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// Feature stride in pixels.
    pub stride: usize,
    /// Anchor sizes (sqrt of area) in pixels.
    pub scales: Vec<f64>,
    /// Width/height ratios.
    pub aspects: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec {
            stride: 8,
            scales: vec![12.0, 20.0, 32.0],
            aspects: vec![1.0, 1.5],
        }
    }
}

impl AnchorSpec {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspects.len()
    }
}

/// All anchors for one image, in (row, col, scale-major anchor index) order.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub anchors: Vec<Box2D>,
    pub cells_y: usize,
    pub cells_x: usize,
    pub spec: AnchorSpec,
}

impl AnchorGrid {
    /// Deterministic grid over an image divisible by the stride: anchors are
    /// centered on feature cells, ordered cell-major then (scale, aspect).
    pub fn generate(spec: &AnchorSpec, image_w: usize, image_h: usize) -> Result<AnchorGrid> {
        if image_w % spec.stride != 0 || image_h % spec.stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {image_w}x{image_h} not divisible by stride {}",
                spec.stride
            )));
        }
        let cells_x = image_w / spec.stride;
        let cells_y = image_h / spec.stride;
        let mut anchors = Vec::with_capacity(cells_x * cells_y * spec.anchors_per_cell());
        for cy in 0..cells_y {
            for cx in 0..cells_x {
                let px = (cx as f64 + 0.5) * spec.stride as f64;
                let py = (cy as f64 + 0.5) * spec.stride as f64;
                for &s in &spec.scales {
                    for &a in &spec.aspects {
                        let w = s * a.sqrt();
                        let h = s / a.sqrt();
                        anchors.push(Box2D {
                            x1: px - 0.5 * w,
                            y1: py - 0.5 * h,
                            x2: px + 0.5 * w,
                            y2: py + 0.5 * h,
                        });
                    }
                }
            }
        }
        Ok(AnchorGrid {
            anchors,
            cells_y,
            cells_x,
            spec: spec.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> Box2D {
        Box2D::new(x1, y1, x2, y2).unwrap()
    }

    /// Rasterized IoU: count subpixel cells inside each box on a fine grid.
    fn iou_raster(a: &Box2D, b: &Box2D, cells_per_unit: usize) -> f64 {
        let x_lo = a.x1.min(b.x1);
        let y_lo = a.y1.min(b.y1);
        let x_hi = a.x2.max(b.x2);
        let y_hi = a.y2.max(b.y2);
        let step = 1.0 / cells_per_unit as f64;
        let nx = ((x_hi - x_lo) / step).ceil() as usize;
        let ny = ((y_hi - y_lo) / step).ceil() as usize;
        let mut inter = 0u64;
        let mut union = 0u64;
        for iy in 0..ny {
            for ix in 0..nx {
                let x = x_lo + (ix as f64 + 0.5) * step;
                let y = y_lo + (iy as f64 + 0.5) * step;
                let in_a = x > a.x1 && x < a.x2 && y > a.y1 && y < a.y2;
                let in_b = x > b.x1 && x < b.x2 && y > b.y1 && y < b.y2;
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        inter as f64 / union as f64
    }

    /// O(n^2) greedy NMS reference, written independently of `nms`.
    fn nms_bruteforce(boxes: &[ScoredBox], thresh: f64) -> Vec<usize> {
        let mut alive: Vec<bool> = vec![true; boxes.len()];
        let mut kept = Vec::new();
        loop {
            // highest-scoring live box, lowest index on ties
            let mut best: Option<usize> = None;
            for i in 0..boxes.len() {
                if alive[i] {
                    match best {
                        None => best = Some(i),
                        Some(j) if boxes[i].score > boxes[j].score => best = Some(i),
                        _ => {}
                    }
                }
            }
            let Some(b) = best else { break };
            kept.push(b);
            alive[b] = false;
            for i in 0..boxes.len() {
                if alive[i] && iou(&boxes[i].box2d, &boxes[b].box2d) > thresh {
                    alive[i] = false;
                }
            }
        }
        kept
    }

    #[test]
    fn iou_identity_is_one() {
        let b = bx(1.0, 2.0, 5.0, 7.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 2.0, 3.0, 3.0)), 0.0);
    }

    #[test]
    fn iou_overlap_matches_raster_oracle() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        let b = bx(1.0, 1.0, 3.0, 3.0);
        let got = iou(&a, &b);
        assert!((got - 1.0 / 7.0).abs() < 1e-12);
        assert!((got - iou_raster(&a, &b, 64)).abs() < 2e-3);
    }

    #[test]
    fn encode_identity_is_zero() {
        let a = bx(3.0, 4.0, 13.0, 24.0);
        assert_eq!(encode_deltas(&a, &a), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_known_case() {
        let anchor = bx(0.0, 0.0, 10.0, 10.0);
        let target = bx(0.0, 0.0, 20.0, 10.0);
        let d = encode_deltas(&anchor, &target);
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert_eq!(d[1], 0.0);
        assert!((d[2] - 2.0_f64.ln()).abs() < 1e-12);
        assert_eq!(d[3], 0.0);
        let back = decode_deltas(&anchor, &d, None).unwrap();
        assert!((back.x2 - 20.0).abs() < 1e-9);
    }

    #[test]
    fn decode_zeros_is_anchor() {
        let a = bx(2.0, 3.0, 9.0, 11.0);
        let b = decode_deltas(&a, &[0.0; 4], None).unwrap();
        assert!((b.x1 - a.x1).abs() < 1e-12 && (b.y2 - a.y2).abs() < 1e-12);
    }

    #[test]
    fn decode_extreme_dw_is_clamped_finite() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = decode_deltas(&a, &[0.0, 0.0, 100.0, 100.0], None).unwrap();
        assert!(b.x1.is_finite() && b.x2.is_finite());
        assert!((b.width() - 10240.0).abs() < 1e-6); // 10 * exp(DELTA_CLAMP)
    }

    #[test]
    fn nms_single_box() {
        let boxes = vec![ScoredBox {
            box2d: bx(0.0, 0.0, 1.0, 1.0),
            score: 0.5,
            class_id: 0,
        }];
        assert_eq!(nms(&boxes, 0.5).unwrap(), vec![0]);
    }

    #[test]
    fn nms_identical_boxes_keeps_highest() {
        let b = bx(0.0, 0.0, 4.0, 4.0);
        let boxes = vec![
            ScoredBox {
                box2d: b,
                score: 0.8,
                class_id: 0,
            },
            ScoredBox {
                box2d: b,
                score: 0.9,
                class_id: 0,
            },
        ];
        assert_eq!(nms(&boxes, 0.5).unwrap(), vec![1]);
    }

    #[test]
    fn nms_rejects_bad_threshold() {
        assert!(nms(&[], 0.0).is_err());
        assert!(nms(&[], 1.5).is_err());
    }

    #[test]
    fn hflip_known_case() {
        let b = hflip_box(&bx(0.0, 0.0, 2.0, 2.0), 10.0);
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (8.0, 0.0, 10.0, 2.0));
    }

    #[test]
    fn hflip_centered_box_is_fixed_point() {
        let b = bx(3.0, 1.0, 7.0, 5.0); // centered in width 10
        assert_eq!(hflip_box(&b, 10.0), b);
    }

    #[test]
    fn anchor_grid_is_deterministic_and_sized() {
        let spec = AnchorSpec::default();
        let g1 = AnchorGrid::generate(&spec, 64, 64).unwrap();
        let g2 = AnchorGrid::generate(&spec, 64, 64).unwrap();
        assert_eq!(g1.len(), 8 * 8 * 6);
        assert_eq!(g1.anchors, g2.anchors);
        assert!(AnchorGrid::generate(&spec, 63, 64).is_err());
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            ax in 0.0..50.0f64, ay in 0.0..50.0f64, aw in 0.5..30.0f64, ah in 0.5..30.0f64,
            bx_ in 0.0..50.0f64, by in 0.0..50.0f64, bw in 0.5..30.0f64, bh in 0.5..30.0f64,
        ) {
            let a = bx(ax, ay, ax + aw, ay + ah);
            let b = bx(bx_, by, bx_ + bw, by + bh);
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn delta_codec_roundtrip(
            ax in -100.0..100.0f64, ay in -100.0..100.0f64,
            aw in 1.0..1000.0f64, ah in 1.0..1000.0f64,
            tx in -100.0..100.0f64, ty in -100.0..100.0f64,
            tw in 1.0..1000.0f64, th in 1.0..1000.0f64,
        ) {
            let anchor = bx(ax, ay, ax + aw, ay + ah);
            let target = bx(tx, ty, tx + tw, ty + th);
            let d = encode_deltas(&anchor, &target);
            let back = decode_deltas(&anchor, &d, None).unwrap();
            let scale = tw.max(th).max(tx.abs()).max(ty.abs()).max(1.0);
            prop_assert!((back.x1 - target.x1).abs() / scale < 1e-9);
            prop_assert!((back.y1 - target.y1).abs() / scale < 1e-9);
            prop_assert!((back.x2 - target.x2).abs() / scale < 1e-9);
            prop_assert!((back.y2 - target.y2).abs() / scale < 1e-9);
        }

        #[test]
        fn nms_matches_bruteforce(n in 0usize..64, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::seeding::rng_for(seed, 0, crate::seeding::Stream::Fixture, 0);
            let boxes: Vec<ScoredBox> = (0..n).map(|_| {
                let x1: f64 = rng.random_range(0.0..40.0);
                let y1: f64 = rng.random_range(0.0..40.0);
                ScoredBox {
                    box2d: bx(x1, y1, x1 + rng.random_range(1.0..20.0), y1 + rng.random_range(1.0..20.0)),
                    score: rng.random_range(0.0..1.0),
                    class_id: 0,
                }
            }).collect();
            prop_assert_eq!(nms(&boxes, 0.5).unwrap(), nms_bruteforce(&boxes, 0.5));
        }

        #[test]
        fn hflip_involution_preserves_area(
            x1 in 0.0..30.0f64, y1 in 0.0..30.0f64, w in 0.5..20.0f64, h in 0.5..20.0f64,
        ) {
            let b = bx(x1, y1, x1 + w, y1 + h);
            let width = 64.0;
            let back = hflip_box(&hflip_box(&b, width), width);
            prop_assert!((back.x1 - b.x1).abs() < 1e-12);
            prop_assert!((back.x2 - b.x2).abs() < 1e-12);
            prop_assert!((hflip_box(&b, width).area() - b.area()).abs() < 1e-9);
        }
    }
}
