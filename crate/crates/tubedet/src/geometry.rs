//! Boxes, tubelets, anchor cuboids, overlap measures, regression coding,
//! tubelet NMS, and ground-truth assignment for proposal training.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in pixel coordinates, corners (x1,y1) top-left and
/// (x2,y2) bottom-right, x2 > x1 and y2 > y1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center_size(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox { x1: cx - w / 2.0, y1: cy - h / 2.0, x2: cx + w / 2.0, y2: cy + h / 2.0 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }
}

/// |a ∩ b| / |a ∪ b|; disjoint or merely touching boxes give 0.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// A sequence of per-frame boxes over one clip, with detection scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Tubelet {
    pub boxes: Vec<BBox>,
    pub actionness: f64,
    pub class_scores: Option<Vec<f64>>,
    pub clip_index: usize,
}

impl Tubelet {
    pub fn new(boxes: Vec<BBox>, actionness: f64, clip_index: usize) -> Tubelet {
        Tubelet { boxes, actionness, class_scores: None, clip_index }
    }

    /// A cuboid: the same box replicated over all T frames.
    pub fn cuboid(b: BBox, t: usize, actionness: f64, clip_index: usize) -> Tubelet {
        Tubelet { boxes: vec![b; t], actionness, class_scores: None, clip_index }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Mean per-frame IoU across the clip.
pub fn tubelet_iou(a: &Tubelet, b: &Tubelet) -> Result<f64> {
    if a.boxes.len() != b.boxes.len() || a.boxes.is_empty() {
        return Err(Error::shape(
            "tubelet_iou",
            format!("lengths {} vs {}", a.boxes.len(), b.boxes.len()),
        ));
    }
    let sum: f64 = a.boxes.iter().zip(b.boxes.iter()).map(|(x, y)| box_iou(x, y)).sum();
    Ok(sum / a.boxes.len() as f64)
}

/// Layout of anchor cuboids over a feature map. Anchors are enumerated
/// row-major over cells, then scales, then ratios; downstream head outputs
/// use the same order.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub feature_height: usize,
    pub feature_width: usize,
    pub stride: usize,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub t: usize,
}

impl AnchorGrid {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    pub fn total(&self) -> usize {
        self.feature_height * self.feature_width * self.anchors_per_cell()
    }
}

/// One anchor per (cell, scale, ratio): the box is centered on the cell
/// center in pixels, width = scale·√ratio, height = scale/√ratio, and is
/// identical across the clip's T frames. Boxes may extend past the image;
/// clipping happens at decode time.
pub fn generate_anchors(grid: &AnchorGrid) -> Vec<Tubelet> {
    let mut out = Vec::with_capacity(grid.total());
    for y in 0..grid.feature_height {
        for x in 0..grid.feature_width {
            let cx = (x as f64 + 0.5) * grid.stride as f64;
            let cy = (y as f64 + 0.5) * grid.stride as f64;
            for &scale in &grid.scales {
                for &ratio in &grid.aspect_ratios {
                    let w = scale * ratio.sqrt();
                    let h = scale / ratio.sqrt();
                    out.push(Tubelet::cuboid(BBox::from_center_size(cx, cy, w, h), grid.t, 0.0, 0));
                }
            }
        }
    }
    out
}

/// Per-frame (tx, ty, tw, th) regression targets taking the anchor box to
/// the ground-truth box, flattened to 4T values.
pub fn encode_targets(anchor: &Tubelet, gt: &Tubelet) -> Result<Tensor> {
    if anchor.boxes.len() != gt.boxes.len() {
        return Err(Error::shape(
            "encode_targets",
            format!("lengths {} vs {}", anchor.boxes.len(), gt.boxes.len()),
        ));
    }
    let t = anchor.boxes.len();
    let mut data = Vec::with_capacity(4 * t);
    for (ab, gb) in anchor.boxes.iter().zip(gt.boxes.iter()) {
        let (wa, ha) = (ab.width(), ab.height());
        if wa <= 0.0 || ha <= 0.0 {
            return Err(Error::invalid("encode_targets", "degenerate anchor box"));
        }
        let (cxa, cya) = ab.center();
        let (cxg, cyg) = gb.center();
        data.push((cxg - cxa) / wa);
        data.push((cyg - cya) / ha);
        data.push((gb.width() / wa).ln());
        data.push((gb.height() / ha).ln());
    }
    Tensor::from_vec(&[4 * t], data)
}

/// Inverse of `encode_targets`: apply per-frame deltas to the anchor, then
/// clip each box to the image and clamp degenerate sides to 1 pixel.
pub fn decode_boxes(
    anchor: &Tubelet,
    deltas: &[f64],
    image_w: f64,
    image_h: f64,
) -> Result<Tubelet> {
    let t = anchor.boxes.len();
    if deltas.len() != 4 * t {
        return Err(Error::shape(
            "decode_boxes",
            format!("{} deltas for T={}", deltas.len(), t),
        ));
    }
    let mut boxes = Vec::with_capacity(t);
    for (i, ab) in anchor.boxes.iter().enumerate() {
        let (tx, ty, tw, th) = (deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]);
        let (cxa, cya) = ab.center();
        let cx = cxa + tx * ab.width();
        let cy = cya + ty * ab.height();
        let w = ab.width() * tw.exp();
        let h = ab.height() * th.exp();
        let mut b = BBox::from_center_size(cx, cy, w, h);
        b.x1 = b.x1.clamp(0.0, image_w);
        b.x2 = b.x2.clamp(0.0, image_w);
        b.y1 = b.y1.clamp(0.0, image_h);
        b.y2 = b.y2.clamp(0.0, image_h);
        if b.x2 - b.x1 < 1.0 {
            b.x1 = b.x1.min(image_w - 1.0).max(0.0);
            b.x2 = b.x1 + 1.0;
        }
        if b.y2 - b.y1 < 1.0 {
            b.y1 = b.y1.min(image_h - 1.0).max(0.0);
            b.y2 = b.y1 + 1.0;
        }
        boxes.push(b);
    }
    Ok(Tubelet { boxes, actionness: anchor.actionness, class_scores: None, clip_index: anchor.clip_index })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
}

/// Training labels for one clip's anchor set.
#[derive(Debug, Clone)]
pub struct AnchorAssignment {
    pub labels: Vec<AnchorLabel>,
    pub matched_gt: Vec<Option<usize>>,
    /// Present exactly for positive anchors.
    pub regression_targets: Vec<Option<Tensor>>,
}

impl AnchorAssignment {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == AnchorLabel::Positive)
            .map(|(i, _)| i)
    }
}

/// Anchor labeling for proposal training.
///
/// Two rules make an anchor positive: (a) tubelet IoU above 0.5 with some
/// ground truth, and (b) being the best-overlap anchor for a ground truth,
/// which keeps every ground truth represented even when no anchor clears
/// the threshold. Rule (b) claims a distinct anchor per ground truth
/// (processed in index order, ties to the lowest anchor index), and a
/// claimed anchor is matched to the ground truth that claimed it; other
/// positives match their own best-overlap ground truth.
pub fn assign_labels(anchors: &[Tubelet], gts: &[Tubelet]) -> Result<AnchorAssignment> {
    let n = anchors.len();
    if gts.is_empty() {
        return Ok(AnchorAssignment {
            labels: vec![AnchorLabel::Negative; n],
            matched_gt: vec![None; n],
            regression_targets: vec![None; n],
        });
    }
    if gts.len() > n {
        return Err(Error::invalid(
            "assign_labels",
            format!("{} ground truths but only {} anchors", gts.len(), n),
        ));
    }

    let mut iou = vec![0.0f64; n * gts.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            iou[a * gts.len() + g] = tubelet_iou(anchor, gt)?;
        }
    }

    // Rule (b): one distinct anchor per ground truth.
    let mut claimed: Vec<Option<usize>> = vec![None; n];
    for g in 0..gts.len() {
        let mut best: Option<(usize, f64)> = None;
        for a in 0..n {
            if claimed[a].is_some() {
                continue;
            }
            let v = iou[a * gts.len() + g];
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((a, v));
            }
        }
        let (a, _) = best.expect("gts.len() <= n leaves an unclaimed anchor");
        claimed[a] = Some(g);
    }

    let mut labels = vec![AnchorLabel::Negative; n];
    let mut matched_gt = vec![None; n];
    let mut regression_targets: Vec<Option<Tensor>> = vec![None; n];
    for a in 0..n {
        let matched = if let Some(g) = claimed[a] {
            Some(g)
        } else {
            let mut best = (0usize, iou[a * gts.len()]);
            for g in 1..gts.len() {
                let v = iou[a * gts.len() + g];
                if v > best.1 {
                    best = (g, v);
                }
            }
            (best.1 > 0.5).then_some(best.0)
        };
        if let Some(g) = matched {
            labels[a] = AnchorLabel::Positive;
            matched_gt[a] = Some(g);
            regression_targets[a] = Some(encode_targets(&anchors[a], &gts[g])?);
        }
    }
    Ok(AnchorAssignment { labels, matched_gt, regression_targets })
}

/// Greedy tubelet NMS: keep in descending actionness order (ties to the
/// lower original index), suppressing anything with tubelet IoU above the
/// threshold against an already-kept tubelet; stop at keep_top survivors.
pub fn nms_tubelets(tubelets: &[Tubelet], iou_threshold: f64, keep_top: usize) -> Result<Vec<Tubelet>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid("nms_tubelets", format!("threshold {}", iou_threshold)));
    }
    let mut order: Vec<usize> = (0..tubelets.len()).collect();
    order.sort_by(|&a, &b| {
        tubelets[b]
            .actionness
            .partial_cmp(&tubelets[a].actionness)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.len() >= keep_top {
            break;
        }
        let mut suppressed = false;
        for &k in &kept {
            if tubelet_iou(&tubelets[i], &tubelets[k])? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept.into_iter().map(|i| tubelets[i].clone()).collect())
}
