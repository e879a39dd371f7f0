//! Detection geometry and region machinery: anchors, box coding, overlap
//! measures, greedy NMS, RPN target assignment, proposal generation, and
//! ROI sampling for the position-sensitive head.
//!
//! Boxes use continuous corner coordinates with an exclusive upper edge,
//! so area = (x2-x1)*(y2-y1) with x2 > x1, y2 > y1.

use crate::error::{Error, Result};
use crate::tape::{Roi, Tape, TensorId};
use crate::tensor::Scalar;
use rand::Rng;

/// Axis-aligned box in preprocessed-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    /// Clip to [0,w] x [0,h]; the result may be degenerate (area <= 0).
    pub fn clip(&self, w: f32, h: f32) -> BBox {
        BBox {
            x1: self.x1.max(0.0).min(w),
            y1: self.y1.max(0.0).min(h),
            x2: self.x2.max(0.0).min(w),
            y2: self.y2.max(0.0).min(h),
        }
    }

    pub fn translated(&self, dx: f32, dy: f32) -> BBox {
        BBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    pub fn to_roi(&self, batch: usize) -> Roi {
        Roi { batch, x1: self.x1 as f64, y1: self.y1 as f64, x2: self.x2 as f64, y2: self.y2 as f64 }
    }
}

/// A scored box.
#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f32,
}

fn intersection_area(a: &BBox, b: &BBox) -> f32 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Intersection over the detected box's area.
pub fn iobb(gt: &BBox, det: &BBox) -> f32 {
    let inter = intersection_area(gt, det);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / det.area()
}

/// Anchor grid specification: `scales` are the square root of anchor area
/// in pixels, `ratios` are height/width.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub scales: Vec<f32>,
    pub ratios: Vec<f32>,
    pub stride: usize,
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(Error::invalid("AnchorConfig", "stride must be >= 1"));
        }
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(Error::invalid("AnchorConfig", "scales and ratios must be non-empty"));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("AnchorConfig", format!("scales must be strictly increasing: {:?}", self.scales)));
        }
        Ok(())
    }

    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// One anchor per (scale, ratio) at every feature cell center
/// ((j+0.5)*stride, (i+0.5)*stride), emitted in row-major cell order,
/// scale-major then ratio within a cell. An anchor of scale s and ratio
/// r=h/w has area s^2: w = s/sqrt(r), h = s*sqrt(r).
pub fn generate_anchors(cfg: &AnchorConfig, feat_h: usize, feat_w: usize) -> Vec<BBox> {
    let mut anchors = Vec::with_capacity(feat_h * feat_w * cfg.per_cell());
    for i in 0..feat_h {
        let cy = (i as f32 + 0.5) * cfg.stride as f32;
        for j in 0..feat_w {
            let cx = (j as f32 + 0.5) * cfg.stride as f32;
            for &scale in &cfg.scales {
                for &ratio in &cfg.ratios {
                    let w = scale / ratio.sqrt();
                    let h = scale * ratio.sqrt();
                    anchors.push(BBox::new(cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5));
                }
            }
        }
    }
    anchors
}

/// (tx, ty, tw, th): center offsets normalized by anchor size, log size ratios.
pub fn encode_bbox(gt: &BBox, anchor: &BBox) -> [f32; 4] {
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    let (gw, gh) = (gt.width(), gt.height());
    let (aw, ah) = (anchor.width(), anchor.height());
    [(gx - ax) / aw, (gy - ay) / ah, (gw / aw).ln(), (gh / ah).ln()]
}

/// Algebraic inverse of [`encode_bbox`]; unclipped. Callers clip to the
/// image and discard boxes that become degenerate.
pub fn decode_bbox(deltas: &[f32; 4], anchor: &BBox) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas[0] * aw;
    let cy = ay + deltas[1] * ah;
    let w = aw * deltas[2].exp();
    let h = ah * deltas[3].exp();
    BBox::new(cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5)
}

/// Greedy non-maximum suppression: repeatedly keep the highest-score
/// detection and drop everything with IoU strictly above `overlap_thresh`
/// against it. Output is sorted by score descending; equal scores keep
/// their input order.
pub fn nms(dets: &[Detection], overlap_thresh: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).expect("finite scores"));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) > overlap_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Anchor label: 1 positive, 0 negative, -1 ignored.
#[derive(Clone, Debug)]
pub struct RpnTargets {
    pub labels: Vec<i64>,
    pub bbox_targets: Vec<[f32; 4]>,
}

/// RPN assignment parameters; thresholds follow the common region-proposal
/// convention and are surfaced in the model configuration.
#[derive(Clone, Copy, Debug)]
pub struct RpnAssignConfig {
    pub positive_iou: f32,
    pub negative_iou: f32,
    pub batch_size: usize,
    pub max_positive_fraction: f32,
}

impl Default for RpnAssignConfig {
    fn default() -> Self {
        RpnAssignConfig { positive_iou: 0.7, negative_iou: 0.3, batch_size: 256, max_positive_fraction: 0.5 }
    }
}

/// Label anchors against ground truth: boundary-crossing anchors are
/// excluded, positives are anchors with IoU >= positive_iou or the argmax
/// anchor of some gt, negatives have max IoU < negative_iou, and at most
/// `batch_size` anchors stay labeled after subsampling (positives capped
/// at `max_positive_fraction` of the batch). With no gt boxes every
/// sampled anchor is negative.
pub fn assign_rpn_targets(
    anchors: &[BBox],
    gt_boxes: &[BBox],
    image_size: (f32, f32),
    cfg: &RpnAssignConfig,
    rng: &mut impl Rng,
) -> RpnTargets {
    let (img_w, img_h) = image_size;
    let n = anchors.len();
    let mut labels = vec![-1i64; n];
    let mut bbox_targets = vec![[0.0f32; 4]; n];

    let inside: Vec<usize> = (0..n)
        .filter(|&i| {
            let a = &anchors[i];
            a.x1 >= 0.0 && a.y1 >= 0.0 && a.x2 <= img_w && a.y2 <= img_h
        })
        .collect();

    if gt_boxes.is_empty() {
        for &i in &inside {
            labels[i] = 0;
        }
    } else {
        let mut best_gt = vec![0usize; n];
        let mut best_iou = vec![0.0f32; n];
        let mut gt_max = vec![0.0f32; gt_boxes.len()];
        for &i in &inside {
            for (g, gt) in gt_boxes.iter().enumerate() {
                let v = iou(&anchors[i], gt);
                if v > best_iou[i] {
                    best_iou[i] = v;
                    best_gt[i] = g;
                }
                if v > gt_max[g] {
                    gt_max[g] = v;
                }
            }
        }
        for &i in &inside {
            if best_iou[i] < cfg.negative_iou {
                labels[i] = 0;
            }
            if best_iou[i] >= cfg.positive_iou {
                labels[i] = 1;
            }
        }
        // argmax rule: every anchor tied at a gt's best overlap is positive
        for (g, gt) in gt_boxes.iter().enumerate() {
            if gt_max[g] <= 0.0 {
                continue;
            }
            for &i in &inside {
                if iou(&anchors[i], gt) == gt_max[g] {
                    labels[i] = 1;
                    if gt_max[g] > best_iou[i] || best_iou[i] == gt_max[g] {
                        best_gt[i] = g;
                    }
                }
            }
        }
        for &i in &inside {
            if labels[i] == 1 {
                bbox_targets[i] = encode_bbox(&gt_boxes[best_gt[i]], &anchors[i]);
            }
        }
    }

    let max_pos = (cfg.batch_size as f32 * cfg.max_positive_fraction) as usize;
    subsample_labels(&mut labels, 1, max_pos, rng);
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    subsample_labels(&mut labels, 0, cfg.batch_size.saturating_sub(n_pos), rng);

    RpnTargets { labels, bbox_targets }
}

/// Randomly demote labels equal to `value` down to `keep` of them.
fn subsample_labels(labels: &mut [i64], value: i64, keep: usize, rng: &mut impl Rng) {
    let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == value).collect();
    if idx.len() <= keep {
        return;
    }
    // partial Fisher-Yates: the first `keep` entries are the survivors
    for i in 0..keep {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    for &i in &idx[keep..] {
        labels[i] = -1;
    }
}

/// Proposal generation parameters.
#[derive(Clone, Copy, Debug)]
pub struct ProposalConfig {
    pub pre_nms_n: usize,
    pub post_nms_n: usize,
    pub nms_thresh: f32,
    pub min_size: f32,
}

impl ProposalConfig {
    pub fn train_default() -> Self {
        ProposalConfig { pre_nms_n: 6000, post_nms_n: 2000, nms_thresh: 0.7, min_size: 4.0 }
    }

    pub fn test_default() -> Self {
        ProposalConfig { pre_nms_n: 3000, post_nms_n: 300, nms_thresh: 0.7, min_size: 4.0 }
    }

    pub fn train_desk() -> Self {
        ProposalConfig { post_nms_n: 600, pre_nms_n: 2000, ..Self::train_default() }
    }

    pub fn test_desk() -> Self {
        ProposalConfig { post_nms_n: 100, pre_nms_n: 600, ..Self::test_default() }
    }
}

/// Decode RPN outputs into proposal boxes: decode all deltas, clip to the
/// image, drop boxes with a side shorter than `min_size`, keep the
/// `pre_nms_n` best by score, suppress at `nms_thresh`, keep `post_nms_n`.
pub fn propose(
    scores: &[f32],
    deltas: &[[f32; 4]],
    anchors: &[BBox],
    image_size: (f32, f32),
    cfg: &ProposalConfig,
) -> Vec<BBox> {
    assert_eq!(scores.len(), anchors.len(), "one score per anchor");
    assert_eq!(deltas.len(), anchors.len(), "one delta row per anchor");
    let (img_w, img_h) = image_size;
    let mut cands: Vec<Detection> = Vec::with_capacity(anchors.len());
    for ((score, delta), anchor) in scores.iter().zip(deltas).zip(anchors) {
        let b = decode_bbox(delta, anchor).clip(img_w, img_h);
        if b.width() < cfg.min_size || b.height() < cfg.min_size {
            continue;
        }
        cands.push(Detection { bbox: b, score: *score });
    }
    cands.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    cands.truncate(cfg.pre_nms_n);
    let mut kept = nms(&cands, cfg.nms_thresh);
    kept.truncate(cfg.post_nms_n);
    kept.into_iter().map(|d| d.bbox).collect()
}

/// ROI sampling parameters for the detection head.
#[derive(Clone, Copy, Debug)]
pub struct RoiSampleConfig {
    pub rois_per_image: usize,
    pub fg_fraction: f32,
    pub fg_iou: f32,
    pub bg_iou_lo: f32,
    pub bg_iou_hi: f32,
}

impl Default for RoiSampleConfig {
    fn default() -> Self {
        RoiSampleConfig { rois_per_image: 128, fg_fraction: 0.25, fg_iou: 0.5, bg_iou_lo: 0.1, bg_iou_hi: 0.5 }
    }
}

/// Head training targets: label 0 = background, 1 = lesion.
#[derive(Clone, Debug)]
pub struct SampledRois {
    pub rois: Vec<BBox>,
    pub labels: Vec<i64>,
    pub bbox_targets: Vec<[f32; 4]>,
    pub bbox_inside: Vec<[f32; 4]>,
}

/// Sample head ROIs from proposals: ground-truth boxes are appended to the
/// proposal list, foreground is IoU >= fg_iou, background lies in
/// [bg_iou_lo, bg_iou_hi), and foreground is capped at fg_fraction of the
/// sample. When no foreground exists every sampled ROI is background.
pub fn sample_rois(
    proposals: &[BBox],
    gt_boxes: &[BBox],
    cfg: &RoiSampleConfig,
    rng: &mut impl Rng,
) -> SampledRois {
    let mut all: Vec<BBox> = proposals.to_vec();
    all.extend_from_slice(gt_boxes);

    let mut fg: Vec<(usize, usize)> = Vec::new(); // (roi index, matched gt)
    let mut bg: Vec<usize> = Vec::new();
    for (i, roi) in all.iter().enumerate() {
        let mut best = 0.0f32;
        let mut best_g = 0usize;
        for (g, gt) in gt_boxes.iter().enumerate() {
            let v = iou(roi, gt);
            if v > best {
                best = v;
                best_g = g;
            }
        }
        if !gt_boxes.is_empty() && best >= cfg.fg_iou {
            fg.push((i, best_g));
        } else if best >= cfg.bg_iou_lo && best < cfg.bg_iou_hi {
            bg.push(i);
        }
    }
    // If nothing qualifies as background, fall back to any non-foreground roi.
    if bg.is_empty() {
        let fg_set: Vec<usize> = fg.iter().map(|&(i, _)| i).collect();
        bg = (0..all.len()).filter(|i| !fg_set.contains(i)).collect();
    }

    let n_fg_wanted = ((cfg.rois_per_image as f32 * cfg.fg_fraction) as usize).min(fg.len());
    shuffle_prefix(&mut fg, n_fg_wanted, rng);
    fg.truncate(n_fg_wanted);
    let n_bg_wanted = (cfg.rois_per_image - n_fg_wanted).min(bg.len().max(usize::from(!bg.is_empty())));
    let n_bg_wanted = n_bg_wanted.min(bg.len());
    shuffle_prefix(&mut bg, n_bg_wanted, rng);
    bg.truncate(n_bg_wanted);

    let mut out = SampledRois { rois: Vec::new(), labels: Vec::new(), bbox_targets: Vec::new(), bbox_inside: Vec::new() };
    for &(i, g) in &fg {
        out.rois.push(all[i]);
        out.labels.push(1);
        out.bbox_targets.push(encode_bbox(&gt_boxes[g], &all[i]));
        out.bbox_inside.push([1.0; 4]);
    }
    for &i in &bg {
        out.rois.push(all[i]);
        out.labels.push(0);
        out.bbox_targets.push([0.0; 4]);
        out.bbox_inside.push([0.0; 4]);
    }
    out
}

fn shuffle_prefix<E>(items: &mut [E], keep: usize, rng: &mut impl Rng) {
    let n = items.len();
    if n <= keep {
        return;
    }
    for i in 0..keep {
        let j = rng.gen_range(i..n);
        items.swap(i, j);
    }
}

/// Position-sensitive ROI pooling on a tape; see `Tape::psroi_pool`.
/// ROI coordinates are image pixels and are divided by `stride` to land
/// on the feature map.
pub fn psroi_pool<T: Scalar>(
    tape: &mut Tape<T>,
    feature: TensorId,
    rois: &[BBox],
    grid: usize,
    stride: usize,
) -> Result<TensorId> {
    let rois: Vec<Roi> = rois.iter().map(|b| b.to_roi(0)).collect();
    tape.psroi_pool(feature, &rois, grid, stride)
}
