//! Proposal-stage and branch-stage losses: focal classification plus
//! smooth-L1 box regression, with the standard two-threshold anchor matching.

use super::boxes::{iou, BBox, GtBox};
use super::model::{encode_deltas, BranchOutput, DetectorError, RpnForward};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Anchor is positive when its best IoU reaches this.
    pub rpn_pos_iou: f64,
    /// Anchor is negative strictly below this; in between it is ignored.
    pub rpn_neg_iou: f64,
    /// Proposal-to-annotation matching threshold for branch losses.
    pub match_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            rpn_pos_iou: 0.5,
            rpn_neg_iou: 0.3,
            match_iou: 0.5,
        }
    }
}

/// A scalar loss term with its components broken out for logging.
pub struct LossValue {
    pub tensor: Tensor,
    pub cls: f64,
    pub reg: f64,
}

impl LossValue {
    pub fn total(&self) -> f64 {
        self.tensor.item()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum AnchorMatch {
    Pos(usize),
    Neg,
    Ignore,
}

fn match_anchors(anchors: &[BBox], gts: &[GtBox], pos_iou: f64, neg_iou: f64) -> Vec<AnchorMatch> {
    anchors
        .iter()
        .map(|a| {
            let mut best = 0.0;
            let mut best_gt = None;
            for (gi, gt) in gts.iter().enumerate() {
                let ov = iou(a, &gt.bbox);
                if ov > best {
                    best = ov;
                    best_gt = Some(gi);
                }
            }
            match best_gt {
                Some(gi) if best >= pos_iou => AnchorMatch::Pos(gi),
                _ if best < neg_iou => AnchorMatch::Neg,
                _ => AnchorMatch::Ignore,
            }
        })
        .collect()
}

/// Binary focal objectness loss over matched anchors plus smooth-L1 on the
/// positive anchors' box deltas. Empty annotations mean an all-negative
/// classification target and a zero regression term.
pub fn rpn_loss_on(rpn: &RpnForward, annotations: &[GtBox], cfg: &LossConfig) -> Result<LossValue, DetectorError> {
    let matches = match_anchors(&rpn.anchors, annotations, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
    let selected: Vec<usize> = matches
        .iter()
        .enumerate()
        .filter(|(_, m)| !matches!(m, AnchorMatch::Ignore))
        .map(|(i, _)| i)
        .collect();
    debug_assert!(!selected.is_empty(), "matching never ignores every anchor");

    let logits = rpn.obj_logits.gather_rows(&selected)?;
    let s = selected.len();
    let pos_mask: Vec<f64> = selected
        .iter()
        .map(|&i| if matches!(matches[i], AnchorMatch::Pos(_)) { 1.0 } else { 0.0 })
        .collect();
    let neg_mask: Vec<f64> = pos_mask.iter().map(|&m| 1.0 - m).collect();
    let pos_mask = Tensor::from_vec(&[s, 1], pos_mask, false)?;
    let neg_mask = Tensor::from_vec(&[s, 1], neg_mask, false)?;

    let p = logits.sigmoid();
    let ones = Tensor::ones(&[s, 1]);
    let one_minus_p = ones.sub(&p)?;
    // -alpha (1-p)^g log p on positives; -(1-alpha) p^g log(1-p) on negatives.
    let pos_term = one_minus_p
        .pow_scalar(cfg.focal_gamma)
        .mul(&p.log())?
        .scale(-cfg.focal_alpha);
    let neg_term = p
        .pow_scalar(cfg.focal_gamma)
        .mul(&one_minus_p.log())?
        .scale(-(1.0 - cfg.focal_alpha));
    let cls = pos_mask
        .mul(&pos_term)?
        .add(&neg_mask.mul(&neg_term)?)?
        .mean_all();

    let positives: Vec<usize> = selected
        .iter()
        .cloned()
        .filter(|&i| matches!(matches[i], AnchorMatch::Pos(_)))
        .collect();
    let reg = if positives.is_empty() {
        Tensor::scalar(0.0)
    } else {
        let pred = rpn.deltas.gather_rows(&positives)?;
        let mut targets = Vec::with_capacity(positives.len() * 4);
        for &i in &positives {
            let AnchorMatch::Pos(gi) = matches[i] else { unreachable!() };
            targets.extend(encode_deltas(&rpn.anchors[i], &annotations[gi].bbox));
        }
        let targets = Tensor::from_vec(&[positives.len(), 4], targets, false)?;
        pred.sub(&targets)?.smooth_l1().row_sum()?.mean_all()
    };

    let (cls_v, reg_v) = (cls.item(), reg.item());
    Ok(LossValue { tensor: cls.add(&reg)?, cls: cls_v, reg: reg_v })
}

/// Focal classification over C+1 classes plus smooth-L1 on proposals matched
/// to an annotation (IoU >= `match_iou`); unmatched proposals train as
/// background (class index C).
pub fn branch_loss(
    out: &BranchOutput,
    proposal_boxes: &[BBox],
    annotations: &[GtBox],
    num_classes: usize,
    cfg: &LossConfig,
) -> Result<LossValue, DetectorError> {
    let k = proposal_boxes.len();
    if out.class_logits.shape() != [k, num_classes + 1] || out.box_deltas.shape() != [k, 4] {
        return Err(DetectorError::Contract(format!(
            "branch output shapes {:?}/{:?} do not match {k} proposals",
            out.class_logits.shape(),
            out.box_deltas.shape()
        )));
    }
    let background = num_classes;
    let mut labels = vec![background; k];
    let mut matched_gt = vec![usize::MAX; k];
    for (i, pb) in proposal_boxes.iter().enumerate() {
        let mut best = 0.0;
        for (gi, gt) in annotations.iter().enumerate() {
            let ov = iou(pb, &gt.bbox);
            if ov > best {
                best = ov;
                if ov >= cfg.match_iou {
                    labels[i] = gt.class_id;
                    matched_gt[i] = gi;
                }
            }
        }
    }

    let log_probs = out.class_logits.log_softmax_rows()?;
    let lpy = log_probs.select_per_row(&labels)?;
    let py = lpy.exp();
    let focal_weight = Tensor::ones(&[k, 1]).sub(&py)?.pow_scalar(cfg.focal_gamma);
    let cls = focal_weight.mul(&lpy)?.scale(-cfg.focal_alpha).mean_all();

    let foreground: Vec<usize> = (0..k).filter(|&i| labels[i] != background).collect();
    let reg = if foreground.is_empty() {
        Tensor::scalar(0.0)
    } else {
        let pred = out.box_deltas.gather_rows(&foreground)?;
        let mut targets = Vec::with_capacity(foreground.len() * 4);
        for &i in &foreground {
            targets.extend(encode_deltas(&proposal_boxes[i], &annotations[matched_gt[i]].bbox));
        }
        let targets = Tensor::from_vec(&[foreground.len(), 4], targets, false)?;
        pred.sub(&targets)?.smooth_l1().row_sum()?.mean_all()
    };

    let (cls_v, reg_v) = (cls.item(), reg.item());
    Ok(LossValue { tensor: cls.add(&reg)?, cls: cls_v, reg: reg_v })
}
