//! Axis-aligned boxes, IoU, and greedy per-class non-maximum suppression.

use serde::{Deserialize, Serialize};

/// Top-left corner plus extents, in pixels. Valid boxes have w > 0, h > 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "degenerate box {w}x{h}");
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }
}

/// Intersection over union in [0,1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let iy = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Ground-truth annotation: a box with its class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
}

/// A scored, classified box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

/// Greedy per-class NMS. Candidates are visited in descending score
/// (ties broken by ascending input index); a kept box suppresses later
/// same-class boxes whose IoU exceeds the threshold. Output preserves that
/// visit order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    'outer: for &i in &order {
        for &k in &kept {
            if detections[k].class_id == detections[i].class_id
                && iou(&detections[k].bbox, &detections[i].bbox) > iou_threshold
            {
                continue 'outer;
            }
        }
        kept.push(i);
    }
    kept.into_iter().map(|i| detections[i]).collect()
}
