//! Mean average precision over a detection split, plus the prediction dump
//! format consumed by `eval` and `report`.

use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::boxes::{iou, Detection, GtBox};

/// Precision-recall curve and all-point interpolated AP for one class.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ClassAp {
    /// None when the class has no ground truth in the split (undefined AP).
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapResult {
    pub per_class: Vec<ClassAp>,
    /// Mean over classes with ground truth; 0 when no class has any.
    pub map: f64,
}

/// Greedy-matched, all-point interpolated AP at a fixed IoU threshold.
///
/// Predictions are visited in descending score with ties broken by
/// (image index, in-image index); each ground-truth box can match at most
/// one prediction. A prediction whose best-overlap ground truth is already
/// taken counts as a false positive.
pub fn evaluate_map(
    predictions: &[Vec<Detection>],
    ground_truth: &[Vec<GtBox>],
    num_classes: usize,
    iou_threshold: f64,
) -> MapResult {
    assert_eq!(
        predictions.len(),
        ground_truth.len(),
        "predictions and ground truth must cover the same images"
    );
    let mut per_class = Vec::with_capacity(num_classes);
    for class_id in 0..num_classes {
        per_class.push(class_ap(predictions, ground_truth, class_id, iou_threshold));
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    MapResult { per_class, map }
}

fn class_ap(
    predictions: &[Vec<Detection>],
    ground_truth: &[Vec<GtBox>],
    class_id: usize,
    iou_threshold: f64,
) -> ClassAp {
    let num_gt: usize = ground_truth
        .iter()
        .map(|g| g.iter().filter(|b| b.class_id == class_id).count())
        .sum();
    if num_gt == 0 {
        return ClassAp { ap: None, num_gt: 0, precision: vec![], recall: vec![] };
    }

    // (score, image, in-image index) with a stable global order.
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    for (img, preds) in predictions.iter().enumerate() {
        for (idx, d) in preds.iter().enumerate() {
            if d.class_id == class_id {
                dets.push((d.score, img, idx));
            }
        }
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut matched: Vec<Vec<bool>> = ground_truth
        .iter()
        .map(|g| vec![false; g.len()])
        .collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (_, img, idx) in dets {
        let pred = &predictions[img][idx];
        let mut best = f64::NEG_INFINITY;
        let mut best_gt = None;
        for (gi, gt) in ground_truth[img].iter().enumerate() {
            if gt.class_id != class_id {
                continue;
            }
            let ov = iou(&pred.bbox, &gt.bbox);
            if ov > best {
                best = ov;
                best_gt = Some(gi);
            }
        }
        match best_gt {
            Some(gi) if best >= iou_threshold && !matched[img][gi] => {
                matched[img][gi] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }

    let ap = all_point_ap(&precision, &recall);
    ClassAp { ap: Some(ap), num_gt, precision, recall }
}

/// Area under the precision envelope over recall (VOC all-point method).
fn all_point_ap(precision: &[f64], recall: &[f64]) -> f64 {
    if precision.is_empty() {
        return 0.0;
    }
    // Monotone non-increasing envelope from the right.
    let mut env = precision.to_vec();
    for i in (0..env.len() - 1).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..env.len() {
        let r = recall[i];
        if r > prev_r {
            ap += (r - prev_r) * env[i];
            prev_r = r;
        }
    }
    ap
}

/// One line of the prediction dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: u64,
    pub detections: Vec<Detection>,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> std::io::Result<()> {
    let mut out = Vec::new();
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)
}

pub fn read_predictions(path: &Path) -> std::io::Result<Vec<PredictionRecord>> {
    let f = fs::File::open(path)?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| {
            let l = l?;
            serde_json::from_str(&l).map_err(std::io::Error::other)
        })
        .collect()
}
