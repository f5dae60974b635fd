//! Detection evaluation: greedy IoU matching, all-point average precision
//! and mAP at fixed IoU thresholds.

use crate::boxes::{rotated_iou, OrientedBox};
use std::collections::BTreeSet;

/// Match detections (already sorted by descending score) against ground
/// truth of the same class: each detection takes the highest-IoU unmatched
/// ground-truth box if that IoU clears the threshold, ties broken by lower
/// ground-truth index; every ground-truth box is matched at most once.
/// Returns one TP/FP flag per detection, in input order.
pub fn match_detections(
    dets: &[&OrientedBox],
    gts: &[&OrientedBox],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for det in dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let iou = rotated_iou(det, gt);
            let better = match best {
                None => true,
                Some((_, best_iou)) => iou > best_iou,
            };
            if better {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= iou_threshold => {
                taken[gi] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    flags
}

/// Area under the precision-recall curve with the precision envelope
/// (all-point interpolation). Flags must be in descending score order.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // Precision envelope: p_env(r) = max precision at recall >= r.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precisions.iter().zip(&recalls) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// Per-class average precision and the mean over classes that appear in
/// the ground truth.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// (class id, AP, ground-truth count), ascending class id, restricted
    /// to classes with at least one ground-truth box.
    pub per_class: Vec<(usize, f64, usize)>,
    pub map: f64,
}

/// Evaluate at a single IoU threshold. Detections are sorted by descending
/// score internally (ties by input index); classes absent from the ground
/// truth are excluded from the mean.
pub fn evaluate_at(dets: &[OrientedBox], gts: &[OrientedBox], iou_threshold: f64) -> EvalReport {
    let classes: BTreeSet<usize> = gts.iter().filter_map(|g| g.class_id).collect();
    let mut per_class = Vec::with_capacity(classes.len());
    for &class in &classes {
        let class_gts: Vec<&OrientedBox> =
            gts.iter().filter(|g| g.class_id == Some(class)).collect();
        let mut class_dets: Vec<(usize, &OrientedBox)> = dets
            .iter()
            .enumerate()
            .filter(|(_, d)| d.class_id == Some(class))
            .collect();
        class_dets.sort_by(|(i, a), (j, b)| {
            let sa = a.score.unwrap_or(0.0);
            let sb = b.score.unwrap_or(0.0);
            sb.partial_cmp(&sa).unwrap().then(i.cmp(j))
        });
        let ordered: Vec<&OrientedBox> = class_dets.into_iter().map(|(_, d)| d).collect();
        let flags = match_detections(&ordered, &class_gts, iou_threshold);
        per_class.push((class, average_precision(&flags, class_gts.len()), class_gts.len()));
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, ap, _)| ap).sum::<f64>() / per_class.len() as f64
    };
    EvalReport { per_class, map }
}

/// mAP at one threshold.
pub fn map_at(dets: &[OrientedBox], gts: &[OrientedBox], iou_threshold: f64) -> f64 {
    evaluate_at(dets, gts, iou_threshold).map
}
