//! Panoptic quality: per-class TP/FP/FN with IoU sums, finalized into
//! PQ, SQ, and RQ.
//!
//! Segments of the same class match when their IoU exceeds 0.5, which
//! makes the match unique. Ground-truth void is excluded from unions and
//! predictions mostly covered by void are exempt from false positives.
//! Crowd/ignore instances are not modeled.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::PanopticSegmentation;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

/// Accumulated matching statistics keyed by class id. Accumulation over
/// images is additive and order-independent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub per_class: BTreeMap<u32, ClassStats>,
}

impl PqStats {
    pub fn merge(&mut self, other: &PqStats) {
        for (&class, stats) in &other.per_class {
            let entry = self.per_class.entry(class).or_default();
            entry.tp += stats.tp;
            entry.fp += stats.fp;
            entry.fn_ += stats.fn_;
            entry.iou_sum += stats.iou_sum;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PqScores {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// Finalized metrics: per-class scores plus the mean over the requested
/// subset (classes never seen in either map are excluded from the mean).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PqReport {
    pub per_class: BTreeMap<u32, PqScores>,
    pub mean: PqScores,
    /// Classes that actually entered the mean.
    pub counted_classes: Vec<u32>,
}

/// Accumulates matching statistics of `pred` against `gt` into `stats`.
pub fn pq_accumulate(
    pred: &PanopticSegmentation,
    gt: &PanopticSegmentation,
    stats: &mut PqStats,
) -> Result<()> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::validation(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    pred.validate()?;
    gt.validate()?;

    // joint intersection histogram, gt id 0 = void
    let mut intersections: HashMap<(u32, u32), u64> = HashMap::new();
    for (&p, &g) in pred.id_map.data().iter().zip(gt.id_map.data()) {
        *intersections.entry((p, g)).or_insert(0) += 1;
    }

    let pred_class: HashMap<u32, u32> = pred
        .table
        .entries
        .iter()
        .map(|e| (e.segment_id, e.class_id))
        .collect();
    let gt_class: HashMap<u32, u32> = gt
        .table
        .entries
        .iter()
        .map(|e| (e.segment_id, e.class_id))
        .collect();
    let pred_area: HashMap<u32, u64> = pred
        .table
        .entries
        .iter()
        .map(|e| (e.segment_id, e.area))
        .collect();
    let gt_area: HashMap<u32, u64> = gt
        .table
        .entries
        .iter()
        .map(|e| (e.segment_id, e.area))
        .collect();

    let mut matched_pred = std::collections::HashSet::new();
    let mut matched_gt = std::collections::HashSet::new();
    for (&(p, g), &inter) in &intersections {
        if p == 0 || g == 0 {
            continue;
        }
        if pred_class[&p] != gt_class[&g] {
            continue;
        }
        let void_overlap = intersections.get(&(p, 0)).copied().unwrap_or(0);
        let union = pred_area[&p] + gt_area[&g] - inter - void_overlap;
        let iou = inter as f64 / union as f64;
        if iou > 0.5 {
            matched_pred.insert(p);
            matched_gt.insert(g);
            let entry = stats.per_class.entry(pred_class[&p]).or_default();
            entry.tp += 1;
            entry.iou_sum += iou;
        }
    }

    for e in &gt.table.entries {
        if !matched_gt.contains(&e.segment_id) {
            stats.per_class.entry(e.class_id).or_default().fn_ += 1;
        }
    }
    for e in &pred.table.entries {
        if matched_pred.contains(&e.segment_id) {
            continue;
        }
        let void_overlap = intersections.get(&(e.segment_id, 0)).copied().unwrap_or(0);
        if void_overlap as f64 > 0.5 * e.area as f64 {
            continue; // mostly over unlabeled ground truth
        }
        stats.per_class.entry(e.class_id).or_default().fp += 1;
    }
    Ok(())
}

fn class_scores(stats: &ClassStats) -> PqScores {
    let denom = stats.tp as f64 + 0.5 * stats.fp as f64 + 0.5 * stats.fn_ as f64;
    if denom == 0.0 {
        return PqScores {
            pq: 0.0,
            sq: 0.0,
            rq: 0.0,
        };
    }
    let sq = if stats.tp > 0 {
        stats.iou_sum / stats.tp as f64
    } else {
        0.0
    };
    PqScores {
        pq: stats.iou_sum / denom,
        sq,
        rq: stats.tp as f64 / denom,
    }
}

/// Finalizes accumulated stats over a class subset.
pub fn pq_finalize(stats: &PqStats, class_subset: &[u32]) -> Result<PqReport> {
    if class_subset.is_empty() {
        return Err(Error::validation("class subset must be nonempty"));
    }
    let mut per_class = BTreeMap::new();
    let mut counted = Vec::new();
    let mut sums = PqScores {
        pq: 0.0,
        sq: 0.0,
        rq: 0.0,
    };
    for &class in class_subset {
        let cs = stats.per_class.get(&class).copied().unwrap_or_default();
        if cs.tp + cs.fp + cs.fn_ == 0 {
            continue; // never observed, excluded from the mean
        }
        let scores = class_scores(&cs);
        sums.pq += scores.pq;
        sums.sq += scores.sq;
        sums.rq += scores.rq;
        per_class.insert(class, scores);
        counted.push(class);
    }
    let n = counted.len().max(1) as f64;
    Ok(PqReport {
        per_class,
        mean: PqScores {
            pq: sums.pq / n,
            sq: sums.sq / n,
            rq: sums.rq / n,
        },
        counted_classes: counted,
    })
}
