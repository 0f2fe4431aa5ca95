//! Instance-segmentation AP over point-id sets, scale-aligned depth metrics,
//! and attention entropy.

mod protocol;

pub use protocol::{
    reference_cloud, scene_instances, transfer_labels, ProtocolOptions, ReferenceCloud,
    DEFAULT_VISIBILITY_EPS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenegen::INVALID_DEPTH;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no valid depth pixels")]
    NoValidPixels,
    #[error("non-positive depth {value} at pixel {index}")]
    Domain { index: usize, value: f64 },
    #[error("length mismatch: {0} predictions for {1} targets")]
    Length(usize, usize),
}

/// `|a ∩ b| / |a ∪ b|` over point ids; 0 when both are empty.
pub fn iou_3d(a: &[usize], b: &[usize]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    a.dedup();
    b.sort_unstable();
    b.dedup();
    sorted_iou(&a, &b)
}

fn sorted_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A predicted or ground-truth instance: a set of point ids within one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub scene: usize,
    pub class: usize,
    /// Ignored for ground truth.
    pub score: f64,
    pub points: Vec<usize>,
}

impl EvalInstance {
    pub fn new(scene: usize, class: usize, score: f64, mut points: Vec<usize>) -> Self {
        points.sort_unstable();
        points.dedup();
        Self {
            scene,
            class,
            score,
            points,
        }
    }
}

/// Precision/recall after each ranked prediction, and the resulting AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
}

/// AP of one class. Predictions are ranked by descending score (ties by
/// position); each takes the unmatched same-scene gt with the highest IoU if
/// that IoU reaches `threshold`. Precision is made non-increasing from the
/// right and integrated stepwise over recall.
pub fn average_precision(preds: &[EvalInstance], gts: &[EvalInstance], threshold: f64) -> PrCurve {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(preds.len());
    let mut recall = Vec::with_capacity(preds.len());
    let mut hits = Vec::with_capacity(preds.len());
    for (rank, &pi) in order.iter().enumerate() {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] || g.scene != p.scene {
                continue;
            }
            let iou = sorted_iou(&p.points, &g.points);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        let hit = best.is_some();
        if let Some((gi, _)) = best {
            used[gi] = true;
            tp += 1;
        }
        hits.push(hit);
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(if gts.is_empty() {
            0.0
        } else {
            tp as f64 / gts.len() as f64
        });
    }
    if gts.is_empty() {
        return PrCurve {
            precision,
            recall,
            ap: 0.0,
        };
    }
    let mut interp = precision.clone();
    for i in (0..interp.len().saturating_sub(1)).rev() {
        interp[i] = interp[i].max(interp[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &r) in recall.iter().enumerate() {
        if hits[i] {
            ap += (r - prev) * interp[i];
            prev = r;
        }
    }
    PrCurve {
        precision,
        recall,
        ap,
    }
}

/// IoU thresholds 0.50, 0.55, .., 0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    /// AP at each of `ApResult::thresholds`.
    pub ap: Vec<f64>,
    pub ap50: f64,
    pub ap25: f64,
    pub gt_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub thresholds: Vec<f64>,
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    pub map50: f64,
    pub map25: f64,
    pub class_agnostic: bool,
    /// Precision-recall curves per evaluated class at each threshold.
    #[serde(skip)]
    pub curves: Vec<Vec<PrCurve>>,
}

/// mAP over thresholds 0.50:0.95 plus AP at 0.50 and 0.25, averaged over
/// classes that have ground truth. `class_agnostic` collapses all classes.
pub fn map_suite(preds: &[EvalInstance], gts: &[EvalInstance], class_agnostic: bool) -> ApResult {
    let thresholds = map_thresholds();
    let collapse = |xs: &[EvalInstance]| -> Vec<EvalInstance> {
        xs.iter()
            .map(|x| EvalInstance {
                class: if class_agnostic { 0 } else { x.class },
                ..x.clone()
            })
            .collect()
    };
    let (preds, gts) = (collapse(preds), collapse(gts));
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = Vec::new();
    let mut curves = Vec::new();
    for &c in &classes {
        let p: Vec<EvalInstance> = preds.iter().filter(|x| x.class == c).cloned().collect();
        let g: Vec<EvalInstance> = gts.iter().filter(|x| x.class == c).cloned().collect();
        let cs: Vec<PrCurve> = thresholds
            .iter()
            .map(|&t| average_precision(&p, &g, t))
            .collect();
        per_class.push(ClassAp {
            class: c,
            ap: cs.iter().map(|x| x.ap).collect(),
            ap50: average_precision(&p, &g, 0.5).ap,
            ap25: average_precision(&p, &g, 0.25).ap,
            gt_count: g.len(),
        });
        curves.push(cs);
    }
    let mean = |f: &dyn Fn(&ClassAp) -> f64| -> f64 {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    let map = if per_class.is_empty() {
        0.0
    } else {
        (0..thresholds.len())
            .map(|t| mean(&|c: &ClassAp| c.ap[t]))
            .sum::<f64>()
            / thresholds.len() as f64
    };
    ApResult {
        map,
        map50: mean(&|c: &ClassAp| c.ap50),
        map25: mean(&|c: &ClassAp| c.ap25),
        thresholds,
        per_class,
        class_agnostic,
        curves,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta_1_25: f64,
    pub scale: f64,
    pub valid_pixels: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Abs Rel and δ < 1.25 after scaling all predictions by the median of
/// `gt / pred` over valid pixels (gt not equal to the invalid sentinel).
pub fn depth_metrics(pred: &[f64], gt: &[f64]) -> Result<DepthMetrics, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::Length(pred.len(), gt.len()));
    }
    let mut valid = Vec::new();
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if g == INVALID_DEPTH {
            continue;
        }
        if !(g > 0.0) {
            return Err(EvalError::Domain { index: i, value: g });
        }
        if !(p > 0.0) {
            return Err(EvalError::Domain { index: i, value: p });
        }
        valid.push(i);
    }
    if valid.is_empty() {
        return Err(EvalError::NoValidPixels);
    }
    let scale = median(valid.iter().map(|&i| gt[i] / pred[i]).collect());
    let n = valid.len() as f64;
    let mut abs_rel = 0.0;
    let mut good = 0usize;
    for &i in &valid {
        let sp = scale * pred[i];
        abs_rel += (sp - gt[i]).abs() / gt[i];
        if (sp / gt[i]).max(gt[i] / sp) < 1.25 {
            good += 1;
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        delta_1_25: good as f64 / n,
        scale,
        valid_pixels: valid.len(),
    })
}

/// Shannon entropy (natural log) with `0·log 0 = 0`.
pub fn attention_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    /// Mean frame-level entropy of matched queries per layer.
    pub per_layer: Vec<f64>,
    pub final_layer: f64,
    /// Same, over full token rows rather than frame marginals.
    pub token_per_layer: Vec<f64>,
    pub token_final_layer: f64,
    pub samples: usize,
}

/// Depth metrics per scene and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSummary {
    pub abs_rel: f64,
    pub delta_1_25: f64,
    pub per_scene: Vec<DepthMetrics>,
}

impl DepthSummary {
    pub fn from_scenes(per_scene: Vec<DepthMetrics>) -> Option<Self> {
        if per_scene.is_empty() {
            return None;
        }
        let n = per_scene.len() as f64;
        Some(Self {
            abs_rel: per_scene.iter().map(|m| m.abs_rel).sum::<f64>() / n,
            delta_1_25: per_scene.iter().map(|m| m.delta_1_25).sum::<f64>() / n,
            per_scene,
        })
    }
}

/// JSON metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub instance: ApResult,
    pub depth: Option<DepthSummary>,
    pub entropy: Option<EntropySummary>,
    pub scenes: usize,
}
