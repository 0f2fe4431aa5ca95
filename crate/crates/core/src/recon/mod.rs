//! From per-view predictions to labeled 3D points: mask binarization, depth
//! unprojection, instance assembly, and the projection-based mapping of
//! predictions onto a reference point cloud.

mod io;

pub use io::{
    read_predictions, write_predictions, DepthBlock, FileInstance, MaskBlock, PredictionFile,
    PredictionIoError, PREDICTION_MAGIC, PREDICTION_VERSION,
};

use std::collections::HashMap;

use thiserror::Error;

use crate::model::{ModelConfig, ModelOutputs};
use crate::numerics::softmax_lastdim;
use crate::numerics::Tensor;
use crate::scenegen::{CameraParams, Vec3, INVALID_DEPTH};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconError {
    #[error("mask threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error("shape error: {0}")]
    Shape(String),
}

/// `1` where the probability strictly exceeds `tau`.
pub fn binarize(probs: &[f64], tau: f64) -> Result<Vec<bool>, ReconError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ReconError::Threshold(tau));
    }
    Ok(probs.iter().map(|&p| p > tau).collect())
}

/// World points of every valid pixel, as `(pixel index, point)`.
pub fn unproject(
    depth: &[f64],
    camera: &CameraParams,
    (h, w): (usize, usize),
) -> Vec<(usize, Vec3)> {
    depth
        .iter()
        .enumerate()
        .filter(|(_, &d)| d != INVALID_DEPTH && d > 0.0)
        .map(|(p, &d)| {
            let (u, v) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            (p, camera.unproject_point(u, v, d, h, w))
        })
        .collect()
}

/// One kept query: its class, per-view binary masks, and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    pub query: usize,
    pub class: usize,
    pub class_prob: f64,
    /// Per view, row-major at `mask_res`.
    pub masks: Vec<Vec<bool>>,
    pub mask_res: (usize, usize),
    pub score: f64,
}

/// `max_c p(c) · mean of mask probabilities above tau` (0 when none).
pub fn score(class_probs: &[f64], mask_probs: &[f64], tau: f64) -> f64 {
    let classes = class_probs.len().saturating_sub(1);
    let best = class_probs[..classes].iter().copied().fold(0.0, f64::max);
    let (sum, count) = mask_probs
        .iter()
        .filter(|&&p| p > tau)
        .fold((0.0, 0usize), |(s, c), &p| (s + p, c + 1));
    if count == 0 {
        0.0
    } else {
        best * sum / count as f64
    }
}

/// Queries whose most likely class is a real class and whose masks are
/// non-empty, with binarized half-resolution masks.
pub fn predictions_from_outputs(out: &ModelOutputs, cfg: &ModelConfig) -> Vec<InstancePrediction> {
    let res = cfg.half_res();
    let per_view = res.0 * res.1;
    let probs = out.mask_probs();
    let mut preds = Vec::new();
    for (j, logits) in out.class_logits.iter().enumerate() {
        let t = Tensor::new(vec![logits.len()], logits.clone()).expect("non-empty logits");
        let cp = softmax_lastdim(&t).into_data();
        let c = cfg.classes;
        let (class, &class_prob) =
            cp[..c].iter().enumerate().fold(
                (0, &cp[0]),
                |best, (i, p)| if *p > *best.1 { (i, p) } else { best },
            );
        if cp[c] >= class_prob {
            continue;
        }
        let s = score(&cp, &probs[j], cfg.mask_threshold);
        if s <= 0.0 {
            continue;
        }
        let masks = probs[j]
            .chunks(per_view)
            .map(|m| m.iter().map(|&p| p > cfg.mask_threshold).collect())
            .collect();
        preds.push(InstancePrediction {
            query: j,
            class,
            class_prob,
            masks,
            mask_res: res,
            score: s,
        });
    }
    preds
}

/// Per-view label maps at `mask_res`: each pixel takes the index (into
/// `preds`) of the highest-scored mask covering it, ties to the lower index.
pub fn resolve_label_maps(
    preds: &[InstancePrediction],
    views: usize,
    mask_res: (usize, usize),
) -> Vec<Vec<i32>> {
    let n = mask_res.0 * mask_res.1;
    let mut maps = vec![vec![-1i32; n]; views];
    let mut best = vec![vec![f64::NEG_INFINITY; n]; views];
    for (idx, p) in preds.iter().enumerate() {
        for (v, mask) in p.masks.iter().enumerate().take(views) {
            for (i, &on) in mask.iter().enumerate() {
                if on && p.score > best[v][i] {
                    best[v][i] = p.score;
                    maps[v][i] = idx as i32;
                }
            }
        }
    }
    maps
}

/// Nearest-neighbor lookup of full-resolution pixel `(x, y)` in a map at `res`.
fn lookup(map: &[i32], res: (usize, usize), full: (usize, usize), x: usize, y: usize) -> i32 {
    let my = y * res.0 / full.0;
    let mx = x * res.1 / full.1;
    map[my * res.1 + mx]
}

/// Labeled points in the world frame. `labels` index `classes`/`scores`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloudSeg {
    pub points: Vec<Vec3>,
    pub labels: Vec<i32>,
    pub classes: Vec<usize>,
    pub scores: Vec<f64>,
}

impl PointCloudSeg {
    pub fn instance_points(&self, instance: usize) -> Vec<Vec3> {
        self.points
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == instance as i32)
            .map(|(p, _)| *p)
            .collect()
    }
}

/// Unprojects every pixel claimed by a prediction; conflicts go to the higher
/// score. Masks are upsampled to the depth resolution by nearest neighbor.
pub fn assemble_instances(
    preds: &[InstancePrediction],
    depths: &[Vec<f64>],
    cameras: &[CameraParams],
    res: (usize, usize),
) -> Result<PointCloudSeg, ReconError> {
    if depths.len() != cameras.len() {
        return Err(ReconError::Shape(format!(
            "{} depth maps for {} cameras",
            depths.len(),
            cameras.len()
        )));
    }
    let mut seg = PointCloudSeg {
        classes: preds.iter().map(|p| p.class).collect(),
        scores: preds.iter().map(|p| p.score).collect(),
        ..PointCloudSeg::default()
    };
    let Some(first) = preds.first() else {
        return Ok(seg);
    };
    let mask_res = first.mask_res;
    if preds
        .iter()
        .any(|p| p.mask_res != mask_res || p.masks.len() != depths.len())
    {
        return Err(ReconError::Shape(
            "predictions disagree on mask resolution or view count".into(),
        ));
    }
    let maps = resolve_label_maps(preds, depths.len(), mask_res);
    for ((depth, cam), map) in depths.iter().zip(cameras).zip(&maps) {
        for (p, x) in unproject(depth, cam, res) {
            let label = lookup(map, mask_res, res, p % res.1, p / res.1);
            if label >= 0 {
                seg.points.push(x);
                seg.labels.push(label);
            }
        }
    }
    Ok(seg)
}

/// Outcome of mapping predictions onto reference points.
#[derive(Debug, Clone, PartialEq)]
pub struct Mapping {
    pub labels: Vec<i32>,
    /// Points visible in no view.
    pub invisible: usize,
}

/// Labels each reference point with the prediction whose resolved mask holds
/// a strict majority of the point's visible projections. A projection is
/// visible when it lands inside the image and its depth is within
/// `visibility_eps` of the reference depth there.
pub fn map_to_reference(
    points: &[Vec3],
    label_maps: &[Vec<i32>],
    mask_res: (usize, usize),
    cameras: &[CameraParams],
    depths: &[Vec<f64>],
    res: (usize, usize),
    visibility_eps: f64,
) -> Result<Mapping, ReconError> {
    if label_maps.len() != cameras.len() || depths.len() != cameras.len() {
        return Err(ReconError::Shape(
            "label maps, cameras and depths differ in view count".into(),
        ));
    }
    let (h, w) = res;
    let mut labels = Vec::with_capacity(points.len());
    let mut invisible = 0;
    let mut votes: HashMap<i32, usize> = HashMap::new();
    for &x in points {
        votes.clear();
        let mut visible = 0;
        for ((cam, depth), map) in cameras.iter().zip(depths).zip(label_maps) {
            let (u, v, z) = cam.project(x, h, w);
            if z <= 0.0 || !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
                continue;
            }
            let (px, py) = (u as usize, v as usize);
            let d = depth[py * w + px];
            if d == INVALID_DEPTH || (z - d).abs() >= visibility_eps {
                continue;
            }
            visible += 1;
            *votes.entry(lookup(map, mask_res, res, px, py)).or_default() += 1;
        }
        if visible == 0 {
            invisible += 1;
            labels.push(-1);
            continue;
        }
        let winner = votes
            .iter()
            .filter(|(&l, &c)| l >= 0 && 2 * c > visible)
            .map(|(&l, _)| l)
            .next()
            .unwrap_or(-1);
        labels.push(winner);
    }
    Ok(Mapping { labels, invisible })
}

/// Replaces every label by the most frequent label of its segment, ties to the
/// smaller label.
pub fn superpoint_vote(labels: &[i32], segments: &[usize]) -> Vec<i32> {
    let mut counts: HashMap<usize, HashMap<i32, usize>> = HashMap::new();
    for (&l, &s) in labels.iter().zip(segments) {
        *counts.entry(s).or_default().entry(l).or_default() += 1;
    }
    let winners: HashMap<usize, i32> = counts
        .into_iter()
        .map(|(s, c)| {
            let best = c
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(l, _)| l)
                .expect("segment has members");
            (s, best)
        })
        .collect();
    segments.iter().map(|s| winners[s]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(&[0.5; 3], 0.5).unwrap(), vec![false; 3]);
        assert_eq!(binarize(&[0.4, 0.6], 0.5).unwrap(), vec![false, true]);
        assert_eq!(binarize(&[0.4], 0.0), Err(ReconError::Threshold(0.0)));
        assert!(binarize(&[0.4], 1.0).is_err());
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 0.0, 0.0], &[1.0, 1.0, 0.2], 0.5), 1.0);
        assert_eq!(score(&[0.7, 0.2, 0.1], &[0.1, 0.3], 0.5), 0.0);
        let s = score(&[0.8, 0.1, 0.1], &[0.9, 0.9, 0.2], 0.5);
        assert!((s - 0.72).abs() < 1e-15);
    }

    #[test]
    fn optical_axis_unprojection() {
        let cam = CameraParams {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0; 3],
            fov: [1.0, 1.0],
        };
        // 1x1 image: the single pixel center is the principal point
        let pts = unproject(&[5.0], &cam, (1, 1));
        assert_eq!(pts, vec![(0, [0.0, 0.0, 5.0])]);
        assert!(unproject(&[INVALID_DEPTH], &cam, (1, 1)).is_empty());
    }

    #[test]
    fn superpoint_examples() {
        assert_eq!(superpoint_vote(&[3, 3, 3], &[0, 0, 0]), vec![3, 3, 3]);
        assert_eq!(superpoint_vote(&[1, 1, 2], &[4, 4, 4]), vec![1, 1, 1]);
        assert_eq!(superpoint_vote(&[1, 2, -1], &[0, 1, 2]), vec![1, 2, -1]);
        // tie resolves to the smaller label
        assert_eq!(superpoint_vote(&[2, -1], &[0, 0]), vec![-1, -1]);
        let once = superpoint_vote(&[0, 1, 1, 2, 2, 2], &[0, 0, 0, 1, 1, 2]);
        assert_eq!(superpoint_vote(&once, &[0, 0, 0, 1, 1, 2]), once);
    }
}
