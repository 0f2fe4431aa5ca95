//! Set-prediction supervision: flattened multi-view masks, mask losses, the
//! composite matching cost, optimal assignment, and the training objective.

mod hungarian;

pub use hungarian::{hungarian, Assignment};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fada::FadaCostBlock;
use crate::numerics::{floored_ln, NumericsError, Tape, Var};
use crate::scenegen::{CameraParams, INVALID_DEPTH};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{queries} queries cannot cover {targets} ground-truth instances")]
    Capacity { queries: usize, targets: usize },
    #[error("non-finite cost at query {query}, target {target}")]
    NonFinite { query: usize, target: usize },
    #[error("ground-truth class {class} out of range for {classes} classes")]
    ClassRange { class: usize, classes: usize },
    #[error("no valid depth pixel in any view")]
    NoValidDepth,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Loss and matching weights. Matching uses the same `cls`, `mask`, `js`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub camera: f64,
    pub depth: f64,
    pub cls: f64,
    pub mask: f64,
    pub js: f64,
    /// Cross-entropy weight of queries supervised toward the no-object class.
    pub no_object: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            camera: 5.0,
            depth: 1.0,
            cls: 0.5,
            mask: 1.0,
            js: 0.5,
            no_object: 0.1,
            huber_delta: 0.1,
        }
    }
}

/// Concatenates per-view masks in view order.
pub fn flatten_masks(views: &[Vec<f64>], len: usize) -> Result<Vec<f64>, AssignError> {
    if let Some((i, v)) = views.iter().enumerate().find(|(_, v)| v.len() != len) {
        return Err(AssignError::Shape(format!(
            "view {i} mask has {} entries, expected {len}",
            v.len()
        )));
    }
    Ok(views.concat())
}

/// Splits a flat mask back into `views` equal parts.
pub fn unflatten_masks(flat: &[f64], views: usize) -> Result<Vec<Vec<f64>>, AssignError> {
    if views == 0 || flat.len() % views != 0 {
        return Err(AssignError::Shape(format!(
            "{} entries do not split into {views} views",
            flat.len()
        )));
    }
    Ok(flat
        .chunks(flat.len() / views)
        .map(<[f64]>::to_vec)
        .collect())
}

fn same_len(a: &[f64], b: &[f64]) -> Result<(), AssignError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(AssignError::Shape(format!(
            "mask lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities `m` against targets `gt`.
pub fn bce(m: &[f64], gt: &[f64]) -> Result<f64, AssignError> {
    same_len(m, gt)?;
    let total: f64 = m
        .iter()
        .zip(gt)
        .map(|(&p, &t)| -(t * floored_ln(p) + (1.0 - t) * floored_ln(1.0 - p)))
        .sum();
    Ok(total / m.len() as f64)
}

/// Dice loss with Laplace smoothing: `1 − (2 Σ m·gt + 1) / (Σ m + Σ gt + 1)`.
pub fn dice(m: &[f64], gt: &[f64]) -> Result<f64, AssignError> {
    same_len(m, gt)?;
    let inter: f64 = m.iter().zip(gt).map(|(a, b)| a * b).sum();
    let sm: f64 = m.iter().sum();
    let sg: f64 = gt.iter().sum();
    Ok(1.0 - (2.0 * inter + 1.0) / (sm + sg + 1.0))
}

/// Pairwise matching costs with their components.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub queries: usize,
    pub targets: usize,
    /// Predicted probability of each target's class, row-major `queries × targets`.
    pub class_prob: Vec<f64>,
    pub bce: Vec<f64>,
    pub dice: Vec<f64>,
    /// Alignment costs; absent when alignment does not enter matching.
    pub js: Option<Vec<f64>>,
    pub weights: LossWeights,
    pub total: Vec<f64>,
}

impl CostMatrix {
    /// Reassembles the total from the stored components.
    pub fn recompute(&self) -> Vec<f64> {
        let w = &self.weights;
        (0..self.class_prob.len())
            .map(|i| {
                let js = self.js.as_ref().map_or(0.0, |j| w.js * j[i]);
                -w.cls * self.class_prob[i] + w.mask * (self.bce[i] + self.dice[i]) + js
            })
            .collect()
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.total[j * self.targets + k]
    }

    pub fn assign(&self) -> Result<Assignment, AssignError> {
        hungarian(&self.total, self.queries, self.targets)
    }
}

/// Builds the `O × G` cost from class probabilities (`O` rows of `C + 1`),
/// flat mask probabilities, optional alignment costs, and ground truth.
pub fn match_cost(
    class_probs: &[Vec<f64>],
    masks: &[Vec<f64>],
    fada: Option<&FadaCostBlock>,
    gt_classes: &[usize],
    gt_masks: &[Vec<f64>],
    weights: &LossWeights,
) -> Result<CostMatrix, AssignError> {
    let (queries, targets) = (class_probs.len(), gt_classes.len());
    if masks.len() != queries || gt_masks.len() != targets {
        return Err(AssignError::Shape(format!(
            "{queries} class rows vs {} masks; {targets} gt classes vs {} gt masks",
            masks.len(),
            gt_masks.len()
        )));
    }
    if let Some(block) = fada {
        if block.queries != queries || block.targets != targets {
            return Err(AssignError::Shape(format!(
                "alignment block {}×{} for a {queries}×{targets} cost",
                block.queries, block.targets
            )));
        }
    }
    let classes = class_probs.first().map_or(0, Vec::len);
    if let Some(&class) = gt_classes.iter().find(|&&c| c + 1 >= classes) {
        return Err(AssignError::ClassRange {
            class,
            classes: classes.saturating_sub(1),
        });
    }
    let len = masks.first().map_or(0, Vec::len);
    for m in masks.iter().chain(gt_masks) {
        same_len(m, &vec![0.0; len])?;
    }
    // Per-query sums shared by every target; per-pair work only touches
    // foreground gt pixels.
    let neg_sums: Vec<f64> = masks
        .iter()
        .map(|m| m.iter().map(|&p| -floored_ln(1.0 - p)).sum())
        .collect();
    let mask_sums: Vec<f64> = masks.iter().map(|m| m.iter().sum()).collect();
    let fg: Vec<Vec<usize>> = gt_masks
        .iter()
        .map(|g| {
            g.iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.5)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let n = len as f64;
    let mut cm = CostMatrix {
        queries,
        targets,
        class_prob: Vec::with_capacity(queries * targets),
        bce: Vec::with_capacity(queries * targets),
        dice: Vec::with_capacity(queries * targets),
        js: fada.map(|b| b.costs.clone()),
        weights: *weights,
        total: Vec::new(),
    };
    for j in 0..queries {
        let m = &masks[j];
        for k in 0..targets {
            cm.class_prob.push(class_probs[j][gt_classes[k]]);
            let mut shift = 0.0;
            let mut inter = 0.0;
            for &i in &fg[k] {
                shift += floored_ln(1.0 - m[i]) - floored_ln(m[i]);
                inter += m[i];
            }
            cm.bce.push((neg_sums[j] + shift) / n);
            let sg = fg[k].len() as f64;
            cm.dice
                .push(1.0 - (2.0 * inter + 1.0) / (mask_sums[j] + sg + 1.0));
        }
    }
    cm.total = cm.recompute();
    Ok(cm)
}

/// Target class per query: matched queries take their instance class,
/// the rest the no-object index `classes`.
fn class_targets(
    assignment: &Assignment,
    queries: usize,
    gt_classes: &[usize],
    classes: usize,
    w: &LossWeights,
) -> (Vec<usize>, Vec<f64>) {
    let mut targets = vec![classes; queries];
    let mut weights = vec![w.no_object; queries];
    for &(j, k) in &assignment.pairs {
        targets[j] = gt_classes[k];
        weights[j] = 1.0;
    }
    (targets, weights)
}

/// Instance loss on probabilities: `λ_cls·CE + λ_mask·(BCE + Dice)`, with mask
/// terms averaged over matched pairs.
pub fn instance_loss(
    assignment: &Assignment,
    class_probs: &[Vec<f64>],
    masks: &[Vec<f64>],
    gt_classes: &[usize],
    gt_masks: &[Vec<f64>],
    weights: &LossWeights,
) -> Result<f64, AssignError> {
    let classes = class_probs.first().map_or(0, Vec::len).saturating_sub(1);
    let (targets, cw) = class_targets(assignment, class_probs.len(), gt_classes, classes, weights);
    let ce: f64 = class_probs
        .iter()
        .zip(&targets)
        .zip(&cw)
        .map(|((p, &t), &w)| -w * floored_ln(p[t]))
        .sum::<f64>()
        / cw.iter().sum::<f64>();
    let mut mask_term = 0.0;
    for &(j, k) in &assignment.pairs {
        mask_term += bce(&masks[j], &gt_masks[k])? + dice(&masks[j], &gt_masks[k])?;
    }
    if !assignment.pairs.is_empty() {
        mask_term /= assignment.pairs.len() as f64;
    }
    Ok(weights.cls * ce + weights.mask * mask_term)
}

/// Differentiable instance loss from class logits `[O, C+1]` and flat mask
/// logits `[O, P]`.
pub fn instance_loss_tape(
    tape: &mut Tape,
    class_logits: Var,
    mask_logits: Var,
    assignment: &Assignment,
    gt_classes: &[usize],
    gt_masks: &[Vec<f64>],
    weights: &LossWeights,
) -> Result<Var, AssignError> {
    let (queries, c1) = (tape.shape(class_logits)[0], tape.shape(class_logits)[1]);
    let (targets, cw) = class_targets(assignment, queries, gt_classes, c1 - 1, weights);
    let ce = tape.cross_entropy(class_logits, targets, cw)?;
    let mut loss = tape.scale(ce, weights.cls);
    if assignment.pairs.is_empty() {
        return Ok(loss);
    }
    let p = tape.shape(mask_logits)[1];
    let matched = assignment.pairs.len();
    let mut index = Vec::with_capacity(matched * p);
    let mut target = Vec::with_capacity(matched * p);
    let mut gt_sums = Vec::with_capacity(matched);
    for &(j, k) in &assignment.pairs {
        index.extend(j * p..(j + 1) * p);
        target.extend_from_slice(&gt_masks[k]);
        gt_sums.push(gt_masks[k].iter().sum::<f64>() + 1.0);
    }
    let rows = tape.gather(mask_logits, index, vec![matched, p])?;
    let bce = tape.bce_logits(rows, target.clone())?;
    let probs = tape.sigmoid(rows);
    let gt = tape.constant(vec![matched, p], target)?;
    let overlap = tape.mul(probs, gt)?;
    let inter = tape.sum_lastdim(overlap);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, 1.0);
    let den = tape.sum_lastdim(probs);
    let offsets = tape.constant(vec![matched], gt_sums)?;
    let den = tape.add(den, offsets)?;
    let ratio = tape.div(num, den)?;
    let mean_ratio = tape.mean(ratio);
    let dice = tape.scale(mean_ratio, -1.0);
    let dice = tape.add_scalar(dice, 1.0);
    let mask = tape.add(bce, dice)?;
    let mask = tape.scale(mask, weights.mask);
    loss = tape.add(loss, mask)?;
    Ok(loss)
}

/// Ground-truth camera 9-vector with its quaternion sign matched to `pred`.
pub fn aligned_camera_target(pred: &[f64], gt: &CameraParams) -> [f64; 9] {
    let mut g = gt.to_vector();
    let d: f64 = (0..4).map(|i| pred[i] * g[i]).sum();
    if d < 0.0 {
        g[..4].iter_mut().for_each(|v| *v = -*v);
    }
    g
}

fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

fn valid_depth(gt: &[f64]) -> impl Iterator<Item = usize> + '_ {
    gt.iter()
        .enumerate()
        .filter(|(_, &d)| d != INVALID_DEPTH && d > 0.0)
        .map(|(i, _)| i)
}

/// `λ_camera · mean Huber(g − g_gt) + λ_depth · mean |log D − log D_gt|` over
/// valid pixels. `pred_cameras` holds 9 values per view; `pred_depths` and
/// `gt_depths` are view-major flat rasters.
pub fn geometry_loss(
    pred_cameras: &[f64],
    pred_depths: &[f64],
    gt_cameras: &[CameraParams],
    gt_depths: &[f64],
    weights: &LossWeights,
) -> Result<f64, AssignError> {
    if pred_cameras.len() != 9 * gt_cameras.len() || pred_depths.len() != gt_depths.len() {
        return Err(AssignError::Shape(
            "geometry prediction and target sizes differ".into(),
        ));
    }
    let mut cam = 0.0;
    for (pred, gt) in pred_cameras.chunks(9).zip(gt_cameras) {
        let g = aligned_camera_target(pred, gt);
        cam += pred
            .iter()
            .zip(&g)
            .map(|(a, b)| huber(a - b, weights.huber_delta))
            .sum::<f64>();
    }
    cam /= pred_cameras.len() as f64;
    let valid: Vec<usize> = valid_depth(gt_depths).collect();
    if valid.is_empty() {
        return Err(AssignError::NoValidDepth);
    }
    let depth = valid
        .iter()
        .map(|&i| (floored_ln(pred_depths[i]) - gt_depths[i].ln()).abs())
        .sum::<f64>()
        / valid.len() as f64;
    Ok(weights.camera * cam + weights.depth * depth)
}

/// Differentiable geometry loss; `cameras` is `[N, 9]`, `depths` holds
/// `N·H·W` values.
pub fn geometry_loss_tape(
    tape: &mut Tape,
    cameras: Var,
    depths: Var,
    gt_cameras: &[CameraParams],
    gt_depths: &[f64],
    weights: &LossWeights,
) -> Result<Var, AssignError> {
    let pred = tape.data(cameras).to_vec();
    if pred.len() != 9 * gt_cameras.len() || tape.value(depths).numel() != gt_depths.len() {
        return Err(AssignError::Shape(
            "geometry prediction and target sizes differ".into(),
        ));
    }
    let target: Vec<f64> = pred
        .chunks(9)
        .zip(gt_cameras)
        .flat_map(|(p, g)| aligned_camera_target(p, g))
        .collect();
    let target = tape.constant(vec![gt_cameras.len(), 9], target)?;
    let diff = tape.sub(cameras, target)?;
    let hub = tape.huber(diff, weights.huber_delta);
    let cam = tape.mean(hub);
    let cam = tape.scale(cam, weights.camera);

    let valid: Vec<usize> = valid_depth(gt_depths).collect();
    if valid.is_empty() {
        return Err(AssignError::NoValidDepth);
    }
    let log_gt: Vec<f64> = valid.iter().map(|&i| gt_depths[i].ln()).collect();
    let n = valid.len();
    let picked = tape.gather(depths, valid, vec![n])?;
    let logd = tape.log(picked);
    let log_gt = tape.constant(vec![n], log_gt)?;
    let err = tape.sub(logd, log_gt)?;
    let err = tape.abs(err);
    let depth = tape.mean(err);
    let depth = tape.scale(depth, weights.depth);
    Ok(tape.add(cam, depth)?)
}

/// `L_geo + L_inst + λ_js · L_js`.
pub fn total_loss(geometry: f64, instance: f64, fada: f64, weights: &LossWeights) -> f64 {
    geometry + instance + weights.js * fada
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_examples() {
        let flat = flatten_masks(&[vec![1.0, 2.0], vec![3.0, 4.0]], 2).unwrap();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            unflatten_masks(&flat, 2).unwrap(),
            vec![vec![1.0, 2.0], vec![3.0, 4.0]]
        );
        assert!(flatten_masks(&[vec![1.0], vec![3.0, 4.0]], 2).is_err());
    }

    #[test]
    fn mask_loss_examples() {
        let eps = 1e-12;
        let gt = [1.0, 0.0, 1.0];
        let m: Vec<f64> = gt
            .iter()
            .map(|&g| if g > 0.5 { 1.0 - eps } else { eps })
            .collect();
        assert!(bce(&m, &gt).unwrap() < 1e-9);
        assert!((bce(&[0.5; 3], &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce(&[0.9, 0.1], &[1.0, 0.0]).unwrap() + 0.9f64.ln()).abs() < 1e-15);
        assert_eq!(dice(&[1.0; 5], &[1.0; 5]).unwrap(), 0.0);
        assert_eq!(dice(&[0.0; 5], &[0.0; 5]).unwrap(), 0.0);
        assert!((dice(&[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(bce(&[0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert_eq!(total_loss(1.0, 2.0, 4.0, &w), 5.0);
    }
}
