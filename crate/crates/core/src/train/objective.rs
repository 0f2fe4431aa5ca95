use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{FadaMode, TrainError};
use crate::assign::{geometry_loss_tape, instance_loss_tape, match_cost, Assignment, LossWeights};
use crate::fada::{fada_cost_matrix, fada_loss_tape, marginalize_frames};
use crate::model::{Bound, Forward, Model};
use crate::numerics::{sigmoid, softmax_lastdim, Tape, Tensor, Var};
use crate::scenegen::{CameraParams, RenderedScene, TargetVisibility, MIN_SUPERVISED_PIXELS};

/// Supervision for a contiguous window of views, in the window's own gauge
/// (its first view is the reference camera).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTargets {
    pub cameras: Vec<CameraParams>,
    /// View-major full-resolution depths.
    pub depths: Vec<f64>,
    pub instances: Vec<i32>,
    pub classes: Vec<usize>,
    /// Flat half-resolution masks, one per kept instance.
    pub masks: Vec<Vec<f64>>,
    pub visibility: Vec<TargetVisibility>,
}

impl WindowTargets {
    /// Instances with fewer than `MIN_SUPERVISED_PIXELS` half-resolution
    /// pixels across the window are left unsupervised.
    pub fn from_scene(scene: &RenderedScene, views: Range<usize>) -> Result<Self, TrainError> {
        if views.len() < 2 || views.end > scene.views.len() {
            return Err(TrainError::Config(format!(
                "window {views:?} invalid for a scene of {} views",
                scene.views.len()
            )));
        }
        let reference = scene.views[views.start].camera;
        let cameras = scene.views[views.clone()]
            .iter()
            .map(|v| v.camera.relative_to(&reference))
            .collect();
        let depths = scene.views[views.clone()]
            .iter()
            .flat_map(|v| v.depth.iter().copied())
            .collect();
        let half = &scene.half_instance_maps[views];
        let mut out = Self {
            cameras,
            depths,
            instances: vec![],
            classes: vec![],
            masks: vec![],
            visibility: vec![],
        };
        for &(id, class) in &scene.instances {
            let counts: Vec<usize> = half
                .iter()
                .map(|m| m.iter().filter(|&&x| x == id).count())
                .collect();
            if counts.iter().sum::<usize>() < MIN_SUPERVISED_PIXELS {
                continue;
            }
            out.visibility
                .push(TargetVisibility::from_counts(id, counts)?);
            out.masks.push(
                half.iter()
                    .flatten()
                    .map(|&x| if x == id { 1.0 } else { 0.0 })
                    .collect(),
            );
            out.instances.push(id);
            out.classes.push(class);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub geometry: f64,
    pub instance: f64,
    /// Unweighted alignment loss; exactly 0 when alignment is off.
    pub fada: f64,
}

pub struct Objective {
    pub total: Var,
    pub parts: LossParts,
    pub assignment: Assignment,
}

/// Optimal query-to-instance assignment for one forward pass. Alignment costs
/// enter only in `LossAndCost` mode.
pub fn match_queries(
    tape: &Tape,
    fwd: &Forward,
    targets: &WindowTargets,
    mode: FadaMode,
    weights: &LossWeights,
) -> Result<Assignment, TrainError> {
    if targets.classes.is_empty() {
        return Ok(Assignment {
            pairs: vec![],
            total_cost: 0.0,
        });
    }
    let logits = Tensor::new(
        tape.shape(fwd.class_logits).to_vec(),
        tape.data(fwd.class_logits).to_vec(),
    )?;
    let c1 = logits.last_dim();
    let class_probs: Vec<Vec<f64>> = softmax_lastdim(&logits)
        .data()
        .chunks(c1)
        .map(<[f64]>::to_vec)
        .collect();
    let p = tape.shape(fwd.mask_logits)[1];
    let masks: Vec<Vec<f64>> = tape
        .data(fwd.mask_logits)
        .chunks(p)
        .map(|r| r.iter().map(|&z| sigmoid(z)).collect())
        .collect();
    let block = if mode.uses_cost() {
        let t = fwd.bounds[fwd.views];
        let layers = fwd
            .attention
            .iter()
            .map(|&a| {
                tape.data(a)
                    .chunks(t)
                    .map(|row| marginalize_frames(row, &fwd.bounds))
                    .collect()
            })
            .collect::<Result<Vec<Vec<Vec<f64>>>, _>>()?;
        Some(fada_cost_matrix(&layers, &targets.visibility)?)
    } else {
        None
    };
    let cost = match_cost(
        &class_probs,
        &masks,
        block.as_ref(),
        &targets.classes,
        &targets.masks,
        weights,
    )?;
    Ok(cost.assign()?)
}

/// Forward pass plus `L_geo + L_inst + λ_js L_js` on `tape`. A `fixed`
/// assignment bypasses matching, which keeps the objective smooth for
/// finite-difference checks.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    images: &[&[f64]],
    targets: &WindowTargets,
    mode: FadaMode,
    weights: &LossWeights,
    fixed: Option<&Assignment>,
) -> Result<(Forward, Objective), TrainError> {
    if targets.cameras.len() != images.len() {
        return Err(TrainError::Config(format!(
            "{} images for targets over {} views",
            images.len(),
            targets.cameras.len()
        )));
    }
    let fwd = model.forward(tape, bound, images)?;
    let heads = [
        ("cameras", fwd.cameras),
        ("depths", fwd.depths),
        ("class_logits", fwd.class_logits),
        ("mask_logits", fwd.mask_logits),
    ];
    let attention = fwd.attention.iter().map(|&a| ("attention", a));
    if let Some((name, _)) = heads
        .into_iter()
        .chain(attention)
        .find(|(_, v)| tape.data(*v).iter().any(|x| !x.is_finite()))
    {
        return Err(TrainError::NonFinite {
            step: 0,
            diagnostics: format!("non-finite {name} in forward pass"),
        });
    }
    let assignment = match fixed {
        Some(a) => a.clone(),
        None => match_queries(tape, &fwd, targets, mode, weights)?,
    };
    let geo = geometry_loss_tape(
        tape,
        fwd.cameras,
        fwd.depths,
        &targets.cameras,
        &targets.depths,
        weights,
    )?;
    let inst = instance_loss_tape(
        tape,
        fwd.class_logits,
        fwd.mask_logits,
        &assignment,
        &targets.classes,
        &targets.masks,
        weights,
    )?;
    let mut total = tape.add(geo, inst)?;
    let mut fada = 0.0;
    if mode.uses_loss() {
        if let Some(f) = fada_loss_tape(
            tape,
            &fwd.attention,
            &fwd.bounds,
            &assignment.pairs,
            &targets.visibility,
        )? {
            fada = tape.scalar(f);
            let weighted = tape.scale(f, weights.js);
            total = tape.add(total, weighted)?;
        }
    }
    let parts = LossParts {
        total: tape.scalar(total),
        geometry: tape.scalar(geo),
        instance: tape.scalar(inst),
        fada,
    };
    Ok((
        fwd,
        Objective {
            total,
            parts,
            assignment,
        },
    ))
}
