//! Scoring predicted masks against a scene's ground-truth point cloud: every
//! valid gt pixel is lifted to 3D, predictions are transferred by projection,
//! and both sides become point-id sets.

use crate::recon::{
    map_to_reference, resolve_label_maps, superpoint_vote, unproject, InstancePrediction,
    ReconError,
};
use crate::scenegen::{superpoints, RenderedScene, Vec3};

use super::EvalInstance;

/// Depth agreement for a projection to count as visible.
pub const DEFAULT_VISIBILITY_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolOptions {
    pub visibility_eps: f64,
    /// Voxel edge of the voting segments; `None` disables voting.
    pub superpoint_cell: Option<f64>,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            visibility_eps: DEFAULT_VISIBILITY_EPS,
            superpoint_cell: None,
        }
    }
}

/// Ground-truth points of a scene, labeled by instance id (`-1` background).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCloud {
    pub points: Vec<Vec3>,
    pub labels: Vec<i32>,
}

pub fn reference_cloud(scene: &RenderedScene) -> ReferenceCloud {
    let res = (scene.height(), scene.width());
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for view in &scene.views {
        for (p, x) in unproject(&view.depth, &view.camera, res) {
            points.push(x);
            labels.push(view.instance_map[p]);
        }
    }
    ReferenceCloud { points, labels }
}

/// Reference labels of every point under the predictions' resolved masks.
pub fn transfer_labels(
    scene: &RenderedScene,
    reference: &ReferenceCloud,
    preds: &[InstancePrediction],
    opts: &ProtocolOptions,
) -> Result<Vec<i32>, ReconError> {
    let Some(first) = preds.first() else {
        return Ok(vec![-1; reference.points.len()]);
    };
    let views = scene.views.len();
    if preds
        .iter()
        .any(|p| p.masks.len() != views || p.mask_res != first.mask_res)
    {
        return Err(ReconError::Shape(format!(
            "predictions must carry {views} masks at one resolution"
        )));
    }
    let maps = resolve_label_maps(preds, views, first.mask_res);
    let cameras: Vec<_> = scene.views.iter().map(|v| v.camera).collect();
    let depths: Vec<Vec<f64>> = scene.views.iter().map(|v| v.depth.clone()).collect();
    let res = (scene.height(), scene.width());
    let mapping = map_to_reference(
        &reference.points,
        &maps,
        first.mask_res,
        &cameras,
        &depths,
        res,
        opts.visibility_eps,
    )?;
    Ok(match opts.superpoint_cell {
        Some(cell) => superpoint_vote(
            &mapping.labels,
            &superpoints(&reference.points, &reference.labels, cell),
        ),
        None => mapping.labels,
    })
}

/// Predicted and ground-truth instances of one scene as point-id sets.
pub fn scene_instances(
    scene_index: usize,
    scene: &RenderedScene,
    preds: &[InstancePrediction],
    opts: &ProtocolOptions,
) -> Result<(Vec<EvalInstance>, Vec<EvalInstance>), ReconError> {
    let reference = reference_cloud(scene);
    let labels = transfer_labels(scene, &reference, preds, opts)?;
    let ids_of = |labels: &[i32], target: i32| -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == target)
            .map(|(i, _)| i)
            .collect()
    };
    let predicted = preds
        .iter()
        .enumerate()
        .map(|(i, p)| EvalInstance::new(scene_index, p.class, p.score, ids_of(&labels, i as i32)))
        .collect();
    let gts = scene
        .instances
        .iter()
        .map(|&(id, class)| {
            EvalInstance::new(scene_index, class, 1.0, ids_of(&reference.labels, id))
        })
        .filter(|g| !g.points.is_empty())
        .collect();
    Ok((predicted, gts))
}
