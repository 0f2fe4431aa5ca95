use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{train, FadaMode, StepLog, TrainConfig, TrainError};
use crate::assign::{match_cost, LossWeights};
use crate::eval::{
    attention_entropy, depth_metrics, map_suite, scene_instances, DepthSummary, EntropySummary,
    EvalInstance, MetricsReport, ProtocolOptions, REPORT_SCHEMA_VERSION,
};
use crate::fada::marginalize_frames;
use crate::model::{Model, ModelConfig, ModelOutputs};
use crate::numerics::{softmax_lastdim, Tensor};
use crate::recon::{
    assemble_instances, predictions_from_outputs, InstancePrediction, PointCloudSeg,
};
use crate::scenegen::{CameraParams, RenderedScene};

/// Everything a single inference pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub outputs: ModelOutputs,
    pub predictions: Vec<InstancePrediction>,
    /// Points in the predicted gauge of the first view.
    pub cloud: PointCloudSeg,
}

/// Forward pass and point-cloud assembly. No matching and no alignment terms.
pub fn infer(model: &Model, images: &[&[f64]]) -> Result<Inference, TrainError> {
    let cfg = &model.config;
    let outputs = model.predict(images)?;
    let predictions = predictions_from_outputs(&outputs, cfg);
    let cameras: Vec<CameraParams> = outputs
        .cameras
        .iter()
        .map(|c| CameraParams::from_vector(c))
        .collect();
    let cloud = assemble_instances(
        &predictions,
        &outputs.depths,
        &cameras,
        (cfg.height, cfg.width),
    )?;
    Ok(Inference {
        outputs,
        predictions,
        cloud,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub protocol: ProtocolOptions,
    pub class_agnostic: bool,
}

/// Per-scene evaluation material.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub preds: Vec<EvalInstance>,
    pub gts: Vec<EvalInstance>,
    pub depth: crate::eval::DepthMetrics,
    /// `[layer][matched query]` frame-level attention entropy.
    pub entropy: Vec<Vec<f64>>,
    /// Same layout, over the full token row.
    pub token_entropy: Vec<Vec<f64>>,
}

/// Scores one scene's outputs: instances, depth, and the frame- and
/// token-level attention entropy of queries matched to ground truth by class and mask
/// cost alone.
pub fn evaluate_outputs(
    scene_index: usize,
    scene: &RenderedScene,
    outputs: &ModelOutputs,
    cfg: &ModelConfig,
    opts: &EvalOptions,
) -> Result<SceneEval, TrainError> {
    let predictions = predictions_from_outputs(outputs, cfg);
    let (preds, gts) = scene_instances(scene_index, scene, &predictions, &opts.protocol)?;
    let pred_depth: Vec<f64> = outputs.depths.concat();
    let gt_depth: Vec<f64> = scene
        .views
        .iter()
        .flat_map(|v| v.depth.iter().copied())
        .collect();
    let depth = depth_metrics(&pred_depth, &gt_depth)
        .map_err(|e| TrainError::Config(format!("scene {}: {e}", scene.name)))?;

    let targets = super::WindowTargets::from_scene(scene, 0..scene.views.len())?;
    let mut entropy = vec![Vec::new(); outputs.attention.len()];
    let mut token_entropy = entropy.clone();
    if !targets.classes.is_empty() {
        let c1 = cfg.classes + 1;
        let logits = Tensor::new(
            vec![outputs.class_logits.len(), c1],
            outputs.class_logits.concat(),
        )?;
        let class_probs: Vec<Vec<f64>> = softmax_lastdim(&logits)
            .data()
            .chunks(c1)
            .map(<[f64]>::to_vec)
            .collect();
        let cost = match_cost(
            &class_probs,
            &outputs.mask_probs(),
            None,
            &targets.classes,
            &targets.masks,
            &LossWeights::default(),
        )?;
        let assignment = cost.assign()?;
        for (l, rows) in outputs.attention.iter().enumerate() {
            for &(j, _) in &assignment.pairs {
                let frames = marginalize_frames(&rows[j], &outputs.view_bounds)?;
                entropy[l].push(attention_entropy(&frames));
                token_entropy[l].push(attention_entropy(&rows[j]));
            }
        }
    }
    Ok(SceneEval {
        preds,
        gts,
        depth,
        entropy,
        token_entropy,
    })
}

/// Mean entropy per layer over all matched queries of all scenes.
pub fn entropy_summary(scenes: &[SceneEval]) -> Option<EntropySummary> {
    let layers = scenes.first()?.entropy.len();
    let samples: usize = scenes
        .iter()
        .map(|s| s.entropy.first().map_or(0, Vec::len))
        .sum();
    if layers == 0 || samples == 0 {
        return None;
    }
    let mean = |pick: fn(&SceneEval) -> &Vec<Vec<f64>>| -> Vec<f64> {
        (0..layers)
            .map(|l| scenes.iter().flat_map(|s| &pick(s)[l]).sum::<f64>() / samples as f64)
            .collect()
    };
    let per_layer = mean(|s| &s.entropy);
    let token_per_layer = mean(|s| &s.token_entropy);
    Some(EntropySummary {
        final_layer: per_layer[layers - 1],
        token_final_layer: token_per_layer[layers - 1],
        per_layer,
        token_per_layer,
        samples,
    })
}

/// Full metrics report of `model` over an evaluation split (all views).
pub fn evaluate(
    model: &Model,
    scenes: &[RenderedScene],
    opts: &EvalOptions,
) -> Result<MetricsReport, TrainError> {
    let cfg = &model.config;
    let mut per_scene = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        if scene.height() != cfg.height || scene.width() != cfg.width {
            return Err(TrainError::Config(format!(
                "scene {} is {}x{}, model expects {}x{}",
                scene.name,
                scene.height(),
                scene.width(),
                cfg.height,
                cfg.width
            )));
        }
        let images: Vec<&[f64]> = scene.views.iter().map(|v| v.rgb.as_slice()).collect();
        let outputs = model.predict(&images)?;
        per_scene.push(evaluate_outputs(i, scene, &outputs, cfg, opts)?);
    }
    let preds: Vec<EvalInstance> = per_scene
        .iter()
        .flat_map(|s| s.preds.iter().cloned())
        .collect();
    let gts: Vec<EvalInstance> = per_scene
        .iter()
        .flat_map(|s| s.gts.iter().cloned())
        .collect();
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        instance: map_suite(&preds, &gts, opts.class_agnostic),
        depth: DepthSummary::from_scenes(per_scene.iter().map(|s| s.depth).collect()),
        entropy: entropy_summary(&per_scene),
        scenes: scenes.len(),
    })
}

/// Outcome of one arm of the alignment ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub fada: FadaMode,
    pub report: MetricsReport,
    pub final_loss: f64,
    pub train_seconds: f64,
}

impl AblationResult {
    /// Trains one model per mode from the same seed and evaluates each.
    pub fn run(
        base: &TrainConfig,
        modes: &[FadaMode],
        train_scenes: &[RenderedScene],
        eval_scenes: &[RenderedScene],
        opts: &EvalOptions,
        mut on_step: impl FnMut(FadaMode, &StepLog),
    ) -> Result<Vec<Self>, TrainError> {
        modes
            .iter()
            .map(|&fada| {
                let config = TrainConfig {
                    fada,
                    ..base.clone()
                };
                let started = Instant::now();
                let mut final_loss = f64::NAN;
                let model = train(&config, train_scenes.to_vec(), None, |log| {
                    final_loss = log.loss.total;
                    on_step(fada, log);
                })?;
                let train_seconds = started.elapsed().as_secs_f64();
                let report = evaluate(&model, eval_scenes, opts)?;
                Ok(Self {
                    fada,
                    report,
                    final_loss,
                    train_seconds,
                })
            })
            .collect()
    }
}
