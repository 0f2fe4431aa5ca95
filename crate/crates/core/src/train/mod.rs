//! Deterministic training: window sampling, matching, the combined objective,
//! AdamW with warmup and cosine decay, clipping, and checkpointing.

mod objective;
mod optim;
mod pipeline;

pub use objective::{match_queries, objective, LossParts, Objective, WindowTargets};
pub use optim::{clip_gradients, global_norm, learning_rate, AdamW};
pub use pipeline::{
    entropy_summary, evaluate, evaluate_outputs, infer, AblationResult, EvalOptions, Inference,
    SceneEval,
};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::{AssignError, LossWeights};
use crate::fada::FadaError;
use crate::model::{save_checkpoint, CheckpointError, Model, ModelConfig, ModelError};
use crate::numerics::{NumericsError, Tape};
use crate::recon::ReconError;
use crate::scenegen::{DatasetError, RenderedScene, SceneError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFinite { step: usize, diagnostics: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    Fada(#[from] FadaError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Where frame alignment enters training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FadaMode {
    #[serde(rename = "off")]
    Off,
    #[serde(rename = "loss")]
    LossOnly,
    #[serde(rename = "loss+cost")]
    LossAndCost,
}

impl FadaMode {
    pub fn uses_loss(self) -> bool {
        self != FadaMode::Off
    }

    pub fn uses_cost(self) -> bool {
        self == FadaMode::LossAndCost
    }
}

impl fmt::Display for FadaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FadaMode::Off => "off",
            FadaMode::LossOnly => "loss",
            FadaMode::LossAndCost => "loss+cost",
        })
    }
}

impl FromStr for FadaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(FadaMode::Off),
            "loss" => Ok(FadaMode::LossOnly),
            "loss+cost" => Ok(FadaMode::LossAndCost),
            other => Err(format!(
                "unknown fada mode '{other}' (expected off, loss or loss+cost)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dataset: PathBuf,
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub fada: FadaMode,
    pub seed: u64,
    /// Save the checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            dataset: PathBuf::from("data/train"),
            steps: 3000,
            lr: 1e-3,
            warmup: 100,
            weight_decay: 0.01,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            fada: FadaMode::LossAndCost,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be at least 1".into()));
        }
        let w = &self.weights;
        let rates = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
            ("camera", w.camera),
            ("depth", w.depth),
            ("cls", w.cls),
            ("mask", w.mask),
            ("js", w.js),
            ("no_object", w.no_object),
            ("huber_delta", w.huber_delta),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(TrainError::Config(format!(
                "{name} must be finite and nonnegative, got {v}"
            )));
        }
        if w.huber_delta == 0.0 || self.clip_norm == 0.0 {
            return Err(TrainError::Config(
                "huber_delta and clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub scene: usize,
    pub views: [usize; 2],
    pub loss: LossParts,
    pub matched: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Owns the model, optimizer state and sampling stream of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    scenes: Vec<RenderedScene>,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, scenes: Vec<RenderedScene>) -> Result<Self, TrainError> {
        config.validate()?;
        let m = &config.model;
        if scenes.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        for s in &scenes {
            if s.views.len() < 2 || s.height() != m.height || s.width() != m.width {
                return Err(TrainError::Config(format!(
                    "scene {} has {} views at {}x{}, model expects at least 2 at {}x{}",
                    s.name,
                    s.views.len(),
                    s.height(),
                    s.width(),
                    m.height,
                    m.width
                )));
            }
            if s.instances.iter().any(|&(_, c)| c >= m.classes) {
                return Err(TrainError::Config(format!(
                    "scene {} has classes beyond {}",
                    s.name, m.classes
                )));
            }
        }
        let model = Model::new(config.model, config.seed)?;
        let optimizer = AdamW::new(&model.params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7EA1_5EED);
        Ok(Self {
            config,
            model,
            optimizer,
            rng,
            scenes,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draws a scene and a contiguous window of at least two views.
    fn sample(&mut self) -> (usize, usize, usize) {
        let scene = self.rng.random_range(0..self.scenes.len());
        let n = self.scenes[scene].views.len();
        let len = self.rng.random_range(2..=n);
        let start = self.rng.random_range(0..=n - len);
        (scene, start, start + len)
    }

    pub fn step(&mut self) -> Result<StepLog, TrainError> {
        let started = Instant::now();
        let (si, a, b) = self.sample();
        let scene = &self.scenes[si];
        let targets = WindowTargets::from_scene(scene, a..b)?;
        let images: Vec<&[f64]> = scene.views[a..b].iter().map(|v| v.rgb.as_slice()).collect();
        let cfg = &self.config;

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let (_, obj) = objective(
            &mut tape,
            &self.model,
            &bound,
            &images,
            &targets,
            cfg.fada,
            &cfg.weights,
            None,
        )
        .map_err(|e| match e {
            TrainError::NonFinite { diagnostics, .. } => TrainError::NonFinite {
                step: self.step,
                diagnostics:
                    serde_json::json!({ "what": diagnostics, "scene": scene.name, "views": [a, b] })
                        .to_string(),
            },
            e => e,
        })?;
        let fail = |what: &str| TrainError::NonFinite {
            step: self.step,
            diagnostics: serde_json::json!({
                "what": what,
                "scene": scene.name,
                "views": [a, b],
                "loss": obj.parts,
            })
            .to_string(),
        };
        if !obj.parts.total.is_finite() {
            return Err(fail("loss"));
        }
        tape.backward(obj.total)?;
        let mut grads: Vec<Vec<f64>> = bound
            .vars()
            .iter()
            .zip(self.model.params.tensors())
            .map(|(&v, t)| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect();
        drop(tape);
        let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(fail("gradient"));
        }
        let lr = learning_rate(self.step, cfg.steps, cfg.warmup, cfg.lr);
        self.optimizer
            .update(&mut self.model.params, &grads, lr, cfg.weight_decay);
        let log = StepLog {
            step: self.step,
            lr,
            scene: si,
            views: [a, b],
            loss: obj.parts,
            matched: obj.assignment.pairs.len(),
            grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(log)
    }

    /// Runs the remaining steps, saving to `checkpoint` at the configured
    /// interval and at the end.
    pub fn run(
        &mut self,
        checkpoint: Option<&Path>,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<(), TrainError> {
        while self.step < self.config.steps {
            let log = match self.step() {
                Ok(log) => log,
                Err(e @ TrainError::NonFinite { .. }) => {
                    if let Some(path) = checkpoint {
                        let dump = path.with_extension("nonfinite.txt");
                        std::fs::write(&dump, e.to_string())
                            .map_err(|source| TrainError::Io { path: dump, source })?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            on_step(&log);
            let every = self.config.checkpoint_every;
            if let Some(path) = checkpoint {
                if every > 0 && self.step % every == 0 && self.step < self.config.steps {
                    save_checkpoint(path, &self.model.config, &self.model.params)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            save_checkpoint(path, &self.model.config, &self.model.params)?;
        }
        Ok(())
    }
}

/// Trains from scratch on `scenes` and returns the final model.
pub fn train(
    config: &TrainConfig,
    scenes: Vec<RenderedScene>,
    checkpoint: Option<&Path>,
    on_step: impl FnMut(&StepLog),
) -> Result<Model, TrainError> {
    let mut trainer = Trainer::new(config.clone(), scenes)?;
    trainer.run(checkpoint, on_step)?;
    Ok(trainer.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fada_mode_text() {
        for m in [FadaMode::Off, FadaMode::LossOnly, FadaMode::LossAndCost] {
            assert_eq!(m.to_string().parse::<FadaMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{m}\""));
        }
        assert!("both".parse::<FadaMode>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let partial: TrainConfig = serde_json::from_str(r#"{"steps": 5, "fada": "off"}"#).unwrap();
        assert_eq!((partial.steps, partial.fada), (5, FadaMode::Off));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 5}"#).is_err());
    }
}
