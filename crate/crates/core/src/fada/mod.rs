//! Frame-level attention distribution alignment: per-frame marginals of query
//! cross-attention, Jensen-Shannon costs against area-proportional targets,
//! and the layer-averaged alignment loss.

use std::cell::Cell;

use thiserror::Error;

use crate::numerics::{floored_ln, js_kernel, NumericsError, Tape, Var};
use crate::scenegen::TargetVisibility;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FadaError {
    #[error("view boundaries {0:?} do not partition the token sequence")]
    Partition(Vec<usize>),
    #[error("distribution has negative entry {value} at index {index}")]
    Domain { index: usize, value: f64 },
    #[error("distribution sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

thread_local! {
    static EVALUATIONS: Cell<usize> = const { Cell::new(0) };
}

fn tick() {
    EVALUATIONS.with(|c| c.set(c.get() + 1));
}

/// Number of alignment computations (marginals, divergences, costs, losses)
/// performed on the current thread since the last reset.
pub fn evaluation_count() -> usize {
    EVALUATIONS.with(Cell::get)
}

pub fn reset_evaluation_count() {
    EVALUATIONS.with(|c| c.set(0));
}

/// A query's attention mass per frame at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDistribution {
    pub probs: Vec<f64>,
    pub layer: usize,
    pub query: usize,
}

/// Checks that `bounds = [0, b1, .., total]` is strictly increasing.
pub fn check_bounds(bounds: &[usize], total: usize) -> Result<(), FadaError> {
    let ok = bounds.len() >= 2
        && bounds[0] == 0
        && bounds[bounds.len() - 1] == total
        && bounds.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(FadaError::Partition(bounds.to_vec()))
    }
}

/// Sums a token-level attention row over each view's token range. Camera and
/// register tokens belong to their view.
pub fn marginalize_frames(row: &[f64], bounds: &[usize]) -> Result<Vec<f64>, FadaError> {
    check_bounds(bounds, row.len())?;
    tick();
    Ok(bounds
        .windows(2)
        .map(|w| row[w[0]..w[1]].iter().sum())
        .collect())
}

fn normalized(p: &[f64]) -> Result<Vec<f64>, FadaError> {
    if let Some((index, &value)) = p.iter().enumerate().find(|(_, v)| v.is_nan() || **v < 0.0) {
        return Err(FadaError::Domain { index, value });
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(FadaError::NotNormalized(total));
    }
    Ok(p.iter().map(|v| v / total).collect())
}

/// Jensen-Shannon divergence (natural log) of two distributions, each
/// renormalized to sum exactly to one. Result lies in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64, FadaError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(FadaError::Contract(format!(
            "length mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let (p, q) = (normalized(p)?, normalized(q)?);
    tick();
    Ok(js_kernel(&p, &q).min(std::f64::consts::LN_2))
}

/// Kullback-Leibler divergence with `0·log 0 = 0`, used by oracles and diagnostics.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (floored_ln(*a) - floored_ln(*b)))
        .sum()
}

/// `O × G` matrix of layer-averaged divergences divided by the frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct FadaCostBlock {
    pub queries: usize,
    pub targets: usize,
    /// Row-major `queries × targets`.
    pub costs: Vec<f64>,
}

impl FadaCostBlock {
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.costs[j * self.targets + k]
    }
}

/// `layers[l][j]` is the frame distribution of query `j` at layer `l`.
pub fn fada_cost_matrix(
    layers: &[Vec<Vec<f64>>],
    targets: &[TargetVisibility],
) -> Result<FadaCostBlock, FadaError> {
    let first = layers
        .first()
        .ok_or_else(|| FadaError::Contract("no recorded attention layers".into()))?;
    let queries = first.len();
    let frames = first.first().map_or(0, Vec::len);
    for (l, layer) in layers.iter().enumerate() {
        if layer.len() != queries || layer.iter().any(|r| r.len() != frames) {
            return Err(FadaError::Contract(format!(
                "layer {l} record has inconsistent shape"
            )));
        }
    }
    if let Some(t) = targets.iter().find(|t| t.probs.len() != frames) {
        return Err(FadaError::Contract(format!(
            "target over {} frames, attention over {frames}",
            t.probs.len()
        )));
    }
    let norm = (layers.len() * frames) as f64;
    let mut costs = Vec::with_capacity(queries * targets.len());
    for j in 0..queries {
        for t in targets {
            let mut total = 0.0;
            for layer in layers {
                total += js_divergence(&t.probs, &layer[j])?;
            }
            costs.push(total / norm);
        }
    }
    Ok(FadaCostBlock {
        queries,
        targets: targets.len(),
        costs,
    })
}

/// Mean alignment loss over matched `(query, target)` pairs. An empty match
/// set yields `(0, true)`; the flag marks the unsupervised case.
pub fn fada_loss(
    matches: &[(usize, usize)],
    layers: &[Vec<Vec<f64>>],
    targets: &[TargetVisibility],
) -> Result<(f64, bool), FadaError> {
    if matches.is_empty() {
        return Ok((0.0, true));
    }
    let frames = targets.first().map_or(0, |t| t.probs.len());
    let norm = (layers.len() * frames) as f64;
    let mut total = 0.0;
    for &(j, k) in matches {
        let t = targets
            .get(k)
            .ok_or_else(|| FadaError::Contract(format!("match target {k} out of range")))?;
        let mut sum = 0.0;
        for layer in layers {
            let row = layer
                .get(j)
                .ok_or_else(|| FadaError::Contract(format!("match query {j} out of range")))?;
            sum += js_divergence(&t.probs, row)?;
        }
        total += sum / norm;
    }
    Ok((total / matches.len() as f64, false))
}

/// Differentiable alignment loss from head-averaged attention rows
/// (`[O, T]` per layer) and view boundaries over the `T` tokens.
pub fn fada_loss_tape(
    tape: &mut Tape,
    attention: &[Var],
    bounds: &[usize],
    matches: &[(usize, usize)],
    targets: &[TargetVisibility],
) -> Result<Option<Var>, FadaError> {
    if matches.is_empty() || attention.is_empty() {
        return Ok(None);
    }
    tick();
    let frames = bounds.len() - 1;
    let mut index = Vec::with_capacity(matches.len() * frames);
    let mut target = Vec::with_capacity(matches.len() * frames);
    for &(j, k) in matches {
        let t = targets
            .get(k)
            .ok_or_else(|| FadaError::Contract(format!("match target {k} out of range")))?;
        if t.probs.len() != frames {
            return Err(FadaError::Contract(format!(
                "target over {} frames, {frames} views",
                t.probs.len()
            )));
        }
        index.extend((0..frames).map(|i| j * frames + i));
        target.extend_from_slice(&t.probs);
    }
    let mut total = None;
    for &a in attention {
        let marginals = tape.segment_sum(a, bounds)?;
        let rows = tape.gather(marginals, index.clone(), vec![matches.len(), frames])?;
        let js = tape.js_rows(rows, target.clone())?;
        let s = tape.sum(js);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let norm = (matches.len() * attention.len() * frames) as f64;
    Ok(total.map(|t| tape.scale(t, 1.0 / norm)))
}
