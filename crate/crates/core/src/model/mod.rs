//! Multi-view transformer with object queries. Each layer runs frame
//! attention per view, global attention over all views, query cross-attention
//! into the tokens, and query self-attention. Heads decode cameras, depth,
//! half-resolution instance features, and class logits.

mod params;

pub use params::{
    load_checkpoint, save_checkpoint, CheckpointError, Params, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{sigmoid, NumericsError, Tape, Var};
use params::Initializer;

/// Camera token plus register tokens prepended to every view.
pub const SPECIAL_TOKENS: usize = 5;
pub const REGISTER_TOKENS: usize = 4;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error("parameter {0} missing")]
    MissingParam(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub queries: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub mask_threshold: f64,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 64,
            heads: 4,
            patch: 8,
            queries: 16,
            classes: 4,
            height: 64,
            width: 64,
            mask_threshold: 0.5,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for end-to-end gradient checks.
    pub fn minimal() -> Self {
        Self {
            layers: 2,
            dim: 16,
            heads: 2,
            patch: 8,
            queries: 4,
            classes: 2,
            height: 16,
            width: 16,
            mask_threshold: 0.5,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.patch < 2 || self.patch % 2 != 0 {
            return fail(format!("patch {} must be even and at least 2", self.patch));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!(
                "{}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if self.layers == 0 || self.queries == 0 || self.classes == 0 || self.mlp_ratio == 0 {
            return fail("layers, queries, classes and mlp_ratio must be positive".into());
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return fail(format!(
                "mask threshold {} outside (0, 1)",
                self.mask_threshold
            ));
        }
        Ok(())
    }

    pub fn patches_per_view(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn tokens_per_view(&self) -> usize {
        self.patches_per_view() + SPECIAL_TOKENS
    }

    /// Feature/mask resolution `(H/2, W/2)`.
    pub fn half_res(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    /// `[0, K+5, 2(K+5), .., N(K+5)]`
    pub fn view_bounds(&self, views: usize) -> Vec<usize> {
        (0..=views).map(|i| i * self.tokens_per_view()).collect()
    }
}

/// Parameters bound to a tape for one pass.
pub struct Bound<'a> {
    params: &'a Params,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Tape handles in parameter registration order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub views: usize,
    pub bounds: Vec<usize>,
    /// `T^(0) .. T^(L)`, each `[N(K+5), d]`.
    pub tokens: Vec<Var>,
    /// Head-averaged cross-attention per layer, each `[O, N(K+5)]`.
    pub attention: Vec<Var>,
    /// Final queries `[O, d]`.
    pub queries: Var,
    /// `[N, 9]`: quaternion, translation, (vertical, horizontal) fov.
    pub cameras: Var,
    /// View-major `N·H·W` depths.
    pub depths: Var,
    /// Pixel-major `[N·h·w, d]` instance features at half resolution.
    pub features: Var,
    /// `[O, C+1]`, index `C` is no-object.
    pub class_logits: Var,
    /// `[O, N·h·w]`, flattened view-major.
    pub mask_logits: Var,
}

/// Token and query state after the last layer.
#[derive(Debug, Clone)]
pub struct Aggregated {
    pub views: usize,
    pub bounds: Vec<usize>,
    pub tokens: Vec<Var>,
    pub attention: Vec<Var>,
    pub queries: Var,
}

/// Plain values of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub views: usize,
    pub view_bounds: Vec<usize>,
    pub cameras: Vec<[f64; 9]>,
    /// Per view, `H×W` row-major.
    pub depths: Vec<Vec<f64>>,
    /// Per view, channel-major `d × h × w`.
    pub features: Vec<Vec<f64>>,
    pub class_logits: Vec<Vec<f64>>,
    /// Per query, flat `N·h·w` mask logits.
    pub mask_logits: Vec<Vec<f64>>,
    /// `[layer][query][token]` head-averaged cross-attention rows.
    pub attention: Vec<Vec<Vec<f64>>>,
}

impl ModelOutputs {
    pub fn extract(tape: &Tape, f: &Forward, cfg: &ModelConfig) -> Self {
        let (h, w) = (cfg.height, cfg.width);
        let (hh, hw) = cfg.half_res();
        let d = cfg.dim;
        let rows = |v: Var, n: usize| -> Vec<Vec<f64>> {
            tape.data(v).chunks(n).map(<[f64]>::to_vec).collect()
        };
        let feats = tape.data(f.features);
        let features = (0..f.views)
            .map(|i| {
                let mut out = vec![0.0; d * hh * hw];
                for p in 0..hh * hw {
                    let src = &feats[(i * hh * hw + p) * d..(i * hh * hw + p + 1) * d];
                    for (c, &v) in src.iter().enumerate() {
                        out[c * hh * hw + p] = v;
                    }
                }
                out
            })
            .collect();
        let tokens = f.bounds[f.views];
        Self {
            views: f.views,
            view_bounds: f.bounds.clone(),
            cameras: tape
                .data(f.cameras)
                .chunks(9)
                .map(|c| c.try_into().expect("9 values"))
                .collect(),
            depths: rows(f.depths, h * w),
            features,
            class_logits: rows(f.class_logits, cfg.classes + 1),
            mask_logits: rows(f.mask_logits, f.views * hh * hw),
            attention: f.attention.iter().map(|&a| rows(a, tokens)).collect(),
        }
    }

    /// Per query, per view mask probabilities `σ(q̂·F)`.
    pub fn mask_probs(&self) -> Vec<Vec<f64>> {
        self.mask_logits
            .iter()
            .map(|r| r.iter().map(|&z| sigmoid(z)).collect())
            .collect()
    }
}

/// `M = σ(q̂ᵀ F)` for one query against one view's channel-major features.
pub fn mask_probability(
    query: &[f64],
    features: &[f64],
    dim: usize,
) -> Result<Vec<f64>, ModelError> {
    if query.len() != dim || features.len() % dim != 0 {
        return Err(ModelError::Input(format!(
            "query of {} against features of {} with d = {dim}",
            query.len(),
            features.len()
        )));
    }
    let n = features.len() / dim;
    Ok((0..n)
        .map(|p| sigmoid((0..dim).map(|c| query[c] * features[c * n + p]).sum()))
        .collect())
}

/// Attention probabilities `[heads, n, m]` and output `[n, d]` of one block.
pub struct AttentionOut {
    pub output: Var,
    pub probs: Vec<Var>,
}

fn linear(tape: &mut Tape, b: &Bound, name: &str, x: Var, bias: bool) -> Result<Var, ModelError> {
    let w = b.var(&format!("{name}.w"))?;
    let y = tape.matmul(x, w)?;
    if bias {
        let bv = b.var(&format!("{name}.b"))?;
        Ok(tape.add_row(y, bv)?)
    } else {
        Ok(y)
    }
}

fn norm(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let g = b.var(&format!("{name}.gamma"))?;
    let be = b.var(&format!("{name}.beta"))?;
    Ok(tape.layer_norm(x, g, be, LN_EPS)?)
}

fn mlp(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let h = norm(tape, b, &format!("{name}.ln2"), x)?;
    let h = linear(tape, b, &format!("{name}.fc1"), h, true)?;
    let h = tape.gelu(h);
    let h = linear(tape, b, &format!("{name}.fc2"), h, true)?;
    Ok(tape.add(x, h)?)
}

fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var), ModelError> {
    let d = tape.shape(q)[1];
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let s = tape.head_scores(q, k, heads, scale)?;
    let p = tape.softmax_lastdim(s);
    Ok((tape.head_mix(p, v, heads)?, p))
}

/// Pre-norm multi-head self-attention with residual, restricted to each
/// `[bounds[i], bounds[i+1])` row block, followed by a pre-norm MLP with
/// residual. A single block spanning all rows is global attention.
pub fn attention_block(
    tape: &mut Tape,
    b: &Bound,
    name: &str,
    x: Var,
    bounds: &[usize],
    heads: usize,
) -> Result<AttentionOut, ModelError> {
    let h = norm(tape, b, &format!("{name}.ln1"), x)?;
    let q = linear(tape, b, &format!("{name}.q"), h, true)?;
    let k = linear(tape, b, &format!("{name}.k"), h, true)?;
    let v = linear(tape, b, &format!("{name}.v"), h, true)?;
    let mut mixed = Vec::with_capacity(bounds.len() - 1);
    let mut probs = Vec::with_capacity(bounds.len() - 1);
    if bounds.len() == 2 {
        let (m, p) = attend(tape, q, k, v, heads)?;
        mixed.push(m);
        probs.push(p);
    } else {
        for w in bounds.windows(2) {
            let (s, n) = (w[0], w[1] - w[0]);
            let (qi, ki, vi) = (
                tape.slice_rows(q, s, n)?,
                tape.slice_rows(k, s, n)?,
                tape.slice_rows(v, s, n)?,
            );
            let (m, p) = attend(tape, qi, ki, vi, heads)?;
            mixed.push(m);
            probs.push(p);
        }
    }
    let mix = if mixed.len() == 1 {
        mixed[0]
    } else {
        tape.concat_rows(&mixed)?
    };
    let o = linear(tape, b, &format!("{name}.o"), mix, true)?;
    let x = tape.add(x, o)?;
    Ok(AttentionOut {
        output: mlp(tape, b, name, x)?,
        probs,
    })
}

/// Query cross-attention into the tokens: `q' = q + (A T W_v) W_o` per head,
/// returning the updated queries and the head-averaged weights `[O, T]`.
pub fn cross_attention(
    tape: &mut Tape,
    b: &Bound,
    name: &str,
    queries: Var,
    tokens: Var,
    heads: usize,
) -> Result<(Var, Var), ModelError> {
    let q = linear(tape, b, &format!("{name}.q"), queries, false)?;
    let k = linear(tape, b, &format!("{name}.k"), tokens, false)?;
    let v = linear(tape, b, &format!("{name}.v"), tokens, false)?;
    let (mix, p) = attend(tape, q, k, v, heads)?;
    let a = tape.head_mean(p)?;
    let o = linear(tape, b, &format!("{name}.o"), mix, false)?;
    Ok((tape.add(queries, o)?, a))
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

fn init_attention(init: &mut Initializer, name: &str, d: usize, hidden: usize) {
    init.layer_norm(&format!("{name}.ln1"), d);
    for p in ["q", "k", "v", "o"] {
        init.linear(&format!("{name}.{p}"), d, d, true);
    }
    init.layer_norm(&format!("{name}.ln2"), d);
    init.linear(&format!("{name}.fc1"), d, hidden, true);
    init.linear(&format!("{name}.fc2"), hidden, d, true);
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.dim;
        let hidden = d * config.mlp_ratio;
        let p = config.patch;
        let mut init = Initializer::new(seed);
        init.linear("embed", p * p * 3, d, true);
        init.normal("embed.pos".into(), &[config.patches_per_view(), d], 0.02);
        init.normal("special".into(), &[SPECIAL_TOKENS, d], 0.02);
        init.normal("special.ref".into(), &[SPECIAL_TOKENS, d], 0.02);
        init.normal("queries".into(), &[config.queries, d], 0.02);
        for l in 0..config.layers {
            init_attention(&mut init, &format!("layer{l}.frame"), d, hidden);
            init_attention(&mut init, &format!("layer{l}.global"), d, hidden);
            for p in ["q", "k", "v", "o"] {
                init.linear(&format!("layer{l}.cross.{p}"), d, d, false);
            }
            init_attention(&mut init, &format!("layer{l}.qself"), d, hidden);
        }
        init.layer_norm("final", d);
        init.linear("camera.fc1", d, d, true);
        init.linear("camera.fc2", d, 9, true);
        init.linear("depth", d, p * p, false);
        init.constant("depth.bias", &[1], 1.5);
        init.linear("feature", d, (p / 2) * (p / 2) * d, true);
        init.linear("class.fc1", d, d, true);
        init.linear("class.fc2", d, config.classes + 1, true);
        Ok(Self {
            config,
            params: init.params,
        })
    }

    pub fn from_parts(config: ModelConfig, params: Params) -> Result<Self, ModelError> {
        config.validate()?;
        let reference = Self::new(config, 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(ModelError::Config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(ModelError::MissingParam(name.to_string())),
            }
        }
        Ok(Self { config, params })
    }

    /// Records every parameter on `tape`; `trainable` controls gradient tracking.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Bound<'a> {
        let vars = self
            .params
            .tensors()
            .map(|t| {
                if trainable {
                    tape.param(t)
                } else {
                    tape.leaf(t.clone().with_requires_grad(false))
                }
            })
            .collect();
        Bound {
            params: &self.params,
            vars,
        }
    }

    fn check_images(&self, images: &[&[f64]]) -> Result<(), ModelError> {
        let c = &self.config;
        if images.len() < 2 {
            return Err(ModelError::Input(format!(
                "{} views given, at least 2 required",
                images.len()
            )));
        }
        if let Some((i, img)) = images
            .iter()
            .enumerate()
            .find(|(_, im)| im.len() != c.height * c.width * 3)
        {
            return Err(ModelError::Input(format!(
                "view {i} has {} values, expected {}x{}x3",
                img.len(),
                c.height,
                c.width
            )));
        }
        Ok(())
    }

    /// Flattened patches `[N·K, patch²·3]`, patch-row-major then channel.
    pub fn patchify(&self, images: &[&[f64]]) -> Vec<f64> {
        let c = &self.config;
        let (p, w) = (c.patch, c.width);
        let (ph, pw) = (c.height / p, c.width / p);
        let mut out = Vec::with_capacity(images.len() * c.height * c.width * 3);
        for img in images {
            for py in 0..ph {
                for px in 0..pw {
                    for y in 0..p {
                        let row = (py * p + y) * w + px * p;
                        out.extend_from_slice(&img[row * 3..(row + p) * 3]);
                    }
                }
            }
        }
        out
    }

    /// Initial tokens `T^(0)`: per view `[camera, registers.., patches..]`.
    pub fn embed(&self, tape: &mut Tape, b: &Bound, images: &[&[f64]]) -> Result<Var, ModelError> {
        self.check_images(images)?;
        let c = &self.config;
        let (n, k, d) = (images.len(), c.patches_per_view(), c.dim);
        let raw = tape.constant(vec![n * k, c.patch * c.patch * 3], self.patchify(images))?;
        let e = linear(tape, b, "embed", raw, true)?;
        let pos_index: Vec<usize> = (0..n).flat_map(|_| 0..k * d).collect();
        let pos = tape.gather(b.var("embed.pos")?, pos_index, vec![n * k, d])?;
        let e = tape.add(e, pos)?;
        let special = b.var("special")?;
        let reference = b.var("special.ref")?;
        let reference = tape.add(special, reference)?;
        let mut pieces = Vec::with_capacity(2 * n);
        for i in 0..n {
            pieces.push(if i == 0 { reference } else { special });
            pieces.push(tape.slice_rows(e, i * k, k)?);
        }
        Ok(tape.concat_rows(&pieces)?)
    }

    /// Wraps tape handles created by the caller, one per parameter in
    /// registration order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>, ModelError> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Input(format!(
                "{} handles for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(Bound {
            params: &self.params,
            vars,
        })
    }

    /// Alternating frame/global attention over the tokens, with the query
    /// decoder interleaved layer by layer.
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        b: &Bound,
        t0: Var,
        views: usize,
    ) -> Result<Aggregated, ModelError> {
        let c = self.config;
        let bounds = c.view_bounds(views);
        let global = [0, bounds[views]];
        let mut tokens = vec![t0];
        let mut attention = Vec::with_capacity(c.layers);
        let mut q = b.var("queries")?;
        let qbounds = [0, c.queries];
        let mut t = t0;
        for l in 0..c.layers {
            t = attention_block(tape, b, &format!("layer{l}.frame"), t, &bounds, c.heads)?.output;
            t = attention_block(tape, b, &format!("layer{l}.global"), t, &global, c.heads)?.output;
            let (q1, a) = cross_attention(tape, b, &format!("layer{l}.cross"), q, t, c.heads)?;
            q = attention_block(tape, b, &format!("layer{l}.qself"), q1, &qbounds, c.heads)?.output;
            tokens.push(t);
            attention.push(a);
        }
        Ok(Aggregated {
            views,
            bounds,
            tokens,
            attention,
            queries: q,
        })
    }

    /// Prediction heads on aggregated tokens and queries.
    pub fn decode(
        &self,
        tape: &mut Tape,
        b: &Bound,
        agg: Aggregated,
    ) -> Result<Forward, ModelError> {
        let last = *agg.tokens.last().expect("at least the embedding");
        let z = norm(tape, b, "final", last)?;
        let heads = self.heads(tape, b, z, agg.queries, agg.views)?;
        Ok(Forward {
            views: agg.views,
            bounds: agg.bounds,
            tokens: agg.tokens,
            attention: agg.attention,
            queries: agg.queries,
            cameras: heads.0,
            depths: heads.1,
            features: heads.2,
            class_logits: heads.3,
            mask_logits: heads.4,
        })
    }

    /// Full forward pass on `N ≥ 2` RGB views (`H×W×3` each).
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        images: &[&[f64]],
    ) -> Result<Forward, ModelError> {
        let t0 = self.embed(tape, b, images)?;
        let agg = self.aggregate(tape, b, t0, images.len())?;
        self.decode(tape, b, agg)
    }

    fn heads(
        &self,
        tape: &mut Tape,
        b: &Bound,
        z: Var,
        q: Var,
        n: usize,
    ) -> Result<(Var, Var, Var, Var, Var), ModelError> {
        let c = &self.config;
        let (k, d, p, tv) = (c.patches_per_view(), c.dim, c.patch, c.tokens_per_view());
        let cam_index: Vec<usize> = (0..n).flat_map(|i| i * tv * d..(i * tv + 1) * d).collect();
        let cam_tokens = tape.gather(z, cam_index, vec![n, d])?;
        let patch_index: Vec<usize> = (0..n)
            .flat_map(|i| (i * tv + SPECIAL_TOKENS) * d..(i + 1) * tv * d)
            .collect();
        let patch_tokens = tape.gather(z, patch_index, vec![n * k, d])?;

        let cameras = self.camera_head(tape, b, cam_tokens)?;

        // depth: per-patch linear to patch² values, shuffled into pixels
        let pw = c.width / p;
        let dp = linear(tape, b, "depth", patch_tokens, false)?;
        let (h, w) = (c.height, c.width);
        let mut index = Vec::with_capacity(n * h * w);
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    index.push((i * k + (y / p) * pw + x / p) * p * p + (y % p) * p + x % p);
                }
            }
        }
        let dpix = tape.gather(dp, index, vec![n * h * w, 1])?;
        let dpix = tape.add_row(dpix, b.var("depth.bias")?)?;
        let dpix = tape.exp(dpix);
        let depths = tape.reshape(dpix, vec![n * h * w])?;

        // features: per-patch linear to (patch/2)² d-vectors at half resolution
        let s = p / 2;
        let fp = linear(tape, b, "feature", patch_tokens, true)?;
        let (hh, hw) = c.half_res();
        let mut index = Vec::with_capacity(n * hh * hw * d);
        for i in 0..n {
            for y in 0..hh {
                for x in 0..hw {
                    let base = ((i * k + (y / s) * pw + x / s) * s * s + (y % s) * s + x % s) * d;
                    index.extend(base..base + d);
                }
            }
        }
        let features = tape.gather(fp, index, vec![n * hh * hw, d])?;
        let mask_logits = tape.matmul_nt(q, features)?;

        let hcls = linear(tape, b, "class.fc1", q, true)?;
        let hcls = tape.gelu(hcls);
        let class_logits = linear(tape, b, "class.fc2", hcls, true)?;
        Ok((cameras, depths, features, class_logits, mask_logits))
    }

    /// Unit quaternion, free translation, fov squashed into `(0, π)`.
    fn camera_head(&self, tape: &mut Tape, b: &Bound, tokens: Var) -> Result<Var, ModelError> {
        let n = tape.shape(tokens)[0];
        let h = linear(tape, b, "camera.fc1", tokens, true)?;
        let h = tape.gelu(h);
        let raw = linear(tape, b, "camera.fc2", h, true)?;
        let cols = |range: std::ops::Range<usize>| -> Vec<usize> {
            (0..n)
                .flat_map(|i| range.clone().map(move |c| i * 9 + c))
                .collect()
        };
        let quat = tape.gather(raw, cols(0..4), vec![n, 4])?;
        let quat = tape.normalize_rows(quat);
        let trans = tape.gather(raw, cols(4..7), vec![n * 3, 1])?;
        let fov = tape.gather(raw, cols(7..9), vec![n * 2, 1])?;
        let fov = tape.sigmoid(fov);
        let fov = tape.scale(fov, std::f64::consts::PI);
        let quat = tape.reshape(quat, vec![n * 4, 1])?;
        let stacked = tape.concat_rows(&[quat, trans, fov])?;
        let index: Vec<usize> = (0..n)
            .flat_map(|i| {
                (0..9).map(move |c| match c {
                    0..=3 => i * 4 + c,
                    4..=6 => 4 * n + i * 3 + c - 4,
                    _ => 7 * n + i * 2 + c - 7,
                })
            })
            .collect();
        Ok(tape.gather(stacked, index, vec![n, 9])?)
    }

    /// Inference-only forward on a fresh tape.
    pub fn predict(&self, images: &[&[f64]]) -> Result<ModelOutputs, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let f = self.forward(&mut tape, &b, images)?;
        Ok(ModelOutputs::extract(&tape, &f, &self.config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_arithmetic() {
        let c = ModelConfig {
            height: 32,
            width: 32,
            patch: 8,
            ..ModelConfig::default()
        };
        assert_eq!(c.patches_per_view(), 16);
        assert_eq!(c.tokens_per_view(), 21);
        assert_eq!(c.view_bounds(2), vec![0, 21, 42]);
        assert!(ModelConfig { patch: 7, ..c }.validate().is_err());
        assert!(ModelConfig { height: 36, ..c }.validate().is_err());
        assert!(ModelConfig { heads: 3, ..c }.validate().is_err());
        assert!(ModelConfig {
            mask_threshold: 1.0,
            ..c
        }
        .validate()
        .is_err());
    }

    #[test]
    fn mask_probability_examples() {
        let f = [0.3, -1.0, 2.0, 0.5, 0.1, -0.4];
        assert_eq!(mask_probability(&[0.0, 0.0], &f, 2).unwrap(), vec![0.5; 3]);
        let m1 = mask_probability(&[1.0, -2.0], &f, 2).unwrap();
        let m2 = mask_probability(&[2.0, -4.0], &f, 2).unwrap();
        for (a, b) in m1.iter().zip(&m2) {
            assert!(*a > 0.0 && *a < 1.0);
            assert!((b - 0.5).abs() >= (a - 0.5).abs());
            assert_eq!(*a > 0.5, *b > 0.5);
        }
        assert!(mask_probability(&[1.0], &f, 2).is_err());
    }
}
