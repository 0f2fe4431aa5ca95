use crate::model::Params;

/// Linear warmup over `warmup` steps, then cosine decay to zero at `steps`.
pub fn learning_rate(step: usize, steps: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = steps.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adam moments with decoupled weight decay on matrices (rank ≥ 2).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &[Vec<f64>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = if p.shape().len() >= 2 {
                lr * weight_decay
            } else {
                0.0
            };
            for (((x, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= decay * *x + lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}
