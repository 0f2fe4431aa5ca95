//! Dense `f64` tensors, a reverse-mode tape, and a central-difference
//! gradient checker. Every model computation is expressed through [`Tape`].

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{softmax_lastdim, Tensor};

pub(crate) use tape::{floored_ln, js_kernel, sigmoid};

use thiserror::Error;

/// Floor applied inside logarithms and divisions.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function is not deterministic: probes gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("{0}")]
    Contract(String),
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// (parameter index, entry index) of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compares tape gradients of `f` against central differences with step `eps`
/// for every entry of every tensor in `params`.
///
/// `f` receives a fresh tape with the parameters already recorded (in order)
/// and must return the scalar loss node.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(NumericsError::Contract(format!(
            "grad_check eps must be positive, got {eps}"
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| tape.leaf(p.clone().with_requires_grad(false)))
            .collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.scalar(loss);
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    drop(tape);

    let again = eval(params)?;
    if again.to_bits() != base.to_bits() {
        return Err(NumericsError::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            probe[pi].data_mut()[e] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[e] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grads[e];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = (pi, e);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
