//! Dense tensors, eager reverse-mode differentiation and MAC counting.

mod flops;
mod params;
mod tape;
mod tensor;

pub use flops::FlopCounter;
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{mlp, Activation, Scalar, Tensor};

use crate::error::Result;

/// Relative error of `analytic` against `numeric`, scaled by the larger of
/// the two infinity norms so near-zero entries do not dominate.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Central finite differences of a scalar function of several tensors.
pub fn numeric_gradient(
    inputs: &[Tensor],
    eps: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape())?;
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let up = f(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let down = f(&work)?;
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}
