//! Parameterized building blocks shared by the model components.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Activation, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Uniform initialization in `[-scale, scale]`.
pub fn uniform_tensor<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..=scale))
}

/// Affine map `x·W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights uniform in `±scale/sqrt(fan_in)`, zero bias.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = scale / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(&[fan_in, fan_out], bound, rng)?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])?)?;
        Ok(Self { weight, bias, fan_in, fan_out })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }
}

/// Stack of [`Linear`] layers with an activation between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("mlp `{name}` needs at least two widths")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::register(store, &format!("{name}.{i}"), w[0], w[1], 1.0, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, activation })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, store, h)?;
            if i + 1 < self.layers.len() && self.activation == Activation::Relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// The weights as plain tensors, for the non-differentiable reference path.
    pub fn tensors(&self, store: &ParamStore) -> Vec<(Tensor, Tensor)> {
        self.layers
            .iter()
            .map(|l| (store.get(l.weight).clone(), store.get(l.bias).clone()))
            .collect()
    }
}
