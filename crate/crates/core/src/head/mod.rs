//! Dynamic-kernel detection head: per-lane kernels and scores from the lane
//! features, offset maps by 1×1 convolution, and voting-based decoding.

mod targets;
mod vote;

pub use targets::{gt_targets, LaneTarget, Targets, TARGET_RESAMPLE_STEP};
pub use vote::{round_half_up, vote_bev, vote_iv, DetectedLane, LaneDetections, VoteParams};

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::layers::Mlp;
use crate::numerics::{Activation, ParamStore, Scalar, Tape, Var};

/// Kernel and score generators.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub kernel_iv: Mlp,
    pub kernel_bev: Mlp,
    pub score: Mlp,
    pub channels: usize,
    pub classes: usize,
}

impl HeadWeights {
    /// Three 2-layer MLPs with hidden width `C`.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels == 0 || classes == 0 {
            return Err(Error::Config("head needs positive width and class count".into()));
        }
        let c = channels;
        Ok(Self {
            kernel_iv: Mlp::register(store, &format!("{name}.kernel_iv"), &[c, c, 2 * c], Activation::Relu, rng)?,
            kernel_bev: Mlp::register(store, &format!("{name}.kernel_bev"), &[c, c, 3 * c], Activation::Relu, rng)?,
            score: Mlp::register(store, &format!("{name}.score"), &[c, c, 2 + classes], Activation::Relu, rng)?,
            channels,
            classes,
        })
    }
}

/// `K_a: [L, C, 2]`, `K_b: [L, C, 3]`, `S: [L, 2 + N]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub kernels_iv: Var,
    pub kernels_bev: Var,
    pub scores: Var,
}

/// Kernels and scores from lane features `O: [L, C]`. Score columns 0–1
/// (background, foreground) and the class block are normalized separately.
pub fn gen_kernels_scores<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    head: &HeadWeights,
    lanes: Var,
) -> Result<HeadOutput> {
    let (l, c) = match tape.shape(lanes) {
        &[l, c] => (l, c),
        s => return Err(dim_err!("lane features must be [L, C], got {s:?}")),
    };
    if c != head.channels {
        return Err(dim_err!("lane width {c} vs head width {}", head.channels));
    }
    let ka = head.kernel_iv.apply(tape, store, lanes)?;
    let kernels_iv = tape.reshape(ka, &[l, c, 2])?;
    let kb = head.kernel_bev.apply(tape, store, lanes)?;
    let kernels_bev = tape.reshape(kb, &[l, c, 3])?;
    let logits = head.score.apply(tape, store, lanes)?;
    let obj = tape.narrow(logits, 1, 0, 2)?;
    let obj = tape.softmax(obj, 1)?;
    let cls = tape.narrow(logits, 1, 2, head.classes)?;
    let cls = tape.softmax(cls, 1)?;
    let scores = tape.concat(obj, cls, 1)?;
    Ok(HeadOutput { kernels_iv, kernels_bev, scores })
}

/// `R_a: [L, N_a, 2]` and `R_b: [L, N_b, 3]`.
#[derive(Debug, Clone, Copy)]
pub struct OffsetMaps {
    pub image: Var,
    pub bev: Var,
}

/// 1×1 dynamic convolution of image features `M: [N_a, C]` and BEV features
/// `V: [N_b, C]` with every lane's kernels.
pub fn conv_offsets<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    bev: Var,
    head: &HeadOutput,
) -> Result<OffsetMaps> {
    Ok(OffsetMaps {
        image: tape.dyn_conv(image, head.kernels_iv)?,
        bev: tape.dyn_conv(bev, head.kernels_bev)?,
    })
}
