//! Single-threaded f32 timing of one attention layer, next to its analytic
//! and counted multiply-accumulates.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{count_flops, decomposed_layer, ipm_attn, original_cross_attn, AttnConfig, DecomposedLayer, IpmWindows, SiteWeights, Variant};
use crate::error::{Error, Result};
use crate::geometry::{BevLayout, CameraModel};
use crate::layers::uniform_tensor;
use crate::numerics::{ParamStore, Tape, Tensor};

/// IPM window used when benchmarking the IPM variant.
pub const IPM_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n_a: usize,
    pub n_b: usize,
    pub lanes: usize,
    pub channels: usize,
    pub variant: Variant,
    /// Timed runs; the reported time is their median.
    pub repeats: usize,
    /// Untimed runs before the timed ones.
    pub warmup: usize,
    pub seed: u64,
}

impl BenchConfig {
    /// One attention layer at `n_a`, `n_b`, `L`, `C`.
    pub fn new(n_a: usize, n_b: usize, lanes: usize, channels: usize, variant: Variant, repeats: usize) -> Self {
        Self { n_a, n_b, lanes, channels, variant, repeats, warmup: 2, seed: 0 }
    }

    pub fn attn_config(&self) -> AttnConfig {
        AttnConfig {
            image_hw: near_square(self.n_a),
            bev_hw: near_square(self.n_b),
            lanes: self.lanes,
            channels: self.channels,
            layers: 1,
            ipm_window: IPM_WINDOW,
        }
    }
}

/// `(h, w)` with `h·w = n`, `h ≤ w` and `h` as large as possible.
pub fn near_square(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && n % h != 0 {
        h -= 1;
    }
    let h = h.max(1);
    (h, n / h)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: Variant,
    pub analytic_macs: u64,
    pub measured_macs: u64,
    pub median_seconds: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "variant,analytic_macs,measured_macs,median_seconds";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.variant, self.analytic_macs, self.measured_macs, self.median_seconds)
    }
}

enum Sites {
    Decomposed(DecomposedLayer),
    Original(SiteWeights, SiteWeights),
    Ipm(SiteWeights, IpmWindows),
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs the layer `warmup + repeats` times on fixed random inputs.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchRow> {
    if cfg.repeats == 0 {
        return Err(Error::Config("at least one timed repeat is needed".into()));
    }
    let acfg = cfg.attn_config();
    let analytic = count_flops(&acfg, cfg.variant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.channels;
    let mut store = ParamStore::new();
    let sites = match cfg.variant {
        Variant::Decomposed => Sites::Decomposed(DecomposedLayer::register(&mut store, "attn", c, &mut rng)?),
        Variant::Original => Sites::Original(
            SiteWeights::register(&mut store, "self", c, &mut rng)?,
            SiteWeights::register(&mut store, "cross", c, &mut rng)?,
        ),
        Variant::Ipm => {
            let layout = BevLayout::new(acfg.bev_hw.0, acfg.bev_hw.1, (-10.0, 10.0), (3.0, 103.0))?;
            let cam = CameraModel::synthetic(acfg.image_hw)?;
            Sites::Ipm(SiteWeights::register(&mut store, "ipm", c, &mut rng)?, IpmWindows::new(&layout, &cam, IPM_WINDOW)?)
        }
    };
    let image: Tensor<f32> = uniform_tensor(&[cfg.n_a, c], 1.0, &mut rng)?.cast();
    let bev: Tensor<f32> = uniform_tensor(&[cfg.n_b, c], 1.0, &mut rng)?.cast();
    let lanes: Tensor<f32> = uniform_tensor(&[cfg.lanes.max(1), c], 1.0, &mut rng)?.cast();

    let once = || -> Result<u64> {
        let mut tape = Tape::<f32>::new();
        let i = tape.constant(image.clone());
        let b = tape.constant(bev.clone());
        let q = tape.constant(lanes.clone());
        match &sites {
            Sites::Decomposed(layer) => {
                decomposed_layer(&mut tape, &store, layer, q, i, b, false)?;
            }
            Sites::Original(s, x) => {
                original_cross_attn(&mut tape, &store, s, x, b, i)?;
            }
            Sites::Ipm(s, w) => {
                ipm_attn(&mut tape, &store, s, b, i, w)?;
            }
        }
        Ok(tape.flops().count())
    };
    for _ in 0..cfg.warmup {
        once()?;
    }
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut measured = 0;
    for _ in 0..cfg.repeats {
        let t = Instant::now();
        measured = once()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(BenchRow { variant: cfg.variant, analytic_macs: analytic, measured_macs: measured, median_seconds: median(&mut times) })
}
