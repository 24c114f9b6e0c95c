//! Lane-mediated cross-attention between image-view features `I`, lane
//! queries `Q` and BEV queries `B`, plus the dense and IPM-windowed
//! baselines it is compared against.
//!
//! Every attention site has the same residual form
//! `x_i + Σ_j softmax_j((x_i W_θ)·(y_j W_φ)) · (y_j W_g)`
//! with its own `(W_θ, W_φ, W_g)`.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::geometry::{BevLayout, CameraModel};
use crate::layers::uniform_tensor;
use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Var};

/// Similarity and value projections of one attention site, each `C×C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteWeights {
    pub theta: ParamId,
    pub phi: ParamId,
    pub value: ParamId,
    pub channels: usize,
}

impl SiteWeights {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("attention width must be positive".into()));
        }
        let bound = 1.0 / (channels as f64).sqrt();
        let mut add = |suffix: &str, rng: &mut dyn rand::RngCore| {
            store.add(format!("{name}.{suffix}"), uniform_tensor(&[channels, channels], bound, rng)?)
        };
        Ok(Self {
            theta: add("theta", rng)?,
            phi: add("phi", rng)?,
            value: add("value", rng)?,
            channels,
        })
    }
}

fn check_width<T: Scalar>(tape: &Tape<T>, site: &SiteWeights, vars: &[Var]) -> Result<()> {
    for &v in vars {
        let s = tape.shape(v);
        if s.len() != 2 || s[1] != site.channels {
            return Err(dim_err!("expected [n, {}] features, got {s:?}", site.channels));
        }
    }
    Ok(())
}

/// Unnormalized similarities `[n, m]` and projected values `[m, C]`.
fn scores_values<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    site: &SiteWeights,
    queries: Var,
    keys: Var,
) -> Result<(Var, Var)> {
    check_width(tape, site, &[queries, keys])?;
    let theta = tape.param(store, site.theta);
    let phi = tape.param(store, site.phi);
    let value = tape.param(store, site.value);
    let q = tape.matmul(queries, theta)?;
    let k = tape.matmul(keys, phi)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let values = tape.matmul(keys, value)?;
    Ok((scores, values))
}

/// The attended term alone, without the residual.
fn attended<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    site: &SiteWeights,
    queries: Var,
    keys: Var,
) -> Result<Var> {
    let (scores, values) = scores_values(tape, store, site, queries, keys)?;
    let weights = tape.softmax(scores, 1)?;
    tape.matmul(weights, values)
}

/// Residual attention of `queries` over `keys` at one site.
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    site: &SiteWeights,
    queries: Var,
    keys: Var,
) -> Result<Var> {
    let term = attended(tape, store, site, queries, keys)?;
    tape.add(queries, term)
}

/// Lane features `O = Q + attend(I) + attend(B)`. By default the image and
/// BEV similarities are normalized separately; `joint` normalizes them
/// together over the concatenated keys.
#[allow(clippy::too_many_arguments)]
pub fn lane_cross_attn<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    from_image: &SiteWeights,
    from_bev: &SiteWeights,
    queries: Var,
    image: Var,
    bev: Var,
    joint: bool,
) -> Result<Var> {
    if !joint {
        let a = attended(tape, store, from_image, queries, image)?;
        let b = attended(tape, store, from_bev, queries, bev)?;
        let sum = tape.add(a, b)?;
        return tape.add(queries, sum);
    }
    let (si, vi) = scores_values(tape, store, from_image, queries, image)?;
    let (sb, vb) = scores_values(tape, store, from_bev, queries, bev)?;
    let n_a = tape.shape(si)[1];
    let n_b = tape.shape(sb)[1];
    let all = tape.concat(si, sb, 1)?;
    let weights = tape.softmax(all, 1)?;
    let wi = tape.narrow(weights, 1, 0, n_a)?;
    let wb = tape.narrow(weights, 1, n_a, n_b)?;
    let a = tape.matmul(wi, vi)?;
    let b = tape.matmul(wb, vb)?;
    let sum = tape.add(a, b)?;
    tape.add(queries, sum)
}

/// BEV features `V = B + attend(O)`.
pub fn bev_from_lanes<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    site: &SiteWeights,
    bev: Var,
    lanes: Var,
) -> Result<Var> {
    attend(tape, store, site, bev, lanes)
}

/// Image features `M = I + attend(O)`.
pub fn image_update<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    site: &SiteWeights,
    image: Var,
    lanes: Var,
) -> Result<Var> {
    attend(tape, store, site, image, lanes)
}

/// Parameters of one decomposed layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecomposedLayer {
    pub lane_from_image: SiteWeights,
    pub lane_from_bev: SiteWeights,
    pub bev_from_lane: SiteWeights,
    pub image_from_lane: SiteWeights,
}

impl DecomposedLayer {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            lane_from_image: SiteWeights::register(store, &format!("{name}.lane_img"), channels, rng)?,
            lane_from_bev: SiteWeights::register(store, &format!("{name}.lane_bev"), channels, rng)?,
            bev_from_lane: SiteWeights::register(store, &format!("{name}.bev_lane"), channels, rng)?,
            image_from_lane: SiteWeights::register(store, &format!("{name}.img_lane"), channels, rng)?,
        })
    }
}

/// Output of the attention stack.
#[derive(Debug, Clone, Copy)]
pub struct AttnOutput {
    /// Lane features `O`, `[L, C]`.
    pub lanes: Var,
    /// BEV features `V`, `[N_b, C]`.
    pub bev: Var,
    /// Image features `M`, `[N_a, C]`.
    pub image: Var,
}

/// One decomposed layer: lanes from image and BEV, then BEV from lanes, then
/// image from lanes.
pub fn decomposed_layer<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    layer: &DecomposedLayer,
    queries: Var,
    image: Var,
    bev: Var,
    joint: bool,
) -> Result<AttnOutput> {
    let lanes = lane_cross_attn(
        tape,
        store,
        &layer.lane_from_image,
        &layer.lane_from_bev,
        queries,
        image,
        bev,
        joint,
    )?;
    let bev = bev_from_lanes(tape, store, &layer.bev_from_lane, bev, lanes)?;
    let image = image_update(tape, store, &layer.image_from_lane, image, lanes)?;
    Ok(AttnOutput { lanes, bev, image })
}

/// Layers applied in order, each consuming the previous layer's outputs.
pub fn decomposed_stack<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    layers: &[DecomposedLayer],
    queries: Var,
    image: Var,
    bev: Var,
    joint: bool,
) -> Result<AttnOutput> {
    let mut out = AttnOutput { lanes: queries, bev, image };
    for layer in layers {
        out = decomposed_layer(tape, store, layer, out.lanes, out.image, out.bev, joint)?;
    }
    Ok(out)
}

/// Dense baseline: self-attention over the image, then every BEV cell
/// attends to every image pixel. Returns `(V, I')`.
pub fn original_cross_attn<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    self_site: &SiteWeights,
    cross_site: &SiteWeights,
    bev: Var,
    image: Var,
) -> Result<(Var, Var)> {
    let image = attend(tape, store, self_site, image, image)?;
    let bev = attend(tape, store, cross_site, bev, image)?;
    Ok((bev, image))
}

/// Image-pixel windows attended to by each BEV cell, as flat row-major
/// pixel indices `[N_b · window_len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IpmWindows {
    pub indices: Vec<usize>,
    pub window_len: usize,
    /// Reference pixel `(row, col)` per BEV cell, before window clamping.
    pub references: Vec<(usize, usize)>,
}

/// Reference pixel of every BEV cell: the projection of its `(x, y, 0)`
/// point, rounded and clamped into the image. Cells behind the camera fall
/// back to the bottom-center pixel.
pub fn ipm_references(layout: &BevLayout, cam: &CameraModel) -> Vec<(usize, usize)> {
    let (h, w) = cam.image_size();
    let mut refs = Vec::with_capacity(layout.cells());
    for r in 0..layout.rows {
        for c in 0..layout.cols {
            let (x, y) = layout.cell_xy(r, c);
            let pix = match cam.project([x, y, 0.0]) {
                Some([u, v, _]) => (
                    v.round().clamp(0.0, (h - 1) as f64) as usize,
                    u.round().clamp(0.0, (w - 1) as f64) as usize,
                ),
                None => (h - 1, w / 2),
            };
            refs.push(pix);
        }
    }
    refs
}

impl IpmWindows {
    /// `window` is an odd pixel extent; windows are shifted to lie inside
    /// the image and shrink only when the image itself is smaller.
    pub fn new(layout: &BevLayout, cam: &CameraModel, window: usize) -> Result<Self> {
        if window == 0 || window % 2 == 0 {
            return Err(Error::Config(format!("IPM window {window} must be odd")));
        }
        let (h, w) = cam.image_size();
        let (wh, ww) = (window.min(h), window.min(w));
        let references = ipm_references(layout, cam);
        let mut indices = Vec::with_capacity(references.len() * wh * ww);
        for &(r, c) in &references {
            let r0 = r.saturating_sub(window / 2).min(h - wh);
            let c0 = c.saturating_sub(window / 2).min(w - ww);
            for dr in 0..wh {
                for dc in 0..ww {
                    indices.push((r0 + dr) * w + c0 + dc);
                }
            }
        }
        Ok(Self { indices, window_len: wh * ww, references })
    }
}

/// IPM-windowed baseline: each BEV cell attends only to its window.
pub fn ipm_attn<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    site: &SiteWeights,
    bev: Var,
    image: Var,
    windows: &IpmWindows,
) -> Result<Var> {
    check_width(tape, site, &[bev, image])?;
    let n_b = tape.shape(bev)[0];
    let c = site.channels;
    let k = windows.window_len;
    if windows.indices.len() != n_b * k {
        return Err(dim_err!("{} window indices for {n_b} cells of {k} pixels", windows.indices.len()));
    }
    let theta = tape.param(store, site.theta);
    let phi = tape.param(store, site.phi);
    let value = tape.param(store, site.value);
    let q = tape.matmul(bev, theta)?;
    let keys = tape.matmul(image, phi)?;
    let values = tape.matmul(image, value)?;
    let keys = tape.gather_rows(keys, &windows.indices)?;
    let keys = tape.reshape(keys, &[n_b, k, c])?;
    let values = tape.gather_rows(values, &windows.indices)?;
    let values = tape.reshape(values, &[n_b, k, c])?;
    let q = tape.reshape(q, &[n_b, c, 1])?;
    let scores = tape.batch_matmul(keys, q)?;
    let scores = tape.reshape(scores, &[n_b, k])?;
    let weights = tape.softmax(scores, 1)?;
    let weights = tape.reshape(weights, &[n_b, 1, k])?;
    let term = tape.batch_matmul(weights, values)?;
    let term = tape.reshape(term, &[n_b, c])?;
    tape.add(bev, term)
}

/// Which attention the cost model describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Original,
    Decomposed,
    Ipm,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Self::Original),
            "decomposed" => Ok(Self::Decomposed),
            "ipm" => Ok(Self::Ipm),
            other => Err(Error::Config(format!("unknown attention variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Original => "original",
            Self::Decomposed => "decomposed",
            Self::Ipm => "ipm",
        })
    }
}

/// Sizes the cost model depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub image_hw: (usize, usize),
    pub bev_hw: (usize, usize),
    pub lanes: usize,
    pub channels: usize,
    pub layers: usize,
    pub ipm_window: usize,
}

impl AttnConfig {
    pub fn n_a(&self) -> usize {
        self.image_hw.0 * self.image_hw.1
    }

    pub fn n_b(&self) -> usize {
        self.bev_hw.0 * self.bev_hw.1
    }
}

/// Multiply-accumulates of `cfg.layers` forward layers, matching what the
/// tape counts for the same pass. An empty BEV is allowed for the original
/// variant only, which then costs the image self-attention alone.
pub fn count_flops(cfg: &AttnConfig, variant: Variant) -> Result<u64> {
    let (na, nb, l, c) = (cfg.n_a() as u64, cfg.n_b() as u64, cfg.lanes as u64, cfg.channels as u64);
    if na == 0 || c == 0 || cfg.layers == 0 {
        return Err(Error::Config(format!("attention config {cfg:?} has a zero extent")));
    }
    if nb == 0 && variant != Variant::Original {
        return Err(Error::Config(format!("{variant} attention needs a non-empty BEV")));
    }
    // one site with n queries and m keys: C²(n + 2m) + 2·n·m·C
    let site = |n: u64, m: u64| c * c * (n + 2 * m) + 2 * n * m * c;
    let per_layer = match variant {
        Variant::Decomposed => {
            if l == 0 {
                return Err(Error::Config("decomposed attention needs at least one lane query".into()));
            }
            site(l, na) + site(l, nb) + site(nb, l) + site(na, l)
        }
        Variant::Original => site(na, na) + if nb > 0 { site(nb, na) } else { 0 },
        Variant::Ipm => {
            if cfg.ipm_window == 0 || cfg.ipm_window % 2 == 0 {
                return Err(Error::Config(format!("IPM window {} must be odd", cfg.ipm_window)));
            }
            let k = (cfg.ipm_window.min(cfg.image_hw.0) * cfg.ipm_window.min(cfg.image_hw.1)) as u64;
            c * c * (nb + 2 * na) + 2 * nb * k * c
        }
    };
    Ok(per_layer * cfg.layers as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Mat = Vec<Vec<f64>>;

    fn to_mat(t: &Tensor) -> Mat {
        let n = t.shape()[1];
        t.data().chunks(n).map(|r| r.to_vec()).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
        let n = w.shape()[1];
        (0..n).map(|j| (0..x.len()).map(|i| x[i] * w.get(&[i, j])).sum()).collect()
    }

    /// Σ_j f(x, y_j) g(y_j) evaluated key by key.
    fn oracle_term(store: &ParamStore, site: &SiteWeights, x: &[f64], keys: &Mat) -> Vec<f64> {
        let (th, ph, g) = (store.get(site.theta), store.get(site.phi), store.get(site.value));
        let qx = vec_mat(x, th);
        let s: Vec<f64> = keys.iter().map(|y| dot(&qx, &vec_mat(y, ph))).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
        let mut out = vec![0.0; x.len()];
        for (y, sv) in keys.iter().zip(&s) {
            let a = (sv - m).exp() / z;
            for (o, gv) in out.iter_mut().zip(vec_mat(y, g)) {
                *o += a * gv;
            }
        }
        out
    }

    fn oracle_attend(store: &ParamStore, site: &SiteWeights, xs: &Mat, keys: &Mat) -> Mat {
        xs.iter()
            .map(|x| x.iter().zip(oracle_term(store, site, x, keys)).map(|(a, b)| a + b).collect())
            .collect()
    }

    fn assert_close(t: &Tensor, m: &Mat, tol: f64) {
        for (row, expect) in to_mat(t).iter().zip(m) {
            for (a, b) in row.iter().zip(expect) {
                assert!((a - b).abs() <= tol, "{a} vs {b}");
            }
        }
    }

    struct Case {
        store: ParamStore,
        layer: DecomposedLayer,
        q: Tensor,
        i: Tensor,
        b: Tensor,
    }

    fn case(rng: &mut ChaCha8Rng, l: usize, na: usize, nb: usize, c: usize) -> Case {
        let mut store = ParamStore::new();
        let layer = DecomposedLayer::register(&mut store, "attn.0", c, rng).unwrap();
        Case {
            store,
            layer,
            q: uniform_tensor(&[l, c], 1.0, rng).unwrap(),
            i: uniform_tensor(&[na, c], 1.0, rng).unwrap(),
            b: uniform_tensor(&[nb, c], 1.0, rng).unwrap(),
        }
    }

    fn run_layer(c: &Case, joint: bool) -> (Tensor, Tensor, Tensor) {
        let mut tape = Tape::<f64>::new();
        let (q, i, b) = (tape.constant(c.q.clone()), tape.constant(c.i.clone()), tape.constant(c.b.clone()));
        let out = decomposed_layer(&mut tape, &c.store, &c.layer, q, i, b, joint).unwrap();
        (tape.value(out.lanes).clone(), tape.value(out.bev).clone(), tape.value(out.image).clone())
    }

    fn zero_values(store: &mut ParamStore, sites: &[SiteWeights]) {
        for s in sites {
            let c = s.channels;
            *store.get_mut(s.value) = Tensor::zeros(&[c, c]).unwrap();
        }
    }

    #[test]
    fn random_layers_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (l, na, nb, c) = (rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
            let cs = case(&mut rng, l, na, nb, c);
            let (o, v, m) = run_layer(&cs, false);
            let (qm, im, bm) = (to_mat(&cs.q), to_mat(&cs.i), to_mat(&cs.b));
            let om: Mat = qm
                .iter()
                .map(|x| {
                    let a = oracle_term(&cs.store, &cs.layer.lane_from_image, x, &im);
                    let b = oracle_term(&cs.store, &cs.layer.lane_from_bev, x, &bm);
                    (0..c).map(|k| x[k] + a[k] + b[k]).collect()
                })
                .collect();
            assert_close(&o, &om, 1e-12);
            assert_close(&v, &oracle_attend(&cs.store, &cs.layer.bev_from_lane, &bm, &om), 1e-12);
            assert_close(&m, &oracle_attend(&cs.store, &cs.layer.image_from_lane, &im, &om), 1e-12);
        }
    }

    #[test]
    fn joint_normalization_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cs = case(&mut rng, 2, 3, 2, 4);
        let (o, _, _) = run_layer(&cs, true);
        let (fi, fb) = (&cs.layer.lane_from_image, &cs.layer.lane_from_bev);
        for (li, x) in to_mat(&cs.q).iter().enumerate() {
            let mut s = Vec::new();
            let mut vals = Vec::new();
            for (site, keys) in [(fi, to_mat(&cs.i)), (fb, to_mat(&cs.b))] {
                let qx = vec_mat(x, cs.store.get(site.theta));
                for y in &keys {
                    s.push(dot(&qx, &vec_mat(y, cs.store.get(site.phi))));
                    vals.push(vec_mat(y, cs.store.get(site.value)));
                }
            }
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for k in 0..4 {
                let expect = x[k] + s.iter().zip(&vals).map(|(sv, g)| sv.exp() / z * g[k]).sum::<f64>();
                assert!((o.get(&[li, k]) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cs = case(&mut rng, 2, 3, 2, 4);
        let l = cs.layer;
        zero_values(&mut cs.store, &[l.lane_from_image, l.lane_from_bev, l.bev_from_lane, l.image_from_lane]);
        let (o, v, m) = run_layer(&cs, false);
        assert_eq!(o, cs.q);
        assert_eq!(v, cs.b);
        assert_eq!(m, cs.i);
    }

    #[test]
    fn single_key_gets_full_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cs = case(&mut rng, 3, 1, 2, 4);
        zero_values(&mut cs.store, &[cs.layer.lane_from_bev]);
        let (o, _, _) = run_layer(&cs, false);
        let g = vec_mat(&to_mat(&cs.i)[0], cs.store.get(cs.layer.lane_from_image.value));
        for (li, x) in to_mat(&cs.q).iter().enumerate() {
            for k in 0..4 {
                assert!((o.get(&[li, k]) - (x[k] + g[k])).abs() <= 1e-12);
            }
        }
        // one lane: every BEV cell receives the same value term
        let cs = case(&mut rng, 1, 3, 4, 4);
        let (o, v, _) = run_layer(&cs, false);
        let g = vec_mat(o.data(), cs.store.get(cs.layer.bev_from_lane.value));
        for (ci, b) in to_mat(&cs.b).iter().enumerate() {
            for k in 0..4 {
                assert!((v.get(&[ci, k]) - (b[k] + g[k])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn similarity_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cs = case(&mut rng, 3, 5, 4, 6);
        let mut tape = Tape::<f64>::new();
        let (q, i) = (tape.constant(cs.q.clone()), tape.constant(cs.i.clone()));
        let (s, _) = scores_values(&mut tape, &cs.store, &cs.layer.lane_from_image, q, i).unwrap();
        let a = tape.softmax(s, 1).unwrap();
        for row in tape.value(a).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn lane_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cs = case(&mut rng, 4, 5, 6, 4);
        let (o, v, m) = run_layer(&cs, false);
        let perm = [2, 0, 3, 1];
        let rows = to_mat(&cs.q);
        let permuted = Case {
            q: Tensor::from_rows(&perm.iter().map(|&p| rows[p].clone()).collect::<Vec<_>>()).unwrap(),
            store: cs.store.clone(),
            layer: cs.layer,
            i: cs.i.clone(),
            b: cs.b.clone(),
        };
        let (o2, v2, m2) = run_layer(&permuted, false);
        for (k, &p) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((o2.get(&[k, c]) - o.get(&[p, c])).abs() <= 1e-12);
            }
        }
        assert_close(&v2, &to_mat(&v), 1e-12);
        assert_close(&m2, &to_mat(&m), 1e-12);
    }

    #[test]
    fn tied_stack_equals_repeated_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cs = case(&mut rng, 2, 4, 3, 4);
        let mut tape = Tape::<f64>::new();
        let (q, i, b) = (tape.constant(cs.q.clone()), tape.constant(cs.i.clone()), tape.constant(cs.b.clone()));
        let stacked = decomposed_stack(&mut tape, &cs.store, &[cs.layer, cs.layer], q, i, b, false).unwrap();
        let once = decomposed_layer(&mut tape, &cs.store, &cs.layer, q, i, b, false).unwrap();
        let twice = decomposed_layer(&mut tape, &cs.store, &cs.layer, once.lanes, once.image, once.bev, false).unwrap();
        assert_eq!(tape.value(stacked.lanes), tape.value(twice.lanes));
        assert_eq!(tape.value(stacked.bev), tape.value(twice.bev));
        assert_eq!(tape.value(stacked.image), tape.value(twice.image));
    }

    #[test]
    fn layers_have_distinct_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let a = DecomposedLayer::register(&mut store, "attn.0", 4, &mut rng).unwrap();
        let b = DecomposedLayer::register(&mut store, "attn.1", 4, &mut rng).unwrap();
        let ids: std::collections::HashSet<_> = [a, b]
            .iter()
            .flat_map(|l| [l.lane_from_image, l.lane_from_bev, l.bev_from_lane, l.image_from_lane])
            .flat_map(|s| [s.theta, s.phi, s.value])
            .collect();
        assert_eq!(ids.len(), 24);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cs = case(&mut rng, 2, 3, 2, 4);
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(cs.q.clone());
        let bad = tape.constant(Tensor::zeros(&[3, 5]).unwrap());
        let err = bev_from_lanes(&mut tape, &cs.store, &cs.layer.bev_from_lane, bad, q).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    fn original_case(rng: &mut ChaCha8Rng, na: usize, nb: usize, c: usize) -> (ParamStore, SiteWeights, SiteWeights, Tensor, Tensor) {
        let mut store = ParamStore::new();
        let s = SiteWeights::register(&mut store, "orig.0.self", c, rng).unwrap();
        let x = SiteWeights::register(&mut store, "orig.0.cross", c, rng).unwrap();
        let b = uniform_tensor(&[nb, c], 1.0, rng).unwrap();
        let i = uniform_tensor(&[na, c], 1.0, rng).unwrap();
        (store, s, x, b, i)
    }

    #[test]
    fn original_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let (na, nb, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
            let (store, s, x, b, i) = original_case(&mut rng, na, nb, c);
            let mut tape = Tape::<f64>::new();
            let (bv, iv) = (tape.constant(b.clone()), tape.constant(i.clone()));
            let (v, _) = original_cross_attn(&mut tape, &store, &s, &x, bv, iv).unwrap();
            let im = oracle_attend(&store, &s, &to_mat(&i), &to_mat(&i));
            assert_close(tape.value(v), &oracle_attend(&store, &x, &to_mat(&b), &im), 1e-12);
        }
    }

    #[test]
    fn original_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut store, s, x, b, i) = original_case(&mut rng, 1, 3, 4);
        let mut tape = Tape::<f64>::new();
        let (bv, iv) = (tape.constant(b.clone()), tape.constant(i.clone()));
        let (v, ip) = original_cross_attn(&mut tape, &store, &s, &x, bv, iv).unwrap();
        let g = vec_mat(tape.value(ip).data(), store.get(x.value));
        for (ci, row) in to_mat(&b).iter().enumerate() {
            for k in 0..4 {
                assert!((tape.value(v).get(&[ci, k]) - (row[k] + g[k])).abs() <= 1e-12);
            }
        }
        zero_values(&mut store, &[s, x]);
        let mut tape = Tape::<f64>::new();
        let (bv, iv) = (tape.constant(b.clone()), tape.constant(i));
        let (v, _) = original_cross_attn(&mut tape, &store, &s, &x, bv, iv).unwrap();
        assert_eq!(tape.value(v), &b);
    }

    fn ipm_setup(window: usize) -> (CameraModel, BevLayout, IpmWindows) {
        let cam = CameraModel::synthetic((6, 8)).unwrap();
        let layout = BevLayout::new(5, 4, (-10.0, 10.0), (3.0, 103.0)).unwrap();
        let windows = IpmWindows::new(&layout, &cam, window).unwrap();
        (cam, layout, windows)
    }

    #[test]
    fn full_window_equals_dense_cross_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (_, _, windows) = ipm_setup(9);
        assert_eq!(windows.window_len, 48);
        let (store, _, x, b, i) = original_case(&mut rng, 48, 20, 4);
        let mut tape = Tape::<f64>::new();
        let (bv, iv) = (tape.constant(b.clone()), tape.constant(i.clone()));
        let v = ipm_attn(&mut tape, &store, &x, bv, iv, &windows).unwrap();
        assert_close(tape.value(v), &oracle_attend(&store, &x, &to_mat(&b), &to_mat(&i)), 1e-12);
    }

    #[test]
    fn unit_window_reads_reference_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (_, _, windows) = ipm_setup(1);
        let (store, _, x, b, i) = original_case(&mut rng, 48, 20, 4);
        let mut tape = Tape::<f64>::new();
        let (bv, iv) = (tape.constant(b.clone()), tape.constant(i.clone()));
        let v = ipm_attn(&mut tape, &store, &x, bv, iv, &windows).unwrap();
        let im = to_mat(&i);
        for (ci, row) in to_mat(&b).iter().enumerate() {
            let (r, c) = windows.references[ci];
            let g = vec_mat(&im[r * 8 + c], store.get(x.value));
            for k in 0..4 {
                assert!((tape.value(v).get(&[ci, k]) - (row[k] + g[k])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn windowed_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (_, _, windows) = ipm_setup(3);
        let (store, _, x, b, i) = original_case(&mut rng, 48, 20, 4);
        let mut tape = Tape::<f64>::new();
        let (bv, iv) = (tape.constant(b.clone()), tape.constant(i.clone()));
        let v = ipm_attn(&mut tape, &store, &x, bv, iv, &windows).unwrap();
        let im = to_mat(&i);
        let expect: Mat = to_mat(&b)
            .iter()
            .enumerate()
            .map(|(ci, row)| {
                let keys: Mat = windows.indices[ci * 9..(ci + 1) * 9].iter().map(|&p| im[p].clone()).collect();
                row.iter().zip(oracle_term(&store, &x, row, &keys)).map(|(a, b)| a + b).collect()
            })
            .collect();
        assert_close(tape.value(v), &expect, 1e-12);
    }

    #[test]
    fn reference_pixel_lies_on_projected_lane() {
        let cam = CameraModel::synthetic((48, 64)).unwrap();
        let layout = BevLayout::new(50, 32, (-10.0, 10.0), (3.0, 103.0)).unwrap();
        let refs = ipm_references(&layout, &cam);
        // lane along the x = 0 column of cells (col 16)
        let lane: Vec<[f64; 2]> = (0..=100)
            .filter_map(|k| cam.project([0.0, 3.0 + k as f64, 0.0]))
            .map(|[u, v, _]| [u, v])
            .collect();
        for r in 0..50 {
            let (x, _) = layout.cell_xy(r, 16);
            assert_eq!(x, 0.0);
            let (pr, pc) = refs[r * 32 + 16];
            let d = crate::geometry::polyline_distance([pc as f64, pr as f64], &lane);
            assert!(d <= 1.0, "row {r}: {d}");
        }
    }

    fn random_cfg(rng: &mut ChaCha8Rng) -> AttnConfig {
        AttnConfig {
            image_hw: (rng.gen_range(1..=5), rng.gen_range(1..=5)),
            bev_hw: (rng.gen_range(1..=5), rng.gen_range(1..=5)),
            lanes: rng.gen_range(1..=4),
            channels: rng.gen_range(1..=6),
            layers: 1,
            ipm_window: [1, 3, 5][rng.gen_range(0..3)],
        }
    }

    #[test]
    fn flop_model_matches_tape_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let cfg = random_cfg(&mut rng);
            let (na, nb, l, c) = (cfg.n_a(), cfg.n_b(), cfg.lanes, cfg.channels);
            let cs = case(&mut rng, l, na, nb, c);
            let (store, s, x, _, _) = original_case(&mut rng, na, nb, c);
            let mut tape = Tape::<f64>::new();
            let (q, i, b) = (tape.constant(cs.q.clone()), tape.constant(cs.i.clone()), tape.constant(cs.b.clone()));
            decomposed_layer(&mut tape, &cs.store, &cs.layer, q, i, b, false).unwrap();
            assert_eq!(tape.flops().count(), count_flops(&cfg, Variant::Decomposed).unwrap());

            let mut tape = Tape::<f64>::new();
            let (i, b) = (tape.constant(cs.i.clone()), tape.constant(cs.b.clone()));
            original_cross_attn(&mut tape, &store, &s, &x, b, i).unwrap();
            assert_eq!(tape.flops().count(), count_flops(&cfg, Variant::Original).unwrap());

            let cam = CameraModel::synthetic(cfg.image_hw).unwrap();
            let layout = BevLayout::new(cfg.bev_hw.0, cfg.bev_hw.1, (-10.0, 10.0), (3.0, 103.0)).unwrap();
            let windows = IpmWindows::new(&layout, &cam, cfg.ipm_window).unwrap();
            let mut tape = Tape::<f64>::new();
            let (i, b) = (tape.constant(cs.i.clone()), tape.constant(cs.b.clone()));
            ipm_attn(&mut tape, &store, &x, b, i, &windows).unwrap();
            assert_eq!(tape.flops().count(), count_flops(&cfg, Variant::Ipm).unwrap());
        }
    }

    #[test]
    fn flop_model_small_example() {
        let cfg = AttnConfig { image_hw: (1, 2), bev_hw: (1, 2), lanes: 1, channels: 2, layers: 1, ipm_window: 1 };
        // 32 similarity/value MACs plus 72 projection MACs
        assert_eq!(count_flops(&cfg, Variant::Decomposed).unwrap(), 32 + 72);
    }

    #[test]
    fn original_without_bev_is_self_attention() {
        let cfg = AttnConfig { image_hw: (2, 3), bev_hw: (0, 0), lanes: 1, channels: 4, layers: 1, ipm_window: 1 };
        let (na, c) = (6u64, 4u64);
        assert_eq!(count_flops(&cfg, Variant::Original).unwrap(), 3 * na * c * c + 2 * na * na * c);
        assert!(count_flops(&cfg, Variant::Decomposed).is_err());
    }

    #[test]
    fn decomposition_pays_at_full_scale() {
        let cfg = AttnConfig { image_hw: (23, 30), bev_hw: (50, 32), lanes: 80, channels: 64, layers: 1, ipm_window: 9 };
        let d = count_flops(&cfg, Variant::Decomposed).unwrap() as f64;
        let o = count_flops(&cfg, Variant::Original).unwrap() as f64;
        assert!(d / o < 0.4, "{}", d / o);
    }

    fn cfg_of(na: usize, nb: usize, l: usize, c: usize) -> AttnConfig {
        AttnConfig { image_hw: (1, na), bev_hw: (1, nb), lanes: l, channels: c, layers: 1, ipm_window: 1 }
    }

    #[test]
    fn decomposed_cheaper_with_few_lanes() {
        // with projections counted, L < Na·Nb/(4(Na+Nb)) and Na ≥ 2C suffice
        for na in (16..1000).step_by(37) {
            for nb in (1..2000).step_by(53) {
                for c in [1usize, 4, 8, 64] {
                    if na < 2 * c {
                        continue;
                    }
                    for l in (1..).take_while(|l| 4 * l * (na + nb) < na * nb) {
                        let d = count_flops(&cfg_of(na, nb, l, c), Variant::Decomposed).unwrap();
                        let o = count_flops(&cfg_of(na, nb, l, c), Variant::Original).unwrap();
                        assert!(d < o, "na {na} nb {nb} l {l} c {c}");
                    }
                }
            }
        }
    }

    #[test]
    fn harmonic_bound_alone_is_not_sufficient() {
        // L < Na·Nb/(Na+Nb) holds here, yet the decomposed layer costs more
        let cfg = cfg_of(256, 1600, 110, 64);
        assert!(110 * (256 + 1600) < 256 * 1600);
        assert!(count_flops(&cfg, Variant::Decomposed).unwrap() > count_flops(&cfg, Variant::Original).unwrap());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("ipm".parse::<Variant>().unwrap(), Variant::Ipm);
        assert!(matches!("sparse".parse::<Variant>(), Err(Error::Config(_))));
    }
}
