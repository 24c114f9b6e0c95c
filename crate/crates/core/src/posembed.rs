//! Position embeddings from predicted depth (image view) and height (BEV)
//! distributions, plus the fixed sine/cosine baseline.
//!
//! Each lattice point `p` (homogeneous, 4-vector) is lifted by
//! `p·W₁ + b₁`, the lifts are averaged under the predicted per-pixel
//! distribution over bins, and the average is lifted again by `·W₂ + b₂`.
//! The image-view and BEV embeddings share one [`EmbedWeights`].

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::geometry::{BevGrid, FrustumGrid3D};
use crate::layers::{uniform_tensor, Linear};
use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// `W₁: 4×C/4`, `b₁: C/4`, `W₂: C/4×C`, `b₂: C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub channels: usize,
}

impl EmbedWeights {
    /// `coord_scale` shrinks the first lift so metric coordinates of tens of
    /// meters land at unit scale.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        coord_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::Config(format!("embedding width {channels} must be a positive multiple of 4")));
        }
        let q = channels / 4;
        let w1 = store.add(format!("{name}.w1"), uniform_tensor(&[4, q], coord_scale, rng)?)?;
        let b1 = store.add(format!("{name}.b1"), Tensor::zeros(&[q])?)?;
        let bound = 1.0 / (q as f64).sqrt();
        let w2 = store.add(format!("{name}.w2"), uniform_tensor(&[q, channels], bound, rng)?)?;
        let b2 = store.add(format!("{name}.b2"), Tensor::zeros(&[channels])?)?;
        Ok(Self { w1, b1, w2, b2, channels })
    }
}

/// Per-pixel distribution over bins: one linear layer then softmax.
pub fn predict_bin_dist<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    features: Var,
    head: &Linear,
) -> Result<Var> {
    let width = *tape.shape(features).last().unwrap();
    if tape.shape(features).len() != 2 || width != head.fan_in {
        return Err(dim_err!(
            "features {:?} do not match head input width {}",
            tape.shape(features),
            head.fan_in
        ));
    }
    let logits = head.apply(tape, store, features)?;
    tape.softmax(logits, 1)
}

/// Depth distribution `[H_a·W_a, D]` from image features `[H_a·W_a, C]`.
pub fn predict_depth_dist<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    features: Var,
    head: &Linear,
) -> Result<Var> {
    predict_bin_dist(tape, store, features, head)
}

fn expected_lift<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    dist: Var,
    points: &[[f64; 4]],
    cells: usize,
    bins: usize,
    w: &EmbedWeights,
) -> Result<Var> {
    if tape.shape(dist) != [cells, bins] {
        return Err(dim_err!(
            "distribution {:?} does not match lattice {cells}×{bins}",
            tape.shape(dist)
        ));
    }
    let q = w.channels / 4;
    let grid = Tensor::<T>::from_fn(&[cells * bins, 4], |i| T::from_real(points[i / 4][i % 4]))?;
    let grid = tape.constant(grid);
    let w1 = tape.param(store, w.w1);
    let b1 = tape.param(store, w.b1);
    let w2 = tape.param(store, w.w2);
    let b2 = tape.param(store, w.b2);
    let lifted = tape.matmul(grid, w1)?;
    let lifted = tape.add_row(lifted, b1)?;
    let lifted = tape.reshape(lifted, &[cells, bins, q])?;
    let weights = tape.reshape(dist, &[cells, 1, bins])?;
    let mixed = tape.batch_matmul(weights, lifted)?;
    let mixed = tape.reshape(mixed, &[cells, q])?;
    let out = tape.matmul(mixed, w2)?;
    tape.add_row(out, b2)
}

/// Image-view embedding `E: [H_a·W_a, C]`.
pub fn image_pos_embed<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    depth_dist: Var,
    grid: &FrustumGrid3D,
    w: &EmbedWeights,
) -> Result<Var> {
    expected_lift(tape, store, depth_dist, &grid.points, grid.rows * grid.cols, grid.bins, w)
}

/// BEV embedding `P: [H_b·W_b, C]`.
pub fn bev_pos_embed<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    height_dist: Var,
    grid: &BevGrid,
    w: &EmbedWeights,
) -> Result<Var> {
    expected_lift(tape, store, height_dist, &grid.points, grid.rows * grid.cols, grid.bins(), w)
}

/// Fixed 2-D sinusoidal embedding `[H·W, C]`. The first `C/2` channels
/// encode the row and the rest the column; each half is `C/4` sines followed
/// by `C/4` cosines at frequencies `10000^(-k/(C/4))`.
pub fn sincos_embed(rows: usize, cols: usize, channels: usize) -> Result<Tensor> {
    if channels == 0 || channels % 4 != 0 {
        return Err(Error::Config(format!("sine/cosine width {channels} must be a multiple of 4")));
    }
    let q = channels / 4;
    let freq: Vec<f64> = (0..q).map(|k| 10000f64.powf(-(k as f64) / q as f64)).collect();
    let mut data = Vec::with_capacity(rows * cols * channels);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                data.extend(freq.iter().map(|f| (pos * f).sin()));
                data.extend(freq.iter().map(|f| (pos * f).cos()));
            }
        }
    }
    Tensor::new(&[rows * cols, channels], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_bev_grid, build_frustum_grid, unproject, CameraModel};
    use crate::numerics::{numeric_gradient, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore,
        embed: EmbedWeights,
        head: Linear,
        grid: FrustumGrid3D,
        features: Tensor,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = EmbedWeights::register(&mut store, "embed", 8, 0.1, &mut rng).unwrap();
        let head = Linear::register(&mut store, "depth", 5, 6, 1.0, &mut rng).unwrap();
        let cam = CameraModel::synthetic((3, 4)).unwrap();
        let grid = unproject(&build_frustum_grid(3, 4, 6, (0.0, 30.0)).unwrap(), &cam).unwrap();
        let features = uniform_tensor(&[12, 5], 1.0, &mut rng).unwrap();
        Fixture { store, embed, head, grid, features }
    }

    /// Direct evaluation: `[Σ_d D_d (g_d W₁ + b₁)] W₂ + b₂` per pixel.
    fn loop_oracle(store: &ParamStore, w: &EmbedWeights, dist: &Tensor, points: &[[f64; 4]], bins: usize) -> Vec<Vec<f64>> {
        let (w1, b1, w2, b2) = (store.get(w.w1), store.get(w.b1), store.get(w.w2), store.get(w.b2));
        let q = w.channels / 4;
        let cells = dist.shape()[0];
        (0..cells)
            .map(|c| {
                let mut inner = vec![0.0; q];
                for d in 0..bins {
                    let p = points[c * bins + d];
                    for j in 0..q {
                        let lift: f64 = (0..4).map(|i| p[i] * w1.get(&[i, j])).sum::<f64>() + b1.data()[j];
                        inner[j] += dist.get(&[c, d]) * lift;
                    }
                }
                (0..w.channels)
                    .map(|o| (0..q).map(|j| inner[j] * w2.get(&[j, o])).sum::<f64>() + b2.data()[o])
                    .collect()
            })
            .collect()
    }

    fn randomize(store: &mut ParamStore, w: &EmbedWeights, rng: &mut ChaCha8Rng) {
        for id in [w.b1, w.b2] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = uniform_tensor(&shape, 1.0, rng).unwrap();
        }
    }

    #[test]
    fn zero_head_gives_uniform_depth() {
        let f = fixture(0);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(f.features.clone());
        let mut store = f.store.clone();
        *store.get_mut(f.head.weight) = Tensor::zeros(&[5, 6]).unwrap();
        let d = predict_depth_dist(&mut tape, &store, x, &f.head).unwrap();
        assert!(tape.value(d).data().iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn saturated_logit_is_one_hot() {
        let f = fixture(0);
        let mut store = f.store.clone();
        *store.get_mut(f.head.weight) = Tensor::zeros(&[5, 6]).unwrap();
        let mut b = Tensor::zeros(&[6]).unwrap();
        b.data_mut()[2] = 1000.0;
        *store.get_mut(f.head.bias) = b;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(f.features.clone());
        let d = predict_depth_dist(&mut tape, &store, x, &f.head).unwrap();
        for row in tape.value(d).data().chunks(6) {
            for (i, v) in row.iter().enumerate() {
                assert!((v - if i == 2 { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn depth_head_matches_composition() {
        let f = fixture(4);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(f.features.clone());
        let d = predict_depth_dist(&mut tape, &f.store, x, &f.head).unwrap();
        let mut flops = crate::numerics::FlopCounter::default();
        let logits = crate::numerics::mlp(
            &f.features,
            &[(f.store.get(f.head.weight).clone(), f.store.get(f.head.bias).clone())],
            crate::numerics::Activation::Relu,
            &mut flops,
        )
        .unwrap();
        let expect = logits.softmax(1).unwrap();
        for (a, b) in tape.value(d).data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        for row in tape.value(d).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn depth_head_width_mismatch() {
        let f = fixture(0);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[12, 4]).unwrap());
        assert!(predict_depth_dist(&mut tape, &f.store, x, &f.head).is_err());
    }

    #[test]
    fn image_embed_matches_loop_oracle() {
        let mut f = fixture(7);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        randomize(&mut f.store, &f.embed, &mut rng);
        let dist = uniform_tensor(&[12, 6], 1.0, &mut rng).unwrap().softmax(1).unwrap();
        let mut tape = Tape::<f64>::new();
        let dv = tape.constant(dist.clone());
        let e = image_pos_embed(&mut tape, &f.store, dv, &f.grid, &f.embed).unwrap();
        let oracle = loop_oracle(&f.store, &f.embed, &dist, &f.grid.points, 6);
        for (c, row) in oracle.iter().enumerate() {
            for (o, v) in row.iter().enumerate() {
                assert!((tape.value(e).get(&[c, o]) - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_depth_collapses_to_single_point() {
        let f = fixture(3);
        let chosen = 4;
        let dist = Tensor::from_fn(&[12, 6], |i| if i % 6 == chosen { 1.0 } else { 0.0 }).unwrap();
        let mut tape = Tape::<f64>::new();
        let dv = tape.constant(dist);
        let e = image_pos_embed(&mut tape, &f.store, dv, &f.grid, &f.embed).unwrap();
        let mut flops = crate::numerics::FlopCounter::default();
        for c in 0..12 {
            let p = f.grid.points[c * 6 + chosen];
            let x = Tensor::new(&[1, 4], p.to_vec()).unwrap();
            let direct = crate::numerics::mlp(
                &x,
                &[
                    (f.store.get(f.embed.w1).clone(), f.store.get(f.embed.b1).clone()),
                    (f.store.get(f.embed.w2).clone(), f.store.get(f.embed.b2).clone()),
                ],
                crate::numerics::Activation::Identity,
                &mut flops,
            )
            .unwrap();
            for o in 0..8 {
                assert!((tape.value(e).get(&[c, o]) - direct.data()[o]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn uniform_depth_embeds_mean_point() {
        let f = fixture(5);
        let dist = Tensor::full(&[12, 6], 1.0 / 6.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let dv = tape.constant(dist);
        let e = image_pos_embed(&mut tape, &f.store, dv, &f.grid, &f.embed).unwrap();
        let (w1, b1, w2, b2) = (f.store.get(f.embed.w1), f.store.get(f.embed.b1), f.store.get(f.embed.w2), f.store.get(f.embed.b2));
        for c in 0..12 {
            let mut mean = [0.0; 4];
            for d in 0..6 {
                for i in 0..4 {
                    mean[i] += f.grid.points[c * 6 + d][i] / 6.0;
                }
            }
            for o in 0..8 {
                let v: f64 = (0..2)
                    .map(|j| {
                        let lift: f64 = (0..4).map(|i| mean[i] * w1.get(&[i, j])).sum::<f64>() + b1.data()[j];
                        lift * w2.get(&[j, o])
                    })
                    .sum::<f64>()
                    + b2.data()[o];
                assert!((tape.value(e).get(&[c, o]) - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn embedding_is_linear_in_distribution() {
        let f = fixture(8);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let d1 = uniform_tensor(&[12, 6], 2.0, &mut rng).unwrap().softmax(1).unwrap();
        let d2 = uniform_tensor(&[12, 6], 2.0, &mut rng).unwrap().softmax(1).unwrap();
        let alpha = 0.3;
        let mix = d1.zip_map(&d2, |a, b| alpha * a + (1.0 - alpha) * b).unwrap();
        let embed = |d: &Tensor| {
            let mut tape = Tape::<f64>::new();
            let dv = tape.constant(d.clone());
            let e = image_pos_embed(&mut tape, &f.store, dv, &f.grid, &f.embed).unwrap();
            tape.value(e).clone()
        };
        let (e1, e2, em) = (embed(&d1), embed(&d2), embed(&mix));
        for i in 0..em.len() {
            let lin = alpha * e1.data()[i] + (1.0 - alpha) * e2.data()[i];
            assert!((em.data()[i] - lin).abs() <= 1e-12);
        }
    }

    #[test]
    fn embedding_gradient_wrt_depth_head() {
        let f = fixture(9);
        let run = |store: &ParamStore| -> Result<f64> {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(f.features.clone());
            let d = predict_depth_dist(&mut tape, store, x, &f.head)?;
            let e = image_pos_embed(&mut tape, store, d, &f.grid, &f.embed)?;
            let sq = tape.mul(e, e)?;
            let s = tape.sum(sq)?;
            Ok(tape.value(s).item())
        };
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(f.features.clone());
        let d = predict_depth_dist(&mut tape, &f.store, x, &f.head).unwrap();
        let e = image_pos_embed(&mut tape, &f.store, d, &f.grid, &f.embed).unwrap();
        let sq = tape.mul(e, e).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        for id in [f.head.weight, f.head.bias] {
            let analytic = grads.param(&f.store, id);
            let numeric = numeric_gradient(&[f.store.get(id).clone()], 1e-6, |xs| {
                let mut s = f.store.clone();
                *s.get_mut(id) = xs[0].clone();
                run(&s)
            })
            .unwrap();
            let err = relative_error(analytic.data(), numeric[0].data());
            assert!(err <= 1e-5, "{}: {err}", f.store.name(id));
        }
    }

    #[test]
    fn bev_embed_matches_loop_oracle_and_shares_weights() {
        let mut f = fixture(11);
        let mut rng = ChaCha8Rng::seed_from_u64(110);
        randomize(&mut f.store, &f.embed, &mut rng);
        let bev = build_bev_grid(3, 2, 5, (-10.0, 10.0), (3.0, 103.0), (-5.0, 5.0)).unwrap();
        let dist = uniform_tensor(&[6, 5], 1.0, &mut rng).unwrap().softmax(1).unwrap();
        let mut tape = Tape::<f64>::new();
        let dv = tape.constant(dist.clone());
        let p = bev_pos_embed(&mut tape, &f.store, dv, &bev, &f.embed).unwrap();
        let w1_after_bev = tape.param_var(f.embed.w1).unwrap();
        let img_dist = tape.constant(Tensor::full(&[12, 6], 1.0 / 6.0).unwrap());
        image_pos_embed(&mut tape, &f.store, img_dist, &f.grid, &f.embed).unwrap();
        assert_eq!(tape.param_var(f.embed.w1), Some(w1_after_bev));
        let oracle = loop_oracle(&f.store, &f.embed, &dist, &bev.points, 5);
        for (c, row) in oracle.iter().enumerate() {
            for (o, v) in row.iter().enumerate() {
                assert!((tape.value(p).get(&[c, o]) - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_height_bin_embeds_ground_point() {
        let f = fixture(12);
        let bev = build_bev_grid(2, 2, 1, (-10.0, 10.0), (3.0, 103.0), (-5.0, 5.0)).unwrap();
        let mut tape = Tape::<f64>::new();
        let dv = tape.constant(Tensor::full(&[4, 1], 1.0).unwrap());
        let p = bev_pos_embed(&mut tape, &f.store, dv, &bev, &f.embed).unwrap();
        let oracle = loop_oracle(&f.store, &f.embed, &Tensor::full(&[4, 1], 1.0).unwrap(), &bev.points, 1);
        for c in 0..4 {
            assert_eq!(bev.points[c][2], 0.0);
            for o in 0..8 {
                assert!((tape.value(p).get(&[c, o]) - oracle[c][o]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sincos_properties() {
        let e = sincos_embed(4, 5, 8).unwrap();
        // position (0, 0): sines 0, cosines 1
        let first = &e.data()[..8];
        assert_eq!(first, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        // bands are ordered from fastest to slowest
        let row_sin = |r: usize, k: usize| e.get(&[r * 5, k]);
        assert!((row_sin(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!(row_sin(1, 1).abs() < row_sin(1, 0).abs());
        assert!(matches!(sincos_embed(2, 2, 6), Err(Error::Config(_))));
    }
}
