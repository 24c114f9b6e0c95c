//! The full detector: linear lift of the input raster, depth/height
//! distributions and position embeddings, lane and BEV queries, the
//! decomposed attention stack, and the dynamic-kernel head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{decomposed_stack, DecomposedLayer};
use crate::error::{Error, Result};
use crate::geometry::{build_bev_grid, build_frustum_grid, unproject, BevGrid, BevLayout, CameraModel, Lane3D};
use crate::head::{conv_offsets, gen_kernels_scores, vote_bev, HeadWeights, LaneDetections, LaneTarget, VoteParams};
use crate::layers::{uniform_tensor, Linear};
use crate::matching::{hungarian, match_costs, total_loss, Assignment, LossWeights};
use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::posembed::{bev_pos_embed, image_pos_embed, predict_bin_dist, predict_depth_dist, EmbedWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature-map size `(H_a, W_a)`; scene cameras must match it.
    pub image_hw: (usize, usize),
    pub input_channels: usize,
    pub channels: usize,
    pub lanes: usize,
    pub bev_hw: (usize, usize),
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub depth_bins: usize,
    pub depth_range: (f64, f64),
    pub height_bins: usize,
    pub height_range: (f64, f64),
    pub classes: usize,
    pub layers: usize,
    /// Normalize the lane-from-image and lane-from-BEV similarities jointly.
    pub joint_norm: bool,
    /// Scale of the first position-embedding lift; grid points reach ~100 m.
    pub embed_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_hw: (24, 32),
            input_channels: 3,
            channels: 64,
            lanes: 80,
            bev_hw: (50, 32),
            x_range: (-10.0, 10.0),
            y_range: (3.0, 103.0),
            depth_bins: 50,
            depth_range: (0.0, 100.0),
            height_bins: 50,
            height_range: (-5.0, 5.0),
            classes: 2,
            layers: 2,
            joint_norm: false,
            embed_scale: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_hw.0,
            self.image_hw.1,
            self.input_channels,
            self.channels,
            self.lanes,
            self.bev_hw.0,
            self.bev_hw.1,
            self.depth_bins,
            self.height_bins,
            self.classes,
            self.layers,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model extents must all be positive".into()));
        }
        if self.channels % 4 != 0 {
            return Err(Error::Config(format!("channel width {} must be a multiple of 4", self.channels)));
        }
        if !(self.embed_scale > 0.0) || !self.embed_scale.is_finite() {
            return Err(Error::Config("embedding scale must be positive".into()));
        }
        // the grid builders own the range checks
        build_frustum_grid(1, 1, self.depth_bins, self.depth_range)?;
        build_bev_grid(self.bev_hw.0, self.bev_hw.1, self.height_bins, self.x_range, self.y_range, self.height_range)?;
        Ok(())
    }

    pub fn layout(&self) -> BevLayout {
        BevLayout::new(self.bev_hw.0, self.bev_hw.1, self.x_range, self.y_range).expect("validated layout")
    }

    pub fn n_a(&self) -> usize {
        self.image_hw.0 * self.image_hw.1
    }

    pub fn n_b(&self) -> usize {
        self.bev_hw.0 * self.bev_hw.1
    }
}

/// Parameter handles; the values live in [`Model::store`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub lift: Linear,
    pub depth_head: Linear,
    pub height_head: Linear,
    pub embed: EmbedWeights,
    pub bev_queries: ParamId,
    pub lane_queries: ParamId,
    pub layers: Vec<DecomposedLayer>,
    pub head: HeadWeights,
    bev_grid: BevGrid,
}

/// Differentiable outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[L, 2 + N]`.
    pub scores: Var,
    /// `[L, N_a, 2]`.
    pub image_offsets: Var,
    /// `[L, N_b, 3]`.
    pub bev_offsets: Var,
}

impl Model {
    /// Parameter groups are the name prefixes `lift`, `depth`, `height`,
    /// `embed`, `bev_query`, `lane_query`, `attn{k}` and `head`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let lift = Linear::register(&mut store, "lift", config.input_channels, c, 1.0, &mut rng)?;
        let depth_head = Linear::register(&mut store, "depth", c, config.depth_bins, 1.0, &mut rng)?;
        let height_head = Linear::register(&mut store, "height", c, config.height_bins, 1.0, &mut rng)?;
        let embed = EmbedWeights::register(&mut store, "embed", c, config.embed_scale, &mut rng)?;
        let bev_queries = store.add("bev_query", uniform_tensor(&[config.n_b(), c], 1.0, &mut rng)?)?;
        let lane_queries = store.add("lane_query", uniform_tensor(&[config.lanes, c], 1.0, &mut rng)?)?;
        let layers = (0..config.layers)
            .map(|k| DecomposedLayer::register(&mut store, &format!("attn{k}"), c, &mut rng))
            .collect::<Result<_>>()?;
        let head = HeadWeights::register(&mut store, "head", c, config.classes, &mut rng)?;
        let bev_grid = build_bev_grid(
            config.bev_hw.0,
            config.bev_hw.1,
            config.height_bins,
            config.x_range,
            config.y_range,
            config.height_range,
        )?;
        Ok(Self {
            config,
            store,
            lift,
            depth_head,
            height_head,
            embed,
            bev_queries,
            lane_queries,
            layers,
            head,
            bev_grid,
        })
    }

    pub fn check_camera(&self, cam: &CameraModel) -> Result<()> {
        if cam.image_size() != self.config.image_hw {
            return Err(Error::Contract(format!(
                "scene image {:?} differs from the model's feature map {:?}",
                cam.image_size(),
                self.config.image_hw
            )));
        }
        Ok(())
    }

    /// `raster: [N_a, C_in]` seen by `cam`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, raster: &Tensor, cam: &CameraModel) -> Result<Forward> {
        self.check_camera(cam)?;
        let cfg = &self.config;
        if raster.shape() != [cfg.n_a(), cfg.input_channels] {
            return Err(Error::Dimension(format!(
                "raster {:?} vs expected [{}, {}]",
                raster.shape(),
                cfg.n_a(),
                cfg.input_channels
            )));
        }
        let (h, w) = cfg.image_hw;
        let frustum = unproject(&build_frustum_grid(h, w, cfg.depth_bins, cfg.depth_range)?, cam)?;

        let x = tape.constant(raster.cast());
        let feats = self.lift.apply(tape, &self.store, x)?;
        let depth = predict_depth_dist(tape, &self.store, feats, &self.depth_head)?;
        let e = image_pos_embed(tape, &self.store, depth, &frustum, &self.embed)?;
        let image = tape.add(feats, e)?;

        let t = tape.param(&self.store, self.bev_queries);
        let height = predict_bin_dist(tape, &self.store, t, &self.height_head)?;
        let p = bev_pos_embed(tape, &self.store, height, &self.bev_grid, &self.embed)?;
        let bev = tape.add(t, p)?;

        let q = tape.param(&self.store, self.lane_queries);
        let out = decomposed_stack(tape, &self.store, &self.layers, q, image, bev, cfg.joint_norm)?;
        let head = gen_kernels_scores(tape, &self.store, &self.head, out.lanes)?;
        let maps = conv_offsets(tape, out.image, out.bev, &head)?;
        Ok(Forward { scores: head.scores, image_offsets: maps.image, bev_offsets: maps.bev })
    }

    /// Matches predictions to targets on the current values.
    pub fn assign(
        &self,
        tape: &Tape,
        fwd: &Forward,
        targets: &[LaneTarget],
        weights: &LossWeights,
    ) -> Result<Assignment> {
        if targets.is_empty() {
            return hungarian(&vec![Vec::new(); self.config.lanes]);
        }
        let costs = match_costs(
            tape.value(fwd.scores),
            tape.value(fwd.image_offsets),
            tape.value(fwd.bev_offsets),
            targets,
            weights,
        )?;
        hungarian(&costs.total)
    }

    /// Loss under a fixed assignment.
    pub fn loss_with(
        &self,
        tape: &mut Tape,
        fwd: &Forward,
        targets: &[LaneTarget],
        assignment: &Assignment,
        weights: &LossWeights,
    ) -> Result<Var> {
        total_loss(tape, fwd.scores, fwd.image_offsets, fwd.bev_offsets, targets, assignment, weights)
    }

    /// Forward pass, matching and loss; returns the loss variable.
    pub fn loss(
        &self,
        tape: &mut Tape,
        raster: &Tensor,
        cam: &CameraModel,
        targets: &[LaneTarget],
        weights: &LossWeights,
    ) -> Result<(Var, Assignment)> {
        let fwd = self.forward(tape, raster, cam)?;
        let a = self.assign(tape, &fwd, targets, weights)?;
        let loss = self.loss_with(tape, &fwd, targets, &a, weights)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok((loss, a))
    }

    /// BEV detections for one scene.
    pub fn detect(&self, raster: &Tensor, cam: &CameraModel, params: &VoteParams) -> Result<LaneDetections> {
        let mut tape = Tape::<f64>::new();
        let fwd = self.forward(&mut tape, raster, cam)?;
        vote_bev(tape.value(fwd.bev_offsets), tape.value(fwd.scores), &self.config.layout(), params)
    }
}

/// Turns decoded points into evaluable lanes: points sharing a y are
/// averaged, and lanes covering fewer than two y values are dropped.
pub fn detections_to_lanes(det: &LaneDetections) -> Vec<Lane3D> {
    let mut out = Vec::new();
    for lane in &det.lanes {
        let mut merged: Vec<([f64; 3], usize)> = Vec::new();
        for p in &lane.points {
            match merged.last_mut() {
                Some((acc, n)) if acc[1] == p[1] => {
                    acc[0] += p[0];
                    acc[2] += p[2];
                    *n += 1;
                }
                _ => merged.push((*p, 1)),
            }
        }
        let pts: Vec<[f64; 3]> =
            merged.into_iter().map(|(p, n)| [p[0] / n as f64, p[1], p[2] / n as f64]).collect();
        if let Ok(l) = Lane3D::new(pts, lane.class) {
            out.push(l);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::DetectedLane;
    use crate::synthlane::{generate_scene, SceneSpec, TargetLayout};

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            image_hw: (6, 8),
            channels: 8,
            lanes: 3,
            bev_hw: (5, 4),
            depth_bins: 4,
            height_bins: 3,
            layers: 1,
            ..ModelConfig::default()
        }
    }

    fn toy_scene(cfg: &ModelConfig) -> crate::synthlane::Scene {
        let spec = SceneSpec {
            lane_count: 2,
            lateral_offsets: vec![-1.5, 2.0],
            curvature: 1e-4,
            height_profile: vec![0.0, 0.01],
            class_ids: vec![0, 1],
            fork: None,
            seed: 0,
            camera: CameraModel::synthetic(cfg.image_hw).unwrap(),
        };
        let layout = TargetLayout { bev: cfg.layout(), classes: cfg.classes, max_lanes: cfg.lanes };
        generate_scene(&spec, &layout).unwrap()
    }

    #[test]
    fn shapes_and_groups() {
        let cfg = toy_config();
        let m = Model::new(cfg.clone(), 0).unwrap();
        let scene = toy_scene(&cfg);
        let mut tape = Tape::<f64>::new();
        let f = m.forward(&mut tape, &scene.input_raster, &scene.spec.camera).unwrap();
        assert_eq!(tape.shape(f.scores), &[3, 4]);
        assert_eq!(tape.shape(f.image_offsets), &[3, 48, 2]);
        assert_eq!(tape.shape(f.bev_offsets), &[3, 20, 3]);
        let groups = m.store.groups();
        for g in ["lift", "depth", "height", "embed", "bev_query", "lane_query", "attn0", "head"] {
            assert!(groups.iter().any(|x| x == g), "{g} missing from {groups:?}");
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Model::new(toy_config(), 3).unwrap();
        let b = Model::new(toy_config(), 3).unwrap();
        let c = Model::new(toy_config(), 4).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn loss_is_finite_and_camera_checked() {
        let cfg = toy_config();
        let m = Model::new(cfg.clone(), 0).unwrap();
        let scene = toy_scene(&cfg);
        let mut tape = Tape::<f64>::new();
        let (loss, a) = m
            .loss(&mut tape, &scene.input_raster, &scene.spec.camera, &scene.targets.lanes, &LossWeights::default())
            .unwrap();
        assert!(tape.value(loss).item() > 0.0);
        assert_eq!(a.pred_of_gt.len(), 2);
        let wrong = CameraModel::synthetic((7, 8)).unwrap();
        assert!(matches!(m.forward(&mut Tape::<f64>::new(), &scene.input_raster, &wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let cfg = toy_config();
        let m = Model::new(cfg.clone(), 1).unwrap();
        let scene = toy_scene(&cfg);
        let mut t64 = Tape::<f64>::new();
        let f64_ = m.forward(&mut t64, &scene.input_raster, &scene.spec.camera).unwrap();
        let mut t32 = Tape::<f32>::new();
        let f32_ = m.forward(&mut t32, &scene.input_raster, &scene.spec.camera).unwrap();
        let (a, b) = (t64.value(f64_.scores), t32.value(f32_.scores));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - *y as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn merging_points_per_row() {
        let det = LaneDetections {
            lanes: vec![
                DetectedLane {
                    class: 1,
                    score: 0.9,
                    points: vec![[0.0, 3.0, 0.0], [1.0, 3.0, 1.0], [0.5, 5.0, 0.0]],
                    query: 0,
                },
                DetectedLane { class: 0, score: 0.8, points: vec![[0.0, 3.0, 0.0]], query: 1 },
            ],
        };
        let lanes = detections_to_lanes(&det);
        assert_eq!(lanes.len(), 1);
        assert_eq!(lanes[0].points, vec![[0.5, 3.0, 0.5], [0.5, 5.0, 0.0]]);
        assert_eq!(lanes[0].class_id, 1);
    }
}
