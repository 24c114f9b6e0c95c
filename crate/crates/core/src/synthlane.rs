//! Synthetic road scenes: parametric 3-D lanes over a polynomial height
//! profile, an analytic 3-channel input raster, and dense supervision.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{ipm_project, polyline_distance, project_lane, resample_polyline, BevLayout, CameraModel, Lane3D};
use crate::head::{gt_targets, Targets};
use crate::numerics::Tensor;

/// Longitudinal extent of every generated lane, meters.
pub const Y_RANGE: (f64, f64) = (3.0, 103.0);
/// Lateral extent lanes must stay inside, meters.
pub const X_RANGE: (f64, f64) = (-10.0, 10.0);
/// Height bound over [`Y_RANGE`], meters.
pub const MAX_ABS_Z: f64 = 5.0;
/// Heatmap Gaussian width, feature pixels.
pub const HEATMAP_SIGMA: f64 = 2.0;
/// Arc-length spacing of lane points, meters.
pub const LANE_STEP: f64 = 0.5;

/// A second lane that leaves lane `lane` at `at_y` and drifts `spread`
/// meters sideways by the far end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fork {
    pub lane: usize,
    pub at_y: f64,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub lane_count: usize,
    pub lateral_offsets: Vec<f64>,
    /// `x(y) = offset + curvature·y²`.
    pub curvature: f64,
    /// `z(y) = c₀ + c₁·y + c₂·y²`; at most three coefficients.
    pub height_profile: Vec<f64>,
    pub class_ids: Vec<usize>,
    #[serde(default)]
    pub fork: Option<Fork>,
    pub seed: u64,
    /// Stored beside the spec in scene files.
    #[serde(skip, default = "placeholder_camera")]
    pub camera: CameraModel,
}

fn placeholder_camera() -> CameraModel {
    CameraModel::synthetic((1, 1)).expect("1×1 synthetic camera is valid")
}

fn poly(coeffs: &[f64], y: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * y + c)
}

impl SceneSpec {
    pub fn height(&self, y: f64) -> f64 {
        poly(&self.height_profile, y)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lane_count;
        if !(1..=6).contains(&(n + usize::from(self.fork.is_some()))) {
            return Err(Error::Spec(format!("scene must hold 1 to 6 lanes, got {n} plus fork")));
        }
        if self.lateral_offsets.len() != n || self.class_ids.len() != n {
            return Err(Error::Spec("offsets and classes must list one entry per lane".into()));
        }
        if self.height_profile.len() > 3 {
            return Err(Error::Spec("height profile is at most quadratic".into()));
        }
        let finite = self.lateral_offsets.iter().chain(&self.height_profile).chain([&self.curvature]);
        if finite.clone().any(|v| !v.is_finite()) {
            return Err(Error::Spec("scene parameters must be finite".into()));
        }
        if let Some(f) = self.fork {
            if f.lane >= n || !(f.at_y > Y_RANGE.0 && f.at_y < Y_RANGE.1) || !f.spread.is_finite() {
                return Err(Error::Spec(format!("fork {f:?} is invalid")));
            }
        }
        // extremes of a quadratic over an interval sit at the ends or the vertex
        let mut ys = vec![Y_RANGE.0, Y_RANGE.1];
        let c = |k: usize| self.height_profile.get(k).copied().unwrap_or(0.0);
        if c(2) != 0.0 {
            let v = -c(1) / (2.0 * c(2));
            if v > Y_RANGE.0 && v < Y_RANGE.1 {
                ys.push(v);
            }
        }
        if ys.iter().any(|&y| self.height(y).abs() > MAX_ABS_Z) {
            return Err(Error::Spec(format!("height profile leaves ±{MAX_ABS_Z} m")));
        }
        for lane in self.lanes_unchecked() {
            if lane.points.iter().any(|p| p[0] < X_RANGE.0 || p[0] > X_RANGE.1) {
                return Err(Error::Spec(format!("lane leaves the lateral range {X_RANGE:?}")));
            }
        }
        Ok(())
    }

    fn lanes_unchecked(&self) -> Vec<Lane3D> {
        let dense = 2000;
        let ys: Vec<f64> =
            (0..=dense).map(|i| Y_RANGE.0 + (Y_RANGE.1 - Y_RANGE.0) * i as f64 / dense as f64).collect();
        let build = |x: &dyn Fn(f64) -> f64, class_id: usize| {
            let pts: Vec<[f64; 3]> = ys.iter().map(|&y| [x(y), y, self.height(y)]).collect();
            let pts = resample_polyline(&pts, LANE_STEP);
            let n = pts.len();
            Lane3D { points: pts, class_id, visibility: vec![true; n] }
        };
        let mut lanes: Vec<Lane3D> = self
            .lateral_offsets
            .iter()
            .zip(&self.class_ids)
            .map(|(&off, &cls)| build(&|y| off + self.curvature * y * y, cls))
            .collect();
        if let Some(f) = self.fork {
            let off = self.lateral_offsets[f.lane];
            let span = Y_RANGE.1 - f.at_y;
            let x = move |y: f64| {
                let drift = if y > f.at_y { f.spread * ((y - f.at_y) / span).powi(2) } else { 0.0 };
                off + self.curvature * y * y + drift
            };
            lanes.push(build(&x, self.class_ids[f.lane]));
        }
        lanes
    }

    /// Ground-truth lanes sampled every [`LANE_STEP`] meters of arc length.
    pub fn lanes(&self) -> Result<Vec<Lane3D>> {
        self.validate()?;
        Ok(self.lanes_unchecked())
    }
}

/// What the supervision targets are computed against.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetLayout {
    pub bev: BevLayout,
    pub classes: usize,
    pub max_lanes: usize,
}

impl Default for TargetLayout {
    fn default() -> Self {
        Self {
            bev: BevLayout::new(50, 32, X_RANGE, Y_RANGE).expect("default layout is valid"),
            classes: 2,
            max_lanes: 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub gt_lanes: Vec<Lane3D>,
    /// `[H_a·W_a, 3]`: heatmap, row index, column index, each in [0, 1].
    pub input_raster: Tensor,
    pub targets: Targets,
}

/// Input raster for lanes seen by `cam` (its image size is the raster size).
pub fn render_raster(lanes: &[Lane3D], cam: &CameraModel) -> Result<Tensor> {
    let (h, w) = cam.image_size();
    let projected: Vec<Vec<[f64; 2]>> = lanes
        .iter()
        .map(|l| project_lane(l, cam).map(|p| p.points))
        .collect::<Result<_>>()?;
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(h * w * 3);
    for v in 0..h {
        for u in 0..w {
            let d = projected
                .iter()
                .map(|line| polyline_distance([u as f64, v as f64], line))
                .fold(f64::INFINITY, f64::min);
            data.extend([(-d * d / (2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA)).exp(), norm(v, h), norm(u, w)]);
        }
    }
    Tensor::new(&[h * w, 3], data)
}

/// Deterministic given the spec.
pub fn generate_scene(spec: &SceneSpec, layout: &TargetLayout) -> Result<Scene> {
    let gt_lanes = spec.lanes()?;
    build_scene(spec.clone(), gt_lanes, layout)
}

fn build_scene(spec: SceneSpec, gt_lanes: Vec<Lane3D>, layout: &TargetLayout) -> Result<Scene> {
    let input_raster = render_raster(&gt_lanes, &spec.camera)?;
    let targets = gt_targets(&gt_lanes, &spec.camera, &layout.bev, layout.classes, layout.max_lanes)?;
    Ok(Scene { spec, gt_lanes, input_raster, targets })
}

/// Ranges scene specs are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecDistribution {
    pub lane_count: (usize, usize),
    pub lane_spacing: f64,
    pub offset_jitter: f64,
    pub curvature: f64,
    pub slope: f64,
    pub crest: f64,
    pub fork_probability: f64,
    pub classes: usize,
    pub image_size: (usize, usize),
}

impl Default for SpecDistribution {
    fn default() -> Self {
        Self {
            lane_count: (2, 4),
            lane_spacing: 3.5,
            offset_jitter: 0.3,
            curvature: 3e-4,
            slope: 0.02,
            crest: 2e-4,
            fork_probability: 0.2,
            classes: 2,
            image_size: (24, 32),
        }
    }
}

impl SpecDistribution {
    /// One spec; redraws until it satisfies the scene invariants.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<SceneSpec> {
        let (lo, hi) = self.lane_count;
        if lo == 0 || hi < lo || hi > 6 || self.classes == 0 {
            return Err(Error::Config(format!("bad lane-count range {:?}", self.lane_count)));
        }
        let camera = CameraModel::synthetic(self.image_size)?;
        for _ in 0..1000 {
            let n = rng.gen_range(lo..=hi);
            let sym = |rng: &mut dyn rand::RngCore, a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
            let lateral_offsets = (0..n)
                .map(|i| (i as f64 - (n - 1) as f64 / 2.0) * self.lane_spacing + sym(rng, self.offset_jitter))
                .collect();
            let height_profile = vec![0.0, sym(rng, self.slope), sym(rng, self.crest)];
            let fork = (n < 6 && rng.gen_bool(self.fork_probability)).then(|| Fork {
                lane: rng.gen_range(0..n),
                at_y: rng.gen_range(30.0..70.0),
                spread: if rng.gen_bool(0.5) { 3.0 } else { -3.0 },
            });
            let spec = SceneSpec {
                lane_count: n,
                lateral_offsets,
                curvature: sym(rng, self.curvature),
                height_profile,
                class_ids: (0..n).map(|_| rng.gen_range(0..self.classes)).collect(),
                fork,
                seed: rng.gen(),
                camera: camera.clone(),
            };
            if spec.validate().is_ok() {
                return Ok(spec);
            }
        }
        Err(Error::Config("spec distribution rarely yields a valid scene".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub spec: SceneSpec,
    pub camera: CameraModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub distribution: SpecDistribution,
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub manifest: Manifest,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn scene_file_name(i: usize) -> String {
    format!("scene_{i:04}.json")
}

pub fn make_dataset(count: usize, dist: &SpecDistribution, seed: u64, layout: &TargetLayout) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("dataset needs at least one scene".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(count);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let spec = dist.sample(&mut rng)?;
        entries.push(ManifestEntry { file: scene_file_name(i), camera: spec.camera.clone(), spec: spec.clone() });
        scenes.push(generate_scene(&spec, layout)?);
    }
    Ok(Dataset { scenes, manifest: Manifest { seed, count, distribution: dist.clone(), scenes: entries } })
}

#[derive(Serialize)]
struct LaneOut<'a> {
    class: usize,
    points: &'a [[f64; 3]],
}

#[derive(Serialize)]
struct SceneOut<'a> {
    spec: &'a SceneSpec,
    camera: &'a CameraModel,
    gt_lanes: Vec<LaneOut<'a>>,
}

#[derive(Deserialize)]
struct LaneIn {
    class: usize,
    points: Vec<[f64; 3]>,
}

/// Pretty JSON; rasters and targets are not stored.
pub fn scene_to_json(scene: &Scene) -> Result<String> {
    let out = SceneOut {
        spec: &scene.spec,
        camera: &scene.spec.camera,
        gt_lanes: scene.gt_lanes.iter().map(|l| LaneOut { class: l.class_id, points: &l.points }).collect(),
    };
    Ok(serde_json::to_string_pretty(&out)?)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, scene_to_json(scene)?)?;
    Ok(())
}

fn field<T: serde::de::DeserializeOwned>(obj: &serde_json::Map<String, Value>, name: &str) -> Result<T> {
    let v = obj
        .get(name)
        .ok_or_else(|| Error::Parse { field: name.into(), message: "missing".into() })?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Parse { field: name.into(), message: e.to_string() })
}

/// Parses and validates a scene, then regenerates its raster and targets.
pub fn scene_from_json(text: &str, layout: &TargetLayout) -> Result<Scene> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::Parse { field: "<root>".into(), message: e.to_string() })?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::Parse { field: "<root>".into(), message: "expected an object".into() })?;
    let mut spec: SceneSpec = field(obj, "spec")?;
    spec.camera = field(obj, "camera")?;
    let lanes: Vec<LaneIn> = field(obj, "gt_lanes")?;
    let gt_lanes = lanes
        .into_iter()
        .map(|l| Lane3D::new(l.points, l.class))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Parse { field: "gt_lanes".into(), message: e.to_string() })?;
    spec.validate()?;
    build_scene(spec, gt_lanes, layout)
}

pub fn load_scene(path: &Path, layout: &TargetLayout) -> Result<Scene> {
    scene_from_json(&fs::read_to_string(path)?, layout)
}

/// Writes every scene plus the manifest into `dir`, creating it if needed.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (scene, entry) in data.scenes.iter().zip(&data.manifest.scenes) {
        save_scene(scene, &dir.join(&entry.file))?;
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&data.manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path, layout: &TargetLayout) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse { field: "manifest".into(), message: e.to_string() })?;
    for e in &mut manifest.scenes {
        e.spec.camera = e.camera.clone();
    }
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| load_scene(&dir.join(&e.file), layout))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { scenes, manifest })
}

/// Road shape used by the IPM comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Flat,
    Uphill,
    Downhill,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Self::Flat),
            "uphill" => Ok(Self::Uphill),
            "downhill" => Ok(Self::Downhill),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

impl Profile {
    /// `z(y)` coefficients: flat, `0.02·y`, `−0.02·y`.
    pub fn height_profile(self) -> Vec<f64> {
        match self {
            Self::Flat => vec![0.0],
            Self::Uphill => vec![0.0, 0.02],
            Self::Downhill => vec![0.0, -0.02],
        }
    }
}

/// One lane point next to its flat-road reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IpmRow {
    pub lane: usize,
    pub y: f64,
    pub x_true: f64,
    pub x_ipm: f64,
    pub abs_err: f64,
}

/// Projects each lane to the image and back onto the z = 0 plane.
pub fn ipm_rows(lanes: &[Lane3D], cam: &CameraModel) -> Result<Vec<IpmRow>> {
    let mut rows = Vec::new();
    for (i, lane) in lanes.iter().enumerate() {
        let image = project_lane(lane, cam)?;
        let kept: Vec<[f64; 3]> =
            lane.points.iter().zip(&image.visibility).filter(|(_, &v)| v).map(|(p, _)| *p).collect();
        let back = ipm_project(&image, cam)?;
        if back.points.len() != kept.len() {
            return Err(Error::Geometry(format!("lane {i} crosses the horizon")));
        }
        for (t, r) in kept.iter().zip(&back.points) {
            rows.push(IpmRow { lane: i, y: t[1], x_true: t[0], x_ipm: r[0], abs_err: (r[0] - t[0]).abs() });
        }
    }
    Ok(rows)
}

/// Two straight lanes at ±1.75 m over `profile`, seen by the synthetic
/// camera, sampled every meter.
pub fn ipm_demo(profile: Profile, image_size: (usize, usize)) -> Result<Vec<IpmRow>> {
    let cam = CameraModel::synthetic(image_size)?;
    let z = profile.height_profile();
    let lanes = [-1.75, 1.75]
        .iter()
        .map(|&x| {
            let pts = (0..=100).map(|k| {
                let y = Y_RANGE.0 + k as f64;
                [x, y, poly(&z, y)]
            });
            Lane3D::new(pts.collect(), 0)
        })
        .collect::<Result<Vec<_>>>()?;
    ipm_rows(&lanes, &cam)
}
