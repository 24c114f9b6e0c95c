//! Run configuration, optimizers, checkpoints, the training loop,
//! dataset evaluation and per-group gradient checks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::VoteParams;
use crate::matching::LossWeights;
use crate::metrics::{tally_once, tally_openlane, EvalConfig, EvalReport, Tally};
use crate::model::{detections_to_lanes, Model, ModelConfig};
use crate::numerics::{relative_error, ParamId, Tape, Tensor};
use crate::geometry::CameraModel;
use crate::synthlane::{generate_scene, Scene, SceneSpec, TargetLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Learning-rate decay over the configured step count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate at step 0 down to zero at `steps`.
    Cosine,
}

impl Schedule {
    pub fn rate(self, base: f64, step: usize, horizon: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine if horizon == 0 => base,
            Self::Cosine => {
                let t = (step.min(horizon) as f64) / horizon as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    /// Decoupled weight decay, Adam only.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 500, learning_rate: 1e-4, optimizer: OptimizerKind::Sgd, schedule: Schedule::Constant, weight_decay: 0.0, seed: 0 }
    }
}

/// Every tunable of a run, in one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vote: VoteParams,
    pub loss: LossWeights,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.vote.validate()?;
        self.loss.validate()?;
        self.eval.validate()?;
        let t = &self.train;
        if !(t.learning_rate > 0.0) || !t.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", t.learning_rate)));
        }
        if !(t.weight_decay >= 0.0) || !t.weight_decay.is_finite() {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Parse { field: "config".into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn target_layout(&self) -> TargetLayout {
        TargetLayout { bev: self.model.layout(), classes: self.model.classes, max_lanes: self.model.lanes }
    }
}

/// Moment estimates, indexed like the parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Rate used by the next `step`; `train` refreshes it from the schedule.
    pub learning_rate: f64,
    pub base_rate: f64,
    pub schedule: Schedule,
    /// Step at which the schedule bottoms out.
    pub horizon: usize,
    pub weight_decay: f64,
    pub adam: Option<AdamState>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            base_rate: cfg.learning_rate,
            schedule: cfg.schedule,
            horizon: cfg.steps,
            weight_decay: cfg.weight_decay,
            adam: None,
        }
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor]) -> Result<()> {
        let ids: Vec<ParamId> = model.store.ids().collect();
        if grads.len() != ids.len() {
            return Err(Error::Contract("one gradient per parameter expected".into()));
        }
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in ids.iter().zip(grads) {
                    for (p, d) in model.store.get_mut(*id).data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
                let st = self.adam.get_or_insert_with(|| AdamState {
                    t: 0,
                    m: grads.iter().map(|g| vec![0.0; g.len()]).collect(),
                    v: grads.iter().map(|g| vec![0.0; g.len()]).collect(),
                });
                st.t += 1;
                let (c1, c2) = (1.0 - b1.powi(st.t as i32), 1.0 - b2.powi(st.t as i32));
                for (k, (id, g)) in ids.iter().zip(grads).enumerate() {
                    let p = model.store.get_mut(*id).data_mut();
                    for (i, d) in g.data().iter().enumerate() {
                        st.m[k][i] = b1 * st.m[k][i] + (1.0 - b1) * d;
                        st.v[k][i] = b2 * st.v[k][i] + (1.0 - b2) * d * d;
                        let upd = (st.m[k][i] / c1) / ((st.v[k][i] / c2).sqrt() + eps);
                        p[i] -= lr * (upd + self.weight_decay * p[i]);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Number of optimizer steps taken so far.
    pub step: usize,
    pub params: Vec<NamedTensor>,
    #[serde(default)]
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, model: &Model, opt: &Optimizer, step: usize) -> Self {
        let params = model
            .store
            .ids()
            .map(|id| {
                let t = model.store.get(id);
                NamedTensor { name: model.store.name(id).to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() }
            })
            .collect();
        Self { config: config.clone(), step, params, adam: opt.adam.clone() }
    }

    /// Rebuilds the model and optimizer; names and shapes must match the
    /// configured architecture.
    pub fn restore(&self) -> Result<(Model, Optimizer)> {
        self.config.validate()?;
        let mut model = Model::new(self.config.model.clone(), self.config.train.seed)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Parse {
                field: "params".into(),
                message: format!("{} tensors, architecture has {}", self.params.len(), model.store.len()),
            });
        }
        for p in &self.params {
            let id = model.store.find(&p.name).ok_or_else(|| Error::Parse {
                field: "params".into(),
                message: format!("unknown parameter `{}`", p.name),
            })?;
            if model.store.get(id).shape() != p.shape.as_slice() {
                return Err(Error::Parse { field: "params".into(), message: format!("shape of `{}` differs", p.name) });
            }
            *model.store.get_mut(id) = Tensor::new(&p.shape, p.data.clone())?;
        }
        let mut opt = Optimizer::new(&self.config.train);
        opt.adam = self.adam.clone();
        Ok((model, opt))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse { field: "checkpoint".into(), message: e.to_string() })
    }
}

/// Loss and gradients for one scene, in parameter-store order.
pub fn loss_and_grads(model: &Model, scene: &Scene, weights: &LossWeights) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::<f64>::new();
    let (loss, _) = model.loss(&mut tape, &scene.input_raster, &scene.spec.camera, &scene.targets.lanes, weights)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item();
    let g = model.store.ids().map(|id| grads.param(&model.store, id)).collect();
    Ok((value, g))
}

pub fn scene_loss(model: &Model, scene: &Scene, weights: &LossWeights) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let (loss, _) = model.loss(&mut tape, &scene.input_raster, &scene.spec.camera, &scene.targets.lanes, weights)?;
    Ok(tape.value(loss).item())
}

/// Mean loss over a scene set.
pub fn mean_loss(model: &Model, scenes: &[Scene], weights: &LossWeights) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Contract("no scenes".into()));
    }
    let mut sum = 0.0;
    for s in scenes {
        sum += scene_loss(model, s, weights)?;
    }
    Ok(sum / scenes.len() as f64)
}

/// Batch-size-one gradient steps cycling through `scenes` in order, from
/// global step `start`. `log` sees `(step, loss before the update)`.
pub fn train(
    model: &mut Model,
    opt: &mut Optimizer,
    scenes: &[Scene],
    weights: &LossWeights,
    start: usize,
    steps: usize,
    mut log: impl FnMut(usize, f64),
) -> Result<()> {
    if scenes.is_empty() && steps > 0 {
        return Err(Error::Contract("training needs at least one scene".into()));
    }
    for step in start..start + steps {
        let scene = &scenes[step % scenes.len()];
        let (loss, grads) = loss_and_grads(model, scene, weights)?;
        log(step, loss);
        opt.learning_rate = opt.schedule.rate(opt.base_rate, step, opt.horizon);
        opt.step(model, &grads)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Openlane,
    Once,
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "openlane" => Ok(Self::Openlane),
            "once" => Ok(Self::Once),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Openlane => "openlane",
            Self::Once => "once",
        })
    }
}

/// Detects lanes in every scene and scores them against the ground truth.
pub fn evaluate(
    model: &Model,
    scenes: &[Scene],
    vote: &VoteParams,
    eval: &EvalConfig,
    protocol: Protocol,
) -> Result<EvalReport> {
    let mut total = Tally::default();
    for s in scenes {
        let det = model.detect(&s.input_raster, &s.spec.camera, vote)?;
        let preds = detections_to_lanes(&det);
        let t = match protocol {
            Protocol::Openlane => tally_openlane(&preds, &s.gt_lanes, eval)?,
            Protocol::Once => tally_once(&preds, &s.gt_lanes, eval)?,
        };
        total.merge(&t);
    }
    Ok(total.report())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Analytic against central-difference gradients for every parameter
/// group, the assignment held at its value at the unperturbed point.
/// `flip` negates the analytic gradient of one group (a negative control).
pub fn gradcheck(
    model: &Model,
    scene: &Scene,
    weights: &LossWeights,
    eps: f64,
    tolerance: f64,
    flip: Option<&str>,
) -> Result<Vec<GroupCheck>> {
    let cam = &scene.spec.camera;
    let targets = &scene.targets.lanes;
    let mut tape = Tape::<f64>::new();
    let fwd = model.forward(&mut tape, &scene.input_raster, cam)?;
    let assignment = model.assign(&tape, &fwd, targets, weights)?;
    let loss = model.loss_with(&mut tape, &fwd, targets, &assignment, weights)?;
    let grads = tape.backward(loss)?;

    let mut work = model.clone();
    let eval = |m: &Model| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let f = m.forward(&mut t, &scene.input_raster, cam)?;
        let l = m.loss_with(&mut t, &f, targets, &assignment, weights)?;
        Ok(t.value(l).item())
    };
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for id in model.store.ids() {
        let group = model.store.group(id).to_string();
        let mut analytic = grads.param(&model.store, id).into_data();
        if flip == Some(group.as_str()) {
            analytic.iter_mut().for_each(|g| *g = -*g);
        }
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = work.store.get(id).data()[i];
            work.store.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.store.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.store.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        let e = groups.entry(group).or_default();
        e.0.extend(analytic);
        e.1.extend(numeric);
    }
    Ok(groups
        .into_iter()
        .map(|(group, (a, n))| {
            let err = relative_error(&a, &n);
            GroupCheck { group, entries: a.len(), max_rel_err: err, passed: err <= tolerance }
        })
        .collect())
}

pub const GRADCHECK_EPS: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// A configuration small enough to finite-difference every parameter.
pub fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        image_hw: (6, 8),
        channels: 8,
        lanes: 3,
        bev_hw: (5, 4),
        depth_bins: 4,
        height_bins: 3,
        layers: 1,
        ..ModelConfig::default()
    };
    cfg
}

/// Two gently climbing lanes around ±1.75 m, jittered by `seed`.
pub fn toy_scene(cfg: &RunConfig, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = vec![-1.75 + rng.gen_range(-0.5..0.5), 1.75 + rng.gen_range(-0.5..0.5)];
    let spec = SceneSpec {
        lane_count: 2,
        lateral_offsets: offsets,
        curvature: 0.0,
        height_profile: vec![0.0, 0.01],
        class_ids: vec![0, 1],
        fork: None,
        seed,
        camera: CameraModel::synthetic(cfg.model.image_hw)?,
    };
    generate_scene(&spec, &cfg.target_layout())
}
