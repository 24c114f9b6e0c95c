//! Lane-set evaluation: point-wise F-score at fixed y positions, and the
//! top-view IoU plus unilateral chamfer distance protocol.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{polyline_distance3, segment_distance2, Lane3D};
use crate::matching::hungarian;

/// Written at the top of every CSV report.
pub const MATCHING_NOTE: &str =
    "lane pairs are matched by optimal assignment maximizing true positives (substitute for edit-distance matching)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub max_point_dist: f64,
    pub coverage_frac: f64,
    pub y_samples: Vec<f64>,
    pub iou_thresh: f64,
    pub cd_thresh: f64,
    pub near_far_split: f64,
    pub raster_res: f64,
    pub strip_width: f64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_point_dist: 1.5,
            coverage_frac: 0.75,
            y_samples: (3..=103).map(f64::from).collect(),
            iou_thresh: 0.3,
            cd_thresh: 0.3,
            near_far_split: 40.0,
            raster_res: 0.1,
            strip_width: 0.3,
            x_range: (-10.0, 10.0),
            y_range: (3.0, 103.0),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.max_point_dist, self.iou_thresh, self.cd_thresh, self.raster_res, self.strip_width];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("evaluation thresholds must be positive".into()));
        }
        if !(self.coverage_frac > 0.0 && self.coverage_frac <= 1.0) {
            return Err(Error::Config(format!("coverage {} must lie in (0, 1]", self.coverage_frac)));
        }
        if self.y_samples.is_empty() {
            return Err(Error::Config("no evaluation y positions".into()));
        }
        if !(self.x_range.0 < self.x_range.1 && self.y_range.0 < self.y_range.1) {
            return Err(Error::Config("evaluation ranges must be increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub x_err_near: f64,
    pub x_err_far: f64,
    pub z_err_near: f64,
    pub z_err_far: f64,
    pub cd_err: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "f1,precision,recall,x_err_near,x_err_far,z_err_near,z_err_far,cd_err";

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        for (i, v) in [
            self.f1,
            self.precision,
            self.recall,
            self.x_err_near,
            self.x_err_far,
            self.z_err_near,
            self.z_err_far,
            self.cd_err,
        ]
        .iter()
        .enumerate()
        {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v}");
        }
        s
    }

    /// Comment line, header and one row.
    pub fn to_csv(&self) -> String {
        format!("# {MATCHING_NOTE}\n{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn merge(&mut self, o: Mean) {
        self.sum += o.sum;
        self.n += o.n;
    }

    fn value(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

/// Counts and error sums accumulated over scenes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Tally {
    pub true_positives: usize,
    pub predictions: usize,
    pub ground_truths: usize,
    x_near: Mean,
    x_far: Mean,
    z_near: Mean,
    z_far: Mean,
    cd: Mean,
}

impl Tally {
    pub fn merge(&mut self, o: &Tally) {
        self.true_positives += o.true_positives;
        self.predictions += o.predictions;
        self.ground_truths += o.ground_truths;
        self.x_near.merge(o.x_near);
        self.x_far.merge(o.x_far);
        self.z_near.merge(o.z_near);
        self.z_far.merge(o.z_far);
        self.cd.merge(o.cd);
    }

    /// Empty prediction and ground-truth sets count as perfect.
    pub fn report(&self) -> EvalReport {
        let (precision, recall) = if self.predictions == 0 && self.ground_truths == 0 {
            (1.0, 1.0)
        } else {
            (
                if self.predictions == 0 { 0.0 } else { self.true_positives as f64 / self.predictions as f64 },
                if self.ground_truths == 0 { 0.0 } else { self.true_positives as f64 / self.ground_truths as f64 },
            )
        };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        EvalReport {
            f1,
            precision,
            recall,
            x_err_near: self.x_near.value(),
            x_err_far: self.x_far.value(),
            z_err_near: self.z_near.value(),
            z_err_far: self.z_far.value(),
            cd_err: self.cd.value(),
        }
    }
}

/// `(x, z)` of the visible polyline at each `y` by linear interpolation;
/// `None` outside the lane's y span.
pub fn resample_at_y(lane: &Lane3D, ys: &[f64]) -> Result<Vec<Option<[f64; 2]>>> {
    let pts = lane.visible_points();
    if pts.len() < 2 {
        return Err(Error::Contract("lane needs at least two visible points to resample".into()));
    }
    Ok(ys
        .iter()
        .map(|&y| {
            if y < pts[0][1] || y > pts[pts.len() - 1][1] {
                return None;
            }
            let k = pts.partition_point(|p| p[1] < y);
            if pts[k][1] == y {
                return Some([pts[k][0], pts[k][2]]);
            }
            let (a, b) = (pts[k - 1], pts[k]);
            let t = (y - a[1]) / (b[1] - a[1]);
            Some([a[0] + t * (b[0] - a[0]), a[2] + t * (b[2] - a[2])])
        })
        .collect())
}

/// Assigns predictions to ground truths where `cost[p][g]` is `Some` for
/// admissible pairs; returns the admissible `(p, g)` pairs of an assignment
/// with the most of them, preferring lower costs. Costs lie in `[0, 1)`.
fn match_pairs(cost: &[Vec<Option<f64>>], n_pred: usize, n_gt: usize) -> Result<Vec<(usize, usize)>> {
    if n_pred == 0 || n_gt == 0 {
        return Ok(Vec::new());
    }
    let k = n_pred.min(n_gt) as f64;
    // each admissible pair costs < 1/(k+1), so one extra match always wins
    let c = |p: usize, g: usize| cost[p][g].map_or(1.0, |v| v / (k + 1.0));
    let pairs: Vec<(usize, usize)> = if n_gt <= n_pred {
        let m: Vec<Vec<f64>> = (0..n_pred).map(|p| (0..n_gt).map(|g| c(p, g)).collect()).collect();
        hungarian(&m)?.pred_of_gt.iter().enumerate().map(|(g, &p)| (p, g)).collect()
    } else {
        let m: Vec<Vec<f64>> = (0..n_gt).map(|g| (0..n_pred).map(|p| c(p, g)).collect()).collect();
        hungarian(&m)?.pred_of_gt.iter().enumerate().map(|(p, &g)| (p, g)).collect()
    };
    Ok(pairs.into_iter().filter(|&(p, g)| cost[p][g].is_some()).collect())
}

fn add_point_errors(t: &mut Tally, a: &[Option<[f64; 2]>], b: &[Option<[f64; 2]>], cfg: &EvalConfig) {
    for ((pa, pb), &y) in a.iter().zip(b).zip(&cfg.y_samples) {
        if let (Some(pa), Some(pb)) = (pa, pb) {
            let (dx, dz) = ((pa[0] - pb[0]).abs(), (pa[1] - pb[1]).abs());
            if y < cfg.near_far_split {
                t.x_near.push(dx);
                t.z_near.push(dz);
            } else {
                t.x_far.push(dx);
                t.z_far.push(dz);
            }
        }
    }
}

fn samples(lanes: &[Lane3D], cfg: &EvalConfig) -> Result<Vec<Vec<Option<[f64; 2]>>>> {
    lanes.iter().map(|l| resample_at_y(l, &cfg.y_samples)).collect()
}

/// Point-wise protocol for one scene: a pair matches when at least
/// `coverage_frac` of the co-visible y positions are closer than
/// `max_point_dist` in `(x, z)`.
pub fn tally_openlane(preds: &[Lane3D], gts: &[Lane3D], cfg: &EvalConfig) -> Result<Tally> {
    cfg.validate()?;
    let (sp, sg) = (samples(preds, cfg)?, samples(gts, cfg)?);
    let cost: Vec<Vec<Option<f64>>> = sp
        .iter()
        .map(|a| {
            sg.iter()
                .map(|b| {
                    let d: Vec<f64> = a
                        .iter()
                        .zip(b)
                        .filter_map(|(pa, pb)| Some((pa.as_ref()?, pb.as_ref()?)))
                        .map(|(pa, pb)| (pa[0] - pb[0]).hypot(pa[1] - pb[1]))
                        .collect();
                    if d.is_empty() {
                        return None;
                    }
                    let close = d.iter().filter(|&&v| v < cfg.max_point_dist).count();
                    if (close as f64) < cfg.coverage_frac * d.len() as f64 {
                        return None;
                    }
                    let mean = d.iter().map(|v| v.min(cfg.max_point_dist)).sum::<f64>() / d.len() as f64;
                    Some(mean / cfg.max_point_dist * 0.999)
                })
                .collect()
        })
        .collect();
    let mut t = Tally { predictions: preds.len(), ground_truths: gts.len(), ..Default::default() };
    for (p, g) in match_pairs(&cost, preds.len(), gts.len())? {
        t.true_positives += 1;
        add_point_errors(&mut t, &sp[p], &sg[g], cfg);
    }
    Ok(t)
}

pub fn f_score_openlane(preds: &[Lane3D], gts: &[Lane3D], cfg: &EvalConfig) -> Result<EvalReport> {
    Ok(tally_openlane(preds, gts, cfg)?.report())
}

/// Raster cells (sorted ids) within `strip_width / 2` of the lane's top-view
/// polyline, on a `raster_res` grid over the evaluation range.
pub fn rasterize(lane: &Lane3D, cfg: &EvalConfig) -> Vec<u64> {
    let pts: Vec<[f64; 2]> = lane.visible_points().iter().map(|p| [p[0], p[1]]).collect();
    let half = cfg.strip_width / 2.0;
    let res = cfg.raster_res;
    let cols = ((cfg.x_range.1 - cfg.x_range.0) / res).round() as i64;
    let rows = ((cfg.y_range.1 - cfg.y_range.0) / res).round() as i64;
    let mut cells = Vec::new();
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let ix0 = (((a[0].min(b[0]) - half - cfg.x_range.0) / res).floor() as i64).max(0);
        let ix1 = (((a[0].max(b[0]) + half - cfg.x_range.0) / res).ceil() as i64).min(cols - 1);
        let iy0 = (((a[1] - half - cfg.y_range.0) / res).floor() as i64).max(0);
        let iy1 = (((b[1] + half - cfg.y_range.0) / res).ceil() as i64).min(rows - 1);
        for iy in iy0..=iy1 {
            let y = cfg.y_range.0 + (iy as f64 + 0.5) * res;
            for ix in ix0..=ix1 {
                let x = cfg.x_range.0 + (ix as f64 + 0.5) * res;
                if segment_distance2([x, y], a, b) <= half * half {
                    cells.push((iy * cols + ix) as u64);
                }
            }
        }
    }
    cells.sort_unstable();
    cells.dedup();
    cells
}

/// Intersection over union of two sorted cell sets.
pub fn raster_iou(a: &[u64], b: &[u64]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean distance from each visible point of `from` to the polyline `to`.
pub fn unilateral_chamfer(from: &Lane3D, to: &Lane3D) -> f64 {
    let target = to.visible_points();
    let src = from.visible_points();
    src.iter().map(|p| polyline_distance3(*p, &target)).sum::<f64>() / src.len() as f64
}

/// Top-view IoU gate followed by the chamfer-distance test, for one scene.
pub fn tally_once(preds: &[Lane3D], gts: &[Lane3D], cfg: &EvalConfig) -> Result<Tally> {
    cfg.validate()?;
    let rp: Vec<Vec<u64>> = preds.iter().map(|l| rasterize(l, cfg)).collect();
    let rg: Vec<Vec<u64>> = gts.iter().map(|l| rasterize(l, cfg)).collect();
    let mut cds = vec![vec![0.0; gts.len()]; preds.len()];
    let cost: Vec<Vec<Option<f64>>> = preds
        .iter()
        .enumerate()
        .map(|(p, lp)| {
            gts.iter()
                .enumerate()
                .map(|(g, lg)| {
                    if raster_iou(&rp[p], &rg[g]) <= cfg.iou_thresh {
                        return None;
                    }
                    let cd = unilateral_chamfer(lp, lg);
                    cds[p][g] = cd;
                    (cd < cfg.cd_thresh).then(|| cd / cfg.cd_thresh)
                })
                .collect()
        })
        .collect();
    let (sp, sg) = (samples(preds, cfg)?, samples(gts, cfg)?);
    let mut t = Tally { predictions: preds.len(), ground_truths: gts.len(), ..Default::default() };
    for (p, g) in match_pairs(&cost, preds.len(), gts.len())? {
        t.true_positives += 1;
        t.cd.push(cds[p][g]);
        add_point_errors(&mut t, &sp[p], &sg[g], cfg);
    }
    Ok(t)
}

pub fn cd_once(preds: &[Lane3D], gts: &[Lane3D], cfg: &EvalConfig) -> Result<EvalReport> {
    Ok(tally_once(preds, gts, cfg)?.report())
}
