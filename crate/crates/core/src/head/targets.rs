use crate::error::{Error, Result};
use crate::geometry::{BevLayout, CameraModel, Lane3D};
use crate::numerics::Tensor;

/// Arc-length spacing of the polyline samples offsets point to, meters.
pub const TARGET_RESAMPLE_STEP: f64 = 0.5;

/// Dense supervision for one ground-truth lane.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneTarget {
    /// `[N_a, 2]`: `(du, dv)` to the nearest projected sample, feature pixels.
    pub image: Tensor,
    /// `[N_b, 3]`: `(dx, dy)` to the nearest sample in cells, and its z.
    pub bev: Tensor,
    /// `[2 + N]`: background 0, foreground 1, one-hot class.
    pub scores: Tensor,
    /// Index of the source lane.
    pub lane: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub lanes: Vec<LaneTarget>,
    /// Lanes dropped for having fewer than two usable points.
    pub skipped: usize,
}

fn nearest<const D: usize>(samples: &[[f64; D]], x: f64, y: f64) -> [f64; D] {
    let mut best = samples[0];
    let mut best_d = f64::INFINITY;
    for s in samples {
        let d = (s[0] - x).powi(2) + (s[1] - y).powi(2);
        if d < best_d {
            best_d = d;
            best = *s;
        }
    }
    best
}

/// Targets for at most `max_lanes` ground-truth lanes. `cam.image_size()` is
/// the feature-map size.
pub fn gt_targets(
    lanes: &[Lane3D],
    cam: &CameraModel,
    layout: &BevLayout,
    classes: usize,
    max_lanes: usize,
) -> Result<Targets> {
    if lanes.len() > max_lanes {
        return Err(Error::Contract(format!("{} lanes exceed {max_lanes} queries", lanes.len())));
    }
    let (h, w) = cam.image_size();
    let (sx, sy) = (layout.step_x(), layout.step_y());
    let mut out = Vec::with_capacity(lanes.len());
    let mut skipped = 0;
    for (idx, lane) in lanes.iter().enumerate() {
        if lane.class_id >= classes {
            return Err(Error::Spec(format!("lane class {} outside {classes} classes", lane.class_id)));
        }
        let visible = lane.visible_points();
        let samples = crate::geometry::resample_polyline(&visible, TARGET_RESAMPLE_STEP);
        let pixels: Vec<[f64; 2]> = samples
            .iter()
            .filter_map(|p| cam.project(*p))
            .map(|[u, v, _]| [u, v])
            .collect();
        if visible.len() < 2 || pixels.len() < 2 {
            skipped += 1;
            continue;
        }
        let mut bev = Vec::with_capacity(layout.cells() * 3);
        for r in 0..layout.rows {
            for c in 0..layout.cols {
                let (x, y) = layout.cell_xy(r, c);
                let p = nearest(&samples, x, y);
                bev.extend([(p[0] - x) / sx, (p[1] - y) / sy, p[2]]);
            }
        }
        let mut image = Vec::with_capacity(h * w * 2);
        for v in 0..h {
            for u in 0..w {
                let p = nearest(&pixels, u as f64, v as f64);
                image.extend([p[0] - u as f64, p[1] - v as f64]);
            }
        }
        let mut scores = vec![0.0; 2 + classes];
        scores[1] = 1.0;
        scores[2 + lane.class_id] = 1.0;
        out.push(LaneTarget {
            image: Tensor::new(&[h * w, 2], image)?,
            bev: Tensor::new(&[layout.cells(), 3], bev)?,
            scores: Tensor::new(&[2 + classes], scores)?,
            lane: idx,
        });
    }
    Ok(Targets { lanes: out, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::polyline_distance;
    use crate::head::{vote_bev, VoteParams};

    fn setup() -> (CameraModel, BevLayout) {
        (CameraModel::synthetic((12, 16)).unwrap(), BevLayout::new(50, 32, (-10.0, 10.0), (3.0, 103.0)).unwrap())
    }

    fn lane(f: impl Fn(f64) -> (f64, f64)) -> Lane3D {
        Lane3D::new(
            (0..=200)
                .map(|i| {
                    let y = 3.0 + 0.5 * i as f64;
                    let (x, z) = f(y);
                    [x, y, z]
                })
                .collect(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn straight_lane_offsets() {
        let (cam, layout) = setup();
        let t = gt_targets(&[lane(|_| (0.0, 0.0))], &cam, &layout, 2, 4).unwrap();
        let bev = &t.lanes[0].bev;
        for r in 0..50 {
            for c in 0..32 {
                let (x, _) = layout.cell_xy(r, c);
                let cell = r * 32 + c;
                assert_eq!(bev.get(&[cell, 1]), 0.0);
                assert!((bev.get(&[cell, 0]) - (-x / layout.step_x())).abs() < 1e-12);
                assert_eq!(bev.get(&[cell, 2]), 0.0);
            }
        }
        // cells on the lane column sit exactly on it
        assert_eq!(bev.get(&[16, 0]), 0.0);
        assert_eq!(t.lanes[0].scores.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn height_channel_follows_lane() {
        let (cam, layout) = setup();
        let t = gt_targets(&[lane(|y| (1.0, 0.02 * y))], &cam, &layout, 2, 4).unwrap();
        let bev = &t.lanes[0].bev;
        let (_, y) = layout.cell_xy(10, 5);
        // nearest 0.5 m arc-length sample is within 0.25 m of the cell's y
        let cell = 10 * 32 + 5;
        let ys = y + bev.get(&[cell, 1]) * layout.step_y();
        assert!((ys - y).abs() <= 0.25);
        assert!((bev.get(&[cell, 2]) - 0.02 * ys).abs() < 1e-9);
    }

    #[test]
    fn image_offsets_point_at_projection() {
        let (cam, layout) = setup();
        let l = lane(|_| (1.5, 0.0));
        let t = gt_targets(&[l.clone()], &cam, &layout, 2, 4).unwrap();
        let pix: Vec<[f64; 2]> = l.points.iter().filter_map(|p| cam.project(*p)).map(|[u, v, _]| [u, v]).collect();
        for v in 0..12 {
            for u in 0..16 {
                let d = t.lanes[0].image.get(&[v * 16 + u, 0]);
                let e = t.lanes[0].image.get(&[v * 16 + u, 1]);
                let hit = [u as f64 + d, v as f64 + e];
                assert!(polyline_distance(hit, &pix) < 1e-6);
            }
        }
    }

    #[test]
    fn too_many_lanes_and_bad_class() {
        let (cam, layout) = setup();
        let l = lane(|_| (0.0, 0.0));
        assert!(matches!(gt_targets(&[l.clone(), l.clone()], &cam, &layout, 2, 1), Err(Error::Contract(_))));
        let mut bad = l;
        bad.class_id = 5;
        assert!(gt_targets(&[bad], &cam, &layout, 2, 4).is_err());
    }

    #[test]
    fn lane_behind_camera_is_skipped() {
        let (cam, layout) = setup();
        let behind = Lane3D::new(vec![[0.0, -30.0, 0.0], [0.0, -20.0, 0.0]], 0).unwrap();
        let t = gt_targets(&[behind, lane(|_| (0.0, 0.0))], &cam, &layout, 2, 4).unwrap();
        assert_eq!(t.skipped, 1);
        assert_eq!(t.lanes.len(), 1);
        assert_eq!(t.lanes[0].lane, 1);
    }

    #[test]
    fn decoding_targets_recovers_lanes() {
        let (cam, layout) = setup();
        let lanes = [lane(|y| (-3.0 + 0.0004 * y * y, 0.0)), lane(|y| (2.4 + 0.01 * y, 0.01 * y))];
        let t = gt_targets(&lanes, &cam, &layout, 2, 4).unwrap();
        let diag = layout.step_x().hypot(layout.step_y());
        for (target, gt) in t.lanes.iter().zip(&lanes) {
            let r = Tensor::new(&[1, layout.cells(), 3], target.bev.data().to_vec()).unwrap();
            let s = Tensor::new(&[1, 4], target.scores.data().to_vec()).unwrap();
            let det = vote_bev(&r, &s, &layout, &VoteParams { threshold: 0.7, width: 1.0 }).unwrap();
            let pts = &det.lanes[0].points;
            let line: Vec<[f64; 2]> = gt.points.iter().map(|p| [p[0], p[1]]).collect();
            for p in pts {
                assert!(polyline_distance([p[0], p[1]], &line) <= diag, "{p:?}");
            }
            // every BEV row the lane crosses gets a point
            for row in 0..layout.rows {
                let y = layout.cell_xy(row, 0).1;
                assert!(pts.iter().any(|p| p[1] == y), "row {row}");
            }
        }
    }
}
