use serde::{Deserialize, Serialize};

use super::camera::CameraModel;
use crate::error::{Error, Result};

/// Ordered 3-D lane polyline in road coordinates (meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane3D {
    pub points: Vec<[f64; 3]>,
    pub class_id: usize,
    pub visibility: Vec<bool>,
}

/// Lane in image view. `points` holds the pixels `(u, v)` of the source
/// points that projected; `visibility` is indexed like the source lane and
/// is false where a point was dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane2D {
    pub points: Vec<[f64; 2]>,
    pub class_id: usize,
    pub visibility: Vec<bool>,
}

impl Lane3D {
    /// All points visible. Fails unless y is strictly increasing and there
    /// are at least two points.
    pub fn new(points: Vec<[f64; 3]>, class_id: usize) -> Result<Self> {
        let n = points.len();
        let lane = Self { points, class_id, visibility: vec![true; n] };
        lane.validate()?;
        Ok(lane)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Geometry("lane needs at least two points".into()));
        }
        if self.visibility.len() != self.points.len() {
            return Err(Error::Geometry("visibility length differs from point count".into()));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("lane point is not finite".into()));
        }
        if self.points.windows(2).any(|w| !(w[1][1] > w[0][1])) {
            return Err(Error::Geometry("lane y must be strictly increasing".into()));
        }
        if self.visible_count() < 2 {
            return Err(Error::Geometry("lane needs at least two visible points".into()));
        }
        Ok(())
    }

    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|&&v| v).count()
    }

    pub fn visible_points(&self) -> Vec<[f64; 3]> {
        self.points
            .iter()
            .zip(&self.visibility)
            .filter(|(_, &v)| v)
            .map(|(p, _)| *p)
            .collect()
    }

    /// Total 3-D arc length.
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist3(w[0], w[1])).sum()
    }

    /// Points spaced `step` apart along the 3-D arc, starting at the first
    /// point and always including the last one.
    pub fn resample(&self, step: f64) -> Vec<[f64; 3]> {
        resample_polyline(&self.points, step)
    }
}

pub(crate) fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Arc-length resampling of a 3-D polyline.
pub fn resample_polyline(points: &[[f64; 3]], step: f64) -> Vec<[f64; 3]> {
    let Some(&first) = points.first() else { return Vec::new() };
    let mut out = vec![first];
    let mut next = step;
    let mut travelled = 0.0;
    for w in points.windows(2) {
        let seg = dist3(w[0], w[1]);
        while seg > 0.0 && next <= travelled + seg + 1e-12 {
            let t = ((next - travelled) / seg).min(1.0);
            out.push([
                w[0][0] + t * (w[1][0] - w[0][0]),
                w[0][1] + t * (w[1][1] - w[0][1]),
                w[0][2] + t * (w[1][2] - w[0][2]),
            ]);
            next += step;
        }
        travelled += seg;
    }
    let last = *points.last().unwrap();
    if out.last().map_or(true, |p| dist3(*p, last) > 1e-9) {
        out.push(last);
    }
    out
}

/// Squared distance from `p` to segment `ab` in 2-D.
pub fn segment_distance2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    qx * qx + qy * qy
}

/// Distance from `p` to the nearest point of a 2-D polyline.
pub fn polyline_distance(p: [f64; 2], line: &[[f64; 2]]) -> f64 {
    match line {
        [] => f64::INFINITY,
        [only] => ((p[0] - only[0]).powi(2) + (p[1] - only[1]).powi(2)).sqrt(),
        _ => line
            .windows(2)
            .map(|w| segment_distance2(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
            .sqrt(),
    }
}

/// Distance from `p` to the nearest point of a 3-D polyline.
pub fn polyline_distance3(p: [f64; 3], line: &[[f64; 3]]) -> f64 {
    let seg = |a: [f64; 3], b: [f64; 3]| {
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let len2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let t = if len2 > 0.0 {
            (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1] + (p[2] - a[2]) * d[2]) / len2)
                .clamp(0.0, 1.0)
        } else {
            0.0
        };
        dist3(p, [a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]])
    };
    match line {
        [] => f64::INFINITY,
        [only] => dist3(p, *only),
        _ => line.windows(2).map(|w| seg(w[0], w[1])).fold(f64::INFINITY, f64::min),
    }
}

/// Perspective projection of a lane. Points behind the camera are dropped
/// and marked invisible; a lane with no point in front is an error.
pub fn project_lane(lane: &Lane3D, cam: &CameraModel) -> Result<Lane2D> {
    let mut points = Vec::with_capacity(lane.points.len());
    let mut visibility = Vec::with_capacity(lane.points.len());
    for p in &lane.points {
        match cam.project(*p) {
            Some([u, v, _]) => {
                points.push([u, v]);
                visibility.push(true);
            }
            None => visibility.push(false),
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyProjection);
    }
    Ok(Lane2D { points, class_id: lane.class_id, visibility })
}

/// Inverse perspective mapping: each pixel ray meets the z = 0 plane.
/// Pixels at or above the horizon are dropped.
pub fn ipm_project(lane: &Lane2D, cam: &CameraModel) -> Result<Lane3D> {
    let points: Vec<[f64; 3]> =
        lane.points.iter().filter_map(|&[u, v]| cam.ground_point(u, v)).collect();
    if points.len() < 2 {
        return Err(Error::Geometry("fewer than two lane pixels below the horizon".into()));
    }
    Lane3D::new(points, lane.class_id)
}
