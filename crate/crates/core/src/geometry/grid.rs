use nalgebra::Vector4;

use super::camera::CameraModel;
use crate::error::{Error, Result};

/// Bin centers `lo + (i + 0.5)·(hi − lo)/n`.
pub fn bin_centers(n: usize, range: (f64, f64)) -> Vec<f64> {
    let step = (range.1 - range.0) / n as f64;
    (0..n).map(|i| range.0 + (i as f64 + 0.5) * step).collect()
}

fn check_range(name: &str, r: (f64, f64)) -> Result<()> {
    if !(r.0 < r.1) || !r.0.is_finite() || !r.1.is_finite() {
        return Err(Error::Config(format!("{name} range {r:?} must be finite and increasing")));
    }
    Ok(())
}

/// Camera-space lattice `(u·d, v·d, d, 1)` over feature pixels and depth
/// bins, stored `[row][col][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumGrid {
    pub rows: usize,
    pub cols: usize,
    pub depths: Vec<f64>,
    pub points: Vec<[f64; 4]>,
}

/// The frustum lattice mapped into road space by `K⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumGrid3D {
    pub rows: usize,
    pub cols: usize,
    pub bins: usize,
    pub points: Vec<[f64; 4]>,
}

pub fn build_frustum_grid(
    rows: usize,
    cols: usize,
    bins: usize,
    depth_range: (f64, f64),
) -> Result<FrustumGrid> {
    if rows == 0 || cols == 0 || bins == 0 {
        return Err(Error::Config("frustum extents must be positive".into()));
    }
    check_range("depth", depth_range)?;
    if depth_range.0 < 0.0 {
        return Err(Error::Config("depth range must be non-negative".into()));
    }
    let depths = bin_centers(bins, depth_range);
    let mut points = Vec::with_capacity(rows * cols * bins);
    for v in 0..rows {
        for u in 0..cols {
            for &d in &depths {
                points.push([u as f64 * d, v as f64 * d, d, 1.0]);
            }
        }
    }
    Ok(FrustumGrid { rows, cols, depths, points })
}

impl FrustumGrid {
    pub fn bins(&self) -> usize {
        self.depths.len()
    }

    pub fn at(&self, row: usize, col: usize, bin: usize) -> [f64; 4] {
        self.points[(row * self.cols + col) * self.bins() + bin]
    }
}

impl FrustumGrid3D {
    pub fn at(&self, row: usize, col: usize, bin: usize) -> [f64; 4] {
        self.points[(row * self.cols + col) * self.bins + bin]
    }
}

/// Left-multiplies every lattice point by `K⁻¹` and renormalizes the
/// homogeneous coordinate.
pub fn unproject(grid: &FrustumGrid, cam: &CameraModel) -> Result<FrustumGrid3D> {
    let inv = cam.inverse();
    let points = grid
        .points
        .iter()
        .map(|p| {
            let q = inv * Vector4::new(p[0], p[1], p[2], p[3]);
            if q[3].abs() < 1e-15 {
                return Err(Error::Geometry("point maps to infinity".into()));
            }
            Ok([q[0] / q[3], q[1] / q[3], q[2] / q[3], 1.0])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrustumGrid3D { rows: grid.rows, cols: grid.cols, bins: grid.bins(), points })
}

/// Road-space lattice over BEV cells and height bins, stored
/// `[row][col][bin]`; row indexes y, column indexes x.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub rows: usize,
    pub cols: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub heights: Vec<f64>,
    pub points: Vec<[f64; 4]>,
}

/// BEV raster geometry without the height axis.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BevLayout {
    pub rows: usize,
    pub cols: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl BevLayout {
    pub fn new(rows: usize, cols: usize, x_range: (f64, f64), y_range: (f64, f64)) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config("BEV extents must be positive".into()));
        }
        check_range("x", x_range)?;
        check_range("y", y_range)?;
        Ok(Self { rows, cols, x_range, y_range })
    }

    /// Meters per column.
    pub fn step_x(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) / self.cols as f64
    }

    /// Meters per row.
    pub fn step_y(&self) -> f64 {
        (self.y_range.1 - self.y_range.0) / self.rows as f64
    }

    /// Metric `(x, y)` of cell `(row, col)`.
    pub fn cell_xy(&self, row: usize, col: usize) -> (f64, f64) {
        (
            col as f64 * self.step_x() + self.x_range.0,
            row as f64 * self.step_y() + self.y_range.0,
        )
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

pub fn build_bev_grid(
    rows: usize,
    cols: usize,
    bins: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
    z_range: (f64, f64),
) -> Result<BevGrid> {
    if bins == 0 {
        return Err(Error::Config("height bin count must be positive".into()));
    }
    let layout = BevLayout::new(rows, cols, x_range, y_range)?;
    check_range("z", z_range)?;
    let heights = bin_centers(bins, z_range);
    let mut points = Vec::with_capacity(rows * cols * bins);
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = layout.cell_xy(r, c);
            for &z in &heights {
                points.push([x, y, z, 1.0]);
            }
        }
    }
    Ok(BevGrid { rows, cols, x_range, y_range, heights, points })
}

impl BevGrid {
    pub fn bins(&self) -> usize {
        self.heights.len()
    }

    pub fn layout(&self) -> BevLayout {
        BevLayout { rows: self.rows, cols: self.cols, x_range: self.x_range, y_range: self.y_range }
    }

    pub fn at(&self, row: usize, col: usize, bin: usize) -> [f64; 4] {
        self.points[(row * self.cols + col) * self.bins() + bin]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    #[test]
    fn single_depth_bin_is_midpoint() {
        let g = build_frustum_grid(2, 3, 1, (0.0, 2.0)).unwrap();
        assert_eq!(g.depths, vec![1.0]);
        assert!(g.points.iter().all(|p| p[2] == 1.0 && p[3] == 1.0));
    }

    #[test]
    fn default_depth_bins() {
        let g = build_frustum_grid(1, 1, 50, (0.0, 100.0)).unwrap();
        assert_eq!(g.depths[0], 1.0);
        assert_eq!(g.depths[49], 99.0);
    }

    #[test]
    fn origin_pixel_point() {
        let g = build_frustum_grid(2, 2, 1, (0.0, 4.0)).unwrap();
        assert_eq!(g.at(0, 0, 0), [0.0, 0.0, 2.0, 1.0]);
        assert_eq!(g.at(1, 1, 0), [2.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn frustum_rejects_bad_config() {
        assert!(matches!(build_frustum_grid(0, 1, 1, (0.0, 1.0)), Err(Error::Config(_))));
        assert!(matches!(build_frustum_grid(1, 1, 1, (5.0, 1.0)), Err(Error::Config(_))));
    }

    #[test]
    fn identity_unprojection() {
        let cam = CameraModel::new(Matrix4::identity(), (3, 4), 0.0).unwrap();
        let g = build_frustum_grid(3, 4, 5, (0.0, 10.0)).unwrap();
        let g3 = unproject(&g, &cam).unwrap();
        assert_eq!(g3.points, g.points);
    }

    #[test]
    fn translation_unprojection() {
        let h = 1.7;
        let mut k = Matrix4::identity();
        k[(2, 3)] = h;
        let cam = CameraModel::new(k, (2, 2), h).unwrap();
        let g = build_frustum_grid(2, 2, 3, (0.0, 6.0)).unwrap();
        let g3 = unproject(&g, &cam).unwrap();
        for (p, q) in g.points.iter().zip(&g3.points) {
            assert!((q[2] - (p[2] - h)).abs() < 1e-12);
            assert_eq!(q[3], 1.0);
        }
    }

    #[test]
    fn unprojected_points_reproject_to_their_pixels() {
        let cam = CameraModel::synthetic((4, 6)).unwrap();
        let g = build_frustum_grid(4, 6, 3, (0.0, 30.0)).unwrap();
        let g3 = unproject(&g, &cam).unwrap();
        let p = g3.at(2, 5, 1);
        let [u, v, d] = cam.project([p[0], p[1], p[2]]).unwrap();
        assert!((u - 5.0).abs() < 1e-9 && (v - 2.0).abs() < 1e-9 && (d - 15.0).abs() < 1e-9);
    }

    #[test]
    fn bev_spacing() {
        let g = build_bev_grid(1, 2, 1, (-10.0, 10.0), (3.0, 103.0), (-5.0, 5.0)).unwrap();
        assert_eq!(g.layout().step_x(), 10.0);
        assert_eq!(g.at(0, 0, 0)[0], -10.0);
        assert_eq!(g.at(0, 1, 0)[0], 0.0);
        assert_eq!(g.heights, vec![0.0]);
        let g = build_bev_grid(50, 32, 50, (-10.0, 10.0), (3.0, 103.0), (-5.0, 5.0)).unwrap();
        assert_eq!(g.layout().step_y(), 2.0);
        assert!(g.points.iter().all(|p| p[3] == 1.0));
    }

    #[test]
    fn bev_inverted_range() {
        assert!(matches!(
            build_bev_grid(2, 2, 2, (10.0, -10.0), (3.0, 103.0), (-5.0, 5.0)),
            Err(Error::Config(_))
        ));
    }
}
