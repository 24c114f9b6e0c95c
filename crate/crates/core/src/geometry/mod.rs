//! Camera model, frustum and BEV lattices, lane polylines and inverse
//! perspective mapping.

mod camera;
mod grid;
mod lane;

pub use camera::CameraModel;
pub use grid::{
    bin_centers, build_bev_grid, build_frustum_grid, unproject, BevGrid, BevLayout, FrustumGrid,
    FrustumGrid3D,
};
pub use lane::{
    ipm_project, polyline_distance, polyline_distance3, project_lane, resample_polyline,
    segment_distance2, Lane2D, Lane3D,
};
