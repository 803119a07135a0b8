//! Synthetic shapes, SDF sampling, mesh extraction and processing, and the
//! mesh metrics (Chamfer distance, normal consistency, self-intersections).

pub mod analytic;
pub mod decimate;
pub mod grid;
pub mod intersect;
pub mod kdtree;
pub mod marching_cubes;
pub mod mesh;
pub mod metrics;
pub mod obj;
pub mod register;
pub mod sampling;

pub use analytic::{analytic_sdf, ground_truth_mesh, AnalyticShape, EllipsoidFamily, ShapeFamily, ShapeKind};
pub use decimate::decimate;
pub use grid::{eval_sdf_grid, SdfGrid};
pub use intersect::{self_intersections, self_intersections_brute_force, triangles_intersect};
pub use kdtree::KdTree;
pub use marching_cubes::marching_cubes;
pub use mesh::{laplacian_smooth, TriMesh};
pub use metrics::{chamfer, normal_consistency, DEFAULT_METRIC_SAMPLES};
pub use obj::{obj_read, obj_write};
pub use register::{register_template, register_with_field, template_mesh, topology_report, TopologyReport};
pub use sampling::{sample_sdf, surface_points, SampleSpec};
