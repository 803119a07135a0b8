use crate::error::Result;
use crate::field::{TemplateSdf, Triplane, VelocityDecoder};
use serde::{Deserialize, Serialize};

use crate::flow::{deform_grid, integrate_inverse, jacobian_grid, FlowConfig, NeuralField, VelocityField};
use crate::geometry::intersect::self_intersections;
use crate::geometry::decimate::decimate;
use crate::geometry::grid::eval_sdf_grid;
use crate::geometry::marching_cubes::marching_cubes;
use crate::geometry::mesh::TriMesh;

/// Carries the template mesh into instance space through the inverse flow.
/// Triangles are copied unchanged.
pub fn register_template(mesh: &TriMesh, tp: &Triplane, dec: &VelocityDecoder, cfg: &FlowConfig) -> Result<TriMesh> {
    register_with_field(mesh, &NeuralField::new(tp, dec), cfg)
}

pub fn register_with_field<F: VelocityField>(mesh: &TriMesh, field: &F, cfg: &FlowConfig) -> Result<TriMesh> {
    let vertices = mesh.vertices.iter().map(|&v| integrate_inverse(field, v, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(TriMesh { vertices, triangles: mesh.triangles.clone() })
}

/// Zero level set of the template SDF, decimated to `target_vertices`.
/// Extraction starts at `n` and is refined (up to 4 times, by 1.5×) while the
/// raw mesh has fewer vertices than the target. Grid values on the cube faces
/// are raised to at least one grid spacing, so the surface is always closed.
pub fn template_mesh(tmpl: &TemplateSdf, n: usize, target_vertices: usize) -> Result<TriMesh> {
    let mut n = n;
    let mut mesh = TriMesh::default();
    for _ in 0..5 {
        let h = 2.0 / (n as f64 - 1.0);
        let grid = eval_sdf_grid(
            |p| {
                let v = tmpl.sdf(p)?;
                let on_face = p.iter().any(|c| (c.abs() - 1.0).abs() < 1e-9);
                Ok(if on_face { v.max(h) } else { v })
            },
            n,
        )?;
        mesh = marching_cubes(&grid, 0.0);
        if mesh.vertices.len() >= target_vertices || mesh.is_empty() {
            break;
        }
        n = n * 3 / 2;
    }
    Ok(decimate(&mesh, target_vertices))
}

/// Topology checks on a template mesh carried onto one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyReport {
    pub vertices: usize,
    pub connectivity_unchanged: bool,
    pub watertight: bool,
    /// Over interior points of an `n³` lattice under the forward flow.
    pub positive_jacobian_fraction: f64,
    pub self_intersections: usize,
}

pub fn topology_report<F: VelocityField>(
    template: &TriMesh,
    registered: &TriMesh,
    field: &F,
    jacobian_n: usize,
    forward: &FlowConfig,
) -> Result<TopologyReport> {
    let jf = jacobian_grid(&deform_grid(field, jacobian_n, forward)?)?;
    Ok(TopologyReport {
        vertices: registered.vertices.len(),
        connectivity_unchanged: registered.triangles == template.triangles,
        watertight: registered.is_watertight(),
        positive_jacobian_fraction: jf.positive_fraction(),
        self_intersections: self_intersections(registered),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{LinearField, ZeroField};

    #[test]
    fn zero_field_leaves_the_mesh_unchanged() {
        let m = TriMesh::icosphere(2).scaled(0.5);
        assert_eq!(register_with_field(&m, &ZeroField, &FlowConfig::inverse(8)).unwrap(), m);
    }

    #[test]
    fn connectivity_is_preserved() {
        let m = TriMesh::icosphere(2).scaled(0.5);
        let field = LinearField { matrix: [[0.1, 0.2, 0.0], [-0.1, 0.0, 0.3], [0.0, 0.1, -0.2]] };
        let r = register_with_field(&m, &field, &FlowConfig::inverse(8)).unwrap();
        assert_eq!(r.triangles, m.triangles);
        assert_ne!(r.vertices, m.vertices);
        assert!(register_with_field(&m, &field, &FlowConfig::forward(8)).is_err());
        let rep = topology_report(&m, &r, &field, 8, &FlowConfig::forward(8)).unwrap();
        assert!(rep.connectivity_unchanged && rep.watertight);
        assert_eq!((rep.positive_jacobian_fraction, rep.self_intersections), (1.0, 0));
    }
}
