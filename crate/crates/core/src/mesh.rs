//! Triangle meshes, simple procedural shapes and Wavefront OBJ export.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = TriMesh { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() {
            return Err(Error::invalid("mesh has no vertices"));
        }
        if let Some(v) = self.vertices.iter().find(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("non-finite mesh vertex {v:?}")));
        }
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::invalid(format!(
                    "face {fi} references vertex out of range (vertex count {n})"
                )));
            }
        }
        Ok(())
    }

    /// Appends `other`, offsetting its face indices. Returns the index of the
    /// first appended vertex.
    pub fn append(&mut self, other: &TriMesh) -> usize {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        base
    }

    pub fn map_vertices(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }
}

/// Axis-aligned box centred at the origin, each face split into an
/// `divisions[a] × divisions[b]` grid. Shared edge vertices are merged and
/// faces wind counter-clockwise seen from outside.
pub fn subdivided_box(half_extents: Vector3<f64>, divisions: [usize; 3]) -> TriMesh {
    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    let mut faces = Vec::new();
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    let mut vertex_id = |p: Vector3<f64>, vertices: &mut Vec<Vector3<f64>>| -> usize {
        let key = [
            (p.x * 1e9).round() as i64,
            (p.y * 1e9).round() as i64,
            (p.z * 1e9).round() as i64,
        ];
        *index.entry(key).or_insert_with(|| {
            vertices.push(p);
            vertices.len() - 1
        })
    };

    for axis in 0..3 {
        let u_axis = (axis + 1) % 3;
        let v_axis = (axis + 2) % 3;
        let (nu, nv) = (divisions[u_axis].max(1), divisions[v_axis].max(1));
        for sign in [1.0, -1.0] {
            let mut grid = vec![vec![0usize; nv + 1]; nu + 1];
            for (i, row) in grid.iter_mut().enumerate() {
                for (j, slot) in row.iter_mut().enumerate() {
                    let mut p = Vector3::zeros();
                    p[axis] = sign * half_extents[axis];
                    p[u_axis] = half_extents[u_axis] * (2.0 * i as f64 / nu as f64 - 1.0);
                    p[v_axis] = half_extents[v_axis] * (2.0 * j as f64 / nv as f64 - 1.0);
                    *slot = vertex_id(p, &mut vertices);
                }
            }
            for i in 0..nu {
                for j in 0..nv {
                    let (a, b, c, d) = (grid[i][j], grid[i + 1][j], grid[i + 1][j + 1], grid[i][j + 1]);
                    // (u, v, axis) is right-handed, so (a, b, c) faces +axis.
                    if sign > 0.0 {
                        faces.push([a, b, c]);
                        faces.push([a, c, d]);
                    } else {
                        faces.push([a, c, b]);
                        faces.push([a, d, c]);
                    }
                }
            }
        }
    }
    TriMesh { vertices, faces }
}

/// UV sphere with `rings` latitude bands and `segments` longitude steps.
pub fn uv_sphere(radius: f64, rings: usize, segments: usize) -> TriMesh {
    let rings = rings.max(2);
    let segments = segments.max(3);
    let mut vertices = vec![Vector3::new(0.0, radius, 0.0)];
    for r in 1..rings {
        let phi = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let lambda = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(Vector3::new(
                radius * phi.sin() * lambda.cos(),
                radius * phi.cos(),
                -radius * phi.sin() * lambda.sin(),
            ));
        }
    }
    vertices.push(Vector3::new(0.0, -radius, 0.0));
    let bottom = vertices.len() - 1;
    let ring = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(1, s), ring(1, s + 1)]);
        faces.push([bottom, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (ring(r, s), ring(r + 1, s), ring(r + 1, s + 1), ring(r, s + 1));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    TriMesh { vertices, faces }
}

/// Wavefront OBJ text, triangles only, 1-based indices.
pub fn to_obj(vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> String {
    let mut out = String::with_capacity(vertices.len() * 48 + faces.len() * 24);
    for v in vertices {
        let _ = writeln!(out, "v {:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for f in faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signed_volume(mesh: &TriMesh) -> f64 {
        mesh.faces
            .iter()
            .map(|f| {
                let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    #[test]
    fn box_is_closed_and_outward() {
        let mesh = subdivided_box(Vector3::new(0.5, 1.0, 1.5), [2, 3, 4]);
        // 2 * (ab + bc + ca) grid cells, two triangles each
        assert_eq!(mesh.faces.len(), 2 * 2 * (2 * 3 + 3 * 4 + 4 * 2));
        // Euler: V - E + F = 2 for a closed genus-0 surface.
        let f = mesh.faces.len() as i64;
        let e = f * 3 / 2;
        assert_eq!(mesh.vertices.len() as i64 - e + f, 2);
        assert!((signed_volume(&mesh) - 1.0 * 2.0 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn sphere_is_outward() {
        let mesh = uv_sphere(1.0, 12, 24);
        let vol = signed_volume(&mesh);
        assert!(vol > 0.0 && vol < 4.0 / 3.0 * std::f64::consts::PI);
        mesh.validate().unwrap();
    }

    #[test]
    fn obj_uses_one_based_indices() {
        let mesh = TriMesh::new(
            vec![Vector3::zeros(), Vector3::x(), Vector3::y()],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let text = to_obj(&mesh.vertices, &mesh.faces);
        assert!(text.ends_with("f 1 2 3\n"));
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
    }

    #[test]
    fn out_of_range_face_rejected() {
        assert!(TriMesh::new(vec![Vector3::zeros()], vec![[0, 0, 1]]).is_err());
        assert!(TriMesh::new(vec![], vec![]).is_err());
    }
}
